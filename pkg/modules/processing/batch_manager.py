"""Batch processing manager for per-item work (tokenization, evaluation)."""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from enum import Enum, auto
from typing import Any, Callable, Dict, Hashable, Iterable, List, Optional

from tqdm import tqdm

logger = logging.getLogger(__name__)


class ProcessingStatus(Enum):
    """Processing status enumeration."""
    PENDING = auto()
    PROCESSING = auto()
    COMPLETED = auto()
    FAILED = auto()


class ProcessingTask:
    """Represents a processing task with state management."""

    def __init__(self, key: Hashable, payload: Any = None):
        self.key = key
        self.payload = payload
        self.status = ProcessingStatus.PENDING
        self.error: Optional[str] = None
        self.exception: Optional[BaseException] = None
        self.result: Any = None

    def mark_completed(self, result: Any = None):
        """Mark task as completed."""
        self.status = ProcessingStatus.COMPLETED
        self.result = result

    def mark_failed(self, error: BaseException):
        """Mark task as failed with error."""
        self.status = ProcessingStatus.FAILED
        self.exception = error
        self.error = str(error)


class BatchManager:
    """Runs a function over many items on a thread pool.

    Results are collected per task; ``results()`` returns them in the order
    tasks were added regardless of completion order. A failing item is marked
    FAILED and processing continues.

    ``on_failed(key, error)`` is called from the worker thread as soon as an
    item fails.
    """

    def __init__(self, max_concurrent: int = 4,
                 on_failed: Optional[Callable[[Hashable, str], None]] = None,
                 show_progress: bool = False):
        if max_concurrent < 1:
            raise ValueError(f"max_concurrent must be >= 1, got {max_concurrent}")
        self.max_concurrent = max_concurrent
        self.on_failed = on_failed
        self.show_progress = show_progress
        self._tasks: Dict[Hashable, ProcessingTask] = {}
        self._lock = threading.Lock()

    def add_items(self, items: Iterable[tuple]) -> int:
        """Queue ``(key, payload)`` pairs; duplicate keys are skipped."""
        added_count = 0
        for key, payload in items:
            if key in self._tasks:
                logger.warning(f"Duplicate task skipped: {key}")
                continue
            self._tasks[key] = ProcessingTask(key, payload)
            added_count += 1
        return added_count

    def _run_task(self, task: ProcessingTask, fn: Callable[[Any], Any]):
        with self._lock:
            task.status = ProcessingStatus.PROCESSING
        try:
            result = fn(task.payload)
        except Exception as e:
            logger.debug(f"Task {task.key} failed: {e}")
            with self._lock:
                task.mark_failed(e)
            if self.on_failed:
                self.on_failed(task.key, str(e))
            return
        with self._lock:
            task.mark_completed(result)

    def process(self, fn: Callable[[Any], Any], items: Optional[Iterable[tuple]] = None) -> List[Any]:
        """Process all pending tasks with ``fn`` and return results in queue order.

        Args:
            fn: Function applied to each payload
            items: Optional ``(key, payload)`` pairs to queue first

        Returns:
            List: One entry per task; None for failed tasks
        """
        if items is not None:
            self.add_items(items)

        pending = [t for t in self._tasks.values() if t.status == ProcessingStatus.PENDING]
        if not pending:
            logger.warning("No tasks to process")
            return self.results()

        with ThreadPoolExecutor(max_workers=self.max_concurrent) as executor:
            futures = [executor.submit(self._run_task, task, fn) for task in pending]
            iterator = as_completed(futures)
            if self.show_progress:
                iterator = tqdm(iterator, total=len(futures), desc="Processing", leave=False)
            for future in iterator:
                future.result()
        return self.results()

    def results(self) -> List[Any]:
        """Results in the order tasks were added."""
        return [task.result for task in self._tasks.values()]

    def failures(self) -> Dict[Hashable, str]:
        """Error messages of failed tasks keyed by task key."""
        return {k: t.error for k, t in self._tasks.items() if t.status == ProcessingStatus.FAILED}

