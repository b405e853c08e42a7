import threading
import time

import pytest

from modules.processing.batch_manager import BatchManager


def test_results_keep_queue_order():
    def slow_square(x):
        time.sleep(0.01 * (5 - x))
        return x * x

    manager = BatchManager(max_concurrent=4)
    assert manager.process(slow_square, [(i, i) for i in range(5)]) == [0, 1, 4, 9, 16]
    assert manager.failures() == {}


def test_failure_does_not_stop_the_batch():
    failed = []

    def fn(x):
        if x == 2:
            raise ValueError("bad item")
        return x

    manager = BatchManager(max_concurrent=2, on_failed=lambda key, error: failed.append((key, error)))
    assert manager.process(fn, [(f"k{i}", i) for i in range(4)]) == [0, 1, None, 3]
    assert manager.failures() == {'k2': 'bad item'}
    assert failed == [('k2', 'bad item')]


def test_on_failed_fires_once_per_failing_item():
    failed = []
    lock = threading.Lock()

    def record(key, error):
        with lock:
            failed.append(key)

    def fn(x):
        if x % 2:
            raise RuntimeError(f"odd {x}")
        return x

    manager = BatchManager(max_concurrent=3, on_failed=record)
    manager.process(fn, [(i, i) for i in range(6)])
    assert sorted(failed) == [1, 3, 5]
    assert manager.failures() == {1: 'odd 1', 3: 'odd 3', 5: 'odd 5'}


def test_duplicate_keys_are_skipped():
    manager = BatchManager()
    assert manager.add_items([('a', 1), ('a', 2), ('b', 3)]) == 2
    assert manager.process(lambda x: x) == [1, 3]


def test_second_process_runs_only_new_items():
    calls = []
    manager = BatchManager(max_concurrent=1)
    manager.process(lambda x: calls.append(x) or x, [('a', 1)])
    assert manager.process(lambda x: calls.append(x) or x, [('b', 2)]) == [1, 2]
    assert calls == [1, 2]


def test_empty_queue():
    manager = BatchManager()
    assert manager.process(lambda x: x) == []


def test_invalid_concurrency():
    with pytest.raises(ValueError):
        BatchManager(max_concurrent=0)
