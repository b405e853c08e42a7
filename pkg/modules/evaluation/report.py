"""Report files: a JSON record and an aligned plain-text table."""

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from ..constants import REPORT_JSON_NAME, REPORT_TEXT_NAME, TASKS
from ..utils.logger import get_logger
from .evaluate import MetricsReport, TaskMetrics

logger = get_logger(__name__)

COLUMNS = ('Model', 'Task', 'N', 'FAD', 'CLAP', 'KL', 'SSIM', 'SI-SDR', 'SI-SDRi')

NOTES = (
    "FAD and KL are computed on {embedding} embeddings.",
    "KL: mean over dimensions of KL(N_est || N_ref) between per-dimension Gaussian fits.",
    "SSIM: log-magnitude spectrograms (window {window}, hop {hop}), jointly max-normalised.",
    "SI-SDR values are capped at {cap:g} dB; '-' marks metrics not defined for a task.",
)


def _cell(value: Optional[float]) -> str:
    return '-' if value is None else f"{value:.3f}"


def table_rows(report: MetricsReport) -> List[List[str]]:
    rows = []
    for task in TASKS:
        metrics = report.tasks.get(task, TaskMetrics())
        rows.append([report.model, task, str(metrics.count), _cell(metrics.fad), metrics.clap,
                     _cell(metrics.kl), _cell(metrics.ssim), _cell(metrics.si_sdr), _cell(metrics.si_sdri)])
    return rows


def format_table(reports: Sequence[MetricsReport], metrics_config: Optional[Dict] = None) -> str:
    """Aligned table with one block of task rows per model."""
    metrics_config = metrics_config or {}
    rows = [list(COLUMNS)]
    for report in reports:
        rows.extend(table_rows(report))
    widths = [max(len(row[i]) for row in rows) for i in range(len(COLUMNS))]
    lines = ['  '.join(cell.ljust(w) if i < 2 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             .rstrip() for row in rows]
    lines.insert(1, '  '.join('-' * w for w in widths))

    embedding = reports[0].embedding if reports else 'codec_frame_features'
    notes = [note.format(embedding=embedding, window=metrics_config.get('ssim_window', '-'),
                         hop=metrics_config.get('ssim_hop', '-'),
                         cap=metrics_config.get('si_sdr_cap_db', 100.0)) for note in NOTES]
    for report in reports:
        if report.missing or report.failed:
            notes.append(f"{report.model}: {len(report.missing)} missing, {len(report.failed)} failed triplets.")
    return '\n'.join(lines + [''] + notes) + '\n'


def write_report(reports: Union[MetricsReport, Sequence[MetricsReport]], out_dir: Union[str, Path],
                 metrics_config: Optional[Dict] = None) -> Path:
    """Write ``report.json`` and ``report.txt`` into ``out_dir``; returns the JSON path."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / REPORT_JSON_NAME
    with open(json_path, 'w', encoding='utf-8') as f:
        json.dump({'reports': [r.to_dict() for r in reports]}, f, indent=2, sort_keys=True)
        f.write('\n')
    with open(out_dir / REPORT_TEXT_NAME, 'w', encoding='utf-8') as f:
        f.write(format_table(reports, metrics_config))
    logger.info(f"Wrote report for {len(reports)} model(s) to {out_dir}")
    return json_path
