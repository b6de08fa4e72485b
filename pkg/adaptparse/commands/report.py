"""
report 子命令 - 汇总多个运行目录最后一次评估的指标
"""
import logging
import statistics
from pathlib import Path
from typing import Dict, List

from adaptparse import config
from adaptparse.engine.tensor_io import atomic_write_text
from adaptparse.errors import StorageError
from adaptparse.models.schemas import RunManifest
from adaptparse.services.metric_service import rows_to_csv

logger = logging.getLogger(__name__)

COLUMNS = ["pixel_accuracy", "foreground_accuracy", "avg_precision", "avg_recall", "avg_f1"]
HEADER = ["run", "mode", "seed", "iter"] + COLUMNS
SUMMARY_HEADER = ["mode", "runs", "median_avg_f1", "vs_source_only"]
MODE_ORDER = ["source_only", "feat_adapt", "label_adapt", "adapt", "target_only"]
BASELINE_MODE = "source_only"


def register(subparsers) -> None:
    parser = subparsers.add_parser("report", help="对比多个运行的最终指标", allow_abbrev=False)
    parser.add_argument("runs", nargs="+", help="运行目录")
    parser.add_argument("--out", help="写出对比 CSV")
    parser.set_defaults(handler=run, accepts_overrides=False)


def load_manifest(run_dir: Path) -> RunManifest:
    path = run_dir / config.RUN_MANIFEST_NAME
    if not path.exists():
        raise StorageError(f"运行清单不存在: {path}")
    return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))


def collect_rows(run_dirs: List[str]) -> List[List[str]]:
    rows = []
    for d in run_dirs:
        manifest = load_manifest(Path(d))
        mode = manifest.config.get("train", {}).get("mode", "?")
        if not manifest.metric_history:
            logger.warning(f"{d} 没有评估记录")
            rows.append([d, mode, str(manifest.seed), ""] + [""] * len(COLUMNS))
            continue
        last = manifest.metric_history[-1]
        values = ["" if last["metrics"][k] is None else f"{last['metrics'][k]:.4f}" for k in COLUMNS]
        rows.append([d, mode, str(manifest.seed), str(last["iter"])] + values)
    return rows


def summarize_by_mode(rows: List[List[str]]) -> List[List[str]]:
    """
    按 mode 汇总 avg_f1：运行数、各 seed 的中位数、与 source_only 中位数之差

    没有评估记录的运行不参与中位数。
    """
    f1_index = HEADER.index("avg_f1")
    scores: Dict[str, List[float]] = {}
    for row in rows:
        values = scores.setdefault(row[1], [])
        if row[f1_index]:
            values.append(float(row[f1_index]))
    medians = {mode: statistics.median(v) for mode, v in scores.items() if v}
    baseline = medians.get(BASELINE_MODE)

    ordered = [m for m in MODE_ORDER if m in scores] + sorted(m for m in scores if m not in MODE_ORDER)
    summary = []
    for mode in ordered:
        median = medians.get(mode)
        delta = "" if median is None or baseline is None else f"{median - baseline:+.4f}"
        summary.append([mode, str(len(scores[mode])), "" if median is None else f"{median:.4f}", delta])
    return summary


def format_table(rows: List[List[str]], header: List[str] = HEADER) -> str:
    table = [header] + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)) for r in table)


def run(args, overrides) -> int:
    rows = collect_rows(args.runs)
    print(format_table(rows))
    print()
    print(format_table(summarize_by_mode(rows), header=SUMMARY_HEADER))
    if args.out:
        atomic_write_text(args.out, rows_to_csv(rows, header=HEADER))
    return 0
