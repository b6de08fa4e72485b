"""
分割评估指标
    混淆矩阵 count[i][j] = 真值 i 被预测为 j 的像素数
    像素准确率、前景准确率、平均 precision / recall / F1（只对真值中出现的类别取平均）
"""
import csv
import io
import json
from typing import Dict, List, Optional, Sequence

import numpy as np

from adaptparse import config
from adaptparse.errors import ShapeError, UsageError
from adaptparse.models.schemas import MetricReport


def confusion_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """逐像素统计 K×K 混淆矩阵（int64）；多张图的矩阵直接相加即可累积"""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"confusion_counts: shape mismatch pred {pred.shape} vs gt {gt.shape}")
    p = pred.reshape(-1).astype(np.int64)
    g = gt.reshape(-1).astype(np.int64)
    if p.size and (p.max() >= num_classes or g.max() >= num_classes or p.min() < 0 or g.min() < 0):
        raise UsageError(f"confusion_counts: 类别 id 需在 [0, {num_classes}) 内")
    flat = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def compute_metrics(counts: np.ndarray, bg_class: int = 0) -> MetricReport:
    """
    由混淆矩阵计算评估报告

    没有前景真值像素时 foreground_accuracy 为 None；
    真值中没出现的类别不参与平均，其逐类数值为 None。
    """
    counts = np.asarray(counts, dtype=np.int64)
    k = counts.shape[0]
    if counts.shape != (k, k):
        raise ShapeError(f"compute_metrics: 混淆矩阵需为方阵，收到 {counts.shape}")
    total = int(counts.sum())
    if total <= 0:
        raise UsageError("compute_metrics: 没有任何像素")

    diag = np.diag(counts)
    gt_totals = counts.sum(axis=1)
    pred_totals = counts.sum(axis=0)

    fg = [i for i in range(k) if i != bg_class]
    fg_total = int(gt_totals[fg].sum())
    fg_acc = _ratio(diag[fg].sum(), fg_total) if fg_total > 0 else None

    precision: List[Optional[float]] = []
    recall: List[Optional[float]] = []
    f1: List[Optional[float]] = []
    for c in range(k):
        if gt_totals[c] == 0:
            precision.append(None)
            recall.append(None)
            f1.append(None)
            continue
        p = _ratio(diag[c], pred_totals[c])
        r = _ratio(diag[c], gt_totals[c])
        precision.append(p)
        recall.append(r)
        f1.append(2 * p * r / (p + r) if p + r > 0 else 0.0)

    present = [v for v in f1 if v is not None]
    return MetricReport(
        num_classes=k,
        pixel_accuracy=_ratio(diag.sum(), total),
        foreground_accuracy=fg_acc,
        avg_precision=float(np.mean([v for v in precision if v is not None])),
        avg_recall=float(np.mean([v for v in recall if v is not None])),
        avg_f1=float(np.mean(present)),
        per_class_f1=f1,
        per_class_precision=precision,
        per_class_recall=recall,
    )


# ============================================================
# 序列化
# ============================================================

def report_to_document(report: MetricReport) -> Dict[str, Optional[float]]:
    """扁平键值文档：五个总体指标 + f1_class_<k>"""
    doc: Dict[str, Optional[float]] = {
        "pixel_accuracy": report.pixel_accuracy,
        "foreground_accuracy": report.foreground_accuracy,
        "avg_precision": report.avg_precision,
        "avg_recall": report.avg_recall,
        "avg_f1": report.avg_f1,
    }
    for c, value in enumerate(report.per_class_f1):
        doc[f"f1_class_{c}"] = value
    return doc


def report_to_json(report: MetricReport) -> str:
    return json.dumps(report_to_document(report), indent=2) + "\n"


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def report_to_csv_row(report: MetricReport, iteration: Optional[int] = None) -> List[str]:
    """与 METRIC_CSV_HEADER 对齐的一行；未定义值写为空"""
    return [
        "" if iteration is None else str(iteration),
        _fmt(report.pixel_accuracy),
        _fmt(report.foreground_accuracy),
        _fmt(report.avg_precision),
        _fmt(report.avg_recall),
        _fmt(report.avg_f1),
    ]


def rows_to_csv(rows: Sequence[Sequence[str]], header: Sequence[str] = tuple(config.METRIC_CSV_HEADER)) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def format_report(report: MetricReport, class_names: Optional[Sequence[str]] = None) -> str:
    """人读的多行文本，含逐类 precision / recall / F1"""
    names = list(class_names or [f"class_{c}" for c in range(report.num_classes)])

    def cell(v: Optional[float]) -> str:
        return "   n/a" if v is None else f"{v:6.4f}"

    lines = [
        f"pixel_accuracy      {cell(report.pixel_accuracy)}",
        f"foreground_accuracy {cell(report.foreground_accuracy)}",
        f"avg_precision       {cell(report.avg_precision)}",
        f"avg_recall          {cell(report.avg_recall)}",
        f"avg_f1              {cell(report.avg_f1)}",
        "",
        f"{'class':<16}{'prec':>8}{'recall':>8}{'f1':>8}",
    ]
    for c in range(report.num_classes):
        lines.append(
            f"{names[c]:<16}{cell(report.per_class_precision[c]):>8}"
            f"{cell(report.per_class_recall[c]):>8}{cell(report.per_class_f1[c]):>8}"
        )
    return "\n".join(lines)
