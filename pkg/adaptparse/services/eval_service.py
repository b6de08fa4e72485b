"""
评估与推理服务

推理路径只经过 E 与 L；stride 8 的预测图按最近邻放大到图像分辨率后再计分。
"""
import io
import logging
from typing import Tuple

import numpy as np
from PIL import Image

from adaptparse import config
from adaptparse.engine.tensor import Tensor, no_grad
from adaptparse.errors import UsageError
from adaptparse.models.schemas import MetricReport
from adaptparse.services.dataset_service import Dataset
from adaptparse.services.metric_service import compute_metrics, confusion_counts
from adaptparse.services.network_service import EXTRACTOR_STRIDE, NetworkInstance, forward_parse

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 16


def upsample_labels(pred: np.ndarray, image_hw: Tuple[int, int], stride: int = EXTRACTOR_STRIDE) -> np.ndarray:
    """N×h×w → N×H×W，像素 (i, j) 取 pred[i // stride, j // stride]"""
    h, w = image_hw
    up = np.repeat(np.repeat(pred, stride, axis=1), stride, axis=2)
    if up.shape[1] < h or up.shape[2] < w:
        raise UsageError(f"预测图 {pred.shape[1:]} 放大后不足以覆盖 {image_hw}")
    return np.ascontiguousarray(up[:, :h, :w])


def predict_labels(E: NetworkInstance, L: NetworkInstance, images: np.ndarray) -> np.ndarray:
    """N×3×H×W 图像 → N×H×W 的 u8 类别图（E、L 需处于 eval 模式）"""
    with no_grad():
        probs = forward_parse(E, L, Tensor(images.astype(E.parameters()[0].dtype)))
    pred = probs.data.argmax(axis=1).astype(np.uint8)
    return upsample_labels(pred, images.shape[2:])


def evaluate_dataset(
    E: NetworkInstance,
    L: NetworkInstance,
    dataset: Dataset,
    batch_size: int = EVAL_BATCH_SIZE,
    bg_class: int = 0,
) -> MetricReport:
    """在带标签的数据集上评估；结束后恢复 E、L 原来的 train/eval 模式"""
    if not dataset.has_labels:
        raise UsageError(f"数据集 {dataset.root} 没有标签，无法评估（目标域训练集的标签被扣留）")
    k = L.profile.num_classes
    was_training = (E.training, L.training)
    E.eval()
    L.eval()
    try:
        counts = np.zeros((k, k), dtype=np.int64)
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start:start + batch_size]
            pred = predict_labels(E, L, images)
            counts += confusion_counts(pred, dataset.labels[start:start + batch_size], k)
    finally:
        E.training, L.training = was_training
    report = compute_metrics(counts, bg_class=bg_class)
    logger.info(
        f"评估 {dataset.root}: pixel_acc={report.pixel_accuracy:.4f} avg_f1={report.avg_f1:.4f}"
    )
    return report


# ============================================================
# 可视化
# ============================================================

def palette_for(num_classes: int) -> np.ndarray:
    """前 4 类用固定调色板，其余类别用固定种子生成的颜色"""
    colors = list(config.PALETTE[:num_classes])
    if num_classes > len(colors):
        extra = np.random.default_rng(12).integers(40, 256, size=(num_classes - len(colors), 3))
        colors += [tuple(int(v) for v in row) for row in extra]
    return np.array(colors, dtype=np.uint8)


def label_map_to_bmp(labels: np.ndarray, num_classes: int) -> bytes:
    """H×W 类别图 → 未压缩 BMP 字节"""
    rgb = palette_for(num_classes)[labels]
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="BMP")
    return buf.getvalue()
