"""
损失服务 - 训练流程用到的六个目标

    P1 / P2  逐像素交叉熵（E(S_x) 特征 / 补偿后的源域特征）
    EQ1   特征对抗网络 A_f 的最小二乘损失
    EQ2   补偿网络 C 的最小二乘损失（A_f 冻结）
    EQ3   标签对抗网络 A_l 的最小二乘损失
    EQ4   解析网络 E,L 骗过 A_l 的最小二乘损失（A_l 冻结）

对抗损失统一为 ½·mean((A(x) − c)²)，c ∈ {0, 1}。
"""
from typing import Optional

import numpy as np

from adaptparse.engine import functional as F
from adaptparse.engine.tensor import Tensor
from adaptparse.errors import ShapeError
from adaptparse.services.network_service import EXTRACTOR_STRIDE, NetworkInstance


def least_squares(output: Tensor, target: float) -> Tensor:
    """½·mean((output − target)²)"""
    diff = F.add_scalar(output, -float(target)) if target != 0 else output
    return F.mul_scalar(F.mean(F.square(diff)), 0.5)


def downsample_labels(labels: np.ndarray, stride: int = EXTRACTOR_STRIDE) -> np.ndarray:
    """N×H×W 标签图按 stride 最近邻采样到得分图分辨率（取 [stride·a, stride·b] 处的像素）"""
    if labels.ndim != 3:
        raise ShapeError(f"标签图需为 N×H×W，收到 rank {labels.ndim}")
    return np.ascontiguousarray(labels[:, ::stride, ::stride])


def pixelwise_cross_entropy(scores: Tensor, labels: np.ndarray, ignore_id: Optional[int] = None) -> Tensor:
    """
    逐像素交叉熵，非忽略像素上的均值

    Args:
        scores: N×K×h×w 类别得分
        labels: N×h×w 类别 id（已降采样到得分分辨率）
    """
    return F.softmax_cross_entropy(scores, np.asarray(labels), ignore_id=ignore_id)


def _check_same_dims(a: Tensor, b: Tensor, what: str) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{what}: shape mismatch {a.dims} vs {b.dims}")


def loss_feature_adversary(A_f: NetworkInstance, target_feat: Tensor, comp_feat: Tensor) -> Tensor:
    """EQ1：目标域特征回归到 1，补偿后的源域特征回归到 0；输入先 detach"""
    _check_same_dims(target_feat, comp_feat, "loss_feature_adversary")
    real = least_squares(A_f(target_feat.detach()), 1.0)
    fake = least_squares(A_f(comp_feat.detach()), 0.0)
    return F.elementwise_add(real, fake)


def loss_compensator(A_f: NetworkInstance, comp_feat: Tensor) -> Tensor:
    """EQ2：补偿后的源域特征骗 A_f 输出 1；A_f 不接收梯度"""
    with A_f.frozen():
        return least_squares(A_f(comp_feat), 1.0)


def loss_label_adversary(A_l: NetworkInstance, gt_onehot: Tensor, pred_probs: Tensor) -> Tensor:
    """EQ3：one-hot 真值回归到 1，目标域预测概率回归到 0；预测先 detach"""
    k = A_l.profile.num_classes
    for t, what in ((gt_onehot, "gt_onehot"), (pred_probs, "pred_probs")):
        if len(t.dims) != 4 or t.dims[1] != k:
            raise ShapeError(f"loss_label_adversary: {what} 通道数需为 {k}，收到 dims {t.dims}")
    real = least_squares(A_l(gt_onehot.detach()), 1.0)
    fake = least_squares(A_l(pred_probs.detach()), 0.0)
    return F.elementwise_add(real, fake)


def loss_parser_adversarial(A_l: NetworkInstance, pred_probs: Tensor) -> Tensor:
    """EQ4：目标域预测骗 A_l 输出 1；梯度经 L、E 回传，A_l 冻结"""
    with A_l.frozen():
        return least_squares(A_l(pred_probs), 1.0)
