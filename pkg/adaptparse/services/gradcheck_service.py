"""
整网梯度检查

每个网络取 64 位副本，在一个小的随机输入上用 sum(out ⊙ R) 作为标量损失，
对全部参数做有限差分比较。BN 保持 train 模式（批统计量），但不更新 running stats。
"""
import logging
from typing import Dict, Tuple

import numpy as np

from adaptparse.config import GRADCHECK_EPSILON, GRADCHECK_MIN_COORDS, GRADCHECK_TOLERANCE
from adaptparse.engine.gradcheck import GradCheckReport, grad_check, projection_loss, random_projection
from adaptparse.engine.tensor import Tensor
from adaptparse.models.schemas import ScaleProfile
from adaptparse.services.network_service import BUILDERS, NETWORK_TAGS

logger = logging.getLogger(__name__)

# 注入故障时解析梯度乘以该系数
FAULT_SCALE = 1.01


def check_input_dims(tag: str, profile: ScaleProfile, batch: int = 2) -> Tuple[int, ...]:
    """梯度检查用的小输入尺寸"""
    c5 = profile.stage_channels[4]
    if tag == "E":
        return (batch, 3, 17, 13)
    if tag == "C":
        return (batch, profile.stage_channels[0], 9, 7)
    if tag == "L":
        return (batch, c5, 5, 4)
    if tag == "A_f":
        return (batch, c5, 5, 4)
    # A_l 每层 stride 2，需要足够的空间尺寸
    return (batch, profile.num_classes, 13, 13)


def check_network(
    tag: str,
    profile: ScaleProfile,
    seed: int = 0,
    grad_scale: float = 1.0,
    tolerance: float = GRADCHECK_TOLERANCE,
    epsilon: float = GRADCHECK_EPSILON,
    min_coords: int = GRADCHECK_MIN_COORDS,
) -> GradCheckReport:
    net = BUILDERS[tag](profile, seed).to_dtype(np.float64)
    net.train()
    rng = np.random.default_rng(np.random.SeedSequence([seed, NETWORK_TAGS.index(tag)]))
    dims = check_input_dims(tag, profile)
    x = Tensor(rng.standard_normal(dims))
    if tag == "A_l":
        # 概率图输入：逐像素归一化
        e = np.exp(x.data)
        x = Tensor(e / e.sum(axis=1, keepdims=True))

    with net.stats_frozen():
        projection = random_projection(net(x).dims, seed=seed)
        report = grad_check(
            lambda: projection_loss(net(x), projection),
            net.parameters(),
            tolerance=tolerance, epsilon=epsilon, min_coords=min_coords,
            seed=seed, grad_scale=grad_scale,
        )
    status = "PASS" if report.passed else "FAIL"
    logger.info(
        f"gradcheck {tag}: {status} max_rel_error={report.max_rel_error:.3e} "
        f"checked={report.checked} kinks={report.kinks}"
    )
    return report


def check_all(profile: ScaleProfile, seed: int = 0, inject_fault: bool = False, **kwargs) -> Dict[str, GradCheckReport]:
    scale = FAULT_SCALE if inject_fault else 1.0
    return {tag: check_network(tag, profile, seed=seed, grad_scale=scale, **kwargs) for tag in NETWORK_TAGS}


def format_reports(reports: Dict[str, GradCheckReport]) -> str:
    """每个网络一节"""
    lines = []
    for tag, r in reports.items():
        lines.append(f"[{tag}]")
        lines.append(f"status = {'pass' if r.passed else 'fail'}")
        lines.append(f"max_rel_error = {r.max_rel_error:.3e}")
        lines.append(f"checked = {r.checked}")
        lines.append(f"refined = {r.refined}")
        lines.append(f"kinks = {r.kinks}")
        lines.append(f"failures = {len(r.failures)}")
        lines.append("")
    return "\n".join(lines)
