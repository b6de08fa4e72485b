"""
有限差分梯度检查

对每个参数张量随机抽取至少 min_coords 个坐标（张量更小时全部检查），
用中心差分 (f(θ+ε) − f(θ−ε)) / 2ε 与反向传播结果比较，
相对误差 |a − n| / max(1e-8, |a| + |n|)。

超出容差的坐标依次用 ε/10、ε/100、ε/1000 复核，任一次通过记为 refined。
每次求值都记录 ReLU / max-pool 的分支选择；θ+ε 与 θ−ε 的分支不同说明跨过了折点，
中心差分在该坐标不可信。跨折点且复核后仍超出容差的坐标记为 kinks，不计入失败和最大误差。
"""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from adaptparse.config import GRADCHECK_EPSILON, GRADCHECK_MIN_COORDS, GRADCHECK_TOLERANCE
from adaptparse.engine.tensor import Tensor, no_grad, record_switches
from adaptparse.errors import UsageError

logger = logging.getLogger(__name__)

REFINE_DIVISORS = (10, 100, 1000)


class CoordFailure(BaseModel):
    """未通过的坐标"""
    param: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


class GradCheckReport(BaseModel):
    """梯度检查报告"""
    max_rel_error: float = 0.0
    passed: bool = True
    tolerance: float
    epsilon: float
    checked: int = 0
    refined: int = 0
    kinks: int = 0
    per_param: Dict[str, float] = Field(default_factory=dict)
    failures: List[CoordFailure] = Field(default_factory=list)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float = GRADCHECK_TOLERANCE,
    epsilon: float = GRADCHECK_EPSILON,
    min_coords: int = GRADCHECK_MIN_COORDS,
    seed: int = 0,
    grad_scale: float = 1.0,
    refine: bool = True,
) -> GradCheckReport:
    """
    检查 loss_fn 相对 params 的梯度

    Args:
        loss_fn: 每次调用都从 params 重新构建计算图并返回标量损失
        params: 需检查的叶子张量（必须是 64 位）
        grad_scale: 注入故障用，把解析梯度乘以该系数

    Returns:
        GradCheckReport，失败坐标记录在 failures 中
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise UsageError(f"grad_check 需要 64 位计算图，参数 {p.name} 为 {p.data.dtype}")
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [
        (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1) * grad_scale
        for p in params
    ]

    def evaluate() -> Tuple[float, List[bytes]]:
        with no_grad(), record_switches() as switches:
            value = loss_fn().item()
        return value, switches

    def central(flat: np.ndarray, index: int, eps: float) -> Tuple[float, bool]:
        """返回 (中心差分, 是否跨过折点)"""
        original = flat[index]
        flat[index] = original + eps
        f_plus, s_plus = evaluate()
        flat[index] = original - eps
        f_minus, s_minus = evaluate()
        flat[index] = original
        return (f_plus - f_minus) / (2 * eps), s_plus != s_minus

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance, epsilon=epsilon)

    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        flat = p.data.reshape(-1)
        size = flat.size
        if size <= min_coords:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=min_coords, replace=False))

        worst = 0.0
        for index in coords:
            a = float(analytic[i][index])
            n, crossed = central(flat, int(index), epsilon)
            err = relative_error(a, n)
            if err > tolerance and refine:
                for divisor in REFINE_DIVISORS:
                    n_fine, _ = central(flat, int(index), epsilon / divisor)
                    err_fine = relative_error(a, n_fine)
                    if err_fine <= tolerance:
                        report.refined += 1
                        n, err = n_fine, err_fine
                        break
            report.checked += 1
            if err > tolerance and crossed:
                report.kinks += 1
                continue
            if err > tolerance:
                report.failures.append(
                    CoordFailure(param=name, index=int(index), analytic=a, numeric=n, rel_error=err)
                )
            worst = max(worst, err)
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)

    report.passed = not report.failures
    if not report.passed:
        logger.warning(f"梯度检查未通过: {len(report.failures)} 个坐标，最大相对误差 {report.max_rel_error:.3e}")
    return report


def random_projection(shape: Sequence[int], seed: int = 0, dtype=np.float64) -> np.ndarray:
    """固定随机投影，用于把张量输出收缩为标量损失 sum(out ⊙ R)"""
    return np.random.default_rng(seed).standard_normal(tuple(shape)).astype(dtype)


def projection_loss(out: Tensor, projection: Optional[np.ndarray] = None, seed: int = 0) -> Tensor:
    """sum(out ⊙ R)，R 为与 out 同形的随机张量"""
    from adaptparse.engine import functional as F
    if projection is None:
        projection = random_projection(out.dims, seed=seed, dtype=out.dtype)
    return F.sum_all(F.elementwise_mul(out, Tensor(projection)))
