"""
优化器服务 - SGD（动量 + 权重衰减）与 Adam

状态按参数名保存，checkpoint 用 state_dict() / load_state_dict() 逐项序列化。
学习率恰为 0 时整步跳过：参数与状态都不变。
"""
import logging
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from adaptparse.config import ADAM_EPS
from adaptparse.engine.tensor import Tensor
from adaptparse.errors import NumericalError, StorageError, UsageError

logger = logging.getLogger(__name__)

Policy = Literal["sgd", "adam"]


class OptimSettings(BaseModel):
    """一个优化器用到的超参数切片"""
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = ADAM_EPS


class OptimizerState:
    """
    每个参数的缓冲区

    sgd:  momentum[name]
    adam: m[name], v[name] 与本优化器自己的 step 计数
    """

    def __init__(self, policy: Policy):
        self.policy = policy
        self.step = 0
        self.buffers: Dict[str, Dict[str, np.ndarray]] = {}

    def slot(self, name: str, like: np.ndarray) -> Dict[str, np.ndarray]:
        if name not in self.buffers:
            keys = ("momentum",) if self.policy == "sgd" else ("m", "v")
            self.buffers[name] = {k: np.zeros_like(like) for k in keys}
        return self.buffers[name]


def check_finite(named: Sequence[Tuple[str, np.ndarray]], what: str = "梯度") -> None:
    """发现非有限值时抛出 NumericalError，指出参数名"""
    for name, arr in named:
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NumericalError(f"非有限{what}: 参数 {name}")


def optimizer_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimizerState,
    policy: Policy,
    settings: OptimSettings,
    names: Optional[Sequence[str]] = None,
) -> None:
    """
    对 params 原地执行一步更新

    SGD:  v ← μv + (g + λθ)；θ ← θ − η·v
    Adam: m ← β1·m + (1−β1)·g；v ← β2·v + (1−β2)·g²；θ ← θ − η·m̂ / (√v̂ + eps)

    没有梯度的参数按零梯度处理。任一梯度非有限时整步拒绝，不改动任何参数。
    """
    if policy != state.policy:
        raise UsageError(f"优化器状态类型 {state.policy} 与策略 {policy} 不一致")
    if len(params) != len(grads):
        raise UsageError(f"参数数 {len(params)} 与梯度数 {len(grads)} 不一致")
    if names is None:
        names = [p.name or f"param{i}" for i, p in enumerate(params)]
    for name, p, g in zip(names, params, grads):
        if g is not None and g.shape != p.data.shape:
            raise UsageError(f"shape mismatch: 参数 {name} {p.data.shape} 与梯度 {g.shape}")
    check_finite(list(zip(names, grads)))
    if settings.lr == 0:
        return

    if policy == "sgd":
        for name, p, g in zip(names, params, grads):
            g = np.zeros_like(p.data) if g is None else g
            slot = state.slot(name, p.data)
            slot["momentum"] = settings.momentum * slot["momentum"] + (g + settings.weight_decay * p.data)
            p.data = (p.data - settings.lr * slot["momentum"]).astype(p.data.dtype, copy=False)
        state.step += 1
        return

    state.step += 1
    b1, b2, t = settings.beta1, settings.beta2, state.step
    for name, p, g in zip(names, params, grads):
        g = np.zeros_like(p.data) if g is None else g
        slot = state.slot(name, p.data)
        slot["m"] = b1 * slot["m"] + (1 - b1) * g
        slot["v"] = b2 * slot["v"] + (1 - b2) * (g * g)
        m_hat = slot["m"] / (1 - b1 ** t)
        v_hat = slot["v"] / (1 - b2 ** t)
        p.data = (p.data - settings.lr * m_hat / (np.sqrt(v_hat) + settings.eps)).astype(p.data.dtype, copy=False)


# ============================================================
# 优化器对象
# ============================================================

class Optimizer:
    """绑定一组具名参数的优化器"""

    policy: Policy = "sgd"

    def __init__(self, name: str, named_params: Sequence[Tuple[str, Tensor]], settings: OptimSettings):
        self.name = name
        self.named_params: List[Tuple[str, Tensor]] = list(named_params)
        self.settings = settings
        self.state = OptimizerState(self.policy)

    @property
    def params(self) -> List[Tensor]:
        return [p for _, p in self.named_params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        optimizer_step(
            self.params, [p.grad for p in self.params], self.state, self.policy, self.settings,
            names=[n for n, _ in self.named_params],
        )

    def state_dict(self) -> Dict[str, np.ndarray]:
        prefix = f"optim.{self.name}"
        out = {f"{prefix}.step": np.array([self.state.step], dtype=np.float64)}
        for pname, _ in self.named_params:
            for key, buf in self.state.buffers.get(pname, {}).items():
                out[f"{prefix}.{key}.{pname}"] = buf
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        prefix = f"optim.{self.name}"
        if f"{prefix}.step" not in state:
            raise StorageError(f"missing tensor: {prefix}.step")
        self.state = OptimizerState(self.policy)
        self.state.step = int(state[f"{prefix}.step"].reshape(-1)[0])
        keys = ("momentum",) if self.policy == "sgd" else ("m", "v")
        for pname, p in self.named_params:
            found = [f"{prefix}.{k}.{pname}" in state for k in keys]
            if not any(found):
                continue
            if not all(found):
                raise StorageError(f"missing tensor: {prefix}.*.{pname}")
            slot = {}
            for k in keys:
                buf = state[f"{prefix}.{k}.{pname}"]
                if buf.shape != p.data.shape:
                    raise StorageError(f"shape mismatch: {prefix}.{k}.{pname} {buf.shape} vs {p.data.shape}")
                slot[k] = buf.astype(p.data.dtype, copy=True)
            self.state.buffers[pname] = slot


class SGD(Optimizer):
    policy = "sgd"


class Adam(Optimizer):
    policy = "adam"
