"""
反向模式自动微分核心

Tensor 包一个 numpy 数组；每个可微原语是 Function 的子类，前向时记录输入，
backward() 按逆拓扑序把梯度推回所有 requires_grad 的叶子。

OpTrace：在 trace_ops() 上下文内，每个执行的原语（前向或反向）追加一条
(原语名, 所属网络标签, 阶段) 记录；网络标签由 network_scope() 设置。
"""
import contextvars
import logging
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from adaptparse.errors import ShapeError, UsageError

logger = logging.getLogger(__name__)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
LABEL_DTYPE = np.dtype(np.uint8)

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_network_tag = contextvars.ContextVar("network_tag", default=None)
_active_trace = contextvars.ContextVar("active_trace", default=None)
_switch_log = contextvars.ContextVar("switch_log", default=None)


# ============================================================
# OpTrace
# ============================================================

class OpRecord(BaseModel):
    """一次原语执行"""
    name: str
    tag: Optional[str] = None
    phase: str = "forward"


class OpTrace:
    """按执行顺序记录的原语列表"""

    def __init__(self):
        self.records: List[OpRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def tags(self) -> set:
        return {r.tag for r in self.records}

    def names(self, phase: Optional[str] = None) -> List[str]:
        return [r.name for r in self.records if phase is None or r.phase == phase]


@contextmanager
def trace_ops() -> Iterator[OpTrace]:
    """记录上下文内执行的全部原语"""
    trace = OpTrace()
    token = _active_trace.set(trace)
    try:
        yield trace
    finally:
        _active_trace.reset(token)


@contextmanager
def network_scope(tag: Optional[str]):
    """把上下文内执行的原语归属到网络 tag"""
    token = _network_tag.set(tag)
    try:
        yield
    finally:
        _network_tag.reset(token)


@contextmanager
def no_grad():
    """上下文内不建图，输出不需要梯度"""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextmanager
def record_switches() -> Iterator[List[bytes]]:
    """
    收集上下文内分段线性原语的分支选择（激活的正负模式、池化的 argmax）

    两次前向的记录不同，说明参数扰动跨过了折点。
    """
    log: List[bytes] = []
    token = _switch_log.set(log)
    try:
        yield log
    finally:
        _switch_log.reset(token)


def note_switch(pattern: np.ndarray) -> None:
    log = _switch_log.get()
    if log is not None:
        log.append(np.ascontiguousarray(pattern).tobytes())


def _emit(name: str, tag: Optional[str], phase: str) -> None:
    trace = _active_trace.get()
    if trace is not None:
        trace.records.append(OpRecord(name=name, tag=tag, phase=phase))


# ============================================================
# Function / Tensor
# ============================================================

class Function:
    """
    可微原语基类

    子类实现 forward(*arrays, **kwargs) -> ndarray 与
    backward(grad) -> 每个输入一个梯度（不需要梯度的输入可返回 None）。
    """

    name = "function"

    def __init__(self, *tensors: "Tensor"):
        self.inputs = tensors
        self.tag = _network_tag.get()

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{self.name} 未实现 forward")

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError(f"{self.name} 未实现 backward")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        for t in tensors:
            if t.data.dtype == LABEL_DTYPE:
                raise UsageError(f"{cls.name}: 8 位标签张量不能进入可微计算图")
        func = cls(*tensors)
        # 反向只沿建图时需要梯度的输入传播
        func.needs_grad = tuple(t.requires_grad for t in tensors)
        _emit(cls.name, func.tag, "forward")
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=requires_grad)
        if requires_grad:
            out.creator = func
        return out


class Tensor:
    """
    计算图中的 n 维数组（rank ≤ 4，图像/特征为 N×C×H×W）

    dtype 为 float32 / float64；uint8 仅用于标签图，不能 requires_grad。
    """

    def __init__(
        self,
        data: Union[np.ndarray, float, int, Sequence[float]],
        requires_grad: bool = False,
        dtype: Optional[Any] = None,
        name: Optional[str] = None,
    ):
        arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES and arr.dtype != LABEL_DTYPE:
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"张量 rank 最大为 4，收到 rank {arr.ndim}")
        if requires_grad and arr.dtype == LABEL_DTYPE:
            raise UsageError("8 位标签张量不能 requires_grad")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[Function] = None
        self.name = name

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{label})"

    # ---------- 基本属性 ----------

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """共享数据、脱离计算图的副本"""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # ---------- 运算符 ----------

    def __add__(self, other: "Tensor") -> "Tensor":
        from adaptparse.engine import functional as F
        if isinstance(other, Tensor):
            return F.elementwise_add(self, other)
        return F.add_scalar(self, float(other))

    def __sub__(self, other: float) -> "Tensor":
        from adaptparse.engine import functional as F
        return F.add_scalar(self, -float(other))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        from adaptparse.engine import functional as F
        if isinstance(other, Tensor):
            return F.elementwise_mul(self, other)
        return F.mul_scalar(self, float(other))

    __rmul__ = __mul__

    # ---------- 反向传播 ----------

    def backward(self) -> None:
        """
        从标量损失反向传播

        叶子的 grad 累加（多次调用不清零则相加）；中间结点的梯度不保留。
        """
        if self.data.size != 1:
            raise ShapeError(f"backward 需要标量损失，收到 dims {self.dims}")
        if not self.requires_grad:
            raise UsageError("损失不依赖任何需要梯度的张量")

        order = _topological_order(self)
        grads: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.creator is None:
                if node.requires_grad:
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            func = node.creator
            _emit(func.name, func.tag, "backward")
            input_grads = func.backward(grad)
            for inp, needed, g in zip(func.inputs, func.needs_grad, input_grads):
                if g is None or not needed:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g


def _topological_order(root: Tensor) -> List[Tensor]:
    """迭代式 DFS，返回从叶子到 root 的拓扑序（每个结点一次）"""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            creator = node.creator
            for inp, needed in zip(reversed(creator.inputs), reversed(creator.needs_grad)):
                if needed and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
    """创建需要梯度的叶子（网络参数）"""
    return Tensor(data, requires_grad=True, name=name)
