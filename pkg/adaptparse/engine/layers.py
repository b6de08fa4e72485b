"""
网络层

每层持有自己的参数（Tensor 叶子）与 buffer（BN running stats，numpy 数组），
forward(x, training, update_stats) 只调用 functional 中的原语。
"""
from typing import List, Optional, Sequence, Tuple

import numpy as np

from adaptparse.config import BN_EPS, BN_MOMENTUM, INIT_SCHEMES, INIT_STD
from adaptparse.engine import functional as F
from adaptparse.engine.tensor import Tensor, parameter
from adaptparse.errors import UsageError


class Layer:
    """层基类"""

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return []

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        return []

    def forward(self, x: Tensor, training: bool, update_stats: bool) -> Tensor:
        raise NotImplementedError

    def children(self) -> List["Layer"]:
        return []

    def describe(self) -> str:
        return type(self).__name__


class Conv(Layer):
    """
    卷积层；padding 默认取 dilation·(k//2) 以保持空间尺寸（stride 1 时）

    后接 BN 的卷积用 bias=False：BN 减去通道均值，偏置的梯度恒为 0。
    """

    def __init__(
        self,
        prefix: str,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        dilation: int = 1,
        padding: Optional[int] = None,
        init: str = "normal",
        bias: bool = True,
    ):
        if init not in INIT_SCHEMES:
            raise UsageError(f"未知初始化方式: {init}，可选 {INIT_SCHEMES}")
        self.prefix = prefix
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (kernel // 2) if padding is None else padding
        if init == "he":
            std = float(np.sqrt(2.0 / (c_in * kernel * kernel)))
        else:
            std = INIT_STD
        w = rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel)).astype(np.float32)
        self.weight = parameter(w, name=f"{prefix}.weight")
        self.bias = parameter(np.zeros(c_out, dtype=np.float32), name=f"{prefix}.bias") if bias else None

    def parameters(self):
        params = [(self.weight.name, self.weight)]
        if self.bias is not None:
            params.append((self.bias.name, self.bias))
        return params

    def forward(self, x, training, update_stats):
        bias = self.bias if self.bias is not None else Tensor(np.zeros(self.c_out, dtype=self.weight.dtype))
        return F.conv2d(x, self.weight, bias, self.stride, self.dilation, self.padding)

    def describe(self):
        suffix = "" if self.bias is not None else " no-bias"
        return (f"Conv {self.kernel}×{self.kernel} {self.c_in}→{self.c_out} "
                f"s{self.stride} d{self.dilation} p{self.padding}{suffix}")


class BatchNorm(Layer):
    def __init__(self, prefix: str, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.prefix = prefix
        self.momentum, self.eps = momentum, eps
        self.gamma = parameter(np.ones(channels, dtype=np.float32), name=f"{prefix}.gamma")
        self.beta = parameter(np.zeros(channels, dtype=np.float32), name=f"{prefix}.beta")
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def parameters(self):
        return [(self.gamma.name, self.gamma), (self.beta.name, self.beta)]

    def buffers(self):
        return [
            (f"{self.prefix}.running_mean", self.running_mean),
            (f"{self.prefix}.running_var", self.running_var),
        ]

    def forward(self, x, training, update_stats):
        return F.batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps, update_stats=update_stats,
        )

    def describe(self):
        return f"BatchNorm {self.gamma.dims[0]}"


class Activation(Layer):
    def __init__(self, kind: str = "relu", slope: float = 0.0):
        self.kind, self.slope = kind, slope

    def forward(self, x, training, update_stats):
        return F.activation(x, self.kind, self.slope)

    def describe(self):
        return "ReLU" if self.kind == "relu" else f"LeakyReLU {self.slope}"


class MaxPool(Layer):
    def __init__(self, window: int, stride: int, padding: int = 0, ceil_mode: bool = True):
        self.window, self.stride, self.padding, self.ceil_mode = window, stride, padding, ceil_mode

    def forward(self, x, training, update_stats):
        return F.max_pool2d(x, self.window, self.stride, self.padding, self.ceil_mode)

    def describe(self):
        return f"MaxPool {self.window} s{self.stride} p{self.padding}"


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def children(self):
        return self.layers

    def parameters(self):
        return [item for layer in self.layers for item in layer.parameters()]

    def buffers(self):
        return [item for layer in self.layers for item in layer.buffers()]

    def forward(self, x, training, update_stats):
        for layer in self.layers:
            x = layer.forward(x, training, update_stats)
        return x


class ResidualBlock(Layer):
    """conv3×3 → BN → ReLU → conv3×3 → BN，加恒等跳连后 ReLU"""

    def __init__(self, prefix: str, channels: int, rng: np.random.Generator):
        self.body = Sequential([
            Conv(f"{prefix}.conv1", channels, channels, 3, rng, bias=False),
            BatchNorm(f"{prefix}.bn1", channels),
            Activation("relu"),
            Conv(f"{prefix}.conv2", channels, channels, 3, rng, bias=False),
            BatchNorm(f"{prefix}.bn2", channels),
        ])

    def children(self):
        return [self.body]

    def parameters(self):
        return self.body.parameters()

    def buffers(self):
        return self.body.buffers()

    def forward(self, x, training, update_stats):
        return F.relu(F.elementwise_add(self.body.forward(x, training, update_stats), x))

    def describe(self):
        return f"ResidualBlock {self.body.layers[0].c_in}"


class AtrousBranches(Layer):
    """
    ASPP 的 fc6-fc7：每个空洞率一条分支（3×3 空洞卷积 → ReLU → 1×1 → ReLU），分支输出相加
    """

    def __init__(self, prefix: str, c_in: int, hidden: int, dilations: Sequence[int], rng: np.random.Generator):
        self.dilations = list(dilations)
        self.branches = [
            Sequential([
                Conv(f"{prefix}.d{d}.fc6", c_in, hidden, 3, rng, dilation=d),
                Activation("relu"),
                Conv(f"{prefix}.d{d}.fc7", hidden, hidden, 1, rng),
                Activation("relu"),
            ])
            for d in self.dilations
        ]

    def children(self):
        return self.branches

    def parameters(self):
        return [item for b in self.branches for item in b.parameters()]

    def forward(self, x, training, update_stats):
        outputs = [b.forward(x, training, update_stats) for b in self.branches]
        return F.add_n(outputs)

    def describe(self):
        return f"AtrousBranches dilations={self.dilations}"
