"""
网络服务 - 五个网络的构建与前向

    E    特征提取器（conv1-pool5 的空洞版本，总步长 8；conv1-pool1 为 E1）
    C    特征补偿网络（7×7 卷积 + 残差块，每 3 块接一次池化 + 3×3 卷积）
    L    逐像素标注器（fc6 / fc7 / fc8）
    A_f  特征对抗网络（ASPP fc6-fc7 分支求和 + 3×3 卷积到 1 通道）
    A_l  结构化标签对抗网络（5×5 stride-2 卷积 + BN + LeakyReLU，最后一层 stride 1）

推理只用 E 与 L（forward_parse），C / A_f / A_l 不参与。
"""
import copy
import hashlib
import logging
import math
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from adaptparse.config import LEAKY_SLOPE
from adaptparse.engine import functional as F
from adaptparse.engine.layers import (
    Activation,
    AtrousBranches,
    BatchNorm,
    Conv,
    Layer,
    MaxPool,
    ResidualBlock,
)
from adaptparse.engine.tensor import Tensor, network_scope
from adaptparse.errors import ShapeError, StorageError, UsageError
from adaptparse.models.schemas import ScaleProfile

logger = logging.getLogger(__name__)

EXTRACTOR_STRIDE = 8
E1_STRIDE = 2
NETWORK_TAGS = ("E", "C", "L", "A_f", "A_l")


# ============================================================
# NetworkInstance
# ============================================================

class NetworkInstance:
    """一个已实例化的网络：有序层列表 + 参数 + train/eval 模式"""

    def __init__(
        self,
        name: str,
        layers: List[Layer],
        profile: ScaleProfile,
        split_index: Optional[int] = None,
        in_channels: Optional[int] = None,
    ):
        if name not in NETWORK_TAGS:
            raise UsageError(f"未知网络标签: {name}")
        self.name = name
        self.layers = layers
        self.profile = profile
        self.split_index = split_index
        self.in_channels = in_channels
        self.training = True
        self.update_stats = True

    def __repr__(self) -> str:
        return f"NetworkInstance({self.name}, layers={len(self.layers)}, params={self.num_parameters()})"

    # ---------- 参数与状态 ----------

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(f"{self.name}.{n}", p) for layer in self.layers for n, p in layer.parameters()]

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> List[Tuple[str, np.ndarray]]:
        return [(f"{self.name}.{n}", b) for layer in self.layers for n, b in layer.buffers()]

    def buffers(self) -> List[np.ndarray]:
        return [b for _, b in self.named_buffers()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self) -> "NetworkInstance":
        self.training = True
        for p in self.parameters():
            p.requires_grad = True
        return self

    def eval(self) -> "NetworkInstance":
        self.training = False
        return self

    @contextmanager
    def frozen(self) -> Iterator["NetworkInstance"]:
        """上下文内参数不接收梯度（对抗网络作为判别器被冻结、或 E 在 EQ2 中被冻结）"""
        params = self.parameters()
        previous = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, previous):
                p.requires_grad = flag

    @contextmanager
    def stats_frozen(self, frozen: bool = True) -> Iterator["NetworkInstance"]:
        """上下文内 train 模式的前向不更新 BN running stats"""
        previous = self.update_stats
        self.update_stats = not frozen and previous
        try:
            yield self
        finally:
            self.update_stats = previous

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise StorageError(f"missing tensor: {name}")
            if state[name].shape != p.data.shape:
                raise StorageError(f"shape mismatch: {name} 期望 {p.data.shape}，收到 {state[name].shape}")
            p.data = state[name].astype(p.data.dtype, copy=True)
        for name, buf in self.named_buffers():
            if name not in state:
                raise StorageError(f"missing tensor: {name}")
            np.copyto(buf, state[name].astype(buf.dtype))

    def param_digest(self) -> str:
        """全部参数的 SHA-256，用于检查每一步只改动了该改的网络"""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def to_dtype(self, dtype) -> "NetworkInstance":
        """深拷贝并转换参数与 buffer 的 dtype（梯度检查用 64 位副本）"""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for layer in _walk(clone.layers):
            if isinstance(layer, BatchNorm):
                layer.running_mean = layer.running_mean.astype(dtype)
                layer.running_var = layer.running_var.astype(dtype)
        return clone

    def summary(self) -> str:
        lines = [f"{self.name}: {self.num_parameters()} 参数"]
        for i, layer in enumerate(self.layers):
            marker = "  ← E1" if self.split_index is not None and i == self.split_index - 1 else ""
            lines.append(f"  [{i}] {layer.describe()}{marker}")
        return "\n".join(lines)

    # ---------- 前向 ----------

    def _run(self, layers: List[Layer], x: Tensor) -> Tensor:
        with network_scope(self.name):
            for layer in layers:
                x = layer.forward(x, self.training, self.update_stats)
        return x

    def forward(self, x: Tensor) -> Tensor:
        if self.in_channels is not None and (len(x.dims) != 4 or x.dims[1] != self.in_channels):
            raise ShapeError(f"{self.name}: 输入通道数需为 {self.in_channels}，收到 dims {x.dims}")
        return self._run(self.layers, x)

    __call__ = forward

    def forward_head(self, x: Tensor) -> Tensor:
        """E1：到第一个池化为止"""
        if self.split_index is None:
            raise UsageError(f"{self.name} 没有 E1 分割点")
        return self._run(self.layers[:self.split_index], x)

    def forward_tail(self, h: Tensor) -> Tensor:
        """E 在 E1 之后的部分"""
        if self.split_index is None:
            raise UsageError(f"{self.name} 没有 E1 分割点")
        return self._run(self.layers[self.split_index:], h)


def _walk(layers: List[Layer]) -> Iterator[Layer]:
    for layer in layers:
        yield layer
        yield from _walk(layer.children())


# ============================================================
# 尺寸算术
# ============================================================

def _ceil_pool(size: int, window: int, stride: int, padding: int = 0) -> int:
    out = math.ceil((size + 2 * padding - window) / stride) + 1
    if (out - 1) * stride >= size + padding:
        out -= 1
    return out


def _conv(size: int, kernel: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return math.floor((size + 2 * padding - dilation * (kernel - 1) - 1) / stride) + 1


def _extractor_hw(profile: ScaleProfile, input_hw: Tuple[int, int]) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """E1 与 E 输出的空间尺寸（3×3 卷积保持尺寸，只有池化改变）"""
    h, w = input_hw
    e1_hw = None
    for stage in range(1, 6):
        if stage <= 3:
            h, w = _ceil_pool(h, 2, 2), _ceil_pool(w, 2, 2)
        else:
            h, w = _ceil_pool(h, 3, 1, 1), _ceil_pool(w, 3, 1, 1)
        if stage == 1:
            e1_hw = (h, w)
    return e1_hw, (h, w)


def _compensator_hw(profile: ScaleProfile, e1_hw: Tuple[int, int]) -> Tuple[int, int]:
    """C 的输出尺寸，按它自己的层序列推导"""
    h, w = _conv(e1_hw[0], 7, padding=3), _conv(e1_hw[1], 7, padding=3)
    for _ in range(profile.compensation_pools):
        h, w = _ceil_pool(h, 2, 2), _ceil_pool(w, 2, 2)
        h, w = _conv(h, 3, padding=1), _conv(w, 3, padding=1)
    return _conv(h, 3, padding=1), _conv(w, 3, padding=1)


def _label_adversary_hw(profile: ScaleProfile, hw: Tuple[int, int]) -> List[Tuple[int, int]]:
    """A_l 每个 stride-2 层的输出尺寸；最后一项同时是整个 A_l 的输出尺寸"""
    h, w = hw
    sizes = []
    for _ in range(profile.label_adv_stride2_layers):
        h, w = _conv(h, 5, 2, 1, 2), _conv(w, 5, 2, 1, 2)
        sizes.append((h, w))
    return sizes


# ============================================================
# 构建
# ============================================================

def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def build_extractor(profile: ScaleProfile, seed=0) -> NetworkInstance:
    """
    特征提取器 E

    stage 1-3：3×3 卷积 + ReLU，2×2 stride-2 池化（ceil），总步长 8
    stage 4-5：3×3 stride-1 池化（padding 1）；stage 5 的卷积为 dilation 2
    E1 为 stage 1 池化的输出
    """
    rng = _rng(seed)
    layers: List[Layer] = []
    split_index = None
    c_in = 3
    for stage, (c_out, n_convs) in enumerate(zip(profile.stage_channels, profile.convs_per_stage), start=1):
        dilation = 2 if stage == 5 else 1
        for j in range(n_convs):
            layers.append(Conv(f"stage{stage}.conv{j}", c_in, c_out, 3, rng, dilation=dilation, init=profile.parser_init))
            layers.append(Activation("relu"))
            c_in = c_out
        if stage <= 3:
            layers.append(MaxPool(2, 2, ceil_mode=True))
        else:
            layers.append(MaxPool(3, 1, padding=1, ceil_mode=True))
        if stage == 1:
            split_index = len(layers)
    return NetworkInstance("E", layers, profile, split_index=split_index, in_channels=3)


def build_compensator(profile: ScaleProfile, seed=0) -> NetworkInstance:
    """
    特征补偿网络 C（输入 E1 输出，输出与 E 输出同形）

    7×7 卷积 → [3 个残差块 → 2×2 池化 → 3×3 卷积] × (blocks/3) → 3×3 卷积到 E 的通道数
    """
    pools = profile.compensation_pools
    if 2 ** pools != EXTRACTOR_STRIDE // E1_STRIDE:
        raise UsageError(
            f"补偿网络步长 {2 ** pools} 与 E 步长 {EXTRACTOR_STRIDE} / E1 步长 {E1_STRIDE} 不一致"
            f"（num_residual_blocks={profile.num_residual_blocks}）"
        )
    rng = _rng(seed)
    c_in = profile.stage_channels[0]
    ch = profile.comp_base_channels
    layers: List[Layer] = [
        Conv("stem", c_in, ch, 7, rng, padding=3, bias=False),
        BatchNorm("stem.bn", ch),
        Activation("relu"),
    ]
    block = 0
    for group in range(pools):
        for _ in range(3):
            layers.append(ResidualBlock(f"block{block}", ch, rng))
            block += 1
        layers.append(MaxPool(2, 2, ceil_mode=True))
        layers.append(Conv(f"down{group}", ch, ch * 2, 3, rng))
        layers.append(Activation("relu"))
        ch *= 2
    layers.append(Conv("out", ch, profile.stage_channels[4], 3, rng))
    return NetworkInstance("C", layers, profile, in_channels=c_in)


def build_labeler(profile: ScaleProfile, seed=0) -> NetworkInstance:
    """逐像素标注器 L：fc6（3×3，dilation 4）→ fc7（1×1）→ fc8（1×1 到类别数）"""
    rng = _rng(seed)
    c = profile.stage_channels[4]
    layers: List[Layer] = [
        Conv("fc6", c, c, 3, rng, dilation=4, init=profile.parser_init),
        Activation("relu"),
        Conv("fc7", c, c, 1, rng, init=profile.parser_init),
        Activation("relu"),
        Conv("fc8", c, profile.num_classes, 1, rng, init=profile.parser_init),
    ]
    return NetworkInstance("L", layers, profile, in_channels=c)


def build_feature_adversary(profile: ScaleProfile, seed=0) -> NetworkInstance:
    """特征对抗网络 A_f：逐位置输出一个最小二乘回归值，无末端非线性"""
    rng = _rng(seed)
    c = profile.stage_channels[4]
    layers: List[Layer] = [
        AtrousBranches("aspp", c, c, profile.aspp_dilations, rng),
        Conv("out", c, 1, 3, rng),
    ]
    return NetworkInstance("A_f", layers, profile, in_channels=c)


def build_label_adversary(profile: ScaleProfile, seed=0) -> NetworkInstance:
    """
    结构化标签对抗网络 A_l：输入 K 通道概率图，输出置信度图，无末端非线性

    输出为 1×1 的 stride-2 层不接 BN（batch 1 时每通道只有一个值，批统计量无定义），
    保留卷积偏置；其余层的卷积无偏置，后接 BN。
    """
    if profile.label_adv_stride2_layers < 1:
        raise UsageError("label_adv_stride2_layers 至少为 1")
    rng = _rng(seed)
    _, e_hw = _extractor_hw(profile, profile.input_hw)
    sizes = _label_adversary_hw(profile, e_hw)
    layers: List[Layer] = []
    c_in = profile.num_classes
    for i, hw in enumerate(sizes):
        c_out = profile.comp_base_channels * 2 ** i
        normalized = hw != (1, 1)
        layers.append(Conv(f"down{i}", c_in, c_out, 5, rng, stride=2, padding=2, bias=not normalized))
        if normalized:
            layers.append(BatchNorm(f"down{i}.bn", c_out))
        layers.append(Activation("leaky_relu", LEAKY_SLOPE))
        c_in = c_out
    layers.append(Conv("out", c_in, 1, 5, rng, stride=1, padding=2))
    return NetworkInstance("A_l", layers, profile, in_channels=profile.num_classes)


BUILDERS = {
    "E": build_extractor,
    "C": build_compensator,
    "L": build_labeler,
    "A_f": build_feature_adversary,
    "A_l": build_label_adversary,
}


def build_all(profile: ScaleProfile, seed: int = 0) -> Dict[str, NetworkInstance]:
    """按固定顺序用独立的子随机流构建五个网络"""
    streams = np.random.SeedSequence(seed).spawn(len(NETWORK_TAGS))
    nets = {}
    for tag, stream in zip(NETWORK_TAGS, streams):
        nets[tag] = BUILDERS[tag](profile, np.random.default_rng(stream))
    logger.info(
        "网络构建完成: " + ", ".join(f"{tag}={nets[tag].num_parameters()}" for tag in NETWORK_TAGS)
    )
    return nets


# ============================================================
# 前向路径
# ============================================================

def check_image_dims(image: Tensor, profile: ScaleProfile) -> None:
    expected = (3,) + tuple(profile.input_hw)
    if len(image.dims) != 4 or tuple(image.dims[1:]) != expected:
        raise ShapeError(f"图像 dims {image.dims} 与网络不符，expected dims N×{expected[0]}×{expected[1]}×{expected[2]}")


def forward_parse(E: NetworkInstance, L: NetworkInstance, image: Tensor) -> Tensor:
    """
    推理：softmax(L(E(image)))，只有 E 和 L 参与

    Returns:
        N×K×h×w 的逐像素类别概率（stride 8 分辨率）
    """
    if E.training or L.training:
        raise UsageError("forward_parse 需要 E、L 处于 eval 模式")
    check_image_dims(image, E.profile)
    return parser_probs(E, L, image)


def parser_probs(E: NetworkInstance, L: NetworkInstance, image: Tensor) -> Tensor:
    """训练中使用的 softmax(L(E(x)))，不检查模式；softmax 归属 L"""
    logits = L(E(image))
    with network_scope(L.name):
        return F.softmax(logits)


def forward_compensated(E: NetworkInstance, C: NetworkInstance, image: Tensor) -> Tensor:
    """E(x) + C(E1(x))；E1 只计算一次，同时供 E 的后半段与 C 使用"""
    h1 = E.forward_head(image)
    feat = E.forward_tail(h1)
    comp = C(h1)
    if comp.dims != feat.dims:
        raise ShapeError(f"C 输出 dims {comp.dims} 与 E 输出 dims {feat.dims} 不一致")
    return F.elementwise_add(feat, comp)


# ============================================================
# 形状计算（不依赖引擎，供测试核对）
# ============================================================

def shape_calculator(
    profile: ScaleProfile, input_hw: Optional[Tuple[int, int]] = None, batch: int = 1,
) -> Dict[str, Tuple[int, ...]]:
    """各网络输出形状的纯算术推导；input_hw 缺省取 profile.input_hw"""
    e1_hw, e_hw = _extractor_hw(profile, input_hw or profile.input_hw)
    c_hw = _compensator_hw(profile, e1_hw)
    a_hw = _label_adversary_hw(profile, e_hw)[-1]
    c5 = profile.stage_channels[4]
    return {
        "E1": (batch, profile.stage_channels[0]) + e1_hw,
        "E": (batch, c5) + e_hw,
        "C": (batch, c5) + c_hw,
        "L": (batch, profile.num_classes) + e_hw,
        "A_f": (batch, 1) + e_hw,
        "A_l": (batch, 1) + a_hw,
    }
