"""
可微原语

卷积走 im2col + 一次 matmul，反向用 col2im 按固定循环顺序累加（保证可复现）。
除 bias 加法与标量运算外不做广播，elementwise 运算要求 dims 完全一致。
"""
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from adaptparse.config import BN_EPS, BN_MOMENTUM
from adaptparse.engine.tensor import Function, Tensor, note_switch
from adaptparse.errors import ShapeError, UsageError


# ============================================================
# 形状计算
# ============================================================

def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    """floor((L + 2p - d(k-1) - 1) / s) + 1"""
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def pool_output_size(size: int, window: int, stride: int, padding: int = 0, ceil_mode: bool = False) -> int:
    """池化输出长度；ceil 模式下最后一个窗口必须起始于输入（含左 padding）之内"""
    span = size + 2 * padding - window
    if ceil_mode:
        out = -(-span // stride) + 1
        if (out - 1) * stride >= size + padding:
            out -= 1
        return out
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s_n, s_c, s_h, s_w = xp.strides
    patches = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s_n, s_c, dilation * s_h, dilation * s_w, stride * s_h, stride * s_w),
        writeable=False,
    )
    return patches.reshape(n, c * kh * kw, ho * wo)


def _col2im(
    cols: np.ndarray,
    padded_shape: Tuple[int, ...],
    kh: int,
    kw: int,
    stride: int,
    dilation: int,
    ho: int,
    wo: int,
) -> np.ndarray:
    n, c = padded_shape[:2]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for i in range(kh):
        h0 = i * dilation
        for j in range(kw):
            w0 = j * dilation
            out[:, :, h0:h0 + h_span:stride, w0:w0 + w_span:stride] += cols[:, :, i, j]
    return out


# ============================================================
# 卷积
# ============================================================

class Conv2d(Function):
    name = "conv2d"

    def forward(self, x, kernel, bias, stride=1, dilation=1, padding=0):
        if x.ndim != 4:
            raise ShapeError(f"conv2d: 输入需为 N×C×H×W，收到 rank {x.ndim}")
        if kernel.ndim != 4:
            raise ShapeError(f"conv2d: 卷积核需为 Cout×Cin×kh×kw，收到 rank {kernel.ndim}")
        n, c, h, w = x.shape
        c_out, c_in, kh, kw = kernel.shape
        if c != c_in:
            raise ShapeError(f"conv2d: shape mismatch at dim 1 (channels): 输入 {c}，卷积核期望 {c_in}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: 卷积核尺寸需为奇数，收到 {kh}×{kw}")
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: shape mismatch at bias dim 0: 期望 ({c_out},)，收到 {bias.shape}")
        if stride < 1 or dilation < 1 or padding < 0:
            raise ShapeError(f"conv2d: 非法参数 stride={stride} dilation={dilation} padding={padding}")
        ho = conv_output_size(h, kh, stride, dilation, padding)
        wo = conv_output_size(w, kw, stride, dilation, padding)
        if ho < 1:
            raise ShapeError(f"conv2d: shape mismatch at dim 2 (height): 输入高 {h} 不足以容纳卷积核")
        if wo < 1:
            raise ShapeError(f"conv2d: shape mismatch at dim 3 (width): 输入宽 {w} 不足以容纳卷积核")

        if padding > 0:
            xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        else:
            xp = np.ascontiguousarray(x)
        cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
        w_mat = kernel.reshape(c_out, -1)
        out = np.matmul(w_mat, cols).reshape(n, c_out, ho, wo)
        out += bias.reshape(1, c_out, 1, 1)

        self.cols = cols
        self.w_mat = w_mat
        self.geometry = (xp.shape, kernel.shape, stride, dilation, padding, ho, wo)
        return out

    def backward(self, grad):
        padded_shape, kernel_shape, stride, dilation, padding, ho, wo = self.geometry
        n = padded_shape[0]
        c_out, _, kh, kw = kernel_shape
        g = grad.reshape(n, c_out, ho * wo)

        grad_kernel = np.tensordot(g, self.cols, axes=([0, 2], [0, 2])).reshape(kernel_shape)
        grad_bias = g.sum(axis=(0, 2))
        grad_cols = np.matmul(self.w_mat.T, g)
        grad_xp = _col2im(grad_cols, padded_shape, kh, kw, stride, dilation, ho, wo)
        if padding > 0:
            grad_x = grad_xp[:, :, padding:-padding, padding:-padding]
        else:
            grad_x = grad_xp
        return grad_x, grad_kernel, grad_bias


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """带空洞的二维互相关"""
    return Conv2d.apply(x, kernel, bias, stride=stride, dilation=dilation, padding=padding)


# ============================================================
# 池化
# ============================================================

class MaxPool2d(Function):
    name = "max_pool2d"

    def forward(self, x, window=2, stride=2, padding=0, ceil_mode=False):
        if x.ndim != 4:
            raise ShapeError(f"max_pool2d: 输入需为 N×C×H×W，收到 rank {x.ndim}")
        if window < 1 or stride < 1:
            raise ShapeError(f"max_pool2d: window={window} stride={stride} 需 ≥ 1")
        if padding < 0 or padding > window // 2:
            raise ShapeError(f"max_pool2d: padding={padding} 需在 [0, window//2] 内")
        n, c, h, w = x.shape
        if window > h + 2 * padding:
            raise ShapeError(f"max_pool2d: window {window} larger than spatial extent at dim 2 (height {h})")
        if window > w + 2 * padding:
            raise ShapeError(f"max_pool2d: window {window} larger than spatial extent at dim 3 (width {w})")

        ho = pool_output_size(h, window, stride, padding, ceil_mode)
        wo = pool_output_size(w, window, stride, padding, ceil_mode)
        hp = max(h + 2 * padding, (ho - 1) * stride + window)
        wp = max(w + 2 * padding, (wo - 1) * stride + window)
        xp = np.full((n, c, hp, wp), -np.inf, dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x

        s_n, s_c, s_h, s_w = xp.strides
        windows = as_strided(
            xp,
            shape=(n, c, ho, wo, window, window),
            strides=(s_n, s_c, stride * s_h, stride * s_w, s_h, s_w),
            writeable=False,
        ).reshape(n, c, ho, wo, window * window)
        # argmax 取行优先顺序的第一个最大值
        idx = windows.argmax(axis=-1)
        note_switch(idx)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

        self.idx = idx
        self.geometry = (x.shape, xp.shape, window, stride, padding, ho, wo)
        return out

    def backward(self, grad):
        x_shape, padded_shape, window, stride, padding, ho, wo = self.geometry
        n, c = x_shape[:2]
        grad_xp = np.zeros(padded_shape, dtype=grad.dtype)
        n_idx, c_idx, oh, ow = np.indices((n, c, ho, wo), sparse=False)
        rows = oh * stride + self.idx // window
        cols = ow * stride + self.idx % window
        np.add.at(grad_xp, (n_idx, c_idx, rows, cols), grad)
        h, w = x_shape[2:]
        return (grad_xp[:, :, padding:padding + h, padding:padding + w],)


def max_pool2d(x: Tensor, window: int, stride: int, padding: int = 0, ceil_mode: bool = False) -> Tensor:
    return MaxPool2d.apply(x, window=window, stride=stride, padding=padding, ceil_mode=ceil_mode)


# ============================================================
# 批归一化
# ============================================================

class BatchNorm2d(Function):
    name = "batch_norm2d"

    def forward(
        self,
        x,
        gamma,
        beta,
        running_mean=None,
        running_var=None,
        training=True,
        momentum=BN_MOMENTUM,
        eps=BN_EPS,
        update_stats=True,
    ):
        if x.ndim != 4:
            raise ShapeError(f"batch_norm2d: 输入需为 N×C×H×W，收到 rank {x.ndim}")
        n, c, h, w = x.shape
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError(f"batch_norm2d: shape mismatch at dim 1 (channels): 输入 {c}，gamma {gamma.shape}")
        axes = (0, 2, 3)
        count = n * h * w
        if training:
            if count < 2:
                raise ShapeError("batch_norm2d: 训练模式下每个通道只有 1 个元素，方差无定义")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_stats and running_mean is not None:
                running_mean[...] = (1 - momentum) * running_mean + momentum * mean
                running_var[...] = (1 - momentum) * running_var + momentum * var * (count / (count - 1))
        else:
            if running_mean is None:
                raise UsageError("batch_norm2d: eval 模式需要 running stats")
            mean = running_mean.astype(x.dtype)
            var = running_var.astype(x.dtype)

        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        x_hat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = x_hat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)

        self.x_hat = x_hat
        self.inv_std = inv_std
        self.gamma = gamma
        self.training = training
        self.count = count
        return out

    def backward(self, grad):
        axes = (0, 2, 3)
        c = self.gamma.shape[0]
        grad_gamma = (grad * self.x_hat).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        g_hat = grad * self.gamma.reshape(1, c, 1, 1)
        inv_std = self.inv_std.reshape(1, c, 1, 1)
        if self.training:
            m = self.count
            sum_g = g_hat.sum(axis=axes).reshape(1, c, 1, 1)
            sum_gx = (g_hat * self.x_hat).sum(axis=axes).reshape(1, c, 1, 1)
            grad_x = (inv_std / m) * (m * g_hat - sum_g - self.x_hat * sum_gx)
        else:
            grad_x = g_hat * inv_std
        return grad_x, grad_gamma, grad_beta


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray],
    running_var: Optional[np.ndarray],
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    update_stats: bool = True,
) -> Tensor:
    """train 模式用 batch 统计量并更新 running stats（原地）；eval 模式用 running stats"""
    return BatchNorm2d.apply(
        x,
        gamma,
        beta,
        running_mean=running_mean,
        running_var=running_var,
        training=training,
        momentum=momentum,
        eps=eps,
        update_stats=update_stats,
    )


# ============================================================
# 激活
# ============================================================

class LeakyRelu(Function):
    name = "activation"

    def forward(self, x, slope=0.0):
        self.positive = x > 0
        note_switch(self.positive)
        self.slope = slope
        return np.where(self.positive, x, x * x.dtype.type(slope))

    def backward(self, grad):
        # x == 0 处取负半轴斜率作为次梯度
        return (np.where(self.positive, grad, grad * grad.dtype.type(self.slope)),)


def activation(x: Tensor, kind: str = "relu", slope: float = 0.0) -> Tensor:
    """max(x, slope·x)；relu 等价于 slope = 0"""
    if kind == "relu":
        slope = 0.0
    elif kind != "leaky_relu":
        raise UsageError(f"未知激活类型: {kind}")
    if not 0.0 <= slope < 1.0:
        raise UsageError(f"激活斜率需在 [0, 1) 内，收到 {slope}")
    return LeakyRelu.apply(x, slope=slope)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    return activation(x, "leaky_relu", slope)


# ============================================================
# 逐元素与归约
# ============================================================

class Add(Function):
    name = "elementwise_add"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"elementwise_add: dims mismatch {a.shape} vs {b.shape}")
        return a + b

    def backward(self, grad):
        return grad, grad


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


class Mul(Function):
    name = "elementwise_mul"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"elementwise_mul: dims mismatch {a.shape} vs {b.shape}")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


class AddScalar(Function):
    name = "add_scalar"

    def forward(self, x, value=0.0):
        return x + x.dtype.type(value)

    def backward(self, grad):
        return (grad,)


def add_scalar(x: Tensor, value: float) -> Tensor:
    return AddScalar.apply(x, value=value)


class MulScalar(Function):
    name = "mul_scalar"

    def forward(self, x, value=1.0):
        self.value = value
        return x * x.dtype.type(value)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.value),)


def mul_scalar(x: Tensor, value: float) -> Tensor:
    return MulScalar.apply(x, value=value)


class Square(Function):
    name = "square"

    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return (grad * 2 * self.x,)


def square(x: Tensor) -> Tensor:
    return Square.apply(x)


class Mean(Function):
    name = "mean"

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.mean(), dtype=x.dtype)

    def backward(self, grad):
        size = math.prod(self.shape)
        return (np.full(self.shape, grad / size, dtype=grad.dtype),)


def mean(x: Tensor) -> Tensor:
    return Mean.apply(x)


class Sum(Function):
    name = "sum"

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad):
        return (np.full(self.shape, grad, dtype=grad.dtype),)


def sum_all(x: Tensor) -> Tensor:
    return Sum.apply(x)


# ============================================================
# Softmax 与交叉熵
# ============================================================

def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class Softmax(Function):
    name = "softmax"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"softmax: 输入需为 N×K×h×w，收到 rank {x.ndim}")
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        self.y = e / e.sum(axis=1, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=1, keepdims=True)),)


def softmax(x: Tensor) -> Tensor:
    """沿通道维的 softmax"""
    return Softmax.apply(x)


class SoftmaxCrossEntropy(Function):
    name = "softmax_cross_entropy"

    def forward(self, scores, labels=None, ignore_id=None):
        if scores.ndim != 4:
            raise ShapeError(f"softmax_cross_entropy: scores 需为 N×K×h×w，收到 rank {scores.ndim}")
        n, k, h, w = scores.shape
        if labels.shape != (n, h, w):
            raise ShapeError(f"softmax_cross_entropy: shape mismatch，labels {labels.shape} 期望 {(n, h, w)}")
        labels = labels.astype(np.int64)
        mask = np.ones(labels.shape, dtype=bool) if ignore_id is None else labels != ignore_id
        count = int(mask.sum())
        if count == 0:
            raise UsageError("softmax_cross_entropy: all pixels ignored，均值无定义")
        if labels[mask].max(initial=0) >= k or labels[mask].min(initial=0) < 0:
            raise UsageError(f"softmax_cross_entropy: 类别 id 超出 [0, {k})")

        safe = np.where(mask, labels, 0)
        log_p = _log_softmax(scores)
        picked = np.take_along_axis(log_p, safe[:, None], axis=1)[:, 0]
        loss = -(picked * mask).sum() / count

        self.prob = np.exp(log_p)
        self.safe = safe
        self.mask = mask
        self.count = count
        return np.asarray(loss, dtype=scores.dtype)

    def backward(self, grad):
        g = self.prob.copy()
        one_hot = np.zeros_like(g)
        np.put_along_axis(one_hot, self.safe[:, None], 1.0, axis=1)
        g -= one_hot
        g *= self.mask[:, None].astype(g.dtype)
        g *= grad / self.count
        return (g,)


def softmax_cross_entropy(scores: Tensor, labels: np.ndarray, ignore_id: Optional[int] = None) -> Tensor:
    """非忽略像素上 −log softmax(scores)[label] 的均值"""
    return SoftmaxCrossEntropy.apply(scores, labels=labels, ignore_id=ignore_id)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """N×h×w 类别 id → N×K×h×w one-hot（不可微，仅作对抗网络输入）"""
    if labels.max(initial=0) >= num_classes:
        raise UsageError(f"one_hot: 类别 id 超出 [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels.astype(np.int64)[:, None], 1.0, axis=1)
    return out


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """逐个 elementwise_add"""
    total = tensors[0]
    for item in tensors[1:]:
        total = elementwise_add(total, item)
    return total
