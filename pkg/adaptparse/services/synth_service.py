"""
合成数据服务 - 程序化的人形场景与域偏移

场景：Pillow 在画布分辨率上把 12 个部件的 id 直接画进标签图（L 模式），
图像再按标签图逐部件上色、叠加纹理，所以标签与图像天然对齐。
4 类模式把 12 个部件合并为 背景 / 头部 / 上身 / 下身。

域偏移顺序固定：亮度 → 高斯模糊 → 水平运动模糊 → 降分辨率再放大（最近邻）→ 加性噪声 → 截断到 [0, 1]。
"""
import logging
import math
from typing import List, Literal, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image, ImageDraw

from adaptparse.errors import UsageError
from adaptparse.models.schemas import DomainSample, SceneParams, ShiftParams

logger = logging.getLogger(__name__)

MIN_CANVAS = 16
MAX_ATTEMPTS = 16

# 12 部件 id
BG, HAIR, FACE, NECK, UPPER, L_ARM, R_ARM, PANTS, L_LEG, R_LEG, L_SHOE, R_SHOE = range(12)

PART_NAMES = [
    "background", "hair", "face", "neck", "upper-clothes", "left-arm",
    "right-arm", "pants", "left-leg", "right-leg", "left-shoe", "right-shoe",
]

# 12 → 4：头部 = 头发/脸/脖子，上身 = 上衣/两臂，下身 = 裤子/两腿/两鞋
MERGE_TO_4 = np.array([0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 3, 3], dtype=np.uint8)


# ============================================================
# 场景渲染
# ============================================================

def _draw_parts(h: int, w: int, rng: np.random.Generator, params: SceneParams) -> np.ndarray:
    """在 H×W 画布上画出 12 部件的 id 图"""
    canvas = Image.new("L", (w, h), BG)
    draw = ImageDraw.Draw(canvas)

    lo, hi = params.scale_range
    u = float(rng.uniform(lo, hi)) * h
    jitter = params.pose_jitter

    shoulder = 0.16 * u
    cx = w / 2 + float(rng.uniform(-1, 1)) * jitter * 0.1 * w
    cx = min(max(cx, shoulder + 1), w - shoulder - 1)
    top = float(rng.uniform(0, 1)) * max(0.0, h - 1.02 * u)

    # 头部
    ry = max(3.0, 0.1 * u)
    rx = max(3.0, 0.75 * ry)
    head_cy = top + ry
    neck_top = head_cy + ry - 1
    neck_h = max(1.5, 0.04 * u)
    torso_top = neck_top + neck_h
    torso_h = 0.32 * u
    hip = 0.12 * u
    skew = float(rng.uniform(-1, 1)) * jitter * 0.05 * u
    torso_bottom = torso_top + torso_h
    pants_bottom = torso_bottom + 0.12 * u
    limb_w = max(2, int(round(0.06 * u)))

    # 腿与鞋（最先画，被裤子压住上端）
    leg_len = 0.3 * u
    for side, leg_id, shoe_id in ((-1, L_LEG, L_SHOE), (1, R_LEG, R_SHOE)):
        x0 = cx + skew + side * 0.06 * u
        angle = math.radians(side * 5 + float(rng.uniform(-1, 1)) * jitter * 10)
        x1 = x0 + math.sin(angle) * leg_len
        y1 = pants_bottom - 1 + math.cos(angle) * leg_len
        draw.line([(x0, pants_bottom - 1), (x1, y1)], fill=leg_id, width=limb_w)
        r = max(1.5, 0.03 * u)
        draw.ellipse([x1 - r - 0.5, y1 - r * 0.6, x1 + r + 0.5, y1 + r * 0.6 + 1], fill=shoe_id)

    draw.polygon(
        [(cx + skew - hip, torso_bottom - 1), (cx + skew + hip, torso_bottom - 1),
         (cx + skew + hip * 1.1, pants_bottom), (cx + skew - hip * 1.1, pants_bottom)],
        fill=PANTS,
    )

    # 手臂从肩部向外下方伸出，随后被躯干覆盖内侧
    arm_len = 0.35 * u
    for side, arm_id in ((-1, L_ARM), (1, R_ARM)):
        x0 = cx + side * (shoulder - limb_w / 2)
        angle = math.radians(side * (20 + float(rng.uniform(-1, 1)) * jitter * 30))
        draw.line(
            [(x0, torso_top + 1), (x0 + math.sin(angle) * arm_len, torso_top + 1 + math.cos(angle) * arm_len)],
            fill=arm_id, width=limb_w,
        )

    draw.polygon(
        [(cx - shoulder, torso_top), (cx + shoulder, torso_top),
         (cx + skew + hip, torso_bottom), (cx + skew - hip, torso_bottom)],
        fill=UPPER,
    )
    neck_w = max(1.5, 0.45 * rx)
    draw.rectangle([cx - neck_w, neck_top, cx + neck_w, torso_top], fill=NECK)
    head_box = [cx - rx, head_cy - ry, cx + rx, head_cy + ry]
    draw.ellipse(head_box, fill=FACE)
    draw.chord(head_box, start=180, end=360, fill=HAIR)

    return np.asarray(canvas, dtype=np.uint8).copy()


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int = 6) -> np.ndarray:
    """粗网格高斯噪声最近邻放大，作为背景低频纹理"""
    coarse = rng.standard_normal((math.ceil(h / cell), math.ceil(w / cell)))
    return np.repeat(np.repeat(coarse, cell, axis=0), cell, axis=1)[:h, :w]


def _paint(parts: np.ndarray, rng: np.random.Generator, params: SceneParams) -> np.ndarray:
    """按部件 id 上色并叠加纹理，返回 3×H×W float32"""
    h, w = parts.shape
    palette = rng.uniform(0.15, 0.95, size=(12, 3))
    image = palette[parts].transpose(2, 0, 1)
    background = parts == BG
    texture = params.texture_level
    image = image + texture * _smooth_noise(rng, h, w)[None] * background[None]
    image = image + 0.5 * texture * rng.standard_normal((3, h, w))
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def generate_scene(params: SceneParams, index: int) -> DomainSample:
    """
    渲染第 index 个场景；结果只由 (seed, index) 决定

    每个类别至少 1 个像素；随机姿态导致某个部件消失时，换下一个子种子重画。
    """
    h, w = params.canvas_hw
    if h < MIN_CANVAS or w < MIN_CANVAS:
        raise UsageError(f"画布 {h}×{w} 太小，每边至少 {MIN_CANVAS}")

    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence([params.seed, index, attempt]))
        parts = _draw_parts(h, w, rng, params)
        labels = parts if params.num_classes == 12 else MERGE_TO_4[parts]
        if len(np.unique(labels)) == params.num_classes:
            image = _paint(parts, rng, params)
            return DomainSample(sample_id=f"{index:05d}", image=image, labels=labels, domain="source")
        logger.debug(f"场景 {index} 第 {attempt} 次渲染缺少类别，重画")

    raise UsageError(
        f"场景 {index} 在 {MAX_ATTEMPTS} 次尝试内无法画出全部 {params.num_classes} 个类别，"
        f"请增大 canvas_hw 或 scale_range"
    )


# ============================================================
# 域偏移
# ============================================================

def gaussian_kernel(sigma: float) -> np.ndarray:
    """截断半径 ceil(3σ) 的归一化一维高斯核"""
    radius = max(1, math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _filter_axis(image: np.ndarray, kernel: np.ndarray, axis: int, left: int, mode: str) -> np.ndarray:
    """沿 axis 做一维相关；left 为左侧填充宽度"""
    right = len(kernel) - 1 - left
    size = image.shape[axis]
    if mode == "reflect" and max(left, right) >= size:
        mode = "edge"
    pad = [(0, 0)] * image.ndim
    pad[axis] = (left, right)
    padded = np.pad(image, pad, mode=mode)
    windows = sliding_window_view(padded, len(kernel), axis=axis)
    return windows @ kernel


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    kernel = gaussian_kernel(sigma)
    r = len(kernel) // 2
    out = _filter_axis(image, kernel, axis=1, left=r, mode="reflect")
    return _filter_axis(out, kernel, axis=2, left=r, mode="reflect")


def motion_blur(image: np.ndarray, length: int) -> np.ndarray:
    """长度 length 的水平盒状模糊"""
    kernel = np.full(length, 1.0 / length)
    return _filter_axis(image, kernel, axis=2, left=(length - 1) // 2, mode="edge")


def resolution_loss(image: np.ndarray, factor: int) -> np.ndarray:
    """按 factor 最近邻降采样再最近邻放大回原尺寸"""
    _, h, w = image.shape
    small = image[:, ::factor, ::factor]
    return np.repeat(np.repeat(small, factor, axis=1), factor, axis=2)[:, :h, :w]


def apply_domain_shift(image: np.ndarray, shift: ShiftParams, seed: int = 0) -> np.ndarray:
    """
    对 3×H×W 图像施加域偏移，标签图不受影响

    Args:
        image: [0, 1] 内的 float32 图像
        shift: 偏移参数；恒等偏移时原样返回（按位相同的副本）
        seed: 噪声随机种子
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise UsageError(f"apply_domain_shift: 图像需为 3×H×W，收到 {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise UsageError("apply_domain_shift: 图像数值需在 [0, 1] 内")
    if shift.is_identity():
        return image.copy()

    dtype = image.dtype
    out = image.astype(np.float64) * shift.brightness_factor
    if shift.blur_sigma > 0:
        out = gaussian_blur(out, shift.blur_sigma)
    if shift.motion_blur_len > 1:
        out = motion_blur(out, shift.motion_blur_len)
    if shift.downscale_factor > 1:
        out = resolution_loss(out, shift.downscale_factor)
    if shift.noise_std > 0:
        out = out + np.random.default_rng(seed).normal(0.0, shift.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(dtype)


# ============================================================
# 整个域
# ============================================================

def generate_domain(
    scene: SceneParams,
    shift: ShiftParams,
    count: int,
    domain: Literal["source", "target"] = "source",
    start_index: int = 0,
    keep_labels: bool = True,
) -> List[DomainSample]:
    """
    生成 count 个样本并施加偏移

    结果只由 (scene, shift, count, start_index) 决定；keep_labels=False 时丢弃标签。
    """
    samples: List[DomainSample] = []
    for index in range(start_index, start_index + count):
        sample = generate_scene(scene, index)
        noise_seed = int(np.random.SeedSequence([scene.seed, index, 0x5EED]).generate_state(1)[0])
        image = apply_domain_shift(sample.image, shift, seed=noise_seed)
        labels: Optional[np.ndarray] = sample.labels if keep_labels else None
        samples.append(DomainSample(sample_id=sample.sample_id, image=image, labels=labels, domain=domain))
    logger.info(f"生成 {domain} 域样本 {count} 个（起始 index {start_index}）")
    return samples
