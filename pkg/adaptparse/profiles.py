"""
网络规模与域偏移预设 - 唯一真理源

其他模块通过 get_profile() / get_shift() 获取预设，不要在别处写死层数或偏移强度。
获取优先级：调用方覆盖 > 预设默认值
"""
from typing import Any, Dict, List, Optional

from adaptparse.errors import UsageError
from adaptparse.models.schemas import ScaleProfile, ShiftParams


# ============================================================
# 网络规模
# ============================================================

PROFILE_REGISTRY: Dict[str, Dict[str, Any]] = {
    "desk": {
        "name": "桌面规模",
        "description": "CPU 上数分钟可训练完的缩小版网络",
        "values": {
            "stage_channels": [8, 16, 32, 32, 32],
            "convs_per_stage": [1, 1, 1, 1, 1],
            "comp_base_channels": 8,
            "num_residual_blocks": 6,
            "aspp_dilations": [2, 4],
            "label_adv_stride2_layers": 3,
            "num_classes": 4,
            "input_hw": (49, 25),
        },
    },
    "full": {
        "name": "完整规模",
        "description": "VGG-16 conv1-pool5 的通道数与 241×121 输入",
        "values": {
            "stage_channels": [64, 128, 256, 512, 512],
            "convs_per_stage": [2, 2, 3, 3, 3],
            "comp_base_channels": 64,
            "num_residual_blocks": 6,
            "aspp_dilations": [6, 12, 18, 24],
            "label_adv_stride2_layers": 3,
            "num_classes": 4,
            "input_hw": (241, 121),
        },
    },
}


# ============================================================
# 域偏移
# ============================================================

SHIFT_REGISTRY: Dict[str, Dict[str, Any]] = {
    "identity": {
        "name": "无偏移",
        "description": "源域使用",
        "values": {},
    },
    "compound": {
        "name": "复合偏移",
        "description": "变暗 + 高斯模糊 + 运动模糊 + 降分辨率 + 噪声",
        "values": {
            "brightness_factor": 0.5,
            "blur_sigma": 1.0,
            "noise_std": 0.05,
            "downscale_factor": 2,
            "motion_blur_len": 3,
        },
    },
}


# ============================================================
# 获取函数
# ============================================================

def get_profile(key: str = "desk", overrides: Optional[Dict[str, Any]] = None) -> ScaleProfile:
    """
    获取网络规模预设

    Args:
        key: 预设名（desk / full）
        overrides: 覆盖部分字段

    Returns:
        校验过的 ScaleProfile
    """
    if key not in PROFILE_REGISTRY:
        raise UsageError(f"未知网络规模预设: {key}，可选 {get_all_profile_keys()}")
    values = dict(PROFILE_REGISTRY[key]["values"])
    values.update(overrides or {})
    return ScaleProfile(**values)


def get_shift(key: str = "compound") -> ShiftParams:
    """获取域偏移预设"""
    if key not in SHIFT_REGISTRY:
        raise UsageError(f"未知域偏移预设: {key}，可选 {list(SHIFT_REGISTRY)}")
    return ShiftParams(**SHIFT_REGISTRY[key]["values"])


def get_all_profile_keys() -> List[str]:
    """获取所有网络规模预设名"""
    return list(PROFILE_REGISTRY.keys())
