"""
数据模型 - 所有配置与报告的 pydantic 定义

校验失败统一在 services.config_service 中转换为 UsageError。
"""
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from adaptparse import config

TrainMode = Literal["adapt", "source_only", "feat_adapt", "label_adapt", "target_only"]
StepName = Literal["P1", "EQ2", "EQ1", "EQ4", "EQ3", "P2"]


def _split_ints(value: Any) -> Any:
    """配置文件里的 "8,16,32" 转为 [8, 16, 32]"""
    if isinstance(value, str):
        return [int(v) for v in value.replace(" ", "").split(",") if v]
    return value


def _split_floats(value: Any) -> Any:
    if isinstance(value, str):
        return [float(v) for v in value.replace(" ", "").split(",") if v]
    return value


# ============================================================
# 网络规模
# ============================================================

class ScaleProfile(BaseModel):
    """网络层数/通道数配置（桌面规模或完整规模）"""
    model_config = ConfigDict(extra="forbid")

    stage_channels: List[int] = Field(default_factory=lambda: [8, 16, 32, 32, 32])
    convs_per_stage: List[int] = Field(default_factory=lambda: [1, 1, 1, 1, 1])
    comp_base_channels: int = 8
    num_residual_blocks: int = 6
    aspp_dilations: List[int] = Field(default_factory=lambda: [2, 4])
    label_adv_stride2_layers: int = 3
    num_classes: int = 4
    input_hw: Tuple[int, int] = (49, 25)
    parser_init: Literal["normal", "he"] = "normal"

    @field_validator("stage_channels", "convs_per_stage", "aspp_dilations", "input_hw", mode="before")
    @classmethod
    def split_int_lists(cls, value: Any) -> Any:
        return _split_ints(value)

    @model_validator(mode="after")
    def check_values(self) -> "ScaleProfile":
        if len(self.stage_channels) != 5:
            raise ValueError(f"stage_channels 需要 5 个值，收到 {len(self.stage_channels)}")
        if len(self.convs_per_stage) != 5:
            raise ValueError(f"convs_per_stage 需要 5 个值，收到 {len(self.convs_per_stage)}")
        values = self.stage_channels + self.convs_per_stage + self.aspp_dilations + list(self.input_hw)
        values += [self.comp_base_channels, self.num_residual_blocks, self.label_adv_stride2_layers]
        if any(v <= 0 for v in values):
            raise ValueError("ScaleProfile 所有数值必须为正")
        if not self.aspp_dilations:
            raise ValueError("aspp_dilations 不能为空")
        if self.num_residual_blocks % 3 != 0:
            raise ValueError(f"num_residual_blocks 必须能被 3 整除，收到 {self.num_residual_blocks}")
        if self.num_classes < 2:
            raise ValueError("num_classes 至少为 2")
        if min(self.input_hw) < 16:
            raise ValueError(f"input_hw 每边至少 16，收到 {self.input_hw}")
        return self

    @property
    def compensation_pools(self) -> int:
        return self.num_residual_blocks // 3


# ============================================================
# 训练配置
# ============================================================

class TrainConfig(BaseModel):
    """训练流程的全部超参数"""
    model_config = ConfigDict(extra="forbid")

    iterations: int = config.DEFAULT_ITERATIONS
    k_c: int = config.DEFAULT_K_C
    batch_size: int = config.DEFAULT_BATCH_SIZE
    lr_main: float = config.DEFAULT_LR_MAIN
    lr_feature_adv: float = config.DEFAULT_LR_FEATURE_ADV
    lr_label_adv: float = config.DEFAULT_LR_LABEL_ADV
    # EQ4 的 SGD 学习率，None 时沿用 lr_main
    lr_parser_adv: Optional[float] = None
    adam_beta1: float = config.DEFAULT_ADAM_BETAS[0]
    adam_beta2: float = config.DEFAULT_ADAM_BETAS[1]
    sgd_momentum: float = config.DEFAULT_SGD_MOMENTUM
    sgd_weight_decay: float = config.DEFAULT_SGD_WEIGHT_DECAY
    seed: int = config.DEFAULT_SEED
    mode: TrainMode = "adapt"
    adversarial_bn_updates: bool = True
    checkpoint_interval: int = 0
    log_interval: int = config.DEFAULT_LOG_INTERVAL
    check_isolation: bool = False
    profile: ScaleProfile = Field(default_factory=ScaleProfile)

    @model_validator(mode="after")
    def check_values(self) -> "TrainConfig":
        if self.iterations < 1:
            raise ValueError("iterations (N) 至少为 1")
        if self.k_c < 1:
            raise ValueError("k_c 至少为 1")
        if self.batch_size < 1:
            raise ValueError("batch_size 至少为 1")
        if self.lr_main <= 0:
            raise ValueError("lr_main 必须为正")
        # 对抗相关学习率允许为 0：0 表示该步不更新（等价性模式）
        for name in ("lr_feature_adv", "lr_label_adv", "lr_parser_adv"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} 不能为负")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam beta 需在 [0, 1) 内")
        if self.checkpoint_interval < 0 or self.log_interval < 0:
            raise ValueError("interval 不能为负")
        return self

    @property
    def parser_adv_lr(self) -> float:
        return self.lr_main if self.lr_parser_adv is None else self.lr_parser_adv


# ============================================================
# 合成数据
# ============================================================

class SceneParams(BaseModel):
    """合成场景参数"""
    model_config = ConfigDict(extra="forbid")

    seed: int = config.DEFAULT_SEED
    canvas_hw: Tuple[int, int] = (49, 25)
    scale_range: Tuple[float, float] = (0.6, 0.95)
    pose_jitter: float = 0.35
    texture_level: float = 0.15
    num_classes: Literal[4, 12] = 4

    @field_validator("canvas_hw", mode="before")
    @classmethod
    def split_canvas(cls, value: Any) -> Any:
        return _split_ints(value)

    @field_validator("scale_range", mode="before")
    @classmethod
    def split_scale(cls, value: Any) -> Any:
        return _split_floats(value)

    @model_validator(mode="after")
    def check_values(self) -> "SceneParams":
        lo, hi = self.scale_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"scale_range 需在 (0, 1] 内且 lo ≤ hi，收到 {self.scale_range}")
        if self.pose_jitter < 0 or self.texture_level < 0:
            raise ValueError("pose_jitter / texture_level 不能为负")
        return self


class ShiftParams(BaseModel):
    """域偏移参数；(1.0, 0, 0, 1, 0) 为恒等偏移"""
    model_config = ConfigDict(extra="forbid")

    brightness_factor: float = 1.0
    blur_sigma: float = 0.0
    noise_std: float = 0.0
    downscale_factor: int = 1
    motion_blur_len: int = 0

    @model_validator(mode="after")
    def check_values(self) -> "ShiftParams":
        if self.brightness_factor <= 0:
            raise ValueError("brightness_factor 必须为正")
        if self.blur_sigma < 0 or self.noise_std < 0:
            raise ValueError("blur_sigma / noise_std 不能为负")
        if self.downscale_factor < 1:
            raise ValueError("downscale_factor 至少为 1")
        if self.motion_blur_len < 0:
            raise ValueError("motion_blur_len 不能为负")
        return self

    def is_identity(self) -> bool:
        return (self.brightness_factor == 1.0 and self.blur_sigma == 0 and self.noise_std == 0
                and self.downscale_factor == 1 and self.motion_blur_len == 0)


# ============================================================
# 实验配置
# ============================================================

class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source_dir: str = "data/source"
    target_dir: str = "data/target_train"
    test_dir: str = "data/target_test"
    run_dir: str = "runs/default"

    @model_validator(mode="after")
    def check_distinct(self) -> "PathsConfig":
        paths = [self.source_dir, self.target_dir, self.test_dir, self.run_dir]
        if len(set(paths)) != len(paths):
            raise ValueError(f"路径必须互不相同: {paths}")
        return self


class RunSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eval_interval: int = 100
    n_source: int = config.DEFAULT_COUNTS[0]
    n_target_train: int = config.DEFAULT_COUNTS[1]
    n_target_test: int = config.DEFAULT_COUNTS[2]

    @model_validator(mode="after")
    def check_values(self) -> "RunSettings":
        if self.eval_interval < 0:
            raise ValueError("eval_interval 不能为负")
        if min(self.n_source, self.n_target_train, self.n_target_test) < 1:
            raise ValueError("各数据集样本数至少为 1")
        return self


class DomainSample(BaseModel):
    """一个样本：3×H×W 图像（[0, 1]）+ H×W 的 u8 标签图；目标域训练样本的 labels 为 None"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    sample_id: str
    image: np.ndarray
    labels: Optional[np.ndarray] = None
    domain: Literal["source", "target"] = "source"


class ExperimentConfig(BaseModel):
    """一次实验的完整配置（配置文件的每个 [section] 对应一个字段）"""
    model_config = ConfigDict(extra="forbid")

    train: TrainConfig = Field(default_factory=TrainConfig)
    scene: SceneParams = Field(default_factory=SceneParams)
    shift: ShiftParams = Field(default_factory=lambda: ShiftParams(
        brightness_factor=0.5, blur_sigma=1.0, noise_std=0.05, downscale_factor=2, motion_blur_len=3,
    ))
    paths: PathsConfig = Field(default_factory=PathsConfig)
    run: RunSettings = Field(default_factory=RunSettings)

    @model_validator(mode="after")
    def check_canvas(self) -> "ExperimentConfig":
        if tuple(self.scene.canvas_hw) != tuple(self.train.profile.input_hw):
            raise ValueError(
                f"scene.canvas_hw {self.scene.canvas_hw} 与 profile.input_hw {self.train.profile.input_hw} 不一致"
            )
        if self.scene.num_classes != self.train.profile.num_classes:
            raise ValueError("scene.num_classes 与 profile.num_classes 不一致")
        return self


# ============================================================
# 训练审计与报告
# ============================================================

class StepRecord(BaseModel):
    """一次参数更新"""
    step: StepName
    params: str
    loss: float


class StepAudit(BaseModel):
    """一个迭代内按执行顺序的更新记录"""
    t: int
    records: List[StepRecord] = Field(default_factory=list)

    def to_lines(self) -> List[str]:
        return [f"t={self.t} step={r.step} params={r.params} loss={r.loss!r}" for r in self.records]


class MetricReport(BaseModel):
    """分割评估报告；未定义的值为 None"""
    num_classes: int
    pixel_accuracy: float
    foreground_accuracy: Optional[float]
    avg_precision: float
    avg_recall: float
    avg_f1: float
    per_class_f1: List[Optional[float]]
    per_class_precision: List[Optional[float]]
    per_class_recall: List[Optional[float]]


class RunManifest(BaseModel):
    """运行清单：配置快照 + 每次评估的指标"""
    config: Dict[str, Any]
    seed: int
    version: str
    metric_history: List[Dict[str, Any]] = Field(default_factory=list)
