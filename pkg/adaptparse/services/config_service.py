"""
配置服务 - 读取实验配置

配置文件是按行的 key = value 文本，[section] 分节：

    [train]    TrainConfig（mode / iterations / k_c / 学习率 ...）
    [profile]  preset = desk|full，其余键覆盖 ScaleProfile 字段
    [scene]    SceneParams
    [shift]    preset = identity|compound，其余键覆盖 ShiftParams 字段
    [paths]    source_dir / target_dir / test_dir / run_dir
    [run]      eval_interval / n_source / n_target_train / n_target_test

优先级：环境变量 ADAPT_PARSE_SEED > 命令行 --key value > 配置文件 > 默认值。
命令行键可写成 section.key；不带 section 时写入所有含该键的节（例如 seed、num_classes）。
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from pydantic import ValidationError

from adaptparse import config
from adaptparse.errors import StorageError, UsageError
from adaptparse.models.schemas import (
    ExperimentConfig,
    PathsConfig,
    RunSettings,
    ScaleProfile,
    SceneParams,
    ShiftParams,
    TrainConfig,
)
from adaptparse.profiles import get_profile, get_shift

logger = logging.getLogger(__name__)

PRESET_KEY = "preset"

SECTION_KEYS: Dict[str, List[str]] = {
    "train": [k for k in TrainConfig.model_fields if k != "profile"],
    "profile": [PRESET_KEY] + list(ScaleProfile.model_fields),
    "scene": list(SceneParams.model_fields),
    "shift": [PRESET_KEY] + list(ShiftParams.model_fields),
    "paths": list(PathsConfig.model_fields),
    "run": list(RunSettings.model_fields),
}

NONE_VALUES = {"", "none", "null"}
OPTIONAL_TRAIN_KEYS = {"lr_parser_adv"}


# ============================================================
# 解析
# ============================================================

def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Dict[str, str]]:
    """解析 key = value / [section] 文本；# 或 ; 开头的行为注释"""
    sections: Dict[str, Dict[str, str]] = {name: {} for name in SECTION_KEYS}
    current: Optional[str] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in SECTION_KEYS:
                raise UsageError(f"{source}:{lineno}: 未知的节 [{current}]，可选 {list(SECTION_KEYS)}")
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: 需要 key = value，收到 {line!r}")
        if current is None:
            raise UsageError(f"{source}:{lineno}: 键值出现在任何 [section] 之前")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SECTION_KEYS[current]:
            raise UsageError(f"{source}:{lineno}: [{current}] 中没有键 {key!r}")
        sections[current][key] = value
    return sections


def load_config_file(path: Union[str, Path]) -> Dict[str, Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"配置文件不存在: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def parse_override_args(args: Sequence[str]) -> Dict[str, str]:
    """把 ["--iterations", "20", "--train.mode=source_only"] 转为 {"iterations": "20", "train.mode": "source_only"}"""
    overrides: Dict[str, str] = {}
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--") or len(arg) == 2:
            raise UsageError(f"无法识别的参数 {arg!r}，覆盖项需写成 --key value")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise UsageError(f"参数 {arg} 缺少取值")
            value = args[i + 1]
            i += 2
        overrides[key.replace("-", "_")] = value
    return overrides


def apply_overrides(sections: Dict[str, Dict[str, str]], overrides: Dict[str, str]) -> None:
    for key, value in overrides.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTION_KEYS or name not in SECTION_KEYS[section]:
                raise UsageError(f"未知的配置键 --{key}")
            sections[section][name] = value
            continue
        targets = [s for s, keys in SECTION_KEYS.items() if key in keys]
        if not targets:
            raise UsageError(f"未知的配置键 --{key}")
        for section in targets:
            sections[section][key] = value


# ============================================================
# 组装
# ============================================================

def _clean(values: Dict[str, str]) -> Dict[str, Optional[str]]:
    return {k: (None if v.strip().lower() in NONE_VALUES else v) for k, v in values.items()}


def build_experiment_config(sections: Dict[str, Dict[str, str]]) -> ExperimentConfig:
    """由分节的字符串值构建并校验 ExperimentConfig；校验失败转为 UsageError"""
    try:
        profile_values = dict(sections.get("profile", {}))
        profile = get_profile(profile_values.pop(PRESET_KEY, "desk"), overrides=profile_values)

        shift_values = dict(sections.get("shift", {}))
        base_shift = get_shift(shift_values.pop(PRESET_KEY, "compound"))
        shift = ShiftParams(**{**base_shift.model_dump(), **shift_values})

        scene_values = {"canvas_hw": profile.input_hw, "num_classes": profile.num_classes}
        scene_values.update(sections.get("scene", {}))

        train_values = {
            k: v for k, v in _clean(sections.get("train", {})).items()
            if v is not None or k in OPTIONAL_TRAIN_KEYS
        }
        experiment = ExperimentConfig(
            train=TrainConfig(**train_values, profile=profile),
            scene=SceneParams(**scene_values),
            shift=shift,
            paths=PathsConfig(**sections.get("paths", {})),
            run=RunSettings(**sections.get("run", {})),
        )
    except ValidationError as e:
        raise UsageError(f"配置无效: {e}") from e

    try:
        seed = config.get_seed_override()
    except ValueError:
        raise UsageError(f"{config.SEED_ENV_VAR} 需为整数") from None
    if seed is not None:
        logger.info(f"{config.SEED_ENV_VAR}={seed} 覆盖配置中的 seed")
        experiment.train.seed = seed
        experiment.scene.seed = seed
    return experiment


def load_experiment_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, str]] = None,
) -> ExperimentConfig:
    """配置文件（可选）+ 命令行覆盖 + 环境变量 → ExperimentConfig"""
    sections = load_config_file(path) if path else {name: {} for name in SECTION_KEYS}
    apply_overrides(sections, overrides or {})
    return build_experiment_config(sections)
