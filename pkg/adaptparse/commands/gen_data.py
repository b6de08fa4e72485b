"""
gen-data 子命令 - 生成源域 / 目标域训练集 / 目标域测试集

目标域训练集的标签不写进 manifest，只另存到 heldout_labels/（target_only 模式用）。
"""
import logging
import shutil
from pathlib import Path
from typing import Dict

from adaptparse.errors import UsageError
from adaptparse.profiles import get_shift
from adaptparse.services.config_service import load_experiment_config
from adaptparse.services.dataset_service import write_dataset
from adaptparse.services.synth_service import generate_domain

logger = logging.getLogger(__name__)

# 三个集合使用不重叠的场景 index
SOURCE_OFFSET = 0
TARGET_TRAIN_OFFSET = 1_000_000
TARGET_TEST_OFFSET = 2_000_000


def register(subparsers) -> None:
    parser = subparsers.add_parser("gen-data", help="生成合成数据集", allow_abbrev=False)
    parser.add_argument("--config", help="配置文件")
    parser.add_argument("--force", action="store_true", help="覆盖已存在的非空输出目录")
    parser.set_defaults(handler=run, accepts_overrides=True)


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"输出目录 {path} 已存在且非空，使用 --force 覆盖")
        logger.warning(f"--force: 清空 {path}")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def run(args, overrides: Dict[str, str]) -> int:
    experiment = load_experiment_config(args.config, overrides)
    paths, counts, scene = experiment.paths, experiment.run, experiment.scene

    dirs = [Path(paths.source_dir), Path(paths.target_dir), Path(paths.test_dir)]
    for d in dirs:
        _prepare_dir(d, args.force)

    identity = get_shift("identity")
    source = generate_domain(scene, identity, counts.n_source, "source", start_index=SOURCE_OFFSET)
    write_dataset(source, dirs[0])

    target_train = generate_domain(
        scene, experiment.shift, counts.n_target_train, "target", start_index=TARGET_TRAIN_OFFSET,
    )
    withheld = [s.model_copy(update={"labels": None}) for s in target_train]
    write_dataset(withheld, dirs[1], heldout=target_train)

    target_test = generate_domain(
        scene, experiment.shift, counts.n_target_test, "target", start_index=TARGET_TEST_OFFSET,
    )
    write_dataset(target_test, dirs[2])

    print(f"source       {dirs[0]}  {len(source)} 个样本")
    print(f"target_train {dirs[1]}  {len(target_train)} 个样本（标签已扣留）")
    print(f"target_test  {dirs[2]}  {len(target_test)} 个样本")
    return 0
