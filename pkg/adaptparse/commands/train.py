"""
train 子命令 - 按配置训练，周期性在目标域测试集上评估
"""
import logging
from typing import Dict

from adaptparse.services.config_service import load_experiment_config
from adaptparse.services.dataset_service import load_dataset
from adaptparse.services.train_service import run_experiment

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="训练（mode 见配置 [train]）", allow_abbrev=False)
    parser.add_argument("--config", help="配置文件")
    parser.add_argument("--resume", help="从 checkpoint 继续训练")
    parser.set_defaults(handler=run, accepts_overrides=True)


def run(args, overrides: Dict[str, str]) -> int:
    experiment = load_experiment_config(args.config, overrides)
    hw = experiment.train.profile.input_hw
    target_only = experiment.train.mode == "target_only"

    source = load_dataset(experiment.paths.source_dir, image_hw=hw)
    target = load_dataset(experiment.paths.target_dir, image_hw=hw, use_heldout=target_only)
    test = load_dataset(experiment.paths.test_dir, image_hw=hw) if experiment.run.eval_interval else None

    manifest = run_experiment(experiment, source, target, test, resume=args.resume)

    print(f"run_dir: {experiment.paths.run_dir}")
    if manifest.metric_history:
        last = manifest.metric_history[-1]
        print(f"iteration {last['iter']}: avg_f1={last['metrics']['avg_f1']:.4f}")
    return 0
