"""
训练服务 - 交替训练流程

每个迭代 t（从 1 开始）按固定顺序执行：
    P1   E,L   SGD   源域交叉熵
    EQ2  C     Adam  补偿网络骗 A_f（E、A_f 冻结）
    EQ1  A_f   Adam  特征对抗（输入为 C 更新后重新计算、已 detach 的特征）
    EQ4  E,L   SGD   目标域预测骗 A_l（A_l 冻结）          仅当 t % K_C == 0
    EQ3  A_l   Adam  标签对抗（预测为 EQ4 之后重新计算）   仅当 t % K_C == 0
    P2   E,L   SGD   补偿后源域特征上的交叉熵（C 冻结）

模式：
    adapt        全部六步
    source_only  只有 P1
    feat_adapt   P1, EQ2, EQ1, P2
    label_adapt  P1, EQ4, EQ3
    target_only  只有 P1，但用目标域训练集被扣留的标签训练
"""
import logging
from contextlib import ExitStack
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set, Tuple, Union

import numpy as np

from adaptparse import __version__, config
from adaptparse.engine import functional as F
from adaptparse.engine.tensor import Tensor, no_grad
from adaptparse.engine.tensor_io import atomic_write_text
from adaptparse.errors import IsolationError, NumericalError, ShapeError, UsageError
from adaptparse.models.schemas import (
    ExperimentConfig,
    MetricReport,
    RunManifest,
    StepAudit,
    StepName,
    StepRecord,
    TrainConfig,
)
from adaptparse.services import loss_service as losses
from adaptparse.services.checkpoint_service import checkpoint_load, checkpoint_save, read_meta, require
from adaptparse.services.dataset_service import Dataset
from adaptparse.services.metric_service import report_to_csv_row, report_to_document, rows_to_csv
from adaptparse.services.network_service import (
    NETWORK_TAGS,
    NetworkInstance,
    build_all,
    forward_compensated,
    parser_probs,
)
from adaptparse.services.optim_service import SGD, Adam, OptimSettings, optimizer_step

logger = logging.getLogger(__name__)

SOURCE_DOMAIN_ID = 0
TARGET_DOMAIN_ID = 1

# 每一步允许改动的网络
STEP_NETWORKS: Dict[str, Set[str]] = {
    "P1": {"E", "L"},
    "EQ2": {"C"},
    "EQ1": {"A_f"},
    "EQ4": {"E", "L"},
    "EQ3": {"A_l"},
    "P2": {"E", "L"},
}
STEP_PARAMS_LABEL = {"P1": "E,L", "EQ2": "C", "EQ1": "A_f", "EQ4": "E,L", "EQ3": "A_l", "P2": "E,L"}

FEATURE_MODES = ("adapt", "feat_adapt")
LABEL_MODES = ("adapt", "label_adapt")


# ============================================================
# 批采样
# ============================================================

class BatchSampler:
    """
    每个 epoch 一个均匀随机排列，用完后换下一个 epoch 的排列

    排列只由 (seed, domain_id, epoch) 决定，状态 (epoch, position) 可存入 checkpoint。
    """

    def __init__(self, size: int, batch_size: int, seed: int, domain_id: int):
        if size < 1:
            raise UsageError("数据集为空，无法采样")
        self.size = size
        self.batch_size = batch_size
        self.seed = seed
        self.domain_id = domain_id
        self.epoch = 0
        self.position = 0
        self._perm = self._permutation(0)

    def _permutation(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.domain_id, epoch]))
        return rng.permutation(self.size)

    def next_batch(self) -> np.ndarray:
        out = []
        while len(out) < self.batch_size:
            if self.position >= self.size:
                self.epoch += 1
                self.position = 0
                self._perm = self._permutation(self.epoch)
            take = min(self.batch_size - len(out), self.size - self.position)
            out.extend(self._perm[self.position:self.position + take].tolist())
            self.position += take
        return np.array(out, dtype=np.int64)

    def state(self) -> np.ndarray:
        return np.array([self.epoch, self.position], dtype=np.float64)

    def load_state(self, state: np.ndarray) -> None:
        epoch, position = (int(v) for v in state.reshape(-1)[:2])
        self.epoch, self.position = epoch, position
        self._perm = self._permutation(epoch)


# ============================================================
# Trainer
# ============================================================

class Trainer:
    """持有五个网络、四个优化器、两个采样器和迭代计数"""

    def __init__(self, train_config: TrainConfig, source: Dataset, target: Dataset):
        self.config = train_config
        self.profile = train_config.profile
        self.mode = train_config.mode

        if self.mode == "target_only":
            if not target.has_labels:
                raise UsageError("target_only 模式需要目标域训练集的 heldout 标签")
            labeled = target
        else:
            if not source.has_labels:
                raise UsageError(f"源域数据集 {source.root} 没有标签")
            labeled = source
        for ds in (source, target):
            if len(ds) == 0:
                raise UsageError(f"数据集 {ds.root} 为空")
            if tuple(ds.image_hw) != tuple(self.profile.input_hw):
                raise ShapeError(f"数据集 {ds.root} 图像尺寸 {ds.image_hw} 与 profile.input_hw {self.profile.input_hw} 不一致")
        if int(labeled.labels.max()) >= self.profile.num_classes:
            raise UsageError(f"标签 id 超出 num_classes={self.profile.num_classes}")

        self.labeled = labeled
        self.target = target
        self.nets: Dict[str, NetworkInstance] = build_all(self.profile, train_config.seed)
        for net in self.nets.values():
            net.train()

        E, L = self.nets["E"], self.nets["L"]
        c = train_config
        self.parser_optim = SGD(
            "E_L", E.named_parameters() + L.named_parameters(),
            OptimSettings(lr=c.lr_main, momentum=c.sgd_momentum, weight_decay=c.sgd_weight_decay),
        )
        self.parser_adv_settings = OptimSettings(
            lr=c.parser_adv_lr, momentum=c.sgd_momentum, weight_decay=c.sgd_weight_decay,
        )
        adam = dict(beta1=c.adam_beta1, beta2=c.adam_beta2)
        self.comp_optim = Adam("C", self.nets["C"].named_parameters(), OptimSettings(lr=c.lr_feature_adv, **adam))
        self.feat_adv_optim = Adam("A_f", self.nets["A_f"].named_parameters(), OptimSettings(lr=c.lr_feature_adv, **adam))
        self.label_adv_optim = Adam("A_l", self.nets["A_l"].named_parameters(), OptimSettings(lr=c.lr_label_adv, **adam))

        self.source_sampler = BatchSampler(len(labeled), c.batch_size, c.seed, SOURCE_DOMAIN_ID)
        self.target_sampler = BatchSampler(len(target), c.batch_size, c.seed, TARGET_DOMAIN_ID)
        self.iteration = 0

    @property
    def optimizers(self):
        return [self.parser_optim, self.comp_optim, self.feat_adv_optim, self.label_adv_optim]

    # ---------- 单步 ----------

    def _digests(self) -> Dict[str, str]:
        return {tag: net.param_digest() for tag, net in self.nets.items()}

    def _adversarial_context(self) -> ExitStack:
        """adversarial_bn_updates 为 False 时，(b)-(d) 的前向不更新任何 BN running stats"""
        stack = ExitStack()
        if not self.config.adversarial_bn_updates:
            for net in self.nets.values():
                stack.enter_context(net.stats_frozen())
        return stack

    def _finish(self, t: int, step: StepName, loss: Tensor, update: Callable[[], None], audit: StepAudit) -> None:
        value = loss.item()
        if not np.isfinite(value):
            logger.error(f"iteration {t} step {step}: 非有限损失 {value}")
            raise NumericalError(f"iteration {t} step {step}: 非有限损失 {value}")
        before = self._digests() if self.config.check_isolation else None
        loss.backward()
        try:
            update()
        except NumericalError as e:
            logger.error(f"iteration {t} step {step}: {e.detail}")
            raise NumericalError(f"iteration {t} step {step}: {e.detail}") from e
        if before is not None:
            after = self._digests()
            changed = {tag for tag in NETWORK_TAGS if before[tag] != after[tag]}
            extra = changed - STEP_NETWORKS[step]
            if extra:
                raise IsolationError(f"iteration {t} step {step} 改动了不该改动的网络: {sorted(extra)}")
        audit.records.append(StepRecord(step=step, params=STEP_PARAMS_LABEL[step], loss=value))

    def _parser_zero_grad(self) -> None:
        self.nets["E"].zero_grad()
        self.nets["L"].zero_grad()

    def step(self) -> StepAudit:
        """执行一个迭代，返回该迭代的审计记录"""
        t = self.iteration + 1
        E, C, L, A_f, A_l = (self.nets[k] for k in NETWORK_TAGS)
        audit = StepAudit(t=t)

        src_idx = self.source_sampler.next_batch()
        tgt_idx = self.target_sampler.next_batch()
        s_x = Tensor(self.labeled.images[src_idx])
        s_y = losses.downsample_labels(self.labeled.labels[src_idx])
        t_x = Tensor(self.target.images[tgt_idx])

        # (a) P1
        self._parser_zero_grad()
        loss = losses.pixelwise_cross_entropy(L(E(s_x)), s_y)
        self._finish(t, "P1", loss, self.parser_optim.step, audit)

        if self.mode in FEATURE_MODES:
            with self._adversarial_context():
                # (b) EQ2
                C.zero_grad()
                with E.frozen():
                    comp = forward_compensated(E, C, s_x)
                    loss = losses.loss_compensator(A_f, comp)
                self._finish(t, "EQ2", loss, self.comp_optim.step, audit)

                # (c) EQ1
                with no_grad():
                    target_feat = E(t_x)
                    comp = forward_compensated(E, C, s_x)
                A_f.zero_grad()
                loss = losses.loss_feature_adversary(A_f, target_feat, comp)
                self._finish(t, "EQ1", loss, self.feat_adv_optim.step, audit)

        if self.mode in LABEL_MODES and t % self.config.k_c == 0:
            with self._adversarial_context():
                # (d) EQ4，然后 EQ3
                self._parser_zero_grad()
                loss = losses.loss_parser_adversarial(A_l, parser_probs(E, L, t_x))
                self._finish(t, "EQ4", loss, self._parser_adversarial_update, audit)

                with no_grad():
                    pred = parser_probs(E, L, t_x)
                gt = Tensor(F.one_hot(s_y, self.profile.num_classes, dtype=pred.dtype))
                A_l.zero_grad()
                loss = losses.loss_label_adversary(A_l, gt, pred)
                self._finish(t, "EQ3", loss, self.label_adv_optim.step, audit)

        if self.mode in FEATURE_MODES:
            # (e) P2
            self._parser_zero_grad()
            with C.frozen():
                comp = forward_compensated(E, C, s_x)
            loss = losses.pixelwise_cross_entropy(L(comp), s_y)
            self._finish(t, "P2", loss, self.parser_optim.step, audit)

        self.iteration = t
        if self.config.log_interval and t % self.config.log_interval == 0:
            summary = " ".join(f"{r.step}={r.loss:.5f}" for r in audit.records)
            logger.info(f"iteration {t}/{self.config.iterations}: {summary}")
        return audit

    def _parser_adversarial_update(self) -> None:
        """EQ4 与 P1/P2 共用 E,L 的 SGD 动量缓冲，学习率单独设置"""
        opt = self.parser_optim
        optimizer_step(
            opt.params, [p.grad for p in opt.params], opt.state, "sgd", self.parser_adv_settings,
            names=[n for n, _ in opt.named_params],
        )

    # ---------- 状态 ----------

    def state_dict(self) -> Dict[str, np.ndarray]:
        state: Dict[str, np.ndarray] = {}
        for tag in NETWORK_TAGS:
            state.update(self.nets[tag].state_dict())
        for opt in self.optimizers:
            state.update(opt.state_dict())
        state["trainer.iteration"] = np.array([self.iteration], dtype=np.float64)
        state["sampler.source"] = self.source_sampler.state()
        state["sampler.target"] = self.target_sampler.state()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for tag in NETWORK_TAGS:
            self.nets[tag].load_state_dict(state)
        for opt in self.optimizers:
            opt.load_state_dict(state)
        self.iteration = int(require(state, "trainer.iteration").reshape(-1)[0])
        self.source_sampler.load_state(require(state, "sampler.source"))
        self.target_sampler.load_state(require(state, "sampler.target"))

    def save(self, path: Union[str, Path]) -> None:
        checkpoint_save(self.state_dict(), path, meta=self.config.model_dump(mode="json"))

    def resume(self, path: Union[str, Path]) -> None:
        records = checkpoint_load(path)
        saved = TrainConfig(**read_meta(records))
        if saved.profile != self.profile:
            raise UsageError(f"checkpoint {path} 的网络规模与当前配置不一致")
        self.load_state_dict(records)
        logger.info(f"从 {path} 恢复，iteration={self.iteration}")


def load_networks(path: Union[str, Path]) -> Tuple[Dict[str, NetworkInstance], TrainConfig]:
    """从 checkpoint 重建全部五个网络（评估 / 推理用）"""
    records = checkpoint_load(path)
    train_config = TrainConfig(**read_meta(records))
    nets = build_all(train_config.profile, train_config.seed)
    for tag in NETWORK_TAGS:
        nets[tag].load_state_dict(records)
    return nets, train_config


# ============================================================
# 训练入口
# ============================================================

def checkpoint_path(run_dir: Path, iteration: int) -> Path:
    return run_dir / config.CHECKPOINT_DIR / f"iter_{iteration:06d}.ckpt"


def run_training(
    train_config: TrainConfig,
    source: Dataset,
    target: Dataset,
    run_dir: Optional[Union[str, Path]] = None,
    on_eval: Optional[Callable[[int, Trainer], None]] = None,
    eval_interval: int = 0,
    resume: Optional[Union[str, Path]] = None,
) -> Trainer:
    """
    训练 N 个迭代

    Args:
        run_dir: 写审计日志与 checkpoint 的目录；None 时只在内存中训练
        on_eval: 每 eval_interval 个迭代调用一次
        resume: 从该 checkpoint 继续（审计日志续写）
    """
    trainer = Trainer(train_config, source, target)
    if resume is not None:
        trainer.resume(resume)

    audit_file = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        audit_file = open(run_dir / config.AUDIT_LOG_NAME, "a" if resume else "w", encoding="utf-8")

    logger.info(
        f"开始训练: mode={train_config.mode} N={train_config.iterations} K_C={train_config.k_c} "
        f"batch={train_config.batch_size} 起始 iteration={trainer.iteration}"
    )
    try:
        while trainer.iteration < train_config.iterations:
            audit = trainer.step()
            t = trainer.iteration
            if audit_file is not None:
                audit_file.write("\n".join(audit.to_lines()) + "\n")
                audit_file.flush()
            if run_dir is not None and train_config.checkpoint_interval and t % train_config.checkpoint_interval == 0:
                trainer.save(checkpoint_path(run_dir, t))
            if on_eval is not None and eval_interval and t % eval_interval == 0:
                on_eval(t, trainer)
    finally:
        if audit_file is not None:
            audit_file.close()

    if run_dir is not None:
        trainer.save(run_dir / config.CHECKPOINT_DIR / config.FINAL_CHECKPOINT_NAME)
    logger.info(f"训练结束: iteration={trainer.iteration}")
    return trainer


def run_experiment(
    experiment: ExperimentConfig,
    source: Dataset,
    target: Dataset,
    test: Optional[Dataset],
    resume: Optional[Union[str, Path]] = None,
) -> RunManifest:
    """
    一次完整运行：训练 + 周期评估 + 运行清单与指标 CSV

    运行清单在开始时写一次，每次评估后追加指标并原子重写。
    """
    from adaptparse.services.eval_service import evaluate_dataset

    run_dir = Path(experiment.paths.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run_dir / config.RUN_MANIFEST_NAME
    csv_path = run_dir / config.METRICS_CSV_NAME

    manifest = RunManifest(
        config=experiment.model_dump(mode="json"),
        seed=experiment.train.seed,
        version=__version__,
    )
    if resume is not None and manifest_path.exists():
        previous = RunManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
        manifest.metric_history = previous.metric_history
    csv_rows: List[List[str]] = [
        [str(h["iter"])] + report_to_csv_row(MetricReport(**h["report"]))[1:] for h in manifest.metric_history
    ]
    atomic_write_text(manifest_path, manifest.model_dump_json(indent=2) + "\n")

    eval_interval = experiment.run.eval_interval
    if test is not None and eval_interval:
        if not test.has_labels:
            raise UsageError(f"测试集 {test.root} 没有标签")
    else:
        eval_interval = 0

    def on_eval(t: int, trainer: Trainer) -> None:
        report = evaluate_dataset(trainer.nets["E"], trainer.nets["L"], test)
        manifest.metric_history.append({
            "iter": t,
            "metrics": report_to_document(report),
            "report": report.model_dump(mode="json"),
        })
        csv_rows.append(report_to_csv_row(report, t))
        atomic_write_text(csv_path, rows_to_csv(csv_rows))
        atomic_write_text(manifest_path, manifest.model_dump_json(indent=2) + "\n")
        logger.info(f"iteration {t}: avg_f1={report.avg_f1:.4f} pixel_acc={report.pixel_accuracy:.4f}")

    run_training(
        experiment.train, source, target,
        run_dir=run_dir, on_eval=on_eval, eval_interval=eval_interval, resume=resume,
    )
    if not csv_path.exists():
        atomic_write_text(csv_path, rows_to_csv(csv_rows))
    return manifest
