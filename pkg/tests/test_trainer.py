"""
训练流程测试：步骤顺序审计、参数隔离、可复现性、断点续训、等价性模式

使用 conftest 中的小数据集（6 / 6 / 4 个样本）与 batch 2 的桌面规模网络。
"""
import re
from contextlib import ExitStack

import numpy as np
import pytest

from adaptparse import config
from adaptparse.engine import functional as F
from adaptparse.engine.tensor import Tensor, no_grad
from adaptparse.errors import IsolationError, NumericalError, UsageError
from adaptparse.models.schemas import ExperimentConfig, PathsConfig, RunManifest, RunSettings
from adaptparse.services import loss_service as losses
from adaptparse.services.dataset_service import load_dataset
from adaptparse.services.network_service import forward_compensated, parser_probs
from adaptparse.services.train_service import (
    BatchSampler,
    Trainer,
    checkpoint_path,
    load_networks,
    run_experiment,
    run_training,
)

AUDIT_LINE = re.compile(r"^t=(\d+) step=(P1|EQ2|EQ1|EQ4|EQ3|P2) params=(E,L|C|A_f|A_l) loss=\S+$")


def expected_steps(n, k_c, mode):
    """按迭代内顺序展开的期望步骤序列"""
    feat = mode in ("adapt", "feat_adapt")
    label = mode in ("adapt", "label_adapt")
    steps = []
    for t in range(1, n + 1):
        steps.append((t, "P1"))
        if feat:
            steps += [(t, "EQ2"), (t, "EQ1")]
        if label and t % k_c == 0:
            steps += [(t, "EQ4"), (t, "EQ3")]
        if feat:
            steps.append((t, "P2"))
    return steps


def run_steps(trainer, n):
    audits = [trainer.step() for _ in range(n)]
    return [(a.t, r.step) for a in audits for r in a.records]


@pytest.fixture
def descent_config(train_config):
    """He 初始化、无动量无权重衰减的小学习率配置"""
    profile = train_config.profile.model_copy(update={"parser_init": "he"})
    return train_config.model_copy(update={
        "profile": profile, "sgd_momentum": 0.0, "sgd_weight_decay": 0.0,
        "lr_main": 1e-3, "lr_parser_adv": 1e-3, "lr_feature_adv": 1e-4, "lr_label_adv": 1e-4,
    })


# ============================================================
# 步骤审计
# ============================================================

class TestScheduleAudit:

    def test_full_schedule_with_isolation(self, train_config, tiny_data):
        """N=20、K_C=5：P1/EQ2/EQ1/P2 各 20 次，EQ4/EQ3 各 4 次，且每步只改动自己的网络"""
        cfg = train_config.model_copy(update={"check_isolation": True})
        trainer = Trainer(cfg, tiny_data["source"], tiny_data["target"])
        steps = run_steps(trainer, 20)
        assert steps == expected_steps(20, 5, "adapt")
        counts = {name: sum(1 for _, s in steps if s == name) for name in ("P1", "EQ2", "EQ1", "EQ4", "EQ3", "P2")}
        assert counts == {"P1": 20, "EQ2": 20, "EQ1": 20, "EQ4": 4, "EQ3": 4, "P2": 20}

    def test_single_iteration_skips_label_steps(self, train_config, tiny_data):
        cfg = train_config.model_copy(update={"iterations": 1})
        trainer = Trainer(cfg, tiny_data["source"], tiny_data["target"])
        assert [s for _, s in run_steps(trainer, 1)] == ["P1", "EQ2", "EQ1", "P2"]

    def test_k_c_one_runs_every_iteration(self, train_config, tiny_data):
        cfg = train_config.model_copy(update={"k_c": 1})
        trainer = Trainer(cfg, tiny_data["source"], tiny_data["target"])
        assert run_steps(trainer, 3) == expected_steps(3, 1, "adapt")

    @pytest.mark.parametrize("mode", ["source_only", "feat_adapt", "label_adapt"])
    def test_ablation_modes(self, train_config, tiny_data, mode):
        cfg = train_config.model_copy(update={"mode": mode, "check_isolation": True})
        trainer = Trainer(cfg, tiny_data["source"], tiny_data["target"])
        assert run_steps(trainer, 10) == expected_steps(10, 5, mode)

    def test_source_only_leaves_adversaries_untouched(self, train_config, tiny_data):
        cfg = train_config.model_copy(update={"mode": "source_only"})
        trainer = Trainer(cfg, tiny_data["source"], tiny_data["target"])
        before = {tag: net.param_digest() for tag, net in trainer.nets.items()}
        run_steps(trainer, 3)
        for tag in ("C", "A_f", "A_l"):
            assert trainer.nets[tag].param_digest() == before[tag]
        assert trainer.nets["E"].param_digest() != before["E"]

    def test_target_only_needs_heldout_labels(self, train_config, tiny_data, tiny_dirs):
        cfg = train_config.model_copy(update={"mode": "target_only"})
        with pytest.raises(UsageError):
            Trainer(cfg, tiny_data["source"], tiny_data["target"])
        target = load_dataset(tiny_dirs["target"], use_heldout=True)
        trainer = Trainer(cfg, tiny_data["source"], target)
        assert [s for _, s in run_steps(trainer, 2)] == ["P1", "P1"]

    def test_label_steps_gated_by_k_c(self, train_config, tiny_data):
        """t % K_C ≠ 0 时 A_l 的参数与 BN 统计都不变，t = K_C 时才更新"""
        trainer = Trainer(train_config, tiny_data["source"], tiny_data["target"])
        A_l = trainer.nets["A_l"]
        digest = A_l.param_digest()
        buffers = [b.copy() for b in A_l.buffers()]
        for t in range(1, 5):
            audit = trainer.step()
            assert audit.t == t
            assert not {r.step for r in audit.records} & {"EQ4", "EQ3"}
            assert A_l.param_digest() == digest
            assert all(np.array_equal(a, b) for a, b in zip(buffers, A_l.buffers()))
        audit = trainer.step()
        assert [r.step for r in audit.records] == ["P1", "EQ2", "EQ1", "EQ4", "EQ3", "P2"]
        assert A_l.param_digest() != digest

    def test_batch_of_one(self, train_config, tiny_data):
        """batch_size = 1：A_l 在 1×1 输出处没有 BN，六个步骤都能执行"""
        cfg = train_config.model_copy(update={"batch_size": 1, "k_c": 1, "check_isolation": True})
        trainer = Trainer(cfg, tiny_data["source"], tiny_data["target"])
        assert run_steps(trainer, 2) == expected_steps(2, 1, "adapt")

    def test_unlabeled_source_rejected(self, train_config, tiny_data):
        with pytest.raises(UsageError):
            Trainer(train_config, tiny_data["target"], tiny_data["target"])

    def test_isolation_violation_detected(self, train_config, tiny_data):
        """补偿网络的更新若改动了 E，立即失败"""
        cfg = train_config.model_copy(update={"check_isolation": True})
        trainer = Trainer(cfg, tiny_data["source"], tiny_data["target"])
        honest = trainer.comp_optim.step

        def leaky_step():
            honest()
            trainer.nets["E"].parameters()[0].data[...] += 1e-3

        trainer.comp_optim.step = leaky_step
        with pytest.raises(IsolationError, match="EQ2"):
            trainer.step()

    def test_non_finite_loss_aborts(self, train_config, tiny_data):
        trainer = Trainer(train_config, tiny_data["source"], tiny_data["target"])
        trainer.nets["L"].parameters()[0].data[...] = np.nan
        with pytest.raises(NumericalError, match="iteration 1"):
            trainer.step()

    def test_audit_log_format(self, train_config, tiny_data, tmp_path):
        cfg = train_config.model_copy(update={"iterations": 5})
        run_training(cfg, tiny_data["source"], tiny_data["target"], run_dir=tmp_path)
        lines = (tmp_path / config.AUDIT_LOG_NAME).read_text(encoding="utf-8").splitlines()
        assert len(lines) == len(expected_steps(5, 5, "adapt"))
        parsed = [AUDIT_LINE.match(line) for line in lines]
        assert all(parsed), lines
        assert [(int(m.group(1)), m.group(2)) for m in parsed] == expected_steps(5, 5, "adapt")


# ============================================================
# 可复现性
# ============================================================

class TestDeterminism:

    def test_two_runs_bitwise_identical(self, train_config, tiny_data, tmp_path):
        cfg = train_config.model_copy(update={"iterations": 10, "checkpoint_interval": 5})
        for name in ("a", "b"):
            run_training(cfg, tiny_data["source"], tiny_data["target"], run_dir=tmp_path / name)
        for t in (5, 10):
            assert checkpoint_path(tmp_path / "a", t).read_bytes() == checkpoint_path(tmp_path / "b", t).read_bytes()
        final = f"{config.CHECKPOINT_DIR}/{config.FINAL_CHECKPOINT_NAME}"
        assert (tmp_path / "a" / final).read_bytes() == (tmp_path / "b" / final).read_bytes()
        assert (tmp_path / "a" / config.AUDIT_LOG_NAME).read_text() == (tmp_path / "b" / config.AUDIT_LOG_NAME).read_text()

    def test_resume_equals_straight_run(self, train_config, tiny_data, tmp_path):
        """10 + 10 续训与一次训练 20 个迭代的 checkpoint 按位相同"""
        cfg = train_config.model_copy(update={"checkpoint_interval": 10})
        run_training(cfg, tiny_data["source"], tiny_data["target"], run_dir=tmp_path / "straight")
        run_training(
            cfg, tiny_data["source"], tiny_data["target"], run_dir=tmp_path / "resumed",
            resume=checkpoint_path(tmp_path / "straight", 10),
        )
        final = f"{config.CHECKPOINT_DIR}/{config.FINAL_CHECKPOINT_NAME}"
        assert (tmp_path / "straight" / final).read_bytes() == (tmp_path / "resumed" / final).read_bytes()

    def test_seed_changes_result(self, train_config, tiny_data):
        a = Trainer(train_config, tiny_data["source"], tiny_data["target"])
        b = Trainer(train_config.model_copy(update={"seed": 4}), tiny_data["source"], tiny_data["target"])
        assert a.nets["E"].param_digest() != b.nets["E"].param_digest()

    def test_load_networks(self, train_config, tiny_data, tmp_path):
        cfg = train_config.model_copy(update={"iterations": 2})
        trainer = run_training(cfg, tiny_data["source"], tiny_data["target"], run_dir=tmp_path)
        nets, saved = load_networks(tmp_path / config.CHECKPOINT_DIR / config.FINAL_CHECKPOINT_NAME)
        assert saved == cfg
        for tag, net in nets.items():
            assert net.param_digest() == trainer.nets[tag].param_digest()


# ============================================================
# 等价性与下降
# ============================================================

class TestEquivalence:

    def test_zero_adversarial_rates(self, train_config, tiny_data):
        """对抗学习率为 0 且不更新 BN 统计时，E、L 与跳过 EQ4 / EQ3 的运行相同"""
        zero = {
            "lr_feature_adv": 0.0, "lr_label_adv": 0.0, "lr_parser_adv": 0.0,
            "adversarial_bn_updates": False, "iterations": 10,
        }
        full = Trainer(train_config.model_copy(update=zero), tiny_data["source"], tiny_data["target"])
        skipped = Trainer(
            train_config.model_copy(update={**zero, "mode": "feat_adapt"}), tiny_data["source"], tiny_data["target"],
        )
        a_l_before = [b.copy() for b in full.nets["A_l"].buffers()]
        run_steps(full, 10)
        run_steps(skipped, 10)
        for tag in ("E", "L", "C", "A_f", "A_l"):
            assert full.nets[tag].param_digest() == skipped.nets[tag].param_digest(), tag
        assert all(np.array_equal(a, b) for a, b in zip(a_l_before, full.nets["A_l"].buffers()))

    def test_parser_step_decreases_loss(self, descent_config, tiny_data):
        """小学习率下一次 P1 更新使同一批次上的交叉熵下降"""
        cfg = descent_config.model_copy(update={"mode": "source_only", "iterations": 20})
        trainer = Trainer(cfg, tiny_data["source"], tiny_data["target"])
        E, L = trainer.nets["E"], trainer.nets["L"]
        data = tiny_data["source"]
        for _ in range(20):
            state = trainer.source_sampler.state()
            idx = trainer.source_sampler.next_batch()
            trainer.source_sampler.load_state(state)
            x = Tensor(data.images[idx])
            y = losses.downsample_labels(data.labels[idx])
            with no_grad():
                before = losses.pixelwise_cross_entropy(L(E(x)), y).item()
            trainer.step()
            with no_grad():
                after = losses.pixelwise_cross_entropy(L(E(x)), y).item()
            assert after < before


def objective(trainer, tiny_data, step):
    """
    固定批次上某一步的目标函数与对应的更新

    Returns:
        (loss_fn, update, 该步允许改动的网络)
    """
    E, C, L, A_f, A_l = (trainer.nets[k] for k in ("E", "C", "L", "A_f", "A_l"))
    source, target = tiny_data["source"], tiny_data["target"]
    s_x = Tensor(source.images[:2])
    s_y = losses.downsample_labels(source.labels[:2])
    t_x = Tensor(target.images[2:4])

    if step == "P1":
        return (lambda: losses.pixelwise_cross_entropy(L(E(s_x)), s_y)), trainer.parser_optim.step, {"E", "L"}
    if step == "EQ2":
        def loss_fn():
            with E.frozen():
                return losses.loss_compensator(A_f, forward_compensated(E, C, s_x))
        return loss_fn, trainer.comp_optim.step, {"C"}
    if step == "EQ1":
        with no_grad():
            target_feat = E(t_x)
            comp = forward_compensated(E, C, s_x)
        return (lambda: losses.loss_feature_adversary(A_f, target_feat, comp)), trainer.feat_adv_optim.step, {"A_f"}
    if step == "EQ4":
        return (
            lambda: losses.loss_parser_adversarial(A_l, parser_probs(E, L, t_x)),
            trainer._parser_adversarial_update,
            {"E", "L"},
        )
    if step == "EQ3":
        with no_grad():
            pred = parser_probs(E, L, t_x)
        gt = Tensor(F.one_hot(s_y, trainer.profile.num_classes, dtype=pred.dtype))
        return (lambda: losses.loss_label_adversary(A_l, gt, pred)), trainer.label_adv_optim.step, {"A_l"}

    def loss_fn():
        with C.frozen():
            comp = forward_compensated(E, C, s_x)
        return losses.pixelwise_cross_entropy(L(comp), s_y)
    return loss_fn, trainer.parser_optim.step, {"E", "L"}


class TestObjectiveDescent:
    """每个目标函数：小学习率下一次更新使同一批次上的损失下降，其余网络不变"""

    @pytest.mark.parametrize("step", ["P1", "EQ2", "EQ1", "EQ4", "EQ3", "P2"])
    def test_single_update_descends(self, descent_config, tiny_data, step):
        trainer = Trainer(descent_config, tiny_data["source"], tiny_data["target"])
        loss_fn, update, owners = objective(trainer, tiny_data, step)
        with ExitStack() as stack:
            for net in trainer.nets.values():
                stack.enter_context(net.stats_frozen())
            with no_grad():
                before = loss_fn().item()
            digests = trainer._digests()
            for net in trainer.nets.values():
                net.zero_grad()
            loss_fn().backward()
            update()
            with no_grad():
                after = loss_fn().item()
        assert after < before, (step, before, after)
        changed = {tag for tag, d in trainer._digests().items() if d != digests[tag]}
        assert changed == owners


# ============================================================
# 批采样
# ============================================================

class TestBatchSampler:

    def test_epoch_covers_every_sample(self):
        sampler = BatchSampler(6, 2, seed=0, domain_id=0)
        first_epoch = np.concatenate([sampler.next_batch() for _ in range(3)])
        assert sorted(first_epoch.tolist()) == list(range(6))

    def test_batch_spans_epoch_boundary(self):
        sampler = BatchSampler(5, 3, seed=0, domain_id=0)
        sampler.next_batch()
        batch = sampler.next_batch()
        assert len(batch) == 3 and sampler.epoch == 1

    def test_deterministic_and_domain_specific(self):
        a = BatchSampler(10, 4, seed=1, domain_id=0)
        b = BatchSampler(10, 4, seed=1, domain_id=0)
        c = BatchSampler(10, 4, seed=1, domain_id=1)
        assert np.array_equal(a.next_batch(), b.next_batch())
        assert not np.array_equal(a._permutation(0), c._permutation(0))

    def test_state_round_trip(self):
        a = BatchSampler(7, 3, seed=2, domain_id=0)
        for _ in range(4):
            a.next_batch()
        b = BatchSampler(7, 3, seed=2, domain_id=0)
        b.load_state(a.state())
        for _ in range(5):
            assert np.array_equal(a.next_batch(), b.next_batch())

    def test_empty_rejected(self):
        with pytest.raises(UsageError):
            BatchSampler(0, 2, seed=0, domain_id=0)


# ============================================================
# 完整运行
# ============================================================

class TestRunExperiment:

    def test_metric_history_and_csv(self, train_config, tiny_data, tiny_dirs, tmp_path):
        experiment = ExperimentConfig(
            train=train_config.model_copy(update={"iterations": 7}),
            paths=PathsConfig(
                source_dir=str(tiny_dirs["source"]), target_dir=str(tiny_dirs["target"]),
                test_dir=str(tiny_dirs["test"]), run_dir=str(tmp_path / "run"),
            ),
            run=RunSettings(eval_interval=3),
        )
        manifest = run_experiment(experiment, tiny_data["source"], tiny_data["target"], tiny_data["test"])
        assert [h["iter"] for h in manifest.metric_history] == [3, 6]

        saved = RunManifest.model_validate_json((tmp_path / "run" / config.RUN_MANIFEST_NAME).read_text())
        assert saved.metric_history == manifest.metric_history
        assert saved.seed == 3

        lines = (tmp_path / "run" / config.METRICS_CSV_NAME).read_text().splitlines()
        assert lines[0] == ",".join(config.METRIC_CSV_HEADER)
        assert [line.split(",")[0] for line in lines[1:]] == ["3", "6"]

    def test_unlabeled_test_set_rejected(self, train_config, tiny_data, tmp_path):
        experiment = ExperimentConfig(
            train=train_config.model_copy(update={"iterations": 2}),
            paths=PathsConfig(run_dir=str(tmp_path / "run")),
            run=RunSettings(eval_interval=1),
        )
        with pytest.raises(UsageError):
            run_experiment(experiment, tiny_data["source"], tiny_data["target"], tiny_data["target"])
