"""
训练目标测试：交叉熵 P1/P2 与四个最小二乘对抗损失

对抗网络用单个 1×1 卷积的 NetworkInstance 代替，输出为输入第 0 通道（或常数），
这样每个损失值都能在 64 位下精确复现。
"""
import numpy as np
import pytest

from adaptparse.engine.gradcheck import grad_check
from adaptparse.engine.layers import Conv
from adaptparse.engine.tensor import Tensor, parameter
from adaptparse.errors import ShapeError, UsageError
from adaptparse.services.loss_service import (
    downsample_labels,
    least_squares,
    loss_compensator,
    loss_feature_adversary,
    loss_label_adversary,
    loss_parser_adversarial,
    pixelwise_cross_entropy,
)
from adaptparse.services.network_service import NetworkInstance, build_feature_adversary

EXACT = 1e-12


def fixed_adversary(tag, channels, profile, constant=None):
    """
    1×1 卷积的对抗网络（64 位）

    constant 为 None 时输出输入的第 0 通道，否则处处输出 constant
    """
    conv = Conv("fixed", channels, 1, 1, np.random.default_rng(0))
    weight = np.zeros((1, channels, 1, 1))
    if constant is None:
        weight[0, 0] = 1.0
    conv.weight.data = weight
    conv.bias.data = np.array([0.0 if constant is None else constant])
    return NetworkInstance(tag, [conv], profile, in_channels=channels)


def features(value, dims=(2, 32, 7, 4)):
    return Tensor(np.full(dims, value, dtype=np.float64))


def one_hot_map(cls, k=4, dims=(2, 7, 4)):
    out = np.zeros((dims[0], k) + dims[1:])
    out[:, cls] = 1.0
    return Tensor(out)


# ============================================================
# 交叉熵
# ============================================================

class TestCrossEntropy:

    def test_uniform_scores(self, rng):
        """均匀得分、K=4 → ln 4"""
        labels = rng.integers(0, 4, size=(2, 7, 4)).astype(np.uint8)
        loss = pixelwise_cross_entropy(Tensor(np.zeros((2, 4, 7, 4))), labels)
        assert loss.item() == pytest.approx(np.log(4.0), abs=EXACT)
        assert loss.item() == pytest.approx(1.386294, abs=1e-6)

    def test_confident_correct_logits(self, rng):
        labels = rng.integers(0, 4, size=(1, 3, 3)).astype(np.uint8)
        scores = np.zeros((1, 4, 3, 3))
        np.put_along_axis(scores, labels.astype(np.int64)[:, None], 100.0, axis=1)
        assert pixelwise_cross_entropy(Tensor(scores), labels).item() < 1e-6

    def test_single_pixel(self):
        """概率 [0.7, 0.1, 0.1, 0.1]、标签 0 → −ln 0.7"""
        scores = np.log(np.array([0.7, 0.1, 0.1, 0.1])).reshape(1, 4, 1, 1)
        loss = pixelwise_cross_entropy(Tensor(scores), np.zeros((1, 1, 1), dtype=np.uint8))
        assert loss.item() == pytest.approx(-np.log(0.7), abs=EXACT)
        assert loss.item() == pytest.approx(0.356675, abs=1e-6)

    def test_ignore_id(self):
        """忽略像素不参与均值"""
        scores = np.zeros((1, 4, 1, 2))
        scores[0, 0, 0, 1] = 50.0
        labels = np.array([[[255, 0]]], dtype=np.uint8)
        loss = pixelwise_cross_entropy(Tensor(scores), labels, ignore_id=255)
        assert loss.item() < 1e-6

    def test_all_ignored_rejected(self):
        labels = np.full((1, 2, 2), 255, dtype=np.uint8)
        with pytest.raises(UsageError, match="all pixels ignored"):
            pixelwise_cross_entropy(Tensor(np.zeros((1, 4, 2, 2))), labels, ignore_id=255)

    def test_class_id_out_of_range(self):
        with pytest.raises(UsageError):
            pixelwise_cross_entropy(Tensor(np.zeros((1, 4, 1, 1))), np.full((1, 1, 1), 4, dtype=np.uint8))

    def test_gradient(self, rng):
        scores = parameter(rng.standard_normal((2, 4, 3, 3)), name="scores")
        labels = rng.integers(0, 4, size=(2, 3, 3)).astype(np.uint8)
        report = grad_check(lambda: pixelwise_cross_entropy(scores, labels), [scores])
        assert report.passed, report.failures

    def test_downsample_labels(self, rng):
        """49×25 标签按 stride 8 取样到 7×4"""
        labels = rng.integers(0, 4, size=(2, 49, 25)).astype(np.uint8)
        small = downsample_labels(labels)
        assert small.shape == (2, 7, 4)
        assert small[1, 6, 3] == labels[1, 48, 24]


# ============================================================
# 对抗损失
# ============================================================

class TestFeatureAdversaryLoss:

    def test_perfect_discriminator(self, desk_profile):
        """目标域输出 1、补偿特征输出 0 → 0"""
        A_f = fixed_adversary("A_f", 32, desk_profile)
        assert loss_feature_adversary(A_f, features(1.0), features(0.0)).item() == pytest.approx(0.0, abs=EXACT)

    def test_constant_zero(self, desk_profile):
        A_f = fixed_adversary("A_f", 32, desk_profile, constant=0.0)
        assert loss_feature_adversary(A_f, features(0.3), features(0.7)).item() == pytest.approx(0.5, abs=EXACT)

    def test_constant_half(self, desk_profile):
        A_f = fixed_adversary("A_f", 32, desk_profile, constant=0.5)
        assert loss_feature_adversary(A_f, features(0.3), features(0.7)).item() == pytest.approx(0.25, abs=EXACT)

    def test_built_network_constant_output(self, desk_profile, rng):
        """真实 A_f：参数清零、输出 bias 0.5 → 0.25"""
        A_f = build_feature_adversary(desk_profile).to_dtype(np.float64)
        for p in A_f.parameters():
            p.data[...] = 0
        A_f.layers[-1].bias.data[...] = 0.5
        target = Tensor(rng.standard_normal((2, 32, 7, 4)))
        comp = Tensor(rng.standard_normal((2, 32, 7, 4)))
        assert loss_feature_adversary(A_f, target, comp).item() == pytest.approx(0.25, abs=EXACT)

    def test_only_adversary_receives_gradient(self, desk_profile, rng):
        A_f = fixed_adversary("A_f", 32, desk_profile)
        target = parameter(rng.standard_normal((2, 32, 7, 4)))
        comp = parameter(rng.standard_normal((2, 32, 7, 4)))
        loss_feature_adversary(A_f, target, comp).backward()
        assert target.grad is None and comp.grad is None
        assert all(p.grad is not None for p in A_f.parameters())

    def test_dims_mismatch(self, desk_profile):
        A_f = fixed_adversary("A_f", 32, desk_profile)
        with pytest.raises(ShapeError):
            loss_feature_adversary(A_f, features(1.0), features(0.0, dims=(1, 32, 7, 4)))


class TestCompensatorLoss:

    @pytest.mark.parametrize("constant, expected", [(1.0, 0.0), (0.0, 0.5), (0.25, 0.28125)])
    def test_values(self, desk_profile, constant, expected):
        A_f = fixed_adversary("A_f", 32, desk_profile, constant=constant)
        assert loss_compensator(A_f, features(0.1)).item() == pytest.approx(expected, abs=EXACT)

    def test_adversary_frozen(self, desk_profile, rng):
        """梯度只流向补偿特征，A_f 不接收梯度"""
        A_f = fixed_adversary("A_f", 32, desk_profile)
        comp = parameter(rng.standard_normal((2, 32, 7, 4)))
        loss_compensator(A_f, comp).backward()
        assert comp.grad is not None
        assert all(p.grad is None for p in A_f.parameters())
        assert all(p.requires_grad for p in A_f.parameters())


class TestLabelAdversaryLoss:

    def test_perfect_discriminator(self, desk_profile):
        """真值输出 1、预测输出 0 → 0"""
        A_l = fixed_adversary("A_l", 4, desk_profile)
        loss = loss_label_adversary(A_l, one_hot_map(0), one_hot_map(2))
        assert loss.item() == pytest.approx(0.0, abs=EXACT)

    def test_constant_half(self, desk_profile):
        A_l = fixed_adversary("A_l", 4, desk_profile, constant=0.5)
        loss = loss_label_adversary(A_l, one_hot_map(0), one_hot_map(2))
        assert loss.item() == pytest.approx(0.25, abs=EXACT)

    def test_swapped_inputs(self, desk_profile):
        """真值被打 0、预测被打 1 → ½·1 + ½·1 = 1"""
        A_l = fixed_adversary("A_l", 4, desk_profile)
        loss = loss_label_adversary(A_l, one_hot_map(1), one_hot_map(0))
        assert loss.item() == pytest.approx(1.0, abs=EXACT)

    def test_channel_count_checked(self, desk_profile):
        A_l = fixed_adversary("A_l", 4, desk_profile)
        with pytest.raises(ShapeError):
            loss_label_adversary(A_l, one_hot_map(0, k=3), one_hot_map(0))

    def test_predictions_detached(self, desk_profile, rng):
        A_l = fixed_adversary("A_l", 4, desk_profile)
        pred = parameter(np.full((2, 4, 7, 4), 0.25))
        loss_label_adversary(A_l, one_hot_map(0), pred).backward()
        assert pred.grad is None


class TestParserAdversarialLoss:

    @pytest.mark.parametrize("constant, expected", [(1.0, 0.0), (0.0, 0.5), (0.8, 0.02)])
    def test_values(self, desk_profile, constant, expected):
        A_l = fixed_adversary("A_l", 4, desk_profile, constant=constant)
        loss = loss_parser_adversarial(A_l, Tensor(np.full((2, 4, 7, 4), 0.25)))
        assert loss.item() == pytest.approx(expected, abs=EXACT)

    def test_gradient_flows_to_predictions_only(self, desk_profile):
        A_l = fixed_adversary("A_l", 4, desk_profile)
        pred = parameter(np.full((2, 4, 7, 4), 0.25))
        loss_parser_adversarial(A_l, pred).backward()
        assert pred.grad is not None and np.any(pred.grad != 0)
        assert all(p.grad is None for p in A_l.parameters())


class TestLeastSquares:

    def test_nonnegative_and_zero_at_target(self, rng):
        out = Tensor(rng.standard_normal((2, 1, 3, 3)))
        for target in (0.0, 1.0):
            assert least_squares(out, target).item() >= 0
        assert least_squares(Tensor(np.ones((2, 1, 3, 3))), 1.0).item() == 0.0
