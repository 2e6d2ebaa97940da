import math

import numpy as np
import pytest

from talkit import tensor as tc
from talkit.errors import ConfigError, DegenerateInputError, DimensionError
from talkit.experiments import run_coverage_experiment
from talkit.mgfn import (DEFAULT_RATES, MdcmBlock, MdcmConfig, cascade_forward, classification_loss,
                         erase_mask, fuse_branches, mdcm_forward, mdcm_loss, oae_erase, predicted_labels)
from talkit.params import ParamStore
from talkit.tensor import Tensor


def block(C=4, K=3, width=6, rates=(1, 2, 3), seed=0, prefix="mdcm"):
    return MdcmBlock(MdcmConfig(C, K, width, rates=rates), ParamStore(), prefix, np.random.default_rng(seed))


def conv_same(x, w, b, d):
    """Zero-padded 'same' dilated conv with kernel 3, then bias."""
    T = len(x)
    xp = np.vstack([np.zeros((d, x.shape[1])), x, np.zeros((d, x.shape[1]))])
    return np.array([sum(xp[t + j * d] @ w[j] for j in range(3)) + b for t in range(T)])


def reference_mdcm(F, blk):
    relu = lambda x: np.maximum(x, 0.0)
    h = F
    for w, b in blk.base:
        h = relu(conv_same(h, w.data, b.data, 1))
    logits = []
    for rate, (w, b, hw, hb) in zip(blk.cfg.rates, blk.branches):
        feat = relu(conv_same(h, w.data, b.data, rate))
        logits.append(feat @ hw.data + hb.data)
    fused = logits[0] + (sum(logits[1:]) / (len(logits) - 1) if len(logits) > 1 else 0.0)
    return fused, 1.0 / (1.0 + np.exp(-fused.mean(axis=0)))


class TestConfig:
    def test_default_dilation_rates(self):
        assert DEFAULT_RATES[1:] == (2, 3, 5)

    def test_rates_validated(self):
        with pytest.raises(ConfigError):
            MdcmConfig(4, 2, rates=(2, 3))
        with pytest.raises(ConfigError):
            MdcmConfig(4, 2, rates=(1, 0))

    def test_too_short(self):
        with pytest.raises(DegenerateInputError):
            mdcm_forward(np.ones((8, 4)), block(rates=(1, 5)))


class TestForward:
    def test_matches_reference(self):
        blk = block(seed=1)
        F = np.random.default_rng(2).normal(size=(14, 4))
        out = mdcm_forward(F, blk)
        cas, scores = reference_mdcm(F, blk)
        np.testing.assert_allclose(out.cas.data, cas, atol=1e-12)
        np.testing.assert_allclose(out.scores.data, scores, atol=1e-12)

    def test_single_branch(self):
        blk = block(rates=(1,), seed=3)
        out = mdcm_forward(np.random.default_rng(4).normal(size=(9, 4)), blk)
        np.testing.assert_array_equal(out.cas.data, out.branches[0].data)

    def test_scores_in_open_interval(self):
        out = mdcm_forward(np.random.default_rng(5).normal(size=(3, 12, 4)), block(seed=5))
        assert out.scores.shape == (3, 3)
        assert np.all((out.scores.data > 0) & (out.scores.data < 1))

    def test_encoded_features(self):
        out = mdcm_forward(np.ones((10, 4)), block(width=6, rates=(1, 2)))
        assert out.encoded.shape == (10, 12)


class TestFuse:
    def test_all_equal(self):
        H = np.random.default_rng(6).normal(size=(7, 3))
        np.testing.assert_allclose(fuse_branches(H, H, H, H).data, 2 * H, atol=1e-15)

    def test_zero_dilated(self):
        H = np.random.default_rng(7).normal(size=(7, 3))
        np.testing.assert_array_equal(fuse_branches(H, np.zeros_like(H)).data, H)

    def test_against_summation(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            n = int(rng.integers(1, 5))
            H = rng.normal(size=(n + 1, 5, 2))
            ref = H[0] + sum(H[1:]) / n
            np.testing.assert_allclose(fuse_branches(*H).data, ref, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            fuse_branches(np.zeros((3, 2)), np.zeros((3, 3)))


class TestClassificationLoss:
    def test_exact_labels(self):
        y = np.array([1.0, 0.0, 1.0])
        assert classification_loss(y, y).item() < 1e-11

    def test_half(self):
        assert classification_loss(np.full(4, 0.5), [1, 0, 0, 1]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_gradient(self):
        rng = np.random.default_rng(9)
        p = rng.uniform(0.1, 0.9, size=5)
        y = np.array([1, 0, 1, 1, 0], dtype=float)
        x = Tensor(p, requires_grad=True)
        tc.backward(classification_loss(x, y))
        eps = 1e-4
        for i in range(5):
            up, down = p.copy(), p.copy()
            up[i] += eps
            down[i] -= eps
            num = (classification_loss(up, y).item() - classification_loss(down, y).item()) / (2 * eps)
            assert x.grad[i] == pytest.approx(num, rel=1e-3)

    def test_auxiliary_terms(self):
        out = mdcm_forward(np.random.default_rng(10).normal(size=(12, 4)), block(seed=10))
        y = np.array([0.0, 1.0, 0.0])
        expected = classification_loss(out.scores, y).item() + np.mean(
            [classification_loss(s, y).item() for s in out.branch_scores])
        assert mdcm_loss(out, y).item() == pytest.approx(expected, abs=1e-14)


class TestErase:
    def test_uniform_cas_erases_everything(self):
        F = np.random.default_rng(11).normal(size=(6, 3))
        out = oae_erase(F, np.full((6, 2), 0.4), [1, 0], theta=1.0)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_single_peak(self):
        H = np.zeros((8, 1))
        H[:, 0] = [0.1, 0.2, 0.5, 1.0, 0.6, 0.49, 0.0, 0.3]
        F = np.ones((8, 2))
        out = oae_erase(F, H, [1], theta=0.5)
        erased = np.all(out.data == 0, axis=1)
        np.testing.assert_array_equal(erased, H[:, 0] >= 0.5)
        np.testing.assert_array_equal(out.data[~erased], 1.0)

    def test_no_label_keeps_features(self):
        F = np.random.default_rng(12).normal(size=(5, 3))
        out = oae_erase(F, np.random.default_rng(13).uniform(size=(5, 2)), [0, 0])
        np.testing.assert_array_equal(out.data, F)

    def test_threshold_range(self):
        with pytest.raises(ConfigError):
            erase_mask(np.ones((3, 1)), [1], theta=0.0)

    def test_gradient_only_through_kept(self):
        F = Tensor(np.ones((4, 2)), requires_grad=True)
        H = np.array([[0.1], [1.0], [0.2], [0.9]])
        tc.backward(tc.tsum(oae_erase(F, H, [1])))
        np.testing.assert_array_equal(F.grad[:, 0], [1, 0, 1, 0])


class TestCascade:
    def test_identical_stages(self):
        F = np.random.default_rng(14).normal(size=(12, 4))
        s1 = block(seed=15)
        out = cascade_forward(F, s1, s1, [1, 0, 0])
        # stage two sees erased features, so only compare the max property
        assert np.all(out.cas.data >= out.first.cas.data)
        assert np.all(out.cas.data >= out.second.cas.data)

    def test_max_identity(self):
        H = np.random.default_rng(16).normal(size=(6, 2))
        np.testing.assert_array_equal(tc.maximum(H, H).data, H)

    def test_disjoint_peaks(self):
        H1 = np.zeros((10, 1))
        H2 = np.zeros((10, 1))
        H1[2] = 3.0
        H2[7] = 2.0
        fused = tc.maximum(H1, H2).data[:, 0]
        assert fused[2] == 3.0 and fused[7] == 2.0

    def test_erased_positions_are_zero(self):
        F = np.random.default_rng(17).normal(size=(12, 4))
        out = cascade_forward(F, block(seed=18), block(seed=19), [0, 1, 0])
        np.testing.assert_array_equal(out.erased.data[out.mask], 0.0)
        np.testing.assert_array_equal(out.erased.data[~out.mask], F[~out.mask])


class TestPredictedLabels:
    def test_threshold_and_top(self):
        np.testing.assert_array_equal(predicted_labels([0.2, 0.3, 0.1]), [0, 1, 0])
        np.testing.assert_array_equal(predicted_labels([0.7, 0.3, 0.6]), [1, 0, 1])


class TestCoverage:
    def test_cascade_recovers_second_segment(self):
        r = run_coverage_experiment(0)
        assert len(r.cascade_recall) >= 20
        assert r.mean_stage1 < 1.0
        assert r.mean_cascade > r.mean_stage1
