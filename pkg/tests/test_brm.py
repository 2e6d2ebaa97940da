import math

import numpy as np
import pytest

from talkit import tensor as tc
from talkit.brm import (Anchor, BrmConfig, BrmModel, brm_batch_loss, brm_forward_and_loss,
                        decode_anchor, decode_predictions, fit_anchor_oic, generate_anchors, inflate,
                        oic_loss,
                        overlap_weights)
from talkit.errors import ConfigError, DegenerateInputError
from talkit.params import ParamStore


def oic_reference(cas, s, e, S, E):
    """Fractional-overlap means computed snippet by snippet."""
    def overlap(a, b, t):
        return max(0.0, min(b, t + 1) - max(a, t))

    inner = [overlap(s, e, t) for t in range(len(cas))]
    outer = [overlap(S, E, t) - overlap(s, e, t) for t in range(len(cas))]
    mean = lambda w: sum(wi * c for wi, c in zip(w, cas)) / sum(w) if sum(w) > 0 else 0.0
    return mean(outer) - mean(inner)


def model(C=3, seed=0, random_head=False, **kw):
    store = ParamStore()
    m = BrmModel(BrmConfig(C, width=6, **kw), store, np.random.default_rng(seed))
    if random_head:
        rng = np.random.default_rng(seed + 100)
        for name in ("brm.pred.w", "brm.pred.b"):
            store[name].data[...] = rng.uniform(-0.3, 0.3, size=store[name].shape)
    return m, store


class TestAnchors:
    def test_enumeration(self):
        assert generate_anchors(2, [4]) == [Anchor(0.5, 4.0), Anchor(1.5, 4.0)]

    def test_count(self):
        assert len(generate_anchors(7, [2, 4, 8])) == 21

    def test_empty_scales(self):
        with pytest.raises(ConfigError):
            generate_anchors(3, [])
        with pytest.raises(ConfigError):
            BrmConfig(4, scales=())


class TestBoxArithmetic:
    def test_identity_offsets(self):
        assert decode_anchor(Anchor(10, 4), 0.0, 0.0) == (8.0, 12.0)

    def test_worked_example(self):
        s, e = decode_anchor(Anchor(10, 4), 0.5, math.log(2))
        assert abs(s - 8) <= 1e-12 and abs(e - 16) <= 1e-12

    def test_width_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = Anchor(rng.uniform(0, 50), rng.uniform(1, 20))
            p_x, p_w = rng.normal(size=2)
            s, e = decode_anchor(a, p_x, p_w)
            assert e - s == pytest.approx(a.t_w * math.exp(p_w), rel=1e-12)

    def test_inflate(self):
        assert inflate(8, 16, 0.0) == (8, 16)
        S, E = inflate(8, 16, 0.25)
        assert abs(S - 6) <= 1e-12 and abs(E - 18) <= 1e-12

    def test_inflate_contains(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            s = rng.uniform(-5, 5)
            e = s + rng.uniform(0.1, 10)
            S, E = inflate(s, e, rng.uniform(0.01, 1))
            assert S < s and E > e

    def test_inflate_clamps(self):
        S, E, clamped = inflate(1, 9, 0.25, length=10)
        assert (S, E, clamped) == (0.0, 10.0, (True, True))

    def test_inflate_errors(self):
        with pytest.raises(ConfigError):
            inflate(1, 2, -0.1)
        with pytest.raises(DegenerateInputError):
            inflate(3, 3, 0.25)


class TestOic:
    def test_constant(self):
        assert oic_loss(np.full(20, 0.7), (5, 10), (3.75, 11.25)).item() == pytest.approx(0.0, abs=1e-15)

    def test_boxcar(self):
        cas = np.zeros(20)
        cas[6:12] = 1.0
        assert oic_loss(cas, (6, 12), inflate(6, 12, 0.25)).item() == -1.0

    def test_inverse_boxcar(self):
        cas = np.ones(20)
        cas[6:12] = 0.0
        assert oic_loss(cas, (6, 12), inflate(6, 12, 0.25)).item() == 1.0

    def test_matches_reference(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            cas = rng.uniform(size=30)
            s = rng.uniform(2, 20)
            e = s + rng.uniform(0.3, 8)
            S, E = inflate(s, e, rng.uniform(0, 0.5))
            assert oic_loss(cas, (s, e), (S, E)).item() == pytest.approx(oic_reference(cas, s, e, S, E),
                                                                         abs=1e-12)

    def test_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            cas = rng.uniform(size=25)
            s = rng.uniform(0, 15)
            e = s + rng.uniform(0.5, 9)
            value = oic_loss(cas, (s, e), inflate(s, e, 0.25, 25)[:2]).item()
            assert -1.0 <= value <= 1.0

    def test_translation_equivariance(self):
        rng = np.random.default_rng(5)
        cas = rng.uniform(size=40)
        s, e = 12.3, 19.8
        S, E = inflate(s, e, 0.25)
        base = oic_loss(cas, (s, e), (S, E)).item()
        for shift in (-5, 3, 9):
            moved = np.roll(cas, shift)
            value = oic_loss(moved, (s + shift, e + shift), (S + shift, E + shift)).item()
            assert value == pytest.approx(base, abs=1e-12)

    def test_full_outer_mode(self):
        cas = np.zeros(20)
        cas[6:12] = 1.0
        # inflated interval [4.5, 13.5] holds 6 ones over 9 snippets
        assert oic_loss(cas, (6, 12), inflate(6, 12, 0.25), "full").item() == pytest.approx(6 / 9 - 1)

    def test_overlap_weights(self):
        np.testing.assert_allclose(overlap_weights(1.5, 3.25, 5).data, [0, 0.5, 1, 0.25, 0])

    def test_batched(self):
        cas = np.random.default_rng(6).uniform(size=16)
        s = np.array([2.0, 5.5])
        e = np.array([6.0, 9.0])
        batched = oic_loss(cas, (s, e), (s - 1, e + 1)).data
        for i in range(2):
            assert batched[i] == oic_loss(cas, (s[i], e[i]), (s[i] - 1, e[i] + 1)).item()


def boxcar(T, a, b):
    cas = np.zeros(T)
    cas[a:b] = 1.0
    return cas


def brute_force_minimizer(cas, gamma=0.25, step=0.5):
    """Exhaustive search over boundaries on a ``step`` grid."""
    grid = np.arange(0.0, len(cas) + step / 2, step)
    best = (np.inf, None)
    for s in grid:
        for e in grid[grid > s]:
            value = oic_reference(cas, s, e, s - gamma * (e - s), e + gamma * (e - s))
            if value < best[0] - 1e-12:
                best = (value, (s, e))
    return best


class TestOicMinimizer:
    def test_brute_force_recovers_boxcar(self):
        rng = np.random.default_rng(12)
        for _ in range(3):
            T = 32
            L = int(rng.integers(5, 10))
            a = int(rng.integers(4, T - L - 4))
            value, (s, e) = brute_force_minimizer(boxcar(T, a, a + L))
            assert value == -1.0 and (s, e) == (a, a + L)

    def test_descent_from_perturbed_anchor(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            T = 64
            L = int(rng.integers(8, 20))
            a = int(rng.integers(L // 2 + 2, T - L - L // 2 - 2))
            dx, dw = rng.uniform(-0.25, 0.25, size=2)
            anchor = Anchor(a + L / 2 + dx * L, L * (1 + dw))
            s, e, _ = fit_anchor_oic(boxcar(T, a, a + L), anchor, iterations=499)
            assert abs(s - a) <= 1.0 and abs(e - a - L) <= 1.0

    def test_descent_lowers_loss(self):
        cas = boxcar(40, 12, 24)
        anchor = Anchor(20.0, 9.0)
        start = oic_loss(cas, decode_anchor(anchor, 0, 0), inflate(*decode_anchor(anchor, 0, 0), 0.25)).item()
        assert fit_anchor_oic(cas, anchor, iterations=200)[2] < start


class TestModel:
    def test_zero_head_gives_identity_anchors(self):
        m, _ = model(scales=(2.0, 4.0))
        F = np.random.default_rng(7).normal(size=(10, 3))
        p_x, p_w = m(F)
        np.testing.assert_array_equal(p_x.data, 0.0)
        dec = decode_predictions(p_x, p_w, m.cfg, 10)
        t = np.arange(10)[:, None] + 0.5
        w = np.array([2.0, 4.0])
        np.testing.assert_array_equal(dec.s.data, np.clip(t - w / 2, 0, 10))
        np.testing.assert_array_equal(dec.e.data, np.clip(t + w / 2, 0, 10))

    def test_keep_rule(self):
        m, _ = model(scales=(1.0, 4.0))
        dec = decode_predictions(*m(np.zeros((8, 3))), m.cfg, 8)
        # width-1 anchors are below the minimum length; width-4 anchors must fit inside
        assert not dec.keep[:, 0].any()
        np.testing.assert_array_equal(np.flatnonzero(dec.keep[:, 1]), [2, 3, 4, 5])

    def test_detections_on_boxcar(self):
        # odd-width anchors centred at t + 0.5 land on integer boundaries
        m, _ = model(scales=(5.0,))
        cas = np.zeros((16, 1))
        cas[6:11, 0] = 1.0
        dets, loss = brm_forward_and_loss(np.zeros((16, 3)), cas, [1], m, video_id="v")
        best = min(dets, key=lambda d: -d.score)
        assert (best.s, best.e, best.score) == (6.0, 11.0, 1.0) and best.video_id == "v"
        assert loss is not None

    def test_batch_loss_matches_per_video(self):
        m, _ = model(seed=8, random_head=True, scales=(3.0, 6.0))
        rng = np.random.default_rng(9)
        F = rng.normal(size=(3, 16, 3))
        cas = rng.uniform(size=(3, 16, 2))
        labels = np.array([[1, 0], [0, 1], [1, 0]], dtype=float)
        per = [brm_forward_and_loss(F[b], cas[b], labels[b], m)[1].item() for b in range(3)]
        assert brm_batch_loss(F, cas, labels, m).item() == pytest.approx(np.mean(per), abs=1e-12)

    def test_gradient_reaches_prediction_head(self):
        m, store = model(seed=10, random_head=True, scales=(3.0, 6.0))
        rng = np.random.default_rng(11)
        _, loss = brm_forward_and_loss(rng.normal(size=(16, 3)), rng.uniform(size=(16, 2)), [1, 1], m)
        tc.backward(loss)
        assert np.abs(store["brm.pred.w"].grad).sum() > 0
