import math

import numpy as np
import pytest

from talkit.errors import ConfigError
from talkit.lgte import (AttentionProjections, LgteConfig, LgteLayer, LgteStack, global_attention,
                         gte_forward, lgte_forward, lgte_stack, local_attention, lte_forward)
from talkit.params import ParamStore


def projections(width, seed):
    return AttentionProjections.create(ParamStore(), "g", width, np.random.default_rng(seed))


def layer(cfg, seed=0):
    return LgteLayer(cfg, ParamStore(), "layer", np.random.default_rng(seed))


def reference_layer(F, L, cfg):
    """Loop-by-loop evaluation of one encoder layer."""
    T, C = F.shape
    c = C // cfg.groups
    half = cfg.window // 2
    scale = math.sqrt(c)
    W = lambda t: t.data
    q, k, v = F @ W(L.gamma), F @ W(L.rho), F @ W(L.phi)
    heads = np.zeros((T, C))
    for g in range(cfg.groups):
        cols = slice(g * c, (g + 1) * c)
        for i in range(T):
            if g < cfg.local_groups:
                js = range(i - half, i + half + 1)
            else:
                js = range(T)
            logits, values = [], []
            for j in js:
                inside = 0 <= j < T
                kj = k[j, cols] if inside else np.zeros(c)
                vj = v[j, cols] if inside else np.zeros(c)
                logits.append(q[i, cols] @ kj / scale)
                values.append(vj)
            a = np.exp(np.array(logits) - max(logits))
            a /= a.sum()
            heads[i, cols] = sum(w * val for w, val in zip(a, values))
    f_a = heads @ W(L.w_o)

    def ln(x, gain, bias):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + cfg.eps) * gain + bias

    f_b = ln(f_a, W(L.ln1_gain), W(L.ln1_bias)) + f_a
    hidden = np.maximum(f_b @ W(L.w_1) + W(L.b_1), 0.0)
    ffn = hidden @ W(L.w_2) + W(L.b_2)
    return ln(ffn + f_b, W(L.ln2_gain), W(L.ln2_bias))


class TestLocalEncoder:
    def test_window_one_returns_values(self):
        proj = projections(3, 0)
        F = np.random.default_rng(1).normal(size=(6, 3))
        out = lte_forward(F, proj, window=1)
        np.testing.assert_allclose(out.data, F @ proj.phi.data, atol=1e-14)

    def test_constant_input_interior(self):
        proj = projections(4, 2)
        F = np.tile(np.array([0.3, -1.0, 2.0, 0.5]), (9, 1))
        out = lte_forward(F, proj, window=3, mask_padding=True)
        np.testing.assert_allclose(out.data, np.tile(F[0] @ proj.phi.data, (9, 1)), atol=1e-12)
        out = lte_forward(F, proj, window=3)
        np.testing.assert_allclose(out.data[1:-1], np.tile(F[0] @ proj.phi.data, (7, 1)), atol=1e-12)

    def test_locality(self):
        proj = projections(4, 3)
        rng = np.random.default_rng(4)
        F = rng.normal(size=(12, 4))
        base = lte_forward(F, proj, window=5).data
        G = F.copy()
        G[9:] += rng.normal(size=(3, 4))
        out = lte_forward(G, proj, window=5).data
        np.testing.assert_array_equal(out[:7], base[:7])
        assert not np.allclose(out[7:], base[7:])

    def test_even_window(self):
        with pytest.raises(ConfigError):
            lte_forward(np.ones((4, 2)), projections(2, 0), window=4)

    def test_weights_normalised(self):
        rng = np.random.default_rng(5)
        q, k, v = (rng.normal(size=(7, 3)) for _ in range(3))
        _, w = local_attention(q, k, v, 5, 1.7, return_weights=True)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)
        _, w = global_attention(q, k, v, 1.7, return_weights=True)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)


class TestGlobalEncoder:
    def test_single_position(self):
        proj = projections(3, 6)
        F = np.array([[0.5, -0.2, 1.0]])
        np.testing.assert_allclose(gte_forward(F, proj).data, F @ proj.phi.data, atol=1e-14)

    def test_constant_input(self):
        proj = projections(3, 7)
        F = np.tile([1.0, 2.0, -0.5], (5, 1))
        np.testing.assert_allclose(gte_forward(F, proj).data, np.tile(F[0] @ proj.phi.data, (5, 1)),
                                   atol=1e-12)

    @pytest.mark.parametrize("T", [1, 2, 5, 8])
    def test_equals_masked_full_window(self, T):
        proj = projections(4, T)
        F = np.random.default_rng(10 + T).normal(size=(T, 4))
        full = lte_forward(F, proj, window=2 * T - 1, mask_padding=True)
        np.testing.assert_allclose(gte_forward(F, proj).data, full.data, atol=1e-12)


class TestLayer:
    def test_matches_reference(self):
        cfg = LgteConfig(4, groups=2, local_groups=1, window=3, layers=1)
        L = layer(cfg, 11)
        F = np.random.default_rng(12).normal(size=(4, 4))
        np.testing.assert_allclose(lgte_forward(F, L, cfg).data, reference_layer(F, L, cfg), atol=1e-12)

    @pytest.mark.parametrize("local", [0, 2, 4])
    def test_matches_reference_other_mixes(self, local):
        cfg = LgteConfig(8, groups=4, local_groups=local, window=5, layers=1)
        L = layer(cfg, 13)
        F = np.random.default_rng(14).normal(size=(9, 8))
        np.testing.assert_allclose(lgte_forward(F, L, cfg).data, reference_layer(F, L, cfg), atol=1e-12)

    def test_single_group_is_pure_local(self):
        cfg = LgteConfig(4, groups=1, local_groups=1, window=3, layers=1)
        L = layer(cfg, 15)
        F = np.random.default_rng(16).normal(size=(6, 4))
        np.testing.assert_allclose(lgte_forward(F, L, cfg).data, reference_layer(F, L, cfg), atol=1e-12)

    @pytest.mark.parametrize("T,C,N", [(1, 4, 2), (7, 6, 3), (16, 8, 8)])
    def test_shape(self, T, C, N):
        cfg = LgteConfig(C, groups=N, local_groups=N // 2, window=3, layers=1)
        F = np.random.default_rng(T).normal(size=(T, C))
        assert lgte_forward(F, layer(cfg), cfg).shape == (T, C)

    def test_batched_matches_loop(self):
        cfg = LgteConfig(4, groups=2, local_groups=1, window=3, layers=1)
        L = layer(cfg, 17)
        F = np.random.default_rng(18).normal(size=(3, 6, 4))
        batched = lgte_forward(F, L, cfg).data
        for b in range(3):
            np.testing.assert_allclose(batched[b], lgte_forward(F[b], L, cfg).data, atol=1e-12)

    def test_bad_configs(self):
        with pytest.raises(ConfigError):
            LgteConfig(6, groups=4)
        with pytest.raises(ConfigError):
            LgteConfig(8, groups=4, local_groups=5)
        with pytest.raises(ConfigError):
            LgteConfig(8, groups=4, window=4)
        with pytest.raises(ConfigError):
            LgteConfig(8, groups=4, layers=0)

    def test_channel_mismatch(self):
        cfg = LgteConfig(4, groups=2, local_groups=1, layers=1)
        with pytest.raises(ConfigError):
            lgte_forward(np.ones((5, 3)), layer(cfg), cfg)


class TestStack:
    def test_one_layer_equals_forward(self):
        cfg = LgteConfig(4, groups=2, local_groups=1, window=3, layers=1)
        stack = LgteStack(cfg, ParamStore(), np.random.default_rng(20))
        F = np.random.default_rng(21).normal(size=(5, 4))
        np.testing.assert_array_equal(stack(F).data, lgte_forward(F, stack.layers[0], cfg).data)

    def test_three_layers_keep_shape(self):
        cfg = LgteConfig(8, groups=4, local_groups=2, window=3, layers=3)
        store = ParamStore()
        stack = LgteStack(cfg, store, np.random.default_rng(22))
        F = np.random.default_rng(23).normal(size=(10, 8))
        assert lgte_stack(F, stack.layers, cfg).shape == (10, 8)
        assert len({name.split(".")[1] for name in store}) == 3
