"""Local-Global Temporal Encoder.

The input sequence is projected by three ``C x C`` maps (query, key, value),
split into ``N`` channel groups, and the first ``A`` groups attend within a
centred window while the rest attend over the whole sequence. Group outputs
are concatenated, mixed by ``W_o``, and passed through

    f_b = LayerNorm(f_a) + f_a
    out = LayerNorm(FFN(f_b) + f_b)

exactly in that order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as tc
from .errors import ConfigError
from .params import ParamStore
from .tensor import Tensor

_MASK_VALUE = -1e9


@dataclass
class LgteConfig:
    channels: int
    groups: int = 8
    local_groups: int = 4
    window: int = 9
    ffn_hidden: Optional[int] = None
    layers: int = 2
    literal_scale: bool = False  # divide logits by sqrt(C) instead of sqrt(C / N)
    mask_padding: bool = False  # mask out-of-range window slots instead of zero-padding
    eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.channels
        self.validate()

    def validate(self) -> None:
        if self.channels < 1 or self.groups < 1:
            raise ConfigError("LGTE channels and groups must be positive")
        if self.channels % self.groups:
            raise ConfigError(f"channels {self.channels} not divisible by groups {self.groups}")
        if not 0 <= self.local_groups <= self.groups:
            raise ConfigError(f"local_groups must lie in [0, {self.groups}]")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be a positive odd integer, got {self.window}")
        if self.layers < 1:
            raise ConfigError("LGTE needs at least one layer")

    @property
    def group_width(self) -> int:
        return self.channels // self.groups

    @property
    def softmax_scale(self) -> float:
        return math.sqrt(self.channels if self.literal_scale else self.group_width)


# ---------------------------------------------------------------------------
# attention kernels on already-projected (query, key, value) groups


def window_index(T: int, window: int) -> np.ndarray:
    """Row indices into a sequence zero-padded by ``window // 2`` on each side."""
    return np.arange(T)[:, None] + np.arange(window)[None, :]


def local_attention(q: Tensor, k: Tensor, v: Tensor, window: int, scale: float,
                    mask_padding: bool = False, return_weights: bool = False):
    """Windowed attention over ``(..., T, c)`` groups."""
    T, c = q.shape[-2], q.shape[-1]
    half = window // 2
    idx = window_index(T, window)
    sel = (Ellipsis, idx, slice(None))
    k_win = tc.index(tc.pad_time(k, half, half), sel)  # (..., T, w, c)
    v_win = tc.index(tc.pad_time(v, half, half), sel)
    q_col = tc.reshape(q, q.shape[:-1] + (1, c))
    logits = tc.tsum(tc.mul(q_col, k_win), axis=-1)  # (..., T, w)
    if mask_padding:
        pos = idx - half
        logits = tc.add(logits, np.where((pos < 0) | (pos >= T), _MASK_VALUE, 0.0))
    weights = tc.softmax(logits, axis=-1, scale=scale)
    w_col = tc.reshape(weights, weights.shape + (1,))
    out = tc.tsum(tc.mul(w_col, v_win), axis=-2)
    return (out, weights) if return_weights else out


def global_attention(q: Tensor, k: Tensor, v: Tensor, scale: float, return_weights: bool = False):
    """Full-sequence attention over ``(..., T, c)`` groups."""
    weights = tc.softmax(tc.matmul(q, tc.transpose(k)), axis=-1, scale=scale)
    out = tc.matmul(weights, v)
    return (out, weights) if return_weights else out


@dataclass
class AttentionProjections:
    """Query/key/value maps for a single encoder group."""

    gamma: Tensor
    rho: Tensor
    phi: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, width: int, rng: np.random.Generator):
        return cls(store.create(f"{prefix}.gamma", (width, width), width, rng),
                   store.create(f"{prefix}.rho", (width, width), width, rng),
                   store.create(f"{prefix}.phi", (width, width), width, rng))

    def project(self, F):
        return tc.matmul(F, self.gamma), tc.matmul(F, self.rho), tc.matmul(F, self.phi)


def lte_forward(F, proj: AttentionProjections, window: int, scale: Optional[float] = None,
                mask_padding: bool = False) -> Tensor:
    """Local temporal encoder on one channel group."""
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be a positive odd integer, got {window}")
    q, k, v = proj.project(tc.as_tensor(F))
    scale = scale if scale is not None else math.sqrt(q.shape[-1])
    return local_attention(q, k, v, window, scale, mask_padding)


def gte_forward(F, proj: AttentionProjections, scale: Optional[float] = None) -> Tensor:
    """Global temporal encoder on one channel group."""
    q, k, v = proj.project(tc.as_tensor(F))
    scale = scale if scale is not None else math.sqrt(q.shape[-1])
    return global_attention(q, k, v, scale)


# ---------------------------------------------------------------------------
# full layer


class LgteLayer:
    """Parameters of one LGTE layer, registered under ``prefix``."""

    def __init__(self, cfg: LgteConfig, store: ParamStore, prefix: str, rng: np.random.Generator):
        C, H = cfg.channels, cfg.ffn_hidden
        self.cfg = cfg
        self.gamma = store.create(f"{prefix}.gamma", (C, C), C, rng)
        self.rho = store.create(f"{prefix}.rho", (C, C), C, rng)
        self.phi = store.create(f"{prefix}.phi", (C, C), C, rng)
        self.w_o = store.create(f"{prefix}.w_o", (C, C), C, rng)
        self.w_1 = store.create(f"{prefix}.ffn.w_1", (C, H), C, rng)
        self.b_1 = store.create(f"{prefix}.ffn.b_1", (H,), C, rng)
        self.w_2 = store.create(f"{prefix}.ffn.w_2", (H, C), H, rng)
        self.b_2 = store.create(f"{prefix}.ffn.b_2", (C,), H, rng)
        self.ln1_gain = store.create(f"{prefix}.ln1.gain", (C,), fill=1.0)
        self.ln1_bias = store.create(f"{prefix}.ln1.bias", (C,), fill=0.0)
        self.ln2_gain = store.create(f"{prefix}.ln2.gain", (C,), fill=1.0)
        self.ln2_bias = store.create(f"{prefix}.ln2.bias", (C,), fill=0.0)

    def ffn(self, x: Tensor) -> Tensor:
        hidden = tc.relu(tc.linear(x, self.w_1, self.b_1))
        return tc.linear(hidden, self.w_2, self.b_2)


def lgte_forward(F, layer: LgteLayer, cfg: LgteConfig) -> Tensor:
    """One LGTE layer on a ``(..., T, C)`` sequence."""
    F = tc.as_tensor(F)
    if F.shape[-1] != cfg.channels:
        raise ConfigError(f"LGTE expects {cfg.channels} channels, got {F.shape[-1]}")
    q = tc.matmul(F, layer.gamma)
    k = tc.matmul(F, layer.rho)
    v = tc.matmul(F, layer.phi)
    c = cfg.group_width
    outs = []
    for g in range(cfg.groups):
        sel = (Ellipsis, slice(g * c, (g + 1) * c))
        qg, kg, vg = tc.index(q, sel), tc.index(k, sel), tc.index(v, sel)
        if g < cfg.local_groups:
            outs.append(local_attention(qg, kg, vg, cfg.window, cfg.softmax_scale, cfg.mask_padding))
        else:
            outs.append(global_attention(qg, kg, vg, cfg.softmax_scale))
    f_a = tc.matmul(outs[0] if len(outs) == 1 else tc.concat(outs, axis=-1), layer.w_o)
    f_b = tc.add(tc.layer_norm(f_a, layer.ln1_gain, layer.ln1_bias, cfg.eps), f_a)
    return tc.layer_norm(tc.add(layer.ffn(f_b), f_b), layer.ln2_gain, layer.ln2_bias, cfg.eps)


class LgteStack:
    """``cfg.layers`` LGTE layers with independent parameters."""

    def __init__(self, cfg: LgteConfig, store: ParamStore, rng: np.random.Generator,
                 prefix: str = "lgte"):
        self.cfg = cfg
        self.layers: List[LgteLayer] = [LgteLayer(cfg, store, f"{prefix}.layer{i}", rng)
                                        for i in range(cfg.layers)]

    def __call__(self, F) -> Tensor:
        return lgte_stack(F, self.layers, self.cfg)


def lgte_stack(F, layers: List[LgteLayer], cfg: LgteConfig) -> Tensor:
    out = tc.as_tensor(F)
    for layer in layers:
        out = lgte_forward(out, layer, cfg)
    return out
