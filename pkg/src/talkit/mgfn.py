"""Cascaded dilated classification block.

A two-layer temporal conv base net feeds parallel dilated conv branches.
Each branch projects its features position-wise through its own class
head, giving a per-branch localisation sequence ``H_i`` (T x K, logits).
Branches fuse as ``H = H_0 + mean(H_1..H_n)``. Video scores are
``sigmoid(GAP(H))``.

The cascade runs a second, independently parameterised block on features
whose stage-one discriminative positions have been zeroed, and fuses the
two sequences with an elementwise max.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DegenerateInputError, DimensionError
from .params import ParamStore
from .tensor import Tensor

DEFAULT_RATES = (1, 2, 3, 5)


@dataclass
class MdcmConfig:
    in_channels: int
    num_classes: int
    width: int = 256
    kernel: int = 3
    rates: Tuple[int, ...] = DEFAULT_RATES

    def __post_init__(self):
        self.rates = tuple(int(r) for r in self.rates)
        if not self.rates or self.rates[0] != 1:
            raise ConfigError(f"dilation rates must start with 1, got {self.rates}")
        if any(r < 1 for r in self.rates):
            raise ConfigError(f"dilation rates must be positive, got {self.rates}")

    @property
    def min_length(self) -> int:
        return (self.kernel - 1) * max(self.rates) + 1


@dataclass
class MdcmOutput:
    cas: Tensor                 # fused logits, (..., T, K)
    branches: List[Tensor]      # per-branch logits H_0..H_n
    logits: Tensor              # video-level logits, (..., K)
    scores: Tensor              # sigmoid(logits)
    branch_scores: List[Tensor]
    features: Tensor            # GAP of base-net features, (..., width)
    encoded: Tensor = None      # per-position branch features, (..., T, n_branches * width)

    @property
    def normalized(self) -> np.ndarray:
        return normalize_cas(self.cas.data)


def normalize_cas(cas_logits: np.ndarray) -> np.ndarray:
    """Per-class sigmoid squashing of a logit CAS into [0, 1]."""
    return tc._stable_sigmoid(np.asarray(cas_logits, dtype=float))


class MdcmBlock:
    """Parameters of one multi-dilated classification network."""

    def __init__(self, cfg: MdcmConfig, store: ParamStore, prefix: str, rng: np.random.Generator):
        C, W, K, k = cfg.in_channels, cfg.width, cfg.num_classes, cfg.kernel
        self.cfg = cfg
        self.prefix = prefix
        self.base = [
            (store.create(f"{prefix}.base0.w", (k, C, W), k * C, rng),
             store.create(f"{prefix}.base0.b", (W,), k * C, rng)),
            (store.create(f"{prefix}.base1.w", (k, W, W), k * W, rng),
             store.create(f"{prefix}.base1.b", (W,), k * W, rng)),
        ]
        self.branches = []
        for i, rate in enumerate(cfg.rates):
            p = f"{prefix}.branch{i}"
            self.branches.append((
                store.create(f"{p}.w", (k, W, W), k * W, rng),
                store.create(f"{p}.b", (W,), k * W, rng),
                store.create(f"{p}.head.w", (W, K), W, rng),
                store.create(f"{p}.head.b", (K,), W, rng),
            ))

    def base_features(self, F) -> Tensor:
        h = tc.as_tensor(F)
        pad = self.cfg.kernel // 2
        for w, b in self.base:
            h = tc.relu(tc.add(tc.conv1d(h, w, padding=pad), b))
        return h


def fuse_branches(h0, *dilated) -> Tensor:
    """``H_0 + (1/n_d) * sum(H_i)``; with no dilated branches returns ``H_0``."""
    h0 = tc.as_tensor(h0)
    if not dilated:
        return h0
    for h in dilated:
        if tc.as_tensor(h).shape != h0.shape:
            raise DimensionError(f"branch shape {tc.as_tensor(h).shape} != {h0.shape}")
    total = dilated[0]
    for h in dilated[1:]:
        total = tc.add(total, h)
    return tc.add(h0, tc.scale(total, 1.0 / len(dilated)))


def mdcm_forward(F, block: MdcmBlock) -> MdcmOutput:
    F = tc.as_tensor(F)
    cfg = block.cfg
    T = F.shape[-2]
    if T < cfg.min_length:
        raise DegenerateInputError(f"sequence of length {T} too short for dilation {max(cfg.rates)}")
    base = block.base_features(F)
    branch_logits, branch_scores, feats = [], [], []
    for rate, (w, b, hw, hb) in zip(cfg.rates, block.branches):
        feat = tc.relu(tc.add(tc.conv1d(base, w, dilation=rate, padding=rate * (cfg.kernel // 2)), b))
        feats.append(feat)
        h = tc.linear(feat, hw, hb)  # CAM-style position-wise class projection
        branch_logits.append(h)
        branch_scores.append(tc.sigmoid(tc.global_avg_pool(h)))
    cas = fuse_branches(branch_logits[0], *branch_logits[1:])
    logits = tc.global_avg_pool(cas)
    return MdcmOutput(cas, branch_logits, logits, tc.sigmoid(logits), branch_scores,
                      tc.global_avg_pool(base), tc.concat(feats, axis=-1))


def classification_loss(scores, labels, eps: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy between probabilities and multi-hot labels."""
    p = tc.clip(tc.as_tensor(scores), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=float)
    if y.shape != p.shape:
        raise DimensionError(f"scores {p.shape} vs labels {y.shape}")
    pos = tc.mul(tc.log(p), y)
    negs = tc.mul(tc.log(tc.sub(1.0, p)), 1.0 - y)
    return tc.neg(tc.mean(tc.add(pos, negs)))


def mdcm_loss(out: MdcmOutput, labels) -> Tensor:
    """Fused-score loss plus the mean of the per-branch losses."""
    loss = classification_loss(out.scores, labels)
    if len(out.branch_scores) > 1:
        aux = [classification_loss(s, labels) for s in out.branch_scores]
        total = aux[0]
        for a in aux[1:]:
            total = tc.add(total, a)
        loss = tc.add(loss, tc.scale(total, 1.0 / len(aux)))
    return loss


def erase_mask(cas_norm: np.ndarray, labels, theta: float = 0.5) -> np.ndarray:
    """Boolean ``(..., T)`` mask of positions where any labelled class reaches
    ``theta`` times its own per-video maximum."""
    if not 0.0 < theta < 1.0 + 1e-12:
        raise ConfigError(f"erasing threshold must lie in (0, 1], got {theta}")
    H = np.asarray(cas_norm, dtype=float)
    y = np.asarray(labels, dtype=bool)
    peak = H.max(axis=-2, keepdims=True)
    hit = (H >= theta * peak) & y[..., None, :]
    return hit.any(axis=-1)


def oae_erase(F, cas_norm: np.ndarray, labels, theta: float = 0.5) -> Tensor:
    """Zero the feature vectors at stage-one discriminative positions.

    The mask is a constant of the recorded graph, so gradients reach the
    surviving positions only.
    """
    F = tc.as_tensor(F)
    keep = ~erase_mask(cas_norm, labels, theta)
    return tc.mul(F, keep[..., None].astype(float))


@dataclass
class CascadeOutput:
    cas: Tensor            # max-fused logits
    first: MdcmOutput
    second: MdcmOutput
    erased: Tensor
    mask: np.ndarray = field(repr=False)

    @property
    def normalized(self) -> np.ndarray:
        return normalize_cas(self.cas.data)


def cascade_forward(F, stage1: MdcmBlock, stage2: MdcmBlock, labels, theta: float = 0.5) -> CascadeOutput:
    """Stage one on ``F``, erase, stage two on the erased features, max-fuse."""
    F = tc.as_tensor(F)
    first = mdcm_forward(F, stage1)
    norm = first.normalized
    mask = erase_mask(norm, labels, theta)
    erased = tc.mul(F, (~mask)[..., None].astype(float))
    second = mdcm_forward(erased, stage2)
    return CascadeOutput(tc.maximum(first.cas, second.cas), first, second, erased, mask)


def predicted_labels(scores: np.ndarray, threshold: float = 0.5, top_k: int = 1) -> np.ndarray:
    """Multi-hot prediction: classes above ``threshold`` plus the ``top_k`` best."""
    scores = np.asarray(scores, dtype=float)
    hot = scores >= threshold
    if top_k:
        top = np.argsort(-scores, axis=-1)[..., :top_k]
        np.put_along_axis(hot, top, True, axis=-1)
    return hot.astype(float)
