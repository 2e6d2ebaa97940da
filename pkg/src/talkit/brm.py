"""Anchor-based boundary regression trained with the Outer-Inner-Contrastive loss.

Every output cell ``t`` carries ``M`` anchors centred at ``t + 0.5``. The
predictor emits ``(p_x, p_w)`` per anchor, decoded as

    r_x = t_x + t_w * p_x,    r_w = t_w * exp(p_w),
    s, e = r_x -/+ r_w / 2,   S, E = s - gamma * r_w, e + gamma * r_w.

OIC is the mean CAS activation over the outer ring minus the mean over the
inner segment. Snippet ``t`` covers ``[t, t + 1)`` and contributes in
proportion to its overlap with an interval, which keeps the loss
piecewise-linear (and differentiable almost everywhere) in the boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DegenerateInputError
from .evaluation import Detection
from .params import Adam, ParamStore
from .tensor import Tensor


class Anchor(NamedTuple):
    t_x: float
    t_w: float


@dataclass
class BrmConfig:
    in_channels: int
    width: int = 128
    kernel: int = 3
    layers: int = 3
    scales: Tuple[float, ...] = (4.0, 8.0, 16.0, 32.0)
    gamma: float = 0.25
    outer: str = "ring"  # "ring" or "full" inflated interval
    min_length: float = 2.0

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError(f"anchor scales must be non-empty and positive, got {self.scales}")
        if self.gamma < 0:
            raise ConfigError(f"inflation ratio must be non-negative, got {self.gamma}")
        if self.outer not in ("ring", "full"):
            raise ConfigError(f"unknown outer-area mode {self.outer!r}")

    @property
    def num_scales(self) -> int:
        return len(self.scales)


# ---------------------------------------------------------------------------
# anchors and box arithmetic


def generate_anchors(t_out: int, scales: Sequence[float]) -> List[Anchor]:
    if not scales or any(s <= 0 for s in scales):
        raise ConfigError(f"anchor scales must be non-empty and positive, got {list(scales)}")
    return [Anchor(t + 0.5, float(w)) for t in range(t_out) for w in scales]


def anchor_grid(t_out: int, scales: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """``(t_x, t_w)`` arrays of shape ``(t_out, M)``."""
    anchors = generate_anchors(t_out, scales)
    arr = np.array(anchors, dtype=float).reshape(t_out, len(scales), 2)
    return arr[..., 0], arr[..., 1]


def decode_anchor(a: Anchor, p_x: float, p_w: float) -> Tuple[float, float]:
    r_x = a.t_x + a.t_w * p_x
    r_w = a.t_w * math.exp(p_w)
    return r_x - r_w / 2.0, r_x + r_w / 2.0


def inflate(s: float, e: float, gamma: float, length: Optional[float] = None):
    """Outer boundary ``(S, E)``; with ``length`` also clamps to ``[0, length]``
    and reports which sides were clamped as a third element."""
    if gamma < 0:
        raise ConfigError(f"inflation ratio must be non-negative, got {gamma}")
    r_w = e - s
    if r_w <= 0:
        raise DegenerateInputError(f"degenerate inner segment ({s}, {e})")
    S, E = s - r_w * gamma, e + r_w * gamma
    if length is None:
        return S, E
    clamped = (S < 0.0, E > length)
    return max(S, 0.0), min(E, float(length)), clamped


# ---------------------------------------------------------------------------
# OIC


def overlap_weights(a, b, length: int) -> Tensor:
    """Per-snippet overlap of ``[a, b]`` with ``[t, t + 1)``, shape ``(..., length)``."""
    a = tc.as_tensor(a)
    b = tc.as_tensor(b)
    left = np.arange(length, dtype=float)
    a_col = tc.reshape(a, a.shape + (1,))
    b_col = tc.reshape(b, b.shape + (1,))
    return tc.relu(tc.sub(tc.minimum(b_col, left + 1.0), tc.maximum(a_col, left)))


def _weighted_mean(weights: Tensor, values) -> Tensor:
    num = tc.tsum(tc.mul(weights, values), axis=-1)
    den = tc.tsum(weights, axis=-1)
    return tc.div(num, tc.maximum(den, 1e-12))


def oic_loss(cas_k, inner, outer, outer_mode: str = "ring") -> Tensor:
    """Outer-area mean minus inner mean of a normalised 1-D CAS.

    ``inner``/``outer`` are ``(s, e)`` / ``(S, E)`` pairs of floats or
    tensors (batched boundaries give batched losses). An empty ring counts
    as mean 0.
    """
    cas_k = tc.as_tensor(cas_k)
    T = cas_k.shape[-1]
    s, e = inner
    S, E = outer
    w_in = overlap_weights(s, e, T)
    w_out = overlap_weights(S, E, T)
    if outer_mode == "ring":
        w_out = tc.sub(w_out, w_in)
    elif outer_mode != "full":
        raise ConfigError(f"unknown outer-area mode {outer_mode!r}")
    return tc.sub(_weighted_mean(w_out, cas_k), _weighted_mean(w_in, cas_k))


def fit_anchor_oic(cas_k, anchor: Anchor, gamma: float = 0.25, lr: float = 0.05,
                   iterations: int = 500, outer_mode: str = "ring") -> Tuple[float, float, float]:
    """Minimise OIC over the offsets ``(p_x, p_w)`` of a single anchor.

    Uses Adam: the loss is piecewise-linear in the boundaries, so plain
    gradient steps either crawl or overshoot. Returns ``(s, e, loss)``.
    """
    store = ParamStore()
    p_x = store.add("p_x", Tensor(np.zeros(()), requires_grad=True))
    p_w = store.add("p_w", Tensor(np.zeros(()), requires_grad=True))
    opt = Adam(store, lr=lr, clip_norm=None)

    def boxes():
        r_x = tc.add(tc.scale(p_x, anchor.t_w), anchor.t_x)
        r_w = tc.scale(tc.exp(p_w), anchor.t_w)
        s = tc.sub(r_x, tc.scale(r_w, 0.5))
        e = tc.add(r_x, tc.scale(r_w, 0.5))
        return s, e, tc.sub(s, tc.scale(r_w, gamma)), tc.add(e, tc.scale(r_w, gamma))

    for _ in range(iterations):
        s, e, S, E = boxes()
        store.zero_grad()
        tc.backward(oic_loss(cas_k, (s, e), (S, E), outer_mode))
        opt.step()
    with tc.no_grad():
        s, e, S, E = boxes()
        loss = oic_loss(cas_k, (s, e), (S, E), outer_mode).item()
    return s.item(), e.item(), loss


# ---------------------------------------------------------------------------
# predictor


class BrmModel:
    """Three 128-filter temporal convs and a 2M-filter prediction conv."""

    def __init__(self, cfg: BrmConfig, store: ParamStore, rng: np.random.Generator, prefix: str = "brm"):
        self.cfg = cfg
        k, W = cfg.kernel, cfg.width
        self.convs = []
        c_in = cfg.in_channels
        for i in range(cfg.layers):
            self.convs.append((store.create(f"{prefix}.conv{i}.w", (k, c_in, W), k * c_in, rng),
                               store.create(f"{prefix}.conv{i}.b", (W,), k * c_in, rng)))
            c_in = W
        M2 = 2 * cfg.num_scales
        # zero-initialised so training starts from the plain anchors
        self.pred_w = store.create(f"{prefix}.pred.w", (k, c_in, M2), fill=0.0)
        self.pred_b = store.create(f"{prefix}.pred.b", (M2,), fill=0.0)

    def __call__(self, F) -> Tuple[Tensor, Tensor]:
        """``(p_x, p_w)``, each ``(..., T, M)``."""
        h = tc.as_tensor(F)
        pad = self.cfg.kernel // 2
        for w, b in self.convs:
            h = tc.relu(tc.add(tc.conv1d(h, w, padding=pad), b))
        out = tc.add(tc.conv1d(h, self.pred_w, padding=pad), self.pred_b)
        return tc.index(out, (Ellipsis, slice(0, None, 2))), tc.index(out, (Ellipsis, slice(1, None, 2)))


@dataclass
class DecodedAnchors:
    s: Tensor
    e: Tensor
    S: Tensor
    E: Tensor
    keep: np.ndarray  # boolean keep-rule mask, same shape as s


def decode_predictions(p_x: Tensor, p_w: Tensor, cfg: BrmConfig, length: int) -> DecodedAnchors:
    T = p_x.shape[-2]
    t_x, t_w = anchor_grid(T, cfg.scales)
    r_x = tc.add(tc.mul(p_x, t_w), t_x)
    r_w = tc.mul(tc.exp(p_w), t_w)
    half = tc.scale(r_w, 0.5)
    s = tc.sub(r_x, half)
    e = tc.add(r_x, half)
    S = tc.sub(s, tc.scale(r_w, cfg.gamma))
    E = tc.add(e, tc.scale(r_w, cfg.gamma))
    keep = (r_w.data >= cfg.min_length) & (s.data >= 0.0) & (e.data <= length)
    # clamp to the video; gradients stop at the clamped side
    clampv = lambda x: tc.clip(x, 0.0, float(length))
    return DecodedAnchors(clampv(s), clampv(e), clampv(S), clampv(E), keep)


def brm_forward_and_loss(F, cas_norm: np.ndarray, labels, model: BrmModel,
                         class_scores: Optional[np.ndarray] = None, drop_positive: bool = False,
                         video_id: str = "") -> Tuple[List[Detection], Optional[Tensor]]:
    """Predict anchors from ``F`` and score them against each labelled class's CAS.

    The loss is the mean OIC over kept anchors, averaged over labelled
    classes (``None`` when nothing survives). With ``drop_positive`` anchors
    whose OIC is above zero are excluded from the loss. Detections are kept
    anchors with negative OIC, scored by inner-mean activation times the
    video class score.
    """
    cfg = model.cfg
    cas = np.asarray(cas_norm, dtype=float)
    T = cas.shape[-2]
    p_x, p_w = model(F)
    dec = decode_predictions(p_x, p_w, cfg, T)
    flat = lambda x: tc.reshape(x, (-1,))
    s, e, S, E = flat(dec.s), flat(dec.e), flat(dec.S), flat(dec.E)
    keep = dec.keep.reshape(-1)
    labels = np.asarray(labels, dtype=float)
    class_scores = np.ones(cas.shape[-1]) if class_scores is None else np.asarray(class_scores)
    terms, dets = [], []
    for k in np.flatnonzero(labels > 0):
        oic = oic_loss(cas[:, k], (s, e), (S, E), cfg.outer)
        use = keep & (~(oic.data > 0) if drop_positive else True)
        if use.any():
            terms.append(tc.scale(tc.tsum(tc.mul(oic, use.astype(float))), 1.0 / use.sum()))
        inner = _weighted_mean(overlap_weights(s.data, e.data, T), cas[:, k]).data
        for i in np.flatnonzero(keep & (oic.data < 0)):
            dets.append(Detection(video_id, int(k), float(s.data[i]), float(e.data[i]),
                                  float(inner[i] * class_scores[k])))
    if not terms:
        return dets, None
    loss = terms[0]
    for t in terms[1:]:
        loss = tc.add(loss, t)
    return dets, tc.scale(loss, 1.0 / len(terms))


def offset_penalty(p_x: Tensor, p_w: Tensor) -> Tensor:
    """Mean squared regression output over all anchors."""
    return tc.add(tc.mean(tc.mul(p_x, p_x)), tc.mean(tc.mul(p_w, p_w)))


def brm_batch_loss(F, cas_norm: np.ndarray, labels, model: BrmModel,
                   drop_positive: bool = False, reg: float = 0.0) -> Optional[Tensor]:
    """Batched :func:`brm_forward_and_loss` loss over ``(B, T, C)`` features.

    Averages the per-(video, labelled class) mean OIC, which equals the
    mean of the per-video losses when every video carries one label.
    ``reg`` weights :func:`offset_penalty`, which keeps anchors that left
    the keep rule from drifting further away.
    """
    cfg = model.cfg
    cas = np.asarray(cas_norm, dtype=float)
    B, T = cas.shape[0], cas.shape[1]
    labels = np.asarray(labels, dtype=float)
    vids, classes = np.nonzero(labels > 0)
    if len(vids) == 0:
        return None
    p_x, p_w = model(F)
    dec = decode_predictions(p_x, p_w, cfg, T)
    flat = lambda x: tc.index(tc.reshape(x, (B, -1)), vids)
    s, e, S, E = flat(dec.s), flat(dec.e), flat(dec.S), flat(dec.E)
    keep = dec.keep.reshape(B, -1)[vids]
    cas_k = cas[vids, :, classes][:, None, :]
    oic = oic_loss(cas_k, (s, e), (S, E), cfg.outer)
    use = keep & ~(oic.data > 0) if drop_positive else keep
    counts = use.sum(axis=1)
    live = counts > 0
    if not live.any():
        return None
    weights = np.where(live[:, None], use / np.maximum(counts, 1)[:, None], 0.0)
    loss = tc.scale(tc.tsum(tc.mul(oic, weights)), 1.0 / live.sum())
    if reg > 0:
        loss = tc.add(loss, tc.scale(offset_penalty(p_x, p_w), reg))
    return loss
