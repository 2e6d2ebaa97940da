"""Temporal Boundary Regressor with complementary frame/segment regression
and progressive multi-stage refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DegenerateInputError
from .evaluation import tiou
from .params import ParamStore
from .tensor import Tensor


@dataclass
class Proposal:
    s: float
    e: float
    score: float = 1.0
    class_id: Optional[int] = None
    valid: bool = True

    @property
    def center(self) -> float:
        return 0.5 * (self.s + self.e)

    @property
    def width(self) -> float:
        return self.e - self.s


@dataclass
class TbrConfig:
    channels: int
    hidden: int = 128
    kernel: int = 3
    start_len: int = 8
    center_len: int = 16
    end_len: int = 8
    context_ratio: float = 0.25  # boundary contexts span +-ratio * width
    tau: float = 0.5
    head: str = "span"  # "span": last conv spans the context; "gap": k-wide conv + average pool

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if self.start_len != self.end_len:
            raise ConfigError("start and end contexts share weights and need equal lengths")
        if self.head not in ("span", "gap"):
            raise ConfigError(f"unknown TBR head {self.head!r}")

    @property
    def total_len(self) -> int:
        return self.start_len + self.center_len + self.end_len


@dataclass
class ProposalContexts:
    """Resampled boundary and internal features for a batch of proposals."""

    start: Tensor   # (P, L_s, C)
    center: Tensor  # (P, L_c, C)
    end: Tensor     # (P, L_e, C)


# ---------------------------------------------------------------------------
# context sampling


def interpolation_matrix(positions: np.ndarray, length: int) -> np.ndarray:
    """Linear-interpolation weights mapping a length-``length`` sequence to
    samples at continuous times ``positions`` (shape ``(..., L)``).

    Snippet ``i`` is centred at time ``i + 0.5``. Samples outside ``[0, length]``
    are zero vectors; in-range samples clamp to the first/last snippet.
    """
    pos = np.asarray(positions, dtype=np.float64)
    u = np.clip(pos - 0.5, 0.0, length - 1)
    lo = np.floor(u).astype(np.int64)
    hi = np.minimum(lo + 1, length - 1)
    frac = u - lo
    inside = (pos >= 0.0) & (pos <= length)
    W = np.zeros(pos.shape + (length,))
    np.put_along_axis(W, lo[..., None], ((1.0 - frac) * inside)[..., None], axis=-1)
    add_hi = np.take_along_axis(W, hi[..., None], axis=-1) + (frac * inside)[..., None]
    np.put_along_axis(W, hi[..., None], add_hi, axis=-1)
    return W


def context_extents(p: Proposal, ratio: float = 0.25) -> Tuple[Tuple[float, float], ...]:
    w = p.e - p.s
    if w <= 0:
        raise DegenerateInputError(f"zero-length proposal ({p.s}, {p.e})")
    r = ratio * w
    return (p.s - r, p.s + r), (p.s, p.e), (p.e - r, p.e + r)


def sample_contexts(F, proposals: Sequence[Proposal], cfg: TbrConfig) -> ProposalContexts:
    """Resample start/internal/end regions of every proposal from ``F`` (T x C)."""
    F = tc.as_tensor(F)
    T = F.shape[-2]
    mats = [[], [], []]
    lens = (cfg.start_len, cfg.center_len, cfg.end_len)
    for p in proposals:
        for slot, ((a, b), n) in enumerate(zip(context_extents(p, cfg.context_ratio), lens)):
            mats[slot].append(np.linspace(a, b, n))
    parts = [tc.matmul(interpolation_matrix(np.stack(m), T), F) for m in mats]
    return ProposalContexts(*parts)


# ---------------------------------------------------------------------------
# regressors


class _TwoConv:
    """Conv1d -> ReLU -> Conv1d producing ``n_out`` scalars per sequence."""

    def __init__(self, store: ParamStore, prefix: str, cfg: TbrConfig, length: int, n_out: int,
                 rng: np.random.Generator):
        C, H, k = cfg.channels, cfg.hidden, cfg.kernel
        self.head = cfg.head
        self.k = k
        self.w1 = store.create(f"{prefix}.conv1.w", (k, C, H), k * C, rng)
        self.b1 = store.create(f"{prefix}.conv1.b", (H,), k * C, rng)
        k2 = length if cfg.head == "span" else k
        self.w2 = store.create(f"{prefix}.conv2.w", (k2, H, n_out), k2 * H, rng)
        self.b2 = store.create(f"{prefix}.conv2.b", (n_out,), k2 * H, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = tc.relu(tc.add(tc.conv1d(x, self.w1, padding=self.k // 2), self.b1))
        if self.head == "span":
            out = tc.conv1d(h, self.w2)  # (..., 1, n_out)
            out = tc.reshape(out, out.shape[:-2] + out.shape[-1:])
        else:
            out = tc.global_avg_pool(tc.conv1d(h, self.w2, padding=self.k // 2))
        return tc.add(out, self.b2)


class TbrStage:
    """Parameters for one refinement stage."""

    def __init__(self, cfg: TbrConfig, store: ParamStore, prefix: str, rng: np.random.Generator):
        self.cfg = cfg
        self.frame = _TwoConv(store, f"{prefix}.frame", cfg, cfg.start_len, 1, rng)
        self.segment = _TwoConv(store, f"{prefix}.segment", cfg, cfg.total_len, 3, rng)


def frame_level_regress(ctx: ProposalContexts, stage: TbrStage) -> Tuple[Tensor, Tensor]:
    """Start/end offsets (in proposal-width units) from the boundary contexts."""
    ds = stage.frame(ctx.start)
    de = stage.frame(ctx.end)
    return tc.reshape(ds, ds.shape[:-1]), tc.reshape(de, de.shape[:-1])


def segment_level_regress(ctx: ProposalContexts, stage: TbrStage) -> Tuple[Tensor, Tensor, Tensor]:
    """Centre offset, log-width offset and confidence from ``[F_s, F_c, F_e]``."""
    f_a = tc.concat([ctx.start, ctx.center, ctx.end], axis=-2)
    out = stage.segment(f_a)
    dx = tc.index(out, (Ellipsis, 0))
    dw = tc.index(out, (Ellipsis, 1))
    conf = tc.sigmoid(tc.index(out, (Ellipsis, 2)))
    return dx, dw, conf


# ---------------------------------------------------------------------------
# decoding


def decode_and_fuse(p: Proposal, ds: float, de: float, dx: float, dw: float, tau: float = 0.5,
                    length: Optional[float] = None) -> Proposal:
    """Decode both regression paths and fuse them with weight ``tau``.

    Frame path:   s1 = s - ds*w,  e1 = e - de*w
    Segment path: x2 = x - dx*w,  w2 = w*exp(dw),  s2/e2 = x2 -/+ w2/2
    Fused:        s = tau*s1 + (1-tau)*s2 (same for e)

    With ``length`` given the result is clamped to ``[0, length]``; a
    degenerate result is reordered and marked invalid with score 0.
    """
    w = p.e - p.s
    if w <= 0:
        raise DegenerateInputError(f"zero-length proposal ({p.s}, {p.e})")
    s1 = p.s - ds * w
    e1 = p.e - de * w
    x2 = 0.5 * (p.s + p.e) - dx * w
    w2 = w * math.exp(dw)
    s2 = x2 - w2 / 2.0
    e2 = x2 + w2 / 2.0
    s = tau * s1 + (1.0 - tau) * s2
    e = tau * e1 + (1.0 - tau) * e2
    if length is not None:
        s = min(max(s, 0.0), float(length))
        e = min(max(e, 0.0), float(length))
    if s >= e:
        return Proposal(min(s, e), max(s, e), 0.0, p.class_id, valid=False)
    return Proposal(s, e, p.score, p.class_id, p.valid)


@dataclass
class StageOutput:
    s1: Tensor
    e1: Tensor
    s2: Tensor
    e2: Tensor
    s: Tensor
    e: Tensor
    conf: Tensor


def decode_tensors(s_p: np.ndarray, e_p: np.ndarray, ds: Tensor, de: Tensor, dx: Tensor,
                   dw: Tensor, conf: Tensor, tau: float) -> StageOutput:
    """Batched, differentiable counterpart of :func:`decode_and_fuse` (no clamping)."""
    w = e_p - s_p
    s1 = tc.sub(s_p, tc.mul(ds, w))
    e1 = tc.sub(e_p, tc.mul(de, w))
    x2 = tc.sub(0.5 * (s_p + e_p), tc.mul(dx, w))
    half_w2 = tc.mul(tc.exp(dw), 0.5 * w)
    s2 = tc.sub(x2, half_w2)
    e2 = tc.add(x2, half_w2)
    s = tc.add(tc.scale(s1, tau), tc.scale(s2, 1.0 - tau))
    e = tc.add(tc.scale(e1, tau), tc.scale(e2, 1.0 - tau))
    return StageOutput(s1, e1, s2, e2, s, e, conf)


def stage_offsets(F, proposals: Sequence[Proposal], stage: TbrStage):
    """``(ds, de, dx, dw, conf)`` tensors for a batch of proposals."""
    ctx = sample_contexts(F, proposals, stage.cfg)
    ds, de = frame_level_regress(ctx, stage)
    dx, dw, conf = segment_level_regress(ctx, stage)
    return ds, de, dx, dw, conf


def run_stage(F, proposals: Sequence[Proposal], stage: TbrStage) -> StageOutput:
    s_p = np.array([p.s for p in proposals])
    e_p = np.array([p.e for p in proposals])
    return decode_tensors(s_p, e_p, *stage_offsets(F, proposals, stage), stage.cfg.tau)


def tbr_refine(F, proposals: Sequence[Proposal], stages: Sequence[TbrStage],
               num_stages: Optional[int] = None, length: Optional[float] = None) -> List[Proposal]:
    """Apply ``num_stages`` refinement stages; scores pick up the last stage's confidence."""
    num_stages = len(stages) if num_stages is None else num_stages
    if num_stages < 1 or num_stages > len(stages):
        raise ConfigError(f"need 1..{len(stages)} stages, got {num_stages}")
    F = tc.as_tensor(F)
    length = F.shape[-2] if length is None else length
    current = list(proposals)
    conf = np.ones(len(current))
    with tc.no_grad():
        for stage in stages[:num_stages]:
            live = [i for i, p in enumerate(current) if p.valid and p.e > p.s]
            if not live:
                break
            ds, de, dx, dw, c = stage_offsets(F, [current[i] for i in live], stage)
            for j, i in enumerate(live):
                current[i] = decode_and_fuse(current[i], ds.data[j], de.data[j], dx.data[j],
                                             dw.data[j], stage.cfg.tau, length)
                conf[i] = c.data[j]
    return [replace(p, score=p.score * conf[i] if p.valid else 0.0)
            for i, p in enumerate(current)]


# ---------------------------------------------------------------------------
# training objective


def match_ground_truth(p: Proposal, gts: Sequence[Tuple[float, float]],
                       min_tiou: float = 0.5) -> Optional[int]:
    """Index of the highest-tIoU ground truth, if it reaches ``min_tiou``."""
    best, best_iou = None, min_tiou
    for i, (s, e) in enumerate(gts):
        iou = tiou((p.s, p.e), (s, e))
        if iou >= best_iou:
            best, best_iou = i, iou
    return best


def realized_tiou(out: StageOutput, gts: Sequence[Optional[Tuple[float, float]]]) -> np.ndarray:
    """tIoU of each fused output with its matched ground truth (0 when unmatched)."""
    return np.array([
        tiou((float(a), float(b)), g) if g is not None and b > a else 0.0
        for a, b, g in zip(out.s.data, out.e.data, gts)])


def tbr_loss(out: StageOutput, proposals: Sequence[Proposal],
             gts: Sequence[Optional[Tuple[float, float]]],
             conf_target: Optional[np.ndarray] = None) -> Tensor:
    """Smooth-L1 on both decoded paths (width-normalised) plus squared
    confidence error against the realised tIoU; summed over the batch.

    ``gts[i]`` is the matched ground truth of proposal ``i`` or ``None``.
    The confidence target is a constant of the graph; pass ``conf_target``
    to pin it (finite-difference checks need a fixed target).
    """
    w = np.array([p.e - p.s for p in proposals])
    matched = np.array([g is not None for g in gts])
    gs = np.array([g[0] if g is not None else 0.0 for g in gts])
    ge = np.array([g[1] if g is not None else 0.0 for g in gts])
    target_conf = realized_tiou(out, gts) if conf_target is None else np.asarray(conf_target, float)
    reg = None
    for pred, ref in ((out.s1, gs), (out.e1, ge), (out.s2, gs), (out.e2, ge)):
        term = tc.tsum(tc.mul(tc.smooth_l1(tc.div(tc.sub(pred, ref), w)), matched.astype(float)))
        reg = term if reg is None else tc.add(reg, term)
    diff = tc.sub(out.conf, target_conf)
    return tc.add(reg, tc.tsum(tc.mul(diff, diff)))
