"""Maximum Mean Discrepancy between trimmed (source) and untrimmed (target)
branch features, and the transfer training step built on it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as tc
from .errors import DimensionError
from .mgfn import MdcmBlock, mdcm_forward, mdcm_loss
from .tensor import Tensor

BANDWIDTH_MULTIPLIERS = (0.5, 1.0, 2.0)


def squared_distances(X, Y) -> Tensor:
    """Pairwise ``||x_i - y_j||^2`` as an ``(n, m)`` tensor (direct differences,
    so the result is bitwise symmetric under swapping ``X`` and ``Y``)."""
    X, Y = tc.as_tensor(X), tc.as_tensor(Y)
    diff = tc.sub(tc.reshape(X, (X.shape[0], 1, X.shape[1])),
                  tc.reshape(Y, (1, Y.shape[0], Y.shape[1])))
    return tc.tsum(tc.mul(diff, diff), axis=-1)


def median_bandwidths(X: np.ndarray, Y: np.ndarray,
                      multipliers: Sequence[float] = BANDWIDTH_MULTIPLIERS) -> list:
    """Median pairwise distance of the pooled sample, times each multiplier."""
    Z = np.concatenate([np.asarray(X, float), np.asarray(Y, float)])
    d2 = ((Z[:, None, :] - Z[None, :, :]) ** 2).sum(-1)
    iu = np.triu_indices(len(Z), k=1)
    med = float(np.median(np.sqrt(d2[iu]))) if len(iu[0]) else 1.0
    med = med if med > 0 else 1.0
    return [m * med for m in multipliers]


def _kernel_mean(X, Y, bandwidths, kernel: str) -> Tensor:
    if kernel == "linear":
        return tc.mean(tc.matmul(X, tc.transpose(Y)))
    d2 = squared_distances(X, Y)
    total = None
    for bw in bandwidths:
        k = tc.mean(tc.exp(tc.scale(d2, -1.0 / (2.0 * bw * bw))))
        total = k if total is None else tc.add(total, k)
    return total


def mmd(X, Y, bandwidths: Optional[Sequence[float]] = None, kernel: str = "gaussian") -> Tensor:
    """Biased (V-statistic) squared MMD with a Gaussian kernel mixture.

    ``k(x, y) = sum_b exp(-||x - y||^2 / (2 b^2))``. Bandwidths default to
    the median heuristic. ``kernel="linear"`` uses ``k(x, y) = x . y``.
    """
    X, Y = tc.as_tensor(X), tc.as_tensor(Y)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise DimensionError(f"mmd: feature matrices {X.shape} and {Y.shape} disagree")
    if X.shape[0] < 1 or Y.shape[0] < 1:
        raise DimensionError("mmd needs at least one sample per side")
    if kernel == "gaussian" and bandwidths is None:
        bandwidths = median_bandwidths(X.data, Y.data)
    if kernel == "gaussian" and any(b <= 0 for b in bandwidths):
        raise DimensionError(f"bandwidths must be positive: {list(bandwidths)}")
    kxx = _kernel_mean(X, X, bandwidths, kernel)
    kyy = _kernel_mean(Y, Y, bandwidths, kernel)
    # both cross orders, so swapping X and Y gives a bitwise-identical value
    cross = tc.add(_kernel_mean(X, Y, bandwidths, kernel), _kernel_mean(Y, X, bandwidths, kernel))
    value = tc.sub(tc.add(kxx, kyy), cross)
    return tc.maximum(value, 0.0)


@dataclass
class TransferLosses:
    total: Tensor
    classification: float
    mmd: float


def branch_features(block: MdcmBlock, batch):
    """Run ``block`` over a batch; returns ``(gap_features (B, D), outputs)``.

    ``batch`` is a ``(B, T, C)`` array or a list of ``(T_i, C)`` arrays.
    """
    if isinstance(batch, (list, tuple)):
        outs = [mdcm_forward(x, block) for x in batch]
        feats = tc.stack([o.features for o in outs], axis=0)
        return feats, outs
    out = mdcm_forward(batch, block)
    return out.features, [out]


def _mean_loss(outs, labels) -> Tensor:
    if len(outs) == 1 and labels.ndim == 2:
        return mdcm_loss(outs[0], labels)
    terms = [mdcm_loss(o, y) for o, y in zip(outs, labels)]
    total = terms[0]
    for t in terms[1:]:
        total = tc.add(total, t)
    return tc.scale(total, 1.0 / len(terms))


def transfer_training_step(source: MdcmBlock, source_batch, target: MdcmBlock, target_batch,
                           target_labels, lambda_mmd: float = 0.1,
                           bandwidths: Optional[Sequence[float]] = None) -> TransferLosses:
    """Target-branch loss: classification + ``lambda_mmd`` * MMD(source, target GAP features).

    The source branch runs without graph recording, so its parameters never
    receive gradients.
    """
    labels = np.asarray(target_labels, dtype=float)
    tgt_feats, outs = branch_features(target, target_batch)
    cls = _mean_loss(outs, labels)
    if lambda_mmd == 0:
        return TransferLosses(cls, float(cls.data), 0.0)
    with tc.no_grad():
        src_feats, _ = branch_features(source, source_batch)
    m = mmd(src_feats.data, tgt_feats, bandwidths)
    return TransferLosses(tc.add(cls, tc.scale(m, lambda_mmd)), float(cls.data), float(m.data))
