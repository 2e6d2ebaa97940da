"""Training and inference drivers for the supervised (LGTE + TBR) and
weakly supervised (cascaded MDCM + BRM + transfer) pipelines."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tc
from .brm import BrmConfig, BrmModel, brm_batch_loss, brm_forward_and_loss
from .evaluation import Detection, nms, tiou
from .lgte import LgteConfig, LgteStack
from .mgfn import (MdcmBlock, MdcmConfig, cascade_forward, erase_mask, mdcm_forward, mdcm_loss,
                   normalize_cas, predicted_labels)
from .params import Adam, ParamStore, sgd_step
from .dataset import Dataset
from .tbr import Proposal, TbrConfig, TbrStage, match_ground_truth, run_stage, tbr_loss, tbr_refine
from .transfer import mmd

log = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    optimizer: str = "sgd"  # "sgd" or "adam"
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 16
    clip_norm: float = 5.0


class Trainer:
    """Mini-batch loop over ``n`` items with a fixed-seed shuffle."""

    def __init__(self, store: ParamStore, opt: OptimConfig, rng: np.random.Generator):
        self.store = store
        self.opt = opt
        self.rng = rng
        self._adam = Adam(store, opt.lr, clip_norm=opt.clip_norm) if opt.optimizer == "adam" else None
        self.history: List[float] = []

    def step(self, loss: tc.Tensor) -> float:
        self.store.zero_grad()
        tc.backward(loss)
        if self._adam is not None:
            self._adam.step()
        else:
            sgd_step(self.store, self.opt.lr, self.opt.clip_norm)
        return float(loss.data)

    def fit(self, n: int, loss_fn: Callable[[np.ndarray], Optional[tc.Tensor]],
            epochs: Optional[int] = None) -> List[float]:
        epochs = self.opt.epochs if epochs is None else epochs
        for epoch in range(epochs):
            order = self.rng.permutation(n)
            total, count = 0.0, 0
            for start in range(0, n, self.opt.batch_size):
                loss = loss_fn(order[start:start + self.opt.batch_size])
                if loss is None:
                    continue
                total += self.step(loss)
                count += 1
            self.history.append(total / max(count, 1))
            log.debug("epoch %d loss %.5f", epoch, self.history[-1])
        return self.history


# ---------------------------------------------------------------------------
# supervised track


def jitter_proposals(gts: Sequence[Tuple[float, float]], ratio: float, rng: np.random.Generator,
                     per_gt: int = 1, length: Optional[float] = None) -> List[Tuple[Proposal, int]]:
    """Perturb each boundary by ``U(-ratio, ratio) * width``; returns ``(proposal, gt index)``."""
    out = []
    for gi, (s, e) in enumerate(gts):
        w = e - s
        for _ in range(per_gt):
            while True:
                ns = s + rng.uniform(-ratio, ratio) * w
                ne = e + rng.uniform(-ratio, ratio) * w
                if length is not None:
                    ns, ne = max(ns, 0.0), min(ne, float(length))
                if ne - ns > 1e-3:
                    break
            out.append((Proposal(ns, ne), gi))
    return out


class TcaNet:
    """LGTE encoder followed by ``stages`` TBR stages."""

    def __init__(self, lgte_cfg: Optional[LgteConfig], tbr_cfg: TbrConfig, stages: int = 2, seed: int = 0):
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.lgte = LgteStack(lgte_cfg, self.store, rng) if lgte_cfg is not None else None
        self.tbr_cfg = tbr_cfg
        self.stages = [TbrStage(tbr_cfg, self.store, f"tbr.stage{i}", rng) for i in range(stages)]

    def encode(self, F):
        return self.lgte(F) if self.lgte is not None else tc.as_tensor(F)

    def refine(self, F, proposals: Sequence[Proposal], num_stages: Optional[int] = None) -> List[Proposal]:
        with tc.no_grad():
            enc = self.encode(F)
        return tbr_refine(enc, proposals, self.stages, num_stages, length=np.asarray(F).shape[-2])


@dataclass
class TcaTrainConfig:
    jitter: float = 0.3
    proposals_per_gt: int = 4
    random_proposals: int = 1
    stage_train_jitter: float = 0.1  # extra noise on stage-k inputs during training


def _video_gts(video) -> List[Tuple[float, float]]:
    return [(s, e) for _, s, e in video.record.segments]


def train_tcanet(model: TcaNet, data: Dataset, opt: OptimConfig,
                 tcfg: TcaTrainConfig = TcaTrainConfig(), seed: int = 0) -> List[float]:
    rng = np.random.default_rng(seed)
    trainer = Trainer(model.store, opt, rng)
    videos = data.videos

    def loss_fn(idx):
        total, count = None, 0
        for i in idx:
            v = videos[i]
            T = v.features.shape[0]
            enc = model.encode(v.features)
            gts = _video_gts(v)
            pairs = jitter_proposals(gts, tcfg.jitter, rng, tcfg.proposals_per_gt, T)
            props = [p for p, _ in pairs]
            for _ in range(tcfg.random_proposals):
                a, b = np.sort(rng.uniform(0, T, size=2))
                if b - a > 1.0:
                    props.append(Proposal(a, b))
            for k, stage in enumerate(model.stages):
                matched = [match_ground_truth(p, gts) for p in props]
                out = run_stage(enc, props, stage)
                loss = tbr_loss(out, props, [gts[m] if m is not None else None for m in matched])
                total = loss if total is None else tc.add(total, loss)
                count += len(props)
                if k + 1 < len(model.stages):
                    props = _next_stage_inputs(out, T, tcfg.stage_train_jitter, rng)
        return None if total is None else tc.scale(total, 1.0 / count)

    return trainer.fit(len(videos), loss_fn)


def _next_stage_inputs(out, T, noise, rng) -> List[Proposal]:
    props = []
    for s, e in zip(out.s.data, out.e.data):
        w = max(e - s, 1e-3)
        s, e = s + rng.uniform(-noise, noise) * w, e + rng.uniform(-noise, noise) * w
        s, e = max(s, 0.0), min(e, float(T))
        if e - s < 1e-2:
            s, e = max(0.0, s - 0.5), min(float(T), e + 0.5)
        props.append(Proposal(s, e))
    return props


def mean_tiou(proposals: Sequence[Proposal], gts: Sequence[Tuple[float, float]]) -> float:
    return float(np.mean([tiou((p.s, p.e), g) for p, g in zip(proposals, gts)]))


# ---------------------------------------------------------------------------
# weakly supervised track


@dataclass
class MgfnVariant:
    """Which components of the weak pipeline are switched on."""

    rates: Tuple[int, ...] = (1, 2, 3, 5)
    cascade: bool = True
    transfer: bool = True
    brm: bool = True

    @classmethod
    def ablation(cls) -> Dict[str, "MgfnVariant"]:
        return {
            "simple_cas": cls((1,), False, False, False),
            "+mdcm": cls((1, 2, 3, 5), False, False, False),
            "+cascade": cls((1, 2, 3, 5), True, False, False),
            "+transfer": cls((1, 2, 3, 5), True, True, False),
            "+brm": cls((1, 2, 3, 5), True, True, True),
        }


@dataclass
class WeakConfig:
    width: int = 256
    theta: float = 0.5            # erasing threshold (fraction of per-class max)
    loc_threshold: float = 0.5    # CAS thresholding for localisation (fraction of max)
    class_threshold: float = 0.5
    top_k: int = 1
    lambda_mmd: float = 0.1
    brm: BrmConfig = None
    brm_epochs: int = 30
    brm_lr: Optional[float] = None  # defaults to the classifier learning rate
    brm_reg: float = 0.01
    brm_warmup: int = 1
    source_epochs: int = 30
    nms_threshold: float = 0.5
    min_segment: float = 1.0
    brm_input: str = "features"  # or "encoded": features plus stage-one branch features

    def brm_config(self, channels: int) -> BrmConfig:
        return self.brm if self.brm is not None else BrmConfig(channels)


class MgfnModel:
    """Weak-track model: one or two MDCM stages, optional BRM and trimmed branch."""

    def __init__(self, channels: int, num_classes: int, variant: MgfnVariant, wcfg: WeakConfig,
                 seed: int = 0):
        self.variant = variant
        self.wcfg = wcfg
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        mcfg = MdcmConfig(channels, num_classes, wcfg.width, rates=variant.rates)
        self.mdcm_cfg = mcfg
        self.stage1 = MdcmBlock(mcfg, self.store, "mgfn.stage1", rng)
        self.stage2 = MdcmBlock(mcfg, self.store, "mgfn.stage2", rng) if variant.cascade else None
        self.source_store = ParamStore()
        self.source = (MdcmBlock(mcfg, self.source_store, "source", rng)
                       if variant.transfer else None)
        self.brm_store = ParamStore()
        brm_channels = channels + (len(variant.rates) * wcfg.width if wcfg.brm_input == "encoded" else 0)
        # own stream, so the BRM init does not depend on which classifier parts exist
        self.brm = (BrmModel(replace(wcfg.brm_config(brm_channels), in_channels=brm_channels),
                             self.brm_store, np.random.default_rng([seed, 3])) if variant.brm else None)

    def brm_features(self, F) -> np.ndarray:
        """BRM input: raw features, optionally with the stage-one branch features appended."""
        F = np.asarray(F, dtype=float)
        if self.wcfg.brm_input == "features":
            return F
        with tc.no_grad():
            enc = mdcm_forward(F, self.stage1).encoded.data
        return np.concatenate([F, enc], axis=-1)

    def classify(self, F, labels=None):
        """``(cas_logits, video_scores)``; erasing uses ``labels`` or predictions."""
        first = mdcm_forward(F, self.stage1)
        if self.stage2 is None:
            return first.cas, first.scores
        if labels is None:
            labels = predicted_labels(first.scores.data, self.wcfg.class_threshold, self.wcfg.top_k)
        out = cascade_forward(F, self.stage1, self.stage2, labels, self.wcfg.theta)
        return out.cas, first.scores


def _batch(videos, idx) -> np.ndarray:
    return np.stack([videos[i].features for i in idx])


def _bucket_clips(clips) -> Dict[int, List[int]]:
    buckets: Dict[int, List[int]] = {}
    for i, c in enumerate(clips):
        buckets.setdefault(len(c.features), []).append(i)
    return buckets


def train_source_branch(model: MgfnModel, data: Dataset, opt: OptimConfig, seed: int) -> None:
    """Fit the trimmed branch on clips (bucketed by length so each batch stacks)."""
    rng = np.random.default_rng([seed, 1])
    trainer = Trainer(model.source_store, opt, rng)
    labels = data.clip_labels()
    groups = [np.array(ix) for ix in _bucket_clips(data.clips).values()]
    batches = [g[i:i + opt.batch_size] for g in groups for i in range(0, len(g), opt.batch_size)]

    def loss_fn(bi):
        idx = batches[bi[0]]
        feats = np.stack([data.clips[i].features for i in idx])
        return mdcm_loss(mdcm_forward(feats, model.source), labels[idx])

    trainer.opt = replace(opt, batch_size=1)
    trainer.fit(len(batches), loss_fn, epochs=model.wcfg.source_epochs)


def _source_features(model: MgfnModel, data: Dataset) -> np.ndarray:
    with tc.no_grad():
        feats = [mdcm_forward(np.stack([data.clips[i].features for i in ix]), model.source).features.data
                 for ix in _bucket_clips(data.clips).values()]
    return np.concatenate(feats)


def train_mgfn(model: MgfnModel, data: Dataset, opt: OptimConfig, seed: int = 0) -> Dict[str, List[float]]:
    """Train the classification block(s), then the BRM on the resulting CAS."""
    rng = np.random.default_rng(seed)
    history: Dict[str, List[float]] = {}
    videos = data.videos
    labels = data.labels()
    src_feats = None
    if model.source is not None:
        train_source_branch(model, data, opt, seed)
        # target starts from the converged trimmed branch
        state = model.source_store.state()
        for blk in (model.stage1, model.stage2):
            if blk is None:
                continue
            for name in model.store.subset(blk.prefix + "."):
                model.store[name].data = state["source." + name[len(blk.prefix) + 1:]].copy()
        src_feats = _source_features(model, data)

    trainer = Trainer(model.store, opt, rng)

    def cls_loss(idx):
        F = _batch(videos, idx)
        y = labels[idx]
        first = mdcm_forward(F, model.stage1)
        loss = mdcm_loss(first, y)
        if model.stage2 is not None:
            keep = ~erase_mask(first.normalized, y, model.wcfg.theta)
            erased = tc.mul(F, keep[..., None].astype(float))
            loss = tc.add(loss, mdcm_loss(mdcm_forward(erased, model.stage2), y))
        if src_feats is not None and model.wcfg.lambda_mmd > 0:
            pick = rng.choice(len(src_feats), size=min(len(src_feats), 2 * len(idx)), replace=False)
            loss = tc.add(loss, tc.scale(mmd(src_feats[pick], first.features), model.wcfg.lambda_mmd))
        return loss

    history["classification"] = trainer.fit(len(videos), cls_loss)

    if model.brm is not None:
        history["brm"] = train_brm(model, data, opt, seed)
    return history


def train_brm(model: MgfnModel, data: Dataset, opt: OptimConfig, seed: int = 0) -> List[float]:
    """Fit the BRM against the trained classifier's CAS (labels drive the erasing)."""
    videos = data.videos
    labels = data.labels()
    with tc.no_grad():
        cas_norm = np.concatenate([
            normalize_cas(model.classify(_batch(videos, idx), labels[idx])[0].data)
            for idx in np.array_split(np.arange(len(videos)), max(1, len(videos) // 32))])
    brm_opt = replace(opt, lr=model.wcfg.brm_lr or opt.lr)
    trainer = Trainer(model.brm_store, brm_opt, np.random.default_rng([seed, 2]))
    steps = {"n": 0}
    steps_per_epoch = max(1, -(-len(videos) // opt.batch_size))

    def brm_loss(idx):
        epoch = steps["n"] // steps_per_epoch
        steps["n"] += 1
        return brm_batch_loss(model.brm_features(_batch(videos, idx)), cas_norm[idx], labels[idx],
                              model.brm, drop_positive=epoch >= model.wcfg.brm_warmup,
                              reg=model.wcfg.brm_reg)

    return trainer.fit(len(videos), brm_loss, epochs=model.wcfg.brm_epochs)


def threshold_segments(cas_k: np.ndarray, threshold: float, min_length: float = 1.0):
    """Maximal runs where ``cas_k >= threshold``, as ``(s, e)`` snippet bounds."""
    above = np.concatenate([[False], cas_k >= threshold, [False]])
    edges = np.flatnonzero(np.diff(above.astype(int)))
    return [(float(s), float(e)) for s, e in zip(edges[::2], edges[1::2]) if e - s >= min_length]


def localize_video(model: MgfnModel, F: np.ndarray, video_id: str, use_brm: bool = True) -> List[Detection]:
    """Detections for one video: BRM anchors if present (and ``use_brm``), else CAS thresholding."""
    w = model.wcfg
    with tc.no_grad():
        cas_logits, scores = model.classify(F[None])
    cas = normalize_cas(cas_logits.data[0])
    scores = scores.data[0]
    labels = predicted_labels(scores, w.class_threshold, w.top_k)
    dets: List[Detection] = []
    if model.brm is not None and use_brm:
        with tc.no_grad():
            dets, _ = brm_forward_and_loss(model.brm_features(F), cas, labels, model.brm, class_scores=scores,
                                           video_id=video_id)
    else:
        for k in np.flatnonzero(labels):
            ck = cas[:, k]
            for s, e in threshold_segments(ck, w.loc_threshold * ck.max(), w.min_segment):
                inner = ck[int(s):int(e)].mean()
                dets.append(Detection(video_id, int(k), s, e, float(inner * scores[k])))
    return nms(dets, w.nms_threshold)


def localize_dataset(model: MgfnModel, data: Dataset, use_brm: bool = True) -> List[Detection]:
    out: List[Detection] = []
    for v in data.videos:
        out.extend(localize_video(model, v.features, v.video_id, use_brm))
    return out
