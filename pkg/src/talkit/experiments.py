"""Desk-scale experiments: weak-track ablation, cascade coverage,
progressive TBR refinement and MMD under a synthetic domain shift."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as tc
from .brm import BrmConfig
from .dataset import Dataset, VideoItem
from .evaluation import average_map
from .fileio import AnnotationRecord
from .lgte import LgteConfig
from .mgfn import MdcmBlock, MdcmConfig, mdcm_forward, mdcm_loss, normalize_cas
from .params import ParamStore
from .synth import SynthConfig, SynthDataset, gen_synth
from .tbr import Proposal, TbrConfig
from .train import (MgfnModel, MgfnVariant, OptimConfig, TcaNet, TcaTrainConfig, Trainer, WeakConfig,
                    jitter_proposals, localize_dataset, mean_tiou, train_mgfn, train_tcanet)
from .transfer import mmd

ABLATION_ORDER = ("simple_cas", "+mdcm", "+cascade", "+transfer", "+brm")
TEST_SEED_OFFSET = 10_000


def held_out(train: SynthDataset, seed: int, num_videos: Optional[int] = None) -> SynthDataset:
    """Test split from the same generator and class signatures."""
    cfg = replace(train.config, num_videos=num_videos or train.config.num_videos)
    return gen_synth(cfg, seed + TEST_SEED_OFFSET, signatures=train.signatures)


# ---------------------------------------------------------------------------
# weak-track ablation


def ablation_synth_config() -> SynthConfig:
    return SynthConfig(num_videos=200, num_classes=20, channels=32, length=(64, 64),
                       segment_length=(12, 24), min_gap=6, core_fraction=0.4,
                       periphery_gain=1.0, periphery_class=0.2)


@dataclass
class AblationConfig:
    synth: SynthConfig = field(default_factory=ablation_synth_config)
    test_videos: int = 200
    optim: OptimConfig = field(default_factory=lambda: OptimConfig("adam", 0.003, 25, 16))
    weak: WeakConfig = field(default_factory=lambda: WeakConfig(
        width=32, brm=BrmConfig(32), source_epochs=25, brm_epochs=40, brm_reg=0.01))


@dataclass
class AblationResult:
    seed: int
    average_map: Dict[str, float]
    accuracy: Dict[str, float]
    seconds: float

    @property
    def ordered(self) -> List[float]:
        return [self.average_map[k] for k in ABLATION_ORDER]

    @property
    def strictly_increasing(self) -> bool:
        v = self.ordered
        return all(b > a for a, b in zip(v, v[1:]))


def classification_accuracy(model: MgfnModel, data: SynthDataset) -> float:
    feats = np.stack([v.features for v in data.videos])
    with tc.no_grad():
        scores = mdcm_forward(feats, model.stage1).scores.data
    labels = data.labels()
    return float(np.mean(labels[np.arange(len(labels)), scores.argmax(axis=1)] > 0))


def run_ablation(seed: int, cfg: AblationConfig = AblationConfig()) -> AblationResult:
    """Train every configuration on one seed and score it on held-out videos.

    "+transfer" is read off the "+brm" model with thresholding in place of
    the BRM: the classifier is trained identically in both (same seed, and
    the BRM is fitted afterwards), so this skips one redundant run.
    """
    start = time.time()
    train = gen_synth(cfg.synth, seed)
    test = held_out(train, seed, cfg.test_videos)
    gts = test.ground_truth()
    C, K = cfg.synth.channels, cfg.synth.num_classes
    maps, accs = {}, {}
    for name, variant in MgfnVariant.ablation().items():
        if name == "+transfer":
            continue
        model = MgfnModel(C, K, variant, cfg.weak, seed)
        train_mgfn(model, train, cfg.optim, seed)
        acc = classification_accuracy(model, test)
        if name == "+brm":
            maps["+transfer"] = average_map(localize_dataset(model, test, use_brm=False), gts)[1]
            accs["+transfer"] = acc
        maps[name] = average_map(localize_dataset(model, test), gts)[1]
        accs[name] = acc
    return AblationResult(seed, maps, accs, time.time() - start)


# ---------------------------------------------------------------------------
# cascade coverage


@dataclass
class CoverageConfig:
    train_videos: int = 40
    test_videos: int = 24
    length: int = 32
    segment: int = 6
    strong: float = 4.0  # gain of the easy segment
    weak: float = 0.6    # gain of the hard segment, on separate channels
    width: int = 16
    optim: OptimConfig = field(default_factory=lambda: OptimConfig("adam", 0.01, 40, 8))


@dataclass
class CoverageResult:
    seed: int
    stage1_recall: List[float]
    cascade_recall: List[float]

    @property
    def mean_stage1(self) -> float:
        return float(np.mean(self.stage1_recall))

    @property
    def mean_cascade(self) -> float:
        return float(np.mean(self.cascade_recall))


def two_segment_videos(n: int, cfg: CoverageConfig, rng: np.random.Generator) -> Dataset:
    """Two classes, 8 channels. Each video holds one easy and one hard
    segment of its class, written on disjoint channel pairs."""
    T, L = cfg.length, cfg.segment
    videos = []
    for i in range(n):
        c = i % 2
        F = rng.normal(size=(T, 8))
        a, b = int(rng.integers(1, T // 2 - L + 1)), int(rng.integers(T // 2 + 2, T - L + 1))
        if rng.uniform() < 0.5:
            a, b = b, a
        F[a:a + L, 4 * c:4 * c + 2] += cfg.strong
        F[b:b + L, 4 * c + 2:4 * c + 4] += cfg.weak
        rec = AnnotationRecord(f"v{i:03d}", T, [(c, a, a + L), (c, b, b + L)])
        videos.append(VideoItem(rec.video_id, F, rec))
    return Dataset(["even", "odd"], videos)


def planted_recall(cas_logits: np.ndarray, planted: np.ndarray, k: int) -> float:
    """Share of planted snippets where the normalised CAS reaches half its max."""
    h = normalize_cas(cas_logits)[:, k]
    return float(np.mean(h[planted] >= 0.5 * h.max()))


def run_coverage_experiment(seed: int, cfg: CoverageConfig = CoverageConfig()) -> CoverageResult:
    """Recall of planted snippets from stage one alone and from the max-fused cascade."""
    rng = np.random.default_rng(seed)
    train = two_segment_videos(cfg.train_videos, cfg, rng)
    test = two_segment_videos(cfg.test_videos, cfg, rng)
    weak = Dataset(train.class_names, [VideoItem(v.video_id, v.features, v.record.weak(2))
                                       for v in train.videos])
    model = MgfnModel(8, 2, MgfnVariant((1,), cascade=True, transfer=False, brm=False),
                      WeakConfig(width=cfg.width), seed)
    train_mgfn(model, weak, cfg.optim, seed)
    first, fused = [], []
    for v in test.videos:
        k = v.record.segments[0][0]
        planted = np.zeros(cfg.length, dtype=bool)
        for _, s, e in v.record.segments:
            planted[int(s):int(e)] = True
        with tc.no_grad():
            cas, _ = model.classify(v.features, np.eye(2)[k])
            h1 = mdcm_forward(v.features, model.stage1).cas.data
        first.append(planted_recall(h1, planted, k))
        fused.append(planted_recall(cas.data, planted, k))
    return CoverageResult(seed, first, fused)


# ---------------------------------------------------------------------------
# supervised refinement


def tbr_synth_config() -> SynthConfig:
    return SynthConfig(num_videos=120, num_classes=5, channels=32, length=(64, 64),
                       segment_length=(8, 24), segments_per_video=(1, 2), snr=1.5)


@dataclass
class TbrExperimentConfig:
    synth: SynthConfig = field(default_factory=tbr_synth_config)
    test_videos: int = 100
    test_proposals_per_gt: int = 2
    jitter: float = 0.3
    lgte: Optional[LgteConfig] = field(default_factory=lambda: LgteConfig(32, groups=4, local_groups=2,
                                                                          window=9, layers=1))
    tbr: TbrConfig = field(default_factory=lambda: TbrConfig(32, hidden=32))
    stages: int = 2
    optim: OptimConfig = field(default_factory=lambda: OptimConfig("adam", 0.003, 20, 8))
    train: TcaTrainConfig = field(default_factory=TcaTrainConfig)


@dataclass
class TbrResult:
    seed: int
    before: float
    stages: List[float]
    num_proposals: int
    seconds: float


def run_tbr_experiment(seed: int, cfg: TbrExperimentConfig = TbrExperimentConfig()) -> TbrResult:
    """Mean tIoU of jittered test proposals before and after each stage."""
    start = time.time()
    train = gen_synth(cfg.synth, seed)
    test = held_out(train, seed, cfg.test_videos)
    model = TcaNet(cfg.lgte, cfg.tbr, cfg.stages, seed)
    train_tcanet(model, train, cfg.optim, replace(cfg.train, jitter=cfg.jitter), seed)
    rng = np.random.default_rng([seed, 99])
    inputs, refs = [], []
    for v in test.videos:
        gts = [(s, e) for _, s, e in v.record.segments]
        pairs = jitter_proposals(gts, cfg.jitter, rng, cfg.test_proposals_per_gt)
        inputs.append([p for p, _ in pairs])
        refs.append([gts[g] for _, g in pairs])
    flat_refs = [g for r in refs for g in r]
    before = mean_tiou([p for ps in inputs for p in ps], flat_refs)
    after = []
    for k in range(1, cfg.stages + 1):
        out = [p for v, ps in zip(test.videos, inputs) for p in model.refine(v.features, ps, k)]
        after.append(mean_tiou(out, flat_refs))
    return TbrResult(seed, before, after, len(flat_refs), time.time() - start)


# ---------------------------------------------------------------------------
# MMD under a constant domain shift


@dataclass
class DomainShiftConfig:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(
        num_videos=64, num_classes=4, channels=8, length=(24, 24), segment_length=(12, 20),
        segments_per_video=(1, 1), snr=2.0))
    bias: float = 1.0
    width: int = 16
    lambda_mmd: float = 1.0
    optim: OptimConfig = field(default_factory=lambda: OptimConfig("adam", 0.003, 30, 16))


@dataclass
class DomainShiftResult:
    seed: int
    gap_before: float
    gap_after: float
    gap_after_no_mmd: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.gap_after / self.gap_before


def _gap_features(block: MdcmBlock, X: np.ndarray) -> np.ndarray:
    with tc.no_grad():
        return mdcm_forward(X, block).features.data


def feature_mean_gap(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))


def run_domain_shift(seed: int, cfg: DomainShiftConfig = DomainShiftConfig()) -> DomainShiftResult:
    """Target features are the source features plus a constant bias.

    A source branch is fitted on clean data and frozen; a target branch,
    started from the source weights, is fitted on the biased copy with and
    without the MMD term. Reports the GAP feature-mean gap in each case.
    """
    data = gen_synth(cfg.synth, seed)
    X = np.stack([v.features for v in data.videos])
    Y = X + cfg.bias
    labels = data.labels()
    mcfg = MdcmConfig(cfg.synth.channels, cfg.synth.num_classes, cfg.width)
    rng = np.random.default_rng([seed, 3])

    src_store = ParamStore()
    source = MdcmBlock(mcfg, src_store, "source", rng)
    Trainer(src_store, cfg.optim, np.random.default_rng([seed, 4])).fit(
        len(X), lambda idx: mdcm_loss(mdcm_forward(X[idx], source), labels[idx]))
    src_feats = _gap_features(source, X)

    def fit_target(lambda_mmd: float) -> MdcmBlock:
        store = ParamStore()
        target = MdcmBlock(mcfg, store, "target", np.random.default_rng(0))
        store.load_state({"target" + k[len("source"):]: v for k, v in src_store.state().items()})
        order_rng = np.random.default_rng([seed, 5])

        def loss_fn(idx):
            out = mdcm_forward(Y[idx], target)
            loss = mdcm_loss(out, labels[idx])
            if lambda_mmd > 0:
                loss = tc.add(loss, tc.scale(mmd(src_feats[idx], out.features), lambda_mmd))
            return loss

        Trainer(store, cfg.optim, order_rng).fit(len(Y), loss_fn)
        return target

    with tc.no_grad():
        gap_before = feature_mean_gap(src_feats, _gap_features(source, Y))
    gap_mmd = feature_mean_gap(src_feats, _gap_features(fit_target(cfg.lambda_mmd), Y))
    gap_plain = feature_mean_gap(src_feats, _gap_features(fit_target(0.0), Y))
    return DomainShiftResult(seed, gap_before, gap_mmd, gap_plain)
