"""Synthetic untrimmed-video benchmark with planted action segments.

Each class owns a feature signature: a shared "actionness" offset of 1 per
channel plus a zero-mean class-specific pattern of unit RMS. A video is
Gaussian noise with class signatures added (scaled by ``snr``) over boxcar
segments. Optionally each segment has a strong discriminative core and a
periphery whose shared and class-specific parts are scaled down separately;
a periphery that is plainly "action" but only weakly class-specific is what
makes plain CAS thresholding under-cover actions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .dataset import ClipItem, Dataset, VideoItem
from .errors import ConfigError
from .fileio import (AnnotationRecord, FeatureSequence, write_annotations, write_features,
                     write_json)


@dataclass
class SynthConfig:
    num_videos: int = 200
    num_classes: int = 20
    channels: int = 32
    length: Tuple[int, int] = (64, 64)
    segments_per_video: Tuple[int, int] = (1, 2)
    segment_length: Tuple[int, int] = (6, 20)
    classes_per_video: int = 1
    snr: float = 1.0
    noise: float = 1.0
    core_fraction: float = 1.0   # fraction of each segment at full strength
    periphery_gain: float = 1.0  # strength of the rest, relative to the core
    periphery_class: float = 1.0  # extra scale on the class-specific part in the periphery
    class_weight: float = 1.0    # scale of the class-specific part of each signature
    min_gap: int = 2
    frame_rate: float = 30.0
    snippet_stride: int = 16

    def validate(self) -> None:
        lo, hi = self.length
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad length range {self.length}")
        if self.segment_length[0] < 1 or self.segment_length[1] < self.segment_length[0]:
            raise ConfigError(f"bad segment length range {self.segment_length}")
        if self.segment_length[1] > lo:
            raise ConfigError("segments must fit in the shortest video")
        if not 1 <= self.classes_per_video <= self.num_classes:
            raise ConfigError("classes_per_video must lie in [1, num_classes]")
        if not 0.0 < self.core_fraction <= 1.0:
            raise ConfigError("core_fraction must lie in (0, 1]")


@dataclass
class SynthDataset(Dataset):
    config: SynthConfig = None
    signatures: np.ndarray = None

    def full_annotations(self) -> List[AnnotationRecord]:
        return [v.record for v in self.videos]

    def weak_annotations(self) -> List[AnnotationRecord]:
        return [v.record.weak(self.num_classes) for v in self.videos]

    def split(self, n_first: int) -> Tuple["SynthDataset", "SynthDataset"]:
        a, b = Dataset.split(self, n_first)
        return (SynthDataset(a.class_names, a.videos, a.clips, self.config, self.signatures),
                SynthDataset(b.class_names, b.videos, b.clips, self.config, self.signatures))

    def write(self, root) -> None:
        """Feature files, full/weak annotations and trimmed clips under ``root``."""
        root = Path(root)
        cfg = self.config
        for v in self.videos:
            write_features(root / "features" / f"{v.video_id}.talx",
                           FeatureSequence(v.features, cfg.frame_rate, cfg.snippet_stride))
        for c in self.clips:
            write_features(root / "clips" / f"{c.clip_id}.talx",
                           FeatureSequence(c.features, cfg.frame_rate, cfg.snippet_stride))
        write_annotations(root / "annotations_full.json", self.full_annotations(), self.class_names)
        write_annotations(root / "annotations_weak.json", self.weak_annotations(), self.class_names)
        clip_records = [AnnotationRecord(c.clip_id, float(len(c.features)), [],
                                         [int(k == c.label) for k in range(cfg.num_classes)], True)
                        for c in self.clips]
        write_annotations(root / "annotations_clips.json", clip_records, self.class_names)
        write_json(root / "synth_config.json", asdict(cfg))


def class_signatures(num_classes: int, channels: int, rng: np.random.Generator,
                     class_weight: float = 1.0) -> np.ndarray:
    g = rng.normal(size=(num_classes, channels))
    g -= g.mean(axis=1, keepdims=True)
    g /= np.sqrt((g ** 2).mean(axis=1, keepdims=True))
    return 1.0 + class_weight * g


def _place_segments(T: int, count: int, cfg: SynthConfig, rng: np.random.Generator):
    lo, hi = cfg.segment_length
    for _ in range(100):
        lens = rng.integers(lo, hi + 1, size=count)
        slack = T - lens.sum() - cfg.min_gap * (count - 1)
        if slack < 0:
            count = max(1, count - 1)
            continue
        gaps = np.sort(rng.integers(0, slack + 1, size=count))
        gaps = np.diff(np.concatenate([[0], gaps]))
        segs, cursor = [], 0
        for g, ln in zip(gaps, lens):
            cursor += int(g)
            segs.append((cursor, cursor + int(ln)))
            cursor += int(ln) + cfg.min_gap
        return segs
    raise ConfigError("could not place segments; video too short")


def _profile(length: int, cfg: SynthConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Per-snippet gains of the shared offset and of the class pattern."""
    shared = np.full(length, cfg.periphery_gain)
    specific = np.full(length, cfg.periphery_gain * cfg.periphery_class)
    core = max(1, int(round(cfg.core_fraction * length)))
    start = int(rng.integers(0, length - core + 1))
    shared[start:start + core] = 1.0
    specific[start:start + core] = 1.0
    return shared, specific


def gen_synth(cfg: SynthConfig, seed: int = 0, signatures: Optional[np.ndarray] = None) -> SynthDataset:
    """Deterministic synthetic dataset for ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    sig_rng = np.random.default_rng([seed, 7])
    sigs = signatures if signatures is not None else class_signatures(
        cfg.num_classes, cfg.channels, sig_rng, cfg.class_weight)
    names = [f"class{k:02d}" for k in range(cfg.num_classes)]
    data = SynthDataset(names, config=cfg, signatures=sigs)
    for vi in range(cfg.num_videos):
        vid = f"video{vi:04d}"
        T = int(rng.integers(cfg.length[0], cfg.length[1] + 1))
        classes = rng.choice(cfg.num_classes, size=cfg.classes_per_video, replace=False)
        n_seg = int(rng.integers(cfg.segments_per_video[0], cfg.segments_per_video[1] + 1))
        feats = cfg.noise * rng.normal(size=(T, cfg.channels))
        segments = []
        for si, (s, e) in enumerate(_place_segments(T, n_seg, cfg, rng)):
            cls = int(classes[si % len(classes)])
            shared, specific = _profile(e - s, cfg, rng)
            feats[s:e] += cfg.snr * (shared[:, None] + specific[:, None] * (sigs[cls] - 1.0)[None, :])
            segments.append((cls, float(s), float(e)))
        record = AnnotationRecord(vid, float(T), segments)
        data.videos.append(VideoItem(vid, feats, record))
        for ci, (cls, s, e) in enumerate(segments):
            data.clips.append(ClipItem(f"{vid}_clip{ci}", feats[int(s):int(e)].copy(), cls, vid))
    return data
