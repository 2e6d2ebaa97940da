"""In-memory video collections and the on-disk dataset layout.

A dataset directory holds::

    features/<video_id>.talx       untrimmed feature sequences
    clips/<clip_id>.talx           trimmed clips (optional)
    annotations_full.json          segments, for the supervised track
    annotations_weak.json          video-level labels, for the weak track
    annotations_clips.json         one label per trimmed clip (optional)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .errors import FormatError
from .fileio import AnnotationRecord, read_annotations, read_features

TRACKS = ("supervised", "weak")


@dataclass
class VideoItem:
    video_id: str
    features: np.ndarray
    record: AnnotationRecord


@dataclass
class ClipItem:
    clip_id: str
    features: np.ndarray
    label: int
    source: str


@dataclass
class Dataset:
    class_names: List[str]
    videos: List[VideoItem] = field(default_factory=list)
    clips: List[ClipItem] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def labels(self) -> np.ndarray:
        K = self.num_classes
        return np.array([v.record.weak(K).labels for v in self.videos], dtype=float).reshape(-1, K)

    def clip_labels(self) -> np.ndarray:
        out = np.zeros((len(self.clips), self.num_classes))
        for i, c in enumerate(self.clips):
            out[i, c.label] = 1.0
        return out

    def ground_truth(self):
        from .evaluation import GroundTruth
        return [GroundTruth(v.video_id, c, s, e) for v in self.videos for c, s, e in v.record.segments]

    def _subset(self, videos: List[VideoItem]) -> "Dataset":
        ids = {v.video_id for v in videos}
        return Dataset(self.class_names, videos, [c for c in self.clips if c.source in ids])

    def split(self, n_first: int) -> Tuple["Dataset", "Dataset"]:
        return self._subset(self.videos[:n_first]), self._subset(self.videos[n_first:])


def load_dataset(root, track: str = "supervised") -> Dataset:
    """Read a dataset directory; the weak track uses labels only."""
    if track not in TRACKS:
        raise FormatError(f"unknown track {track!r}; expected one of {TRACKS}")
    root = Path(root)
    name = "annotations_full.json" if track == "supervised" else "annotations_weak.json"
    records, class_names = read_annotations(root / name)
    data = Dataset(class_names)
    for rec in records:
        seq = read_features(root / "features" / f"{rec.video_id}.talx")
        if track == "weak":
            rec = rec.weak(len(class_names))
        data.videos.append(VideoItem(rec.video_id, seq.features, rec))
    clip_file = root / "annotations_clips.json"
    if clip_file.exists():
        clip_records, _ = read_annotations(clip_file)
        for rec in clip_records:
            hot = np.flatnonzero(rec.labels)
            if len(hot) != 1:
                raise FormatError(f"clip {rec.video_id}: needs exactly one label")
            seq = read_features(root / "clips" / f"{rec.video_id}.talx")
            source = rec.video_id.rsplit("_clip", 1)[0]
            data.clips.append(ClipItem(rec.video_id, seq.features, int(hot[0]), source))
    return data
