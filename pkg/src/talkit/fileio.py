"""On-disk formats: TALX1 feature files, proposal/detection text records,
annotation JSON and CAS matrices. All writes go through a temp file and an
atomic rename."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError

FEATURE_MAGIC = b"TALX1"
_FEATURE_HEADER = struct.Struct("<IIdI")


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# feature sequences


@dataclass
class FeatureSequence:
    """``T x C`` snippet features; ``T = floor(frames / snippet_stride)``."""

    features: np.ndarray
    frame_rate: float = 30.0
    snippet_stride: int = 16

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def seconds(self, snippet_index: float) -> float:
        return snippet_index * self.snippet_stride / self.frame_rate


def snippet_count(num_frames: int, snippet_stride: int) -> int:
    return num_frames // snippet_stride


def encode_features(seq: FeatureSequence) -> bytes:
    feats = np.ascontiguousarray(seq.features, dtype="<f8")
    if feats.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {feats.shape}")
    T, C = feats.shape
    header = _FEATURE_HEADER.pack(T, C, float(seq.frame_rate), int(seq.snippet_stride))
    return FEATURE_MAGIC + header + feats.tobytes()


def decode_features(blob: bytes) -> FeatureSequence:
    n_magic = len(FEATURE_MAGIC)
    if blob[:n_magic] != FEATURE_MAGIC:
        raise FormatError("not a TALX1 feature file (bad magic)")
    if len(blob) < n_magic + _FEATURE_HEADER.size:
        raise FormatError("truncated TALX1 header")
    T, C, rate, stride = _FEATURE_HEADER.unpack_from(blob, n_magic)
    start = n_magic + _FEATURE_HEADER.size
    expected = T * C * 8
    if len(blob) - start != expected:
        raise FormatError(f"TALX1 payload has {len(blob) - start} bytes, expected {expected}")
    feats = np.frombuffer(blob, dtype="<f8", count=T * C, offset=start).reshape(T, C)
    return FeatureSequence(feats.astype(np.float64), rate, stride)


def write_features(path, seq: FeatureSequence) -> None:
    atomic_write_bytes(path, encode_features(seq))


def read_features(path) -> FeatureSequence:
    with open(path, "rb") as fh:
        return decode_features(fh.read())


# ---------------------------------------------------------------------------
# annotations


@dataclass
class AnnotationRecord:
    video_id: str
    duration: float
    segments: List[Tuple[int, float, float]] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)
    trimmed: bool = False

    def weak(self, num_classes: int) -> "AnnotationRecord":
        """Video-level copy: multi-hot labels, no segments."""
        hot = [0] * num_classes
        for cls, _, _ in self.segments:
            hot[cls] = 1
        for cls, flag in enumerate(self.labels):
            if flag:
                hot[cls] = 1
        return AnnotationRecord(self.video_id, self.duration, [], hot, self.trimmed)

    def validate(self) -> None:
        for cls, s, e in self.segments:
            if not (0 <= s < e <= self.duration):
                raise FormatError(f"{self.video_id}: segment ({s}, {e}) outside [0, {self.duration}]")
        if self.segments and self.labels:
            raise FormatError(f"{self.video_id}: weak records carry no segments")


def write_annotations(path, records: Sequence[AnnotationRecord], class_names: Sequence[str]) -> None:
    doc = {"classes": list(class_names),
           "videos": [dict(asdict(r), segments=[list(s) for s in r.segments]) for r in records]}
    atomic_write_text(path, json.dumps(doc, indent=1))


def read_annotations(path) -> Tuple[List[AnnotationRecord], List[str]]:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid annotation JSON ({exc})") from None
    records = []
    for v in doc["videos"]:
        rec = AnnotationRecord(v["video_id"], float(v["duration"]),
                               [(int(c), float(s), float(e)) for c, s, e in v.get("segments", [])],
                               [int(x) for x in v.get("labels", [])], bool(v.get("trimmed", False)))
        rec.validate()
        records.append(rec)
    return records, list(doc.get("classes", []))


# ---------------------------------------------------------------------------
# proposal / detection records


def format_proposals(rows: Iterable[Tuple[str, float, float, float]]) -> str:
    return "".join(f"{vid},{s:.6f},{e:.6f},{score:.6f}\n" for vid, s, e, score in rows)


def parse_proposals(text: str) -> List[Tuple[str, float, float, float]]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"proposal line {lineno}: expected 4 fields, got {len(parts)}")
        rows.append((parts[0], float(parts[1]), float(parts[2]), float(parts[3])))
    return rows


def format_detections(rows: Iterable[Tuple[str, int, float, float, float]]) -> str:
    return "".join(f"{vid},{cls},{s:.6f},{e:.6f},{score:.6f}\n" for vid, cls, s, e, score in rows)


def parse_detections(text: str) -> List[Tuple[str, int, float, float, float]]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise FormatError(f"detection line {lineno}: expected 5 fields, got {len(parts)}")
        rows.append((parts[0], int(parts[1]), float(parts[2]), float(parts[3]), float(parts[4])))
    return rows


def format_cas(cas: np.ndarray, class_names: Optional[Sequence[str]] = None) -> str:
    cas = np.asarray(cas)
    names = list(class_names) if class_names is not None else [f"c{k}" for k in range(cas.shape[1])]
    lines = ["\t".join(names)]
    lines += ["\t".join(f"{v:.6f}" for v in row) for row in cas]
    return "\n".join(lines) + "\n"


def parse_cas(text: str) -> Tuple[List[str], np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    names = lines[0].split("\t")
    values = np.array([[float(x) for x in ln.split("\t")] for ln in lines[1:]])
    return names, values.reshape(-1, len(names))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True))
