"""Glue between files on disk, the run configuration and the models.

Checkpoints are a TALF1 parameter file plus a JSON sidecar (``<path>.json``)
holding the run configuration and the data shape needed to rebuild the
model before loading its weights.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tc
from .config import RunConfig
from .dataset import Dataset, load_dataset
from .errors import FormatError
from .evaluation import DEFAULT_THRESHOLDS, Detection, GroundTruth, average_map, average_recall
from .fileio import (atomic_write_text, format_cas, format_detections, format_proposals,
                     parse_detections, parse_proposals, read_annotations, read_features, write_json)
from .mgfn import mdcm_forward, normalize_cas
from .params import ParamStore, load_checkpoint, save_checkpoint
from .synth import gen_synth
from .tbr import Proposal
from .train import MgfnModel, TcaNet, localize_video, train_mgfn, train_tcanet

log = logging.getLogger(__name__)

KINDS = ("tcanet", "mgfn")


# ---------------------------------------------------------------------------
# checkpoints


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def mgfn_state(model: MgfnModel) -> Dict[str, np.ndarray]:
    state = model.store.state()
    state.update(model.source_store.state())
    state.update(model.brm_store.state())
    return state


def load_mgfn_state(model: MgfnModel, state: Dict[str, np.ndarray]) -> None:
    merged = ParamStore().merge(model.store).merge(model.source_store).merge(model.brm_store)
    merged.load_state(state, strict=True)


def save_model(path, model, cfg: RunConfig, meta: Dict) -> None:
    kind = "tcanet" if isinstance(model, TcaNet) else "mgfn"
    state = model.store.state() if kind == "tcanet" else mgfn_state(model)
    save_checkpoint(path, state)
    write_json(_sidecar(path), {"kind": kind, "meta": meta, "config": cfg.to_dict()})


def build_model(kind: str, cfg: RunConfig, meta: Dict):
    C = int(meta["channels"])
    if kind == "tcanet":
        return TcaNet(cfg.lgte_config(C), cfg.tbr_config(C), cfg.tbr.stages, cfg.seed)
    if kind == "mgfn":
        return MgfnModel(C, int(meta["num_classes"]), cfg.variant(), cfg.weak_config(C), cfg.seed)
    raise FormatError(f"unknown model kind {kind!r}")


def load_model(path, expect: Optional[str] = None):
    """``(model, config, meta)`` from a checkpoint and its sidecar."""
    side = _sidecar(path)
    if not side.exists():
        raise FormatError(f"missing checkpoint sidecar {side}")
    try:
        info = json.loads(side.read_text())
        kind, meta = info["kind"], info["meta"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{side}: malformed sidecar ({exc})") from None
    if expect is not None and kind != expect:
        raise FormatError(f"{path} holds a {kind} model, expected {expect}")
    cfg = RunConfig.from_dict(info["config"])
    model = build_model(kind, cfg, meta)
    state = load_checkpoint(path)
    if kind == "tcanet":
        model.store.load_state(state, strict=True)
    else:
        load_mgfn_state(model, state)
    return model, cfg, meta


# ---------------------------------------------------------------------------
# commands


def _meta(data: Dataset) -> Dict:
    if not data.videos:
        raise FormatError("dataset has no videos")
    return {"channels": int(data.videos[0].features.shape[1]), "num_classes": data.num_classes,
            "class_names": list(data.class_names)}


def generate(out, cfg: RunConfig) -> Dataset:
    data = gen_synth(cfg.synth, cfg.seed)
    data.write(out)
    return data


def train_supervised(data_dir, out, cfg: RunConfig) -> TcaNet:
    data = load_dataset(data_dir, "supervised")
    meta = _meta(data)
    model = build_model("tcanet", cfg, meta)
    history = train_tcanet(model, data, cfg.optim, cfg.tca_train_config(), cfg.seed)
    log.info("train-tcanet final loss %.5f", history[-1] if history else float("nan"))
    save_model(out, model, cfg, meta)
    return model


def train_weak(data_dir, out, cfg: RunConfig) -> MgfnModel:
    data = load_dataset(data_dir, "weak")
    meta = _meta(data)
    model = build_model("mgfn", cfg, meta)
    history = train_mgfn(model, data, cfg.optim, cfg.seed)
    for name, values in history.items():
        log.info("train-mgfn %s final loss %.5f", name, values[-1] if values else float("nan"))
    save_model(out, model, cfg, meta)
    return model


def _features(data_dir, video_id: str) -> np.ndarray:
    return read_features(Path(data_dir) / "features" / f"{video_id}.talx").features


def refine_file(checkpoint, data_dir, proposals_path, out, stages: Optional[int] = None) -> List[Tuple]:
    model, cfg, _ = load_model(checkpoint, "tcanet")
    rows = parse_proposals(Path(proposals_path).read_text())
    by_video: Dict[str, List[int]] = {}
    for i, row in enumerate(rows):
        by_video.setdefault(row[0], []).append(i)
    result: List[Optional[Tuple]] = [None] * len(rows)
    for vid, idx in by_video.items():
        F = _features(data_dir, vid)
        props = [Proposal(rows[i][1], rows[i][2], rows[i][3]) for i in idx]
        for i, p in zip(idx, model.refine(F, props, stages)):
            result[i] = (vid, p.s, p.e, p.score)
    atomic_write_text(out, format_proposals(result))
    return result


def _video_ids(data_dir) -> List[str]:
    ids = sorted(p.stem for p in (Path(data_dir) / "features").glob("*.talx"))
    if not ids:
        raise FormatError(f"no feature files under {Path(data_dir) / 'features'}")
    return ids


def localize_dir(checkpoint, data_dir, out) -> List[Detection]:
    model, _, _ = load_model(checkpoint, "mgfn")
    dets: List[Detection] = []
    for vid in _video_ids(data_dir):
        dets.extend(localize_video(model, _features(data_dir, vid), vid))
    atomic_write_text(out, format_detections(dets))
    return dets


def evaluate_files(detections_path, annotations_path,
                   thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> Dict:
    """Metric records for a detection (5-column) or proposal (4-column) file."""
    records, class_names = read_annotations(annotations_path)
    gts = [GroundTruth(r.video_id, c, s, e) for r in records for c, s, e in r.segments]
    text = Path(detections_path).read_text()
    first = next((ln for ln in text.splitlines() if ln.strip()), "")
    thresholds = list(thresholds)
    if first and len(first.split(",")) == 4:
        props = parse_proposals(text)
        recall = average_recall([Detection(v, 0, s, e, sc) for v, s, e, sc in props],
                                [g._replace(label=0) for g in gts], thresholds=thresholds)
        return {"kind": "proposals", "thresholds": thresholds, "average_recall": recall}
    dets = [Detection(*row) for row in parse_detections(text)]
    per, avg = average_map(dets, gts, thresholds)
    return {"kind": "detections", "thresholds": thresholds, "map": [float(x) for x in per],
            "average_map": float(avg), "classes": class_names}


def format_metrics(metrics: Dict) -> str:
    if metrics["kind"] == "proposals":
        return f"average recall@100  {metrics['average_recall']:.4f}\n"
    lines = ["tIoU    mAP"]
    for t, m in zip(metrics["thresholds"], metrics["map"]):
        lines.append(f"{t:4.2f}  {m:7.4f}")
    lines.append(f"average mAP {metrics['average_map']:.4f}")
    return "\n".join(lines) + "\n"


def export_cas(checkpoint, data_dir, out) -> List[Path]:
    """Per-video CAS matrices: the plain branch, the fused first stage, and the
    cascade output when the model has one (all sigmoid-normalised)."""
    model, _, meta = load_model(checkpoint, "mgfn")
    names = meta.get("class_names")
    out = Path(out)
    written = []
    for vid in _video_ids(data_dir):
        F = _features(data_dir, vid)
        with tc.no_grad():
            first = mdcm_forward(F, model.stage1)
            views = {"plain": first.branches[0].data, "multi_dilated": first.cas.data}
            if model.stage2 is not None:
                views["cascade"] = model.classify(F)[0].data
        for view, logits in views.items():
            path = out / f"{vid}.{view}.tsv"
            atomic_write_text(path, format_cas(normalize_cas(logits), names))
            written.append(path)
    return written
