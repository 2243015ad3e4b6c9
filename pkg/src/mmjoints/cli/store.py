"""On-disk layout of a run directory and lossless dataset/report serialization."""

from __future__ import annotations

import hashlib
import json
import os
from collections import Counter

import numpy as np

from ..core import N_JOINTS
from ..nn import CheckpointError, atomic_write_text, dumps_checkpoint, loads_checkpoint
from ..simulator import SPLIT_SCALES
from .config import ConfigError, MissingDependencyError

DATASET_SCHEMA = "mmjoints-dataset/1"
ENRICHED_SCHEMA = "mmjoints-enriched/1"
RECORD_FIELDS = ("frame_id", "timestamp", "points", "gt_pose", "activity", "clip_id", "split", "scale")


def stage_hash(*parts) -> str:
    """Hash of a stage's own config sections chained with its prerequisites' hashes."""
    text = json.dumps(parts, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _jsonable(v):
    if isinstance(v, dict):
        return {str(getattr(k, "value", k)): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def _line(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


class RunDirectory:
    """Paths and typed readers/writers under an output directory."""

    def __init__(self, root):
        self.root = os.path.abspath(os.fspath(root))

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    # -- generic -------------------------------------------------------------
    def write_text(self, rel, text):
        try:
            atomic_write_text(self.path(rel), text)
        except OSError as exc:
            raise ConfigError(f"cannot write {self.path(rel)}: {exc}") from exc

    def write_json(self, rel, obj):
        self.write_text(rel, dump_json(obj))

    def read_json(self, rel, what=None):
        p = self.path(rel)
        if not os.path.exists(p):
            raise MissingDependencyError(f"missing {what or rel}: {p}")
        with open(p, encoding="utf-8") as fh:
            return json.load(fh)

    def exists(self, rel):
        return os.path.exists(self.path(rel))

    # -- dataset -------------------------------------------------------------
    def write_dataset(self, records, header: dict):
        lines = [_line({"schema": DATASET_SCHEMA, **header})]
        for r in records:
            lines.append(_line({
                "frame_id": int(r["frame_id"]),
                "timestamp": float(r["timestamp"]),
                "points": np.asarray(r["points"], dtype=float).tolist(),
                "gt_pose": np.asarray(r["gt_pose"], dtype=float).tolist(),
                "activity": r["activity"],
                "clip_id": r["clip_id"],
                "split": r["split"],
                "scale": float(r["scale"]),
            }))
        self.write_text("dataset/records.ndjson", "\n".join(lines) + "\n")
        self.write_json("dataset/manifest.json", {**header, **dataset_manifest(records)})

    def read_dataset(self):
        """``(header, records)`` with arrays restored; validates every record."""
        p = self.path("dataset/records.ndjson")
        if not os.path.exists(p):
            raise MissingDependencyError(f"missing dataset (run `mmjoints simulate` first): {p}")
        with open(p, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("schema") != DATASET_SCHEMA:
                raise ConfigError(f"{p} is not a {DATASET_SCHEMA} file")
            records = [parse_record(json.loads(line), n) for n, line in enumerate(fh, start=2) if line.strip()]
        clips = {}
        for r in records:
            if clips.setdefault(r["clip_id"], r["split"]) != r["split"]:
                raise ConfigError(f"clip {r['clip_id']} appears in more than one split")
        return header, records

    # -- checkpoints ---------------------------------------------------------
    def checkpoint_path(self, name):
        return self.path("checkpoints", f"{name}.json")

    def save_checkpoint(self, name, obj, meta):
        self.write_text(os.path.join("checkpoints", f"{name}.json"), dumps_checkpoint(obj, meta))

    def checkpoint_meta(self, name):
        """Metadata of a checkpoint without decoding its state, or ``None`` if absent."""
        p = self.checkpoint_path(name)
        if not os.path.exists(p):
            return None
        with open(p, encoding="utf-8") as fh:
            return json.load(fh).get("meta")

    def load_checkpoint(self, name):
        p = self.checkpoint_path(name)
        if not os.path.exists(p):
            raise MissingDependencyError(f"missing checkpoint for stage {name!r}: {p}")
        with open(p, encoding="utf-8") as fh:
            try:
                return loads_checkpoint(fh.read())
            except (CheckpointError, ValueError, KeyError) as exc:
                raise ConfigError(f"corrupt checkpoint {p}: {exc}") from exc

    # -- enriched poses ------------------------------------------------------
    def write_enriched(self, rel, header, rows):
        lines = [_line({"schema": ENRICHED_SCHEMA, **header})] + [_line(_jsonable(r)) for r in rows]
        self.write_text(rel, "\n".join(lines) + "\n")

    def read_enriched(self, rel, what=None):
        p = self.path(rel)
        if not os.path.exists(p):
            raise MissingDependencyError(f"missing {what or rel} (run `mmjoints describe` first): {p}")
        with open(p, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            rows = [json.loads(line) for line in fh if line.strip()]
        return header, rows


def parse_record(raw: dict, where=0) -> dict:
    missing = [k for k in RECORD_FIELDS if k not in raw]
    if missing:
        raise ConfigError(f"record {where}: missing fields {missing}")
    points = np.asarray(raw["points"], dtype=float).reshape(-1, 5) if raw["points"] else np.zeros((0, 5))
    gt = np.asarray(raw["gt_pose"], dtype=float)
    if gt.shape != (N_JOINTS, 3):
        raise ConfigError(f"record {where}: gt_pose must be {N_JOINTS}x3")
    if raw["split"] not in SPLIT_SCALES:
        raise ConfigError(f"record {where}: unknown split {raw['split']!r}")
    return {"frame_id": int(raw["frame_id"]), "timestamp": float(raw["timestamp"]), "points": points, "gt_pose": gt,
            "activity": str(raw["activity"]), "clip_id": raw["clip_id"], "split": raw["split"],
            "scale": float(raw["scale"])}


def dataset_manifest(records) -> dict:
    frames = Counter((r["split"], r["activity"]) for r in records)
    clips = {}
    for r in records:
        clips.setdefault(r["clip_id"], (r["split"], r["activity"]))
    clip_counts = Counter(clips.values())
    per_split = {}
    for split in SPLIT_SCALES:
        acts = sorted({a for s, a in frames if s == split})
        per_split[split] = {
            "frames": sum(n for (s, _), n in frames.items() if s == split),
            "clips": sum(n for (s, _), n in clip_counts.items() if s == split),
            "activities": {a: {"frames": frames[(split, a)], "clips": clip_counts[(split, a)]} for a in acts},
        }
    return {"n_frames": len(records), "n_clips": len(clips), "splits": per_split}
