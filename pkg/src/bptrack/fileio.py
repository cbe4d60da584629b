"""Scene, tracks and run-configuration file formats.

Scene and tracks files are human-diffable JSON with a format/version header;
feature maps live in a binary sidecar (magic, dims, row-major float32) so the
text files stay small. Readers reject newer format versions.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, FormatVersionMismatch, SchemaMismatch
from .measurement import Measurement
from .neural import NetMeta
from .numerics import UTParams
from .simulator import ClassSpec, Frame, GtObject, Scene, ScenarioConfig
from .tracker import TrackRecord, TrackerConfig
from .training import TrainConfig

SCENE_FORMAT = "bptrack-scene"
TRACKS_FORMAT = "bptrack-tracks"
SCENE_VERSION = 1
TRACKS_VERSION = 1
FMAP_MAGIC = b"BPFM"
FMAP_VERSION = 1


def _round_floats(value):
    if isinstance(value, float):
        return value
    if isinstance(value, (list, tuple)):
        return [_round_floats(v) for v in value]
    return value


def _json_dump(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _json_load(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"{path}: not valid JSON ({exc})") from exc


def _check_header(doc, path, fmt, version):
    if doc.get("format") != fmt:
        raise SchemaMismatch(f"{path}: expected format {fmt!r}, got {doc.get('format')!r}")
    got = doc.get("version")
    if not isinstance(got, int) or got > version:
        raise FormatVersionMismatch(f"{path}: version {got} not supported (max {version})")


# ---------------------------------------------------------------------------
# configuration


def _reject_unknown(section: str, data: dict, cls):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigInvalid(f"unknown key {section}.{key}")


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["region"] = list(cfg.region)
    out["lanes"] = list(cfg.lanes)
    out["classes"] = [spec.to_dict() for spec in cfg.classes]
    return out


def scenario_from_dict(data: dict) -> ScenarioConfig:
    _reject_unknown("scenario", data, ScenarioConfig)
    kwargs = dict(data)
    if "region" in kwargs:
        kwargs["region"] = tuple(kwargs["region"])
    if "lanes" in kwargs:
        kwargs["lanes"] = tuple(kwargs["lanes"])
    if "classes" in kwargs:
        specs = []
        for entry in kwargs["classes"]:
            _reject_unknown("scenario.classes", entry, ClassSpec)
            specs.append(ClassSpec(**entry))
        kwargs["classes"] = tuple(specs)
    try:
        return ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ConfigInvalid(f"scenario: {exc}") from exc


def tracker_kwargs_from_dict(data: dict) -> dict:
    _reject_unknown("tracker", data, TrackerConfig)
    kwargs = dict(data)
    if "ut" in kwargs:
        _reject_unknown("tracker.ut", kwargs["ut"], UTParams)
        kwargs["ut"] = UTParams(**kwargs["ut"])
    for key in ("region", "sigma_r_diag"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return kwargs


def training_from_dict(data: dict) -> TrainConfig:
    _reject_unknown("training", data, TrainConfig)
    return TrainConfig(**data)


def network_meta_from_dict(data: dict) -> NetMeta:
    _reject_unknown("network", data, NetMeta)
    return NetMeta(**data)


@dataclass
class RunConfig:
    """Merged configuration for the command-line pipeline."""

    scenario: ScenarioConfig
    tracker: dict
    training: TrainConfig
    network: dict

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        data = _json_load(path) if path else {}
        if not isinstance(data, dict):
            raise ConfigInvalid(f"{path}: top level must be an object")
        for key in data:
            if key not in ("scenario", "tracker", "training", "network"):
                raise ConfigInvalid(f"unknown config section {key!r}")
        return cls(
            scenario=scenario_from_dict(data.get("scenario", {})),
            tracker=tracker_kwargs_from_dict(data.get("tracker", {})),
            training=training_from_dict(data.get("training", {})),
            network=data.get("network", {}),
        )

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(ScenarioConfig(), {}, TrainConfig(), {})


# ---------------------------------------------------------------------------
# feature-map sidecar


def _fmap_path(scene_path) -> Path:
    return Path(str(scene_path) + ".fmaps")


def save_feature_maps(maps, path):
    maps = [np.asarray(m, dtype="<f4") for m in maps]
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<I", FMAP_VERSION))
        if maps:
            g0, g1, d = maps[0].shape
        else:
            g0 = g1 = d = 0
        fh.write(struct.pack("<IIII", len(maps), g0, g1, d))
        for m in maps:
            if m.shape != (g0, g1, d):
                raise SchemaMismatch("feature maps in one scene must share a shape")
            fh.write(m.tobytes())


def load_feature_maps(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FMAP_MAGIC:
            raise FormatVersionMismatch(f"{path}: bad feature-map magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version > FMAP_VERSION:
            raise FormatVersionMismatch(f"{path}: feature-map version {version}")
        n, g0, g1, d = struct.unpack("<IIII", fh.read(16))
        maps = []
        count = g0 * g1 * d
        for i in range(n):
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise FormatVersionMismatch(f"{path}: truncated feature maps")
            maps.append(np.frombuffer(raw, dtype="<f4").reshape(g0, g1, d))
        return maps


# ---------------------------------------------------------------------------
# scenes


def save_scene(scene: Scene, path):
    path = Path(path)
    fmap_file = _fmap_path(path)
    frames = []
    for frame in scene.frames:
        frames.append({
            "k": frame.k,
            "gt": [
                {
                    "id": obj.track_id,
                    "x": [float(v) for v in obj.state],
                    "box": [float(v) for v in obj.box],
                    "class_id": obj.class_id,
                }
                for obj in frame.gt
            ],
            "meas": [
                {
                    "z": [float(v) for v in m.z],
                    "score": float(m.score),
                    "box": [float(v) for v in m.box],
                    "class_id": m.class_id,
                }
                for m in frame.measurements
            ],
        })
    doc = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "seed": scene.seed,
        "config": scenario_to_dict(scene.config),
        "feature_maps": fmap_file.name,
        "frames": frames,
    }
    save_feature_maps([f.feature_map for f in scene.frames], fmap_file)
    _json_dump(doc, path)


def load_scene(path) -> Scene:
    path = Path(path)
    doc = _json_load(path)
    _check_header(doc, path, SCENE_FORMAT, SCENE_VERSION)
    try:
        cfg = scenario_from_dict(doc["config"])
        maps = load_feature_maps(path.parent / doc["feature_maps"])
        frames = []
        for i, entry in enumerate(doc["frames"]):
            gt = [
                GtObject(o["id"], np.array(o["x"], dtype=float),
                         np.array(o["box"], dtype=float), o["class_id"])
                for o in entry["gt"]
            ]
            meas = [
                Measurement(np.array(m["z"], dtype=float), m["score"],
                            np.array(m["box"], dtype=float), m["class_id"])
                for m in entry["meas"]
            ]
            fmap = maps[i] if i < len(maps) else np.zeros((cfg.grid_size, cfg.grid_size, cfg.map_channels), dtype=np.float32)
            frames.append(Frame(entry["k"], gt, meas, fmap))
        return Scene(cfg, doc["seed"], frames)
    except KeyError as exc:
        raise SchemaMismatch(f"{path}: missing scene field {exc}") from exc


# ---------------------------------------------------------------------------
# tracks


def save_tracks(per_frame_records, path, meta: dict):
    frames = []
    for k, records in enumerate(per_frame_records):
        frames.append({
            "k": k,
            "tracks": [
                {
                    "id": r.id,
                    "x": [float(v) for v in r.state],
                    "existence": float(r.existence),
                    "score": float(r.score),
                    "class_id": r.class_id,
                }
                for r in records
            ],
        })
    doc = {
        "format": TRACKS_FORMAT,
        "version": TRACKS_VERSION,
        "frames": frames,
        **meta,
    }
    _json_dump(doc, path)


def load_tracks(path):
    doc = _json_load(path)
    _check_header(doc, path, TRACKS_FORMAT, TRACKS_VERSION)
    try:
        frames = []
        for entry in doc["frames"]:
            frames.append([
                TrackRecord(t["id"], np.array(t["x"], dtype=float), t["existence"],
                            t["score"], t["class_id"])
                for t in entry["tracks"]
            ])
        meta = {k: v for k, v in doc.items() if k not in ("frames", "format", "version")}
        return frames, meta
    except KeyError as exc:
        raise SchemaMismatch(f"{path}: missing tracks field {exc}") from exc
