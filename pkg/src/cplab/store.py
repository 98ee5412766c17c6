"""On-disk dataset: one directory per record.

    <root>/<record_id>/frames.bin   JSON header line {"T","H","W","C","fps"} + raw uint8
    <root>/<record_id>/gt.csv       time_s,value   (only when phi = 1)
    <root>/<record_id>/meta.json    phi, desync offset, GT timing, truth, landmarks
"""
from __future__ import annotations

import json
import logging
import shutil
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import FormatError, MissingLabelError
from .signal import read_signal_csv, write_signal_csv
from .synth import LabeledRecord, TruthMeta, VideoClip

log = logging.getLogger(__name__)

HEADER_FIELDS = ("T", "H", "W", "C", "fps")


def write_frames(path: Path, video: VideoClip) -> None:
    frames = video.frames
    if frames.dtype != np.uint8:
        log.warning("%s: quantizing float frames to uint8", path)
        frames = np.round(np.clip(frames, 0, 1) * 255).astype(np.uint8)
    t, h, w, c = frames.shape
    header = json.dumps({"T": t, "H": h, "W": w, "C": c, "fps": video.fps})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_frames(path: Path) -> VideoClip:
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})", field="header") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object", field="header")
    for key in HEADER_FIELDS:
        if key not in header:
            raise FormatError(f"{path}: header field {key!r} missing", field=key)
        val = header[key]
        if key == "fps":
            ok = isinstance(val, (int, float)) and not isinstance(val, bool) and val > 0
        else:
            ok = isinstance(val, int) and not isinstance(val, bool) and val > 0
        if not ok:
            raise FormatError(f"{path}: header field {key!r} has invalid value {val!r}", field=key)
    if header["C"] != 3:
        raise FormatError(f"{path}: header field 'C' must be 3, got {header['C']}", field="C")
    shape = (header["T"], header["H"], header["W"], header["C"])
    expected = int(np.prod(shape))
    if len(payload) != expected:
        raise FormatError(f"{path}: {len(payload)} payload bytes, header implies {expected}",
                          field="frames")
    frames = np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()
    return VideoClip(frames, float(header["fps"]))


def _meta(record: LabeledRecord) -> dict:
    meta = {
        "record_id": record.record_id,
        "phi": record.phi,
        "desync_offset_s": record.desync_offset_s,
        "gt_t0_s": record.gt_t0_s,
        "gt_fps": record.gt.fps if record.gt is not None else None,
        "true_hr_profile": None,
        "skin_mask": None,
        "patch": None,
        "landmarks": None,
    }
    if record.truth is not None:
        meta["true_hr_profile"] = record.truth.hr_profile.tolist()
        meta["skin_mask"] = record.truth.skin_mask.astype(int).tolist()
        meta["patch"] = record.truth.patch
    if record.landmarks is not None:
        meta["landmarks"] = record.landmarks.tolist()
    return meta


def store_dataset(records: Iterable[LabeledRecord], path: str | Path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for record in records:
        d = root / record.record_id
        if d.exists():
            shutil.rmtree(d)
        d.mkdir()
        write_frames(d / "frames.bin", record.video)
        if record.gt is not None:
            write_signal_csv(d / "gt.csv", record.gt, t0=record.gt_t0_s)
        (d / "meta.json").write_text(json.dumps(_meta(record)))
    return root


def load_record(d: Path) -> LabeledRecord:
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise FormatError(f"{d}: meta.json missing", field="meta.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: invalid JSON ({exc})", field="meta.json") from exc
    for key in ("phi", "desync_offset_s"):
        if key not in meta:
            raise FormatError(f"{meta_path}: field {key!r} missing", field=key)
    phi = meta["phi"]
    if phi not in (0, 1):
        raise FormatError(f"{meta_path}: phi must be 0 or 1, got {phi!r}", field="phi")
    video = read_frames(d / "frames.bin")

    gt = None
    gt_path = d / "gt.csv"
    if phi == 1:
        if not gt_path.exists():
            raise MissingLabelError(f"{d}: phi = 1 but gt.csv is absent", field="gt.csv")
        gt, _ = read_signal_csv(gt_path, fps=meta.get("gt_fps") or video.fps)
    truth = None
    if meta.get("skin_mask") is not None:
        truth = TruthMeta(
            hr_profile=np.asarray(meta.get("true_hr_profile") or [], dtype=np.float64),
            skin_mask=np.asarray(meta["skin_mask"], dtype=bool),
            patch=meta.get("patch"),
        )
        if truth.skin_mask.shape != video.frames.shape[1:3]:
            raise FormatError(f"{meta_path}: skin_mask shape {truth.skin_mask.shape} does not "
                              f"match frames {video.frames.shape[1:3]}", field="skin_mask")
    landmarks = None
    if meta.get("landmarks") is not None:
        landmarks = np.asarray(meta["landmarks"], dtype=np.float64)
        if landmarks.ndim != 3 or landmarks.shape[0] != video.n_frames:
            raise FormatError(f"{meta_path}: landmarks shape {landmarks.shape} does not match "
                              f"{video.n_frames} frames", field="landmarks")
    return LabeledRecord(
        record_id=meta.get("record_id", d.name),
        video=video,
        gt=gt,
        phi=phi,
        desync_offset_s=float(meta["desync_offset_s"]),
        gt_t0_s=float(meta.get("gt_t0_s", 0.0)),
        truth=truth,
        landmarks=landmarks,
    )


def load_dataset(path: str | Path) -> list[LabeledRecord]:
    root = Path(path)
    if not root.is_dir():
        raise FormatError(f"{root} is not a dataset directory", field="path")
    return [load_record(d) for d in sorted(p for p in root.iterdir() if p.is_dir())]


def records_equal(a: LabeledRecord, b: LabeledRecord) -> bool:
    """Bit-exact equality over every stored field."""
    def same(x, y):
        if x is None or y is None:
            return x is None and y is None
        return np.array_equal(x, y) and np.asarray(x).dtype == np.asarray(y).dtype

    if (a.record_id, a.phi, a.desync_offset_s, a.gt_t0_s) != \
            (b.record_id, b.phi, b.desync_offset_s, b.gt_t0_s):
        return False
    if a.video.fps != b.video.fps or not same(a.video.frames, b.video.frames):
        return False
    if (a.gt is None) != (b.gt is None) or (a.gt is not None and a.gt != b.gt):
        return False
    if not same(a.landmarks, b.landmarks):
        return False
    if (a.truth is None) != (b.truth is None):
        return False
    if a.truth is not None:
        return (same(a.truth.hr_profile, b.truth.hr_profile)
                and same(a.truth.skin_mask, b.truth.skin_mask)
                and a.truth.patch == b.truth.patch)
    return True
