"""Windowed evaluation: HR, SNR, IPR and HRV agreement on a test split."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import CplabError, InsufficientDataError, InvalidInputError
from .model import STRppgModel, predict_rppg
from .signal import HR_MAX_BPM, HR_MIN_BPM, Signal, detect_peaks, hr_from_signal, hrv_metrics, \
    ipr, pearson_r, snr_db
from .synth import LabeledRecord, prepare_video

EVAL_WINDOW_S = 30.0
HRV_FEATURES = ("lf_nu", "hf_nu", "lf_hf_ratio", "rf_hz")

# a callable stub receives (record, start_frame, stop_frame) and returns the rPPG trace
Predictor = Union[STRppgModel, Callable[[LabeledRecord, int, int], np.ndarray]]


@dataclass
class EvalReport:
    windows: list[dict]
    mae: float
    rmse: float
    r: float
    mean_snr: float
    mean_ipr: float
    hrv: dict[str, dict[str, float]]
    traces: dict[str, dict] = field(default_factory=dict)   # first window per record

    @property
    def n_windows(self) -> int:
        return len(self.windows)

    @property
    def n_failed(self) -> int:
        return sum(1 for w in self.windows if w["flags"])

    def summary(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "r": self.r, "mean_snr": self.mean_snr,
                "mean_ipr": self.mean_ipr, "n_windows": self.n_windows, "n_failed": self.n_failed}

    def to_dict(self) -> dict:
        return {**self.summary(), "windows": self.windows, "hrv": self.hrv}


def _nan_pearson(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) < 2:
        return math.nan
    try:
        return pearson_r(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    except CplabError:
        return math.nan


def _safe(fn, flags: list[str], tag: str):
    try:
        return fn()
    except CplabError as exc:
        flags.append(f"{tag}: {type(exc).__name__}")
        return None


def _reference(record: LabeledRecord, start: int, stop: int) -> tuple[Signal | None, float | None]:
    fps = record.video.fps
    if record.phi:
        gt = record.gt_window(start / fps, stop / fps)
        return gt, hr_from_signal(gt)
    if record.truth is not None and record.truth.hr_profile.size:
        return None, record.truth.mean_hr(start, stop)
    raise InvalidInputError(f"record {record.record_id} has neither GT nor truth metadata")


def _hrv(signal: Signal | None, flags: list[str], tag: str) -> dict | None:
    if signal is None:
        return None
    metrics = _safe(lambda: hrv_metrics(detect_peaks(signal)), flags, tag)
    return metrics.as_dict() if metrics is not None else None


def evaluate(model: Predictor, records: Sequence[LabeledRecord], input_size: int = 128,
             window_s: float = EVAL_WINDOW_S,
             frames: Sequence[np.ndarray] | None = None) -> EvalReport:
    """Score a model on non-overlapping windows of every record.

    Failures inside a window (no spectral peak, too few beats, ...) are
    recorded in that window's ``flags`` instead of aborting the run.
    ``frames`` optionally supplies already prepared model inputs per record.
    """
    windows: list[dict] = []
    traces: dict[str, dict] = {}
    for k, record in enumerate(records):
        fps = record.video.fps
        length = int(round(window_s * fps))
        n_win = record.video.n_frames // length
        if n_win == 0:
            continue
        clip_frames = None
        if isinstance(model, STRppgModel):
            clip_frames = frames[k] if frames is not None else prepare_video(record, input_size).frames
        for w in range(n_win):
            start, stop = w * length, (w + 1) * length
            flags: list[str] = []
            if clip_frames is not None:
                rppg = predict_rppg(model, clip_frames[start:stop], fps)
            else:
                rppg = Signal(np.asarray(model(record, start, stop), dtype=np.float64), fps)
            gt, hr_ref = _reference(record, start, stop)
            hr_est = _safe(lambda: hr_from_signal(rppg), flags, "hr")
            snr = None
            if hr_ref is not None and HR_MIN_BPM <= hr_ref <= HR_MAX_BPM:
                snr = _safe(lambda: snr_db(rppg, hr_ref), flags, "snr")
            ipr_val = _safe(lambda: ipr(rppg), flags, "ipr")
            windows.append({
                "record_id": record.record_id, "start_s": start / fps, "hr_est": hr_est,
                "hr_ref": hr_ref, "snr_db": snr, "ipr": ipr_val,
                "hrv_est": _hrv(rppg, flags, "hrv_est"), "hrv_ref": _hrv(gt, flags, "hrv_ref"),
                "flags": flags,
            })
            if w == 0:
                traces[record.record_id] = {
                    "fps": fps, "rppg": rppg.values.tolist(),
                    "gt": None if gt is None else gt.values[:len(rppg)].tolist()}
    if not windows:
        raise InsufficientDataError(f"no record holds a complete {window_s:g} s window")
    return _aggregate(windows, traces)


def _aggregate(windows: list[dict], traces: dict[str, dict]) -> EvalReport:
    pairs = [(w["hr_est"], w["hr_ref"]) for w in windows
             if w["hr_est"] is not None and w["hr_ref"] is not None]
    if pairs:
        est, ref = map(np.asarray, zip(*pairs))
        err = est - ref
        mae, rmse = float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err ** 2)))
        r = _nan_pearson(est, ref)
    else:
        mae = rmse = r = math.nan
    snrs = [w["snr_db"] for w in windows if w["snr_db"] is not None]
    iprs = [w["ipr"] for w in windows if w["ipr"] is not None]
    hrv: dict[str, dict[str, float]] = {}
    both = [w for w in windows if w["hrv_est"] is not None and w["hrv_ref"] is not None]
    for feat in HRV_FEATURES:
        est = np.array([w["hrv_est"][feat] for w in both], dtype=np.float64)
        ref = np.array([w["hrv_ref"][feat] for w in both], dtype=np.float64)
        ok = np.isfinite(est) & np.isfinite(ref)
        e = est[ok] - ref[ok]
        hrv[feat] = {
            "std": float(np.std(e)) if e.size else math.nan,
            "rmse": float(np.sqrt(np.mean(e ** 2))) if e.size else math.nan,
            "r": _nan_pearson(est[ok], ref[ok]),
            "n": int(e.size),
        }
    return EvalReport(
        windows=windows, mae=mae, rmse=rmse, r=r,
        mean_snr=float(np.mean(snrs)) if snrs else math.nan,
        mean_ipr=float(np.mean(iprs)) if iprs else math.nan,
        hrv=hrv, traces=traces,
    )
