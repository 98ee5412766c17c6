"""Synthetic face-video corpus, landmark cropping, label masking and GT desync.

A record is an ellipse of "skin" over a textured background.  The skin's mean
colour follows a PPG waveform, the whole frame follows a slow illumination
drift, and every pixel carries independent noise.  An optional corner block
flickers at an unrelated in-band frequency.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import cv2
import numpy as np

from .errors import (
    InvalidConfigError,
    InvalidInputError,
    InvalidLandmarksError,
    InvalidProfileError,
    MarginError,
)
from .signal import HR_BAND, HR_MAX_BPM, HR_MIN_BPM, Signal

MAX_HR_SLOPE = 3.0          # bpm/s
CROP_SCALE = 1.2
CROP_SIZE = 128
# relative pulse strength per RGB channel; green dominates as in real skin
PULSE_RGB = np.array([0.35, 0.8, 0.5])


@dataclass(eq=False)
class VideoClip:
    """T x H x W x 3 frames.  ``uint8`` frames are read as value/255."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[-1] != 3:
            raise InvalidInputError(f"frames must be T x H x W x 3, got {f.shape}")
        if f.shape[1] < 16 or f.shape[2] < 16:
            raise InvalidInputError(f"frame size {f.shape[1:3]} below 16 x 16")
        if not (self.fps > 0 and math.isfinite(self.fps)):
            raise InvalidInputError(f"bad fps {self.fps}")
        if f.dtype != np.uint8:
            if not np.all(np.isfinite(f)) or f.min() < 0 or f.max() > 1:
                raise InvalidInputError("float frames must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps

    def as_float(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        f = self.frames[start:stop]
        if f.dtype == np.uint8:
            return f.astype(np.float32) / np.float32(255.0)
        return f.astype(np.float32, copy=False)


@dataclass(eq=False)
class TruthMeta:
    hr_profile: np.ndarray          # bpm, one entry per video frame
    skin_mask: np.ndarray           # H x W bool
    patch: dict | None = None       # {"x0", "y0", "size", "freq_hz", "amplitude"}

    def mean_hr(self, start: int = 0, stop: int | None = None) -> float:
        return float(np.mean(self.hr_profile[start:stop]))


@dataclass(eq=False)
class LabeledRecord:
    record_id: str
    video: VideoClip
    gt: Signal | None = None
    phi: int = 0
    desync_offset_s: float = 0.0
    gt_t0_s: float = 0.0            # time of gt[0] relative to frame 0
    truth: TruthMeta | None = None
    landmarks: np.ndarray | None = None     # T x L x 2, (x, y) pixels

    def __post_init__(self):
        if self.phi not in (0, 1):
            raise InvalidInputError(f"phi must be 0 or 1, got {self.phi}")
        if (self.gt is not None) != (self.phi == 1):
            raise InvalidInputError("phi must be 1 exactly when a GT signal is present")

    def gt_window(self, start_s: float, stop_s: float) -> Signal:
        """GT samples covering [start_s, stop_s) of video time, clipped to what exists."""
        if self.gt is None:
            raise InvalidInputError(f"record {self.record_id} has no GT signal")
        i0 = max(0, int(round((start_s - self.gt_t0_s) * self.gt.fps)))
        i1 = min(len(self.gt), int(round((stop_s - self.gt_t0_s) * self.gt.fps)))
        if i1 - i0 < 2:
            raise InvalidInputError(f"record {self.record_id}: GT does not cover "
                                    f"[{start_s}, {stop_s})")
        return Signal(self.gt.values[i0:i1], self.gt.fps)


@dataclass
class SynthConfig:
    n_videos: int = 8
    duration_s: float = 30.0
    fps: float = 30.0
    frame_size: tuple[int, int] = (64, 64)
    hr_range: tuple[float, float] = (50.0, 120.0)
    harmonics: tuple[float, ...] = (1.0, 0.4)
    pulse_amplitude: float = 0.015
    pixel_noise_std: float = 0.01
    drift_amplitude: float = 0.03
    hrv_amplitude_bpm: float = 1.5
    hr_trend_bpm: float = 2.0
    gt_margin_s: float = 2.0
    patch_enabled: bool = False
    patch_position: str = "top_left"
    patch_size: float = 0.15
    patch_amplitude: float = 0.1
    patch_freq_range: tuple[float, float] = HR_BAND
    motion_px: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.hr_range
        if not (HR_MIN_BPM <= lo <= hi <= HR_MAX_BPM):
            raise InvalidConfigError(f"hr_range {self.hr_range} must lie inside [40, 250]")
        if self.n_videos < 1:
            raise InvalidConfigError("n_videos must be >= 1")
        if self.duration_s < 2 or self.fps <= 0:
            raise InvalidConfigError("need duration_s >= 2 and fps > 0")
        if min(self.frame_size) < 16:
            raise InvalidConfigError("frame_size must be at least 16 x 16")
        if self.patch_position not in _PATCH_CORNERS:
            raise InvalidConfigError(f"unknown patch_position {self.patch_position!r}")
        flo, fhi = self.patch_freq_range
        if not (HR_BAND[0] <= flo < fhi <= HR_BAND[1]):
            raise InvalidConfigError("patch_freq_range must be an in-band interval")


_PATCH_CORNERS = ("top_left", "top_right", "bottom_left", "bottom_right")


# ---------------------------------------------------------------------------


def generate_ppg(duration_s: float, fps: float,
                 hr_profile: Callable[[np.ndarray], np.ndarray] | np.ndarray | float,
                 harmonics: Sequence[float], rng: np.random.Generator) -> Signal:
    """Phase-integrated pulse waveform with unit variance.

    ``hr_profile`` is a constant, a per-sample array, or a function of time (s).
    """
    n = int(round(duration_s * fps))
    t = np.arange(n) / fps
    if callable(hr_profile):
        hr = np.asarray(hr_profile(t), dtype=np.float64)
    else:
        hr = np.broadcast_to(np.asarray(hr_profile, dtype=np.float64), (n,)).copy()
    if hr.shape != (n,):
        raise InvalidProfileError(f"profile has {hr.shape} samples, expected {n}")
    if np.any(hr < HR_MIN_BPM) or np.any(hr > HR_MAX_BPM) or not np.all(np.isfinite(hr)):
        raise InvalidProfileError("HR profile leaves [40, 250] bpm")
    if n > 1 and np.max(np.abs(np.diff(hr))) * fps > MAX_HR_SLOPE + 1e-9:
        raise InvalidProfileError(f"HR profile changes faster than {MAX_HR_SLOPE} bpm/s")
    phase = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.cumsum(hr / 60.0) / fps
    offsets = rng.uniform(0, 2 * np.pi, size=len(harmonics))
    offsets[0] = 0.0
    x = sum(a * np.cos((k + 1) * phase + off) for k, (a, off) in enumerate(zip(harmonics, offsets)))
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    std = x.std()
    return Signal(x / std if std > 0 else x, fps)


def hr_profile_for(mean_bpm: float, cfg: SynthConfig, rng: np.random.Generator):
    """Mean HR + slow linear trend + respiratory modulation, as a function of time."""
    total = cfg.duration_s + 2 * cfg.gt_margin_s
    trend = rng.uniform(-1, 1) * cfg.hr_trend_bpm / 2
    resp_hz = rng.uniform(0.18, 0.35)
    resp_phase = rng.uniform(0, 2 * np.pi)
    # keep the peak slope of the modulation under the generator's limit
    resp_amp = min(cfg.hrv_amplitude_bpm, 0.9 * MAX_HR_SLOPE / (2 * np.pi * resp_hz))
    lo, hi = HR_MIN_BPM, HR_MAX_BPM

    def profile(t):
        tc = (t - total / 2) / total
        hr = (mean_bpm + 2 * trend * tc
              + resp_amp * np.sin(2 * np.pi * resp_hz * t + resp_phase))
        return np.clip(hr, lo, hi)

    return profile


def face_geometry(frame_size: tuple[int, int]) -> tuple[float, float, float, float]:
    """Centred ellipse (cx, cy, ax, ay) whose 1.2x crop box nearly fills the frame."""
    h, w = frame_size
    ay = 0.98 * h / (2 * CROP_SCALE)
    ax = 0.75 * ay
    return (w - 1) / 2, (h - 1) / 2, ax, ay


def ellipse_landmarks(cx: float, cy: float, ax: float, ay: float, n: int = 16) -> np.ndarray:
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([cx + ax * np.cos(ang), cy + ay * np.sin(ang)], axis=1)


def ellipse_mask(frame_size, cx, cy, ax, ay) -> np.ndarray:
    h, w = frame_size
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def patch_box(cfg: SynthConfig) -> tuple[int, int, int]:
    h, w = cfg.frame_size
    size = max(2, int(round(cfg.patch_size * w)))
    x0 = 1 if "left" in cfg.patch_position else w - 1 - size
    y0 = 1 if "top" in cfg.patch_position else h - 1 - size
    return x0, y0, size


def _slow_drift(t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    freqs = rng.uniform(0.02, 0.15, size=2)
    phases = rng.uniform(0, 2 * np.pi, size=2)
    d = sum(np.sin(2 * np.pi * f * t + p) for f, p in zip(freqs, phases))
    return d / 2


def render_video(ppg: Signal, cfg: SynthConfig, rng: np.random.Generator,
                 hr_profile: np.ndarray | None = None, record_id: str = "rec") -> LabeledRecord:
    """Render a clip driven by ``ppg``.

    ``ppg`` spans the video plus ``cfg.gt_margin_s`` on each side; the video
    shows the central part and the full trace becomes the GT signal.
    """
    cfg.validate()
    fps = cfg.fps
    n = int(round(cfg.duration_s * fps))
    margin = int(round(cfg.gt_margin_s * fps))
    if len(ppg) != n + 2 * margin or ppg.fps != fps:
        raise InvalidConfigError(
            f"ppg must have {n + 2 * margin} samples at {fps} fps, got {len(ppg)} at {ppg.fps}")
    h, w = cfg.frame_size
    cx, cy, ax, ay = face_geometry(cfg.frame_size)
    mask = ellipse_mask(cfg.frame_size, cx, cy, ax, ay)

    patch = None
    if cfg.patch_enabled:
        x0, y0, size = patch_box(cfg)
        if mask[y0:y0 + size, x0:x0 + size].any():
            raise InvalidConfigError("noise patch overlaps the skin region")
        patch = {"x0": x0, "y0": y0, "size": size, "amplitude": cfg.patch_amplitude}

    t = np.arange(n) / fps
    pulse = ppg.values[margin:margin + n].astype(np.float32)

    skin_rgb = np.array([0.72, 0.52, 0.42]) + rng.uniform(-0.05, 0.05, size=3)
    bg_rgb = np.full(3, 0.35) + rng.uniform(-0.05, 0.05, size=3)
    texture = rng.normal(0, 0.02, size=(h, w, 3))
    base = np.where(mask[..., None], skin_rgb, bg_rgb) + texture
    illum = 1.0 + cfg.drift_amplitude * _slow_drift(t, rng)

    frames = base[None].astype(np.float32) * illum[:, None, None, None].astype(np.float32)
    modulation = (cfg.pulse_amplitude * PULSE_RGB).astype(np.float32)
    frames[:, mask, :] += pulse[:, None, None] * modulation[None, None, :]
    frames += rng.normal(0, cfg.pixel_noise_std, size=frames.shape).astype(np.float32)

    if patch is not None:
        lo, hi = cfg.patch_freq_range
        hr_hz = float(np.mean(hr_profile)) / 60.0 if hr_profile is not None else None
        while True:
            f_patch = rng.uniform(lo, hi)
            if hr_hz is None or abs(f_patch - hr_hz) >= 10 / 60:   # >= 10 bpm apart
                break
        patch["freq_hz"] = float(f_patch)
        flicker = 0.5 + cfg.patch_amplitude * np.sin(2 * np.pi * f_patch * t + rng.uniform(0, 2 * np.pi))
        frames[:, y0:y0 + size, x0:x0 + size, :] = flicker[:, None, None, None]

    frames = np.round(np.clip(frames, 0, 1) * 255).astype(np.uint8)

    landmarks = np.broadcast_to(ellipse_landmarks(cx, cy, ax, ay), (n, 16, 2)).copy()
    if cfg.motion_px > 0:
        shift = cfg.motion_px * _slow_drift(t, rng)
        landmarks[..., 0] += shift[:, None]

    if hr_profile is None:
        hr_profile = np.full(n, np.nan)
    truth = TruthMeta(np.asarray(hr_profile, dtype=np.float64), mask, patch)
    return LabeledRecord(record_id, VideoClip(frames, fps), gt=ppg, phi=1,
                         gt_t0_s=-margin / fps, truth=truth, landmarks=landmarks)


def stratified_hrs(n: int, hr_range: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """One uniform draw per equal-width stratum of ``hr_range``, shuffled; HRs are distinct."""
    lo, hi = hr_range
    width = (hi - lo) / n
    return lo + (rng.permutation(n) + rng.uniform(0.1, 0.9, size=n)) * width


def generate_record(cfg: SynthConfig, index: int, mean_hr: float,
                    rng: np.random.Generator) -> LabeledRecord:
    profile = hr_profile_for(mean_hr, cfg, rng)
    total = cfg.duration_s + 2 * cfg.gt_margin_s
    ppg = generate_ppg(total, cfg.fps, profile, cfg.harmonics, rng)
    margin = int(round(cfg.gt_margin_s * cfg.fps))
    n = int(round(cfg.duration_s * cfg.fps))
    t_video = (margin + np.arange(n)) / cfg.fps
    return render_video(ppg, cfg, rng, hr_profile=profile(t_video), record_id=f"v{index:03d}")


def generate_corpus(cfg: SynthConfig) -> list[LabeledRecord]:
    """Deterministic corpus; record ``i`` draws from its own child of ``cfg.seed``."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    corpus_seq, *record_seqs = root.spawn(cfg.n_videos + 1)
    hrs = stratified_hrs(cfg.n_videos, cfg.hr_range, np.random.default_rng(corpus_seq))
    return [generate_record(cfg, i, float(hrs[i]), np.random.default_rng(seq))
            for i, seq in enumerate(record_seqs)]


# ---------------------------------------------------------------------------
# cropping


def face_boxes(landmarks: np.ndarray, frame_hw: tuple[int, int]) -> np.ndarray:
    """Per-frame square crop boxes (x0, y0, side) in pixels.

    The centre is the midpoint of the landmark extremes; the side is 1.2 x the
    vertical landmark range of the first frame.  Boxes are shifted (and, if
    larger than the frame, shrunk) to stay inside the frame.
    """
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.ndim != 3 or lm.shape[-1] != 2 or lm.shape[0] == 0:
        raise InvalidLandmarksError(f"landmarks must be T x L x 2, got {lm.shape}")
    h, w = frame_hw
    if np.any(lm[..., 0] < 0) or np.any(lm[..., 0] > w - 1) or \
            np.any(lm[..., 1] < 0) or np.any(lm[..., 1] > h - 1):
        raise InvalidLandmarksError("landmarks fall outside the frame")
    first = lm[0, :, 1]
    vrange = first.max() - first.min()
    if vrange <= 0:
        raise InvalidLandmarksError("landmarks have zero vertical range in the first frame")
    side = min(CROP_SCALE * vrange, h, w)
    cx = (lm[..., 0].min(axis=1) + lm[..., 0].max(axis=1)) / 2
    cy = (lm[..., 1].min(axis=1) + lm[..., 1].max(axis=1)) / 2
    x0 = np.clip(cx - side / 2, 0, w - side)
    y0 = np.clip(cy - side / 2, 0, h - side)
    return np.stack([x0, y0, np.full_like(x0, side)], axis=1)


def crop_image(img: np.ndarray, box, out_size: int) -> np.ndarray:
    """Bilinear resample of the square ``box`` of ``img`` to ``out_size`` squared.

    Output pixel centres map linearly onto the box, so sub-pixel boxes need no
    rounding.
    """
    x0, y0, side = box
    scale = side / out_size
    m = np.array([[scale, 0, x0 + 0.5 * scale - 0.5],
                  [0, scale, y0 + 0.5 * scale - 0.5]], dtype=np.float64)
    return cv2.warpAffine(img, m, (out_size, out_size),
                          flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                          borderMode=cv2.BORDER_REPLICATE)


def crop_face(video: VideoClip, landmarks: np.ndarray, out_size: int = CROP_SIZE) -> VideoClip:
    if len(landmarks) != video.n_frames:
        raise InvalidLandmarksError(
            f"{len(landmarks)} landmark frames for a {video.n_frames}-frame video")
    boxes = face_boxes(landmarks, video.frames.shape[1:3])
    out = np.empty((video.n_frames, out_size, out_size, 3), dtype=np.float32)
    for i, box in enumerate(boxes):
        out[i] = crop_image(video.as_float(i, i + 1)[0], box, out_size)
    np.clip(out, 0, 1, out=out)
    return VideoClip(out, video.fps)


def crop_mask(mask: np.ndarray, landmarks: np.ndarray, out_size: int) -> np.ndarray:
    """Fraction-valued mask in crop coordinates, using the first frame's box."""
    box = face_boxes(landmarks[:1], mask.shape)[0]
    return crop_image(mask.astype(np.float32), box, out_size)


def prepare_video(record: LabeledRecord, out_size: int) -> VideoClip:
    """Model-ready frames: landmark crop when landmarks exist, plain resize otherwise."""
    if record.landmarks is not None:
        return crop_face(record.video, record.landmarks, out_size)
    frames = record.video.as_float()
    out = np.stack([cv2.resize(f, (out_size, out_size), interpolation=cv2.INTER_LINEAR)
                    for f in frames])
    return VideoClip(np.clip(out, 0, 1), record.video.fps)


def region_mask(record: LabeledRecord, region: str, out_size: int) -> np.ndarray:
    """Skin or patch mask of a synthetic record in model-input coordinates."""
    if record.truth is None:
        raise InvalidInputError(f"record {record.record_id} has no truth metadata")
    if region == "skin":
        mask = record.truth.skin_mask
    elif region == "patch":
        mask = np.zeros_like(record.truth.skin_mask)
        if record.truth.patch is not None:
            p = record.truth.patch
            mask[p["y0"]:p["y0"] + p["size"], p["x0"]:p["x0"] + p["size"]] = True
    else:
        raise InvalidInputError(f"unknown region {region!r}")
    if record.landmarks is not None:
        return crop_mask(mask, record.landmarks, out_size)
    return cv2.resize(mask.astype(np.float32), (out_size, out_size), interpolation=cv2.INTER_LINEAR)


# ---------------------------------------------------------------------------
# label manipulation


def mask_labels(records: Sequence[LabeledRecord], ratio: float,
                rng: np.random.Generator) -> list[LabeledRecord]:
    """Keep GT on exactly round(ratio * n) rng-chosen records; strip the rest."""
    if not (0.0 <= ratio <= 1.0):
        raise InvalidConfigError(f"label ratio {ratio} outside [0, 1]")
    n = len(records)
    n_keep = int(math.floor(ratio * n + 0.5))
    keep = set(rng.permutation(n)[:n_keep].tolist())
    return [r if i in keep else replace(r, gt=None, phi=0) for i, r in enumerate(records)]


def apply_desync(record: LabeledRecord, d_max_s: float, rng: np.random.Generator) -> LabeledRecord:
    """Shift the GT timeline by u ~ U(-d_max, d_max), rounded to whole GT samples.

    After the shift, the label at video time t is the pulse at t + u.
    """
    if d_max_s < 0:
        raise InvalidConfigError("d_max must be >= 0")
    if record.gt is None:
        raise InvalidInputError(f"record {record.record_id} has no GT to desynchronize")
    if d_max_s == 0:
        return record
    gt_end = record.gt_t0_s + record.gt.duration
    if record.gt_t0_s > -d_max_s + 1e-9 or gt_end < record.video.duration + d_max_s - 1e-9:
        raise MarginError(
            f"record {record.record_id}: GT covers [{record.gt_t0_s:.3f}, {gt_end:.3f}] s, "
            f"needs a {d_max_s} s margin around the {record.video.duration:.3f} s video")
    u = rng.uniform(-d_max_s, d_max_s)
    k_max = int(math.floor(d_max_s * record.gt.fps + 1e-9))
    k = int(np.clip(round(u * record.gt.fps), -k_max, k_max))
    shift = k / record.gt.fps
    return replace(record, gt_t0_s=record.gt_t0_s - shift,
                   desync_offset_s=record.desync_offset_s + shift)
