"""1-D signal mathematics: conditioning, band-limited PSDs, HR/SNR/IPR, peaks, HRV.

The spectral and correlation primitives are written against torch so the
training loss can backpropagate through them.  The ``Signal``-level functions
are thin numpy-facing wrappers over the same code path.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import uniform_filter1d
from scipy.signal import periodogram as scipy_periodogram

from .errors import (
    DegenerateVariabilityError,
    FormatError,
    InsufficientDataError,
    InvalidInputError,
    NoPeakError,
    ResolutionError,
    UndefinedCorrelationError,
)

HR_BAND = (0.66, 4.16)      # Hz, 40-250 bpm
HR_MIN_BPM = 40.0
HR_MAX_BPM = 250.0
SNR_WINDOW_HZ = 0.2
SNR_CAP_DB = 60.0
PEAK_WINDOW_S = 2.0
PEAK_THRESHOLD_STD = 0.3
REFRACTORY_S = 60.0 / 250.0
HRV_RESAMPLE_HZ = 4.0
LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.40)
MIN_HRV_PEAKS = 8

_CONSTANT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Signal:
    """A uniformly sampled 1-D trace."""

    values: np.ndarray
    fps: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise InvalidInputError(f"signal must be 1-D, got shape {values.shape}")
        if values.size < 2:
            raise InvalidInputError("signal needs at least 2 samples")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("signal contains non-finite values")
        fps = float(self.fps)
        if not (math.isfinite(fps) and fps > 0):
            raise InvalidInputError(f"fps must be finite and positive, got {self.fps}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "fps", fps)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Signal):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.values, other.values)

    @property
    def duration(self) -> float:
        return self.values.size / self.fps

    def times(self, t0: float = 0.0) -> np.ndarray:
        return t0 + np.arange(self.values.size) / self.fps


@dataclass(frozen=True, eq=False)
class Psd:
    power: np.ndarray
    freqs: np.ndarray

    def __post_init__(self):
        power = np.asarray(self.power, dtype=np.float64)
        freqs = np.asarray(self.freqs, dtype=np.float64)
        if power.shape != freqs.shape or power.ndim != 1:
            raise InvalidInputError("power and freqs must be 1-D arrays of equal length")
        if np.any(power < 0):
            raise InvalidInputError("power must be nonnegative")
        if freqs.size > 1 and np.any(np.diff(freqs) <= 0):
            raise InvalidInputError("freqs must be strictly increasing")
        object.__setattr__(self, "power", power)
        object.__setattr__(self, "freqs", freqs)


@dataclass(frozen=True)
class HrvMetrics:
    lf_nu: float
    hf_nu: float
    lf_hf_ratio: float
    rf_hz: float

    def as_dict(self) -> dict[str, float]:
        return {"lf_nu": self.lf_nu, "hf_nu": self.hf_nu,
                "lf_hf_ratio": self.lf_hf_ratio, "rf_hz": self.rf_hz}


# ---------------------------------------------------------------------------
# differentiable core (last axis is time)


def detrend_standardize_tensor(x: torch.Tensor) -> torch.Tensor:
    """Remove the least-squares line and scale to unit (population) variance.

    Traces that are constant after detrending map to zeros.
    """
    n = x.shape[-1]
    t = torch.arange(n, dtype=x.dtype, device=x.device)
    t = t - t.mean()
    xc = x - x.mean(dim=-1, keepdim=True)
    slope = (xc * t).sum(dim=-1, keepdim=True) / (t * t).sum()
    resid = xc - slope * t
    std = resid.pow(2).mean(dim=-1, keepdim=True).sqrt()
    scale = x.detach().abs().amax(dim=-1, keepdim=True).clamp_min(1.0)
    flat = std.detach() <= _CONSTANT_TOL * scale
    safe_std = torch.where(flat, torch.ones_like(std), std)
    return torch.where(flat, torch.zeros_like(resid), resid / safe_std)


def rfft_freqs(n: int, fps: float) -> np.ndarray:
    # k * fps / n rounds once, so grid frequencies come out exact (rfftfreq rounds twice)
    return np.arange(n // 2 + 1) * float(fps) / n


def periodogram_tensor(x: torch.Tensor) -> torch.Tensor:
    """One-sided periodogram whose bins sum to the mean square of ``x``."""
    n = x.shape[-1]
    spec = torch.fft.rfft(x, dim=-1)
    power = (spec.real ** 2 + spec.imag ** 2) / (n * n)
    weights = torch.full((power.shape[-1],), 2.0, dtype=power.dtype, device=power.device)
    weights[0] = 1.0
    if n % 2 == 0:
        weights[-1] = 1.0
    return power * weights


def band_indices(freqs: np.ndarray, band: tuple[float, float] | None = HR_BAND) -> np.ndarray:
    """Indices of bins inside ``band`` (inclusive); ``None`` keeps every non-DC bin."""
    if band is None:
        return np.flatnonzero(freqs > 0)
    lo, hi = band
    return np.flatnonzero((freqs >= lo) & (freqs <= hi))


def psd_tensor(x: torch.Tensor, fps: float, normalize: bool = True,
               band: tuple[float, float] | None = HR_BAND,
               eps: float = 0.0) -> tuple[torch.Tensor, np.ndarray]:
    """Band-restricted periodogram of the conditioned trace(s) in ``x``.

    Returns ``(power, freqs)`` where ``power`` has the band bins on its last
    axis.  ``eps`` is added to the normalizer; keep it at 0 outside training.
    """
    n = x.shape[-1]
    freqs = rfft_freqs(n, fps)
    idx = band_indices(freqs, band)
    if idx.size < 3:
        raise ResolutionError(
            f"only {idx.size} frequency bins inside the band for n={n} at {fps} fps")
    power = periodogram_tensor(detrend_standardize_tensor(x))
    power = power[..., torch.as_tensor(idx, device=x.device)]
    if normalize:
        power = power / (power.sum(dim=-1, keepdim=True) + eps)
    return power, freqs[idx]


def pearson_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a = a - a.mean(dim=-1, keepdim=True)
    b = b - b.mean(dim=-1, keepdim=True)
    denom = torch.sqrt((a * a).sum(dim=-1) * (b * b).sum(dim=-1))
    if torch.any(denom.detach() == 0):
        raise UndefinedCorrelationError("correlation is undefined for a constant input")
    return (a * b).sum(dim=-1) / denom


# ---------------------------------------------------------------------------
# Signal-level API


def _as_tensor(values: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(values, dtype=np.float64))


def detrend_standardize(s: Signal) -> Signal:
    out = detrend_standardize_tensor(_as_tensor(s.values)).numpy()
    return Signal(out, s.fps)


def compute_psd(s: Signal, normalize: bool = True,
                band: tuple[float, float] | None = HR_BAND) -> Psd:
    power, freqs = psd_tensor(_as_tensor(s.values), s.fps, normalize=False, band=band)
    power = power.numpy()
    total = power.sum()
    if normalize and total > 0:
        power = power / total
    return Psd(power, freqs)


def hr_from_psd(p: Psd) -> float:
    """Heart rate in bpm at the strongest bin; ties go to the lower frequency."""
    if p.power.size == 0 or not np.any(p.power > 0):
        raise NoPeakError("PSD has no positive power")
    return 60.0 * float(p.freqs[int(np.argmax(p.power))])


def hr_from_signal(s: Signal) -> float:
    return hr_from_psd(compute_psd(s, normalize=False))


def snr_window_masks(freqs: np.ndarray, gt_hr_bpm: float) -> np.ndarray:
    f0 = gt_hr_bpm / 60.0
    half = SNR_WINDOW_HZ + 1e-9     # grid frequencies carry rounding noise at the edges
    return (np.abs(freqs - f0) <= half) | (np.abs(freqs - 2 * f0) <= half)


def _centered_band_power(s: Signal) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Periodogram of the mean-removed trace: (freqs, power, in-band indices)."""
    x = s.values - s.values.mean()
    power = periodogram_tensor(_as_tensor(x)).numpy()
    freqs = rfft_freqs(x.size, s.fps)
    return freqs, power, band_indices(freqs)


def snr_db(rppg: Signal, gt_hr_bpm: float) -> float:
    """In-band SNR around the reference fundamental and first harmonic.

    Uses the periodogram of the mean-removed trace (no line removal, which
    would leak a pure tone into every bin).  The result is clipped to +/-60 dB,
    which also covers an empty noise or signal window.
    """
    if not (HR_MIN_BPM <= gt_hr_bpm <= HR_MAX_BPM):
        raise InvalidInputError(f"reference HR {gt_hr_bpm} bpm outside [40, 250]")
    freqs, power, idx = _centered_band_power(rppg)
    freqs, power = freqs[idx], power[idx]
    sig_mask = snr_window_masks(freqs, gt_hr_bpm)
    p_sig = float(power[sig_mask].sum())
    p_noise = float(power[~sig_mask].sum())
    if p_noise <= 0:
        return SNR_CAP_DB
    if p_sig <= 0:
        return -SNR_CAP_DB
    return float(np.clip(10.0 * np.log10(p_sig / p_noise), -SNR_CAP_DB, SNR_CAP_DB))


def ipr(s: Signal) -> float:
    """Fraction of non-DC periodogram power outside the heart-rate band."""
    _, power, idx = _centered_band_power(s)
    total = float(power[1:].sum())
    if total <= 0:
        raise InvalidInputError("signal has zero non-DC power")
    inband = float(power[idx].sum())
    return (total - inband) / total


def pearson_r(a: Signal | np.ndarray, b: Signal | np.ndarray) -> float:
    av = a.values if isinstance(a, Signal) else np.asarray(a, dtype=np.float64)
    bv = b.values if isinstance(b, Signal) else np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape:
        raise InvalidInputError(f"length mismatch: {av.shape} vs {bv.shape}")
    r = float(pearson_tensor(_as_tensor(av), _as_tensor(bv)))
    return min(1.0, max(-1.0, r))


def peak_threshold(x: np.ndarray, fps: float) -> np.ndarray:
    """Rolling mean + 0.3 rolling std over centered 2-s windows."""
    win = max(3, int(round(PEAK_WINDOW_S * fps)) | 1)   # odd, so the window is centered
    mean = uniform_filter1d(x, size=win, mode="nearest")
    sq = uniform_filter1d(x * x, size=win, mode="nearest")
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    return mean + PEAK_THRESHOLD_STD * std


def _enforce_refractory(candidates: np.ndarray, heights: np.ndarray, min_gap: float) -> np.ndarray:
    kept: list[int] = []
    for i in candidates[np.argsort(-heights[candidates], kind="stable")]:
        if all(abs(i - k) >= min_gap for k in kept):
            kept.append(int(i))
    return np.array(sorted(kept), dtype=int)


def detect_peaks(s: Signal) -> np.ndarray:
    """Systolic peak times in seconds, strictly increasing."""
    if s.duration < 5.0:
        raise InsufficientDataError(f"peak detection needs >= 5 s, got {s.duration:.2f} s")
    x = detrend_standardize(s).values
    if not np.any(x):
        return np.empty(0)
    thr = peak_threshold(x, s.fps)
    mid = x[1:-1]
    is_max = (mid > x[:-2]) & (mid >= x[2:]) & (mid > thr[1:-1])
    candidates = np.flatnonzero(is_max) + 1
    if candidates.size == 0:
        return np.empty(0)
    idx = _enforce_refractory(candidates, x, REFRACTORY_S * s.fps)
    # parabolic refinement of each maximum
    left, centre, right = x[idx - 1], x[idx], x[idx + 1]
    denom = left - 2 * centre + right
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(denom != 0, 0.5 * (left - right) / denom, 0.0)
    return (idx + np.clip(delta, -0.5, 0.5)) / s.fps


def hrv_metrics(peak_times) -> HrvMetrics:
    """Frequency-domain HRV from peak times (s).

    IBIs are linearly resampled to 4 Hz and analysed with a Hann-windowed,
    linearly detrended periodogram.
    """
    t = np.asarray(peak_times, dtype=np.float64)
    if t.size < MIN_HRV_PEAKS:
        raise InsufficientDataError(f"need >= {MIN_HRV_PEAKS} peaks, got {t.size}")
    ibi = np.diff(t)
    ibi_t = t[1:]
    grid = np.arange(ibi_t[0], ibi_t[-1], 1.0 / HRV_RESAMPLE_HZ)
    if grid.size < 8:
        raise InsufficientDataError("IBI series too short to resample")
    series = np.interp(grid, ibi_t, ibi)
    if np.std(series) <= 1e-9:
        raise DegenerateVariabilityError("interbeat intervals are constant")
    freqs, power = scipy_periodogram(series, fs=HRV_RESAMPLE_HZ, window="hann",
                                     detrend="linear", scaling="spectrum")
    lf_mask = (freqs >= LF_BAND[0]) & (freqs < LF_BAND[1])
    hf_mask = (freqs >= HF_BAND[0]) & (freqs <= HF_BAND[1])
    lf = float(power[lf_mask].sum())
    hf = float(power[hf_mask].sum())
    if lf + hf <= 0 or not hf_mask.any():
        raise DegenerateVariabilityError("no power in the LF/HF bands")
    lf_nu = lf / (lf + hf)
    hf_nu = hf / (lf + hf)
    ratio = lf / hf if hf > 0 else math.inf
    rf = float(freqs[hf_mask][np.argmax(power[hf_mask])])
    return HrvMetrics(lf_nu, hf_nu, ratio, rf)


# ---------------------------------------------------------------------------
# CSV serialization: two columns (time_s, value) with a one-line header


def write_signal_csv(path: str | Path, s: Signal, t0: float = 0.0) -> None:
    times = s.times(t0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "value"])
        for t, v in zip(times, s.values):
            writer.writerow([repr(float(t)), repr(float(v))])


def read_signal_csv(path: str | Path, fps: float | None = None) -> tuple[Signal, float]:
    """Returns the signal and its first timestamp.

    Without ``fps`` the rate is inferred from the time column.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["time_s", "value"]:
            raise FormatError(f"{path}: expected header time_s,value, got {header}", field="header")
        rows = [(float(t), float(v)) for t, v in reader]
    arr = np.array(rows, dtype=np.float64).reshape(-1, 2)
    if fps is None:
        if arr.shape[0] < 2:
            raise InvalidInputError(f"{path}: need at least 2 rows to infer fps")
        fps = (arr.shape[0] - 1) / (arr[-1, 0] - arr[0, 0])
    return Signal(arr[:, 1], fps), float(arr[0, 0])
