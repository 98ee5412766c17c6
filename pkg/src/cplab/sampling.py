"""Spatiotemporal sampling of rPPG blocks and temporal sampling of GT signals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidConfigError
from .signal import Signal


@dataclass
class SamplerConfig:
    K: int = 4
    delta_t_s: float | None = 5.0   # None -> half the block length
    seed: int = 0

    def validate(self) -> None:
        if self.K < 1:
            raise InvalidConfigError(f"K must be >= 1, got {self.K}")
        if self.delta_t_s is not None and self.delta_t_s <= 0:
            raise InvalidConfigError(f"delta_t_s must be positive, got {self.delta_t_s}")


@dataclass
class SignalSample:
    """A window of one trace.  ``trace`` stays a tensor so gradients flow through it."""

    trace: torch.Tensor
    fps: float
    video_id: str
    kind: str                       # "rppg" | "gt"
    t: float                        # start time (s) within the source
    h: int | None = None
    w: int | None = None

    def to_signal(self) -> Signal:
        return Signal(self.trace.detach().double().cpu().numpy(), self.fps)


def window_length(delta_t_s: float, fps: float) -> int:
    return int(round(delta_t_s * fps))


def sample_st(block: torch.Tensor, fps: float, cfg: SamplerConfig,
              rng: np.random.Generator, video_id: str = "") -> list[SignalSample]:
    """K windows per spatial cell of a (T, S, S) block, each with its own uniform start."""
    cfg.validate()
    if block.ndim != 3 or block.shape[1] != block.shape[2]:
        raise InvalidConfigError(f"block must be T x S x S, got {tuple(block.shape)}")
    t_len, s, _ = block.shape
    length = window_length(cfg.delta_t_s, fps) if cfg.delta_t_s is not None else t_len // 2
    if length >= t_len or length < 2:
        raise InvalidConfigError(
            f"window of {length} samples does not fit a block of {t_len} samples")
    samples = []
    for h in range(s):
        for w in range(s):
            for start in rng.integers(0, t_len - length + 1, size=cfg.K):
                start = int(start)
                samples.append(SignalSample(block[start:start + length, h, w], fps,
                                            video_id, "rppg", start / fps, h, w))
    return samples


def sample_gt(gt: Signal | torch.Tensor, n: int, delta_t_s: float, rng: np.random.Generator,
              fps: float | None = None, video_id: str = "") -> list[SignalSample]:
    """``n`` windows of length ``delta_t_s`` with uniform random starts."""
    if isinstance(gt, Signal):
        values, fps = torch.as_tensor(gt.values), gt.fps
    else:
        values = gt
        if fps is None:
            raise InvalidConfigError("fps is required for tensor input")
    length = window_length(delta_t_s, fps)
    if length > values.shape[-1]:
        raise InvalidConfigError(
            f"GT of {values.shape[-1]} samples is shorter than the {length}-sample window")
    starts = rng.integers(0, values.shape[-1] - length + 1, size=n)
    return [SignalSample(values[int(s):int(s) + length], fps, video_id, "gt", int(s) / fps)
            for s in starts]


def stack_traces(samples: list[SignalSample]) -> torch.Tensor:
    return torch.stack([s.trace for s in samples])
