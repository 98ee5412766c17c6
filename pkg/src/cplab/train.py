"""Training loop, IPR-based model selection and the time-domain supervised baseline."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import InvalidConfigError, InvalidInputError, NonFiniteLossError
from .losses import LossBreakdown, loss_total
from .model import ModelConfig, STRppgModel, inference_rppg, predict_rppg
from .sampling import SamplerConfig, sample_gt, sample_st, stack_traces
from .signal import HR_BAND, Signal, ipr, pearson_tensor, psd_tensor
from .synth import LabeledRecord, apply_desync, mask_labels, prepare_video

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("l_p_rr", "l_n_rr", "l_p_gr", "l_n_gr", "total")


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-5
    weight_decay: float = 0.01
    clip_len_s: float = 10.0
    steps_per_epoch: int | None = None      # None -> number of training videos
    input_size: int = 128
    label_ratio: float | None = None        # None -> keep the dataset's labels
    d_max_s: float = 0.0
    method: str = "contrast"                # contrast | supervised
    use_rr_neg: bool = True
    use_gr_pos: bool = True
    use_gr_neg: bool = True
    hr_band: bool = True                    # False -> PSDs over the full spectrum
    ipr_windows_per_video: int = 1
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def validate(self) -> None:
        if self.epochs < 1:
            raise InvalidConfigError("epochs must be >= 1")
        if self.lr < 0:
            raise InvalidConfigError("lr must be >= 0")
        if self.clip_len_s <= 0:
            raise InvalidConfigError("clip_len_s must be positive")
        if self.method not in ("contrast", "supervised"):
            raise InvalidConfigError(f"unknown method {self.method!r}")
        if self.label_ratio is not None and not 0 <= self.label_ratio <= 1:
            raise InvalidConfigError("label_ratio must lie in [0, 1]")
        if self.d_max_s < 0:
            raise InvalidConfigError("d_max_s must be >= 0")
        self.model.validate()
        self.sampler.validate()


@dataclass
class PreparedRecord:
    """A record plus its model-ready (cropped, resized, float) frames."""

    record: LabeledRecord
    frames: np.ndarray

    @property
    def fps(self) -> float:
        return self.record.video.fps

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def prepare_records(records: Sequence[LabeledRecord], input_size: int) -> list[PreparedRecord]:
    return [PreparedRecord(r, prepare_video(r, input_size).frames) for r in records]


@dataclass
class Clip:
    index: int
    record_id: str
    start: int
    frames: np.ndarray
    fps: float
    phi: int
    gt: Signal | None           # label window widened by the desync margin
    gt_clip: Signal | None      # label window over exactly the clip interval


def gt_for_interval(record: LabeledRecord, start_s: float, stop_s: float, fps: float) -> Signal:
    """Label samples for [start_s, stop_s) of video time at the video frame rate."""
    window = record.gt_window(start_s, stop_s)
    if window.fps == fps:
        return window
    i0 = max(0.0, start_s - record.gt_t0_s)
    src_t = i0 + np.arange(len(window)) / window.fps
    dst_t = i0 + np.arange(int(round((stop_s - start_s) * fps))) / fps
    dst_t = dst_t[dst_t <= src_t[-1]]
    return Signal(np.interp(dst_t, src_t, window.values), fps)


def make_pair_batch(records: Sequence[PreparedRecord], clip_len_s: float,
                    rng: np.random.Generator, margin_s: float = 0.0) -> tuple[Clip, Clip]:
    """Two random clips from two distinct records.

    Labels, where present, cover the clip interval widened by ``margin_s`` on
    each side (clipped to the available GT).
    """
    if len(records) < 2:
        raise InvalidConfigError("need at least 2 records to form a pair")
    clips = []
    for idx in rng.choice(len(records), size=2, replace=False):
        pr = records[int(idx)]
        length = int(round(clip_len_s * pr.fps))
        if length > pr.n_frames:
            raise InvalidConfigError(
                f"record {pr.record.record_id} has {pr.n_frames} frames, clip needs {length}")
        start = int(rng.integers(0, pr.n_frames - length + 1))
        gt = gt_clip = None
        if pr.record.phi:
            t0 = start / pr.fps
            gt = gt_for_interval(pr.record, t0 - margin_s, t0 + clip_len_s + margin_s, pr.fps)
            gt_clip = gt_for_interval(pr.record, t0, t0 + clip_len_s, pr.fps)
        clips.append(Clip(int(idx), pr.record.record_id, start,
                          pr.frames[start:start + length], pr.fps, pr.record.phi, gt, gt_clip))
    return clips[0], clips[1]


def baseline_supervised_step(model: STRppgModel, clip: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """1 - Pearson(prediction, label) for one (T, H, W, 3) clip."""
    pred = inference_rppg(model(clip[None]))[0]
    return 1.0 - pearson_tensor(pred, gt.to(pred.dtype))


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)
    epoch_ipr: list[float] = field(default_factory=list)
    initial_ipr: float = math.nan
    block_shape: tuple[int, ...] = ()
    seconds: float = 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=np.float64)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("step",) + LOSS_COLUMNS + ("ipr",))
            for row in self.rows:
                ipr_val = row.get("ipr")
                writer.writerow([row["step"]] + [repr(row[c]) for c in LOSS_COLUMNS]
                                + ["" if ipr_val is None else repr(ipr_val)])

    def to_dict(self) -> dict:
        return {"rows": self.rows, "epoch_ipr": self.epoch_ipr, "initial_ipr": self.initial_ipr,
                "block_shape": list(self.block_shape), "seconds": self.seconds}


@dataclass
class TrainResult:
    checkpoints: list[dict]         # one state_dict per epoch
    log: TrainingLog
    config: TrainConfig

    def model_at(self, epoch_index: int) -> STRppgModel:
        model = STRppgModel(self.config.model)
        model.load_state_dict(self.checkpoints[epoch_index])
        return model.eval()


def training_ipr(model: STRppgModel, records: Sequence[PreparedRecord], clip_len_s: float,
                 windows_per_video: int = 1) -> float:
    """Mean IPR of the model's spatially averaged output over training clips."""
    values = []
    for pr in records:
        length = int(round(clip_len_s * pr.fps))
        n_win = max(1, min(windows_per_video, pr.n_frames // length))
        for w in range(n_win):
            rppg = predict_rppg(model, pr.frames[w * length:(w + 1) * length], pr.fps)
            try:
                values.append(ipr(rppg))
            except InvalidInputError:
                values.append(1.0)
    return float(np.mean(values))


def _label_dataset(records: Sequence[LabeledRecord], cfg: TrainConfig) -> list[LabeledRecord]:
    seqs = np.random.SeedSequence([cfg.seed, 1]).spawn(2)
    out = list(records)
    if cfg.label_ratio is not None:
        out = mask_labels(out, cfg.label_ratio, np.random.default_rng(seqs[0]))
    if cfg.d_max_s > 0:
        rng = np.random.default_rng(seqs[1])
        out = [apply_desync(r, cfg.d_max_s, rng) if r.phi else r for r in out]
    return out


def _contrast_loss(model_out: torch.Tensor, clips: tuple[Clip, Clip], cfg: TrainConfig,
                   rng: np.random.Generator, gt_rng: np.random.Generator) -> LossBreakdown:
    fps = clips[0].fps
    band = HR_BAND if cfg.hr_band else None
    psds, gts = [], []
    for block, clip in zip(model_out, clips):
        samples = sample_st(block, fps, cfg.sampler, rng, clip.record_id)
        traces = stack_traces(samples)
        psds.append(psd_tensor(traces, fps, band=band, eps=1e-12)[0])
        if clip.gt is not None:
            gt_samples = sample_gt(clip.gt, len(samples), samples[0].trace.shape[0] / fps, gt_rng,
                                   video_id=clip.record_id)
            gt_traces = stack_traces(gt_samples).to(traces.dtype)
            gts.append(psd_tensor(gt_traces, fps, band=band, eps=1e-12)[0])
        else:
            gts.append(None)
    return loss_total(psds[0], psds[1], gts[0], gts[1], clips[0].phi, clips[1].phi,
                      use_rr_neg=cfg.use_rr_neg, use_gr_pos=cfg.use_gr_pos,
                      use_gr_neg=cfg.use_gr_neg)


def _supervised_loss(model_out: torch.Tensor, clips: tuple[Clip, Clip]) -> torch.Tensor:
    losses = []
    for pred, clip in zip(inference_rppg(model_out), clips):
        n = min(pred.shape[0], len(clip.gt_clip))
        label = torch.as_tensor(clip.gt_clip.values[:n], dtype=pred.dtype)
        losses.append(1.0 - pearson_tensor(pred[:n], label))
    return torch.stack(losses).mean()


def train(config: TrainConfig, dataset: Sequence[LabeledRecord],
          prepared: Sequence[PreparedRecord] | None = None) -> TrainResult:
    """Train from scratch; returns every epoch's weights and the step log.

    ``prepared`` lets callers reuse cropped frames across runs; its records
    are replaced by the label-masked/desynchronized versions of ``dataset``.
    """
    config.validate()
    records = _label_dataset(dataset, config)
    if prepared is None:
        prepared = prepare_records(records, config.input_size)
    else:
        prepared = [PreparedRecord(r, p.frames) for r, p in zip(records, prepared)]
    if config.method == "supervised" and not all(r.phi for r in records):
        raise InvalidConfigError("the supervised baseline needs GT on every training video")

    # GT windows draw from their own stream so labelling never perturbs the video samples
    rng, gt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([config.seed, 2]).spawn(2))
    model = STRppgModel(config.model)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    steps = config.steps_per_epoch or len(prepared)
    tlog = TrainingLog()
    tlog.initial_ipr = training_ipr(model, prepared, config.clip_len_s, config.ipr_windows_per_video)
    checkpoints = []
    started = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        model.train()
        for _ in range(steps):
            clips = make_pair_batch(prepared, config.clip_len_s, rng, margin_s=config.d_max_s)
            x = torch.as_tensor(np.stack([c.frames for c in clips]))
            out = model(x)
            if config.method == "contrast":
                parts = _contrast_loss(out, clips, config, rng, gt_rng)
                loss = parts.total
                row = parts.as_floats()
            else:
                loss = _supervised_loss(out, clips)
                row = {c: 0.0 for c in LOSS_COLUMNS}
                row["total"] = float(loss.detach())
            for name in LOSS_COLUMNS:
                if not math.isfinite(row[name]):
                    raise NonFiniteLossError(step, name, row[name])
            opt.zero_grad()
            loss.backward()
            opt.step()
            row.update(step=step, epoch=epoch + 1, ipr=None)
            tlog.rows.append(row)
            step += 1
        tlog.block_shape = tuple(out.shape[1:])
        epoch_ipr = training_ipr(model, prepared, config.clip_len_s, config.ipr_windows_per_video)
        tlog.epoch_ipr.append(epoch_ipr)
        tlog.rows[-1]["ipr"] = epoch_ipr
        checkpoints.append(copy.deepcopy(model.state_dict()))
        log.info("epoch %d/%d loss %.4f ipr %.4f", epoch + 1, config.epochs,
                 float(np.mean([r["total"] for r in tlog.rows[-steps:]])), epoch_ipr)
    tlog.seconds = time.perf_counter() - started
    return TrainResult(checkpoints, tlog, config)


def select_model(checkpoints: Sequence[dict], log: TrainingLog) -> tuple[int, dict]:
    """(epoch index, weights) with the lowest training IPR; ties go to the earliest epoch."""
    if not log.epoch_ipr:
        raise InvalidInputError("training log has no epochs")
    best = int(np.argmin(np.asarray(log.epoch_ipr)))
    return best, checkpoints[best]
