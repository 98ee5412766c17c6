"""Experiment families: label-ratio and desync sweeps, noise robustness,
statistical validation of the rPPG observations, ablations and saliency."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Any, Callable, Sequence

import numpy as np
import torch

from .errors import CplabError, InvalidConfigError, InvalidInputError
from .evaluate import EvalReport, evaluate
from .losses import loss_gr_pos
from .model import STRppgModel, saliency_map
from .sampling import SamplerConfig, sample_gt, sample_st, stack_traces
from .signal import psd_tensor
from .synth import (LabeledRecord, SynthConfig, generate_corpus, generate_ppg, prepare_video,
                    region_mask)
from .train import PreparedRecord, TrainConfig, TrainingLog, gt_for_interval, prepare_records, \
    select_model, train

log = logging.getLogger(__name__)

FAMILIES = ("label_ratio", "desync", "noise", "stats", "ablation", "saliency")

DESK_SWEEPS = {
    "label_ratio": [0.0, 0.5, 1.0],
    "desync": [0.0, 0.25, 0.5, 1.0, 2.0],
}
FULL_SWEEPS = {
    "label_ratio": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "desync": [0.0, 0.25, 0.5, 1.0, 2.0],
}


def _desk_train() -> TrainConfig:
    return TrainConfig(lr=1e-3, input_size=64)


@dataclass
class ExperimentSpec:
    family: str
    sweep: list | None = None               # None -> family default
    corpus: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=_desk_train)
    n_test: int = 4
    test_duration_s: float | None = None    # None -> corpus duration
    seeds: list[int] = field(default_factory=lambda: [0])
    stats_grid: int = 4
    stats_windows: int = 4
    stats_window_s: float = 5.0
    saliency_clip_s: float = 10.0
    full: bool = False

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise InvalidConfigError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        sweep = self.sweep_values()
        if self.family == "label_ratio" and any(not 0 <= v <= 1 for v in sweep):
            raise InvalidConfigError(f"label ratios must lie in [0, 1], got {sweep}")
        if self.family == "desync" and any(v < 0 for v in sweep):
            raise InvalidConfigError(f"d_max values must be >= 0, got {sweep}")
        if self.family == "ablation":
            known = {name for name, _ in ablation_cells(True, self.train.clip_len_s,
                                                        self.corpus.fps)}
            unknown = [v for v in sweep if v not in known]
            if unknown:
                raise InvalidConfigError(f"unknown ablation cells {unknown}")
        if not self.seeds:
            raise InvalidConfigError("at least one seed is required")
        if self.n_test < 1:
            raise InvalidConfigError("n_test must be >= 1")
        self.corpus.validate()
        self.train.validate()

    def sweep_values(self) -> list:
        if self.sweep is not None:
            return list(self.sweep)
        if self.family == "ablation":
            return [name for name, _ in ablation_cells(self.full, self.train.clip_len_s,
                                                       self.corpus.fps)]
        return list((FULL_SWEEPS if self.full else DESK_SWEEPS).get(self.family, []))


@dataclass
class ExperimentResult:
    family: str
    spec: dict
    rows: list[dict]
    reports: dict[str, EvalReport] = field(default_factory=dict)
    logs: dict[str, TrainingLog] = field(default_factory=dict)
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all("error" not in row for row in self.rows)


@dataclass
class StatsResult:
    intra_mse: list[float]
    cross_mse: list[float]
    ks_statistic: float
    p_value: float


# ---------------------------------------------------------------------------
# configuration helpers


def with_overrides(obj, overrides: dict[str, Any]):
    """Copy of a (nested) dataclass with dotted-key overrides applied."""
    grouped: dict[str, dict[str, Any]] = {}
    direct: dict[str, Any] = {}
    for key, value in overrides.items():
        head, _, rest = key.partition(".")
        if rest:
            grouped.setdefault(head, {})[rest] = value
        else:
            direct[key] = value
    names = {f.name: f for f in fields(obj)}
    for key in list(direct) + list(grouped):
        if key not in names:
            raise InvalidConfigError(f"{type(obj).__name__} has no field {key!r}")
    for key, value in direct.items():
        current = getattr(obj, key)
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        direct[key] = value
    for key, sub in grouped.items():
        child = getattr(obj, key)
        if not is_dataclass(child):
            raise InvalidConfigError(f"{type(obj).__name__}.{key} has no nested fields")
        direct[key] = with_overrides(child, sub)
    return replace(obj, **direct)


def to_jsonable(value):
    """Plain JSON types; non-finite floats become None."""
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_jsonable(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


# ---------------------------------------------------------------------------
# shared plumbing


def make_split(spec: ExperimentSpec, corpus: SynthConfig | None = None
               ) -> tuple[list[LabeledRecord], list[LabeledRecord]]:
    """Training corpus plus an independently seeded test corpus."""
    cfg = corpus or spec.corpus
    train_recs = generate_corpus(cfg)
    test_seed = int(np.random.SeedSequence([cfg.seed, 7]).generate_state(1)[0])
    test_cfg = replace(cfg, n_videos=spec.n_test, seed=test_seed,
                       duration_s=spec.test_duration_s or cfg.duration_s)
    test_recs = [replace(r, record_id="t" + r.record_id[1:]) for r in generate_corpus(test_cfg)]
    return train_recs, test_recs


@dataclass
class _Data:
    train: list[LabeledRecord]
    test: list[LabeledRecord]
    prepared: list[PreparedRecord]
    test_frames: list[np.ndarray]


def _prepare(spec: ExperimentSpec, corpus: SynthConfig | None = None) -> _Data:
    tr, te = make_split(spec, corpus)
    size = spec.train.input_size
    return _Data(tr, te, prepare_records(tr, size), [prepare_video(r, size).frames for r in te])


def _fit(tcfg: TrainConfig, data: _Data) -> tuple[STRppgModel, int, TrainingLog]:
    result = train(tcfg, data.train, prepared=data.prepared)
    epoch, _ = select_model(result.checkpoints, result.log)
    return result.model_at(epoch), epoch, result.log


def _fit_eval(tcfg: TrainConfig, data: _Data) -> tuple[EvalReport, TrainingLog, int, STRppgModel]:
    model, epoch, tlog = _fit(tcfg, data)
    report = evaluate(model, data.test, input_size=tcfg.input_size, frames=data.test_frames)
    return report, tlog, epoch, model


def _metrics_row(report: EvalReport, tlog: TrainingLog, epoch: int) -> dict:
    return {**report.summary(), "selected_epoch": epoch + 1,
            "initial_ipr": tlog.initial_ipr, "final_train_ipr": tlog.epoch_ipr[-1]}


def _run_cell(rows: list[dict], base: dict, fn: Callable[[], dict]) -> None:
    """Run one sweep cell; a library error is recorded in the row instead of raised."""
    try:
        rows.append({**base, **fn()})
    except CplabError as exc:
        log.error("cell %s failed: %s", base, exc)
        rows.append({**base, "error": f"{type(exc).__name__}: {exc}"})


def _result(spec: ExperimentSpec, rows, reports, logs, extras=None) -> ExperimentResult:
    return ExperimentResult(spec.family, to_jsonable(spec), rows, reports, logs, extras or {})


# ---------------------------------------------------------------------------
# label ratio


def run_label_ratio(spec: ExperimentSpec) -> ExperimentResult:
    spec.validate()
    data = _prepare(spec)
    rows, reports, logs = [], {}, {}
    for seed, ratio in itertools.product(spec.seeds, spec.sweep_values()):
        key = f"ratio={ratio:g}/seed={seed}"

        def cell(ratio=ratio, seed=seed, key=key):
            tcfg = replace(spec.train, label_ratio=float(ratio), seed=seed, method="contrast")
            report, tlog, epoch, _ = _fit_eval(tcfg, data)
            reports[key], logs[key] = report, tlog
            return _metrics_row(report, tlog, epoch)
        _run_cell(rows, {"key": key, "ratio": float(ratio), "seed": seed}, cell)
    return _result(spec, rows, reports, logs)


# ---------------------------------------------------------------------------
# desynchronization


def run_desync(spec: ExperimentSpec) -> ExperimentResult:
    spec.validate()
    if spec.train.label_ratio not in (None, 1.0):
        raise InvalidConfigError("the desync sweep needs label ratio 1.0")
    data = _prepare(spec)
    rows, reports, logs = [], {}, {}
    for seed, d_max in itertools.product(spec.seeds, sorted(spec.sweep_values())):
        for method, name in (("contrast", "cp_plus"), ("supervised", "baseline")):
            key = f"{name}/d_max={d_max:g}/seed={seed}"

            def cell(d_max=d_max, seed=seed, method=method, key=key):
                tcfg = replace(spec.train, label_ratio=1.0, d_max_s=float(d_max), seed=seed,
                               method=method)
                report, tlog, epoch, _ = _fit_eval(tcfg, data)
                reports[key], logs[key] = report, tlog
                return _metrics_row(report, tlog, epoch)
            _run_cell(rows, {"key": key, "d_max": float(d_max), "method": name, "seed": seed},
                      cell)
    return _result(spec, rows, reports, logs)


# ---------------------------------------------------------------------------
# saliency and noise robustness


def saliency_stats(model: STRppgModel, records: Sequence[LabeledRecord], frames: Sequence[np.ndarray],
                   clip_s: float, input_size: int) -> dict:
    """Mean saliency inside the skin and patch masks, averaged over records."""
    skin_means, patch_means, skin_fracs, maps = [], [], [], []
    for record, fr in zip(records, frames):
        n = min(len(fr), int(round(clip_s * record.video.fps)))
        ref = gt_for_interval(record, 0.0, n / record.video.fps, record.video.fps)
        n = min(n, len(ref))
        sal = saliency_map(model, fr[:n], ref.values[:n])
        skin = region_mask(record, "skin", input_size)
        skin_means.append(float((sal * skin).sum() / skin.sum()))
        skin_fracs.append(float((sal * skin).sum() / sal.sum()))
        patch = region_mask(record, "patch", input_size)
        if patch.sum() > 0:
            patch_means.append(float((sal * patch).sum() / patch.sum()))
        maps.append(sal)
    return {
        "skin_saliency": float(np.mean(skin_means)),
        "patch_saliency": float(np.mean(patch_means)) if patch_means else None,
        "skin_fraction": float(np.mean(skin_fracs)),
        "map": np.mean(maps, axis=0),
    }


def run_noise(spec: ExperimentSpec) -> ExperimentResult:
    spec.validate()
    rows, reports, logs, maps = [], {}, {}, {}
    arms = (("clean", replace(spec.corpus, patch_enabled=False)),
            ("noise", replace(spec.corpus, patch_enabled=True)))
    for arm, corpus in arms:
        data = _prepare(spec, corpus)
        for seed in spec.seeds:
            key = f"{arm}/seed={seed}"

            def cell(data=data, seed=seed, key=key):
                tcfg = replace(spec.train, label_ratio=0.0, seed=seed, method="contrast")
                report, tlog, epoch, model = _fit_eval(tcfg, data)
                reports[key], logs[key] = report, tlog
                sal = saliency_stats(model, data.test, data.test_frames, spec.saliency_clip_s,
                                     tcfg.input_size)
                maps[key] = sal.pop("map").tolist()
                return {**_metrics_row(report, tlog, epoch), **sal}
            _run_cell(rows, {"key": key, "arm": arm, "seed": seed}, cell)
    return _result(spec, rows, reports, logs, {"saliency_maps": maps})


def run_saliency(spec: ExperimentSpec) -> ExperimentResult:
    """Train unsupervised on the experiment corpus and render test-set saliency maps."""
    spec.validate()
    data = _prepare(spec)
    rows, reports, logs, maps = [], {}, {}, {}
    for seed in spec.seeds:
        key = f"seed={seed}"

        def cell(seed=seed, key=key):
            tcfg = replace(spec.train, seed=seed)
            report, tlog, epoch, model = _fit_eval(tcfg, data)
            reports[key], logs[key] = report, tlog
            sal = saliency_stats(model, data.test, data.test_frames, spec.saliency_clip_s,
                                 tcfg.input_size)
            maps[key] = sal.pop("map").tolist()
            return {**_metrics_row(report, tlog, epoch), **sal}
        _run_cell(rows, {"key": key, "seed": seed}, cell)
    return _result(spec, rows, reports, logs, {"saliency_maps": maps})


# ---------------------------------------------------------------------------
# statistical validation of the observations


def two_sample_ks(a, b) -> tuple[float, float]:
    """Two-sample KS statistic and its asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise InvalidInputError("KS test needs two non-empty samples")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    stat = float(np.max(np.abs(cdf_a - cdf_b)))
    lam = stat * math.sqrt(a.size * b.size / (a.size + b.size))
    return stat, kolmogorov_sf(lam)


def kolmogorov_sf(lam: float, terms: int = 100) -> float:
    """P(K > lam) for the Kolmogorov distribution via its alternating series."""
    if lam < 0.2:     # the series converges slowly here and the value is 1 to 1e-9
        return 1.0
    k = np.arange(1, terms + 1)
    total = 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k ** 2 * lam ** 2))
    return float(min(1.0, max(0.0, total)))


def grid_traces(frames: np.ndarray, grid: int) -> np.ndarray:
    """Green-channel means over a grid x grid partition: (grid * grid, T)."""
    t, h, w, _ = frames.shape
    if h % grid or w % grid:
        raise InvalidConfigError(f"frame size {h}x{w} is not divisible by grid {grid}")
    g = frames[..., 1].reshape(t, grid, h // grid, grid, w // grid).mean(axis=(2, 4))
    return g.reshape(t, grid * grid).T.astype(np.float64)


def _video_psds(frames: np.ndarray, fps: float, grid: int, n_windows: int,
                window_s: float) -> np.ndarray:
    traces = grid_traces(frames, grid)
    length = int(round(window_s * fps))
    if length > traces.shape[1]:
        raise InvalidConfigError(f"stats window of {window_s} s exceeds the video")
    starts = np.linspace(0, traces.shape[1] - length, n_windows).round().astype(int)
    windows = np.concatenate([traces[:, s:s + length] for s in starts])
    power, _ = psd_tensor(torch.as_tensor(windows), fps)
    return power.numpy()


def _pair_mse(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """MSE between x[i] and y[j] for all ordered i != j."""
    d = ((x[:, None, :] - y[None, :, :]) ** 2).mean(axis=-1)
    return d[~np.eye(len(x), dtype=bool)]


def run_stats_validation(records: Sequence[LabeledRecord], grid: int = 4, n_windows: int = 4,
                         window_s: float = 5.0, input_size: int = 64) -> StatsResult:
    """Intra- vs cross-video PSD distances from raw pixel traces (no model, no GT).

    Each video contributes grid^2 * n_windows PSDs.  Intra pairs are ordered
    pairs of distinct samples of one video; cross pairs match sample i of one
    video with sample j != i of another, so identical videos give identical
    distributions.
    """
    if len(records) < 2:
        raise InvalidConfigError("statistical validation needs at least 2 videos")
    psds = [_video_psds(prepare_video(r, input_size).frames, r.video.fps, grid, n_windows,
                        window_s) for r in records]
    intra = np.concatenate([_pair_mse(p, p) for p in psds])
    cross = np.concatenate([_pair_mse(psds[i], psds[j])
                            for i, j in itertools.combinations(range(len(psds)), 2)])
    stat, p = two_sample_ks(intra, cross)
    return StatsResult(intra.tolist(), cross.tolist(), stat, p)


def run_stats(spec: ExperimentSpec) -> ExperimentResult:
    spec.validate()
    res = run_stats_validation(generate_corpus(spec.corpus), spec.stats_grid, spec.stats_windows,
                               spec.stats_window_s, spec.train.input_size)
    row = {"key": "stats", "n_intra": len(res.intra_mse), "n_cross": len(res.cross_mse),
           "intra_median": float(np.median(res.intra_mse)),
           "cross_median": float(np.median(res.cross_mse)),
           "ks_statistic": res.ks_statistic, "p_value": res.p_value}
    return _result(spec, [row], {}, {}, {"intra_mse": res.intra_mse, "cross_mse": res.cross_mse})


# ---------------------------------------------------------------------------
# ablations


def ablation_cells(full: bool, clip_len_s: float = 10.0, fps: float = 30.0
                   ) -> list[tuple[str, dict[str, Any]]]:
    """(name, TrainConfig overrides) per ablation cell."""
    s_values = (1, 2, 4, 8) if full else (1, 2)
    t_values = (5.0, 10.0, 30.0) if full else (5.0, 10.0)
    dt_fracs = (0.25, 0.5, 0.75) if full else (0.25, 0.75)
    cells = [(f"S={s}", {"model.S": s}) for s in s_values]
    cells += [(f"T={t:g}", {"clip_len_s": t, "sampler.delta_t_s": t / 2}) for t in t_values]
    cells += [(f"dt={f:g}T", {"sampler.delta_t_s": f * clip_len_s}) for f in dt_fracs]
    cells += [
        ("spatial_off", {"model.S": 1}),
        # the sampler needs dt < T, so one frame short of the block is the closest setting
        ("temporal_off", {"sampler.delta_t_s": clip_len_s - 1.0 / fps, "sampler.K": 1}),
        ("cross_video_off", {"use_rr_neg": False}),
        ("hr_range_off", {"hr_band": False}),
        ("gt_full", {"label_ratio": 1.0}),
        ("gt_pos_off", {"label_ratio": 1.0, "use_gr_pos": False}),
        ("gt_neg_off", {"label_ratio": 1.0, "use_gr_neg": False}),
    ]
    return cells


def run_ablation(spec: ExperimentSpec) -> ExperimentResult:
    spec.validate()
    cells = dict(ablation_cells(True, spec.train.clip_len_s, spec.corpus.fps))
    data = _prepare(spec)
    rows, reports, logs = [], {}, {}
    for seed, name in itertools.product(spec.seeds, spec.sweep_values()):
        key = f"{name}/seed={seed}"

        def cell(name=name, seed=seed, key=key):
            tcfg = with_overrides(replace(spec.train, seed=seed), cells[name])
            report, tlog, epoch, _ = _fit_eval(tcfg, data)
            reports[key], logs[key] = report, tlog
            zero_cols = [c for c in ("l_p_rr", "l_n_rr", "l_p_gr", "l_n_gr")
                         if np.all(tlog.column(c) == 0)]
            return {**_metrics_row(report, tlog, epoch), "block_shape": list(tlog.block_shape),
                    "zero_columns": zero_cols}
        _run_cell(rows, {"key": key, "cell": name, "seed": seed}, cell)
    return _result(spec, rows, reports, logs)


# ---------------------------------------------------------------------------
# misalignment robustness of the GT positive term


def misalignment_study(n_seeds: int = 50, max_shift_s: float = 0.5, hr_bpm: float = 72.0,
                       other_hr_bpm: float = 102.0, clip_s: float = 10.0, fps: float = 30.0,
                       sampler: SamplerConfig | None = None, noise_std: float = 0.3,
                       seed: int = 0) -> dict:
    """Effect of shifting a constant-HR GT on loss_gr_pos.

    For each sampler seed an S x S block of noisy copies of the pulse is
    sampled against GT windows taken unshifted and shifted by u ~ U(-max, max)
    (same window starts).  The loss scale is loss_gr_pos against a GT at a
    different heart rate.
    """
    sampler = sampler or SamplerConfig()
    n = int(round(clip_s * fps))
    margin = int(math.ceil(max_shift_s * fps))
    root = np.random.SeedSequence(seed)
    deltas, scales = [], []
    for child in root.spawn(n_seeds):
        rng = np.random.default_rng(child)
        ppg = generate_ppg((n + 2 * margin) / fps, fps, hr_bpm, (1.0, 0.4), rng).values
        other = generate_ppg(clip_s, fps, other_hr_bpm, (1.0, 0.4), rng).values
        clip = ppg[margin:margin + n]
        block = clip[:, None, None] + noise_std * rng.standard_normal((n, 2, 2))
        f = stack_traces(sample_st(torch.as_tensor(block), fps, sampler, rng))
        k = int(np.clip(round(rng.uniform(-max_shift_s, max_shift_s) * fps), -margin, margin))
        n_samples, dt = f.shape[0], sampler.delta_t_s
        gt_state = rng.bit_generator.state

        def gt_psd(values):
            rng.bit_generator.state = gt_state
            g = stack_traces(sample_gt(torch.as_tensor(values), n_samples, dt, rng, fps=fps))
            return psd_tensor(g, fps)[0]
        f_psd = psd_tensor(f, fps)[0]
        base = float(loss_gr_pos(f_psd, gt_psd(clip), f_psd, None, 1, 0))
        shifted = float(loss_gr_pos(f_psd, gt_psd(ppg[margin + k:margin + k + n]), f_psd, None, 1, 0))
        mismatch = float(loss_gr_pos(f_psd, gt_psd(other), f_psd, None, 1, 0))
        deltas.append(abs(shifted - base))
        scales.append(mismatch)
    mean_delta, scale = float(np.mean(deltas)), float(np.mean(scales))
    return {"mean_abs_delta": mean_delta, "loss_scale": scale, "ratio": mean_delta / scale,
            "deltas": deltas}


RUNNERS: dict[str, Callable[[ExperimentSpec], ExperimentResult]] = {
    "label_ratio": run_label_ratio,
    "desync": run_desync,
    "noise": run_noise,
    "stats": run_stats,
    "ablation": run_ablation,
    "saliency": run_saliency,
}


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    spec.validate()
    return RUNNERS[spec.family](spec)
