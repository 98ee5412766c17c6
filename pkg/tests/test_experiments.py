import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import kolmogorov

from cplab.errors import InvalidConfigError, InvalidInputError
from cplab.experiments import (ExperimentSpec, ablation_cells, grid_traces, kolmogorov_sf,
                               misalignment_study, run_ablation, run_desync, run_label_ratio,
                               run_noise, run_stats, run_stats_validation, to_jsonable,
                               two_sample_ks, with_overrides)
from cplab.model import ModelConfig
from cplab.report import emit_report, plot_waveform, result_payload
from cplab.sampling import SamplerConfig
from cplab.synth import SynthConfig, generate_corpus
from cplab.train import TrainConfig


def brute_ks(a, b):
    """Sup distance between ECDFs, scanning every pooled point."""
    best = 0.0
    for z in list(a) + list(b):
        fa = sum(1 for v in a if v <= z) / len(a)
        fb = sum(1 for v in b if v <= z) / len(b)
        best = max(best, abs(fa - fb))
    return best


# --- KS


def test_ks_identical_samples():
    a = np.random.default_rng(0).standard_normal(40)
    assert two_sample_ks(a, a) == (0.0, 1.0)


def test_ks_disjoint_supports():
    assert two_sample_ks([0.1, 0.2], [0.8, 0.9])[0] == 1.0
    assert two_sample_ks(np.arange(10.0), np.arange(10.0) + 100)[0] == 1.0


def test_ks_matches_oracles():
    rng = np.random.default_rng(11)
    a, b = rng.standard_normal(50), rng.standard_normal(50) + 0.5
    stat, p = two_sample_ks(a, b)
    assert abs(stat - brute_ks(a, b)) <= 1e-12
    assert abs(p - kolmogorov(stat * math.sqrt(25.0))) <= 1e-3


def test_ks_ties_and_unequal_sizes():
    a = [1.0, 1.0, 2.0, 3.0]
    b = [1.0, 2.0, 2.0, 2.0, 5.0, 5.0]
    assert two_sample_ks(a, b)[0] == pytest.approx(brute_ks(a, b), abs=1e-12)


def test_ks_empty_rejected():
    with pytest.raises(InvalidInputError):
        two_sample_ks([], [1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20),
       st.lists(st.floats(-5, 5), min_size=1, max_size=20))
def test_ks_properties(a, b):
    stat, p = two_sample_ks(a, b)
    assert stat == pytest.approx(brute_ks(a, b), abs=1e-12)
    assert two_sample_ks(b, a)[0] == stat
    assert 0 <= stat <= 1 and 0 <= p <= 1


@pytest.mark.parametrize("lam", [0.1, 0.2, 0.3, 0.5, 0.8, 1.0, 1.36, 2.0, 3.0])
def test_kolmogorov_series(lam):
    assert kolmogorov_sf(lam) == pytest.approx(kolmogorov(lam), abs=1e-9)


# --- statistical validation


def test_grid_traces_oracle(rng):
    frames = rng.random((5, 8, 8, 3))
    out = grid_traces(frames, 2)
    assert out.shape == (4, 5)
    np.testing.assert_allclose(out[1], frames[:, 0:4, 4:8, 1].mean(axis=(1, 2)))
    np.testing.assert_allclose(out[2], frames[:, 4:8, 0:4, 1].mean(axis=(1, 2)))
    with pytest.raises(InvalidConfigError):
        grid_traces(frames, 3)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(SynthConfig(n_videos=4, duration_s=10, frame_size=(32, 32),
                                       hr_range=(50, 110), seed=2))


def test_stats_duplicated_videos_null(small_corpus):
    res = run_stats_validation([small_corpus[0]] * 3, input_size=32)
    assert res.ks_statistic == 0.0 and res.p_value == 1.0
    assert sorted(res.intra_mse) == sorted(res.cross_mse)


def test_stats_sample_counts(small_corpus):
    res = run_stats_validation(small_corpus, grid=4, n_windows=4, input_size=32)
    per_video = 16 * 4 * (16 * 4 - 1)
    assert len(res.intra_mse) == 4 * per_video
    assert len(res.cross_mse) == 6 * per_video
    assert np.median(res.cross_mse) > np.median(res.intra_mse)
    assert 0 <= res.ks_statistic <= 1


def test_stats_single_video_rejected(small_corpus):
    with pytest.raises(InvalidConfigError):
        run_stats_validation(small_corpus[:1], input_size=32)


# --- misalignment


def test_misalignment_small_relative_change():
    res = misalignment_study(n_seeds=5)
    assert len(res["deltas"]) == 5
    assert res["loss_scale"] > 0.1
    assert res["ratio"] <= 0.05


def test_misalignment_no_shift_is_exact():
    res = misalignment_study(n_seeds=3, max_shift_s=0.0)
    assert res["mean_abs_delta"] == 0.0


# --- config helpers


def test_with_overrides_nested():
    cfg = with_overrides(TrainConfig(), {"epochs": 3, "model.S": 4, "model.widths": [2, 2, 2],
                                         "sampler.K": 1})
    assert cfg.epochs == 3 and cfg.model.S == 4 and cfg.model.widths == (2, 2, 2)
    assert cfg.sampler.K == 1 and TrainConfig().model.S == 2
    with pytest.raises(InvalidConfigError):
        with_overrides(TrainConfig(), {"nope": 1})
    with pytest.raises(InvalidConfigError):
        with_overrides(TrainConfig(), {"epochs.x": 1})


def test_to_jsonable():
    out = to_jsonable({"a": math.nan, "b": (1, np.float64(2.5)), "c": np.arange(2),
                       "d": np.bool_(True), "e": SamplerConfig()})
    assert out == {"a": None, "b": [1, 2.5], "c": [0, 1], "d": True,
                   "e": {"K": 4, "delta_t_s": 5.0, "seed": 0}}
    json.dumps(out, allow_nan=False)


def test_spec_validation():
    with pytest.raises(InvalidConfigError):
        ExperimentSpec("unknown").validate()
    with pytest.raises(InvalidConfigError):
        ExperimentSpec("label_ratio", sweep=[0.0, 1.5]).validate()
    with pytest.raises(InvalidConfigError):
        ExperimentSpec("desync", sweep=[-1.0]).validate()
    with pytest.raises(InvalidConfigError):
        ExperimentSpec("ablation", sweep=["S=3"]).validate()
    assert ExperimentSpec("label_ratio", full=True).sweep_values() == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    assert ExperimentSpec("desync").sweep_values() == [0.0, 0.25, 0.5, 1.0, 2.0]


def test_ablation_grid():
    full = dict(ablation_cells(True))
    assert [k for k in full if k.startswith("S=")] == ["S=1", "S=2", "S=4", "S=8"]
    assert [k for k in full if k.startswith("T=")] == ["T=5", "T=10", "T=30"]
    assert full["dt=0.25T"] == {"sampler.delta_t_s": 2.5}
    assert full["temporal_off"]["sampler.K"] == 1
    assert full["temporal_off"]["sampler.delta_t_s"] < 10.0
    assert full["cross_video_off"] == {"use_rr_neg": False}
    assert full["hr_range_off"] == {"hr_band": False}
    assert len(ablation_cells(False)) < len(full)


# --- end-to-end families on a tiny setup


def tiny_spec(family, **kw):
    base = dict(
        corpus=SynthConfig(n_videos=3, duration_s=8, frame_size=(32, 32), seed=4),
        train=TrainConfig(epochs=1, lr=1e-3, clip_len_s=4.0, input_size=32, steps_per_epoch=2,
                          sampler=SamplerConfig(K=2, delta_t_s=2.0),
                          model=ModelConfig(widths=(4, 4, 4))),
        n_test=1, test_duration_s=30.0, saliency_clip_s=4.0,
    )
    base.update(kw)
    return ExperimentSpec(family, **base)


def test_label_ratio_family():
    spec = tiny_spec("label_ratio", sweep=[0.0, 1.0])
    res = run_label_ratio(spec)
    assert [r["ratio"] for r in res.rows] == [0.0, 1.0]
    assert list(res.reports) == ["ratio=0/seed=0", "ratio=1/seed=0"]
    assert np.all(res.logs["ratio=0/seed=0"].column("l_p_gr") == 0)
    assert np.all(res.logs["ratio=1/seed=0"].column("l_p_gr") != 0)
    again = run_label_ratio(spec)
    assert to_jsonable(again.rows) == to_jsonable(res.rows)


def test_desync_family():
    res = run_desync(tiny_spec("desync", sweep=[0.5, 0.0]))
    assert [(r["d_max"], r["method"]) for r in res.rows] == [
        (0.0, "cp_plus"), (0.0, "baseline"), (0.5, "cp_plus"), (0.5, "baseline")]
    assert res.ok
    with pytest.raises(InvalidConfigError):
        run_desync(replace(tiny_spec("desync"), train=replace(tiny_spec("desync").train,
                                                               label_ratio=0.5)))


def test_noise_family():
    res = run_noise(tiny_spec("noise"))
    clean, noise = res.rows
    assert clean["arm"] == "clean" and clean["patch_saliency"] is None
    assert 0 < clean["skin_fraction"] <= 1
    assert noise["patch_saliency"] > 0 and noise["skin_saliency"] > 0
    assert np.asarray(res.extras["saliency_maps"]["noise/seed=0"]).shape == (32, 32)


def test_ablation_family():
    res = run_ablation(tiny_spec("ablation", sweep=["S=1", "cross_video_off", "T=30"]))
    s1, cross, too_long = res.rows
    assert s1["block_shape"] == [120, 1, 1]
    assert "l_n_rr" in cross["zero_columns"]
    assert "error" in too_long and not res.ok


def test_stats_family():
    spec = tiny_spec("stats", corpus=SynthConfig(n_videos=3, duration_s=10, frame_size=(32, 32)))
    res = run_stats(spec)
    assert res.rows[0]["n_intra"] == len(res.extras["intra_mse"])
    assert 0 <= res.rows[0]["p_value"] <= 1


# --- report emission


@pytest.fixture(scope="module")
def ratio_result():
    return run_label_ratio(tiny_spec("label_ratio", sweep=[1.0]))


def test_emit_report_roundtrip(tmp_path, ratio_result):
    out = emit_report(ratio_result, tmp_path / "rep")
    names = {p.name for p in out.iterdir()}
    assert {"results.json", "results.csv", "ipr_curves.png", "label_ratio.png"} <= names
    assert any(n.startswith("waveform_") for n in names)
    assert json.loads((out / "results.json").read_text()) == result_payload(ratio_result)
    # rewriting replaces the directory wholesale
    emit_report(ratio_result, out)
    assert not list(tmp_path.glob(".rep*"))


def test_emit_report_empty_writes_nothing(tmp_path, ratio_result):
    with pytest.raises(InvalidInputError):
        emit_report(replace(ratio_result, rows=[]), tmp_path / "rep")
    assert list(tmp_path.iterdir()) == []


def test_emit_report_unwritable(tmp_path, ratio_result):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(ratio_result, blocker / "rep")


def test_waveform_overlay_has_both_traces(ratio_result):
    traces = next(iter(ratio_result.reports["ratio=1/seed=0"].traces.values()))
    fig = plot_waveform(traces)
    labels = [line.get_label() for line in fig.axes[0].get_lines()]
    assert labels == ["rPPG", "GT"]
    fig2 = plot_waveform({**traces, "gt": None})
    assert [line.get_label() for line in fig2.axes[0].get_lines()] == ["rPPG"]
