"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line before asserting.  The
training-based criteria (6-8, 10) share runs through a module-scoped cache
and take roughly 15-20 minutes on one CPU core.
"""
import time
from dataclasses import replace
from functools import cached_property

import numpy as np
import pytest
import torch

from cplab.errors import FormatError
from cplab.evaluate import evaluate
from cplab.experiments import (ExperimentSpec, make_split, misalignment_study,
                               run_stats_validation, saliency_stats, two_sample_ks)
from cplab.losses import loss_gr_neg, loss_gr_pos, loss_rr_neg, loss_rr_pos, loss_total
from cplab.sampling import SamplerConfig, sample_st
from cplab.signal import Signal, compute_psd, hr_from_signal, pearson_tensor, psd_tensor
from cplab.store import load_dataset, records_equal, store_dataset
from cplab.synth import SynthConfig, generate_corpus, prepare_video
from cplab.train import TrainConfig, prepare_records, select_model, train


_terminal = None


@pytest.fixture(autouse=True)
def _terminal_writer(request):
    global _terminal
    _terminal = request.config.pluginmanager.getplugin("terminalreporter")


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
    if _terminal is not None:
        _terminal.write_line("")
        _terminal.write_line(line)
    else:
        print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# literal double-loop oracles


def sq(a, b):
    return float(np.sum((np.asarray(a) - np.asarray(b)) ** 2))


def oracle_rr_pos(f, f2):
    n = len(f)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                total += sq(f[i], f[j]) + sq(f2[i], f2[j])
    return total / (2 * n * (n - 1))


def oracle_rr_neg(f, f2):
    n = len(f)
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += sq(f[i], f2[j])
    return -total / n ** 2


def oracle_gr(f, g, f2, g2, phi, phi2, negative):
    if phi + phi2 == 0:
        return 0.0
    n = len(f)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if negative:
                total += (phi * sq(f2[i], g[j]) if phi else 0.0) + \
                         (phi2 * sq(f[i], g2[j]) if phi2 else 0.0)
            else:
                total += (phi * sq(f[i], g[j]) if phi else 0.0) + \
                         (phi2 * sq(f2[i], g2[j]) if phi2 else 0.0)
    value = total / ((phi + phi2) * n ** 2)
    return -value if negative else value


def random_psds(rng, n, bins):
    x = rng.random((n, bins))
    return x / x.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# shared training runs


TRAIN_CFG = TrainConfig(lr=1e-3, input_size=64, seed=0)     # 30 epochs, 10-s clips, S=2, K=4


class Runs:
    """Lazily trained models on the 8 + 4 video synthetic split."""

    def __init__(self):
        self.spec = ExperimentSpec("label_ratio", corpus=SynthConfig(n_videos=8, seed=0),
                                   n_test=4, test_duration_s=60.0)
        self.timings: dict[str, float] = {}

    def _data(self, corpus):
        tr, te = make_split(self.spec, corpus)
        return tr, te, prepare_records(tr, 64), [prepare_video(r, 64).frames for r in te]

    @cached_property
    def clean(self):
        return self._data(self.spec.corpus)

    @cached_property
    def noisy(self):
        return self._data(replace(self.spec.corpus, patch_enabled=True))

    def fit(self, name, data, **overrides):
        tr, te, prepared, test_frames = data
        cfg = replace(TRAIN_CFG, **overrides)
        start = time.perf_counter()
        result = train(cfg, tr, prepared=prepared)
        epoch, _ = select_model(result.checkpoints, result.log)
        model = result.model_at(epoch)
        report = evaluate(model, te, input_size=64, frames=test_frames)
        self.timings[name] = time.perf_counter() - start
        return {"result": result, "model": model, "report": report, "epoch": epoch}

    @cached_property
    def unsup(self):
        return self.fit("unsup", self.clean, label_ratio=0.0)

    @cached_property
    def sup100(self):
        return self.fit("sup100", self.clean, label_ratio=1.0)

    @cached_property
    def sup100_desync(self):
        return self.fit("sup100_desync", self.clean, label_ratio=1.0, d_max_s=1.0)

    @cached_property
    def baseline(self):
        return self.fit("baseline", self.clean, label_ratio=1.0, method="supervised")

    @cached_property
    def baseline_desync(self):
        return self.fit("baseline_desync", self.clean, label_ratio=1.0, method="supervised",
                        d_max_s=1.0)

    @cached_property
    def noise_unsup(self):
        return self.fit("noise_unsup", self.noisy, label_ratio=0.0)


@pytest.fixture(scope="module")
def runs():
    torch.set_num_threads(1)
    return Runs()


# ---------------------------------------------------------------------------


def test_criterion_01_loss_oracles():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 33))
        bins = int(rng.integers(3, 40))
        phi, phi2 = (int(v) for v in rng.integers(0, 2, size=2))
        f, f2 = random_psds(rng, n, bins), random_psds(rng, n, bins)
        g = random_psds(rng, n, bins) if phi else None
        g2 = random_psds(rng, n, bins) if phi2 else None
        t = lambda a: None if a is None else torch.as_tensor(a)
        got = loss_total(t(f), t(f2), t(g), t(g2), phi, phi2).as_floats()
        expect = {
            "l_p_rr": oracle_rr_pos(f, f2),
            "l_n_rr": oracle_rr_neg(f, f2),
            "l_p_gr": oracle_gr(f, g, f2, g2, phi, phi2, negative=False),
            "l_n_gr": oracle_gr(f, g, f2, g2, phi, phi2, negative=True),
        }
        expect["total"] = sum(expect.values())
        separate = {
            "l_p_rr": float(loss_rr_pos(t(f), t(f2))),
            "l_n_rr": float(loss_rr_neg(t(f), t(f2))),
            "l_p_gr": float(loss_gr_pos(t(f), t(g), t(f2), t(g2), phi, phi2)),
            "l_n_gr": float(loss_gr_neg(t(f), t(g), t(f2), t(g2), phi, phi2)),
        }
        for key, value in expect.items():
            worst = max(worst, abs(got[key] - value))
            if key in separate:
                worst = max(worst, abs(separate[key] - value))
    elapsed = time.perf_counter() - start
    verdict(1, worst <= 1e-9 and elapsed < 10,
            f"max |loss - oracle| = {worst:.2e} over 100 instances, {elapsed:.1f} s")


def test_criterion_02_sampler_law():
    start = time.perf_counter()
    fps, t_len = 30.0, 300
    cfg = SamplerConfig(K=4, delta_t_s=5.0)
    block = torch.zeros(t_len, 2, 2)
    ok = True
    for seed in range(1000):
        samples = sample_st(block, fps, cfg, np.random.default_rng(seed))
        cells = [(s.h, s.w) for s in samples]
        ok &= len(samples) == 16
        ok &= all(cells.count(c) == 4 for c in {(0, 0), (0, 1), (1, 0), (1, 1)})
        ok &= all(0 <= s.t <= (t_len - 150) / fps and s.trace.shape[0] == 150 for s in samples)
    elapsed = time.perf_counter() - start
    verdict(2, ok and elapsed < 5,
            f"1000 draws: 16 samples, 4 per cell, starts in [0, T-dt]; {elapsed:.2f} s")


def test_criterion_03_phi_gating(runs):
    rng = np.random.default_rng(3)
    exact = True
    for _ in range(100):
        n, bins = int(rng.integers(2, 33)), int(rng.integers(3, 40))
        f, f2 = (torch.as_tensor(random_psds(rng, n, bins)) for _ in range(2))
        out = loss_total(f, f2, None, None, 0, 0)
        exact &= bool(out.total == out.l_p_rr + out.l_n_rr)
    tlog = runs.unsup["result"].log
    zero = bool(np.all(tlog.column("l_p_gr") == 0) and np.all(tlog.column("l_n_gr") == 0))
    verdict(3, exact and zero,
            f"phi=phi'=0 total bit-exact: {exact}; ratio-0 run ({len(tlog.rows)} steps) "
            f"GT columns all zero: {zero}")


def test_criterion_04_spectral_correctness():
    rng = np.random.default_rng(4)
    sums = [compute_psd(Signal(rng.standard_normal(int(n)), 30.0)).power.sum()
            for n in rng.integers(150, 901, size=50)]
    sum_err = float(np.max(np.abs(np.array(sums) - 1)))

    fps, n = 30.0, 600
    misses = []
    for k in range(14, 84):     # grid frequencies k * fps / n cover 42-249 bpm
        freq = k * fps / n
        x = np.cos(2 * np.pi * freq * np.arange(n) / fps + rng.uniform(0, 2 * np.pi))
        if hr_from_signal(Signal(x, fps)) != 60 * freq:
            misses.append(k)

    def rel_fd_error(fn, x):
        x = x.clone().requires_grad_(True)
        fn(x).backward()
        grad = x.grad.clone()
        eps = 1e-6
        num = torch.zeros_like(x)
        for i in range(x.numel()):
            e = torch.zeros_like(x)
            e.view(-1)[i] = eps
            num.view(-1)[i] = (fn(x.detach() + e) - fn(x.detach() - e)) / (2 * eps)
        return float((grad - num).norm() / num.norm())

    sig = torch.as_tensor(rng.standard_normal(150))
    weights = torch.as_tensor(rng.standard_normal(psd_tensor(sig, 30.0)[0].shape[-1]))
    ref = torch.as_tensor(rng.standard_normal(150))
    psd_err = rel_fd_error(lambda x: (psd_tensor(x, 30.0)[0] * weights).sum(), sig)
    pearson_err = rel_fd_error(lambda x: pearson_tensor(x, ref), sig)
    ok = sum_err <= 1e-9 and not misses and psd_err < 1e-3 and pearson_err < 1e-3
    verdict(4, ok, f"PSD sum err {sum_err:.1e}; {70 - len(misses)}/70 grid tones exact; "
                   f"grad rel err PSD {psd_err:.1e}, Pearson {pearson_err:.1e}")


def test_criterion_05_statistical_validation():
    start = time.perf_counter()
    corpus = generate_corpus(SynthConfig(n_videos=12, hr_range=(50, 110), seed=5))
    res = run_stats_validation(corpus, grid=4, n_windows=4, window_s=5.0, input_size=64)
    elapsed = time.perf_counter() - start
    cross_larger = np.median(res.cross_mse) > np.median(res.intra_mse)
    verdict(5, res.p_value < 1e-3 and cross_larger and elapsed < 120,
            f"KS D={res.ks_statistic:.3f}, p={res.p_value:.2e}, median intra "
            f"{np.median(res.intra_mse):.4f} < cross {np.median(res.cross_mse):.4f}; {elapsed:.0f} s")


def test_criterion_06_unsupervised_end_to_end(runs):
    run = runs.unsup
    tlog = run["result"].log
    rep = run["report"]
    elapsed = runs.timings["unsup"]
    ok = rep.mae <= 3 and tlog.epoch_ipr[-1] < tlog.initial_ipr and elapsed <= 1800
    verdict(6, ok, f"test MAE {rep.mae:.2f} bpm over {rep.n_windows} windows; IPR initial "
                   f"{tlog.initial_ipr:.3f} -> epoch 1 {tlog.epoch_ipr[0]:.3f} -> final "
                   f"{tlog.epoch_ipr[-1]:.3f}; {elapsed / 60:.1f} min")


def test_criterion_07_label_ratio_direction(runs):
    snr0 = runs.unsup["report"].mean_snr
    snr1 = runs.sup100["report"].mean_snr
    verdict(7, snr1 >= snr0, f"mean SNR ratio 1.0 = {snr1:.2f} dB vs ratio 0.0 = {snr0:.2f} dB")


def test_criterion_08_desync_robustness(runs):
    cp0, cp1 = runs.sup100["report"].rmse, runs.sup100_desync["report"].rmse
    b0, b1 = runs.baseline["report"].rmse, runs.baseline_desync["report"].rmse
    ok = abs(cp1 - cp0) <= 1.0 and b1 >= 2 * b0
    verdict(8, ok, f"contrastive RMSE {cp0:.2f} -> {cp1:.2f} bpm; time-domain baseline RMSE "
                   f"{b0:.2f} -> {b1:.2f} bpm (SNR {runs.baseline['report'].mean_snr:.1f} -> "
                   f"{runs.baseline_desync['report'].mean_snr:.1f} dB)")


def test_criterion_09_misalignment_property():
    res = misalignment_study(n_seeds=50, max_shift_s=0.5)
    verdict(9, res["ratio"] <= 0.05,
            f"E|delta loss_gr_pos| = {res['mean_abs_delta']:.2e}, loss scale "
            f"{res['loss_scale']:.3f}, ratio {res['ratio']:.2e}")


def test_criterion_10_noise_robustness(runs):
    clean, noisy = runs.unsup, runs.noise_unsup
    _, te, _, frames = runs.noisy
    sal = saliency_stats(noisy["model"], te, frames, 10.0, 64)
    mae_c, mae_n = clean["report"].mae, noisy["report"].mae
    ok = mae_n <= 2 * mae_c and sal["skin_saliency"] > sal["patch_saliency"]
    verdict(10, ok, f"MAE clean {mae_c:.2f} vs patch {mae_n:.2f} bpm; mean saliency skin "
                    f"{sal['skin_saliency']:.2e} vs patch {sal['patch_saliency']:.2e}")


def test_criterion_11_ks_statistic():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        a = rng.standard_normal(int(rng.integers(1, 60)))
        b = rng.standard_normal(int(rng.integers(1, 60))) * rng.uniform(0.5, 2) + rng.uniform(-1, 1)
        pooled = np.concatenate([a, b])
        brute = max(abs(np.mean(a <= z) - np.mean(b <= z)) for z in pooled)
        worst = max(worst, abs(two_sample_ks(a, b)[0] - brute))
    verdict(11, worst <= 1e-12, f"max |D - brute-force ECDF scan| = {worst:.1e} over 100 pairs")


def test_criterion_12_store_roundtrip(tmp_path):
    cfg = SynthConfig(n_videos=3, duration_s=4, frame_size=(24, 24), patch_enabled=True, seed=12)
    records = generate_corpus(cfg)
    records[1] = replace(records[1], gt=None, phi=0)
    root = store_dataset(records, tmp_path / "ds")
    loaded = load_dataset(root)
    same = len(loaded) == 3 and all(records_equal(a, b) for a, b in zip(records, loaded))

    named = []
    frames_path = root / "v000" / "frames.bin"
    raw = frames_path.read_bytes()
    header, payload = raw.split(b"\n", 1)
    for broken, field in ((header.replace(b'"H"', b'"Q"'), "H"),
                          (header.replace(b'"fps": 30.0', b'"fps": -1'), "fps"),
                          (b"not json", "header")):
        frames_path.write_bytes(broken + b"\n" + payload)
        try:
            load_dataset(root)
            named.append(False)
        except FormatError as exc:
            named.append(exc.field == field)
    frames_path.write_bytes(raw[:-5])
    try:
        load_dataset(root)
        named.append(False)
    except FormatError as exc:
        named.append(exc.field == "frames")
    verdict(12, same and all(named),
            f"round-trip bit-exact: {same}; corrupted headers name their field: {named}")
