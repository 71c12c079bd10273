"""Acceptance suite: one test per criterion, each printing a PASS/FAIL/SKIP line.

Criteria 8 and 9 need the real ETTh1 CSV: point ``UNMIXERS_ETTH1`` at it.
Criterion 9 is a long stretch run and additionally needs ``UNMIXERS_STRETCH=1``.
"""
import os
import re
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from acceptance_log import record
from unmixers import cli
from unmixers import tensor as tn
from unmixers.checkpoint import capture, checkpoint_load, checkpoint_save, restore_trainer
from unmixers.data import (SplitSpec, SynthSpec, fit_apply_standardizer, load_series_csv, split_series,
                           synth_mixture)
from unmixers.model import ModelConfig, UnmixingModel
from unmixers.ssm import SsmConfig, init_ssm_params, selective_scan_parallel, selective_scan_seq
from unmixers.tensor import Tensor
from unmixers.train import TrainConfig, Trainer, eval_batches, evaluate, fit
from unmixers.verify import TOLERANCE, run_suite

ROOT = Path(__file__).resolve().parents[1]
ETTH1 = os.environ.get("UNMIXERS_ETTH1", "")
PUBLISHED_ETTH1_96 = (0.368, 0.388)  # MSE / MAE, 96 -> 96


def check(criterion, ok, detail, seconds=None, budget=None):
    if seconds is not None:
        detail += f"  [{seconds:.1f} s"
        detail += f" / budget {budget:.0f} s]" if budget else "]"
        ok = ok and (budget is None or seconds < budget)
    record(criterion, "PASS" if ok else "FAIL", detail)
    assert ok, detail


def skip(criterion, reason):
    record(criterion, "SKIP", reason)
    pytest.skip(reason)


def synthetic_segments(mode, seed, block_len, T, H=96, n_blocks=256, max_period=0.0):
    spec = SynthSpec(mode=mode, block_len=block_len, n_channels=4, rank=3, n_blocks=n_blocks, noise_sigma=0.05,
                     seed=seed, max_period=max_period)
    series, _ = synth_mixture(spec)
    return fit_apply_standardizer(*split_series(series, SplitSpec("blocks", block_len=block_len), T, H))


def train_synthetic(segs, cfg, seed, epochs, lr=1e-2):
    (train, val, _), _ = segs
    model = UnmixingModel.init(cfg, seed)
    # patience = epochs: run every epoch, keep the best validation checkpoint
    fit(Trainer(model, TrainConfig(lr=lr, epochs=epochs, patience=epochs, seed=seed)), train, val)
    return model


# ------------------------------------------------------------------ criterion 1


def test_criterion_01_gradient_integrity():
    t0 = time.perf_counter()
    results = run_suite(seed=0)
    secs = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.error)
    failed = [r.name for r in results if not r.ok]
    names = {r.name for r in results}
    covered = {"matmul", "softmax", "conv", "scan", "full_model"} <= names
    check(1, not failed and covered,
          f"{len(results)} checks, worst {worst.name} rel err {worst.error:.2e} (< {TOLERANCE:g}); "
          f"failed: {failed or 'none'}", secs, 60)


# ------------------------------------------------------------------ criterion 2


def test_criterion_02_scan_equivalence():
    lengths = (1, 2, 3, 17, 256, 1024, 4096)
    cfg = SsmConfig(d_model=8, d_state=8, expand=1)
    worst_oracle = worst_seq = 0.0
    t0 = time.perf_counter()
    with tn.no_grad():
        for seed in range(100):
            p = oracles.random_ssm(init_ssm_params, cfg, seed)
            rng = np.random.default_rng(10_000 + seed)
            for L in lengths:
                u = rng.normal(size=(L, cfg.d_inner))
                par = selective_scan_parallel(Tensor(u), p).data
                worst_oracle = max(worst_oracle, float(np.max(np.abs(par - oracles.selective_scan_loop(u, p)))))
                worst_seq = max(worst_seq, float(np.max(np.abs(par - selective_scan_seq(Tensor(u), p).data))))
    secs = time.perf_counter() - t0
    check(2, worst_oracle < 1e-10 and worst_seq < 1e-10,
          f"100 seeds x L in {lengths}: max |parallel - loop oracle| {worst_oracle:.1e}, "
          f"max |parallel - sequential| {worst_seq:.1e} (< 1e-10)", secs, 120)


# ------------------------------------------------------------------ criterion 3


def test_criterion_03_simplex_constraints_during_training():
    segs = synthetic_segments("dual", 0, 192, 96, n_blocks=64)
    (train, _, _), _ = segs
    cfg = ModelConfig(T=96, H=96, N=4, k1=3, k2=3)
    trainer = Trainer(UnmixingModel.init(cfg, 0), TrainConfig(lr=1e-2, batch_size=8))
    worst = {"neg": 0.0, "sum": 0.0}
    audited = []

    def audit(out):
        factors = out.simplex_factors()
        assert set(factors) == {"S_c", "S_t", "S_p"}
        for S in factors.values():
            worst["neg"] = min(worst["neg"], float(S.data.min()))
            worst["sum"] = max(worst["sum"], float(np.max(np.abs(S.data.sum(axis=-2) - 1))))
        audited.append(1)

    trainer.on_forward = audit
    t0 = time.perf_counter()
    steps = 0
    while steps < 50:
        for batch in trainer.epoch_batches(train):
            trainer.step(batch)
            steps += 1
            if steps == 50:
                break
    secs = time.perf_counter() - t0
    ok = len(audited) == 50 and worst["neg"] >= 0 and worst["sum"] < 1e-6
    check(3, ok, f"{len(audited)} audited forward passes: min entry {worst['neg']:.2e}, "
                 f"max |column sum - 1| {worst['sum']:.1e} (< 1e-6)", secs, 60)


# ------------------------------------------------------------------ criterion 4


def test_criterion_04_shared_factor_contract():
    t0 = time.perf_counter()
    cfg = ModelConfig(T=96, H=96, N=4, k1=3, k2=3)
    model = UnmixingModel.init(cfg, 0)
    x = Tensor(np.random.default_rng(0).normal(size=(96, 4)))
    rng = np.random.default_rng(1)
    fac = model.params.factors

    # instance identity: every decoder product that reads a shared factor reads the same tensor object
    captured = {}
    with tn.Tape() as tape:
        base = model(x, hook=lambda name, t: captured.setdefault(name, t))
        readers = {name: [n for n in tape.nodes if isinstance(n.fn, tn.MatMul) and any(i is t for i in n.inputs)]
                   for name, t in captured.items()}
    identical = (base.S_c is captured["S_c"] and base.A_t is captured["A_t"]
                 and len(readers["S_c"]) == 2 and len(readers["A_t"]) == 2)

    def rerun(hook=None):
        with tn.no_grad():
            return model(x, hook=hook)

    d_S = rng.normal(size=captured["S_c"].shape) * 1e-3
    out = rerun(lambda n, t: Tensor(t.data + d_S) if n == "S_c" else t)
    s_c_both = (np.allclose(out.X_c_rec.data - base.X_c_rec.data, fac.A_c.data @ d_S, atol=1e-12)
                and np.allclose(out.X_c_pred.data - base.X_c_pred.data, fac.A_p.data @ d_S, atol=1e-12)
                and np.abs(out.X_c_rec.data - base.X_c_rec.data).max() > 0
                and np.abs(out.X_c_pred.data - base.X_c_pred.data).max() > 0
                and np.array_equal(out.X_t_rec.data, base.X_t_rec.data))

    d_A = rng.normal(size=captured["A_t"].shape) * 1e-3
    out = rerun(lambda n, t: Tensor(t.data + d_A) if n == "A_t" else t)
    a_t_both = (np.allclose(out.X_t_rec.data - base.X_t_rec.data, (d_A @ base.S_t.data).T, atol=1e-12)
                and np.allclose(out.X_t_pred.data - base.X_t_pred.data, (d_A @ base.S_p.data).T, atol=1e-12)
                and np.array_equal(out.X_c_rec.data, base.X_c_rec.data))

    saved = fac.A_c.data.copy()
    fac.A_c.data += rng.normal(size=saved.shape) * 1e-3
    out = rerun()
    fac.A_c.data[...] = saved
    a_c_only = (np.abs(out.X_c_rec.data - base.X_c_rec.data).max() > 0
                and np.array_equal(out.X_c_pred.data, base.X_c_pred.data)
                and np.array_equal(out.X_t_rec.data, base.X_t_rec.data)
                and np.array_equal(out.X_t_pred.data, base.X_t_pred.data))
    secs = time.perf_counter() - t0
    check(4, identical and s_c_both and a_t_both and a_c_only,
          f"same S_c/A_t instance in both decoders: {identical}; S_c perturbation moves both channel outputs: "
          f"{s_c_both}; A_t perturbation moves both time outputs: {a_t_both}; A_c touches only X_c': {a_c_only}",
          secs, 10)


# ------------------------------------------------------------------ criterion 5


def test_criterion_05_rank_bound():
    t0 = time.perf_counter()
    cfg = ModelConfig(T=96, H=96, N=7, k1=4, k2=3)
    worst = {"channel": 0.0, "time": 0.0}
    for seed in range(3):
        model = UnmixingModel.init(cfg, seed)
        for name in ("A_c", "A_p", "S_t_raw", "S_p_raw"):
            t = getattr(model.params.factors, name)
            t.data[...] = np.random.default_rng(seed + 100).normal(size=t.shape)
        with tn.no_grad():
            out = model(Tensor(np.random.default_rng(seed).normal(size=(96, 7))))
        for key, parts, k in (("channel", (out.X_c_rec, out.X_c_pred), cfg.k2),
                              ("time", (out.X_t_rec, out.X_t_pred), cfg.k1)):
            sv = np.linalg.svd(np.vstack([p.data for p in parts]), compute_uv=False)
            worst[key] = max(worst[key], float(sv[k:].max() / sv[0]))
    secs = time.perf_counter() - t0
    check(5, worst["channel"] < 1e-8 and worst["time"] < 1e-8,
          f"(T+H) x N stacks, N=7: channel path sigma_(k2+1)/sigma_max {worst['channel']:.1e}, "
          f"time path sigma_(k1+1)/sigma_max {worst['time']:.1e} (< 1e-8)", secs, 10)


# ------------------------------------------------------------------ criterion 6


def test_criterion_06_synthetic_recovery():
    sigma = 0.05
    t0 = time.perf_counter()
    maes = {}
    for mode, paths in (("time_mix", "time"), ("channel_mix", "channel")):
        segs = synthetic_segments(mode, 0, 192, 96)
        cfg = ModelConfig(T=96, H=96, N=4, k1=3, k2=3, paths=paths)
        model = train_synthetic(segs, cfg, 0, epochs=200)
        (_, _, test), st = segs
        maes[mode] = evaluate(model, eval_batches(model, test), standardizer=st).mae
    secs = time.perf_counter() - t0
    bound = 1.5 * sigma
    check(6, all(m <= bound for m in maes.values()),
          "test prediction L1 in data units: " + ", ".join(f"{k} {v:.4f}" for k, v in maes.items())
          + f" (<= 1.5 sigma = {bound:.3f})", secs, 600)


# ------------------------------------------------------------------ criterion 7


def test_criterion_07_ablation_direction():
    t0 = time.perf_counter()
    mse = {p: [] for p in ("dual", "time", "channel")}
    for seed in range(3):
        segs = synthetic_segments("dual", seed, 192, 96)
        (_, val, _), _ = segs
        for paths in mse:
            model = train_synthetic(segs, ModelConfig(T=96, H=96, N=4, k1=3, k2=3, paths=paths), seed, epochs=100)
            mse[paths].append(evaluate(model, eval_batches(model, val)).mse)
    secs = time.perf_counter() - t0
    full = np.array(mse["dual"])
    margins = {p: np.array(mse[p]) - full for p in ("time", "channel")}
    ok = all(np.all(m > 0) for m in margins.values())
    detail = (f"val MSE per seed: dual {np.round(full, 4).tolist()}, time-only {np.round(mse['time'], 4).tolist()}, "
              f"channel-only {np.round(mse['channel'], 4).tolist()}; "
              + ", ".join(f"min margin vs {p} {m.min():.4f}" for p, m in margins.items()))
    check(7, ok, detail, secs, 1200)


# ------------------------------------------------------------------ criterion 8


def etth1_segments(T=96, H=96):
    series = load_series_csv(ETTH1)
    return series, fit_apply_standardizer(*split_series(series, SplitSpec("ett_hour"), T, H))


def test_criterion_08_etth1_smoke():
    if not ETTH1:
        skip(8, "ETTh1 CSV not available (set UNMIXERS_ETTH1=/path/to/ETTh1.csv)")
    t0 = time.perf_counter()
    series, ((train, val, _), _) = etth1_segments()
    cfg = ModelConfig(T=96, H=96, N=series.n_channels)
    trainer = Trainer(UnmixingModel.init(cfg, 0), TrainConfig(epochs=3, patience=3))
    first = []
    step = trainer.step
    trainer.step = lambda batch: first.append(step(batch)) or first[-1]
    res = fit(trainer, train, val)
    secs = time.perf_counter() - t0
    last = res.history[-1]
    val_m = evaluate(trainer.model, eval_batches(trainer.model, val))
    ok = len(res.history) == 3 and last.train_loss <= 0.5 * first[0] and np.isfinite(val_m.mse) and val_m.mse < 1.0
    check(8, ok, f"first-batch loss {first[0]:.4f}, epoch-3 train loss {last.train_loss:.4f} "
                 f"(ratio {last.train_loss / first[0]:.3f} <= 0.5), val MSE {val_m.mse:.4f} (< 1.0)", secs, 1800)


# ------------------------------------------------------------------ criterion 9


def test_published_etth1_reference_values():
    doc = ROOT / "paper.md"
    if not doc.exists():
        pytest.skip("reference document not shipped")
    text = doc.read_text(encoding="utf-8")
    block = text[text.index("{ETTh1}}"):]
    row = re.search(r"&\s*96\s*&\s*\\textbf\{([\d.]+)\}\s*&\s*\\textbf\{([\d.]+)\}", block)
    assert (float(row.group(1)), float(row.group(2))) == PUBLISHED_ETTH1_96


def test_criterion_09_etth1_stretch():
    if not ETTH1:
        skip(9, f"stretch target (published {PUBLISHED_ETTH1_96[0]}/{PUBLISHED_ETTH1_96[1]}, gate MSE <= 0.45) "
                "needs the ETTh1 CSV (UNMIXERS_ETTH1)")
    if os.environ.get("UNMIXERS_STRETCH") != "1":
        skip(9, "stretch run disabled (set UNMIXERS_STRETCH=1)")
    t0 = time.perf_counter()
    series, ((train, val, test), _) = etth1_segments()
    cfg = ModelConfig(T=96, H=96, N=series.n_channels)
    trainer = Trainer(UnmixingModel.init(cfg, 0), TrainConfig(epochs=50, patience=3))
    fit(trainer, train, val)
    m = evaluate(trainer.model, eval_batches(trainer.model, test))
    secs = time.perf_counter() - t0
    check(9, m.mse <= 0.45, f"test MSE {m.mse:.4f} MAE {m.mae:.4f} (gate MSE <= 0.45; published "
                            f"{PUBLISHED_ETTH1_96[0]}/{PUBLISHED_ETTH1_96[1]})", secs)


# ----------------------------------------------------------------- criterion 10


def test_criterion_10_lookback_trend():
    t0 = time.perf_counter()
    block_len = 432  # room for a 336-step history plus a 96-step horizon
    mse = {96: [], 336: []}
    for seed in range(3):
        for T in mse:
            segs = synthetic_segments("dual", seed, block_len, T)
            (_, val, _), _ = segs
            model = train_synthetic(segs, ModelConfig(T=T, H=96, N=4, k1=3, k2=3), seed, epochs=100)
            mse[T].append(evaluate(model, eval_batches(model, val)).mse)
    secs = time.perf_counter() - t0
    short, long_ = float(np.mean(mse[96])), float(np.mean(mse[336]))
    check(10, long_ <= short,
          f"mean val MSE over 3 seeds: T=336 {long_:.4f} vs T=96 {short:.4f} "
          f"(per seed {np.round(mse[336], 4).tolist()} vs {np.round(mse[96], 4).tolist()})", secs, 1800)


# ----------------------------------------------------------------- criterion 11


def test_criterion_11_determinism_and_resume(tmp_path):
    t0 = time.perf_counter()
    synth_args = ["synth", "--out", str(tmp_path / "data"), "--seed", "3", "--set", "synth_blocks=24"]
    assert cli.main(synth_args) == 0
    data = tmp_path / "data" / "data.csv"
    run = ["--seed", "3"] + sum((["--set", kv] for kv in (
        f"data={data}", "split=blocks", "block_len=192", "N=4", "k1=3", "k2=3", "epochs=2", "lr=0.01")), [])
    for name in ("a", "b"):
        assert cli.main(["train", "--out", str(tmp_path / name)] + run) == 0
    same_metrics = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    segs = synthetic_segments("dual", 3, 192, 96, n_blocks=24)
    (train, _, _), st = segs
    cfg = ModelConfig(T=96, H=96, N=4, k1=3, k2=3)
    tcfg = TrainConfig(lr=1e-2, seed=3)
    straight = Trainer(UnmixingModel.init(cfg, 3), tcfg)
    paused = Trainer(UnmixingModel.init(cfg, 3), tcfg)
    for t in (straight, paused):
        t.train_epoch(t.epoch_batches(train))
    checkpoint_save(tmp_path / "mid.mtsu", capture(paused, st))
    resumed = restore_trainer(checkpoint_load(tmp_path / "mid.mtsu"), tcfg)
    batch_a = next(iter(straight.epoch_batches(train)))
    batch_b = next(iter(resumed.epoch_batches(train)))
    straight.step(batch_a)
    resumed.step(batch_b)
    same_batch = np.array_equal(batch_a.starts, batch_b.starts)
    a = dict(straight.model.named_parameters())
    b = dict(resumed.model.named_parameters())
    same_step = all(a[n].data.tobytes() == b[n].data.tobytes() for n in a)
    same_moments = all(straight.state.m[n].tobytes() == resumed.state.m[n].tobytes() for n in a)
    secs = time.perf_counter() - t0
    check(11, same_metrics and same_batch and same_step and same_moments,
          f"metrics.csv byte-identical across reruns: {same_metrics}; resumed next step bit-identical "
          f"(batch {same_batch}, params {same_step}, moments {same_moments})", secs, 300)
