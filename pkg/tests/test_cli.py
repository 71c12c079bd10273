import csv

import numpy as np
import pytest

from unmixers import cli
from unmixers import tensor as tn
from unmixers.data import SynthSpec, load_series_csv, load_synth_truth, reconstruct_from_truth

TOY = ["T=16", "H=8", "k1=2", "k2=2", "patch_len=8", "patch_stride=8", "ssm_d_model=4", "ssm_d_state=3",
       "ssm_d_conv=2", "batch_size=4", "epochs=2", "lr=0.01", "split=blocks", "block_len=48"]


def sets(*pairs):
    out = []
    for p in pairs:
        out += ["--set", p]
    return out


def synth(tmp_path, name="syn", channels=3, blocks=12, extra=()):
    out = tmp_path / name
    args = ["synth", "--out", str(out), "--seed", "0", "--mode", "dual"]
    args += sets("synth_block_len=48", f"synth_channels={channels}", "synth_rank=2", f"synth_blocks={blocks}",
                 *extra)
    assert cli.main(args) == 0
    return out


def train(tmp_path, data, name="run", extra=()):
    out = tmp_path / name
    code = cli.main(["train", "--out", str(out), "--seed", "0"] + sets(*TOY, f"data={data}", *extra))
    return code, out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    data = synth(tmp) / "data.csv"
    code, out = train(tmp, data)
    assert code == 0
    return tmp, data, out


# ----------------------------------------------------------------------- train


def test_train_writes_outputs(trained):
    _, _, out = trained
    for name in ("checkpoint.mtsu", "train_log.csv", "metrics.csv", "resolved_config.txt"):
        assert (out / name).exists(), name
    log = rows(out / "train_log.csv")
    assert log[0] == ["epoch", "train_loss", "val_loss", "val_mse", "val_mae"]
    assert len(log) == 3
    metrics = rows(out / "metrics.csv")
    assert metrics[0] == ["split", "mse", "mae"]
    assert [r[0] for r in metrics[1:]] == ["val", "test"]
    assert "lr=0.01" in (out / "resolved_config.txt").read_text()


def test_train_writes_only_inside_out_dir(tmp_path):
    data = synth(tmp_path) / "data.csv"
    before = set(p for p in tmp_path.rglob("*"))
    code, out = train(tmp_path, data, "only")
    assert code == 0
    after = set(p for p in tmp_path.rglob("*"))
    assert all(out in p.parents or p == out for p in after - before)


def test_rerun_gives_identical_metrics(trained):
    tmp, data, out = trained
    code, again = train(tmp, data, "rerun")
    assert code == 0
    assert (out / "metrics.csv").read_bytes() == (again / "metrics.csv").read_bytes()
    assert (out / "checkpoint.mtsu").read_bytes() == (again / "checkpoint.mtsu").read_bytes()


def test_unknown_key_is_rejected(tmp_path, capsys):
    code = cli.main(["train", "--out", str(tmp_path / "x")] + sets("lr_rate=0.1"))
    assert code == 2
    assert "lr_rate" in capsys.readouterr().err


def test_unknown_key_in_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nepochs=1\nlr_rate=0.1\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "lr_rate" in capsys.readouterr().err


def test_bad_value_and_missing_data(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path / "a")] + sets("epochs=many")) == 2
    assert cli.main(["train", "--out", str(tmp_path / "b")]) == 2
    assert cli.main(["train", "--out", str(tmp_path / "c")] + sets("data=/nonexistent.csv")) == 3


def test_explicit_channel_count_must_match(tmp_path, trained, capsys):
    _, data, _ = trained
    code, _ = train(tmp_path, data, "n", extra=("N=5",))
    assert code == 3
    err = capsys.readouterr().err
    assert "(16, 5)" in err and "(16, 3)" in err


# ------------------------------------------------------------------------ eval


def test_eval_reproduces_train_test_metrics(trained):
    tmp, data, out = trained
    ev = tmp / "eval"
    code = cli.main(["eval", "--out", str(ev)] + sets(*TOY, f"data={data}", f"checkpoint={out / 'checkpoint.mtsu'}"))
    assert code == 0
    train_test = [r for r in rows(out / "metrics.csv") if r[0] == "test"]
    assert rows(ev / "metrics.csv")[1:] == train_test
    horizon = rows(ev / "horizon_metrics.csv")
    assert horizon[0] == ["horizon", "mse", "mae"] and len(horizon) == 1 + 8


def test_eval_prediction_dump_schema(trained):
    tmp, data, out = trained
    ev = tmp / "eval_pred"
    code = cli.main(["eval", "--out", str(ev)] + sets(*TOY, f"data={data}", f"checkpoint={out / 'checkpoint.mtsu'}",
                                                      "predictions=true"))
    assert code == 0
    table = rows(ev / "predictions.csv")
    assert table[0] == ["index", "ch0", "ch1", "ch2"]
    n_test_windows = 2  # 12 blocks -> 8/2/2
    assert len(table) - 1 == 8 * n_test_windows
    assert all(len(r) == 3 + 1 for r in table[1:])
    # first window of the test split starts 10 blocks in and ends at its block boundary
    assert int(table[1][0]) == 10 * 48 + 48 - 8


def test_eval_channel_mismatch(tmp_path, capsys):
    seven = synth(tmp_path, "seven", channels=7) / "data.csv"
    wide = synth(tmp_path, "wide", channels=21) / "data.csv"
    code, out = train(tmp_path, seven, "seven_run", extra=("epochs=1",))
    assert code == 0
    capsys.readouterr()
    code = cli.main(["eval", "--out", str(tmp_path / "ev")] +
                    sets(*TOY, f"data={wide}", f"checkpoint={out / 'checkpoint.mtsu'}"))
    assert code == 3
    err = capsys.readouterr().err
    assert "(16, 7)" in err and "(16, 21)" in err


def test_eval_corrupted_checkpoint(trained, tmp_path):
    _, data, out = trained
    bad = tmp_path / "bad.mtsu"
    bad.write_bytes((out / "checkpoint.mtsu").read_bytes()[:-20])
    code = cli.main(["eval", "--out", str(tmp_path / "ev")] + sets(*TOY, f"data={data}", f"checkpoint={bad}"))
    assert code == 3


def test_forecast(trained):
    tmp, data, out = trained
    fc = tmp / "fc"
    assert cli.main(["forecast", "--out", str(fc)] + sets(f"data={data}", f"checkpoint={out / 'checkpoint.mtsu'}")) == 0
    table = rows(fc / "forecast.csv")
    assert table[0] == ["step", "ch0", "ch1", "ch2"]
    assert [int(r[0]) for r in table[1:]] == list(range(1, 9))


# ----------------------------------------------------------------------- synth


def test_noiseless_synth_reproduces_from_sidecars(tmp_path):
    for mode in ("time_mix", "channel_mix", "dual"):
        out = tmp_path / mode
        args = ["synth", "--out", str(out), "--mode", mode] + sets(
            "synth_sigma=0", "synth_block_len=30", "synth_channels=4", "synth_rank=3", "synth_blocks=5")
        assert cli.main(args) == 0
        spec = SynthSpec(mode=mode, block_len=30, n_channels=4, rank=3, n_blocks=5, noise_sigma=0.0)
        recon = reconstruct_from_truth(load_synth_truth(out, spec), 5, 30, 4)
        assert np.max(np.abs(recon - load_series_csv(out / "data.csv").values)) < 1e-9


def test_synth_same_seed_identical(tmp_path):
    a, b = synth(tmp_path, "a"), synth(tmp_path, "b")
    for name in ("data.csv", "A_star.csv", "S_star.csv", "A_t_star.csv", "S_t_star.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_synth_overcomplete_warns(tmp_path, capsys):
    args = ["synth", "--out", str(tmp_path / "oc")] + sets("synth_channels=2", "synth_rank=3", "synth_blocks=2")
    assert cli.main(args) == 0
    assert "warning" in capsys.readouterr().err


def test_synth_invalid_dims(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "bad")] + sets("synth_channels=0")) == 2


# ------------------------------------------------------------------- gradcheck


def test_gradcheck_stock_build(tmp_path, capsys):
    out = tmp_path / "gc"
    assert cli.main(["gradcheck", "--out", str(out)]) == 0
    table = rows(out / "gradcheck.csv")
    assert table[0] == ["op", "max_rel_error", "seconds", "ok"]
    names = {r[0] for r in table[1:]}
    assert {"matmul", "softmax", "conv", "scan", "full_model"} <= names
    assert all(r[3] == "true" for r in table[1:])


def test_gradcheck_fault_injection(tmp_path, monkeypatch, capsys):
    original = tn.MatMul.backward

    def broken(self, g):
        ga, gb = original(self, g)
        return ga * 1.01, gb

    monkeypatch.setattr(tn.MatMul, "backward", broken)
    code = cli.main(["gradcheck", "--out", str(tmp_path / "gc")] + sets("gradcheck_ops=matmul,relu"))
    assert code == 5
    err = capsys.readouterr().err
    assert "matmul" in err and "relu" not in err


def test_gradcheck_unknown_op(tmp_path):
    assert cli.main(["gradcheck", "--out", str(tmp_path / "gc")] + sets("gradcheck_ops=fft")) == 2


# ----------------------------------------------------------------------- bench


def test_bench_schema(tmp_path):
    out = tmp_path / "bench"
    args = ["bench", "--out", str(out)] + sets("bench_lengths=1,2,17,64", "bench_d_inner=4", "bench_d_state=4",
                                               "bench_repeats=1")
    assert cli.main(args) == 0
    table = rows(out / "bench.csv")
    assert table[0] == ["L", "seq_ns", "par_ns", "speedup"]
    assert [int(r[0]) for r in table[1:]] == [1, 2, 17, 64]
    assert all(int(r[1]) > 0 and int(r[2]) > 0 and float(r[3]) > 0 for r in table[1:])


def test_bench_equivalence_gate(tmp_path, monkeypatch):
    real = tn.affine_scan

    def skewed(a, b, method="sequential"):
        out = real(a, b, method)
        return out + 1e-6 if method == "parallel" else out

    monkeypatch.setattr(tn, "affine_scan", skewed)
    args = ["bench", "--out", str(tmp_path / "b")] + sets("bench_lengths=4", "bench_d_inner=2", "bench_d_state=2")
    assert cli.main(args) == 5


# ------------------------------------------------------------------------ help


@pytest.mark.parametrize("command", list(cli.COMMANDS))
def test_help_lists_every_key(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    listed = {line.split()[0] for line in text.split("config keys")[1].splitlines()[1:] if line.startswith("  ")}
    assert listed == set(cli.KEY_INDEX)
    for key in listed:
        cli.parse_assignments([f"{key}={cli._format(cli.KEY_INDEX[key].default)}"], "help")
