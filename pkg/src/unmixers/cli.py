"""Command-line entry point: ``unmixers {train,eval,forecast,synth,gradcheck,bench}``.

Configuration is a flat ``key=value`` file (``--config``) plus repeated
``--set key=value`` overrides. Every subcommand accepts the same key set; keys
that do not apply to a subcommand are ignored by it, unknown keys are errors.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error,
5 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from . import tensor as tn
from .checkpoint import capture, checkpoint_load, checkpoint_save, restore_model
from .data import (SplitSpec, Standardizer, SynthSpec, Segment, fit_apply_standardizer, gather_windows,
                   load_series_csv, split_series, synth_mixture, window_starts, write_synth)
from .errors import (ChecksumError, ConfigError, ContractError, DataError, DimensionError,
                     IncompatibleCheckpointError, NumericError, VerificationError)
from .model import ModelConfig, UnmixingModel
from .ssm import SsmConfig, init_ssm_params, selective_scan
from .tensor import Tensor
from .train import EpochRecord, Metrics, TrainConfig, Trainer, evaluate, eval_batches, fit, predict
from .verify import TOLERANCE, run_suite

log = logging.getLogger("unmixers")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5


# ---------------------------------------------------------------- config keys


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    kind: type
    help: str


def _dataclass_keys(cls, prefix: str = "", skip: tuple[str, ...] = (), helps: dict | None = None) -> list[Key]:
    helps = helps or {}
    out = []
    inst = cls()
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        value = getattr(inst, f.name)
        out.append(Key(prefix + f.name, value, type(value), helps.get(f.name, "")))
    return out


MODEL_HELP = {
    "T": "history length", "H": "forecast horizon", "N": "channel count (default: taken from the data)",
    "k1": "temporal basis count", "k2": "channel basis count", "patch_len": "steps per patch",
    "patch_stride": "patch stride", "lambda1": "reconstruction loss weight", "lambda2": "prediction loss weight",
    "n_layers": "Mamba blocks per encoder", "paths": "dual | time | channel",
    "fusion": "pointwise (shared 2->1 map) | channel (2N->N map)", "scan": "sequential | parallel",
}
TRAIN_HELP = {
    "lr": "Adam learning rate", "epochs": "maximum epochs", "patience": "early-stopping patience",
    "seed": "seed for init, batch order and synthetic data", "clip_norm": "global grad-norm clip, <= 0 disables",
    "lr_schedule": "none | plateau", "window_stride": "training window stride",
    "max_train_windows": "cap on training windows per epoch, 0 = all",
}

KEYS: list[Key] = (
    _dataclass_keys(ModelConfig, skip=("ssm",), helps=MODEL_HELP)
    + _dataclass_keys(SsmConfig, prefix="ssm_")
    + _dataclass_keys(TrainConfig, helps=TRAIN_HELP)
    + [
        Key("data", "", str, "input CSV (date column + numeric channels)"),
        Key("split", "ratio", str, "ett_hour | ett_minute | ratio | blocks"),
        Key("split_ratios", "0.7,0.1,0.2", str, "train,val,test fractions for ratio/blocks split"),
        Key("block_len", 0, int, "rows per independent block (blocks split)"),
        Key("checkpoint", "", str, "checkpoint to read (eval, forecast)"),
        Key("predictions", False, bool, "eval: also write predictions.csv"),
        Key("eval_split", "test", str, "eval: val | test"),
        Key("synth_mode", "dual", str, "time_mix | channel_mix | dual"),
        Key("synth_block_len", 192, int, "rows per synthetic block"),
        Key("synth_channels", 4, int, "synthetic channel count"),
        Key("synth_rank", 3, int, "synthetic factor rank k"),
        Key("synth_blocks", 64, int, "number of synthetic blocks"),
        Key("synth_sigma", 0.05, float, "gaussian noise level"),
        Key("synth_max_period", 0.0, float, "longest sinusoid period, 0 = block length"),
        Key("bench_lengths", "1,2,3,17,256,1024,4096", str, "sequence lengths to time"),
        Key("bench_d_inner", 16, int, "bench inner width"),
        Key("bench_d_state", 16, int, "bench state size"),
        Key("bench_repeats", 3, int, "timing repeats (best is kept)"),
        Key("gradcheck_ops", "", str, "comma-separated subset of checks, empty = all"),
    ]
)
KEY_INDEX = {k.name: k for k in KEYS}
TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)} - {"ssm"}


def _convert(key: Key, raw: str):
    raw = raw.strip()
    try:
        if key.kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return key.kind(raw)
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key.name} (expected {key.kind.__name__})") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, Any]
    explicit: set[str]

    def __getitem__(self, name: str):
        return self.values[name]

    def is_set(self, name: str) -> bool:
        return name in self.explicit

    def model_config(self, **override) -> ModelConfig:
        kw = {k: self.values[k] for k in MODEL_FIELDS}
        kw.update(override)
        ssm = SsmConfig(**{f.name: self.values["ssm_" + f.name] for f in dataclasses.fields(SsmConfig)})
        return ModelConfig(ssm=ssm, **kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: self.values[k] for k in TRAIN_FIELDS})

    def split_spec(self) -> SplitSpec:
        try:
            ratios = tuple(float(r) for r in self.values["split_ratios"].split(","))
        except ValueError:
            raise ConfigError(f"split_ratios must be three comma-separated numbers, got {self.values['split_ratios']!r}") from None
        if len(ratios) != 3:
            raise ConfigError(f"split_ratios needs three values, got {len(ratios)}")
        return SplitSpec(self.values["split"], ratios, self.values["block_len"])

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(mode=self.values["synth_mode"], block_len=self.values["synth_block_len"],
                         n_channels=self.values["synth_channels"], rank=self.values["synth_rank"],
                         n_blocks=self.values["synth_blocks"], noise_sigma=self.values["synth_sigma"],
                         seed=self.values["seed"], max_period=self.values["synth_max_period"])

    def resolved_text(self) -> str:
        return "".join(f"{k}={_format(self.values[k])}\n" for k in sorted(self.values))


def parse_assignments(lines: Sequence[str], origin: str) -> dict[str, str]:
    out = {}
    for i, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{i}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEY_INDEX:
            raise ConfigError(f"{origin}:{i}: unknown config key {key!r}")
        out[key] = value
    return out


def build_run_config(config_path: str | None, overrides: Sequence[str], seed: int | None) -> RunConfig:
    raw: dict[str, str] = {}
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        raw.update(parse_assignments(text.splitlines(), config_path))
    raw.update(parse_assignments(overrides, "--set"))
    values = {k.name: k.default for k in KEYS}
    for key, text in raw.items():
        values[key] = _convert(KEY_INDEX[key], text)
    if seed is not None:
        values["seed"] = seed
        raw["seed"] = str(seed)
    return RunConfig(values, set(raw))


# ------------------------------------------------------------------- outputs


def _g(x: float) -> str:
    return format(float(x), ".17g")


def write_metrics_csv(path: Path, rows: dict[str, Metrics]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "mse", "mae"])
        for name, m in rows.items():
            w.writerow([name, _g(m.mse), _g(m.mae)])


def write_horizon_csv(path: Path, m: Metrics) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["horizon", "mse", "mae"])
        for h, (se, ae) in enumerate(zip(m.horizon_mse, m.horizon_mae), start=1):
            w.writerow([h, _g(se), _g(ae)])


def _prepare_out(cfg: RunConfig, out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    (path / "resolved_config.txt").write_text(cfg.resolved_text(), encoding="utf-8")
    return path


# ------------------------------------------------------------------ datasets


def _load_segments(cfg: RunConfig, T: int, H: int) -> tuple[list[str], tuple[Segment, Segment, Segment]]:
    if not cfg["data"]:
        raise ConfigError("no dataset given (set data=<path>)")
    series = load_series_csv(cfg["data"])
    spec = cfg.split_spec()
    return series.channel_names, split_series(series, spec, T, H)


def _check_channels(expected: int, got: int, T: int, what: str) -> None:
    if expected != got:
        raise DataError(f"{what} expects input shape ({T}, {expected}) but the data has shape ({T}, {got})")


# ------------------------------------------------------------------ commands


def cmd_train(cfg: RunConfig, out: Path) -> int:
    T, H = cfg["T"], cfg["H"]
    names, segs = _load_segments(cfg, T, H)
    n_data = segs[0].values.shape[1]
    if cfg.is_set("N"):
        _check_channels(cfg["N"], n_data, T, "config")
    mcfg = cfg.model_config(N=n_data)
    tcfg = cfg.train_config()
    (train_seg, val_seg, test_seg), st = fit_apply_standardizer(*segs)
    model = UnmixingModel.init(mcfg, tcfg.seed)
    trainer = Trainer(model, tcfg)
    log_path = out / "train_log.csv"
    with log_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_mse", "val_mae"])

        def on_epoch(rec: EpochRecord) -> None:
            w.writerow([rec.epoch, _g(rec.train_loss), _g(rec.val_loss), _g(rec.val_mse), _g(rec.val_mae)])
            fh.flush()
            print(f"epoch {rec.epoch}: train {rec.train_loss:.6f}  val {rec.val_loss:.6f}  "
                  f"mse {rec.val_mse:.6f}  mae {rec.val_mae:.6f}")

        result = fit(trainer, train_seg, val_seg, on_epoch)
    checkpoint_save(out / "checkpoint.mtsu", capture(trainer, st, result.best_val_loss))
    bs = tcfg.eval_batch_size
    val_m = evaluate(model, eval_batches(model, val_seg, bs))
    test_m = evaluate(model, eval_batches(model, test_seg, bs))
    write_metrics_csv(out / "metrics.csv", {"val": val_m, "test": test_m})
    print(f"best epoch {result.best_epoch}; test mse {test_m.mse:.6f} mae {test_m.mae:.6f}")
    return EXIT_OK


def _load_for_inference(cfg: RunConfig):
    if not cfg["checkpoint"]:
        raise ConfigError("no checkpoint given (set checkpoint=<path>)")
    ckpt = checkpoint_load(cfg["checkpoint"])
    model = restore_model(ckpt)
    return ckpt, model


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    ckpt, model = _load_for_inference(cfg)
    mcfg = model.cfg
    names, segs = _load_segments(cfg, mcfg.T, mcfg.H)
    _check_channels(mcfg.N, segs[0].values.shape[1], mcfg.T, "checkpoint")
    if ckpt.standardizer is not None:
        st = Standardizer(*ckpt.standardizer)
        segs = [Segment(s.name, st.transform(s.values), s.start, s.prefix, s.block_len) for s in segs]
    else:
        segs, st = fit_apply_standardizer(*segs)
    which = cfg["eval_split"]
    if which not in ("val", "test"):
        raise ConfigError(f"eval_split must be val or test, got {which!r}")
    seg = segs[1] if which == "val" else segs[2]
    m = evaluate(model, eval_batches(model, seg, cfg["eval_batch_size"]), per_horizon=True)
    write_metrics_csv(out / "metrics.csv", {which: m})
    write_horizon_csv(out / "horizon_metrics.csv", m)
    print(f"{which}: mse {m.mse:.6f} mae {m.mae:.6f}")
    for h in range(mcfg.H):
        print(f"  h={h + 1}: mse {m.horizon_mse[h]:.6f} mae {m.horizon_mae[h]:.6f}")
    if cfg["predictions"]:
        _dump_predictions(out / "predictions.csv", model, seg, names, cfg["eval_batch_size"])
    return EXIT_OK


def _dump_predictions(path: Path, model: UnmixingModel, seg: Segment, names: list[str], batch_size: int) -> None:
    """One block of H rows per window: source row index, then the standardised prediction per channel."""
    T, H = model.cfg.T, model.cfg.H
    starts = window_starts(seg, T, H)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index"] + names)
        for i in range(0, len(starts), batch_size):
            batch = gather_windows(seg, starts[i:i + batch_size], T, H)
            pred = predict(model, batch.hist).pred.data
            for s, block in zip(batch.starts, pred):
                for j, row in enumerate(block):
                    w.writerow([seg.start + s + T + j] + [_g(v) for v in row])


def cmd_forecast(cfg: RunConfig, out: Path) -> int:
    """Forecast the H steps after the last T rows of ``data`` in original units."""
    ckpt, model = _load_for_inference(cfg)
    mcfg = model.cfg
    if not cfg["data"]:
        raise ConfigError("no dataset given (set data=<path>)")
    series = load_series_csv(cfg["data"])
    if len(series) < mcfg.T:
        raise DataError(f"forecast needs at least T={mcfg.T} rows, data has {len(series)}")
    _check_channels(mcfg.N, series.n_channels, mcfg.T, "checkpoint")
    st = Standardizer(*ckpt.standardizer) if ckpt.standardizer is not None else Standardizer.fit(series.values)
    hist = st.transform(series.values[-mcfg.T:])[None]
    pred = st.inverse(predict(model, hist).pred.data[0])
    with (out / "forecast.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + series.channel_names)
        for j, row in enumerate(pred, start=1):
            w.writerow([j] + [_g(v) for v in row])
    print(f"wrote {mcfg.H} forecast rows to {out / 'forecast.csv'}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    with warnings.catch_warnings():
        # reported once on stderr below instead
        warnings.simplefilter("ignore")
        spec = cfg.synth_spec()
        series, truth = synth_mixture(spec)
    if spec.rank > spec.n_channels:
        print(f"warning: over-complete mixture, rank {spec.rank} > channels {spec.n_channels}", file=sys.stderr)
    paths = write_synth(out, spec, series, truth)
    print("wrote " + ", ".join(p.name for p in paths))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    names = [n.strip() for n in cfg["gradcheck_ops"].split(",") if n.strip()] or None
    if names:
        from .verify import REGISTRY
        unknown = [n for n in names if n not in REGISTRY]
        if unknown:
            raise ConfigError(f"unknown gradcheck ops {unknown}; known: {sorted(REGISTRY)}")
    results = run_suite(cfg["seed"], names)
    with (out / "gradcheck.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["op", "max_rel_error", "seconds", "ok"])
        for r in results:
            w.writerow([r.name, _g(r.error), f"{r.seconds:.3f}", "true" if r.ok else "false"])
            print(f"{r.name:<18} {r.error:.3e}  {'ok' if r.ok else 'FAIL'}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise VerificationError(f"gradient check above {TOLERANCE:g} for: {', '.join(failed)}")
    return EXIT_OK


def _time_ns(fn: Callable[[], Any], repeats: int) -> int:
    best = None
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter_ns()
        fn()
        dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
    return best


def cmd_bench(cfg: RunConfig, out: Path) -> int:
    try:
        lengths = [int(s) for s in cfg["bench_lengths"].split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bench_lengths must be comma-separated integers, got {cfg['bench_lengths']!r}") from None
    if not lengths or min(lengths) < 1:
        raise ConfigError("bench_lengths must list positive lengths")
    d_inner, d_state = cfg["bench_d_inner"], cfg["bench_d_state"]
    rng = np.random.default_rng(cfg["seed"])
    params = init_ssm_params(SsmConfig(d_model=d_inner, d_state=d_state, expand=1), rng)
    rows = []
    for L in lengths:
        u = Tensor(rng.standard_normal((L, d_inner)))
        with tn.no_grad():
            y_seq = selective_scan(u, params, "sequential").data
            y_par = selective_scan(u, params, "parallel").data
        diff = float(np.max(np.abs(y_seq - y_par)))
        if not diff < 1e-10:
            raise VerificationError(f"parallel scan differs from sequential at L={L}: max abs diff {diff:.3e}")
        with tn.no_grad():
            seq_ns = _time_ns(lambda: selective_scan(u, params, "sequential"), cfg["bench_repeats"])
            par_ns = _time_ns(lambda: selective_scan(u, params, "parallel"), cfg["bench_repeats"])
        rows.append((L, seq_ns, par_ns, seq_ns / par_ns))
        print(f"L={L:>6}  seq {seq_ns / 1e6:9.3f} ms  par {par_ns / 1e6:9.3f} ms  speedup {seq_ns / par_ns:.3f}"
              f"  (max diff {diff:.1e})")
    with (out / "bench.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["L", "seq_ns", "par_ns", "speedup"])
        for L, s, p, sp in rows:
            w.writerow([L, s, p, _g(sp)])
    return EXIT_OK


COMMANDS: dict[str, tuple[Callable[[RunConfig, Path], int], str]] = {
    "train": (cmd_train, "train with early stopping; writes checkpoint.mtsu, train_log.csv, metrics.csv"),
    "eval": (cmd_eval, "evaluate a checkpoint; writes metrics.csv, horizon_metrics.csv, optional predictions.csv"),
    "forecast": (cmd_forecast, "forecast the H steps after the end of a CSV; writes forecast.csv"),
    "synth": (cmd_synth, "generate a synthetic mixture; writes data.csv plus ground-truth factor CSVs"),
    "gradcheck": (cmd_gradcheck, "compare autodiff against central differences; writes gradcheck.csv"),
    "bench": (cmd_bench, "time sequential vs parallel selective scan; writes bench.csv"),
}


def keys_help() -> str:
    width = max(len(k.name) for k in KEYS)
    lines = ["config keys (key=value in --config files or via --set):"]
    for k in KEYS:
        desc = f"  [{k.help}]" if k.help else ""
        lines.append(f"  {k.name:<{width}}  default {_format(k.default)}{desc}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unmixers", description="Channel-time dual unmixing forecaster.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, summary) in COMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary, epilog=keys_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", default=f"out/{name}", help=f"output directory (default: out/{name})")
        p.add_argument("--seed", type=int, help="overrides the seed key")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name == "synth":
            p.add_argument("--mode", choices=("time_mix", "channel_mix", "dual"), help="shortcut for synth_mode")
        p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = list(args.set)
    if getattr(args, "mode", None):
        overrides.append(f"synth_mode={args.mode}")
    fn = COMMANDS[args.command][0]
    try:
        cfg = build_run_config(args.config, overrides, args.seed)
        out = _prepare_out(cfg, args.out)
        return fn(cfg, out)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimensionError, ChecksumError, IncompatibleCheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
