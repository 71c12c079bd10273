"""Dataset loading, protocol splits, standardisation, windows, synthetic mixtures."""
from __future__ import annotations

import csv
import datetime as dt
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

STD_FLOOR = 1e-8
HOURS_PER_MONTH = 30 * 24
QUARTERS_PER_MONTH = 30 * 96


@dataclass
class RawSeries:
    timestamps: list[str]
    values: np.ndarray  # T_total x N
    channel_names: list[str]

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SplitSpec:
    """How to cut a series into train/val/test.

    ``blocks`` mode is for series made of independent fixed-length blocks
    (see :func:`synth_mixture`): whole blocks are assigned to each split and
    every block contributes exactly one window, aligned to its end.
    """

    mode: str = "ratio"
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    block_len: int = 0

    def __post_init__(self):
        if self.mode not in ("ett_hour", "ett_minute", "ratio", "blocks"):
            raise ConfigError(f"unknown split mode {self.mode!r}")
        if self.mode in ("ratio", "blocks"):
            if any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
                raise ConfigError(f"split ratios must be non-negative and sum to 1, got {self.ratios}")
        if self.mode == "blocks" and self.block_len < 1:
            raise ConfigError("blocks split needs block_len >= 1")


@dataclass
class Segment:
    """A contiguous slice of the series.

    ``values`` starts ``prefix`` rows before the segment's own rows so the first
    window has a full history; ``start`` is the source row of ``values[0]``.
    """

    name: str
    values: np.ndarray
    start: int
    prefix: int = 0
    block_len: int = 0  # > 0 for block-structured segments

    @property
    def n_rows(self) -> int:
        return self.values.shape[0] - self.prefix


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Standardizer":
        if values.shape[0] == 0:
            raise ConfigError("cannot fit a standardizer on an empty training split")
        return cls(values.mean(axis=0), np.maximum(values.std(axis=0), STD_FLOOR))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass
class WindowBatch:
    hist: np.ndarray  # B x T x N
    future: np.ndarray  # B x H x N
    starts: np.ndarray  # window start rows within the segment

    def __len__(self) -> int:
        return self.hist.shape[0]


# --------------------------------------------------------------------- loading


def load_series_csv(path: str | Path) -> RawSeries:
    """Read a ``date,<channel>,...`` CSV; every cell after the first column must be numeric."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file (no header)") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a timestamp column and at least one channel")
        names = [h.strip() for h in header[1:]]
        stamps: list[str] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            vals = []
            for col, cell in enumerate(row[1:], start=1):
                cell = cell.strip()
                if cell == "":
                    raise DataError(f"{path}: missing value at row {lineno}, column {col} ({header[col]})")
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: unparseable value {cell!r} at row {lineno}, column {col} ({header[col]})") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: non-finite value at row {lineno}, column {col} ({header[col]})")
                vals.append(v)
            stamps.append(row[0])
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return RawSeries(stamps, np.asarray(rows, dtype=np.float64), names)


def write_series_csv(path: str | Path, series: RawSeries) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date"] + list(series.channel_names))
        for stamp, row in zip(series.timestamps, series.values):
            w.writerow([stamp] + [format(v, ".17g") for v in row])


def write_matrix_csv(path: str | Path, mat: np.ndarray) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(mat):
            w.writerow([format(v, ".17g") for v in row])


def read_matrix_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


# ------------------------------------------------------------------- splitting


def split_series(series: RawSeries | np.ndarray, spec: SplitSpec, T: int, H: int) -> tuple[Segment, Segment, Segment]:
    """Cut into train/val/test following the benchmark protocol.

    ETT modes use 12/4/4 months (30-day months) at hourly or 15-minute rate;
    ratio mode keeps int(n*train) and int(n*test) rows and gives the rest to
    validation. Val/test carry the preceding T rows as history prefix.
    """
    values = series.values if isinstance(series, RawSeries) else np.asarray(series, dtype=np.float64)
    n = values.shape[0]
    if spec.mode == "blocks":
        return _split_blocks(values, spec, T, H)
    if spec.mode in ("ett_hour", "ett_minute"):
        per_month = HOURS_PER_MONTH if spec.mode == "ett_hour" else QUARTERS_PER_MONTH
        n_train, n_val, n_test = 12 * per_month, 4 * per_month, 4 * per_month
        if n < n_train + n_val + n_test:
            raise ConfigError(f"{spec.mode} protocol needs {n_train + n_val + n_test} rows, series has {n}")
    else:
        n_train = int(n * spec.ratios[0])
        n_test = int(n * spec.ratios[2])
        n_val = n - n_train - n_test
    b1, b2, b3 = n_train, n_train + n_val, n_train + n_val + n_test
    if n_train < T + H or n_val < H or n_test < H or b1 < T:
        raise ConfigError(
            f"series of {n} rows too short for T={T}, H={H}: split sizes {n_train}/{n_val}/{n_test}")
    return (
        Segment("train", values[:b1], 0, 0),
        Segment("val", values[b1 - T:b2], b1 - T, T),
        Segment("test", values[b2 - T:b3], b2 - T, T),
    )


def _split_blocks(values: np.ndarray, spec: SplitSpec, T: int, H: int):
    bl = spec.block_len
    if values.shape[0] % bl:
        raise ConfigError(f"series length {values.shape[0]} is not a multiple of block_len {bl}")
    if T + H > bl:
        raise ConfigError(f"T+H = {T + H} exceeds block_len {bl}")
    nb = values.shape[0] // bl
    n_train = int(nb * spec.ratios[0])
    n_test = int(nb * spec.ratios[2])
    n_val = nb - n_train - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(f"{nb} blocks cannot fill train/val/test with ratios {spec.ratios}")
    cuts = [0, n_train * bl, (n_train + n_val) * bl, nb * bl]
    names = ("train", "val", "test")
    return tuple(Segment(names[i], values[cuts[i]:cuts[i + 1]], cuts[i], 0, bl) for i in range(3))


def fit_apply_standardizer(train: Segment, *others: Segment) -> tuple[list[Segment], Standardizer]:
    """Fit z-scoring on the training rows and apply it to every segment."""
    st = Standardizer.fit(train.values[train.prefix:])
    out = [Segment(s.name, st.transform(s.values), s.start, s.prefix, s.block_len) for s in (train,) + others]
    return out, st


# --------------------------------------------------------------------- windows


def make_windows(length: int, T: int, H: int, stride: int = 1) -> list[tuple[range, range]]:
    """Adjacent (history, future) row ranges of a segment of ``length`` rows."""
    if stride < 1:
        raise ConfigError("window stride must be >= 1")
    if length < T + H:
        raise ConfigError(f"segment of {length} rows is shorter than T+H = {T + H}")
    count = (length - T - H) // stride + 1
    return [(range(i, i + T), range(i + T, i + T + H)) for i in range(0, count * stride, stride)]


def window_starts(seg: Segment, T: int, H: int, stride: int = 1) -> np.ndarray:
    if seg.block_len:
        offset = seg.block_len - H - T
        return np.arange(seg.values.shape[0] // seg.block_len) * seg.block_len + offset
    return np.array([w[0].start for w in make_windows(seg.values.shape[0], T, H, stride)], dtype=np.int64)


def gather_windows(seg: Segment, starts: np.ndarray, T: int, H: int) -> WindowBatch:
    starts = np.asarray(starts, dtype=np.int64)
    idx_h = starts[:, None] + np.arange(T)[None, :]
    idx_f = starts[:, None] + T + np.arange(H)[None, :]
    return WindowBatch(seg.values[idx_h], seg.values[idx_f], starts)


def iter_batches(seg: Segment, T: int, H: int, batch_size: int, stride: int = 1,
                 rng: np.random.Generator | None = None, limit: int | None = None) -> Iterator[WindowBatch]:
    """Yield window batches; shuffled when ``rng`` is given, in order otherwise."""
    starts = window_starts(seg, T, H, stride)
    if rng is not None:
        starts = starts[rng.permutation(len(starts))]
    if limit is not None:
        starts = starts[:limit]
    for i in range(0, len(starts), batch_size):
        yield gather_windows(seg, starts[i:i + batch_size], T, H)


# ------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic unmixing data made of independent blocks of ``block_len`` rows.

    time_mix:    block = (A_b @ S)^T, A_b ~ N(0,1) per block (N x k),
                 S fixed simplex columns (k x block_len).
    channel_mix: block = A @ S_b, A fixed sinusoid mixtures (block_len x k),
                 S_b simplex columns per block (k x N).
    dual:        sum of one channel_mix and one time_mix component.
    """

    mode: str = "dual"
    block_len: int = 192
    n_channels: int = 4
    rank: int = 3
    n_blocks: int = 64
    noise_sigma: float = 0.05
    seed: int = 0
    max_period: float = 0.0  # 0 -> block_len; longest sinusoid period in rows

    def __post_init__(self):
        if self.mode not in ("time_mix", "channel_mix", "dual"):
            raise ConfigError(f"unknown synth mode {self.mode!r}")
        for key in ("block_len", "n_channels", "rank", "n_blocks"):
            if getattr(self, key) < 1:
                raise ConfigError(f"synth {key} must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.rank > self.n_channels:
            warnings.warn(f"over-complete synthetic mixture: rank {self.rank} > channels {self.n_channels}",
                          stacklevel=2)


@dataclass
class SynthTruth:
    """Ground-truth factors. Per-block factors are stacked along axis 0."""

    A: np.ndarray | None = None  # channel_mix: block_len x k
    S: np.ndarray | None = None  # channel_mix: n_blocks x k x N
    A_t: np.ndarray | None = None  # time_mix: n_blocks x N x k
    S_t: np.ndarray | None = None  # time_mix: k x block_len
    clean: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def simplex_columns(rng: np.random.Generator, k: int, n: int) -> np.ndarray:
    """n columns drawn uniformly on the k-simplex (normalised exponentials)."""
    e = rng.exponential(size=(k, n))
    return e / e.sum(axis=0, keepdims=True)


def sinusoid_bases(rng: np.random.Generator, length: int, k: int, max_period: float,
                   n_terms: int = 3) -> np.ndarray:
    t = np.arange(length)[:, None]
    out = np.zeros((length, k))
    for _ in range(n_terms):
        period = rng.uniform(max_period / 6, max_period, size=k)
        phase = rng.uniform(0, 2 * np.pi, size=k)
        amp = rng.uniform(0.5, 1.5, size=k)
        out += amp * np.sin(2 * np.pi * t / period + phase)
    return out / np.sqrt(n_terms)


def synth_mixture(spec: SynthSpec) -> tuple[RawSeries, SynthTruth]:
    rng = np.random.default_rng(spec.seed)
    L, N, k, nb = spec.block_len, spec.n_channels, spec.rank, spec.n_blocks
    max_period = spec.max_period or float(L)
    clean = np.zeros((nb, L, N))
    truth = SynthTruth()
    if spec.mode in ("channel_mix", "dual"):
        truth.A = sinusoid_bases(rng, L, k, max_period)
        truth.S = np.stack([simplex_columns(rng, k, N) for _ in range(nb)])
        clean += truth.A[None] @ truth.S
    if spec.mode in ("time_mix", "dual"):
        truth.A_t = rng.standard_normal((nb, N, k))
        truth.S_t = simplex_columns(rng, k, L)
        clean += np.swapaxes(truth.A_t @ truth.S_t[None], 1, 2)
    clean = clean.reshape(nb * L, N)
    truth.clean = clean
    values = clean + spec.noise_sigma * rng.standard_normal(clean.shape) if spec.noise_sigma else clean.copy()
    base = dt.datetime(2000, 1, 1)
    stamps = [(base + dt.timedelta(hours=i)).strftime("%Y-%m-%d %H:%M:%S") for i in range(nb * L)]
    return RawSeries(stamps, values, [f"ch{i}" for i in range(N)]), truth


def reconstruct_from_truth(truth: SynthTruth, n_blocks: int, block_len: int, n_channels: int) -> np.ndarray:
    out = np.zeros((n_blocks, block_len, n_channels))
    if truth.A is not None:
        out += truth.A[None] @ truth.S
    if truth.A_t is not None:
        out += np.swapaxes(truth.A_t @ truth.S_t[None], 1, 2)
    return out.reshape(n_blocks * block_len, n_channels)


SIDECARS = {"A": "A_star.csv", "S": "S_star.csv", "A_t": "A_t_star.csv", "S_t": "S_t_star.csv"}


def write_synth(outdir: str | Path, spec: SynthSpec, series: RawSeries, truth: SynthTruth) -> list[Path]:
    """Write ``data.csv`` plus factor sidecars.

    For channel_mix the sidecars are ``A_star.csv`` (block_len x k) and
    ``S_star.csv`` (per-block k x N matrices stacked row-wise). For time_mix
    ``A_star.csv`` holds the per-block N x k matrices stacked row-wise and
    ``S_star.csv`` the fixed k x block_len coefficients. Dual data writes the
    channel component as ``A_star``/``S_star`` and the time component as
    ``A_t_star``/``S_t_star``.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = [outdir / "data.csv"]
    write_series_csv(written[0], series)
    mats = {}
    if spec.mode == "time_mix":
        mats["A"] = truth.A_t.reshape(-1, spec.rank)
        mats["S"] = truth.S_t
    else:
        mats["A"] = truth.A
        mats["S"] = truth.S.reshape(-1, spec.n_channels)
        if spec.mode == "dual":
            mats["A_t"] = truth.A_t.reshape(-1, spec.rank)
            mats["S_t"] = truth.S_t
    for key, mat in mats.items():
        path = outdir / SIDECARS[key]
        write_matrix_csv(path, mat)
        written.append(path)
    return written


def load_synth_truth(outdir: str | Path, spec: SynthSpec) -> SynthTruth:
    outdir = Path(outdir)
    A = read_matrix_csv(outdir / SIDECARS["A"])
    S = read_matrix_csv(outdir / SIDECARS["S"])
    nb, k, N = spec.n_blocks, spec.rank, spec.n_channels
    if spec.mode == "time_mix":
        return SynthTruth(A_t=A.reshape(nb, N, k), S_t=S)
    truth = SynthTruth(A=A, S=S.reshape(nb, k, N))
    if spec.mode == "dual":
        truth.A_t = read_matrix_csv(outdir / SIDECARS["A_t"]).reshape(nb, N, k)
        truth.S_t = read_matrix_csv(outdir / SIDECARS["S_t"])
    return truth


def segment_rows(segments: Sequence[Segment]) -> tuple[int, ...]:
    return tuple(s.n_rows for s in segments)
