"""Binary checkpoint format.

Little-endian layout::

    b"MTSU"  u32 version
    u32 len, utf-8 text           -- canonical "key=value\\n" lines, sorted by key
    repeated:
        u32 len, utf-8 name
        u32 rank, rank * u64 extents
        float64 data, row-major
    u32 crc32                     -- over every preceding byte

Optimiser moments are stored as tensors named ``adam.m/<param>`` and
``adam.v/<param>``, the standardiser as ``standardizer/mean`` and
``standardizer/std``. Scalars (step, best validation loss, RNG state) live in
the text block.
"""
from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, IncompatibleCheckpointError
from .model import ModelConfig

MAGIC = b"MTSU"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float | None = None
    best_val_loss: float = float("inf")
    rng_state: dict | None = None
    standardizer: tuple[np.ndarray, np.ndarray] | None = None
    extra: dict[str, str] = field(default_factory=dict)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(value: str, like):
    if isinstance(like, bool):
        return value == "true"
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def _config_text(ckpt: Checkpoint) -> str:
    items = {f"model.{k}": _fmt(v) for k, v in ckpt.config.to_dict().items()}
    items["optim.step"] = str(ckpt.step)
    items["optim.lr"] = "none" if ckpt.lr is None else repr(float(ckpt.lr))
    items["train.best_val_loss"] = repr(float(ckpt.best_val_loss))
    if ckpt.rng_state is not None:
        st = ckpt.rng_state
        items["rng.bit_generator"] = st["bit_generator"]
        items["rng.state"] = str(st["state"]["state"])
        items["rng.inc"] = str(st["state"]["inc"])
        items["rng.has_uint32"] = str(st["has_uint32"])
        items["rng.uinteger"] = str(st["uinteger"])
    for k, v in ckpt.extra.items():
        items[f"extra.{k}"] = v
    for key, value in items.items():
        if "\n" in key or "\n" in value or "=" in key:
            raise ValueError(f"cannot serialise config entry {key!r}")
    return "".join(f"{k}={items[k]}\n" for k in sorted(items))


def _tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = list(ckpt.params.items())
    out += [(f"adam.m/{k}", v) for k, v in ckpt.adam_m.items()]
    out += [(f"adam.v/{k}", v) for k, v in ckpt.adam_v.items()]
    if ckpt.standardizer is not None:
        out += [("standardizer/mean", ckpt.standardizer[0]), ("standardizer/std", ckpt.standardizer[1])]
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = _config_text(ckpt).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for name, arr in _tensors(ckpt):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_save(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise ChecksumError("not a checkpoint file (bad magic or truncated header)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch (file corrupted or truncated)")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise IncompatibleCheckpointError(f"checkpoint format version {version}, this build reads {VERSION}")
    pos = 8
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    text = body[pos:pos + n].decode("utf-8")
    pos += n
    entries = dict(line.split("=", 1) for line in text.splitlines() if line)
    tensors: dict[str, np.ndarray] = {}
    while pos < len(body):
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", body, pos)
        pos += 8 * rank
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * count
    return _assemble(entries, tensors)


def _assemble(entries: dict[str, str], tensors: dict[str, np.ndarray]) -> Checkpoint:
    defaults = ModelConfig().to_dict()
    model_kw = {k[6:]: _parse(v, defaults[k[6:]]) for k, v in entries.items()
                if k.startswith("model.") and k[6:] in defaults}
    config = ModelConfig.from_dict(model_kw)
    params, m, v = {}, {}, {}
    std = {}
    for name, arr in tensors.items():
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        elif name.startswith("standardizer/"):
            std[name[13:]] = arr
        else:
            params[name] = arr
    rng_state = None
    if "rng.state" in entries:
        rng_state = {
            "bit_generator": entries["rng.bit_generator"],
            "state": {"state": int(entries["rng.state"]), "inc": int(entries["rng.inc"])},
            "has_uint32": int(entries["rng.has_uint32"]),
            "uinteger": int(entries["rng.uinteger"]),
        }
    lr = entries.get("optim.lr", "none")
    return Checkpoint(
        config=config,
        params=params,
        adam_m=m,
        adam_v=v,
        step=int(entries.get("optim.step", 0)),
        lr=None if lr == "none" else float(lr),
        best_val_loss=float(entries.get("train.best_val_loss", "inf")),
        rng_state=rng_state,
        standardizer=(std["mean"], std["std"]) if std else None,
        extra={k[6:]: v for k, v in entries.items() if k.startswith("extra.")},
    )


def checkpoint_load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def capture(trainer, standardizer=None, best_val_loss: float = float("inf")) -> Checkpoint:
    """Checkpoint a :class:`~unmixers.train.Trainer` (model, optimiser, RNG)."""
    params = {name: p.data.copy() for name, p in trainer.model.named_parameters()}
    st = trainer.state
    return Checkpoint(
        config=trainer.model.cfg,
        params=params,
        adam_m={k: a.copy() for k, a in st.m.items()},
        adam_v={k: a.copy() for k, a in st.v.items()},
        step=st.step,
        lr=st.lr,
        best_val_loss=best_val_loss,
        rng_state=trainer.rng.bit_generator.state,
        standardizer=None if standardizer is None else (standardizer.mean.copy(), standardizer.std.copy()),
    )


def restore_model(ckpt: Checkpoint):
    """Build an :class:`UnmixingModel` carrying the checkpoint's parameters."""
    from .model import UnmixingModel

    model = UnmixingModel.init(ckpt.config, 0)
    names = [n for n, _ in model.named_parameters()]
    missing = sorted(set(names) ^ set(ckpt.params))
    if missing:
        raise IncompatibleCheckpointError(f"checkpoint parameters do not match the model: {missing[:5]}")
    for name, p in model.named_parameters():
        if p.shape != ckpt.params[name].shape:
            raise IncompatibleCheckpointError(
                f"parameter {name}: checkpoint shape {ckpt.params[name].shape}, model shape {p.shape}")
        p.data[...] = ckpt.params[name]
    return model


def restore_trainer(ckpt: Checkpoint, train_cfg):
    from .train import OptimState, Trainer

    model = restore_model(ckpt)
    rng = np.random.default_rng()
    if ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state
    state = OptimState({k: a.copy() for k, a in ckpt.adam_m.items()},
                       {k: a.copy() for k, a in ckpt.adam_v.items()}, ckpt.step, ckpt.lr)
    return Trainer(model, train_cfg, rng=rng, state=state)
