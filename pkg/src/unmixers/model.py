"""Channel-time dual unmixing network.

Data flows in time-major layout ``(batch, T, N)``. Two encoders read the
history:

* the temporal encoder patches each channel, runs a Mamba block over the
  patch tokens and emits simplex channel coefficients ``S_c`` (k2 x N);
* the channel encoder treats the N channels as a token sequence, runs a
  bidirectional Mamba block and emits the basis matrix ``A_t`` (N x k1).

Both are shared between reconstruction and prediction: the channel path
decodes ``A_c @ S_c`` and ``A_p @ S_c``; the time path decodes
``A_t @ softmax(S_t)`` and ``A_t @ softmax(S_p)``. A small projection fuses
the two paths for each segment.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError, NumericError
from .params import named_parameters
from .ssm import (BiMambaParams, SsmConfig, SsmParams, bimamba, init_bimamba_params,
                  init_ssm_params, mamba_forward)
from .tensor import Tensor

PATHS = ("dual", "time", "channel")
FUSIONS = ("pointwise", "channel")


@dataclass(frozen=True)
class ModelConfig:
    T: int = 96
    H: int = 96
    N: int = 7
    k1: int = 8
    k2: int = 8
    patch_len: int = 16
    patch_stride: int = 8
    lambda1: float = 1.0
    lambda2: float = 1.0
    ssm: SsmConfig = field(default_factory=SsmConfig)
    n_layers: int = 1
    paths: str = "dual"
    fusion: str = "pointwise"
    scan: str = "sequential"
    basis_std: float = 1.0  # init std of the channel bases A_c / A_p

    def __post_init__(self):
        for key in ("T", "H", "N", "k1", "k2", "patch_len", "patch_stride", "n_layers"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.patch_len > self.T:
            raise ConfigError(f"patch_len {self.patch_len} exceeds history length {self.T}")
        if (self.T - self.patch_len) % self.patch_stride:
            raise ConfigError(
                f"(T - patch_len) = {self.T - self.patch_len} is not divisible by patch_stride {self.patch_stride}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.paths not in PATHS:
            raise ConfigError(f"paths must be one of {PATHS}, got {self.paths!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if not self.basis_std > 0:
            raise ConfigError(f"basis_std must be positive, got {self.basis_std}")
        if self.scan not in ("sequential", "parallel"):
            raise ConfigError(f"scan must be 'sequential' or 'parallel', got {self.scan!r}")

    @property
    def n_patches(self) -> int:
        return (self.T - self.patch_len) // self.patch_stride + 1

    @property
    def overcomplete(self) -> bool:
        return self.k1 > self.T or self.k2 > self.N

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "ssm"}
        out.update({f"ssm_{f.name}": getattr(self.ssm, f.name) for f in fields(self.ssm)})
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        ssm_kw = {f.name: d.pop(f"ssm_{f.name}") for f in fields(SsmConfig) if f"ssm_{f.name}" in d}
        return cls(ssm=SsmConfig(**ssm_kw), **d)


@dataclass
class PatchSet:
    tokens: Tensor  # (..., N, T_p, P)
    stride: int

    @property
    def n_patches(self) -> int:
        return self.tokens.shape[-2]


@dataclass
class TemporalEncoder:
    embed_w: Tensor  # P x d_model
    embed_b: Tensor
    blocks: list[SsmParams]
    head_w: Tensor  # d_model x k2
    head_b: Tensor


@dataclass
class ChannelEncoder:
    embed_w: Tensor  # T x d_model
    embed_b: Tensor
    blocks: list[BiMambaParams]
    head_w: Tensor  # d_model x k1
    head_b: Tensor


@dataclass
class LearnableFactors:
    A_c: Tensor | None = None  # T x k2
    A_p: Tensor | None = None  # H x k2
    S_t_raw: Tensor | None = None  # k1 x T
    S_p_raw: Tensor | None = None  # k1 x H


@dataclass
class Projection:
    weight: Tensor  # n_paths (pointwise) or n_paths*N x N (channel)
    bias: Tensor


@dataclass
class ModelParams:
    temporal: TemporalEncoder | None
    channel: ChannelEncoder | None
    factors: LearnableFactors
    recon_proj: Projection
    pred_proj: Projection


@dataclass
class ModelOutput:
    recon: Tensor
    pred: Tensor
    X_c_rec: Tensor | None = None
    X_c_pred: Tensor | None = None
    X_t_rec: Tensor | None = None
    X_t_pred: Tensor | None = None
    S_c: Tensor | None = None
    A_t: Tensor | None = None
    S_t: Tensor | None = None
    S_p: Tensor | None = None

    def simplex_factors(self) -> dict[str, Tensor]:
        """Coefficient matrices whose columns must lie on the simplex (axis -2)."""
        return {k: v for k, v in (("S_c", self.S_c), ("S_t", self.S_t), ("S_p", self.S_p)) if v is not None}


# ----------------------------------------------------------------- patching


def patch_index(T: int, patch_len: int, stride: int) -> np.ndarray:
    if patch_len > T or (T - patch_len) % stride:
        raise ConfigError(f"cannot tile length {T} with patches of {patch_len} at stride {stride}")
    n = (T - patch_len) // stride + 1
    return np.arange(n)[:, None] * stride + np.arange(patch_len)[None, :]


def patchify(x: Tensor, cfg: ModelConfig) -> PatchSet:
    """Cut ``x`` (..., T, N) into channel-major patches (..., N, T_p, P)."""
    if x.ndim < 2 or x.shape[-2] != cfg.T:
        raise DimensionError(f"patchify expects (..., {cfg.T}, N), got {x.shape}")
    idx = patch_index(cfg.T, cfg.patch_len, cfg.patch_stride)
    return PatchSet(tn.take(tn.transpose(x), idx, axis=-1), cfg.patch_stride)


def unpatchify(tokens: np.ndarray, stride: int) -> np.ndarray:
    """Reassemble (..., N, T_p, P) patches to (..., L, N), averaging overlaps.

    L covers every position any patch touches.
    """
    n, plen = tokens.shape[-2:]
    length = (n - 1) * stride + plen
    lead = tokens.shape[:-2]
    acc = np.zeros(lead + (length,))
    count = np.zeros(length)
    for i in range(n):
        acc[..., i * stride:i * stride + plen] += tokens[..., i, :]
        count[i * stride:i * stride + plen] += 1
    return np.swapaxes(acc / count, -1, -2)


# ----------------------------------------------------------------- encoders


def temporal_encode(patches: PatchSet, enc: TemporalEncoder, scan: str = "sequential") -> Tensor:
    """Channel coefficients S_c (..., k2, N) from patch tokens (..., N, T_p, P)."""
    tok = patches.tokens
    lead = tok.shape[:-2]  # (..., N)
    seq = tn.reshape(tok, (-1,) + tok.shape[-2:])
    h = tn.linear(seq, enc.embed_w, enc.embed_b)
    for block in enc.blocks:
        h = mamba_forward(h, block, gate="silu", scan=scan)
    pooled = tn.mean(h, axis=1)
    logits = tn.reshape(tn.linear(pooled, enc.head_w, enc.head_b), lead + (-1,))
    return tn.transpose(tn.softmax_axis(logits, axis=-1))


def channel_encode(x: Tensor, enc: ChannelEncoder, scan: str = "sequential") -> Tensor:
    """Temporal basis A_t (..., N, k1): channels form the token sequence."""
    h = tn.linear(tn.transpose(x), enc.embed_w, enc.embed_b)
    for block in enc.blocks:
        h = bimamba(h, block, scan=scan)
    return tn.linear(h, enc.head_w, enc.head_b)


# ----------------------------------------------------------------- decoders


def decode_channel(S_c: Tensor, fac: LearnableFactors) -> tuple[Tensor, Tensor]:
    """(A_c @ S_c, A_p @ S_c); both products read the same S_c."""
    return tn.matmul(fac.A_c, S_c), tn.matmul(fac.A_p, S_c)


def decode_time(A_t: Tensor, fac: LearnableFactors) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Time-path reconstruction and prediction, transposed to time-major.

    Returns (X_t_rec, X_t_pred, S_t, S_p) where S_t/S_p are the column-softmaxed
    coefficient matrices.
    """
    S_t = tn.softmax_axis(fac.S_t_raw, axis=0)
    S_p = tn.softmax_axis(fac.S_p_raw, axis=0)
    return tn.transpose(tn.matmul(A_t, S_t)), tn.transpose(tn.matmul(A_t, S_p)), S_t, S_p


def project(X_c: Tensor, X_t: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-position fusion out = w0*X_c + w1*X_t + b."""
    return fuse([X_c, X_t], w, b)


def fuse(paths: list[Tensor], w: Tensor, b: Tensor) -> Tensor:
    """Concatenate path outputs on a new trailing axis and apply a shared linear map."""
    if any(p.shape != paths[0].shape for p in paths):
        raise DimensionError(f"fusion inputs differ in shape: {[p.shape for p in paths]}")
    if w.shape != (len(paths),) or b.shape != (1,):
        raise DimensionError(f"fusion weight {w.shape} / bias {b.shape} do not match {len(paths)} paths")
    stacked = tn.stack(paths, axis=-1)
    out = tn.bias_add(tn.matmul(stacked, tn.reshape(w, (len(paths), 1))), b)
    return tn.reshape(out, paths[0].shape)


def fuse_channels(paths: list[Tensor], w: Tensor, b: Tensor) -> Tensor:
    """Alternative fusion: concatenate along channels and map n_paths*N -> N."""
    return tn.linear(tn.concat(paths, axis=-1), w, b)


# ----------------------------------------------------------------- model


def _normal(rng: np.random.Generator, shape, sigma: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, sigma, size=shape), requires_grad=True)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class UnmixingModel:
    """Parameters plus forward pass for a given :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int | np.random.Generator = 0) -> "UnmixingModel":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        if cfg.overcomplete:
            warnings.warn(f"over-complete bases: k1={cfg.k1} (T={cfg.T}), k2={cfg.k2} (N={cfg.N})",
                          stacklevel=2)
        d = cfg.ssm.d_model
        use_channel_path = cfg.paths in ("dual", "channel")
        use_time_path = cfg.paths in ("dual", "time")
        temporal = channel = None
        factors = LearnableFactors()
        if use_channel_path:
            temporal = TemporalEncoder(
                embed_w=_uniform(rng, cfg.patch_len, (cfg.patch_len, d)),
                embed_b=_uniform(rng, cfg.patch_len, (d,)),
                blocks=[init_ssm_params(cfg.ssm, rng) for _ in range(cfg.n_layers)],
                head_w=_uniform(rng, d, (d, cfg.k2)),
                head_b=_uniform(rng, d, (cfg.k2,)),
            )
            factors.A_c = _normal(rng, (cfg.T, cfg.k2), cfg.basis_std)
            factors.A_p = _normal(rng, (cfg.H, cfg.k2), cfg.basis_std)
        if use_time_path:
            channel = ChannelEncoder(
                embed_w=_uniform(rng, cfg.T, (cfg.T, d)),
                embed_b=_uniform(rng, cfg.T, (d,)),
                blocks=[init_bimamba_params(cfg.ssm, rng) for _ in range(cfg.n_layers)],
                head_w=_normal(rng, (d, cfg.k1)),
                head_b=Tensor(np.zeros(cfg.k1), requires_grad=True),
            )
            factors.S_t_raw = _normal(rng, (cfg.k1, cfg.T))
            factors.S_p_raw = _normal(rng, (cfg.k1, cfg.H))
        n_paths = 2 if cfg.paths == "dual" else 1
        return cls(cfg, ModelParams(temporal, channel, factors,
                                    cls._init_projection(cfg, n_paths, rng),
                                    cls._init_projection(cfg, n_paths, rng)))

    @staticmethod
    def _init_projection(cfg: ModelConfig, n_paths: int, rng: np.random.Generator) -> Projection:
        if cfg.fusion == "channel":
            fan = n_paths * cfg.N
            return Projection(_uniform(rng, fan, (fan, cfg.N)), _uniform(rng, fan, (cfg.N,)))
        return Projection(_uniform(rng, n_paths, (n_paths,)), _uniform(rng, n_paths, (1,)))

    def named_parameters(self):
        return list(named_parameters(self.params))

    def parameters(self) -> list[Tensor]:
        return [t for _, t in named_parameters(self.params)]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, x_hist: Tensor, hook: Callable[[str, Tensor], Tensor] | None = None) -> ModelOutput:
        return model_forward(x_hist, self, hook=hook)


def _stage(name: str, fn, *args):
    try:
        return fn(*args)
    except NumericError as exc:
        raise NumericError(f"{name}: {exc}") from exc


def model_forward(x_hist: Tensor, model: UnmixingModel,
                  hook: Callable[[str, Tensor], Tensor] | None = None) -> ModelOutput:
    """Run both encoders once and decode reconstruction and prediction.

    ``hook(name, tensor)`` may replace the shared factors ``S_c`` / ``A_t``
    after encoding; it exists for inspection and perturbation tests.
    """
    cfg, p = model.cfg, model.params
    if x_hist.ndim < 2 or x_hist.shape[-2:] != (cfg.T, cfg.N):
        raise DimensionError(f"history must be (..., {cfg.T}, {cfg.N}), got {x_hist.shape}")
    out = {}
    rec_paths, pred_paths = [], []
    if p.temporal is not None:
        S_c = _stage("temporal encoder", lambda: temporal_encode(patchify(x_hist, cfg), p.temporal, cfg.scan))
        if hook is not None:
            S_c = hook("S_c", S_c)
        X_c_rec, X_c_pred = _stage("channel decoder", decode_channel, S_c, p.factors)
        out.update(S_c=S_c, X_c_rec=X_c_rec, X_c_pred=X_c_pred)
        rec_paths.append(X_c_rec)
        pred_paths.append(X_c_pred)
    if p.channel is not None:
        A_t = _stage("channel encoder", channel_encode, x_hist, p.channel, cfg.scan)
        if hook is not None:
            A_t = hook("A_t", A_t)
        X_t_rec, X_t_pred, S_t, S_p = _stage("time decoder", decode_time, A_t, p.factors)
        out.update(A_t=A_t, X_t_rec=X_t_rec, X_t_pred=X_t_pred, S_t=S_t, S_p=S_p)
        rec_paths.append(X_t_rec)
        pred_paths.append(X_t_pred)
    combine = fuse_channels if cfg.fusion == "channel" else fuse
    recon = _stage("projection", combine, rec_paths, p.recon_proj.weight, p.recon_proj.bias)
    pred = _stage("projection", combine, pred_paths, p.pred_proj.weight, p.pred_proj.bias)
    return ModelOutput(recon=recon, pred=pred, **out)


def dual_l1_loss(out: ModelOutput, x_hist: Tensor, x_future: Tensor,
                 lambda1: float = 1.0, lambda2: float = 1.0) -> Tensor:
    """lambda1 * mean|recon - hist| + lambda2 * mean|pred - future|."""
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError("loss weights must be non-negative")
    rec = tn.l1_loss(out.recon, x_hist)
    pred = tn.l1_loss(out.pred, x_future)
    return tn.scale(rec, lambda1) + tn.scale(pred, lambda2)


def with_config(model: UnmixingModel, **changes) -> UnmixingModel:
    """Same parameters, different runtime options (e.g. scan method)."""
    return UnmixingModel(replace(model.cfg, **changes), model.params)
