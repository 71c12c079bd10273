"""Selective state-space scan and the Mamba / bidirectional Mamba blocks.

The state matrix is diagonal per inner channel and stored as ``a_log`` with
``A = -exp(a_log)``, so it is negative by construction. Discretisation uses
``exp(delta * A)`` for the transition and the Euler rule ``delta * B`` on the
input path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, DimensionError, StabilityError
from .tensor import Tensor


@dataclass(frozen=True)
class SsmConfig:
    d_model: int = 16
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    use_skip: bool = True

    def __post_init__(self):
        for key in ("d_model", "d_state", "d_conv", "expand"):
            if getattr(self, key) < 1:
                raise ConfigError(f"ssm {key} must be >= 1, got {getattr(self, key)}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


@dataclass
class SsmParams:
    """Learnables of one Mamba block."""

    in_w: Tensor  # d_model x 2*d_inner
    in_b: Tensor
    conv_k: Tensor  # d_conv x d_inner
    conv_b: Tensor
    a_log: Tensor  # d_inner x d_state
    b_proj: Tensor  # d_inner x d_state
    c_proj: Tensor  # d_inner x d_state
    dt_down: Tensor  # d_inner x 1
    dt_up: Tensor  # 1 x d_inner
    dt_bias: Tensor  # d_inner
    skip: Tensor | None  # d_inner, None when the skip term is disabled
    out_w: Tensor  # d_inner x d_model
    out_b: Tensor

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]


@dataclass
class BiMambaParams:
    fwd: SsmParams
    bwd: SsmParams
    fuse_w: Tensor  # d_model x d_model
    fuse_b: Tensor


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_ssm_params(cfg: SsmConfig, rng: np.random.Generator) -> SsmParams:
    d, di, ds = cfg.d_model, cfg.d_inner, cfg.d_state
    a_log = np.log(np.tile(np.arange(1, ds + 1, dtype=float), (di, 1)))
    dt = rng.uniform(1e-3, 1e-1, size=di)
    return SsmParams(
        in_w=_uniform(rng, d, (d, 2 * di)),
        in_b=_uniform(rng, d, (2 * di,)),
        conv_k=_uniform(rng, cfg.d_conv, (cfg.d_conv, di)),
        conv_b=_uniform(rng, cfg.d_conv, (di,)),
        a_log=Tensor(a_log, requires_grad=True),
        b_proj=_uniform(rng, di, (di, ds)),
        c_proj=_uniform(rng, di, (di, ds)),
        dt_down=_uniform(rng, di, (di, 1)),
        dt_up=_uniform(rng, 1, (1, di)),
        dt_bias=Tensor(inverse_softplus(dt), requires_grad=True),
        skip=Tensor(np.ones(di), requires_grad=True) if cfg.use_skip else None,
        out_w=_uniform(rng, di, (di, d)),
        out_b=_uniform(rng, di, (d,)),
    )


def init_bimamba_params(cfg: SsmConfig, rng: np.random.Generator) -> BiMambaParams:
    return BiMambaParams(
        fwd=init_ssm_params(cfg, rng),
        bwd=init_ssm_params(cfg, rng),
        fuse_w=_uniform(rng, cfg.d_model, (cfg.d_model, cfg.d_model)),
        fuse_b=_uniform(rng, cfg.d_model, (cfg.d_model,)),
    )


def zoh_discretize(a: float, delta: float, b: float, x: float) -> tuple[float, float]:
    """Discretise one diagonal entry: returns (exp(delta*a), delta*b*x)."""
    if not a < 0:
        raise StabilityError(f"state entry must be negative, got {a}")
    if not delta > 0:
        raise ContractError(f"step size must be positive, got {delta}")
    return math.exp(delta * a), delta * b * x


def scan_inputs(u: Tensor, p: SsmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent step sizes, input and output projections for ``u`` (..., L, d_inner)."""
    delta = tn.softplus(tn.bias_add(u @ p.dt_down @ p.dt_up, p.dt_bias))
    return delta, u @ p.b_proj, u @ p.c_proj


def _selective_scan(u: Tensor, p: SsmParams, method: str) -> Tensor:
    if u.ndim < 2 or u.shape[-1] != p.d_inner:
        raise DimensionError(f"scan input {u.shape} does not end in d_inner={p.d_inner}")
    if u.shape[-2] < 1:
        raise ContractError("scan needs at least one step")
    di, ds = p.d_inner, p.d_state
    full = u.shape + (ds,)
    delta, bm, cm = scan_inputs(u, p)
    A = -tn.exp(p.a_log)
    a_bar = tn.exp(tn.broadcast_to(tn.reshape(delta, u.shape + (1,)), full) * tn.broadcast_to(A, full))
    du = tn.reshape(delta * u, u.shape + (1,))
    bx = tn.broadcast_to(du, full) * tn.broadcast_to(tn.reshape(bm, u.shape[:-1] + (1, ds)), full)
    h = tn.linear_recurrence(a_bar, bx, axis=-3, method=method)
    c_full = tn.broadcast_to(tn.reshape(cm, u.shape[:-1] + (1, ds)), full)
    y = tn.sum_(h * c_full, axis=-1)
    if p.skip is not None:
        y = y + tn.broadcast_to(p.skip, u.shape) * u
    return y


def selective_scan_seq(u: Tensor, params: SsmParams) -> Tensor:
    return _selective_scan(u, params, "sequential")


def selective_scan_parallel(u: Tensor, params: SsmParams) -> Tensor:
    return _selective_scan(u, params, "parallel")


def selective_scan(u: Tensor, params: SsmParams, method: str = "sequential") -> Tensor:
    return _selective_scan(u, params, method)


def mamba_forward(x: Tensor, params: SsmParams, gate: str = "silu", scan: str = "sequential") -> Tensor:
    """Gated Mamba block over ``x`` (..., L, d_model).

    in_proj splits into a main path (causal conv, SiLU, selective scan) and a
    gate path (``gate`` activation); their product is projected back.
    """
    di = params.d_inner
    xz = tn.linear(x, params.in_w, params.in_b)
    u = xz[..., :di]
    z = xz[..., di:]
    u = tn.silu(tn.causal_conv1d(u, params.conv_k, params.conv_b))
    y = _selective_scan(u, params, scan)
    return tn.linear(y * tn.activation(z, gate), params.out_w, params.out_b)


def bimamba_forward(x: Tensor, fwd: SsmParams, bwd: SsmParams, fuse_w: Tensor, fuse_b: Tensor,
                    scan: str = "sequential") -> Tensor:
    """Bidirectional block: ReLU-gated branches over x and reversed x, summed and fused."""
    seq_axis = x.ndim - 2
    x_f = mamba_forward(x, fwd, gate="relu", scan=scan)
    x_b = tn.flip(mamba_forward(tn.flip(x, seq_axis), bwd, gate="relu", scan=scan), seq_axis)
    return tn.linear(x_f + x_b, fuse_w, fuse_b)


def bimamba(x: Tensor, p: BiMambaParams, scan: str = "sequential") -> Tensor:
    return bimamba_forward(x, p.fwd, p.bwd, p.fuse_w, p.fuse_b, scan=scan)
