"""Finite-difference verification suite used by ``unmixers gradcheck``.

Each registered check returns the worst relative error between autodiff and
central differences. Inputs are drawn away from kinks (ReLU at 0, |x| at 0) so
the numerical derivative is well defined.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .model import ModelConfig, UnmixingModel, dual_l1_loss
from .params import named_parameters
from .ssm import (SsmConfig, SsmParams, bimamba, init_bimamba_params, init_ssm_params, inverse_softplus,
                  mamba_forward, selective_scan)
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4
EPS = 1e-5

TOY_MODEL = ModelConfig(T=16, H=8, N=3, k1=2, k2=2, patch_len=8, patch_stride=8,
                        ssm=SsmConfig(d_model=4, d_state=3, d_conv=3, expand=2))


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(self.error < TOLERANCE)


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.1) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _weights(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    # fixed random cotangent so sum(w * f(x)) exercises every output
    return rng.standard_normal(shape)


def _dot(y: Tensor, w: np.ndarray) -> Tensor:
    return tn.sum_(y * Tensor(w))


def check_matmul(rng) -> float:
    b = _weights(rng, (2, 4, 3))
    w = _probe(rng, (2, 5, 3))
    a = rng.standard_normal((2, 5, 4))
    shared = _weights(rng, (4, 3))
    e1 = grad_check(lambda x: _dot(x @ b, w), a, EPS)
    e2 = grad_check(lambda x: _dot(Tensor(a) @ x, w), b.data, EPS)
    e3 = grad_check(lambda x: _dot(Tensor(a) @ x, w), shared.data, EPS)
    return max(e1, e2, e3)


def check_softmax(rng) -> float:
    w = _probe(rng, (3, 4))
    return max(grad_check(lambda x: _dot(tn.softmax_axis(x, ax), w), rng.standard_normal((3, 4)), EPS)
               for ax in (0, 1))


def check_conv(rng) -> float:
    x = rng.standard_normal((2, 7, 3))
    k = rng.standard_normal((3, 3))
    b = rng.standard_normal(3)
    w = _probe(rng, (2, 7, 3))
    return max(
        grad_check(lambda t: _dot(tn.causal_conv1d(t, Tensor(k), Tensor(b)), w), x, EPS),
        grad_check(lambda t: _dot(tn.causal_conv1d(Tensor(x), t, Tensor(b)), w), k, EPS),
        grad_check(lambda t: _dot(tn.causal_conv1d(Tensor(x), Tensor(k), t), w), b, EPS),
    )


def _activation_check(kind: str) -> Callable:
    def check(rng) -> float:
        w = _probe(rng, (4, 5))
        return grad_check(lambda x: _dot(tn.activation(x, kind), w), _away_from_zero(rng, (4, 5)) * 3, EPS)
    return check


def check_exp_softplus(rng) -> float:
    w = _probe(rng, (3, 4))
    x = rng.standard_normal((3, 4))
    return max(grad_check(lambda t: _dot(tn.exp(t), w), x, EPS),
               grad_check(lambda t: _dot(tn.softplus(t), w), x * 3, EPS))


def check_l1(rng) -> float:
    target = rng.standard_normal((4, 3))
    pred = target + _away_from_zero(rng, (4, 3))
    return max(grad_check(lambda t: tn.l1_loss(t, Tensor(target)), pred, EPS),
               grad_check(lambda t: tn.l1_loss(Tensor(pred), t), target, EPS))


def check_shaping(rng) -> float:
    w = _probe(rng, (2, 4, 3))
    x = rng.standard_normal((2, 3, 4))
    v = rng.standard_normal(3)
    idx = np.array([2, 0, 1, 2])
    w_take, w_cat, w_stack = _probe(rng, (2, 3, 4)), _probe(rng, (2, 3, 6)), _probe(rng, (2, 2, 3, 4))
    return max(
        grad_check(lambda t: _dot(tn.transpose(t, (0, 2, 1)), w), x, EPS),
        grad_check(lambda t: _dot(tn.reshape(tn.flip(t, 1), (2, 4, 3)), w), x, EPS),
        grad_check(lambda t: _dot(tn.broadcast_to(t, (2, 4, 3)), w), v, EPS),
        grad_check(lambda t: _dot(tn.bias_add(Tensor(w), t) * Tensor(w), w), v, EPS),
        grad_check(lambda t: _dot(tn.take(t, idx, axis=-1), w_take), x, EPS),
        grad_check(lambda t: _dot(tn.concat([t, t[..., :2]], axis=-1), w_cat), x, EPS),
        grad_check(lambda t: _dot(tn.stack([t, t * t], axis=0), w_stack), x, EPS),
        grad_check(lambda t: tn.mean(t * t, axis=1).sum(), x, EPS),
    )


def check_scan(rng) -> float:
    """The affine recurrence primitive for both evaluation orders."""
    a = rng.uniform(0.2, 0.95, size=(9, 2, 3))
    b = rng.standard_normal((9, 2, 3))
    w = _probe(rng, (9, 2, 3))
    worst = 0.0
    for method in ("sequential", "parallel"):
        worst = max(worst,
                    grad_check(lambda t: _dot(tn.linear_recurrence(t, Tensor(b), 0, method), w), a, EPS),
                    grad_check(lambda t: _dot(tn.linear_recurrence(Tensor(a), t, 0, method), w), b, EPS))
    return worst


def check_selective_scan(rng) -> float:
    cfg = SsmConfig(d_model=3, d_state=3, expand=1)
    p = init_ssm_params(cfg, rng)
    u = rng.standard_normal((2, 6, cfg.d_inner))
    w = _probe(rng, u.shape)
    return max(grad_check(lambda t: _dot(selective_scan(t, p, m), w), u, EPS) for m in ("sequential", "parallel"))


def check_mamba(rng) -> float:
    cfg = SsmConfig(d_model=3, d_state=3, d_conv=3, expand=2)
    p = init_ssm_params(cfg, rng)
    x = rng.standard_normal((2, 5, 3))
    w = _probe(rng, x.shape)
    return grad_check(lambda t: _dot(mamba_forward(t, p), w), x, EPS)


def check_bimamba(rng) -> float:
    cfg = SsmConfig(d_model=3, d_state=3, d_conv=3, expand=2)
    p = init_bimamba_params(cfg, rng)
    x = rng.standard_normal((2, 5, 3))
    w = _probe(rng, x.shape)
    return grad_check(lambda t: _dot(bimamba(t, p), w), x, EPS)


def toy_problem(seed: int = 0) -> tuple[UnmixingModel, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    model = UnmixingModel.init(TOY_MODEL, rng)
    hist = rng.standard_normal((2, TOY_MODEL.T, TOY_MODEL.N))
    fut = rng.standard_normal((2, TOY_MODEL.H, TOY_MODEL.N))
    return model, hist, fut


def check_full_model(rng) -> float:
    """model_forward + dual_l1_loss, differentiated w.r.t. the history window."""
    model, hist, fut = toy_problem(int(rng.integers(1 << 31)))
    future = Tensor(fut)
    return grad_check(lambda t: dual_l1_loss(model(t), t, future), hist, EPS)


def well_scaled_ssm(p: SsmParams, rng: np.random.Generator) -> None:
    """Move an SSM block to a point where every parameter visibly affects the output.

    At init the step sizes are 1e-3..1e-1, which leaves a_log and the step-size
    projection with gradients near 1e-10, below the central-difference floor.
    """
    p.dt_bias.data[...] = inverse_softplus(rng.uniform(0.3, 1.0, p.dt_bias.shape))
    p.a_log.data[...] = np.log(rng.uniform(0.5, 2.0, p.a_log.shape))
    for t in (p.b_proj, p.c_proj, p.dt_down, p.dt_up):
        t.data[...] = 0.5 * rng.standard_normal(t.shape)


def well_scaled_model(model: UnmixingModel, rng: np.random.Generator) -> None:
    pr = model.params
    if pr.temporal is not None:
        for blk in pr.temporal.blocks:
            well_scaled_ssm(blk, rng)
        pr.temporal.head_w.data[...] = rng.standard_normal(pr.temporal.head_w.shape)
        for t in (pr.factors.A_c, pr.factors.A_p):
            t.data[...] = rng.standard_normal(t.shape)
    if pr.channel is not None:
        for blk in pr.channel.blocks:
            well_scaled_ssm(blk.fwd, rng)
            well_scaled_ssm(blk.bwd, rng)
        pr.channel.head_w.data[...] = rng.standard_normal(pr.channel.head_w.shape)
        for t in (pr.factors.S_t_raw, pr.factors.S_p_raw):
            t.data[...] = rng.standard_normal(t.shape)


def normwise_param_check(loss_fn: Callable[[], Tensor], named_params, eps: float = EPS) -> float:
    """Worst per-tensor ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)."""
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    with tn.Tape():
        tn.backward(loss_fn())
    worst = 0.0
    with tn.no_grad():
        for _, p in named_params:
            analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
            numeric = np.zeros_like(p.data)
            flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = tn._scalar(loss_fn())
                flat[i] = orig - eps
                fm = tn._scalar(loss_fn())
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * eps)
            denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
            p.grad = None
    return worst


def check_mamba_params(rng) -> float:
    cfg = SsmConfig(d_model=3, d_state=3, d_conv=3, expand=2)
    p = init_ssm_params(cfg, rng)
    well_scaled_ssm(p, rng)
    x = Tensor(rng.standard_normal((2, 5, 3)))
    w = _probe(rng, x.shape)
    return normwise_param_check(lambda: _dot(mamba_forward(x, p), w), named_parameters(p))


def check_bimamba_params(rng) -> float:
    cfg = SsmConfig(d_model=3, d_state=3, d_conv=3, expand=2)
    p = init_bimamba_params(cfg, rng)
    well_scaled_ssm(p.fwd, rng)
    well_scaled_ssm(p.bwd, rng)
    x = Tensor(rng.standard_normal((2, 5, 3)))
    w = _probe(rng, x.shape)
    return normwise_param_check(lambda: _dot(bimamba(x, p), w), named_parameters(p))


def check_full_model_params(rng) -> float:
    """Parameter gradient of model_forward + dual_l1_loss on the toy config."""
    model, hist, fut = toy_problem(int(rng.integers(1 << 31)))
    well_scaled_model(model, rng)
    h, f = Tensor(hist), Tensor(fut)
    return normwise_param_check(lambda: dual_l1_loss(model(h), h, f), model.named_parameters())


REGISTRY: dict[str, Callable[[np.random.Generator], float]] = {
    "matmul": check_matmul,
    "softmax": check_softmax,
    "conv": check_conv,
    "relu": _activation_check("relu"),
    "silu": _activation_check("silu"),
    "sigmoid": _activation_check("sigmoid"),
    "exp_softplus": check_exp_softplus,
    "l1": check_l1,
    "shaping": check_shaping,
    "scan": check_scan,
    "selective_scan": check_selective_scan,
    "mamba": check_mamba,
    "bimamba": check_bimamba,
    "mamba_params": check_mamba_params,
    "bimamba_params": check_bimamba_params,
    "full_model": check_full_model,
    "full_model_params": check_full_model_params,
}


def run_suite(seed: int = 0, names: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name in names or list(REGISTRY):
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        t0 = time.perf_counter()
        try:
            err = REGISTRY[name](rng)
        except ArithmeticError:
            err = float("inf")
        if not np.isfinite(err):
            err = float("inf")
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results
