"""Adam optimisation, evaluation metrics and the early-stopping training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as tn
from .data import Segment, Standardizer, WindowBatch, iter_batches, window_starts
from .errors import ConfigError, NumericError
from .model import ModelOutput, UnmixingModel, dual_l1_loss
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    patience: int = 3
    seed: int = 0
    clip_norm: float = 5.0  # <= 0 disables clipping
    lr_schedule: str = "none"  # "none" or "plateau" (halve on a non-improving epoch)
    window_stride: int = 1
    eval_batch_size: int = 256
    max_train_windows: int = 0  # 0 -> use all

    def __post_init__(self):
        if not self.lr > 0 or not self.eps > 0:
            raise ConfigError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise ConfigError("epochs and batch_size must be >= 1, patience >= 0")
        if self.lr_schedule not in ("none", "plateau"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float | None = None  # current learning rate when a schedule changes it


@dataclass
class Metrics:
    mse: float
    mae: float
    loss: float = float("nan")
    horizon_mse: np.ndarray | None = None
    horizon_mae: np.ndarray | None = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return total


def adam_step(named_params: Iterable[tuple[str, Tensor]], state: OptimState, cfg: TrainConfig) -> OptimState:
    """One bias-corrected Adam update; parameters without a gradient see g = 0."""
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    lr = cfg.lr if state.lr is None else state.lr
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state


class Trainer:
    """Owns the model's optimiser state and the batch-order RNG."""

    def __init__(self, model: UnmixingModel, cfg: TrainConfig, rng: np.random.Generator | None = None,
                 state: OptimState | None = None):
        self.model = model
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed + 1)
        self.state = state if state is not None else OptimState()
        self.on_forward: Callable[[ModelOutput], None] | None = None

    def step(self, batch: WindowBatch) -> float:
        model, mcfg = self.model, self.model.cfg
        model.zero_grad()
        hist, fut = Tensor(batch.hist), Tensor(batch.future)
        with tn.Tape():
            out = model(hist)
            if self.on_forward is not None:
                self.on_forward(out)
            loss = dual_l1_loss(out, hist, fut, mcfg.lambda1, mcfg.lambda2)
            tn.backward(loss)
        params = model.named_parameters()
        clip_grad_norm([p for _, p in params], self.cfg.clip_norm)
        adam_step(params, self.state, self.cfg)
        return loss.item()

    def train_epoch(self, batches: Iterable[WindowBatch]) -> float:
        total, count = 0.0, 0
        for i, batch in enumerate(batches):
            try:
                loss = self.step(batch)
            except NumericError as exc:
                raise NumericError(f"batch {i}: {exc}") from exc
            total += loss * len(batch)
            count += len(batch)
        if count == 0:
            raise ConfigError("train_epoch received no batches")
        return total / count

    def epoch_batches(self, seg: Segment) -> Iterable[WindowBatch]:
        T, H = self.model.cfg.T, self.model.cfg.H
        limit = self.cfg.max_train_windows or None
        return iter_batches(seg, T, H, self.cfg.batch_size, self.cfg.window_stride, rng=self.rng, limit=limit)


def train_epoch(model: UnmixingModel, batches: Iterable[WindowBatch], cfg: TrainConfig,
                state: OptimState | None = None) -> tuple[float, OptimState]:
    trainer = Trainer(model, cfg, state=state)
    return trainer.train_epoch(batches), trainer.state


def predict(model: UnmixingModel, hist: np.ndarray) -> ModelOutput:
    with tn.no_grad():
        return model(Tensor(hist))


def evaluate(model: UnmixingModel, batches: Iterable[WindowBatch], standardizer: Standardizer | None = None,
             per_horizon: bool = False) -> Metrics:
    """MSE/MAE of the prediction path over every predicted cell.

    With a ``standardizer`` errors are measured after undoing the z-scoring;
    otherwise on the standardised scale. ``loss`` is the training objective on
    the standardised values.
    """
    mcfg = model.cfg
    se = ae = None
    loss_sum, n_windows = 0.0, 0
    with tn.no_grad():
        for batch in batches:
            hist, fut = Tensor(batch.hist), Tensor(batch.future)
            out = model(hist)
            loss_sum += dual_l1_loss(out, hist, fut, mcfg.lambda1, mcfg.lambda2).item() * len(batch)
            n_windows += len(batch)
            pred, target = out.pred.data, batch.future
            if standardizer is not None:
                pred, target = standardizer.inverse(pred), standardizer.inverse(target)
            diff = pred - target
            s = (diff ** 2).sum(axis=(0, 2))
            a = np.abs(diff).sum(axis=(0, 2))
            se = s if se is None else se + s
            ae = a if ae is None else ae + a
    if n_windows == 0:
        raise ConfigError("evaluate received no batches")
    cells_per_step = n_windows * mcfg.N
    h_mse, h_mae = se / cells_per_step, ae / cells_per_step
    return Metrics(float(h_mse.mean()), float(h_mae.mean()), loss_sum / n_windows,
                   h_mse if per_horizon else None, h_mae if per_horizon else None)


def eval_batches(model: UnmixingModel, seg: Segment, batch_size: int = 256, stride: int = 1):
    return iter_batches(seg, model.cfg.T, model.cfg.H, batch_size, stride)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_mse: float
    val_mae: float


@dataclass
class FitResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool


def snapshot(model: UnmixingModel) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def restore(model: UnmixingModel, snap: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        p.data[...] = snap[name]


def fit(trainer: Trainer, train_seg: Segment, val_seg: Segment,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> FitResult:
    """Train with early stopping on the validation objective.

    The model is left holding the parameters of its best validation epoch.
    """
    cfg, model = trainer.cfg, trainer.model
    best_loss, best_epoch, best = math.inf, 0, snapshot(model)
    history: list[EpochRecord] = []
    bad_epochs = 0
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        try:
            train_loss = trainer.train_epoch(trainer.epoch_batches(train_seg))
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}: {exc}") from exc
        m = evaluate(model, eval_batches(model, val_seg, cfg.eval_batch_size))
        rec = EpochRecord(epoch, train_loss, m.loss, m.mse, m.mae)
        history.append(rec)
        log.info("epoch %d train %.6f val %.6f mse %.6f mae %.6f", epoch, train_loss, m.loss, m.mse, m.mae)
        if on_epoch is not None:
            on_epoch(rec)
        if m.loss < best_loss:
            best_loss, best_epoch, best = m.loss, epoch, snapshot(model)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if cfg.lr_schedule == "plateau":
                trainer.state.lr = (trainer.state.lr or cfg.lr) * 0.5
            if bad_epochs >= max(cfg.patience, 1):
                stopped = epoch < cfg.epochs
                break
    restore(model, best)
    return FitResult(history, best_epoch, best_loss, stopped)


def count_windows(seg: Segment, T: int, H: int, stride: int = 1) -> int:
    return len(window_starts(seg, T, H, stride))
