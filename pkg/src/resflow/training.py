"""Mean-squared flow-map loss and the mini-batch training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dataio import TrainingSet, batches
from .dynamics import DEFAULT_INTEGRATOR, Domain, IntegratorConfig, SystemDef, integrate_flow
from .errors import ContractError, TrainingDivergedError, ValidationError
from .flowmodels import FlowModel, ModelKind, model_backward, model_forward
from .neuralnet import FnnParams, max_relative_error, perturbed_pair

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "LossReport",
    "mse_loss",
    "loss_and_gradient",
    "loss_central_differences",
    "loss_gradient_check",
    "train",
    "holdout_error",
    "write_loss_csv",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 10
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    holdout_fraction: float = 0.1
    ema_decay: float = 0.999

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.holdout_fraction < 1:
            raise ContractError("holdout_fraction must lie in [0, 1)")
        if not 0 <= self.ema_decay < 1:
            raise ContractError("ema_decay must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    per_epoch_train_loss: list = field(default_factory=list)
    final_holdout_loss: Optional[float] = None
    per_epoch_holdout_loss: Optional[list] = None


def mse_loss(outputs, targets) -> float:
    """``(1/J) sum_j ||y_j - z_j||^2``: squared 2-norm per pair, mean over pairs only."""
    y = np.atleast_2d(np.asarray(outputs, dtype=float))
    z = np.atleast_2d(np.asarray(targets, dtype=float))
    if y.shape != z.shape:
        raise ContractError(f"outputs {y.shape} and targets {z.shape} differ in shape")
    if y.shape[0] < 1:
        raise ContractError("need at least one pair")
    r = y - z
    return float(np.sum(r * r) / y.shape[0])


def loss_and_gradient(model: FlowModel, z1, z2):
    """Batch MSE and its gradient, one list of layer arrays per stored block."""
    z1 = np.atleast_2d(z1)
    y, caches = model_forward(model, z1)
    r = y - z2
    loss = float(np.sum(r * r) / z1.shape[0])
    grads, _ = model_backward(model, caches, (2.0 / z1.shape[0]) * r)
    return loss, grads


def loss_central_differences(model: FlowModel, z1, z2, h: float = 1e-5) -> list:
    """Central-difference gradient of the batch MSE, laid out like :func:`loss_and_gradient`.

    Perturbing a weight of the shared RT-ResNet block perturbs every one of
    its K applications. The plus/minus difference is propagated through the
    whole chain rather than formed by subtracting two loss values.
    """
    if not h > 0:
        raise ContractError("h must be positive")
    z1 = np.atleast_2d(np.asarray(z1, dtype=float))
    z2 = np.atleast_2d(np.asarray(z2, dtype=float))
    out = []
    for slot, block in enumerate(model.blocks):
        grads = []
        for j, w in enumerate(block.layers):
            rows, cols = np.unravel_index(np.arange(w.size), w.shape)
            y_p = np.broadcast_to(z1, (w.size,) + z1.shape).copy()
            y_m = y_p.copy()
            dy = np.zeros_like(y_p)
            for k in range(model.K):
                hit = model.kind is not ModelKind.RS or k == slot
                n_p, n_m, dn = perturbed_pair(model.block_for(k), y_p, y_m, dy,
                                              j if hit else None, rows, cols, h)
                y_p, y_m, dy = y_p + n_p, y_m + n_m, dy + dn
            # (y+ - z)^2 - (y- - z)^2 = (y+ - y-)(y+ + y- - 2z)
            diff = np.sum(dy * (y_p + y_m - 2.0 * z2), axis=(1, 2)) / z1.shape[0]
            grads.append((diff / (2 * h)).reshape(w.shape))
        out.append(grads)
    return out


def loss_gradient_check(model: FlowModel, z1, z2, h: float = 1e-5) -> float:
    """Max entrywise relative error of the backprop MSE gradient against central differences."""
    _, grads = loss_and_gradient(model, z1, z2)
    numeric = loss_central_differences(model, z1, z2, h)
    return max(max_relative_error(a, n) for a, n in zip(grads, numeric))


class _FlatParams:
    """All weights of a model laid out in one vector, with per-layer views."""

    def __init__(self, model: FlowModel):
        arrays = [w for b in model.blocks for w in b.layers]
        self.theta = np.concatenate([w.ravel() for w in arrays])
        self.blocks = []
        offset = 0
        for b in model.blocks:
            layers = []
            for w in b.layers:
                layers.append(self.theta[offset:offset + w.size].reshape(w.shape))
                offset += w.size
            self.blocks.append(FnnParams(b.architecture, layers, dict(b.activations),
                                         b.weight_std, b.seed))
        self.model = FlowModel(model.kind, model.K, self.blocks, model.lag)

    def flatten(self, grads) -> np.ndarray:
        return np.concatenate([g.ravel() for block in grads for g in block])

    def snapshot(self) -> FlowModel:
        return FlowModel(self.model.kind, self.model.K, [b.copy() for b in self.blocks],
                         self.model.lag)


def _split(n_pairs: int, fraction: float, seed: int):
    n_hold = int(round(fraction * n_pairs))
    if n_hold == 0:
        return np.arange(n_pairs), np.arange(0)
    if n_hold >= n_pairs:
        raise ContractError("holdout fraction leaves no training pairs")
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n_pairs)
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def train(model: FlowModel, ts: TrainingSet, cfg: TrainConfig = TrainConfig(),
          progress=None) -> tuple[FlowModel, LossReport]:
    """Fit ``model`` to ``ts``; returns a new model and the loss history.

    Each epoch reshuffles the training pairs with a seed derived from
    ``cfg.seed`` and the epoch number, then takes one optimizer step per batch.
    ``per_epoch_train_loss`` is the batch-size weighted mean of the batch
    losses seen during the epoch.

    With ``cfg.ema_decay > 0`` an exponential moving average of the weights is
    kept alongside the optimizer iterate; the averaged weights are what get
    returned and what the holdout loss is measured on. Set it to 0 to get the
    raw last iterate.
    """
    if not all(isinstance(b, FnnParams) for b in model.blocks):
        raise ContractError("only network models can be trained")
    if abs(model.lag - ts.lag) > 1e-12 * max(1.0, ts.lag):
        raise ValidationError(f"model lag {model.lag} does not match data lag {ts.lag}")
    if model.dim != ts.dim:
        raise ValidationError(f"model dimension {model.dim} does not match data dimension {ts.dim}")

    train_idx, hold_idx = _split(len(ts), cfg.holdout_fraction, cfg.seed)
    x_tr, y_tr = ts.z1[train_idx], ts.z2[train_idx]
    x_ho, y_ho = ts.z1[hold_idx], ts.z2[hold_idx]
    batch_size = min(cfg.batch_size, len(train_idx))

    flat = _FlatParams(model)
    work = flat.model
    theta = flat.theta
    avg = _FlatParams(model) if cfg.ema_decay > 0 else flat
    decay = cfg.ema_decay
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    step = 0
    report = LossReport(per_epoch_holdout_loss=[] if hold_idx.size else None)
    trace = []

    for epoch in range(cfg.epochs):
        total = 0.0
        epoch_seed = int(np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0])
        for bi, idx in enumerate(batches(len(train_idx), batch_size, epoch_seed)):
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_gradient(work, x_tr[idx], y_tr[idx])
            trace.append(loss)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, bi, trace)
            g = flat.flatten(grads)
            step += 1
            if cfg.optimizer == "adam":
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                mhat = m / (1.0 - b1**step)
                vhat = v / (1.0 - b2**step)
                theta -= lr * mhat / (np.sqrt(vhat) + eps)
            else:
                theta -= lr * g
            if avg is not flat:
                avg.theta *= decay
                avg.theta += (1.0 - decay) * theta
            total += loss * len(idx)
        report.per_epoch_train_loss.append(total / len(train_idx))
        if hold_idx.size:
            report.per_epoch_holdout_loss.append(mse_loss(model_forward(avg.model, x_ho)[0], y_ho))
        if progress is not None:
            progress(epoch, report)
        if len(trace) > 1000:
            del trace[:-100]

    if hold_idx.size:
        report.final_holdout_loss = report.per_epoch_holdout_loss[-1]
    log.info("trained %s: final train loss %.3e", model.kind.label, report.per_epoch_train_loss[-1])
    return avg.snapshot(), report


def holdout_error(model: FlowModel, system: SystemDef, domain: Domain, points: int = 10_000,
                  seed: int = 0, cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                  sample: Optional[np.ndarray] = None) -> tuple[float, float]:
    """Sampled ``sup`` and mean of ``||model(x) - Phi_lag(x)||`` over ``domain``.

    ``sample`` overrides the random draw with explicit points.
    """
    if sample is None:
        if points < 1:
            raise ContractError("points must be >= 1")
        sample = domain.sample(points, np.random.default_rng(seed))
    x = np.atleast_2d(np.asarray(sample, dtype=float))
    pred = model_forward(model, x)[0]
    ref = integrate_flow(system, x, model.lag, cfg)
    err = np.linalg.norm(pred - ref, axis=1)
    return float(err.max()), float(err.mean())


def write_loss_csv(path, report: LossReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        hold = report.per_epoch_holdout_loss
        writer.writerow(["epoch", "train_loss"] + (["holdout_loss"] if hold else []))
        for e, loss in enumerate(report.per_epoch_train_loss):
            row = [e, repr(float(loss))]
            if hold:
                row.append(repr(float(hold[e])))
            writer.writerow(row)
