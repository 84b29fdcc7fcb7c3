"""Residual flow-map models: one-step ResNet, recurrent RT-ResNet, recursive RS-ResNet.

Every model maps a state ``x`` to ``y_K`` through ``y_{k+1} = y_k + N(y_k)``.
ResNet is the K=1 case. RT-ResNet reuses one parameter set for all K
applications; RS-ResNet holds K independent parameter sets applied in order.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dynamics import DEFAULT_INTEGRATOR, IntegratorConfig, SystemDef, effective_increment_oracle, integrate_flow
from .errors import ContractError, UsageError, ValidationError
from .neuralnet import FnnParams, fnn_backward, fnn_forward, init_params, params_from_dict, params_to_dict

__all__ = [
    "ModelKind",
    "FlowModel",
    "OracleBlock",
    "RolloutTrajectory",
    "make_model",
    "oracle_model",
    "model_forward",
    "model_backward",
    "rollout",
    "block_increments",
    "save_model",
    "load_model",
    "write_trajectory_csv",
]


class ModelKind(str, enum.Enum):
    RESNET = "resnet"
    RT = "rt"
    RS = "rs"

    @property
    def label(self) -> str:
        return {"resnet": "ResNet", "rt": "RT-ResNet", "rs": "RS-ResNet"}[self.value]


@dataclass(frozen=True)
class OracleBlock:
    """Stand-in block returning the exact effective increment of size ``delta``."""

    system: SystemDef
    delta: float
    cfg: IntegratorConfig = DEFAULT_INTEGRATOR

    @property
    def dim(self) -> int:
        return self.system.dimension

    def __call__(self, y):
        return effective_increment_oracle(self.system, y, self.delta, self.cfg)


@dataclass(frozen=True)
class FlowModel:
    kind: ModelKind
    K: int
    blocks: tuple
    lag: float

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.K < 1:
            raise ContractError("K must be >= 1")
        if not self.lag > 0:
            raise ContractError("lag must be positive")
        if self.kind is ModelKind.RESNET and self.K != 1:
            raise ContractError("a one-step ResNet has K = 1")
        expected = self.K if self.kind is ModelKind.RS else 1
        if len(self.blocks) != expected:
            raise ContractError(f"{self.kind.label} with K={self.K} needs {expected} block(s)")
        dims = {b.dim for b in self.blocks}
        if len(dims) != 1:
            raise ContractError("all blocks must share the state dimension")
        nets = [b for b in self.blocks if isinstance(b, FnnParams)]
        if len({b.architecture for b in nets}) > 1:
            raise ContractError("all blocks must share one architecture")

    @property
    def dim(self) -> int:
        return self.blocks[0].dim

    @property
    def step(self) -> float:
        """Time covered by a single block application for RT-ResNet (``Delta / K``)."""
        return self.lag / self.K

    def block_for(self, k: int):
        return self.blocks[k] if self.kind is ModelKind.RS else self.blocks[0]


@dataclass(frozen=True)
class RolloutTrajectory:
    times: np.ndarray
    states: np.ndarray
    step: float


def make_model(kind, K: int, hidden: Sequence[int], dim: int, lag: float, seed: int,
               weight_std: Optional[float] = None) -> FlowModel:
    """Freshly initialized model; RS-ResNet blocks get seeds ``seed, seed+1, ...``."""
    kind = ModelKind(kind)
    if kind is ModelKind.RESNET:
        K = 1
    sizes = [dim, *hidden, dim]
    count = K if kind is ModelKind.RS else 1
    blocks = [init_params(sizes, seed + k, weight_std) for k in range(count)]
    return FlowModel(kind, K, blocks, lag)


def oracle_model(system: SystemDef, lag: float, K: int = 1,
                 cfg: IntegratorConfig = DEFAULT_INTEGRATOR) -> FlowModel:
    """Pseudo-model whose block is the exact ``lag/K`` effective increment."""
    kind = ModelKind.RESNET if K == 1 else ModelKind.RT
    return FlowModel(kind, K, [OracleBlock(system, lag / K, cfg)], lag)


def _apply_block(block, y):
    if isinstance(block, FnnParams):
        return fnn_forward(block, y)
    return block(y), None


def _check_input(model: FlowModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != model.dim:
        raise ContractError(f"input shape {x.shape} does not match model dimension {model.dim}")
    return x


def model_forward(model: FlowModel, x):
    """Return ``(y_K, caches)``; ``caches[k] = (y_k, layer cache of block k)``."""
    y = _check_input(model, x)
    caches = []
    for k in range(model.K):
        inc, cache = _apply_block(model.block_for(k), y)
        caches.append((y, cache))
        y = y + inc
    return y, caches


def model_backward(model: FlowModel, caches, upstream):
    """Backpropagate ``upstream . y_K`` through the unrolled composition.

    Returns ``(grads, input_grad)`` with one gradient (list of layer arrays)
    per stored block. For RT-ResNet the contributions of all K applications
    are summed into the single shared block.
    """
    if len(caches) != model.K:
        raise ContractError("caches do not come from this model")
    g = np.asarray(upstream, dtype=float)
    grads = [None] * len(model.blocks)
    for k in range(model.K - 1, -1, -1):
        block = model.block_for(k)
        if not isinstance(block, FnnParams):
            raise UsageError("oracle blocks have no parameters to differentiate")
        layer_grads, in_grad = fnn_backward(block, caches[k][1], g)
        slot = k if model.kind is ModelKind.RS else 0
        if grads[slot] is None:
            grads[slot] = layer_grads
        else:
            grads[slot] = [a + b for a, b in zip(grads[slot], layer_grads)]
        g = g + in_grad
    return grads, g


def rollout(model: FlowModel, x0, steps: int, fine: bool = False) -> RolloutTrajectory:
    """March the learned map from ``x0``.

    Coarse mode applies the whole model per step (spacing ``lag``). Fine mode,
    RT-ResNet only, applies the shared block once per step (spacing ``lag/K``).
    """
    if steps < 0:
        raise ContractError("steps must be >= 0")
    if fine and model.kind is not ModelKind.RT:
        raise UsageError("fine rollout is only defined for RT-ResNet models")
    x = _check_input(model, x0)
    if x.ndim != 1:
        raise ContractError("rollout takes a single initial state")
    states = np.empty((steps + 1, model.dim))
    states[0] = x
    y = x
    if fine:
        block = model.blocks[0]
        for i in range(steps):
            y = y + _apply_block(block, y)[0]
            states[i + 1] = y
        step = model.step
    else:
        for i in range(steps):
            y = model_forward(model, y)[0]
            states[i + 1] = y
        step = model.lag
    return RolloutTrajectory(np.arange(steps + 1) * step, states, step)


def block_increments(model: FlowModel, x) -> list:
    """The residual ``N(y_k)`` produced by each block application along the forward pass."""
    _, caches = model_forward(model, x)
    incs = []
    for k, (y, _) in enumerate(caches):
        incs.append(_apply_block(model.block_for(k), y)[0])
    return incs


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def model_to_dict(model: FlowModel) -> dict:
    if not all(isinstance(b, FnnParams) for b in model.blocks):
        raise UsageError("oracle pseudo-models cannot be serialized")
    return {
        "kind": model.kind.value,
        "K": model.K,
        "lag": model.lag,
        "blocks": [params_to_dict(b) for b in model.blocks],
    }


def model_from_dict(d: dict) -> FlowModel:
    try:
        return FlowModel(ModelKind(d["kind"]), int(d["K"]),
                         [params_from_dict(b) for b in d["blocks"]], float(d["lag"]))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model description: {exc}") from exc


def save_model(model: FlowModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> FlowModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_trajectory_csv(path, traj: RolloutTrajectory, reference: Optional[np.ndarray] = None) -> None:
    n = traj.states.shape[1]
    header = ["t"] + [f"x{i + 1}" for i in range(n)]
    if reference is not None:
        header += [f"ref_x{i + 1}" for i in range(n)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, t in enumerate(traj.times):
            row = [repr(float(t))] + [repr(float(v)) for v in traj.states[i]]
            if reference is not None:
                row += [repr(float(v)) for v in reference[i]]
            writer.writerow(row)


def reference_trajectory(system: SystemDef, x0, times, cfg: IntegratorConfig = DEFAULT_INTEGRATOR) -> np.ndarray:
    """True states at each time in ``times`` (integrated step to step)."""
    out = np.empty((len(times), system.dimension))
    x = np.asarray(x0, dtype=float)
    out[0] = x
    for i in range(1, len(times)):
        x = integrate_flow(system, x, float(times[i] - times[i - 1]), cfg)
        out[i] = x
    return out
