"""Fully connected feedforward network with biases folded into the weights.

Layer ``j`` holds a matrix of shape ``(n_{j+1}, n_j + 1)``; its last column is
the bias and multiplies a constant 1 appended to the layer input. Hidden
layers use tanh, the output layer is the identity.

Inputs may be a single vector of shape ``(n,)`` or a batch ``(B, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError

__all__ = [
    "FnnParams",
    "init_params",
    "zero_params",
    "fnn_forward",
    "fnn_backward",
    "gradient_check",
    "central_differences",
    "perturbed_pair",
    "params_to_dict",
    "params_from_dict",
]

ACTIVATIONS = {"hidden": "tanh", "output": "identity"}


def check_architecture(layer_sizes: Sequence[int]) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 3:
        raise ContractError("an architecture needs at least 3 layers (one hidden)")
    if any(s < 1 for s in sizes):
        raise ContractError("layer sizes must be positive")
    if sizes[0] != sizes[-1]:
        raise ContractError("input and output widths must both equal the state dimension")
    return sizes


@dataclass
class FnnParams:
    architecture: tuple
    layers: list
    activations: dict = field(default_factory=lambda: dict(ACTIVATIONS))
    weight_std: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        self.architecture = check_architecture(self.architecture)
        sizes = self.architecture
        if len(self.layers) != len(sizes) - 1:
            raise ContractError("need one weight matrix per pair of adjacent layers")
        for j, w in enumerate(self.layers):
            expected = (sizes[j + 1], sizes[j] + 1)
            if np.shape(w) != expected:
                raise ContractError(f"layer {j}: shape {np.shape(w)} != {expected}")
        if self.activations != ACTIVATIONS:
            raise ContractError(f"unsupported activations {self.activations}")

    @property
    def dim(self) -> int:
        return self.architecture[0]

    def copy(self) -> "FnnParams":
        return FnnParams(self.architecture, [w.copy() for w in self.layers],
                         dict(self.activations), self.weight_std, self.seed)

    def num_parameters(self) -> int:
        return sum(w.size for w in self.layers)


def init_params(layer_sizes: Sequence[int], seed: int,
                weight_std: Optional[float] = None) -> FnnParams:
    """Gaussian weights, zero biases.

    The default standard deviation is ``1/sqrt(fan_in)`` per layer.
    """
    sizes = check_architecture(layer_sizes)
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = weight_std if weight_std is not None else 1.0 / np.sqrt(fan_in)
        w = np.zeros((fan_out, fan_in + 1))
        w[:, :fan_in] = rng.normal(0.0, std, size=(fan_out, fan_in))
        layers.append(w)
    return FnnParams(sizes, layers, weight_std=weight_std, seed=seed)


def zero_params(layer_sizes: Sequence[int]) -> FnnParams:
    sizes = check_architecture(layer_sizes)
    return FnnParams(sizes, [np.zeros((b, a + 1)) for a, b in zip(sizes[:-1], sizes[1:])])


def _augment(a: np.ndarray) -> np.ndarray:
    ones = np.ones(a.shape[:-1] + (1,))
    return np.concatenate([a, ones], axis=-1)


def fnn_forward(params: FnnParams, x):
    """Return ``(y, cache)`` with ``y = N(x; params)``.

    ``cache`` holds the augmented input of every layer and the hidden
    activations, which is all the backward pass needs.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != params.dim:
        raise ContractError(f"input shape {x.shape} does not match width {params.dim}")
    inputs = []
    a = x
    last = len(params.layers) - 1
    for j, w in enumerate(params.layers):
        a_aug = _augment(a)
        inputs.append(a_aug)
        z = a_aug @ w.T
        a = z if j == last else np.tanh(z)
    return a, inputs


def fnn_backward(params: FnnParams, cache, upstream):
    """Reverse pass for ``upstream . y``.

    Returns ``(grads, input_grad)``: ``grads[j]`` matches ``params.layers[j]``
    and is summed over the batch; ``input_grad`` has the shape of the input.
    """
    inputs = cache
    g = np.asarray(upstream, dtype=float)
    if len(inputs) != len(params.layers) or g.shape[:-1] != inputs[0].shape[:-1] \
            or g.shape[-1] != params.architecture[-1]:
        raise ContractError("cache/upstream do not match these parameters")
    grads = [None] * len(params.layers)
    for j in range(len(params.layers) - 1, -1, -1):
        w = params.layers[j]
        a_aug = inputs[j]
        if g.ndim == 1:
            grads[j] = np.outer(g, a_aug)
        else:
            grads[j] = g.T @ a_aug
        da = (g @ w)[..., :-1]
        if j > 0:
            # tanh' expressed through the stored activation of the previous layer
            a_prev = inputs[j][..., :-1]
            da = da * (1.0 - a_prev * a_prev)
        g = da
    return grads, g


def perturbed_pair(params: FnnParams, x_plus, x_minus, dx, layer=None, rows=None, cols=None,
                   h: float = 0.0):
    """Evaluate ``N`` on a pair of nearby inputs and weights, tracking their difference.

    Arrays have shape ``(P, B, n)``: ``P`` independent perturbations of a batch.
    For perturbation ``p`` the plus branch uses weight ``W + h E`` and the minus
    branch ``W - h E``, where ``E`` is the unit matrix at ``(rows[p], cols[p])`` of
    layer ``layer`` (no weight perturbation if ``layer`` is None). ``dx`` must
    equal ``x_plus - x_minus``; it is carried separately so that the output
    difference never comes from subtracting two nearly equal numbers.

    Returns ``(y_plus, y_minus, dy)``.
    """
    a_p, a_m, d = x_plus, x_minus, dx
    last = len(params.layers) - 1
    if layer is not None:
        sel = np.arange(len(rows))
    for j, w in enumerate(params.layers):
        ap_aug, am_aug = _augment(a_p), _augment(a_m)
        d_aug = np.concatenate([d, np.zeros(d.shape[:-1] + (1,))], axis=-1)
        z_p = ap_aug @ w.T
        z_m = am_aug @ w.T
        dz = d_aug @ w.T
        if j == layer:
            z_p[sel, :, rows] += h * ap_aug[sel, :, cols]
            z_m[sel, :, rows] -= h * am_aug[sel, :, cols]
            dz[sel, :, rows] += h * (ap_aug[sel, :, cols] + am_aug[sel, :, cols])
        if j == last:
            a_p, a_m, d = z_p, z_m, dz
        else:
            a_p, a_m = np.tanh(z_p), np.tanh(z_m)
            # tanh(a) - tanh(b) = sinh(a - b) / (cosh(a) cosh(b))
            d = np.sinh(dz) / (np.cosh(z_p) * np.cosh(z_m))
    return a_p, a_m, d


def central_differences(params: FnnParams, x, h: float = 1e-5, upstream=None) -> list:
    """Central-difference derivative of ``upstream . N(x)`` for every weight, summed over the batch."""
    if not h > 0:
        raise ContractError("h must be positive")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.ones(params.architecture[-1]) if upstream is None else np.asarray(upstream, dtype=float)
    out = []
    for j, w in enumerate(params.layers):
        rows, cols = np.unravel_index(np.arange(w.size), w.shape)
        xs = np.broadcast_to(x, (w.size,) + x.shape)
        _, _, dy = perturbed_pair(params, xs, xs, np.zeros_like(xs), j, rows, cols, h)
        out.append((np.sum(u * dy, axis=(1, 2)) / (2 * h)).reshape(w.shape))
    return out


def max_relative_error(analytic, numeric) -> float:
    """``max |a - n| / max(1e-12, |n|)`` over every entry of a list of arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1e-12, np.abs(n)))))
    return worst


def gradient_check(params: FnnParams, x, h: float = 1e-5, upstream=None) -> float:
    """Max entrywise relative error between backprop and central differences.

    The scalar being differentiated is ``upstream . N(x)`` (``upstream``
    defaults to all ones, ``x`` may be a batch). Relative errors use
    ``max(1e-12, |fd|)`` as the denominator.
    """
    x = np.asarray(x, dtype=float)
    y, cache = fnn_forward(params, x)
    u = np.ones(params.architecture[-1]) if upstream is None else np.asarray(upstream, dtype=float)
    grads, _ = fnn_backward(params, cache, np.broadcast_to(u, y.shape))
    return max_relative_error(grads, central_differences(params, x, h, u))


def params_to_dict(params: FnnParams) -> dict:
    return {
        "architecture": list(params.architecture),
        "activations": dict(params.activations),
        "layers": [w.tolist() for w in params.layers],
        "weight_std": params.weight_std,
        "seed": params.seed,
    }


def params_from_dict(d: dict) -> FnnParams:
    return FnnParams(
        tuple(d["architecture"]),
        [np.array(w, dtype=float) for w in d["layers"]],
        dict(d.get("activations", ACTIVATIONS)),
        d.get("weight_std"),
        d.get("seed"),
    )
