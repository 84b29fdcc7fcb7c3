"""Benchmark autonomous systems, reference flow maps and their constants.

All right-hand sides are vectorized: they accept an array whose last axis is
the state dimension and return an array of the same shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ContractError, DomainError, IntegrationError

__all__ = [
    "Domain",
    "SystemDef",
    "IntegratorConfig",
    "LipschitzEstimate",
    "rhs_eval",
    "integrate_flow",
    "integrate_flow_in_domain",
    "effective_increment_oracle",
    "estimate_lipschitz",
    "sup_f_norm",
    "builtin_systems",
    "get_system",
    "zero_system",
    "toggle_dae_rhs",
    "toggle_algebraic_z",
]


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box ``[lower, upper]``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise ContractError("domain bounds must be 1-D and of equal length")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ContractError("domain bounds must be finite")
        if not np.all(lo < hi):
            raise ContractError(f"degenerate domain: lower={lo.tolist()} upper={hi.tolist()}")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(count, self.dim))

    def corners(self) -> np.ndarray:
        n = self.dim
        bits = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
        return np.where(bits == 1, self.hi, self.lo)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        return cls(tuple(d["lower"]), tuple(d["upper"]))


@dataclass(frozen=True)
class SystemDef:
    name: str
    dimension: int
    rhs: Callable[[np.ndarray], np.ndarray]
    default_domain: Domain
    parameters: dict = field(default_factory=dict)
    analytic_flow: Optional[Callable[[np.ndarray, float], np.ndarray]] = None


@dataclass(frozen=True)
class IntegratorConfig:
    """Reference integrator settings.

    ``rk4`` takes ``substeps_per_lag`` uniform steps for every ``lag`` of
    integrated time (rounded up, so any horizon is covered with steps no
    larger than ``lag / substeps_per_lag``). ``rk45`` is adaptive.
    """

    method: str = "rk4"
    substeps_per_lag: int = 100
    lag: float = 0.1
    abs_tol: float = 1e-10
    rel_tol: float = 1e-10

    def __post_init__(self):
        if self.method not in ("rk4", "rk45"):
            raise ContractError(f"unknown integrator method {self.method!r}")
        if self.substeps_per_lag < 1:
            raise ContractError("substeps_per_lag must be >= 1")
        if not (self.lag > 0 and self.abs_tol > 0 and self.rel_tol > 0):
            raise ContractError("lag and tolerances must be positive")

    def steps_for(self, t: float) -> int:
        return max(1, math.ceil(t * self.substeps_per_lag / self.lag - 1e-9))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "substeps_per_lag": self.substeps_per_lag,
            "lag": self.lag,
            "abs_tol": self.abs_tol,
            "rel_tol": self.rel_tol,
        }


DEFAULT_INTEGRATOR = IntegratorConfig()


@dataclass(frozen=True)
class LipschitzEstimate:
    value: float
    sample_count: int
    method: str


# ---------------------------------------------------------------------------
# Evaluation and integration
# ---------------------------------------------------------------------------


def _as_states(system: SystemDef, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != system.dimension:
        raise ContractError(
            f"{system.name}: expected state dimension {system.dimension}, got shape {x.shape}"
        )
    return x


def rhs_eval(system: SystemDef, x) -> np.ndarray:
    """Evaluate ``f(x)``; raises :class:`DomainError` on non-finite output."""
    x = _as_states(system, x)
    if not np.all(np.isfinite(x)):
        raise ContractError("state contains non-finite components")
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        fx = system.rhs(x)
    if not np.all(np.isfinite(fx)):
        raise DomainError(f"{system.name}: right-hand side is not finite at {x.tolist()}")
    return fx


def _rk4(rhs, x, t, steps, on_step=None):
    h = t / steps
    for i in range(steps):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h * k2)
        k4 = rhs(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if on_step is not None:
            on_step(x)
    return x


def _rk45(system, x, t, cfg):
    shape = x.shape
    n = system.dimension

    def fun(_, y):
        return system.rhs(y.reshape(-1, n)).ravel()

    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        sol = solve_ivp(fun, (0.0, t), x.ravel(), method="RK45",
                        rtol=cfg.rel_tol, atol=cfg.abs_tol)
    if sol.status != 0:
        raise IntegrationError(
            f"{system.name}: adaptive integration failed ({sol.message})",
            last_time=float(sol.t[-1]),
        )
    return sol.y[:, -1].reshape(shape)


def integrate_flow(system: SystemDef, x0, t: float,
                   cfg: IntegratorConfig = DEFAULT_INTEGRATOR) -> np.ndarray:
    """Numerical flow map ``Phi_t(x0)``; ``x0`` may be a single state or a batch."""
    x = _as_states(system, x0)
    if t < 0:
        raise ContractError("flow time must be nonnegative")
    if t == 0:
        return x.copy()
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        if cfg.method == "rk4":
            out = _rk4(system.rhs, x, float(t), cfg.steps_for(t))
        else:
            out = _rk45(system, x, float(t), cfg)
    if not np.all(np.isfinite(out)):
        bad = np.flatnonzero(~np.all(np.isfinite(np.atleast_2d(out)), axis=-1))
        raise IntegrationError(
            f"{system.name}: non-finite state reached before t={t}",
            last_time=None, index=int(bad[0]) if bad.size else None,
        )
    return out


def integrate_flow_in_domain(system: SystemDef, x0, t: float, domain: Domain,
                             cfg: IntegratorConfig = DEFAULT_INTEGRATOR):
    """Integrate with fixed RK4 steps and report which trajectories stay in ``domain``.

    Returns ``(x_t, inside)`` where ``inside[i]`` is True when trajectory i was
    inside the domain at the start and after every substep. Trajectories that
    leave the domain (or blow up) are still returned, possibly non-finite.
    """
    x = np.atleast_2d(_as_states(system, x0))
    inside = domain.contains(x)
    if t == 0:
        return x.copy(), inside

    def track(state):
        nonlocal inside
        with np.errstate(invalid="ignore"):
            inside = inside & domain.contains(state)

    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        out = _rk4(system.rhs, x, float(t), cfg.steps_for(t), on_step=track)
    inside = inside & np.all(np.isfinite(out), axis=-1)
    return out, inside


def effective_increment_oracle(system: SystemDef, x, delta: float,
                               cfg: IntegratorConfig = DEFAULT_INTEGRATOR) -> np.ndarray:
    """Exact one-step residual ``Phi_delta(x) - x``."""
    if not delta > 0:
        raise ContractError("delta must be positive")
    x = _as_states(system, x)
    return integrate_flow(system, x, delta, cfg) - x


# ---------------------------------------------------------------------------
# Constants for the error bounds
# ---------------------------------------------------------------------------


def _fd_jacobians(system: SystemDef, points: np.ndarray, h: float) -> np.ndarray:
    n = system.dimension
    jac = np.empty((points.shape[0], n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        jac[:, :, j] = (rhs_eval(system, points + e) - rhs_eval(system, points - e)) / (2 * h)
    return jac


def _spectral_norms(jac: np.ndarray, iterations: int, rng: np.random.Generator) -> np.ndarray:
    gram = np.einsum("pki,pkj->pij", jac, jac)
    v = rng.standard_normal(jac.shape[:1] + jac.shape[2:])
    for _ in range(iterations):
        v = np.einsum("pij,pj->pi", gram, v)
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        v = v / np.where(norm > 0, norm, 1.0)
    return np.linalg.norm(np.einsum("pij,pj->pi", jac, v), axis=1)


def _pair_quotients(system: SystemDef, points: np.ndarray) -> np.ndarray:
    m = points.shape[0] // 2
    a, b = points[:m], points[m:2 * m]
    dist = np.linalg.norm(a - b, axis=1)
    keep = dist > 0
    df = np.linalg.norm(rhs_eval(system, a[keep]) - rhs_eval(system, b[keep]), axis=1)
    return df / dist[keep]


def estimate_lipschitz(system: SystemDef, domain: Domain, samples: int = 10_000,
                       seed: int = 0, method: str = "jacobian-spectral",
                       h: float = 1e-6, iterations: int = 50) -> LipschitzEstimate:
    """Sampled estimate of the Lipschitz constant of ``f`` over ``domain``.

    The Jacobian route takes central finite differences at each sample and the
    spectral norm by power iteration. The result never falls below the largest
    pairwise difference quotient over the same samples.
    """
    if samples < 2:
        raise ContractError("need at least two samples")
    if domain.dim != system.dimension:
        raise ContractError("domain dimension does not match system")
    rng = np.random.default_rng(seed)
    points = domain.sample(samples, rng)
    quotients = _pair_quotients(system, points)
    value = float(quotients.max()) if quotients.size else 0.0
    if method == "jacobian-spectral":
        norms = _spectral_norms(_fd_jacobians(system, points, h), iterations, rng)
        value = max(value, float(norms.max()))
    elif method != "pairwise-quotient":
        raise ContractError(f"unknown Lipschitz method {method!r}")
    return LipschitzEstimate(value=value, sample_count=samples, method=method)


def sup_f_norm(system: SystemDef, domain: Domain, samples: int = 10_000, seed: int = 0) -> float:
    """Sampled ``max ||f(x)||`` over the domain (random draws plus corners)."""
    if samples < 1:
        raise ContractError("need at least one sample")
    rng = np.random.default_rng(seed)
    points = np.vstack([domain.sample(samples, rng), domain.corners()])
    return float(np.linalg.norm(rhs_eval(system, points), axis=1).max())


# ---------------------------------------------------------------------------
# Builtin systems
# ---------------------------------------------------------------------------


def _decay_rhs(x):
    return -x


def _decay_flow(x, t):
    return np.asarray(x, dtype=float) * math.exp(-t)


def _example1_rhs(x):
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x1 + x2 - 2.0, x1 - x2], axis=-1)


_EX1_MATRIX = np.array([[1.0, 1.0], [1.0, -1.0]])
_EX1_EQUILIBRIUM = np.array([1.0, 1.0])


def _example1_flow(x, t):
    # A @ A = 2 I, so exp(tA) = cosh(sqrt2 t) I + sinh(sqrt2 t)/sqrt2 A.
    r = math.sqrt(2.0)
    prop = math.cosh(r * t) * np.eye(2) + (math.sinh(r * t) / r) * _EX1_MATRIX
    dev = np.asarray(x, dtype=float) - _EX1_EQUILIBRIUM
    return _EX1_EQUILIBRIUM + dev @ prop.T


def _example2_rhs(x):
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x1 - 4.0 * x2, 4.0 * x1 - 7.0 * x2], axis=-1)


_EX2_MATRIX = np.array([[1.0, -4.0], [4.0, -7.0]])


def _example2_flow(x, t):
    # (A + 3I) is nilpotent, so exp(tA) = exp(-3t) (I + t (A + 3I)).
    prop = math.exp(-3.0 * t) * (np.eye(2) + t * (_EX2_MATRIX + 3.0 * np.eye(2)))
    return np.asarray(x, dtype=float) @ prop.T


def _pendulum(alpha, beta):
    def rhs(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, -alpha * x2 - beta * np.sin(x1)], axis=-1)
    return rhs


def toggle_algebraic_z(x1, params: dict):
    """Algebraic variable ``z`` of the toggle-switch DAE."""
    return x1 / (1.0 + params["iptg"] / params["K"]) ** params["eta"]


def toggle_dae_rhs(x1, x2, z, params: dict):
    """Differential part of the toggle DAE with ``z`` supplied explicitly."""
    dx1 = params["alpha1"] / (1.0 + x2 ** params["beta"]) - x1
    dx2 = params["alpha2"] / (1.0 + z ** params["gamma"]) - x2
    return dx1, dx2


def _toggle(params):
    scale = (1.0 + params["iptg"] / params["K"]) ** params["eta"]
    a1, a2 = params["alpha1"], params["alpha2"]
    beta, gamma = params["beta"], params["gamma"]

    def rhs(x):
        x1, x2 = x[..., 0], x[..., 1]
        z = x1 / scale
        return np.stack([a1 / (1.0 + x2**beta) - x1, a2 / (1.0 + z**gamma) - x2], axis=-1)
    return rhs


PENDULUM_PARAMS = {"alpha": 8.91, "beta": 0.2}
TOGGLE_PARAMS = {
    "alpha1": 156.25,
    "alpha2": 15.6,
    "beta": 2.5,
    "gamma": 1.0,
    "K": 2.9618e-5,
    "iptg": 1e-5,
    "eta": 2.0015,
}


def make_toggle(eta: float = TOGGLE_PARAMS["eta"]) -> SystemDef:
    params = dict(TOGGLE_PARAMS, eta=float(eta))
    return SystemDef("toggle", 2, _toggle(params), Domain((0.0, 0.0), (20.0, 20.0)), params)


def builtin_systems() -> list[SystemDef]:
    p = PENDULUM_PARAMS
    return [
        SystemDef("example1", 2, _example1_rhs, Domain((0.0, 0.0), (2.0, 2.0)),
                  {}, _example1_flow),
        SystemDef("example2", 2, _example2_rhs, Domain((-2.0, -2.0), (2.0, 2.0)),
                  {}, _example2_flow),
        SystemDef("pendulum", 2, _pendulum(p["alpha"], p["beta"]),
                  Domain((-math.pi, -2 * math.pi), (math.pi, 2 * math.pi)), dict(p)),
        make_toggle(),
        SystemDef("decay", 1, _decay_rhs, Domain((-1.0,), (1.0,)), {}, _decay_flow),
    ]


def get_system(name: str, **overrides) -> SystemDef:
    if name == "toggle" and "eta" in overrides:
        return make_toggle(overrides["eta"])
    for system in builtin_systems():
        if system.name == name:
            return system
    names = ", ".join(s.name for s in builtin_systems())
    raise KeyError(f"unknown system {name!r} (available: {names})")


def zero_system(n: int = 2, domain: Optional[Domain] = None) -> SystemDef:
    domain = domain or Domain((-1.0,) * n, (1.0,) * n)
    return SystemDef("zero", n, np.zeros_like, domain, {}, lambda x, t: np.asarray(x, float).copy())
