"""Numerical checks of the flow-map bounds on builtin systems and trained models.

Each check returns a :class:`BoundReport` comparing a measured quantity with the
right-hand side of the corresponding inequality. Suprema over sets are sampled
estimates. Membership in the set of points whose trajectories stay inside the
domain is decided by rejection on the reference trajectory, and the number of
rejected samples is reported.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dynamics import (
    DEFAULT_INTEGRATOR,
    Domain,
    IntegratorConfig,
    SystemDef,
    integrate_flow,
    integrate_flow_in_domain,
    sup_f_norm,
)
from .errors import ContractError
from .flowmodels import FlowModel, rollout

__all__ = [
    "BoundReport",
    "InconclusiveError",
    "rollout_error_bound",
    "check_flow_lipschitz",
    "check_composition",
    "check_near_identity",
    "check_rollout_bound",
    "check_rollout_bounds",
    "reports_to_json",
    "format_table",
]

ABS_TOL = 1e-9
REL_TOL = 1e-9


class InconclusiveError(RuntimeError):
    """No admissible samples were left to evaluate a bound on."""


@dataclass
class BoundReport:
    name: str
    measured: float
    bound: float
    satisfied: bool = field(init=False)
    context: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.context.setdefault("abs_tol", ABS_TOL)
        self.context.setdefault("rel_tol", REL_TOL)
        tol = self.context["abs_tol"] + self.context["rel_tol"] * abs(self.bound)
        self.satisfied = bool(self.measured <= self.bound + tol)

    def to_dict(self) -> dict:
        return asdict(self)


def rollout_error_bound(L: float, delta: float, m: int, e0: float, sup_error: float) -> float:
    """Right-hand side of the rollout error estimate after ``m`` steps.

    ``(1 + e^{L delta})^m e0 + sup_error ((1 + e^{L delta})^m - 1) / e^{L delta}``
    """
    if m < 0:
        raise ContractError("m must be >= 0")
    growth = math.exp(L * delta)
    try:
        amp = (1.0 + growth) ** m
    except OverflowError:
        return math.inf
    return amp * e0 + sup_error * (amp - 1.0) / growth


def _flow_jacobian(system, x, t, cfg, h=1e-6):
    n = system.dimension
    jac = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        jac[:, j] = (integrate_flow(system, x + e, t, cfg) - integrate_flow(system, x - e, t, cfg)) / (2 * h)
    return jac


def check_flow_lipschitz(system: SystemDef, domain: Domain, t: float, pairs: int, L: float,
                         seed: int = 0, cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                         refine: int = 5) -> BoundReport:
    """Max of ``||Phi_t(x) - Phi_t(x')|| / ||x - x'||`` against ``e^{L t}``.

    Half of the pairs are nearby points (probing local stretching), half are
    independent draws. The ``refine`` most stretching nearby pairs are then
    re-aimed along the top right singular vector of the flow Jacobian, which
    is the locally worst direction.
    """
    if t < 0:
        raise ContractError("t must be >= 0")
    if pairs < 1:
        raise ContractError("pairs must be >= 1")
    rng = np.random.default_rng(seed)
    n = system.dimension
    width = domain.hi - domain.lo
    n_near = (pairs + 1) // 2
    a = domain.sample(pairs, rng)
    b = domain.sample(pairs, rng)
    direction = rng.standard_normal((n_near, n))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(1e-4, 1e-2, size=(n_near, 1)) * width.min()
    b[:n_near] = a[:n_near] + radius * direction

    def quotients(p, q):
        pq = np.vstack([p, q])
        out, inside = integrate_flow_in_domain(system, pq, t, domain, cfg)
        k = len(p)
        ok = inside[:k] & inside[k:]
        dist = np.linalg.norm(p - q, axis=1)
        ok &= dist > 0
        with np.errstate(invalid="ignore"):
            quot = np.linalg.norm(out[:k] - out[k:], axis=1) / np.where(ok, dist, 1.0)
        return np.where(ok, quot, -np.inf), ok

    quot, ok = quotients(a, b)
    excluded = int((~ok).sum())
    if not ok.any():
        raise InconclusiveError(f"{system.name}: every sampled pair leaves the domain before t={t}")

    if refine and t > 0:
        near_q = quot[:n_near]
        top = np.argsort(near_q)[::-1][:refine]
        top = top[np.isfinite(near_q[top])]
        extra_a, extra_b = [], []
        for i in top:
            _, s, vt = np.linalg.svd(_flow_jacobian(system, a[i], t, cfg))
            extra_a.append(a[i])
            extra_b.append(a[i] + radius[i, 0] * vt[0])
        if extra_a:
            q2, _ = quotients(np.array(extra_a), np.array(extra_b))
            quot = np.concatenate([quot, q2])

    measured = float(quot[np.isfinite(quot)].max())
    bound = math.exp(L * t)
    return BoundReport("flow_lipschitz", measured, bound,
                       context={"L": L, "t": t, "pairs": pairs, "excluded": excluded,
                                "exclusion_rate": excluded / pairs})


def check_composition(system: SystemDef, x, delta: float, K: int,
                      cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                      budget: float = 1e-8) -> BoundReport:
    """Distance between K steps of ``Phi_{delta/K}`` and one step of ``Phi_delta``.

    ``x`` may be one state or a batch; the reported value is the maximum.
    """
    if K < 1:
        raise ContractError("K must be >= 1")
    x = np.asarray(x, dtype=float)
    whole = integrate_flow(system, x, delta, cfg)
    if K == 1:
        parts = integrate_flow(system, x, delta, cfg)
    else:
        parts = x
        for _ in range(K):
            parts = integrate_flow(system, parts, delta / K, cfg)
    measured = float(np.max(np.linalg.norm(np.atleast_2d(parts - whole), axis=1)))
    return BoundReport("composition", measured, budget,
                       context={"delta": delta, "K": K, "abs_tol": 0.0, "rel_tol": 0.0})


def check_near_identity(system: SystemDef, domain: Domain, delta: float, K: int,
                        samples: int = 10_000, seed: int = 0,
                        cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                        sup_samples: int = 10_000) -> BoundReport:
    """``max ||Phi_{delta/K}(x) - x||`` over admissible samples against ``(delta/K) sup ||f||``."""
    if samples < 1:
        raise ContractError("samples must be >= 1")
    if K < 1:
        raise ContractError("K must be >= 1")
    small = delta / K
    x = domain.sample(samples, np.random.default_rng(seed))
    out, inside = integrate_flow_in_domain(system, x, small, domain, cfg)
    excluded = int((~inside).sum())
    if not inside.any():
        raise InconclusiveError(f"{system.name}: no sample stays in the domain for t={small}")
    measured = float(np.linalg.norm(out[inside] - x[inside], axis=1).max())
    fmax = sup_f_norm(system, domain, sup_samples, seed + 1)
    return BoundReport("near_identity", measured, small * fmax,
                       context={"delta": delta, "K": K, "sup_f": fmax, "samples": samples,
                                "excluded": excluded, "exclusion_rate": excluded / samples})


def _rollout_reports(model, system, domain, x0, m_max, L, sup_error, y0, cfg):
    x = np.asarray(x0, dtype=float)
    y0 = x if y0 is None else np.asarray(y0, dtype=float)
    e0 = float(np.linalg.norm(y0 - x))
    traj = rollout(model, y0, m_max)
    reports = []
    hypothesis_ok = True
    for m in range(1, m_max + 1):
        # membership of y^(m-1) and x(t^(m-1)) in D_delta: both trajectories stay in D over one lag
        _, inside = integrate_flow_in_domain(system, np.vstack([traj.states[m - 1], x]),
                                             model.lag, domain, cfg)
        hypothesis_ok &= bool(inside.all())
        x = integrate_flow(system, x, model.lag, cfg)
        measured = float(np.linalg.norm(traj.states[m] - x))
        bound = rollout_error_bound(L, model.lag, m, e0, sup_error)
        report = BoundReport("rollout_bound", measured, bound,
                             context={"L": L, "delta": model.lag, "K": model.K, "m": m,
                                      "sup_error": sup_error, "e0": e0})
        if not hypothesis_ok:
            report.flags.append("hypothesis violated: a state left the domain")
        reports.append(report)
    return reports


def check_rollout_bound(model: FlowModel, system: SystemDef, domain: Domain, x0, m: int,
                        L: float, sup_error: float, y0=None,
                        cfg: IntegratorConfig = DEFAULT_INTEGRATOR) -> BoundReport:
    """Rollout error after ``m`` steps against the accumulated-error bound.

    The true trajectory starts at ``x0``; the model starts at ``y0`` (default
    ``x0``, giving zero initial error).
    """
    if m < 1:
        raise ContractError("m must be >= 1")
    return _rollout_reports(model, system, domain, x0, m, L, sup_error, y0, cfg)[-1]


def check_rollout_bounds(model: FlowModel, system: SystemDef, domain: Domain, x0, m_max: int,
                         L: float, sup_error: float, y0=None,
                         cfg: IntegratorConfig = DEFAULT_INTEGRATOR) -> list[BoundReport]:
    """One report for every ``m = 1..m_max`` from a single rollout."""
    if m_max < 1:
        raise ContractError("m_max must be >= 1")
    return _rollout_reports(model, system, domain, x0, m_max, L, sup_error, y0, cfg)


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)


def format_table(reports) -> str:
    rows = [("check", "measured", "bound", "ok", "notes")]
    for r in reports:
        ctx = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in r.context.items() if k not in ("abs_tol", "rel_tol"))
        note = "; ".join(r.flags)
        rows.append((r.name, f"{r.measured:.6e}", f"{r.bound:.6e}",
                     "yes" if r.satisfied else "NO", (ctx + (" | " + note if note else ""))))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = []
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row[:4], widths)) + "  " + row[4])
    return "\n".join(lines)
