"""Trajectory-pair data: generation, CSV persistence and mini-batching."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .dynamics import DEFAULT_INTEGRATOR, Domain, IntegratorConfig, SystemDef, integrate_flow
from .errors import ContractError, IntegrationError, ParseError, ValidationError

__all__ = [
    "NoiseSpec",
    "DataPair",
    "TrainingSet",
    "generate_pairs",
    "save_training_set",
    "load_training_set",
    "batches",
]


@dataclass(frozen=True)
class NoiseSpec:
    std_dev: float = 0.0
    seed_offset: int = 1

    def __post_init__(self):
        if not self.std_dev >= 0:
            raise ContractError("noise std_dev must be >= 0")


class DataPair(NamedTuple):
    z1: np.ndarray
    z2: np.ndarray


@dataclass
class TrainingSet:
    """``J`` input/output pairs sharing one time lag.

    Stored as two ``(J, n)`` arrays; :attr:`pairs` gives the per-pair view.
    """

    z1: np.ndarray
    z2: np.ndarray
    lag: float
    system_name: str
    domain: Domain
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: Optional[int] = None

    def __post_init__(self):
        self.z1 = np.asarray(self.z1, dtype=float)
        self.z2 = np.asarray(self.z2, dtype=float)
        if self.z1.ndim != 2 or self.z1.shape != self.z2.shape:
            raise ValidationError("z1 and z2 must be (J, n) arrays of equal shape")
        if self.z1.shape[0] < 1:
            raise ValidationError("a training set needs at least one pair")
        if not self.lag > 0:
            raise ValidationError("lag must be positive")
        if self.domain.dim != self.z1.shape[1]:
            raise ValidationError("domain dimension does not match the data")

    def __len__(self) -> int:
        return self.z1.shape[0]

    @property
    def dim(self) -> int:
        return self.z1.shape[1]

    @property
    def pairs(self) -> list:
        return [DataPair(a, b) for a, b in zip(self.z1, self.z2)]

    def subset(self, indices) -> "TrainingSet":
        idx = np.asarray(indices, dtype=int)
        return TrainingSet(self.z1[idx], self.z2[idx], self.lag, self.system_name,
                           self.domain, self.noise, self.seed)

    def metadata(self) -> dict:
        return {
            "system": self.system_name,
            "delta": self.lag,
            "J": len(self),
            "noise": self.noise.std_dev,
            "noise_seed_offset": self.noise.seed_offset,
            "seed": self.seed,
            "domain": self.domain.to_dict(),
        }

    def __eq__(self, other):
        if not isinstance(other, TrainingSet):
            return NotImplemented
        return (self.metadata() == other.metadata()
                and np.array_equal(self.z1, other.z1) and np.array_equal(self.z2, other.z2))


def generate_pairs(system: SystemDef, domain: Domain, J: int, delta: float,
                   noise: NoiseSpec = NoiseSpec(), cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                   seed: int = 0) -> TrainingSet:
    """Uniform initial states in ``domain`` marched forward by ``delta``.

    With nonzero noise, independent Gaussian perturbations are added to both
    members of every pair; the noise stream is seeded from
    ``seed + noise.seed_offset`` so clean states do not depend on the noise level.
    """
    if J < 1:
        raise ContractError("J must be >= 1")
    if not delta > 0:
        raise ContractError("delta must be positive")
    if domain.dim != system.dimension:
        raise ContractError("domain dimension does not match system")
    x = domain.sample(J, np.random.default_rng(seed))
    try:
        y = integrate_flow(system, x, delta, cfg)
    except IntegrationError as exc:
        if exc.index is not None:
            raise IntegrationError(f"sample {exc.index}: {exc}", exc.last_time, exc.index) from exc
        raise
    if noise.std_dev > 0:
        rng = np.random.default_rng(seed + noise.seed_offset)
        x = x + rng.normal(0.0, noise.std_dev, size=x.shape)
        y = y + rng.normal(0.0, noise.std_dev, size=y.shape)
    return TrainingSet(x, y, float(delta), system.name, domain, noise, seed)


def _header_line(ts: TrainingSet) -> str:
    return (f"# system={ts.system_name} delta={ts.lag!r} J={len(ts)} "
            f"noise={ts.noise.std_dev!r} seed={ts.seed}")


def save_training_set(ts: TrainingSet, path) -> Path:
    """Write the CSV and a ``.json`` sidecar manifest next to it."""
    path = Path(path)
    n = ts.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_header_line(ts) + "\n")
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}_in" for i in range(n)] + [f"x{i + 1}_out" for i in range(n)])
        for a, b in zip(ts.z1, ts.z2):
            writer.writerow([repr(float(v)) for v in a] + [repr(float(v)) for v in b])
    path.with_suffix(".json").write_text(json.dumps(ts.metadata(), indent=2) + "\n", encoding="utf-8")
    return path


def _parse_comment(line: str) -> dict:
    fields = {}
    for token in line.lstrip("#").split():
        key, sep, value = token.partition("=")
        if sep:
            fields[key] = value
    return fields


def load_training_set(path) -> TrainingSet:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ParseError("missing '# system=... delta=...' comment line", line=1)
    comment = _parse_comment(lines[0])
    if "delta" not in comment or "system" not in comment:
        raise ParseError("comment line lacks system/delta", line=1)
    if len(lines) < 2:
        raise ParseError("missing column header", line=2)
    header = next(csv.reader([lines[1]]))
    if len(header) % 2 or not header:
        raise ParseError("header must list matching input and output columns", line=2)
    n = len(header) // 2
    expected = [f"x{i + 1}_in" for i in range(n)] + [f"x{i + 1}_out" for i in range(n)]
    if [h.strip() for h in header] != expected:
        raise ParseError(f"unexpected header {header}", line=2)
    rows = []
    for lineno, row in enumerate(csv.reader(lines[2:]), start=3):
        if not row:
            continue
        if len(row) != 2 * n:
            raise ParseError(f"expected {2 * n} columns, found {len(row)}", line=lineno)
        try:
            rows.append([float(v) for v in row])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc
    if not rows:
        raise ValidationError("training set file contains no data rows (J must be >= 1)")
    data = np.array(rows)
    if "J" in comment and int(comment["J"]) != len(rows):
        raise ValidationError(f"comment declares J={comment['J']} but file has {len(rows)} rows")
    if "domain" in meta:
        domain = Domain.from_dict(meta["domain"])
    else:
        domain = Domain(tuple(data[:, :n].min(axis=0)), tuple(data[:, :n].max(axis=0) + 1e-12))
    noise = NoiseSpec(float(comment.get("noise", 0.0)), int(meta.get("noise_seed_offset", 1)))
    seed = comment.get("seed")
    seed = None if seed in (None, "None") else int(seed)
    return TrainingSet(data[:, :n], data[:, n:], float(comment["delta"]), comment["system"],
                       domain, noise, seed)


def batches(ts_or_size, batch_size: int, epoch_seed: int) -> list[np.ndarray]:
    """Shuffle ``range(J)`` with ``epoch_seed`` and cut it into consecutive batches."""
    J = ts_or_size if isinstance(ts_or_size, int) else len(ts_or_size)
    if not 1 <= batch_size <= J:
        raise ContractError(f"batch_size must lie in [1, {J}]")
    perm = np.random.default_rng(epoch_seed).permutation(J)
    return [perm[i:i + batch_size] for i in range(0, J, batch_size)]


def num_batches(J: int, batch_size: int) -> int:
    return math.ceil(J / batch_size)
