"""Command-line interface: ``resflow <command> ...``.

Exit codes: 0 success, 2 usage error, 3 validation error (including failed
``--strict`` thresholds), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import NoiseSpec, generate_pairs, load_training_set, save_training_set
from .dynamics import (
    Domain,
    DomainError,
    IntegratorConfig,
    estimate_lipschitz,
    get_system,
)
from .errors import (
    ContractError,
    IntegrationError,
    ParseError,
    TrainingDivergedError,
    UsageError,
    ValidationError,
)
from .flowmodels import (
    FlowModel,
    ModelKind,
    load_model,
    make_model,
    reference_trajectory,
    rollout,
    save_model,
    write_trajectory_csv,
)
from .theory import (
    InconclusiveError,
    check_composition,
    check_flow_lipschitz,
    check_near_identity,
    check_rollout_bounds,
    format_table,
    reports_to_json,
)
from .training import TrainConfig, holdout_error, train, write_loss_csv

log = logging.getLogger("resflow")

OUTPUT_ENV = "RESFLOW_OUTPUT_DIR"

EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4


class StrictFailure(Exception):
    pass


@dataclass(frozen=True)
class ExperimentPreset:
    id: str
    system: str
    x0: tuple
    horizon: float
    resnet_hidden: tuple
    multistep_hidden: tuple
    K: int = 3
    delta: float = 0.1
    linear: bool = True


PRESETS = {
    "ex1": ExperimentPreset("ex1", "example1", (1.5, 0.0), 2.0, (30, 30, 30), (20, 20, 20)),
    "ex2": ExperimentPreset("ex2", "example2", (0.0, -1.0), 2.0, (30, 30, 30), (20, 20, 20)),
    "ex3": ExperimentPreset("ex3", "pendulum", (-1.193, -3.876), 20.0, (40, 40), (40, 40), linear=False),
    "ex4": ExperimentPreset("ex4", "toggle", (19.0, 17.0), 20.0, (40, 40), (40, 40), linear=False),
}

# Rollout acceptance thresholds: absolute 2-norm error for the linear presets,
# relative state error for the nonlinear ones.
LINEAR_MAX_ERROR = 5e-2
NONLINEAR_MAX_REL_ERROR = 0.10
ROLLOUT_BOUND_STEPS = 20


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _domain(text: str) -> Domain:
    lo, sep, hi = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError("domain must look like 'lo1,lo2:hi1,hi2'")
    return Domain(tuple(_floats(lo)), tuple(_floats(hi)))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "."))


def _resolve(path, default_name: str) -> Path:
    p = Path(path) if path else _out_dir() / default_name
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _system(args):
    overrides = {"eta": args.eta} if getattr(args, "eta", None) is not None else {}
    try:
        return get_system(args.system, **overrides)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc


def _integrator(args) -> IntegratorConfig:
    return IntegratorConfig(method=getattr(args, "integrator", "rk4"))


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def write_manifest(path, command, config: dict, inputs=(), outputs=(), started=None, extra=None):
    manifest = {
        "command": command,
        "version": __version__,
        "config": _jsonable(config),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs if Path(p).exists()},
    }
    if started is not None:
        manifest["duration_s"] = round(time.time() - started, 3)
    if extra:
        manifest.update(_jsonable(extra))
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _dump_json(path, data):
    Path(path).write_text(json.dumps(_jsonable(data), indent=2) + "\n", encoding="utf-8")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        optimizer=args.optimizer,
        learning_rate=args.lr,
        adam_beta1=args.beta1,
        adam_beta2=args.beta2,
        adam_eps=args.adam_eps,
        seed=args.seed,
        holdout_fraction=args.holdout,
        ema_decay=args.ema,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    started = time.time()
    system = _system(args)
    domain = args.domain or system.default_domain
    noise = NoiseSpec(args.noise)
    ts = generate_pairs(system, domain, args.J, args.delta, noise, _integrator(args), args.seed)
    out = _resolve(args.out, f"{system.name}_pairs.csv")
    save_training_set(ts, out)
    config = dict(ts.metadata(), integrator=_integrator(args).to_dict(), eta=args.eta)
    write_manifest(out.with_suffix(".manifest.json"), args.argv, config,
                   outputs=[out, out.with_suffix(".json")], started=started)
    print(f"wrote {len(ts)} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    ts = load_training_set(args.data)
    if args.delta is not None and abs(args.delta - ts.lag) > 1e-12:
        raise ValidationError(f"--delta {args.delta} does not match the data lag {ts.lag}")
    lag = args.delta if args.delta is not None else ts.lag
    kind = ModelKind(args.kind)
    K = 1 if kind is ModelKind.RESNET else args.K
    model = make_model(kind, K, args.hidden, ts.dim, lag, args.seed, args.weight_std)
    cfg = _train_config(args)
    trained, report = train(model, ts, cfg)
    out = _resolve(args.out, f"{kind.value}_model.json")
    save_model(trained, out)
    loss_csv = out.with_name(out.stem + "_loss.csv")
    write_loss_csv(loss_csv, report)
    config = {"kind": kind.value, "K": K, "hidden": args.hidden, "lag": lag,
              "weight_std": args.weight_std, "train": cfg.to_dict()}
    write_manifest(out.with_suffix(".manifest.json"), args.argv, config,
                   inputs=[args.data], outputs=[out, loss_csv], started=started,
                   extra={"final_train_loss": report.per_epoch_train_loss[-1],
                          "final_holdout_loss": report.final_holdout_loss})
    print(f"final train loss {report.per_epoch_train_loss[-1]:.3e}; model written to {out}")
    return 0


def cmd_rollout(args) -> int:
    started = time.time()
    model = load_model(args.model)
    x0 = np.array(args.x0, dtype=float)
    if x0.shape != (model.dim,):
        raise ValidationError(f"--x0 needs {model.dim} components")
    steps = args.steps * model.K if args.fine else args.steps
    traj = rollout(model, x0, steps, fine=args.fine)
    reference = None
    if args.ref:
        args.system = args.ref
        reference = reference_trajectory(_system(args), x0, traj.times, _integrator(args))
    out = _resolve(args.out, "trajectory.csv")
    write_trajectory_csv(out, traj, reference)
    write_manifest(out.with_suffix(".manifest.json"), args.argv,
                   {"x0": args.x0, "steps": steps, "fine": args.fine, "ref": args.ref},
                   inputs=[args.model], outputs=[out], started=started)
    print(f"wrote {len(traj.times)} rows to {out}")
    return 0


def cmd_evaluate(args) -> int:
    started = time.time()
    model = load_model(args.model)
    system = _system(args)
    domain = args.domain or system.default_domain
    sup_err, mean_err = holdout_error(model, system, domain, args.points, args.seed, _integrator(args))
    result = {"system": system.name, "points": args.points, "seed": args.seed,
              "sup_error": sup_err, "mean_error": mean_err}
    out = _resolve(args.out, "evaluation.json")
    _dump_json(out, result)
    write_manifest(out.with_suffix(".manifest.json"), args.argv, result,
                   inputs=[args.model], outputs=[out], started=started)
    print(f"sup error {sup_err:.6e}  mean error {mean_err:.6e}")
    return 0


def _theory_reports(args, system, domain, cfg):
    checks = ["lipschitz", "composition", "near-identity", "rollout-bound"] if args.all else [args.check]
    needs_L = any(c in ("lipschitz", "rollout-bound") for c in checks)
    L = args.L
    if L is None and needs_L:
        L = estimate_lipschitz(system, domain, args.samples, args.seed).value
    reports = []
    for check in checks:
        if check == "lipschitz":
            t = args.t if args.t is not None else args.delta
            reports.append(check_flow_lipschitz(system, domain, t, args.pairs, L, args.seed, cfg))
        elif check == "composition":
            if args.x0:
                points = np.array(args.x0, dtype=float)
            else:
                points = domain.sample(args.points, np.random.default_rng(args.seed))
            reports.append(check_composition(system, points, args.delta, args.K, cfg))
        elif check == "near-identity":
            reports.append(check_near_identity(system, domain, args.delta, args.K,
                                               args.samples, args.seed, cfg))
        elif check == "rollout-bound":
            if not args.model or not args.x0:
                raise UsageError("rollout-bound needs --model and --x0")
            model = load_model(args.model)
            sup_error = args.sup_error
            if sup_error is None:
                sup_error = holdout_error(model, system, domain, args.samples, args.seed, cfg)[0]
            reports.extend(check_rollout_bounds(model, system, domain, np.array(args.x0), args.m,
                                                L, sup_error, cfg=cfg))
    return reports


def cmd_theory_check(args) -> int:
    started = time.time()
    if not args.all and not args.check:
        raise UsageError("pass --check NAME or --all")
    system = _system(args)
    domain = args.domain or system.default_domain
    reports = _theory_reports(args, system, domain, _integrator(args))
    out = _resolve(args.out, "theory_report.json")
    Path(out).write_text(reports_to_json(reports) + "\n", encoding="utf-8")
    write_manifest(out.with_suffix(".manifest.json"), args.argv,
                   {"system": system.name, "check": args.check, "all": args.all},
                   inputs=[args.model] if args.model else [], outputs=[out], started=started)
    print(format_table(reports))
    return 0


def _phase_csv(path, states, reference):
    import csv

    n = states.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(n)] + [f"ref_x{i + 1}" for i in range(n)])
        for s, r in zip(states, reference):
            writer.writerow([repr(float(v)) for v in s] + [repr(float(v)) for v in r])


def _trajectory_errors(states, reference):
    err = np.linalg.norm(states - reference, axis=1)
    scale = np.linalg.norm(reference, axis=1)
    rel = err / np.where(scale > 0, scale, 1.0)
    return {"max_error": float(err.max()), "mean_error": float(err.mean()),
            "max_rel_error": float(rel.max())}


def run_preset(preset: ExperimentPreset, out: Path, seed: int = 0, J: int = 1000,
               train_cfg: TrainConfig | None = None, kinds=("resnet", "rt", "rs"),
               eval_points: int = 10_000) -> dict:
    """Data, training, rollouts, error summary and theory checks for one preset.

    Returns the summary dictionary that is also written to ``summary.json``.
    """
    out.mkdir(parents=True, exist_ok=True)
    cfg_int = IntegratorConfig()
    system = get_system(preset.system)
    domain = system.default_domain
    train_cfg = train_cfg or TrainConfig(seed=seed)
    steps = int(round(preset.horizon / preset.delta))
    x0 = np.array(preset.x0)

    stage = "generate"
    try:
        ts = generate_pairs(system, domain, J, preset.delta, NoiseSpec(), cfg_int, seed)
        data_path = save_training_set(ts, out / "data.csv")

        stage = "lipschitz"
        L = estimate_lipschitz(system, domain, 10_000, seed).value
        theory = [check_flow_lipschitz(system, domain, preset.delta, 2000, L, seed, cfg_int),
                  check_composition(system, domain.sample(100, np.random.default_rng(seed)),
                                    preset.delta, preset.K, cfg_int)]
        for K in sorted({1, preset.K}):
            theory.append(check_near_identity(system, domain, preset.delta, K, 10_000, seed, cfg_int))

        summary = {"preset": preset.id, "system": system.name, "seed": seed, "J": J,
                   "x0": list(preset.x0), "horizon": preset.horizon, "L": L, "models": {}}
        ref_coarse = reference_trajectory(system, x0, np.arange(steps + 1) * preset.delta, cfg_int)
        for kind in kinds:
            kind = ModelKind(kind)
            stage = f"train {kind.value}"
            K = 1 if kind is ModelKind.RESNET else preset.K
            hidden = preset.resnet_hidden if kind is ModelKind.RESNET else preset.multistep_hidden
            model = make_model(kind, K, hidden, system.dimension, preset.delta, seed)
            trained, report = train(model, ts, train_cfg)
            save_model(trained, out / f"model_{kind.value}.json")
            write_loss_csv(out / f"loss_{kind.value}.csv", report)

            stage = f"rollout {kind.value}"
            traj = rollout(trained, x0, steps)
            write_trajectory_csv(out / f"traj_{kind.value}.csv", traj, ref_coarse)
            _phase_csv(out / f"phase_{kind.value}.csv", traj.states, ref_coarse)
            entry = _trajectory_errors(traj.states, ref_coarse)
            entry["final_train_loss"] = report.per_epoch_train_loss[-1]
            entry["final_holdout_loss"] = report.final_holdout_loss
            sup_err, mean_err = holdout_error(trained, system, domain, eval_points, seed + 7, cfg_int)
            entry["holdout_sup_error"] = sup_err
            entry["holdout_mean_error"] = mean_err
            if preset.linear:
                entry["passed"] = entry["max_error"] < LINEAR_MAX_ERROR
            else:
                entry["passed"] = entry["max_rel_error"] < NONLINEAR_MAX_REL_ERROR

            if kind is ModelKind.RT:
                fine = rollout(trained, x0, steps * K, fine=True)
                ref_fine = reference_trajectory(system, x0, fine.times, cfg_int)
                write_trajectory_csv(out / "traj_rt_fine.csv", fine, ref_fine)
                _phase_csv(out / "phase_rt_fine.csv", fine.states, ref_fine)
                fine_err = _trajectory_errors(fine.states, ref_fine)
                entry["fine"] = dict(fine_err, rows=len(fine.times), step=fine.step,
                                     matches_coarse=bool(np.array_equal(fine.states[::K], traj.states)))

            stage = f"theory {kind.value}"
            m_max = min(ROLLOUT_BOUND_STEPS, steps)
            bounds = check_rollout_bounds(trained, system, domain, x0, m_max, L, sup_err, cfg=cfg_int)
            for r in bounds:
                r.context["model"] = kind.value
            theory.extend(bounds)
            entry["rollout_bound_satisfied"] = all(r.satisfied for r in bounds)
            summary["models"][kind.value] = entry
    except (IntegrationError, DomainError, TrainingDivergedError, InconclusiveError) as exc:
        exc.args = (f"stage '{stage}' failed: {exc}",)
        raise

    summary["theory_all_satisfied"] = all(r.satisfied for r in theory)
    Path(out / "theory.json").write_text(reports_to_json(theory) + "\n", encoding="utf-8")
    _dump_json(out / "summary.json", summary)
    with open(out / "summary.csv", "w", encoding="utf-8") as fh:
        fh.write("model,max_error,mean_error,max_rel_error,holdout_sup_error,passed\n")
        for name, e in summary["models"].items():
            fh.write(f"{name},{e['max_error']!r},{e['mean_error']!r},{e['max_rel_error']!r},"
                     f"{e['holdout_sup_error']!r},{e['passed']}\n")
    return summary


def cmd_reproduce(args) -> int:
    started = time.time()
    preset = PRESETS.get(args.preset)
    if preset is None:
        raise UsageError(f"unknown preset {args.preset!r} (choose from {', '.join(PRESETS)})")
    out = Path(args.out) if args.out else _out_dir() / f"reproduce_{preset.id}"
    cfg = _train_config(args)
    summary = run_preset(preset, out, args.seed, args.J, cfg)
    files = sorted(p for p in out.iterdir() if p.suffix in (".csv", ".json") and p.name != "manifest.json")
    write_manifest(out / "manifest.json", args.argv,
                   {"preset": preset.__dict__, "seed": args.seed, "J": args.J, "train": cfg.to_dict()},
                   outputs=files, started=started)
    print(f"{preset.id}: {preset.system}, x0={preset.x0}, t in [0, {preset.horizon}]")
    for name, e in summary["models"].items():
        line = (f"  {ModelKind(name).label:10s} max err {e['max_error']:.3e}  "
                f"max rel err {e['max_rel_error']:.3e}  holdout sup {e['holdout_sup_error']:.3e}  "
                f"{'ok' if e['passed'] else 'FAIL'}")
        print(line)
        if "fine" in e:
            print(f"  {'(fine)':10s} max err {e['fine']['max_error']:.3e} over {e['fine']['rows']} rows, "
                  f"coarse match {e['fine']['matches_coarse']}")
    print(f"  theory checks all satisfied: {summary['theory_all_satisfied']}")
    if args.strict and not all(e["passed"] for e in summary["models"].values()):
        raise StrictFailure("rollout error threshold exceeded")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--adam-eps", type=float, default=1e-8)
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--ema", type=float, default=0.999,
                   help="weight-averaging decay; 0 returns the raw last iterate")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample trajectory pairs from a builtin system")
    p.add_argument("--system", required=True)
    p.add_argument("--J", type=int, default=1000)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--domain", type=_domain)
    p.add_argument("--eta", type=float, help="toggle-switch IPTG exponent")
    p.add_argument("--integrator", choices=["rk4", "rk45"], default="rk4")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a ResNet / RT-ResNet / RS-ResNet flow map")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=[k.value for k in ModelKind], default="resnet")
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--hidden", type=_ints, default=[30, 30, 30])
    p.add_argument("--delta", type=float, help="model lag; must match the data")
    p.add_argument("--weight-std", type=float)
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="march a trained model from an initial state")
    p.add_argument("--model", required=True)
    p.add_argument("--x0", type=_floats, required=True)
    p.add_argument("--steps", type=int, required=True, help="number of lag-sized steps")
    p.add_argument("--fine", action="store_true", help="RT-ResNet only: output every block step")
    p.add_argument("--ref", help="builtin system for reference columns")
    p.add_argument("--eta", type=float)
    p.add_argument("--integrator", choices=["rk4", "rk45"], default="rk4")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("evaluate", help="sampled sup/mean one-step error of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--system", required=True)
    p.add_argument("--points", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", type=_domain)
    p.add_argument("--eta", type=float)
    p.add_argument("--integrator", choices=["rk4", "rk45"], default="rk4")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("theory-check", help="numerically check the flow-map bounds")
    p.add_argument("--check", choices=["lipschitz", "composition", "near-identity", "rollout-bound"])
    p.add_argument("--all", action="store_true")
    p.add_argument("--system", required=True)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--t", type=float, help="flow time for the Lipschitz check (default: delta)")
    p.add_argument("--L", type=float, help="Lipschitz constant (default: sampled estimate)")
    p.add_argument("--pairs", type=int, default=2000)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--points", type=int, default=100, help="sample count for the composition check")
    p.add_argument("--model")
    p.add_argument("--x0", type=_floats)
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--sup-error", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", type=_domain)
    p.add_argument("--eta", type=float)
    p.add_argument("--integrator", choices=["rk4", "rk45"], default="rk4")
    p.add_argument("--out")
    p.set_defaults(func=cmd_theory_check)

    p = sub.add_parser("reproduce", help="run one of the four benchmark experiments end to end")
    p.add_argument("preset", choices=sorted(PRESETS))
    p.add_argument("--J", type=int, default=1000)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ParseError, ContractError, StrictFailure, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DomainError, IntegrationError, TrainingDivergedError, InconclusiveError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
