"""Command line entry point: ``mvlab <subcommand> --config run.json``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import devlab, fluctlab, model as models
from .config import ExperimentConfig
from .engine import STREAM_LAW, STREAM_REPLICA, BrownianBundle, TimeGrid, lambda_scale, simulate_particles, solve_limit_ode
from .errors import ConfigParseError, ContractViolation, LabError

SUBCOMMANDS = ("simulate", "clt-rate", "rate-fn", "exit-rate", "is-estimate", "mdp-decay", "exp-equiv", "check-model")


def _num(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return v


class Artifacts:
    def __init__(self, cfg: ExperimentConfig, subcommand: str, out_dir: Path):
        self.cfg, self.name, self.out = cfg, subcommand, out_dir
        out_dir.mkdir(parents=True, exist_ok=True)

    @property
    def stem(self):
        return self.out / f"{self.name}-{self.cfg.seed}"

    def write_csv(self, header, rows):
        path = self.stem.with_suffix(".csv")
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(self.cfg.provenance(), sort_keys=True) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_num(v) if not isinstance(v, str) else v for v in row])
        return path

    def write_ensemble(self, ensemble):
        path = self.stem.with_suffix(".csv")
        with open(path, "w", newline="") as fh:
            ensemble.write_csv(fh, self.cfg.provenance())
        return path

    def write_json(self, summary: dict):
        doc = dict(self.cfg.provenance())
        doc["subcommand"] = self.name
        doc["summary"] = _jsonable(summary)
        path = self.stem.with_suffix(".json")
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _setup(cfg):
    model = models.build_model(cfg.model)
    grid = TimeGrid(float(cfg.horizon), cfg.steps)
    return model, grid


def cmd_simulate(cfg, art, threads):
    cfg.require("epsilon")
    model, grid = _setup(cfg)
    noise = BrownianBundle.generate(cfg.seed, cfg.particles, grid, model.dim, STREAM_REPLICA, threads)
    ens = simulate_particles(model, cfg.x0, cfg.epsilon, grid, noise)
    art.write_ensemble(ens)
    term = ens.terminal()
    sup = np.max(np.linalg.norm(ens.values, axis=2), axis=1)
    return {
        "terminal_mean": term.mean(axis=0),
        "terminal_variance": term.var(axis=0, ddof=1) if term.shape[0] > 1 else None,
        "sup_moment_2": float(np.mean(sup**2)),
        "sup_moment_4": float(np.mean(sup**4)),
    }


def cmd_clt_rate(cfg, art, threads):
    cfg.require("epsilon_ladder")
    model, grid = _setup(cfg)
    res = fluctlab.clt_rate_fit(model, cfg.x0, cfg.epsilon_ladder, cfg.p, grid, cfg.seed, cfg.replicas,
                                cfg.particles, cfg.mean_mode, cfg.reference, cfg.bootstrap, workers=threads)
    art.write_csv(["epsilon", "p", "estimate", "standard_error"],
                  [(e, cfg.p, v, s) for e, v, s in zip(res.epsilon_ladder, res.errors, res.standard_errors)])
    return {"fitted_slope": res.fitted_slope, "slope_ci": res.slope_ci, "theory_slope": res.theory_slope,
            "excluded": res.excluded, "flags": res.flags}


def _read_target(path, grid, dim):
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    except OSError as exc:
        raise ConfigParseError(f"cannot read target path {path}: {exc}") from exc
    header, body = rows[0], rows[1:]
    cols = [i for i, h in enumerate(header) if h.startswith("component_")]
    if len(cols) != dim:
        raise ContractViolation(f"target CSV has {len(cols)} components, model has {dim}")
    values = np.array([[float(r[i]) for i in cols] for r in body])
    if values.shape[0] != grid.steps + 1:
        raise ContractViolation(f"target has {values.shape[0]} rows, grid needs {grid.steps + 1}")
    return values


def cmd_rate_fn(cfg, art, threads, config_dir):
    cfg.require("target")
    model, grid = _setup(cfg)
    target_path = Path(cfg.target)
    if not target_path.is_absolute():
        target_path = config_dir / target_path
    g = _read_target(target_path, grid, model.dim)
    limit = solve_limit_ode(model, cfg.x0, grid, "rk4")
    res = devlab.rate_function(model, limit, g)
    h = res.optimal_control.hdot if res.optimal_control is not None else np.zeros((0, model.dim))
    art.write_csv(["step", "time"] + [f"hdot_{i}" for i in range(model.dim)],
                  [[k, k * grid.dt] + list(h[k]) for k in range(h.shape[0])])
    return {"value": res.value, "attainable": res.attainable, "residual": res.residual, "tolerance": res.tolerance}


def cmd_exit_rate(cfg, art, threads):
    cfg.require("radius")
    model, grid = _setup(cfg)
    limit = solve_limit_ode(model, cfg.x0, grid, "rk4")
    res = devlab.exit_rate(model, limit, cfg.radius, cfg.side)
    art.write_csv(["step", "time", "cost"], [(k, k * grid.dt, c) for k, c in enumerate(res.costs)])
    return {"value": res.value, "optimal_time": res.optimal_time, "optimal_index": res.optimal_index,
            "control_energy": None if res.optimal_control is None else res.optimal_control.energy,
            "flags": res.flags}


def _event(cfg):
    if cfg.event is None:
        raise ContractViolation("this subcommand needs an 'event' {threshold, side}")
    return devlab.SupEvent.from_dict(cfg.event)


def cmd_is_estimate(cfg, art, threads):
    cfg.require("epsilon", "alpha")
    model, grid = _setup(cfg)
    event = _event(cfg)
    lam = lambda_scale(cfg.epsilon, cfg.alpha)
    shift = None
    if cfg.shift == "optimal" and event.threshold > 0:
        limit = solve_limit_ode(model, cfg.x0, grid, cfg.reference)
        shift = devlab.exit_rate(model, limit, event.threshold, event.side).optimal_control
    noise = BrownianBundle.generate(cfg.seed, cfg.replicas, grid, model.dim, STREAM_REPLICA, threads)
    law = BrownianBundle.generate(cfg.seed, cfg.particles, grid, model.dim, STREAM_LAW, threads)
    rows, summary = [], {"lambda": lam}
    for method, sh in (("importance", shift), ("plain", None)):
        r = devlab.girsanov_is_estimate(model, cfg.x0, cfg.epsilon, lam, event, sh, grid, noise, law,
                                        monitoring=cfg.monitoring, reference=cfg.reference)
        rows.append((method, cfg.epsilon, lam, r.probability, r.standard_error, r.relative_error,
                     r.mean_weight, r.excluded))
        summary[method] = vars(r)
    art.write_csv(["method", "epsilon", "lambda", "probability", "standard_error", "relative_error",
                   "mean_weight", "excluded"], rows)
    return summary


def cmd_mdp_decay(cfg, art, threads):
    cfg.require("epsilon_ladder", "alpha")
    model, grid = _setup(cfg)
    rows = devlab.mdp_decay_experiment(model, cfg.x0, cfg.alpha, cfg.epsilon_ladder, _event(cfg), grid,
                                       cfg.seed, cfg.replicas, cfg.particles, cfg.monitoring, cfg.reference,
                                       workers=threads)
    art.write_csv(["epsilon", "lambda", "probability", "standard_error", "normalized_log_prob",
                   "band_low", "band_high", "predicted", "lower_bound_only"],
                  [(r.epsilon, r.lam, r.probability, r.standard_error, r.normalized_log_prob,
                    None if r.band is None else r.band[0], None if r.band is None else r.band[1],
                    r.predicted, r.lower_bound_only) for r in rows])
    last = rows[-1]
    return {"final_normalized_log_prob": last.normalized_log_prob, "predicted": last.predicted,
            "rows": [vars(r) for r in rows]}


def cmd_exp_equiv(cfg, art, threads):
    cfg.require("epsilon_ladder", "alpha", "delta")
    model, grid = _setup(cfg)
    rows = devlab.exponential_equivalence_check(model, cfg.x0, cfg.alpha, cfg.epsilon_ladder, cfg.delta, grid,
                                                cfg.seed, cfg.replicas, cfg.particles, cfg.reference, threads)
    art.write_csv(["epsilon", "lambda", "probability", "normalized_log_prob", "eps_log_prob", "mean_gap"],
                  [(r.epsilon, r.lam, r.probability, r.normalized_log_prob, r.eps_log_prob, r.mean_gap)
                   for r in rows])
    probs = [r.probability for r in rows]
    return {"probabilities": probs, "nonincreasing": all(b <= a for a, b in zip(probs, probs[1:])),
            "rows": [vars(r) for r in rows]}


def cmd_check_model(cfg, art, threads):
    model, grid = _setup(cfg)
    rng = np.random.default_rng([cfg.seed, 0xC4EC])
    pairs = models.sample_pairs(model.dim, cfg.check_samples, rng)
    lip = models.check_lipschitz(model, pairs, t_grid=(0.0,))
    growth, K0 = models.check_growth_at_origin(model)
    mu = models.EmpiricalMeasure(rng.normal(size=(64, model.dim)))
    ld = models.check_lderivative(model, 0.0, mu, rng.normal(size=(64, model.dim)), x=rng.normal(size=model.dim))
    grad = max(models.check_gradient(model, 0.0, rng.normal(size=model.dim),
                                     models.EmpiricalMeasure(rng.normal(size=(8, model.dim)))) for _ in range(100))
    checks = [
        ("lipschitz_max_ratio", lip.max_ratio, lip.bound, not lip.violation),
        ("growth_at_origin", growth, K0, growth <= K0),
        ("lderivative_extrapolated_error", ld.extrapolated_error, 1e-6, ld.extrapolated_error <= 1e-6),
        ("gradient_relative_error", grad, 1e-6, grad <= 1e-6),
    ]
    art.write_csv(["check", "value", "bound", "passed"], checks)
    return {"checks": {c[0]: {"value": c[1], "bound": c[2], "passed": bool(c[3])} for c in checks},
            "lipschitz_skipped": lip.skipped}


def build_parser():
    parser = argparse.ArgumentParser(prog="mvlab", description=__doc__)
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="experiment JSON")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")
    return parser


def run(subcommand, config_path, out=None, threads=1):
    cfg = ExperimentConfig.load(config_path)
    if threads < 1:
        raise ContractViolation("--threads must be >= 1")
    out_dir = Path(out if out is not None else cfg.output_dir)
    art = Artifacts(cfg, subcommand, out_dir)
    handlers = {
        "simulate": cmd_simulate, "clt-rate": cmd_clt_rate, "exit-rate": cmd_exit_rate,
        "is-estimate": cmd_is_estimate, "mdp-decay": cmd_mdp_decay, "exp-equiv": cmd_exp_equiv,
        "check-model": cmd_check_model,
    }
    if subcommand == "rate-fn":
        summary = cmd_rate_fn(cfg, art, threads, Path(config_path).resolve().parent)
    else:
        summary = handlers[subcommand](cfg, art, threads)
    art.write_json(summary)
    return summary


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args.subcommand, args.config, args.out, args.threads)
    except LabError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.exit_status
    return 0


if __name__ == "__main__":
    sys.exit(main())
