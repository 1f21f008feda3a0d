"""Command-line experiment runner.

    difftd run --config sweep.ini [--jobs N] [--out DIR]
    difftd diagnose --system sys.ini --dt 0.1 0.01 0.001 --samples 100000
    difftd simulate --system sys.ini --steps 1000 --out traj.csv

Exit status: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .coef_estimators import estimate_drift, estimate_diffusion_sq
from .config import ExperimentConfig, load_experiment, load_system
from .errors import ConfigError, InstabilityError, InvalidArgumentError
from .oracles import LinearExactSampler, LqrSpec, lqr_value
from .policy_eval import evaluate_policy
from .sde_core import LinearSde, rollout
from .value_models import MlpValue, QuadraticValue

OUT_ENV = "DIFFTD_OUT_DIR"
DEFAULT_OUT = "difftd-results"
CELL_HEADER = ["update", "loss", "oracle_err", "wall_ms"]
SUMMARY_HEADER = ["method", "noise", "beta", "n_seeds", "final_loss_mean", "final_loss_std",
                  "final_oracle_err_mean", "final_oracle_err_std", "status"]


@dataclass(frozen=True)
class Cell:
    method: str
    noise: float
    beta: float
    seed: int

    @property
    def stem(self):
        return f"{self.method}_noise{self.noise:g}_beta{self.beta:g}_seed{self.seed}"

    @property
    def group(self):
        return self.method, self.noise, self.beta


def cells(cfg: ExperimentConfig):
    return [Cell(m, nz, b, s) for m in cfg.methods for nz in cfg.noise for b in cfg.betas for s in cfg.seeds]


def _oracle(cfg: ExperimentConfig):
    sysc = cfg.system
    if not cfg.oracle:
        return None
    gamma = cfg.td_config("TD", 0.0).gamma
    try:
        return lqr_value(LqrSpec.from_system(sysc.system, sysc.policy, gamma)).value
    except (InstabilityError, InvalidArgumentError):
        return None


def run_cell(cfg: ExperimentConfig, cell: Cell, out_dir):
    """Train one cell, write its CSV and then its ``.done`` marker."""
    sysc = cfg.system
    n = sysc.system.state_dim
    model = QuadraticValue.zeros(n) if cfg.model == "quadratic" else MlpValue(n, cfg.hidden, seed=cell.seed)
    tcfg = replace(cfg.train, seed=cell.seed, perturb_coef=cell.noise)
    report = evaluate_policy(sysc.system, sysc.policy, model, cfg.td_config(cell.method, cell.beta), tcfg,
                             oracle=_oracle(cfg))
    path = os.path.join(out_dir, cell.stem + ".csv")
    report.to_csv(path)
    with open(path + ".done", "w") as fh:
        fh.write(report.status + "\n")
    return cell, report.status


def _read_cell(out_dir, cell: Cell):
    path = os.path.join(out_dir, cell.stem + ".csv")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != CELL_HEADER:
        raise RuntimeError(f"{path}: unexpected header {rows[0]}")
    with open(path + ".done") as fh:
        status = fh.read().strip()
    loss = np.array([float(r[1]) for r in rows[1:]])
    err = np.array([float(r[2]) for r in rows[1:]])
    return loss, err, status


def _last_finite(x):
    ok = np.flatnonzero(np.isfinite(x))
    return x[ok[-1]] if ok.size else math.nan


def write_summary(cfg: ExperimentConfig, out_dir):
    """Final loss and oracle error per (method, noise, beta), mean and std over seeds."""
    groups: dict = {}
    for cell in cells(cfg):
        groups.setdefault(cell.group, []).append(_read_cell(out_dir, cell))
    path = os.path.join(out_dir, "summary.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for (method, noise, beta), runs in groups.items():
            diverged = any(st != "ok" for _, _, st in runs)
            fl = np.array([_last_finite(l) for l, _, st in runs if st == "ok"])
            fe = np.array([_last_finite(e) for _, e, st in runs if st == "ok"])

            def stat(x, f):
                return repr(float(f(x))) if x.size and np.all(np.isfinite(x)) else "nan"

            w.writerow([method, repr(noise), repr(beta), len(runs), stat(fl, np.mean), stat(fl, np.std),
                        stat(fe, np.mean), stat(fe, np.std), "diverged" if diverged else "ok"])
    return path


def run_experiment(config_path, out=None, jobs=1, log=print):
    """Run every unfinished cell, then rebuild the summary; returns the summary path."""
    cfg = load_experiment(config_path)
    out_dir = out or os.environ.get(OUT_ENV) or cfg.out or DEFAULT_OUT
    os.makedirs(out_dir, exist_ok=True)
    todo = [c for c in cells(cfg) if not os.path.exists(os.path.join(out_dir, c.stem + ".csv.done"))]
    if len(todo) < len(cells(cfg)):
        log(f"skipping {len(cells(cfg)) - len(todo)} completed cells")
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(run_cell, cfg, c, out_dir): c for c in todo}
            for fut, c in futures.items():
                try:
                    _, status = fut.result()
                except Exception as exc:
                    raise CellFailure(c, exc) from exc
                log(f"{c.stem}: {status}")
    else:
        for c in todo:
            try:
                _, status = run_cell(cfg, c, out_dir)
            except Exception as exc:
                raise CellFailure(c, exc) from exc
            log(f"{c.stem}: {status}")
    return write_summary(cfg, out_dir)


class CellFailure(RuntimeError):
    def __init__(self, cell: Cell, exc: Exception):
        super().__init__(f"cell {cell.stem} failed: {type(exc).__name__}: {exc}")
        self.cell = cell


def diagnose(system_path, dts, n_samples, seed=0, state=None, sampler="auto"):
    """Rows of drift / squared-diffusion estimates against the declared coefficients.

    With ``sampler="auto"`` linear systems are stepped exactly (so the rows
    show the finite-difference bias rather than Euler-Maruyama's exactly
    unbiased drift) with antithetic noise; other systems use one EM step.
    """
    sysc = load_system(system_path)
    sys_, pol = sysc.system, sysc.policy
    n = sys_.state_dim
    s = np.asarray(state if state is not None else (sysc.state if sysc.state is not None else np.ones(n)),
                   dtype=np.float64)
    a_mean = pol.mean(s)
    drift_true = sys_.drift(s, a_mean)
    sig = sys_.diffusion(s, a_mean)
    diff_true = sig @ sig.T
    exact = sampler == "exact" or (sampler == "auto" and isinstance(sys_, LinearSde))
    rows = []
    for dt in dts:
        step = LinearExactSampler(sys_, dt).step if exact else None
        d, d_se = estimate_drift(sys_, pol, s, dt, n_samples, seed, sampler=step, antithetic=exact)
        q, q_se = estimate_diffusion_sq(sys_, pol, s, dt, n_samples, seed, sampler=step, antithetic=exact)
        rows.append({"dt": dt, "drift_hat": d, "drift_se": d_se, "drift_true": drift_true,
                     "drift_bias": float(np.max(np.abs(d - drift_true))),
                     "diffusion_hat": q, "diffusion_se": q_se, "diffusion_true": diff_true,
                     "diffusion_bias": float(np.max(np.abs(q - diff_true)))})
    return rows


def _fmt(x):
    x = np.ravel(x)
    return " ".join(f"{v:.6g}" for v in x)


def format_diagnostics(rows):
    head = ["dt", "drift_hat", "drift_se", "drift_true", "drift_bias",
            "diffusion_hat", "diffusion_true", "diffusion_bias"]
    lines = ["\t".join(head)]
    for r in rows:
        lines.append("\t".join([f"{r['dt']:g}", _fmt(r["drift_hat"]), _fmt(r["drift_se"]), _fmt(r["drift_true"]),
                                f"{r['drift_bias']:.3g}", _fmt(r["diffusion_hat"]), _fmt(r["diffusion_true"]),
                                f"{r['diffusion_bias']:.3g}"]))
    return "\n".join(lines)


def build_parser():
    p = argparse.ArgumentParser(prog="difftd", description="Differential TD experiments on linear SDEs.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a method sweep from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV}, then the config)")
    d = sub.add_parser("diagnose", help="estimate drift and diffusion at several step sizes")
    d.add_argument("--system", required=True)
    d.add_argument("--dt", type=float, nargs="+", required=True)
    d.add_argument("--samples", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--state", type=float, nargs="+", default=None)
    d.add_argument("--sampler", choices=("auto", "em", "exact"), default="auto")
    s = sub.add_parser("simulate", help="dump one trajectory as CSV")
    s.add_argument("--system", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--state", type=float, nargs="+", default=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            if args.jobs < 1:
                raise ConfigError("--jobs must be positive")
            print(run_experiment(args.config, args.out, args.jobs))
        elif args.command == "diagnose":
            print(format_diagnostics(diagnose(args.system, args.dt, args.samples, args.seed, args.state,
                                              args.sampler)))
        else:
            sysc = load_system(args.system)
            s0 = args.state or (sysc.state if sysc.state is not None else np.ones(sysc.system.state_dim))
            ro = rollout(sysc.system, sysc.policy, s0, sysc.dt, args.steps,
                         sysc.seed if args.seed is None else args.seed)
            ro.to_csv(args.out)
            if ro.truncated:
                print(f"trajectory truncated after {len(ro)} steps: {ro.diagnostics.get('reason')}",
                      file=sys.stderr)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except InvalidArgumentError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return 2
    except CellFailure as exc:
        print(str(exc), file=sys.stderr)
        return 2
    return 0
