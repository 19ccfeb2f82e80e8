"""Command-line driver for the convergence studies.

Every subcommand reads its configuration (defaults < ``--config`` file <
flags), writes its outputs into ``out_dir`` and returns an exit code:
0 on success, 2 for configuration errors, 1 for numerical failures.
Failures print a single ``error: kind=... message=...`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .experiments import CASES, ConfigError, ExperimentConfig, default_config, merge_tables, run_convergence_study, stability_audit
from .fem import operators_for
from .noise import sample_increments, sample_key
from .plot import write_convergence_svg
from .results import SAMPLES_FILE, ConvergenceTable, persist_results
from .semigroup import check_projection_stability, standard_audits, write_report
from .solver import build_step_system, run_trajectory

log = logging.getLogger("stochstokes")

SUBCOMMANDS = ("converge-time", "converge-space", "case-compare", "deterministic", "stability", "semigroup-check", "single-run")
STUDY_OF = {
    "converge-time": "time",
    "converge-space": "space",
    "case-compare": "case-compare",
    "deterministic": "deterministic",
    "stability": "stability",
    "semigroup-check": "time",
    "single-run": "time",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stochstokes", description="Strong convergence studies for the stochastic Stokes equations.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--show-config", action="store_true", help="print the resolved configuration and exit")
    p.add_argument("--case", choices=tuple(CASES))
    p.add_argument("--r", type=str)
    p.add_argument("--L", type=str)
    p.add_argument("--basis", choices=("cosine", "sine"))
    p.add_argument("--T", type=str)
    p.add_argument("--tau-list", dest="tau_list", help="comma separated, e.g. 2^-2,2^-3")
    p.add_argument("--n-list", dest="n_list", help="comma separated mesh sizes")
    p.add_argument("--ref-tau", dest="ref_tau")
    p.add_argument("--ref-n", dest="ref_n")
    p.add_argument("--samples")
    p.add_argument("--base-seed", dest="base_seed")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--levels", type=int, help="keep only the first K refinement levels")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _flag_values(args) -> dict:
    out = {}
    for key in cfgmod.KEYS:
        raw = getattr(args, key, None)
        if raw is not None:
            out[key] = cfgmod.parse_value(key, str(raw))
    return out


def resolve_args(args) -> ExperimentConfig:
    file_values = cfgmod.read_config_file(args.config) if args.config else {}
    return cfgmod.resolve(STUDY_OF[args.subcommand], file_values, _flag_values(args), args.levels)


def _progress(msg: str) -> None:
    log.info(msg)


def _write_table(table: ConvergenceTable, out: Path, axis: str, title: str) -> None:
    persist_results(table, out)
    write_convergence_svg(table, out / "convergence.svg", axis, title)
    for s in table.slopes:
        print(f"slope {s.quantity} {s.slope:.4f} (residual {s.residual:.3g})")


def cmd_converge(cfg: ExperimentConfig) -> None:
    out = Path(cfg.out_dir)
    table = run_convergence_study(cfg, sidecar=out / SAMPLES_FILE, progress=_progress)
    _write_table(table, out, cfg.axis, f"{cfg.study} convergence, case {cfg.case}")


def cmd_case_compare(cfg: ExperimentConfig, explicit: dict) -> None:
    out = Path(cfg.out_dir)
    tables = []
    for case, r in CASES.items():
        sub = replace(cfg, case=case, r=r, L=explicit.get("L", cfgmod.default_truncation(r)))
        tables.append(run_convergence_study(sub, sidecar=out / f"samples_{case}.csv", progress=_progress))
    _write_table(merge_tables(tables), out, "space", "spatial convergence, cases I, II, III")


def deterministic_configs(cfg: ExperimentConfig) -> tuple[ExperimentConfig, ExperimentConfig]:
    """Zero-noise space and time self-convergence configurations."""
    common = dict(zero_noise=True, samples=1, T=cfg.T, base_seed=cfg.base_seed)
    space = default_config("space", **common)
    time = default_config(
        "time", n_list=(8,), tau_list=tuple(2.0**-k for k in range(2, 7)), ref_n=8, ref_tau=2.0**-10, **common
    )
    return space, time


def cmd_deterministic(cfg: ExperimentConfig) -> None:
    out = Path(cfg.out_dir)
    space, time = deterministic_configs(cfg)
    for sub, part in ((space, "space"), (time, "time")):
        d = out / part
        table = run_convergence_study(replace(sub, out_dir=str(d)), sidecar=d / SAMPLES_FILE, study_label=f"deterministic-{part}")
        _write_table(table, d, part, f"deterministic {part} self-convergence")


def cmd_stability(cfg: ExperimentConfig) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    taus = (float(cfg.tau_list[0]), float(cfg.ref_tau))
    audit = stability_audit(cfg, taus)
    (out / "stability.csv").write_text(audit.to_csv())
    for q, v in audit.ratios.items():
        print(f"ratio {q} {v:.4f}")
    print("stability audit " + ("passed" if audit.passed else "FAILED"))
    if not audit.passed:
        raise FloatingPointError("stability ratios outside [1/2, 2]")


def cmd_semigroup(cfg: ExperimentConfig) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = standard_audits() + [check_projection_stability()]
    write_report(reports, out / "semigroup_report.txt")
    for rep in reports:
        print(f"{rep.name} constant={rep.constant:.4g} " + ("ok" if rep.passed else "FAILED"))
    if not all(rep.passed for rep in reports):
        raise FloatingPointError("semigroup audit constant above threshold")


def cmd_single_run(cfg: ExperimentConfig) -> None:
    """One path on the first level, per-step diagnostics to ``single_run.csv``."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n, tau = cfg.levels()[0]
    ops = operators_for(n)
    model = cfg.noise_model()
    tab = None if cfg.zero_noise else sample_increments(model.L, tau, int(round(cfg.T / tau)), cfg.base_seed, 0)
    tr = run_trajectory(ops.space, ops, model, tau, cfg.T, cfg.f, tab, system=build_step_system(ops, tau))
    u = tr.final_velocity
    l2 = float(np.sqrt(u @ (ops.M @ u)))
    lines = ["step,t,div_residual,energy_residual"]
    lines += [f"{k + 1},{(k + 1) * tau!r},{float(d)!r},{float(e)!r}" for k, (d, e) in enumerate(zip(tr.div_residuals, tr.energy_residuals))]
    (out / "single_run.csv").write_text("\n".join(lines) + "\n")
    print(f"n={n} tau={tau!r} steps={tr.n_steps} seed={sample_key(cfg.base_seed, 0)} |u(T)|_L2={l2!r}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = resolve_args(args)
        if args.show_config:
            sys.stdout.write(cfgmod.show_config(cfg))
            return 0
        if args.subcommand in ("converge-time", "converge-space", "single-run"):
            cfg.validate()
    except ConfigError as exc:
        print(f"error: kind=config message={_one_line(exc)}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: kind=config message={_one_line(exc)}", file=sys.stderr)
        return 2
    try:
        sub = args.subcommand
        if sub in ("converge-time", "converge-space"):
            cmd_converge(cfg)
        elif sub == "case-compare":
            cmd_case_compare(cfg, (cfgmod.read_config_file(args.config) if args.config else {}) | _flag_values(args))
        elif sub == "deterministic":
            cmd_deterministic(cfg)
        elif sub == "stability":
            cmd_stability(cfg)
        elif sub == "semigroup-check":
            cmd_semigroup(cfg)
        else:
            cmd_single_run(cfg)
    except ConfigError as exc:
        print(f"error: kind=config message={_one_line(exc)}", file=sys.stderr)
        return 2
    except (ArithmeticError, ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"error: kind=numerical type={type(exc).__name__} message={_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
