"""Monte Carlo strong-error studies against coupled fine references.

Every sample owns a Brownian tableau on the reference time grid; the coarse
runs and the reference run of a sample are driven by the same tableau, and
errors at the final time are measured on the reference mesh's quadrature
points.  Samples are processed in aligned blocks of ``SOLVE_BLOCK`` so the
numbers of a sample never depend on which other samples ran with it.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .fem import MiniSpace, NestingError, cross_evaluation_matrix, operators_for
from .mesh import build_uniform_mesh
from .noise import NoiseModel, default_truncation, sample_increments, sample_key
from .results import (
    SAMPLES_FILE,
    ConvergenceTable,
    LevelResult,
    SampleRecord,
    SlopeFit,
    read_samples,
    write_samples,
)
from .solver import SOLVE_BLOCK, build_step_system, coarse_increments, march, n_steps_for, step_ratio

log = logging.getLogger(__name__)

CASES = {"I": 2.0, "II": 1.0, "III": 0.5}
STUDIES = ("time", "space", "case-compare", "deterministic", "stability")
WORKERS_ENV = "STOCHSTOKES_WORKERS"


class ConfigError(ValueError):
    pass


def case_for_r(r: float) -> str:
    for k, v in CASES.items():
        if v == r:
            return k
    return f"r={r:g}"


@dataclass(frozen=True)
class ExperimentConfig:
    study: str = "time"
    case: str = "I"
    r: float = 2.0
    L: int = 32
    basis: str = "cosine"
    T: float = 1.0
    tau_list: tuple = (2.0**-2, 2.0**-3, 2.0**-4, 2.0**-5, 2.0**-6)
    n_list: tuple = (32,)
    ref_tau: float = 2.0**-9
    ref_n: int = 32
    samples: int = 128
    base_seed: int = 20240501
    out_dir: str = "results"
    zero_noise: bool = False
    f: tuple = (1.0, 1.0)

    @property
    def axis(self) -> str:
        """Refinement axis: ``space`` varies n at fixed tau, ``time`` varies tau at fixed n."""
        if self.study in ("space", "case-compare"):
            return "space"
        if self.study == "time":
            return "time"
        return "space" if len(self.n_list) > 1 and len(self.tau_list) == 1 else "time"

    def levels(self) -> list[tuple[int, float]]:
        if self.axis == "space":
            return [(int(n), float(self.tau_list[0])) for n in self.n_list]
        return [(int(self.n_list[0]), float(t)) for t in self.tau_list]

    @property
    def reference(self) -> tuple[int, float]:
        return int(self.ref_n), float(self.ref_tau)

    def noise_model(self) -> NoiseModel:
        return _noise_model(self.r, self.L, self.basis, 0.0 if self.zero_noise else 1.0)

    def validate(self) -> "ExperimentConfig":
        if self.study not in STUDIES:
            raise ConfigError(f"unknown study {self.study!r}")
        if not 0.0 < self.r <= 2.0:
            raise ConfigError(f"r must lie in (0, 2], got {self.r}")
        if self.L < 1 or self.samples < 1 or self.T <= 0:
            raise ConfigError("L, samples and T must be positive")
        if self.basis not in ("cosine", "sine"):
            raise ConfigError(f"unknown basis {self.basis!r}")
        n_ref, tau_ref = self.reference
        try:
            n_steps_for(tau_ref, self.T)
            for n, tau in self.levels():
                n_steps_for(tau, self.T)
                step_ratio(tau, tau_ref)
                if n_ref % n:
                    raise ConfigError(f"mesh n={n} is not nested in reference n={n_ref}")
                if not (n < n_ref or tau > tau_ref):
                    raise ConfigError(f"level (n={n}, tau={tau}) is not coarser than the reference")
                if n > n_ref or tau < tau_ref:
                    raise ConfigError(f"level (n={n}, tau={tau}) is finer than the reference")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


@lru_cache(maxsize=None)
def _noise_model(r: float, L: int, basis: str, scale: float) -> NoiseModel:
    return NoiseModel(r=r, L=L, basis=basis, scale=scale)


@lru_cache(maxsize=None)
def _system(n: int, tau: float):
    return build_step_system(operators_for(n), tau)


@lru_cache(maxsize=None)
def _pressure_cross(n: int, n_ref: int):
    from .mesh import locate_points
    import scipy.sparse as sp

    coarse = operators_for(n).space
    if n == n_ref:
        return coarse.pressure_eval
    xy = operators_for(n_ref).space.quad.xy
    tri, bary = locate_points(coarse.mesh, xy)
    rows = np.repeat(np.arange(len(xy)), 3)
    return sp.csr_matrix((bary.ravel(), (rows, coarse.mesh.triangles[tri].ravel())), shape=(len(xy), coarse.nv))


def _velocity_on(space: MiniSpace, U: np.ndarray, n_ref: int) -> np.ndarray:
    E = cross_evaluation_matrix(space, build_uniform_mesh(n_ref)) if space.mesh.n != n_ref else space.scalar_eval
    return np.stack([E @ U[: space.ns], E @ U[space.ns :]], axis=1)


def squared_errors(n: int, U: np.ndarray, P: np.ndarray, n_ref: int, Uref_q: np.ndarray, Pref_q: np.ndarray):
    """Per-column squared L2 errors against reference values at reference quadrature points."""
    space = operators_for(n).space
    w = operators_for(n_ref).space.quad.wdet
    du = _velocity_on(space, U, n_ref) - Uref_q
    dp = _pressure_cross(n, n_ref) @ P - Pref_q
    eu = np.einsum("p,pck,pck->k", w, du, du)
    ep = np.einsum("p,pk,pk->k", w, dp, dp)
    return eu, ep


def _run_level(config: ExperimentConfig, n: int, tau: float, tableaux) -> tuple[np.ndarray, np.ndarray]:
    model = config.noise_model()
    system = _system(n, tau)
    inc = None if config.zero_noise else coarse_increments(tableaux, tau, config.T, model.L + 1)
    trajs = march(system, model, config.T, config.f, inc, diagnostics=False)
    if config.zero_noise:
        trajs = trajs * len(tableaux)
    U = np.column_stack([t.final_velocity for t in trajs])
    P = np.column_stack([t.pressure_integral for t in trajs])
    return U, P


def _tableaux(config: ExperimentConfig, samples: Sequence[int]):
    n_fine = n_steps_for(config.ref_tau, config.T)
    if config.zero_noise:
        return [None] * len(samples)
    return [sample_increments(config.L, config.ref_tau, n_fine, config.base_seed, s) for s in samples]


def compute_block(config: ExperimentConfig, wanted: dict[int, list[int]]) -> list[SampleRecord]:
    """Errors for ``wanted[level_index] = [sample indices]`` (all within one aligned block)."""
    samples = sorted({s for v in wanted.values() for s in v})
    if not samples:
        return []
    tabs = _tableaux(config, samples)
    pos = {s: i for i, s in enumerate(samples)}
    n_ref, tau_ref = config.reference
    Uref, Pref = _run_level(config, n_ref, tau_ref, tabs)
    ref_space = operators_for(n_ref).space
    Uref_q = _velocity_on(ref_space, Uref, n_ref)
    Pref_q = ref_space.pressure_eval @ Pref
    levels = config.levels()
    out = []
    for li in sorted(wanted):
        idx = [pos[s] for s in wanted[li]]
        if not idx:
            continue
        n, tau = levels[li]
        if (n, tau) == (n_ref, tau_ref):
            U, P = Uref[:, idx], Pref[:, idx]
        else:
            U, P = _run_level(config, n, tau, [tabs[i] for i in idx])
        eu, ep = squared_errors(n, U, P, n_ref, Uref_q[..., idx], Pref_q[:, idx])
        for j, s in enumerate(wanted[li]):
            out.append(SampleRecord(li, s, float(eu[j]), float(ep[j]), sample_key(config.base_seed, s)))
    return out


def estimate_strong_error(config: ExperimentConfig, level: int | tuple, sample_index: int) -> tuple[float, float]:
    """(velocity squared error, pressure-integral squared error) at T for one sample.

    ``level`` is an index into ``config.levels()`` or an explicit ``(n, tau)`` pair.
    """
    if isinstance(level, tuple):
        n, tau = int(level[0]), float(level[1])
        cfg = replace(config, n_list=(n,), tau_list=(tau,), study="time")
        if config.ref_n % n:
            raise NestingError(f"mesh n={n} is not nested in reference n={config.ref_n}")
        step_ratio(tau, config.ref_tau)
        li = 0
    else:
        cfg, li = config.validate(), int(level)
    rec = compute_block(cfg, {li: [int(sample_index)]})[0]
    return rec.err_u_sq, rec.err_pint_sq


def fit_rate(errors: Sequence[float], scales: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope of log2(error) against log2(scale) and the residual norm."""
    e = np.asarray(errors, dtype=float)
    s = np.asarray(scales, dtype=float)
    if e.shape != s.shape or e.ndim != 1 or len(e) < 3:
        raise ValueError("fit_rate needs two equal-length sequences of at least 3 values")
    if np.any(e <= 0) or np.any(s <= 0) or not np.all(np.isfinite(e)):
        raise ValueError("fit_rate needs positive finite errors and scales")
    x, y = np.log2(s), np.log2(e)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    return float(coef[0]), float(np.sqrt(res @ res))


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def _blocks(config: ExperimentConfig, done: set) -> list[dict[int, list[int]]]:
    nlev = len(config.levels())
    blocks = []
    for start in range(0, config.samples, SOLVE_BLOCK):
        wanted = {}
        for li in range(nlev):
            miss = [s for s in range(start, min(start + SOLVE_BLOCK, config.samples)) if (li, s) not in done]
            if miss:
                wanted[li] = miss
        if wanted:
            blocks.append(wanted)
    return blocks


def collect_samples(
    config: ExperimentConfig,
    sidecar: Path | None = None,
    workers: int | None = None,
    progress: Callable[[str], None] | None = None,
) -> list[SampleRecord]:
    """All per-sample records, reusing any already stored in ``sidecar``."""
    config.validate()
    existing = [r for r in read_samples(sidecar)] if sidecar is not None else []
    nlev = len(config.levels())
    existing = [r for r in existing if r.level < nlev and r.sample_index < config.samples]
    done = {(r.level, r.sample_index) for r in existing}
    records = list(existing)
    blocks = _blocks(config, done)
    workers = workers or _workers()
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, recs in enumerate(pool.map(compute_block, [config] * len(blocks), blocks)):
                records += recs
                if sidecar is not None:
                    write_samples(records, sidecar)
                if progress:
                    progress(f"block {i + 1}/{len(blocks)}")
    else:
        for i, wanted in enumerate(blocks):
            records += compute_block(config, wanted)
            if sidecar is not None:
                write_samples(records, sidecar)
            if progress:
                progress(f"block {i + 1}/{len(blocks)}")
    if sidecar is not None:
        write_samples(records, sidecar)
    return sorted(records, key=lambda r: (r.level, r.sample_index))


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    m = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return m, se


def summarize(config: ExperimentConfig, records: Sequence[SampleRecord], study_label: str | None = None) -> ConvergenceTable:
    table = ConvergenceTable()
    levels = config.levels()
    label = study_label or config.study
    case = case_for_r(config.r) if not config.zero_noise else "none"
    for li, (n, tau) in enumerate(levels):
        recs = sorted((r for r in records if r.level == li), key=lambda r: r.sample_index)
        if not recs:
            continue
        eu = np.array([r.err_u_sq for r in recs])
        ep = np.array([r.err_pint_sq for r in recs])
        mu, su = _mean_se(eu)
        mp, spp = _mean_se(ep)
        table.rows.append(LevelResult(label, case, n, 1.0 / n, tau, len(recs), mu, su, mp, spp))
    tag = "" if study_label is None and config.study != "case-compare" else f"[{case}]"
    if len(table.rows) >= 3:
        scales = [r.h if config.axis == "space" else r.tau for r in table.rows]
        for qty, attr in (("velocity", "err_u_ms"), ("pressure_integral", "err_pint_ms")):
            rms = [math.sqrt(getattr(r, attr)) for r in table.rows]
            try:
                slope, res = fit_rate(rms, scales)
            except ValueError as exc:
                table.warnings.append(f"{qty}{tag}: slope not fitted ({exc})")
                continue
            table.slopes.append(SlopeFit(f"{qty}{tag}", slope, res))
    else:
        table.warnings.append(f"fewer than 3 levels ({len(table.rows)}); slopes omitted")
    for w in table.warnings:
        log.warning(w)
    return table


def run_convergence_study(
    config: ExperimentConfig,
    sidecar: Path | str | None = None,
    workers: int | None = None,
    progress: Callable[[str], None] | None = None,
    study_label: str | None = None,
) -> ConvergenceTable:
    if sidecar is None and config.out_dir:
        sidecar = Path(config.out_dir) / SAMPLES_FILE
    if sidecar is not None:
        Path(sidecar).parent.mkdir(parents=True, exist_ok=True)
        sidecar = Path(sidecar)
    records = collect_samples(config, sidecar, workers, progress)
    return summarize(config, records, study_label)


def merge_tables(tables: Sequence[ConvergenceTable]) -> ConvergenceTable:
    out = ConvergenceTable()
    for t in tables:
        out.rows += t.rows
        out.slopes += t.slopes
        out.warnings += t.warnings
    return out


# stability audit -------------------------------------------------------------


@dataclass
class StabilityRow:
    tau: float
    M: int
    max_l2_sq: float
    max_l2_sq_se: float
    sum_increment_sq: float
    sum_increment_sq_se: float
    tau_sum_h1_sq: float
    tau_sum_h1_sq_se: float


@dataclass
class StabilityAudit:
    rows: list = field(default_factory=list)
    ratios: dict = field(default_factory=dict)
    passed: bool = True

    def to_csv(self) -> str:
        head = "tau,M,max_l2_sq,max_l2_sq_se,sum_increment_sq,sum_increment_sq_se,tau_sum_h1_sq,tau_sum_h1_sq_se\n"
        lines = [
            ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in vars(r).values()) for r in self.rows
        ]
        return head + "".join(x + "\n" for x in lines)


STABILITY_QUANTITIES = ("max_l2_sq", "sum_increment_sq", "tau_sum_h1_sq")


def stability_audit(config: ExperimentConfig, taus: Sequence[float] | None = None) -> StabilityAudit:
    """Monte Carlo averages of the energy quantities for tau and tau/2 on mesh ``n_list[0]``."""
    n = int(config.n_list[0])
    if taus is None:
        taus = (float(config.tau_list[0]), float(config.tau_list[0]) / 2)
    taus = [float(t) for t in taus]
    fine = min(taus)
    n_fine = n_steps_for(fine, config.T)
    model = config.noise_model()
    per_tau = {t: {q: [] for q in STABILITY_QUANTITIES} for t in taus}
    for start in range(0, config.samples, SOLVE_BLOCK):
        samples = list(range(start, min(start + SOLVE_BLOCK, config.samples)))
        tabs = None if config.zero_noise else [sample_increments(model.L, fine, n_fine, config.base_seed, s) for s in samples]
        for t in taus:
            system = _system(n, t)
            inc = None if tabs is None else coarse_increments(tabs, t, config.T, model.L + 1)
            trajs = march(system, model, config.T, config.f, inc)
            if inc is None:
                trajs = trajs * len(samples)
            for tr in trajs:
                for q in STABILITY_QUANTITIES:
                    per_tau[t][q].append(getattr(tr, q))
    audit = StabilityAudit()
    for t in taus:
        stats = []
        for q in STABILITY_QUANTITIES:
            stats += list(_mean_se(np.array(per_tau[t][q])))
        audit.rows.append(StabilityRow(t, config.samples, *stats))
    a, b = audit.rows[0], audit.rows[-1]
    for q in STABILITY_QUANTITIES:
        x, y = getattr(a, q), getattr(b, q)
        ratio = y / x if x > 0 else (1.0 if y == 0 else math.inf)
        audit.ratios[q] = ratio
        audit.passed &= 0.5 <= ratio <= 2.0
    return audit


def default_config(study: str, case: str = "I", **overrides) -> ExperimentConfig:
    """Desk-scale defaults for each study kind."""
    r = CASES.get(case, 2.0)
    base = dict(study=study, case=case, r=r, L=default_truncation(r))
    if study in ("space", "case-compare"):
        base.update(n_list=(2, 4, 8, 16), tau_list=(2.0**-7,), ref_n=64, ref_tau=2.0**-7)
    elif study == "stability":
        base.update(n_list=(16,), tau_list=(2.0**-4,), ref_n=16, ref_tau=2.0**-5, samples=32)
    elif study == "deterministic":
        base.update(zero_noise=True, samples=1)
    base.update(overrides)
    return ExperimentConfig(**base)
