"""Numerical audits of discrete semigroup and projection inequalities.

The scalar audits replace the discrete Stokes eigenvalues by a grid of
``lam >= 0``; the operator audits work on assembled MINI matrices.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .fem import AssembledOperators, FEFunction, MiniSpace, norm, operators_for, project_Xh
from .solver import build_step_system

THRESHOLD = 10.0


def standard_lambda_grid() -> np.ndarray:
    return np.logspace(-2, 6, 200)


@dataclass
class InequalityReport:
    name: str
    grid: str
    constant: float
    threshold: float
    passed: bool = field(init=False)
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.constant):
            raise FloatingPointError(f"{self.name}: empirical constant is not finite")
        self.passed = bool(self.constant <= self.threshold)

    def to_text(self) -> str:
        d = asdict(self)
        details = d.pop("details")
        lines = [f"[{self.name}]"]
        lines += [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in d.items() if k != "name"]
        lines += [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in details.items()]
        return "\n".join(lines) + "\n"


def _grid_text(lam: np.ndarray) -> str:
    lam = np.asarray(lam)
    return f"{len(lam)} points in [{lam.min():.3g}, {lam.max():.3g}]"


def check_rational_stability(gamma: float, tau: float, lam_grid: Sequence[float], N: int) -> InequalityReport:
    """sup over lam and 1<=n<=N of (1+lam)^{g/2} (1+tau lam)^{-n} t_n^{g/2}."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    lam = np.asarray(lam_grid, dtype=float)
    if np.any(lam < 0) or N < 1:
        raise ValueError("need lam >= 0 and N >= 1")
    n = np.arange(1, N + 1)[:, None]
    tn = n * tau
    # log form avoids overflow of (1 + lam)^{g/2} against tiny powers
    logv = 0.5 * gamma * np.log1p(lam)[None, :] - n * np.log1p(tau * lam)[None, :] + 0.5 * gamma * np.log(tn)
    val = np.exp(logv)
    i, j = np.unravel_index(np.argmax(val), val.shape)
    return InequalityReport(
        name="rational_stability",
        grid=f"gamma={gamma}, tau={tau}, N={N}, lam {_grid_text(lam)}",
        constant=float(val[i, j]),
        threshold=THRESHOLD,
        details={"argmax_n": int(i + 1), "argmax_lambda": float(lam[j])},
    )


def F_n(n, z):
    """e^{-nz} - (1+z)^{-n}."""
    n = np.asarray(n, dtype=float)
    z = np.asarray(z, dtype=float)
    return np.exp(-n * z) - np.exp(-n * np.log1p(z))


def check_Fn_bounds(tau: float, lam_grid: Sequence[float], N: int) -> InequalityReport:
    """Both |F_n(tau lam)| / (tau lam)^{1/2} and |F_n(tau lam)| t_n^{1/2} / tau^{1/2}."""
    lam = np.asarray(lam_grid, dtype=float)
    if np.any(lam < 0) or N < 1:
        raise ValueError("need lam >= 0 and N >= 1")
    n = np.arange(1, N + 1)[:, None]
    z = tau * lam[None, :]
    F = np.abs(F_n(n, z))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(z > 0, F / np.sqrt(z), 0.0)
    r2 = F * np.sqrt(n * tau) / np.sqrt(tau)
    c1, c2 = float(r1.max()), float(r2.max())
    return InequalityReport(
        name="Fn_bounds",
        grid=f"tau={tau}, N={N}, lam {_grid_text(lam)}",
        constant=max(c1, c2),
        threshold=THRESHOLD,
        details={"smoothness_constant": c1, "time_weighted_constant": c2},
    )


class NotDivergenceFreeError(ValueError):
    pass


def check_discrete_energy_decay(
    space: MiniSpace, ops: AssembledOperators, tau: float, v: FEFunction, N: int, div_tol: float = 1e-10
) -> InequalityReport:
    """Iterate w^j = (I + tau A_h)^{-j} v and audit the energy identity and inequality."""
    c = np.asarray(v.coeffs, dtype=float)
    vn = float(np.sqrt(c @ (ops.M @ c)))
    if np.abs(ops.B_div @ c).max(initial=0.0) > div_tol * (1.0 + vn):
        raise NotDivergenceFreeError("initial field is not discretely divergence-free; project it first")
    system = build_step_system(ops, tau)
    nv, npr = space.n_velocity, space.n_pressure
    w = c.copy()
    half0 = 0.5 * vn**2
    max_half = half0 if N == 0 else 0.0
    dissip = 0.0
    jumps = 0.0
    norms = []
    for _ in range(N):
        x = system.solve(np.concatenate([ops.M @ w, np.zeros(npr)]))
        wn = x[:nv]
        d = wn - w
        jumps += 0.5 * float(d @ (ops.M @ d))
        dissip += tau * float(wn @ (ops.K_d @ wn))
        w = wn
        h = 0.5 * float(w @ (ops.M @ w))
        norms.append(np.sqrt(2.0 * h))
        max_half = max(max_half, h)
    final_half = 0.5 * float(w @ (ops.M @ w))
    identity_res = abs(final_half + jumps + dissip - half0) / max(half0, 1e-300) if half0 > 0 else abs(final_half + jumps + dissip)
    const = (max_half + dissip) / half0 if half0 > 0 else 0.0
    return InequalityReport(
        name="discrete_energy_decay",
        grid=f"n={space.mesh.n}, tau={tau}, N={N}",
        constant=float(const),
        threshold=1.0 + 1e-12,
        details={
            "identity_residual": float(identity_res),
            "dissipation": float(dissip),
            "jumps": float(jumps),
            "l2_norms": [float(x) for x in norms],
        },
    )


def decomposition_ratio(space: MiniSpace, ops: AssembledOperators, coeffs: np.ndarray) -> float:
    v = FEFunction(space, "velocity", np.asarray(coeffs, dtype=float))
    w = project_Xh(space, v, ops)
    z = FEFunction(space, "velocity", v.coeffs - w.coeffs)
    return (norm(w, "H1", ops) + norm(z, "H1", ops)) / norm(v, "H1", ops)


def check_projection_stability(
    levels: Sequence[int] = (4, 8, 16, 32), draws: int = 20, seed: int = 0, kind: str = "random", growth: float = 1.25
) -> InequalityReport:
    """Per-level max of (|P v|_H1 + |v - P v|_H1) / |v|_H1 over random ``v``.

    ``kind='gradient'`` draws ``v = B_div^T q`` for random pressure vectors.
    Passes if no level's maximum exceeds ``growth`` times the previous one.
    """
    if len(levels) < 2:
        raise ValueError("projection stability needs at least two levels")
    rng = np.random.default_rng(seed)
    maxima = []
    for n in levels:
        ops = operators_for(int(n))
        space = ops.space
        worst = 0.0
        for _ in range(draws):
            if kind == "gradient":
                c = ops.B_div.T @ rng.standard_normal(space.n_pressure)
            elif kind == "random":
                c = rng.standard_normal(space.n_velocity)
            else:
                raise ValueError(f"unknown draw kind {kind!r}")
            worst = max(worst, decomposition_ratio(space, ops, c))
        maxima.append(worst)
    growths = [b / a for a, b in zip(maxima, maxima[1:])]
    worst_growth = max(growths)
    return InequalityReport(
        name="projection_stability",
        grid=f"levels={list(levels)}, draws={draws}, kind={kind}",
        constant=worst_growth,
        threshold=growth,
        details={"level_maxima": [float(m) for m in maxima], "max_ratio": float(max(maxima))},
    )


def standard_audits() -> list[InequalityReport]:
    lam = standard_lambda_grid()
    reports = [check_rational_stability(g, 2.0**-6, lam, 2**6) for g in (0.0, 0.5, 1.0)]
    reports += [check_Fn_bounds(tau, lam, 2**6) for tau in (2.0**-4, 2.0**-6)]
    return reports


def write_report(reports: Sequence[InequalityReport], path) -> None:
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(rep.to_text())
            fh.write("\n")
