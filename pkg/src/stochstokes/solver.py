"""Semi-implicit Euler time stepping for the stochastic Stokes system.

Each step solves

    [ M + tau K_d   -tau B^T ] [u^n]   [ M u^{n-1} + tau F(t_n) + N(u^{n-1}, dW_n) ]
    [ B              0       ] [p^n] = [ 0                                        ]

with one sparse LU factorization per (mesh, tau).  Many paths are marched
together as columns of one right-hand side block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import AssembledOperators, FEFunction, MiniSpace, SingularSystemError
from .noise import BrownianTableau, NoiseModel, assemble_noise_load

# right-hand sides are always solved in blocks of this width; with a fixed
# width each column's result depends only on that column
SOLVE_BLOCK = 16
DIV_TOL = 1e-9
TIME_TOL = 1e-12


class TimeGridError(ValueError):
    pass


class NonFiniteInputError(ValueError):
    pass


@dataclass(eq=False)
class StepSystem:
    ops: AssembledOperators
    tau: float
    matrix: sp.csc_matrix = field(repr=False)
    lu: object = field(repr=False)
    tol: float = 1e-10

    @property
    def space(self) -> MiniSpace:
        return self.ops.space

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        b = np.asarray(rhs, dtype=float)
        single = b.ndim == 1
        if single:
            b = b[:, None]
        k = b.shape[1]
        out = np.empty_like(b)
        for start in range(0, k, SOLVE_BLOCK):
            stop = min(start + SOLVE_BLOCK, k)
            blk = np.zeros((b.shape[0], SOLVE_BLOCK), order="F")
            blk[:, : stop - start] = b[:, start:stop]
            out[:, start:stop] = self.lu.solve(blk)[:, : stop - start]
        return out[:, 0] if single else out

    def residual(self, x: np.ndarray, rhs: np.ndarray) -> float:
        return float(np.linalg.norm(self.matrix @ x - rhs) / max(np.linalg.norm(rhs), 1e-300))


def build_step_system(ops: AssembledOperators, tau: float) -> StepSystem:
    if not tau > 0:
        raise ValueError(f"time step must be positive, got {tau}")
    A = sp.bmat([[ops.M + tau * ops.K_d, -tau * ops.B_div.T], [ops.B_div, None]], format="csc")
    try:
        # symmetric-structure ordering with threshold pivoting: ~4x less fill than COLAMD
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.01, options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise SingularSystemError(f"step matrix singular (n={ops.space.mesh.n}, tau={tau}): {exc}") from exc
    return StepSystem(ops=ops, tau=float(tau), matrix=A, lu=lu)


def euler_step(system: StepSystem, u_prev, f_load, noise_load) -> tuple[FEFunction, FEFunction]:
    """One step; ``f_load`` is ``(f(t_n), phi_i)`` (not yet scaled by tau)."""
    space = system.space
    u0 = np.asarray(getattr(u_prev, "coeffs", u_prev), dtype=float)
    f_load = np.asarray(f_load, dtype=float)
    noise_load = np.asarray(noise_load, dtype=float)
    for name, arr in (("u_prev", u0), ("f_load", f_load), ("noise_load", noise_load)):
        if arr.shape != (space.n_velocity,):
            raise ValueError(f"{name} has shape {arr.shape}, expected ({space.n_velocity},)")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInputError(f"{name} contains NaN or Inf")
    rhs = np.concatenate([system.ops.M @ u0 + system.tau * f_load + noise_load, np.zeros(space.n_pressure)])
    x = system.solve(rhs)
    return FEFunction(space, "velocity", x[: space.n_velocity]), FEFunction(space, "pressure", x[space.n_velocity :])


class Forcing:
    """Source term: a constant 2-vector or ``f(t, x, y) -> (f1, f2)``."""

    def __init__(self, space: MiniSpace, ops: AssembledOperators, f):
        self.space = space
        self.callable = callable(f)
        if self.callable:
            self.f = f
            self.const = None
        else:
            vec = np.asarray(f if f is not None else (0.0, 0.0), dtype=float)
            if vec.shape != (2,):
                raise ValueError("constant forcing must be a 2-vector")
            # constants are exact in the P1 part of the space
            self.const = ops.M @ space.interpolate(lambda x, y: (vec[0] + 0 * x, vec[1] + 0 * x)).coeffs

    def load(self, t: float) -> np.ndarray:
        if not self.callable:
            return self.const
        xy = self.space.quad.xy
        vals = np.asarray(self.f(t, xy[:, 0], xy[:, 1]), dtype=float)
        vals = np.broadcast_to(vals.reshape(2, -1) if vals.ndim > 1 else vals[:, None], (2, len(xy)))
        return self.space.load_vector(vals.T)


@dataclass
class Trajectory:
    """History of one path.  ``velocity`` maps checkpoint time to coefficients."""

    tau: float
    T: float
    n_steps: int
    velocity: dict = field(repr=False)
    pressure_integral: np.ndarray = field(repr=False)
    div_residuals: np.ndarray = field(repr=False)
    energy_residuals: np.ndarray = field(repr=False)
    max_l2_sq: float = 0.0
    sum_increment_sq: float = 0.0
    tau_sum_h1_sq: float = 0.0

    @property
    def final_velocity(self) -> np.ndarray:
        return self.velocity[max(self.velocity)]


def n_steps_for(tau: float, T: float) -> int:
    N = int(round(T / tau))
    if N < 1 or abs(N * tau - T) > TIME_TOL * max(1.0, T):
        raise TimeGridError(f"time step {tau} does not divide final time {T}")
    return N


def step_ratio(tau: float, finest_dt: float) -> int:
    k = int(round(tau / finest_dt))
    if k < 1 or abs(k * finest_dt - tau) > TIME_TOL * tau:
        raise TimeGridError(f"time step {tau} is not an integer multiple of the tableau step {finest_dt}")
    return k


def march(
    system: StepSystem,
    model: NoiseModel,
    T: float,
    f,
    increments: np.ndarray | None,
    u0: np.ndarray | None = None,
    checkpoints: Sequence[float] | None = None,
    diagnostics: bool = True,
) -> list[Trajectory]:
    """March ``k`` paths at once.

    ``increments`` holds per-step coarse increments, shape
    (k, L+1, L+1, n_steps), or ``None`` for noise-free runs of one path.
    """
    space, ops, tau = system.space, system.ops, system.tau
    N = n_steps_for(tau, T)
    if increments is None:
        k = 1
    else:
        increments = np.asarray(increments)
        k = increments.shape[0]
        if increments.shape[3] != N:
            raise TimeGridError(f"increments cover {increments.shape[3]} steps, run needs {N}")
    nu, npr = space.n_velocity, space.n_pressure
    U = np.zeros((nu, k)) if u0 is None else np.array(np.broadcast_to(np.asarray(u0, dtype=float).reshape(nu, -1), (nu, k)))
    forcing = Forcing(space, ops, f)
    cps = sorted(set(float(c) for c in (checkpoints if checkpoints is not None else [T])))
    cp_steps = {}
    for c in cps:
        n = int(round(c / tau))
        if n < 0 or n > N or abs(n * tau - c) > TIME_TOL * max(1.0, T):
            raise TimeGridError(f"checkpoint {c} is not on the time grid")
        cp_steps.setdefault(n, c)
    saved = {c: [] for c in cps}
    if 0 in cp_steps:
        saved[cp_steps[0]] = U.copy()
    P_int = np.zeros((npr, k))
    div_res = np.zeros((N, k))
    en_res = np.zeros((N, k))
    M, K, B = ops.M, ops.K_d, ops.B_div
    max_l2 = np.einsum("ik,ik->k", U, M @ U)
    sum_inc = np.zeros(k)
    sum_h1 = np.zeros(k)
    noisy = increments is not None and not model.is_zero
    for n in range(1, N + 1):
        fl = forcing.load(n * tau)
        rhs_u = M @ U + tau * fl[:, None]
        if noisy:
            nl = assemble_noise_load(space, model, U, increments[..., n - 1])
            rhs_u += nl
        x = system.solve(np.vstack([rhs_u, np.zeros((npr, k))]))
        Un, Pn = x[:nu], x[nu:]
        if not np.all(np.isfinite(Un)):
            raise FloatingPointError(f"non-finite velocity at step {n}")
        P_int += tau * Pn
        MU = M @ Un
        l2 = np.einsum("ik,ik->k", Un, MU)
        if diagnostics:
            D = Un - U
            inc = np.einsum("ik,ik->k", D, M @ D)
            diss = tau * np.einsum("ik,ik->k", Un, K @ Un)
            work = tau * (fl @ Un)
            if noisy:
                work = work + np.einsum("ik,ik->k", nl, Un)
            old = np.einsum("ik,ik->k", U, M @ U)
            terms = np.abs(np.stack([0.5 * l2, 0.5 * old, 0.5 * inc, diss, work]))
            en_res[n - 1] = np.abs(0.5 * l2 - 0.5 * old + 0.5 * inc + diss - work) / np.maximum(terms.max(axis=0), 1.0)
            div_res[n - 1] = np.abs(B @ Un).max(axis=0) / (1.0 + np.sqrt(l2))
            sum_inc += inc
            sum_h1 += tau * (l2 + np.einsum("ik,ik->k", Un, ops.K_full @ Un))
        max_l2 = np.maximum(max_l2, l2)
        U = Un
        if n in cp_steps:
            saved[cp_steps[n]] = U.copy()
    out = []
    for j in range(k):
        out.append(
            Trajectory(
                tau=tau,
                T=T,
                n_steps=N,
                velocity={c: saved[c][:, j].copy() for c in cps},
                pressure_integral=P_int[:, j].copy(),
                div_residuals=div_res[:, j].copy(),
                energy_residuals=en_res[:, j].copy(),
                max_l2_sq=float(max_l2[j]),
                sum_increment_sq=float(sum_inc[j]),
                tau_sum_h1_sq=float(sum_h1[j]),
            )
        )
    return out


def coarse_increments(tableaux: Sequence[BrownianTableau], tau: float, T: float, n_modes: int | None = None) -> np.ndarray:
    """Stack per-step increments of several tableaux, shape (k, m, m, N).

    ``n_modes`` keeps only the leading modes (streams are per mode, so a
    wider tableau restricts exactly to a narrower one).
    """
    N = n_steps_for(tau, T)
    blocks = []
    for tab in tableaux:
        ratio = step_ratio(tau, tab.finest_dt)
        if tab.n_fine_steps < N * ratio:
            raise TimeGridError(f"tableau has {tab.n_fine_steps} fine steps, run needs {N * ratio}")
        m = n_modes or tab.n_modes
        if m > tab.n_modes:
            raise TimeGridError(f"tableau has {tab.n_modes} modes per index, run needs {m}")
        blocks.append(tab.increments[:m, :m, : N * ratio].reshape(m, m, N, ratio).sum(axis=3))
    return np.stack(blocks)


def run_trajectory(
    space: MiniSpace,
    ops: AssembledOperators,
    model: NoiseModel,
    tau: float,
    T: float,
    f,
    tableau: BrownianTableau | None,
    checkpoints: Sequence[float] | None = None,
    u0=None,
    system: StepSystem | None = None,
) -> Trajectory:
    """Single path; ``u0`` (callable or FEFunction) is projected onto the divergence-free subspace."""
    from .fem import project_Xh

    system = system or build_step_system(ops, tau)
    inc = None if tableau is None else coarse_increments([tableau], tau, T, model.L + 1)
    c0 = None if u0 is None else project_Xh(space, u0, ops).coeffs
    return march(system, model, T, f, inc, u0=c0, checkpoints=checkpoints)[0]
