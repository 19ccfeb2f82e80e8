"""Truncated Q-Wiener noise with a tensor cosine (or sine) spectral basis.

The noise increment over one step is

    dW(x) = sum_{l1, l2 = 0..L} sqrt(mu[l1, l2]) * phi_{l1 l2}(x) * dw_{l1 l2} * (1, 1)

with ``mu[l1, l2] = (l1^2 + l2^2)^-(r + eps)`` and ``mu[0, 0] = 0``, and the
diffusion coefficient ``B(u) = 1/2 [[s1, s1], [s2, s2]]``,
``s_c = sqrt(u_c^2 + 1)``.

Scalar Brownian increments come from one Philox stream per
``(base_seed, sample, l1, l2)``; entry ``k`` of a stream is the increment of
fine step ``k``, so tableaux are independent of generation order and of the
truncation level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .fem import MiniSpace
from .mesh import Mesh
from .quadrature import quadrature_rule

Basis = Literal["cosine", "sine"]

EPSILON = 0.1
_SEED_MASK = (1 << 64) - 1


class NoiseUsageError(ValueError):
    pass


def eigenvalues(r: float, L: int, epsilon: float = EPSILON) -> np.ndarray:
    """(L+1, L+1) array of ``mu[l1, l2]``."""
    l1, l2 = np.meshgrid(np.arange(L + 1), np.arange(L + 1), indexing="ij")
    k = (l1**2 + l2**2).astype(float)
    mu = np.zeros_like(k)
    nz = k > 0
    mu[nz] = k[nz] ** (-(r + epsilon))
    return mu


def _basis_1d(kind: Basis, arg: np.ndarray) -> np.ndarray:
    return np.cos(arg) if kind == "cosine" else np.sin(arg)


@dataclass(eq=False)
class NoiseModel:
    r: float
    L: int
    basis: Basis = "cosine"
    epsilon: float = EPSILON
    scale: float = 1.0  # 0 switches the noise off (deterministic runs)
    mu: np.ndarray = field(init=False, repr=False)
    _evaluators: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if not (0.0 < self.r <= 2.0):
            raise ValueError(f"regularity exponent r must lie in (0, 2], got {self.r}")
        if int(self.L) != self.L or self.L < 1:
            raise ValueError(f"truncation level L must be a positive integer, got {self.L}")
        if self.basis not in ("cosine", "sine"):
            raise ValueError(f"unknown basis {self.basis!r}")
        self.L = int(self.L)
        self.mu = eigenvalues(self.r, self.L, self.epsilon) * self.scale**2
        self.mu.setflags(write=False)

    @property
    def n_modes(self) -> int:
        return self.L + 1

    @property
    def sqrt_mu(self) -> np.ndarray:
        return np.sqrt(self.mu)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.mu)

    def basis_values(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """phi_{l1 l2} at points, shape (m, L+1, L+1)."""
        ell = np.arange(self.L + 1) * np.pi
        bx = _basis_1d(self.basis, np.multiply.outer(np.asarray(x), ell))
        by = _basis_1d(self.basis, np.multiply.outer(np.asarray(y), ell))
        return bx[:, :, None] * by[:, None, :]

    def evaluator(self, mesh: Mesh) -> "QuadratureNoise":
        ev = self._evaluators.get(mesh.n)
        if ev is None:
            ev = self._evaluators[mesh.n] = QuadratureNoise(self, mesh.n)
        return ev


def build_noise_model(r: float, L: int, basis: Basis = "cosine", mesh: Mesh | None = None, scale: float = 1.0) -> NoiseModel:
    model = NoiseModel(r=r, L=L, basis=basis, scale=scale)
    if mesh is not None:
        model.evaluator(mesh)
    return model


def default_truncation(r: float) -> int:
    return 32 if r >= 2.0 else 64


class QuadratureNoise:
    """Noise fields at the quadrature points of the structured mesh with ``n`` cells.

    Exploits the tensor structure of both the basis and the mesh: quadrature
    point ``q`` of the lower/upper triangle of cell ``(i, j)`` sits at
    ``((i + ox[q]) / n, (j + oy[q]) / n)``, so a field is a product of
    ``(n, L+1)`` one-dimensional factor matrices per local point.
    """

    def __init__(self, model: NoiseModel, n: int):
        self.model = model
        self.n = n
        rule = quadrature_rule()
        lower = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
        upper = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        offs = np.concatenate([rule.points @ lower, rule.points @ upper])  # (24, 2)
        ell = np.arange(model.L + 1) * np.pi
        cells = np.arange(n)
        self.cx = np.ascontiguousarray(_basis_1d(model.basis, ((cells[None, :, None] + offs[:, 0, None, None]) / n) * ell))
        self.cy = np.ascontiguousarray(_basis_1d(model.basis, ((cells[None, :, None] + offs[:, 1, None, None]) / n) * ell))
        self.n_local = offs.shape[0]

    def fields(self, coeffs: np.ndarray) -> np.ndarray:
        """Scalar fields ``sum G[l1, l2] phi_{l1 l2}`` at all quadrature points.

        ``coeffs`` has shape (k, L+1, L+1); returns (npts, k) in the mesh's
        quadrature-point order.
        """
        G = np.asarray(coeffs, dtype=float)
        if G.ndim != 3 or G.shape[1:] != (self.model.L + 1,) * 2:
            raise NoiseUsageError(f"expected coefficients of shape (k, {self.model.L + 1}, {self.model.L + 1}), got {G.shape}")
        k = G.shape[0]
        n = self.n
        Gt = np.ascontiguousarray(G.transpose(0, 2, 1))
        out = np.empty((n, n, self.n_local, k))
        for q in range(self.n_local):
            # (k, n_j, L+1) @ (L+1, n_i) -> (k, n_j, n_i)
            F = np.matmul(np.matmul(self.cy[q], Gt), self.cx[q].T)
            out[:, :, q, :] = F.transpose(1, 2, 0)
        return out.reshape(-1, k)


def eval_B(u_point) -> np.ndarray:
    u = np.asarray(u_point, dtype=float)
    if u.shape != (2,) or not np.all(np.isfinite(u)):
        raise ValueError("eval_B needs a finite 2-vector")
    s = 0.5 * np.sqrt(u**2 + 1.0)
    return np.array([[s[0], s[0]], [s[1], s[1]]])


def assemble_noise_load(space: MiniSpace, model: NoiseModel, u_prev, dW: np.ndarray) -> np.ndarray:
    """Velocity load ``(B(u_prev) dW, phi_i)`` for one or several paths.

    ``u_prev`` is an FEFunction or coefficient array (n_velocity[, k]);
    ``dW`` holds per-mode increments, shape (L+1, L+1) or (k, L+1, L+1).
    """
    coeffs = getattr(u_prev, "coeffs", u_prev)
    U = np.asarray(coeffs, dtype=float)
    dW = np.asarray(dW, dtype=float)
    single = dW.ndim == 2
    if single:
        dW = dW[None]
        U = U.reshape(-1, 1)
    elif U.ndim == 1:
        U = np.repeat(U[:, None], dW.shape[0], axis=1)
    if dW.shape[1:] != (model.L + 1,) * 2:
        raise NoiseUsageError(f"increments cover {dW.shape[1:]} modes, model has {(model.L + 1,) * 2}")
    if U.shape != (space.n_velocity, dW.shape[0]):
        raise NoiseUsageError(f"velocity coefficients have shape {U.shape}, expected {(space.n_velocity, dW.shape[0])}")
    xi = model.evaluator(space.mesh).fields(model.sqrt_mu[None] * dW)  # (npts, k)
    E = space.scalar_eval
    w = space.quad.wdet[:, None]
    # B(u) applied to (xi, xi) gives (s1 xi, s2 xi)
    loads = []
    for c in range(2):
        uc = E @ U[c * space.ns : (c + 1) * space.ns]
        loads.append(E.T @ (w * np.sqrt(uc * uc + 1.0) * xi))
    out = np.concatenate(loads)
    return out[:, 0] if single else out


def sample_key(base_seed: int, sample_index: int) -> int:
    """Printable 64-bit identifier of a sample's streams."""
    return ((int(base_seed) & _SEED_MASK) * 0x9E3779B97F4A7C15 + int(sample_index)) & _SEED_MASK


@dataclass(frozen=True, eq=False)
class BrownianTableau:
    base_seed: int
    sample_index: int
    finest_dt: float
    increments: np.ndarray = field(repr=False)  # (L+1, L+1, n_fine_steps)

    @property
    def n_fine_steps(self) -> int:
        return self.increments.shape[2]

    @property
    def n_modes(self) -> int:
        return self.increments.shape[0]

    def coarse(self, ratio: int) -> np.ndarray:
        """Increments over blocks of ``ratio`` fine steps, shape (L+1, L+1, n_fine/ratio)."""
        if ratio < 1 or self.n_fine_steps % ratio:
            raise NoiseUsageError(f"coarsening ratio {ratio} does not divide {self.n_fine_steps} fine steps")
        m = self.n_modes
        return self.increments.reshape(m, m, -1, ratio).sum(axis=3)


def mode_stream(base_seed: int, sample_index: int, l1: int, l2: int) -> np.random.Generator:
    bits = np.random.Philox(key=[int(base_seed) & _SEED_MASK, int(sample_index) & _SEED_MASK], counter=[0, l1, l2, 0])
    return np.random.Generator(bits)


def sample_increments(model_or_L, tau_ref: float, n_fine_steps: int, base_seed: int, sample_index: int) -> BrownianTableau:
    if tau_ref <= 0:
        raise ValueError("finest time step must be positive")
    L = model_or_L.L if isinstance(model_or_L, NoiseModel) else int(model_or_L)
    inc = np.empty((L + 1, L + 1, n_fine_steps))
    sd = np.sqrt(tau_ref)
    for a in range(L + 1):
        for b in range(L + 1):
            inc[a, b] = sd * mode_stream(base_seed, sample_index, a, b).standard_normal(n_fine_steps)
    inc.setflags(write=False)
    return BrownianTableau(int(base_seed), int(sample_index), float(tau_ref), inc)
