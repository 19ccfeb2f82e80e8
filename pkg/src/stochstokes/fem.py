"""MINI element (P1 + cubic bubble / P1) on structured meshes.

Velocity DOFs are laid out component-major::

    [u1 at vertices | u1 bubbles | u2 at vertices | u2 bubbles]

so a scalar DOF ``k`` of component ``c`` has global index ``c*ns + k`` with
``ns = n_vertices + n_triangles``.  Pressure DOFs are the vertex values.
All integrals use the degree-6 rule of :mod:`stochstokes.quadrature`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Literal

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, locate_points
from .quadrature import quadrature_rule

Role = Literal["velocity", "pressure"]
NormKind = Literal["L2", "H1-seminorm", "H1"]


class SingularSystemError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadPoints:
    """Physical quadrature data; point ``t*nq + q`` is point ``q`` of triangle ``t``."""

    xy: np.ndarray  # (npts, 2)
    wdet: np.ndarray  # (npts,) weight times triangle area / reference area


def _reference_basis(bary: np.ndarray) -> np.ndarray:
    """Scalar MINI basis (three P1 hats then the bubble) at barycentric points."""
    return np.column_stack([bary, 27.0 * bary[:, 0] * bary[:, 1] * bary[:, 2]])


class MiniSpace:
    """Discrete velocity/pressure spaces on a mesh.  Immutable after construction."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.rule = quadrature_rule()
        self.nv = mesh.n_vertices
        self.nt = mesh.n_triangles
        self.ns = self.nv + self.nt

    def __repr__(self) -> str:
        return f"MiniSpace(n={self.mesh.n}, velocity={self.n_velocity}, pressure={self.n_pressure})"

    @property
    def n_velocity(self) -> int:
        return 2 * self.ns

    @property
    def n_pressure(self) -> int:
        return self.nv

    def vertex_dof(self, vertex: int, component: int) -> int:
        return component * self.ns + vertex

    def bubble_dof(self, triangle: int, component: int) -> int:
        return component * self.ns + self.nv + triangle

    @cached_property
    def local_dofs(self) -> np.ndarray:
        """(nt, 4) scalar DOFs of each triangle: three vertices, then its bubble."""
        t = self.mesh.triangles
        return np.column_stack([t, self.nv + np.arange(self.nt)])

    @cached_property
    def grad_lambda(self) -> np.ndarray:
        """(nt, 3, 2) constant gradients of the barycentric coordinates."""
        v = self.mesh.vertices[self.mesh.triangles]
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
        g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
        return np.stack([-g1 - g2, g1, g2], axis=1)

    @cached_property
    def areas(self) -> np.ndarray:
        return self.mesh.signed_areas()

    @cached_property
    def quad(self) -> QuadPoints:
        v = self.mesh.vertices[self.mesh.triangles]  # (nt, 3, 2)
        xy = np.einsum("qk,tkd->tqd", self.rule.points, v).reshape(-1, 2)
        wdet = (2.0 * self.areas[:, None] * self.rule.weights[None, :]).ravel()
        return QuadPoints(xy=xy, wdet=wdet)

    @cached_property
    def basis_at_quad(self) -> np.ndarray:
        """(nq, 4) reference basis values, identical on every triangle."""
        return _reference_basis(self.rule.points)

    @cached_property
    def basis_grads(self) -> np.ndarray:
        """(nt, nq, 4, 2) physical gradients of the scalar basis at quadrature points."""
        lam = self.rule.points
        gl = self.grad_lambda
        nq = len(self.rule)
        g = np.empty((self.nt, nq, 4, 2))
        g[:, :, :3, :] = gl[:, None, :, :]
        coef = 27.0 * np.column_stack([lam[:, 1] * lam[:, 2], lam[:, 0] * lam[:, 2], lam[:, 0] * lam[:, 1]])
        g[:, :, 3, :] = np.einsum("qk,tkd->tqd", coef, gl)
        return g

    @cached_property
    def scalar_eval(self) -> sp.csr_matrix:
        """Sparse (npts, ns) map from scalar coefficients to quadrature-point values."""
        nq = len(self.rule)
        rows = np.repeat(np.arange(self.nt * nq), 4)
        cols = np.repeat(self.local_dofs, nq, axis=0).ravel()
        vals = np.tile(self.basis_at_quad, (self.nt, 1)).ravel()
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.nt * nq, self.ns))

    @cached_property
    def pressure_eval(self) -> sp.csr_matrix:
        nq = len(self.rule)
        rows = np.repeat(np.arange(self.nt * nq), 3)
        cols = np.repeat(self.mesh.triangles, nq, axis=0).ravel()
        vals = np.tile(self.rule.points, (self.nt, 1)).ravel()
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.nt * nq, self.nv))

    def _scatter(self, local: np.ndarray, rdofs: np.ndarray, cdofs: np.ndarray, shape) -> sp.csr_matrix:
        nr, nc = rdofs.shape[1], cdofs.shape[1]
        rows = np.repeat(rdofs, nc, axis=1).ravel()
        cols = np.tile(cdofs, (1, nr)).ravel()
        mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=shape).tocsr()
        mat.sum_duplicates()
        mat.sort_indices()
        return mat

    def velocity_values(self, coeffs: np.ndarray) -> np.ndarray:
        """Values at quadrature points, shape (npts, 2) or (npts, 2, k) for stacked coefficients."""
        c = np.asarray(coeffs)
        E = self.scalar_eval
        return np.stack([E @ c[: self.ns], E @ c[self.ns :]], axis=1)

    def pressure_values(self, coeffs: np.ndarray) -> np.ndarray:
        return self.pressure_eval @ np.asarray(coeffs)

    def interpolate(self, func: Callable, bubbles: bool = False) -> "FEFunction":
        """Nodal interpolant of a vector field ``func(x, y) -> (u1, u2)``.

        With ``bubbles=True`` the bubble coefficients are chosen so the
        interpolant also matches ``func`` at every centroid.
        """
        V = self.mesh.vertices
        c = np.zeros(self.n_velocity)
        vals = np.asarray(func(V[:, 0], V[:, 1]), dtype=float)
        vals = np.broadcast_to(vals.reshape(2, -1) if vals.ndim > 1 else vals[:, None], (2, self.nv))
        for comp in range(2):
            c[comp * self.ns : comp * self.ns + self.nv] = vals[comp]
        if bubbles:
            cen = V[self.mesh.triangles].mean(axis=1)
            fc = np.asarray(func(cen[:, 0], cen[:, 1]), dtype=float)
            fc = np.broadcast_to(fc.reshape(2, -1) if fc.ndim > 1 else fc[:, None], (2, self.nt))
            for comp in range(2):
                p1 = vals[comp][self.mesh.triangles].mean(axis=1)
                c[comp * self.ns + self.nv : (comp + 1) * self.ns] = fc[comp] - p1
        return FEFunction(self, "velocity", c)

    def interpolate_pressure(self, func: Callable) -> "FEFunction":
        V = self.mesh.vertices
        vals = np.broadcast_to(np.asarray(func(V[:, 0], V[:, 1]), dtype=float), (self.nv,))
        return FEFunction(self, "pressure", np.array(vals))

    def load_vector(self, field_values: np.ndarray) -> np.ndarray:
        """(v, phi_i) for a field sampled at quadrature points, shape (npts, 2[, k])."""
        g = np.asarray(field_values) * self.quad.wdet.reshape((-1, 1) + (1,) * (np.ndim(field_values) - 2))
        Et = self.scalar_eval.T
        return np.concatenate([Et @ g[:, 0], Et @ g[:, 1]])


@dataclass(frozen=True)
class FEFunction:
    space: MiniSpace
    role: Role
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = self.space.n_velocity if self.role == "velocity" else self.space.n_pressure
        if np.shape(self.coeffs) != (n,):
            raise ValueError(f"{self.role} function needs {n} coefficients, got {np.shape(self.coeffs)}")

    def values_at_quad(self) -> np.ndarray:
        if self.role == "velocity":
            return self.space.velocity_values(self.coeffs)
        return self.space.pressure_values(self.coeffs)


@dataclass(frozen=True, eq=False)
class AssembledOperators:
    """Sparse matrices of the MINI pair.

    ``M`` velocity mass, ``K_d`` deformation stiffness ``2(D(phi_i), D(phi_j))``,
    ``B_div`` with ``B_div[j, i] = (div phi_i, psi_j)``, ``K_full`` full-gradient
    stiffness, ``Mp``/``Kp`` pressure mass and stiffness.
    """

    space: MiniSpace
    M: sp.csr_matrix
    K_d: sp.csr_matrix
    B_div: sp.csr_matrix
    K_full: sp.csr_matrix
    Mp: sp.csr_matrix
    Kp: sp.csr_matrix
    _cache: dict = field(default_factory=dict, repr=False)

    def projector(self):
        """Factorization of the L2 projection onto the discretely divergence-free subspace."""
        if "proj" not in self._cache:
            A = sp.bmat([[self.M, -self.B_div.T], [self.B_div, None]], format="csc")
            try:
                self._cache["proj"] = spla.splu(
                    A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.01, options={"SymmetricMode": True}
                )
            except RuntimeError as exc:
                raise SingularSystemError(f"projection system singular on n={self.space.mesh.n}: {exc}") from exc
        return self._cache["proj"]


def assemble_operators(space: MiniSpace) -> AssembledOperators:
    nt, ns, nv = space.nt, space.ns, space.nv
    w = space.quad.wdet.reshape(nt, -1)  # (nt, nq)
    phi = space.basis_at_quad  # (nq, 4)
    G = space.basis_grads  # (nt, nq, 4, 2)
    dofs = space.local_dofs

    mass = np.einsum("tq,qa,qb->tab", w, phi, phi)
    gg = np.einsum("tq,tqad,tqbd->tab", w, G, G)
    # cross[t, a, b, d, c] = sum_q w d_d psi_a d_c psi_b
    cross = np.einsum("tq,tqad,tqbc->tabdc", w, G, G)
    p1 = space.rule.points  # pressure basis at quadrature points
    div = np.einsum("tq,tqac,qk->ctka", w, G, p1)  # (2, nt, 3, 4)

    zero = sp.csr_matrix((ns, ns))
    Ms = space._scatter(mass, dofs, dofs, (ns, ns))
    Ks = space._scatter(gg, dofs, dofs, (ns, ns))
    M = sp.bmat([[Ms, zero], [zero, Ms]], format="csr")
    K_full = sp.bmat([[Ks, zero], [zero, Ks]], format="csr")
    blocks = [[None, None], [None, None]]
    for c in range(2):
        for d in range(2):
            loc = cross[:, :, :, d, c] + (gg if c == d else 0.0)
            blocks[c][d] = space._scatter(loc, dofs, dofs, (ns, ns))
    K_d = sp.bmat(blocks, format="csr")
    tri = space.mesh.triangles
    B_div = sp.hstack([space._scatter(div[c], tri, dofs, (nv, ns)) for c in range(2)], format="csr")

    pm = np.einsum("tq,qa,qb->tab", w, p1, p1)
    gl = space.grad_lambda
    pk = np.einsum("t,tad,tbd->tab", w.sum(axis=1), gl, gl)
    Mp = space._scatter(pm, tri, tri, (nv, nv))
    Kp = space._scatter(pk, tri, tri, (nv, nv))
    for m in (M, K_d, B_div, K_full, Mp, Kp):
        m.sort_indices()
    return AssembledOperators(space, M, K_d, B_div, K_full, Mp, Kp)


def norm(f: FEFunction, kind: NormKind = "L2", ops: AssembledOperators | None = None) -> float:
    ops = ops or operators_for(f.space)
    c = f.coeffs
    if f.role == "velocity":
        mass, stiff = ops.M, ops.K_full
    else:
        mass, stiff = ops.Mp, ops.Kp
    l2 = max(float(c @ (mass @ c)), 0.0)
    semi = max(float(c @ (stiff @ c)), 0.0)
    if kind == "L2":
        return np.sqrt(l2)
    if kind == "H1-seminorm":
        return np.sqrt(semi)
    if kind == "H1":
        return np.sqrt(l2 + semi)
    raise ValueError(f"unknown norm kind {kind!r}")


def project_Xh(space: MiniSpace, v, ops: AssembledOperators | None = None, return_pressure: bool = False):
    """L2-orthogonal projection onto the discretely divergence-free subspace.

    ``v`` is an :class:`FEFunction` (velocity), a coefficient vector, or a
    callable ``v(x, y) -> (v1, v2)`` evaluated at quadrature points.
    """
    ops = ops or operators_for(space)
    if isinstance(v, FEFunction):
        if v.role != "velocity":
            raise ValueError("project_Xh needs a velocity field")
        rhs_u = ops.M @ v.coeffs
    elif callable(v):
        xy = space.quad.xy
        vals = np.asarray(v(xy[:, 0], xy[:, 1]), dtype=float)
        vals = np.broadcast_to(vals.reshape(2, -1) if vals.ndim > 1 else vals[:, None], (2, len(xy)))
        rhs_u = space.load_vector(vals.T)
    else:
        rhs_u = ops.M @ np.asarray(v, dtype=float)
    rhs = np.concatenate([rhs_u, np.zeros(space.n_pressure)])
    sol = ops.projector().solve(rhs)
    w = FEFunction(space, "velocity", sol[: space.n_velocity])
    if return_pressure:
        return w, FEFunction(space, "pressure", sol[space.n_velocity :])
    return w


class NestingError(ValueError):
    pass


def cross_evaluation_matrix(space: MiniSpace, fine_mesh: Mesh) -> sp.csr_matrix:
    """Sparse (fine npts, coarse ns) evaluation of coarse scalar MINI functions."""
    key = ("xeval", fine_mesh.n)
    cache = space.__dict__.setdefault("_xeval", {})
    if key in cache:
        return cache[key]
    if fine_mesh.n % space.mesh.n:
        raise NestingError(f"mesh n={space.mesh.n} is not nested in n={fine_mesh.n}")
    if fine_mesh.n == space.mesh.n:
        E = space.scalar_eval
    else:
        xy = MiniSpace(fine_mesh).quad.xy
        tri, bary = locate_points(space.mesh, xy)
        vals = _reference_basis(bary)
        cols = space.local_dofs[tri]
        rows = np.repeat(np.arange(len(xy)), 4)
        E = sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(len(xy), space.ns))
    cache[key] = E
    return E


def evaluate_on_fine_quadrature(f: FEFunction, fine_mesh: Mesh) -> np.ndarray:
    """Exact values of ``f`` at the quadrature points of a nested finer mesh."""
    space = f.space
    if f.role == "velocity":
        E = cross_evaluation_matrix(space, fine_mesh)
        return np.stack([E @ f.coeffs[: space.ns], E @ f.coeffs[space.ns :]], axis=1)
    if fine_mesh.n % space.mesh.n:
        raise NestingError(f"mesh n={space.mesh.n} is not nested in n={fine_mesh.n}")
    xy = MiniSpace(fine_mesh).quad.xy
    tri, bary = locate_points(space.mesh, xy)
    return np.einsum("pk,pk->p", bary, f.coeffs[space.mesh.triangles[tri]])


_OPS_CACHE: dict[int, AssembledOperators] = {}


def space_for(n: int) -> MiniSpace:
    return operators_for(n).space


def operators_for(space_or_n) -> AssembledOperators:
    """Cached operators for the structured mesh with ``n`` cells per side (or a given space)."""
    from .mesh import build_uniform_mesh

    if isinstance(space_or_n, MiniSpace):
        ops = _OPS_CACHE.get(space_or_n.mesh.n)
        if ops is not None and ops.space is space_or_n:
            return ops
        ops = assemble_operators(space_or_n)
        _OPS_CACHE.setdefault(space_or_n.mesh.n, ops)
        return ops
    n = int(space_or_n)
    if n not in _OPS_CACHE:
        _OPS_CACHE[n] = assemble_operators(MiniSpace(build_uniform_mesh(n)))
    return _OPS_CACHE[n]
