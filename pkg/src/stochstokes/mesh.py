"""Uniform nested triangulations of the unit square.

Each of the ``n x n`` cells is cut along its lower-left to upper-right
diagonal, so the mesh at ``n`` is nested in the mesh at ``2n``.  Cell
``(i, j)`` (column ``i``, row ``j``) owns triangles ``2*(j*n + i)`` (lower,
below the diagonal) and ``2*(j*n + i) + 1`` (upper).  Vertex ``(i, j)`` has
index ``j*(n + 1) + i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DOMAIN_TOL = 1e-12


class DomainError(ValueError):
    """A point lies outside the unit square."""


@dataclass(frozen=True, eq=False)
class Mesh:
    n: int
    vertices: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)
    level: int = 0

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def edges(self) -> set[tuple[int, int]]:
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return {tuple(x) for x in e.tolist()}

    def is_nested_in(self, fine: "Mesh") -> bool:
        return fine.n % self.n == 0

    def refine(self) -> "Mesh":
        return build_uniform_mesh(2 * self.n, level=self.level + 1)

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return locate_points(self, points)


def build_uniform_mesh(n: int, level: int = 0) -> Mesh:
    """Structured triangulation of [0,1]^2 with ``n`` cells per side."""
    if int(n) != n or n < 1:
        raise ValueError(f"mesh subdivisions must be a positive integer, got {n!r}")
    n = int(n)
    x = np.arange(n + 1) / n
    X, Y = np.meshgrid(x, x, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + (n + 1)
    v11 = v01 + 1
    tri = np.empty((2 * n * n, 3), dtype=np.int64)
    tri[0::2] = np.column_stack([v00, v10, v11])
    tri[1::2] = np.column_stack([v00, v11, v01])
    vertices.setflags(write=False)
    tri.setflags(write=False)
    return Mesh(n=n, vertices=vertices, triangles=tri, level=level)


def _barycentric(mesh: Mesh, tri: np.ndarray, p: np.ndarray) -> np.ndarray:
    v = mesh.vertices[mesh.triangles[tri]]
    a, b, c = v[:, 0], v[:, 1], v[:, 2]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    d = p - a
    l2 = (d[:, 0] * (c[:, 1] - a[:, 1]) - d[:, 1] * (c[:, 0] - a[:, 0])) / det
    l3 = ((b[:, 0] - a[:, 0]) * d[:, 1] - (b[:, 1] - a[:, 1]) * d[:, 0]) / det
    return np.column_stack([1.0 - l2 - l3, l2, l3])


def locate_points(mesh: Mesh, points) -> tuple[np.ndarray, np.ndarray]:
    """Containing triangle and barycentric coordinates for each point.

    Points on shared edges or vertices go to the containing triangle with the
    smallest index.  Only the (at most four) cells touching the point's grid
    cell are inspected.

    Returns
    -------
    tri : (m,) int array
    bary : (m, 3) array, nonnegative, rows sum to one
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if p.shape[-1] != 2:
        raise ValueError("points must have shape (m, 2)")
    bad = np.any((p < -DOMAIN_TOL) | (p > 1.0 + DOMAIN_TOL), axis=1)
    if np.any(bad):
        raise DomainError(f"point {p[bad][0].tolist()} outside [0,1]^2")
    p = np.clip(p, 0.0, 1.0)
    n = mesh.n
    m = p.shape[0]
    s = p * n
    i0 = np.minimum(np.floor(s[:, 0]).astype(np.int64), n - 1)
    j0 = np.minimum(np.floor(s[:, 1]).astype(np.int64), n - 1)

    best_tri = np.full(m, np.iinfo(np.int64).max)
    best_bary = np.zeros((m, 3))
    # candidates in increasing triangle index order
    for dj in (-1, 0):
        for di in (-1, 0):
            ci = i0 + di
            cj = j0 + dj
            ok = (ci >= 0) & (cj >= 0)
            cell = np.where(ok, cj * n + ci, 0)
            for half in (0, 1):
                t = 2 * cell + half
                bary = _barycentric(mesh, t, p)
                inside = ok & np.all(bary >= -1e-13, axis=1) & (t < best_tri)
                best_tri = np.where(inside, t, best_tri)
                best_bary = np.where(inside[:, None], bary, best_bary)
    best_bary = np.clip(best_bary, 0.0, None)
    best_bary /= best_bary.sum(axis=1, keepdims=True)
    return best_tri, best_bary


def locate_point(mesh: Mesh, p) -> tuple[int, np.ndarray]:
    tri, bary = locate_points(mesh, np.asarray(p, dtype=float).reshape(1, 2))
    return int(tri[0]), bary[0]
