"""Divergence-form elliptic solves ``-div(a grad u) = f + div g`` on structured grids.

The operator is assembled edge by edge, ``K = sum_e a_e / h^2 (1_p - 1_q)(1_p - 1_q)^T``,
so it is symmetric positive semidefinite for any positive edge weights.
Dirichlet nodes are eliminated; pure periodic/Neumann problems are pinned at
one node and returned with zero mean.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pyamg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import grid as G

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10


class SolverError(RuntimeError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


@dataclass(frozen=True)
class BCSpec:
    """Face conditions on the non-periodic axes.

    ``faces[axis] = (low, high)`` with entries ``"dirichlet"`` or ``"neumann"``
    (zero total flux). Periodic axes of the grid take no entry. Dirichlet
    values are read from the node array passed to :func:`solve`.
    """

    faces: dict = field(default_factory=dict)

    def validate(self, grid):
        for k in range(grid.dim):
            if grid.periodic[k]:
                if k in self.faces:
                    raise ValueError(f"axis {k} is periodic; no face condition allowed")
            else:
                low, high = self.faces.get(k, (None, None))
                for kind in (low, high):
                    if kind not in ("dirichlet", "neumann"):
                        raise ValueError(f"axis {k} needs dirichlet/neumann faces, got {kind!r}")

    def dirichlet_mask(self, grid):
        self.validate(grid)
        mask = np.zeros(grid.shape, dtype=bool)
        for k, (low, high) in self.faces.items():
            sl = [slice(None)] * grid.dim
            if low == "dirichlet":
                sl[k] = 0
                mask[tuple(sl)] = True
            if high == "dirichlet":
                sl[k] = -1
                mask[tuple(sl)] = True
        return mask


PERIODIC = BCSpec()


def assemble(grid, coef=None):
    """Sparse matrix of ``-div(coef grad .)`` over all nodes (no BC elimination).

    ``coef`` is a list of per-direction edge weights (``None`` for the Laplacian).
    """
    n = int(np.prod(grid.shape))
    idx = np.arange(n).reshape(grid.shape)
    rows, cols, vals = [], [], []
    h2 = grid.spacing**2
    for k in range(grid.dim):
        nbr = np.roll(idx, -1, axis=k)
        w = np.ones(grid.shape) if coef is None else np.asarray(coef[k], dtype=float)
        keep = G.valid_mask(grid, G.edge_offset(k, grid.dim))
        p, q, a = idx[keep], nbr[keep], w[keep] / h2
        rows += [p, q, p, q]
        cols += [p, q, q, p]
        vals += [a, a, -a, -a]
    K = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return K.tocsr()


def apply(grid, coef, u):
    """Matrix-free ``-div(coef grad u)`` at every node."""
    du = G.grad(u, grid)
    if coef is not None:
        du = [coef[k] * du[k] for k in range(grid.dim)]
    return -G.div(du, grid)


def rhs_field(grid, f=None, g=None):
    b = np.zeros(grid.shape) if f is None else np.array(f, dtype=float)
    if g is not None:
        b = b + G.div(g, grid)
    return b


class Operator:
    """Reusable factorisation/hierarchy of one operator with one BC layout."""

    def __init__(self, grid, coef=None, bc=PERIODIC, method="amg"):
        self.grid = grid
        self.coef = coef
        self.bc = bc
        self.method = method
        self.fixed = bc.dirichlet_mask(grid)
        self.singular = not self.fixed.any()
        free = ~self.fixed.ravel()
        if self.singular:
            free[0] = False
        self.free = free
        K = assemble(grid, coef)
        self.K = K
        self.A = K[free][:, free].tocsr()
        self.K_fd = K[free][:, ~free].tocsr()
        self._ml = None
        self._lu = None

    def _prepare(self):
        if self.method == "amg" and self._ml is None:
            # "local" weighting avoids pyamg's randomised spectral-radius estimate,
            # which would make repeated solves differ in the last bits
            self._ml = pyamg.smoothed_aggregation_solver(self.A, symmetry="hermitian",
                                                         smooth=("jacobi", {"weighting": "local"}))
        elif self.method == "direct" and self._lu is None:
            self._lu = spla.splu(self.A.tocsc())

    def solve(self, f=None, g=None, boundary=None, tol=DEFAULT_TOL, maxiter=500):
        """Return the node solution; ``boundary`` supplies Dirichlet values."""
        if not (DEFAULT_TOL * 1e-4 <= tol <= 1e-4):
            raise ValueError("tol must lie in [1e-14, 1e-4]")
        grid = self.grid
        b_full = rhs_field(grid, f, g).ravel()
        if self.singular:
            total = b_full.sum()
            scale = np.abs(b_full).sum() + 1e-300
            if abs(total) > 1e-9 * scale:
                raise SolverError(f"incompatible right-hand side (sum {total:.3e}) for a singular problem")
        u = np.zeros(b_full.size)
        if boundary is not None and not self.singular:
            u[~self.free] = np.asarray(boundary, float).ravel()[~self.free]
        b = b_full[self.free] - self.K_fd @ u[~self.free]
        nb = np.linalg.norm(b)
        if nb == 0:
            x = np.zeros_like(b)
        else:
            x = self._solve_reduced(b, nb, tol, maxiter)
        u[self.free] = x
        u = u.reshape(grid.shape)
        if self.singular:
            u -= u.mean()
        return u

    def _solve_reduced(self, b, nb, tol, maxiter):
        self._prepare()
        history = []
        if self.method == "direct":
            x = self._lu.solve(b)
            for _ in range(3):
                r = b - self.A @ x
                history.append(np.linalg.norm(r) / nb)
                if history[-1] <= tol:
                    break
                x = x + self._lu.solve(r)
        elif self.method == "amg":
            x = self._ml.solve(b, tol=tol * 0.5, accel="cg", maxiter=maxiter, residuals=history)
            history = [h / nb for h in history]
        elif self.method == "cg":
            dinv = 1.0 / self.A.diagonal()
            M = spla.LinearOperator(self.A.shape, matvec=lambda r: dinv * r)
            x, _ = spla.cg(self.A, b, rtol=tol * 0.5, maxiter=maxiter * 20, M=M,
                           callback=lambda xk: history.append(np.linalg.norm(b - self.A @ xk) / nb))
        else:
            raise ValueError(f"unknown method {self.method!r}")
        rel = np.linalg.norm(b - self.A @ x) / nb
        if rel > tol:
            raise SolverError(f"{self.method} stalled at relative residual {rel:.3e}", history)
        log.debug("%s solve: %d its, rel residual %.2e", self.method, len(history), rel)
        return x


def solve(grid, coef, bc=PERIODIC, f=None, g=None, boundary=None, tol=DEFAULT_TOL, method="amg"):
    """One-shot solve of ``-div(coef grad u) = f + div g``.

    A zero right-hand side with zero Dirichlet data returns zeros without
    iterating.
    """
    return Operator(grid, coef, bc, method).solve(f, g, boundary, tol)


def residual(grid, coef, bc, u, f=None, g=None, relative=False):
    """Euclidean norm of ``-div(coef grad u) - f - div g`` over the non-Dirichlet nodes."""
    mask = ~bc.dirichlet_mask(grid)
    b = rhs_field(grid, f, g)
    r = (apply(grid, coef, u) - b)[mask]
    val = float(np.linalg.norm(r))
    if relative:
        nb = float(np.linalg.norm(b[mask]))
        return val / nb if nb > 0 else val
    return val
