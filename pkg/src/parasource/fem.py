"""P1 Lagrange assembly and sparse linear algebra for the solvers.

Mass, stiffness and weighted-mass matrices are integrated exactly for
piecewise-linear data (the highest polynomial degree any pipeline stage
produces), so quadrature order never appears as a hidden parameter.
Dirichlet conditions are imposed by symmetric row/column restriction to the
free (interior) nodes, which keeps every operator SPD and makes the discrete
adjoints used elsewhere exact transposes.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from parasource.meshing import Mesh, SubdomainMask

__all__ = [
    "SolverError",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_weighted_mass",
    "assemble_mass_on_elements",
    "restrict_matrix",
    "solve_spd",
    "mass_inner",
    "mass_norm",
]


class SolverError(RuntimeError):
    """Linear solver failed; carries the last residual for diagnosis."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


# ===================================================================
# Assembly
# ===================================================================

def _assemble(mesh: Mesh, element_matrices: np.ndarray) -> sp.csr_matrix:
    """Scatter per-element dense blocks into a CSR matrix."""
    elems = mesh.elements
    nloc = elems.shape[1]
    rows = np.repeat(elems, nloc, axis=1).ravel()
    cols = np.tile(elems, (1, nloc)).ravel()
    vals = element_matrices.reshape(mesh.element_count, -1).ravel()
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.node_count, mesh.node_count)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    """Mass matrix M with entries ∫ φ_i φ_j, exact for P1 products."""
    measures = mesh.element_measures()
    if mesh.dim == 1:
        base = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    else:
        base = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    blocks = measures[:, None, None] * base[None, :, :]
    return _assemble(mesh, blocks)


def assemble_mass_on_elements(mesh: Mesh, element_flags: np.ndarray) -> sp.csr_matrix:
    """Mass matrix restricted to a subset of elements (∫_O φ_i φ_j).

    Used for observation-domain inner products; ``element_flags`` normally
    comes from a :class:`~parasource.meshing.SubdomainMask`.
    """
    measures = mesh.element_measures() * np.asarray(element_flags, dtype=float)
    if mesh.dim == 1:
        base = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    else:
        base = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    blocks = measures[:, None, None] * base[None, :, :]
    return _assemble(mesh, blocks)


def assemble_stiffness(mesh: Mesh, nu: float) -> sp.csr_matrix:
    """Stiffness matrix with entries ν ∫ ∇φ_i · ∇φ_j."""
    if nu <= 0.0:
        raise ValueError(f"diffusion coefficient must be positive, got nu={nu}")
    if mesh.dim == 1:
        h = mesh.element_measures()
        base = np.array([[1.0, -1.0], [-1.0, 1.0]])
        blocks = (nu / h)[:, None, None] * base[None, :, :]
        return _assemble(mesh, blocks)

    p = mesh.nodes[mesh.elements]  # (E, 3, 2)
    area = mesh.element_measures()
    # gradient of φ_i is (b_i, c_i) / (2A) with b, c from the opposite edge
    b = p[:, [1, 2, 0], 1] - p[:, [2, 0, 1], 1]
    c = p[:, [2, 0, 1], 0] - p[:, [1, 2, 0], 0]
    blocks = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) * (
        nu / (4.0 * area)
    )[:, None, None]
    return _assemble(mesh, blocks)


def assemble_weighted_mass(mesh: Mesh, q: np.ndarray) -> sp.csr_matrix:
    """Weighted mass matrix ∫ q φ_i φ_j with nodal q interpolated P1.

    The cubic integrand is integrated exactly on every element.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (mesh.node_count,):
        raise ValueError("weight field does not live on this mesh")
    measures = mesh.element_measures()
    qe = q[mesh.elements]  # (E, nloc)

    if mesh.dim == 1:
        q0, q1 = qe[:, 0], qe[:, 1]
        h12 = measures / 12.0
        blocks = np.empty((mesh.element_count, 2, 2))
        blocks[:, 0, 0] = h12 * (3.0 * q0 + q1)
        blocks[:, 0, 1] = blocks[:, 1, 0] = h12 * (q0 + q1)
        blocks[:, 1, 1] = h12 * (q0 + 3.0 * q1)
        return _assemble(mesh, blocks)

    # exact ∫ φ_a φ_b φ_c over a triangle: A/10 (a=b=c), A/30 (two equal), A/60 (all distinct)
    a = measures
    blocks = np.empty((mesh.element_count, 3, 3))
    for i in range(3):
        for j in range(3):
            acc = np.zeros(mesh.element_count)
            for k in range(3):
                if i == j == k:
                    w = a / 10.0
                elif i == j or j == k or i == k:
                    w = a / 30.0
                else:
                    w = a / 60.0
                acc += qe[:, k] * w
            blocks[:, i, j] = acc
    return _assemble(mesh, blocks)


# ===================================================================
# Dirichlet handling and solves
# ===================================================================

def restrict_matrix(mat: sp.spmatrix, keep: np.ndarray) -> sp.csr_matrix:
    """Symmetric row/column restriction A[keep, keep] (Dirichlet elimination)."""
    return mat.tocsr()[keep][:, keep].tocsr()


def solve_spd(
    A: sp.spmatrix,
    b: np.ndarray,
    tol: float = 1e-10,
    max_iter: int | None = None,
    force_iterative: bool = False,
) -> np.ndarray:
    """Solve SPD ``A x = b`` with guaranteed residual ‖Ax−b‖₂ ≤ tol·‖b‖₂.

    Small systems go through a direct sparse factorization; larger ones use
    Jacobi-preconditioned conjugate gradients.  Non-convergence raises
    :class:`SolverError` with the achieved residual attached.
    """
    A = A.tocsr()
    b = np.asarray(b, dtype=float)
    n = A.shape[0]
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n)

    if n <= 600 and not force_iterative:
        x = spla.splu(A.tocsc()).solve(b)
        return x

    inv_diag = 1.0 / A.diagonal()
    x = np.zeros(n)
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    limit = max_iter if max_iter is not None else max(1000, 10 * n)
    for _ in range(limit):
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = float(np.linalg.norm(r))
        if res <= tol * bnorm:
            return x
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"CG did not reach tol={tol:g} within {limit} iterations", residual=float(np.linalg.norm(A @ x - b))
    )


def mass_inner(M: sp.spmatrix, u: np.ndarray, v: np.ndarray) -> float:
    """L² inner product (u, v) under the (possibly restricted) mass matrix."""
    return float(u @ (M @ v))


def mass_norm(M: sp.spmatrix, u: np.ndarray) -> float:
    return float(np.sqrt(max(mass_inner(M, u, u), 0.0)))
