"""Analytic eigenpairs, the non-self-adjoint mode basis, and mode-ODE coefficients.

On (0, π) with the lower-triangular 2×2 coupling [[0,0],[q,0]] the Dirichlet
Laplacian modes φ_k(x) = √(2/π)·sin(kx) are augmented by companions

    ψ_k = α_k φ_k − g_k,
    g_k(x) = (1/k) ∫₀ˣ sin(k(x−ζ)) (I_k − q(ζ)) φ_k(ζ) dζ,

with I_k = ∫ q φ_k² dx (the mean of q in mode k; this choice is what makes
g_k(π) = 0, hence ψ_k admissible) and α_k chosen so that (ψ_k, φ_k) = 0.
The four families

    Φ_{1,k} = (0, φ_k),   Φ_{2,k} = (φ_k, ψ_k),
    Φ*_{1,k} = (ψ_k, φ_k), Φ*_{2,k} = (φ_k, 0)

are then biorthogonal:  (Φ_{i,k}, Φ*_{j,l}) = δ_ij δ_kl.

The module also evaluates, for constant couplings, the fundamental matrix
exp(−(λI+Q)t), its σ-weighted integral M(t), and the scalar coefficient
functions used by the two reconstruction identities.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import expm

from parasource.forward import SigmaProfile
from parasource.meshing import Mesh

__all__ = [
    "ModeBasis",
    "laplace_eigenpair",
    "compute_Ik",
    "compute_psi_alpha",
    "build_mode_basis",
    "biorthogonality_matrix",
    "fundamental_matrix",
    "compute_M",
    "coeff_aQ",
    "coeff_aQ_folded",
    "decay_integrals",
    "coeff_aL_bL",
    "mode_ode_2x2",
    "export_mode_report",
]

# warn when a hypothesis coefficient gets this small; below HARD it is
# treated as a violation of the well-posedness hypothesis
_COEFF_WARN_BAND = 1e-6
_COEFF_HARD_FLOOR = 1e-10


# ===================================================================
# Eigenpairs
# ===================================================================

def _axis_bounds(mesh: Mesh, axis: int) -> tuple[float, float]:
    c = mesh.coords()[:, axis]
    return float(c.min()), float(c.max())


def laplace_eigenpair(mesh: Mesh, k, nu: float = 1.0):
    """Analytic Dirichlet eigenpair of −νΔ on an interval or axis-aligned rectangle.

    Parameters
    ----------
    mesh : Mesh
        Interval (dim 1) or rectangle (dim 2) mesh; the domain is inferred
        from the nodal bounding box.
    k : int or (int, int)
        Mode index (per axis in 2D), starting at 1.
    nu : float
        Diffusion coefficient; the returned eigenvalue includes it.

    Returns
    -------
    (lam, phi) : (float, ndarray)
        Eigenvalue and the L²-normalized eigenfunction sampled at the nodes.
    """
    if mesh.dim == 1:
        if not (isinstance(k, (int, np.integer)) and k >= 1):
            raise ValueError(f"mode index must be an integer >= 1, got {k!r}")
        a, b = _axis_bounds(mesh, 0)
        L = b - a
        x = mesh.coords()[:, 0]
        lam = nu * (k * np.pi / L) ** 2
        phi = np.sqrt(2.0 / L) * np.sin(k * np.pi * (x - a) / L)
        return float(lam), phi

    k1, k2 = k
    if not (k1 >= 1 and k2 >= 1):
        raise ValueError(f"mode indices must be >= 1, got {k!r}")
    ax, bx = _axis_bounds(mesh, 0)
    ay, by = _axis_bounds(mesh, 1)
    Lx, Ly = bx - ax, by - ay
    xy = mesh.coords()
    lam = nu * np.pi**2 * ((k1 / Lx) ** 2 + (k2 / Ly) ** 2)
    phi = (2.0 / np.sqrt(Lx * Ly)) * np.sin(k1 * np.pi * (xy[:, 0] - ax) / Lx) * np.sin(
        k2 * np.pi * (xy[:, 1] - ay) / Ly
    )
    return float(lam), phi


def _check_pi_grid(x: np.ndarray) -> None:
    if abs(x[0]) > 1e-9 or abs(x[-1] - np.pi) > 1e-9:
        raise ValueError("the companion-mode construction requires the domain (0, pi)")


def _phi_on(x: np.ndarray, k: int) -> np.ndarray:
    return np.sqrt(2.0 / np.pi) * np.sin(k * x)


def compute_Ik(q: np.ndarray, k: int, x: np.ndarray) -> float:
    """Mode-k mean I_k = ∫₀^π q φ_k² dx by trapezoid on the grid ``x``.

    This is the unique constant for which the companion integrand
    (I_k − q)φ_k produces g_k(π) = 0, i.e. an admissible ψ_k.
    """
    x = np.asarray(x, dtype=float)
    _check_pi_grid(x)
    phi = _phi_on(x, k)
    return float(np.trapezoid(q * phi * phi, x))


def compute_psi_alpha(q: np.ndarray, k: int, x: np.ndarray) -> tuple[np.ndarray, float]:
    """Companion mode ψ_k on the grid ``x`` and its centering constant α_k.

    The oscillatory kernel is split as sin(k(x−ζ)) = sin(kx)cos(kζ) −
    cos(kx)sin(kζ) so both inner integrals are plain cumulative trapezoids;
    α_k is the discrete projection (g_k, φ_k)/(φ_k, φ_k), which makes the
    grid-level orthogonality (ψ_k, φ_k) = 0 exact up to roundoff.
    """
    x = np.asarray(x, dtype=float)
    _check_pi_grid(x)
    phi = _phi_on(x, k)
    I_k = compute_Ik(q, k, x)
    r = (I_k - q) * phi
    cos_int = cumulative_trapezoid(np.cos(k * x) * r, x, initial=0.0)
    sin_int = cumulative_trapezoid(np.sin(k * x) * r, x, initial=0.0)
    g = (np.sin(k * x) * cos_int - np.cos(k * x) * sin_int) / k
    alpha = float(np.trapezoid(g * phi, x) / np.trapezoid(phi * phi, x))
    return alpha * phi - g, alpha


@dataclass(frozen=True)
class ModeBasis:
    """One mode of the (0, π) family: eigenpair plus companion data.

    ``phi_k``/``psi_k`` are sampled at the FEM mesh nodes; ``quad_x``,
    ``phi_quad``, ``psi_quad`` keep the fine quadrature-grid samples for
    high-accuracy pairings.
    """

    k: int
    lambda_k: float
    phi_k: np.ndarray
    psi_k: np.ndarray | None
    alpha_k: float
    I_k: float
    quad_x: np.ndarray | None = None
    phi_quad: np.ndarray | None = None
    psi_quad: np.ndarray | None = None


def build_mode_basis(
    mesh: Mesh,
    q,
    k_max: int,
    nu: float = 1.0,
    n_quad: int = 8192,
) -> list[ModeBasis]:
    """Modes 1..k_max on ``mesh``; with a weight q the (0, π) companions too.

    ``q`` may be None (pure Laplacian modes, any interval), a callable of x,
    or a nodal field on ``mesh``.  Companion quantities are computed on a
    uniform ``n_quad``-point grid and interpolated back to the mesh nodes.
    """
    if mesh.dim != 1:
        raise ValueError("mode bases are built on interval meshes")
    modes: list[ModeBasis] = []
    if q is None:
        for k in range(1, k_max + 1):
            lam, phi = laplace_eigenpair(mesh, k, nu)
            modes.append(ModeBasis(k, lam, phi, None, 0.0, 0.0))
        return modes

    xm = mesh.coords()[:, 0]
    _check_pi_grid(xm)
    xq = np.linspace(0.0, np.pi, n_quad)
    if callable(q):
        qq = np.asarray([float(q(xi)) for xi in xq])
    else:
        q = np.asarray(q, dtype=float)
        if q.shape != (mesh.node_count,):
            raise ValueError("nodal weight does not live on this mesh")
        qq = np.interp(xq, xm, q)
    for k in range(1, k_max + 1):
        lam, phi = laplace_eigenpair(mesh, k, nu)
        psi_q, alpha = compute_psi_alpha(qq, k, xq)
        I_k = compute_Ik(qq, k, xq)
        psi = np.interp(xm, xq, psi_q)
        modes.append(ModeBasis(k, lam, phi, psi, alpha, I_k, xq, _phi_on(xq, k), psi_q))
    return modes


def biorthogonality_matrix(modes: list[ModeBasis]) -> np.ndarray:
    """Gram matrix of {Φ_{i,k}} against {Φ*_{j,l}} on the quadrature grid.

    Rows/columns are ordered (i=1, k=1..K), (i=2, k=1..K); the exact value
    is the 2K×2K identity.
    """
    K = len(modes)
    if K == 0 or modes[0].quad_x is None:
        raise ValueError("biorthogonality requires companion modes with quadrature data")
    x = modes[0].quad_x
    G = np.zeros((2 * K, 2 * K))
    for a, ma in enumerate(modes):
        F1 = (np.zeros_like(ma.phi_quad), ma.phi_quad)   # Φ_{1,k}
        F2 = (ma.phi_quad, ma.psi_quad)                  # Φ_{2,k}
        for b, mb in enumerate(modes):
            G1 = (mb.psi_quad, mb.phi_quad)              # Φ*_{1,l}
            G2 = (mb.phi_quad, np.zeros_like(mb.phi_quad))  # Φ*_{2,l}
            G[a, b] = np.trapezoid(F1[0] * G1[0] + F1[1] * G1[1], x)
            G[a, K + b] = np.trapezoid(F1[0] * G2[0] + F1[1] * G2[1], x)
            G[K + a, b] = np.trapezoid(F2[0] * G1[0] + F2[1] * G1[1], x)
            G[K + a, K + b] = np.trapezoid(F2[0] * G2[0] + F2[1] * G2[1], x)
    return G


# ===================================================================
# Constant-coupling mode machinery
# ===================================================================

def fundamental_matrix(Q_const: np.ndarray, lambda_k: float, t: float) -> np.ndarray:
    """exp(−(λ_k I + Q)t) for a constant coupling matrix Q."""
    Q = np.asarray(Q_const, dtype=float)
    n = Q.shape[0]
    return expm(-(lambda_k * np.eye(n) + Q) * t)


def compute_M(Q_const: np.ndarray, lambda_k: float, sigma: SigmaProfile, t: float) -> np.ndarray:
    """M(t) = ∫₀ᵗ exp(−(λI+Q)(t−s)) σ(s) ds by trapezoid on σ's grid."""
    Q = np.asarray(Q_const, dtype=float)
    idx = sigma.grid.index_of(t)
    n = Q.shape[0]
    if idx == 0:
        return np.zeros((n, n))
    s = sigma.grid.times()[: idx + 1]
    w = np.full(idx + 1, sigma.grid.dt)
    w[0] = w[-1] = 0.5 * sigma.grid.dt
    M = np.zeros((n, n))
    for j in range(idx + 1):
        M += w[j] * sigma.samples[j] * fundamental_matrix(Q, lambda_k, t - s[j])
    return M


def _flag_small(a: np.ndarray, what: str) -> None:
    small = np.abs(a).min()
    if small < _COEFF_HARD_FLOOR:
        warnings.warn(f"{what} has a vanishing entry ({small:.3e}); hypothesis violated", stacklevel=3)
    elif small < _COEFF_WARN_BAND:
        warnings.warn(f"{what} has a near-vanishing entry ({small:.3e})", stacklevel=3)


def coeff_aQ(Q_const: np.ndarray, lambda_k: float, sigma: SigmaProfile, T: float) -> np.ndarray:
    """Hypothesis coefficients a_j = 1 − (λ_k/σ(T)) Σᵢ m_ij(T), j = 1..n."""
    sT = float(sigma.samples[sigma.grid.index_of(T)])
    if sT == 0.0:
        raise ValueError("sigma(T) must be nonzero")
    M = compute_M(Q_const, lambda_k, sigma, T)
    a = 1.0 - lambda_k * M.sum(axis=0) / sT
    _flag_small(a, "a^Q coefficient vector")
    return a


def coeff_aQ_folded(Q_const: np.ndarray, lambda_k: float, sigma: SigmaProfile, T: float) -> np.ndarray:
    """Coupling-folded coefficients ã_j = (1ᵗ M′(T))_j / σ(T).

    Equals a_j − (1ᵗ Q M(T))_j/σ(T): the zero-order coupling term of the
    reconstruction identity, which is linear in the unknown coefficients,
    is folded into the left-hand side instead of being treated as data.
    """
    Q = np.asarray(Q_const, dtype=float)
    sT = float(sigma.samples[sigma.grid.index_of(T)])
    if sT == 0.0:
        raise ValueError("sigma(T) must be nonzero")
    M = compute_M(Q, lambda_k, sigma, T)
    n = Q.shape[0]
    Mprime = sT * np.eye(n) - (lambda_k * np.eye(n) + Q) @ M
    a = Mprime.sum(axis=0) / sT
    _flag_small(a, "folded a^Q coefficient vector")
    return a


# ===================================================================
# Scalar decay integrals and the 2×2 variable-coupling coefficients
# ===================================================================

def decay_integrals(k: int, sigma: SigmaProfile, T: float) -> tuple[float, float, float]:
    """(E, D, D_kernel) with E = ∫₀ᵀ e^{−k²(T−s)} σ(s) ds and

    D the iterated integral ∫₀ᵀ e^{−k²(T−s)} (∫₀ˢ e^{−k²(s−τ)} σ(τ) dτ) ds,
    D_kernel its single-integral form ∫₀ᵀ (T−s) e^{−k²(T−s)} σ(s) ds.
    The last two are mathematically equal; both are returned so the
    agreement can be asserted.
    """
    idx = sigma.grid.index_of(T)
    s = sigma.grid.times()[: idx + 1]
    sig = sigma.samples[: idx + 1]
    if idx == 0:
        return 0.0, 0.0, 0.0
    lam = float(k) ** 2
    E = float(np.trapezoid(np.exp(-lam * (T - s)) * sig, s))
    # inner(s_j) = ∫₀^{s_j} e^{−λ(s_j−τ)} σ(τ) dτ = e^{λ(T−s_j)} ∫₀^{s_j} σ(τ) e^{λ(τ−T)} dτ;
    # the shifted integrand stays ≤ max σ (no overflow) and all terms are
    # positive, so the rescaling costs no relative accuracy
    shifted = cumulative_trapezoid(sig * np.exp(lam * (s - T)), s, initial=0.0)
    inner = np.exp(lam * (T - s)) * shifted
    D = float(np.trapezoid(np.exp(-lam * (T - s)) * inner, s))
    D_kernel = float(np.trapezoid((T - s) * np.exp(-lam * (T - s)) * sig, s))
    return E, D, D_kernel


def coeff_aL_bL(I_k: float, k: int, sigma: SigmaProfile, T: float) -> tuple[float, float]:
    """Identity coefficients for the 2×2 variable-coupling mode k:

    a_k = σ(T) − k²·E(T),   b_k = −I_k·(E(T) − k²·D(T)).
    """
    sT = float(sigma.samples[sigma.grid.index_of(T)])
    if sT == 0.0:
        raise ValueError("sigma(T) must be nonzero")
    E, D, _ = decay_integrals(k, sigma, T)
    a = sT - float(k) ** 2 * E
    b = -I_k * (E - float(k) ** 2 * D)
    _flag_small(np.array([a]), "a^L coefficient")
    return a, b


def mode_ode_2x2(
    I_k: float,
    k: int,
    sigma: SigmaProfile,
    f1_phi: float,
    f1_psi: float,
    f2_phi: float,
    t: float,
) -> tuple[float, float]:
    """Closed-form mode projections of the 2×2 variable-coupling flow.

    β_k(t) = (y₁(t), φ_k) = f₁^φ E_k(t) and α_k(t) = (y₁, ψ_k) + (y₂, φ_k)
    = (f₁^ψ + f₂^φ) E_k(t) − I_k f₁^φ D_k(t).
    """
    E, D, _ = decay_integrals(k, sigma, t)
    beta = f1_phi * E
    alpha = (f1_psi + f2_phi) * E - I_k * f1_phi * D
    return alpha, beta


# ===================================================================
# Reporting
# ===================================================================

def export_mode_report(modes: list[ModeBasis], path, a_rows=None, b_values=None) -> None:
    """CSV audit table: k, lambda, I_k, alpha_k, then any coefficient columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n_a = len(a_rows[0]) if a_rows else 0
        header = ["k", "lambda", "I_k", "alpha_k"] + [f"a{j + 1}" for j in range(n_a)]
        if b_values is not None:
            header.append("b")
        writer.writerow(header)
        for i, m in enumerate(modes):
            row = [m.k, f"{m.lambda_k:.12g}", f"{m.I_k:.12g}", f"{m.alpha_k:.12g}"]
            if a_rows:
                row += [f"{v:.12g}" for v in a_rows[i]]
            if b_values is not None:
                row.append(f"{b_values[i]:.12g}")
            writer.writerow(row)
