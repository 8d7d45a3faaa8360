"""The convolution operator K, its adjoint K*, and a second-kind Volterra solver.

K maps a control-time profile to a source-time profile,

    (Kv)(x,t) = ∫₀ᵗ σ(s) v(x, t−s) ds,

and its adjoint under the pairing (Kv, θ)_{H¹(0,τ;L²)} = (v, K*θ)_{L²(0,τ;L²)} is

    (K*θ)(x,t) = σ(0) ∂tθ(x,t) + ∫_t^τ [σ(s−t) θ(x,s) + σ′(s−t) ∂tθ(x,s)] ds.

solve_volterra inverts K*θ = η with θ(·,τ) = 0 by marching from τ down to 0,
treating the per-step slope as the unknown: backward Euler in the derivative,
trapezoid for the θ-memory, midpoint for the σ′-memory.  The slopes are kept
staggered (one per sub-interval) so that apply_Kstar evaluated on the solver
output reproduces η exactly at the marching nodes — the operator and the
solver discretize the same system.

Everything is spatially decoupled: fields are (time, point) arrays and the
points may be mesh nodes, observation nodes, or anything else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from parasource.forward import SigmaProfile, TimeGrid

__all__ = [
    "TimeSeriesField",
    "apply_K",
    "apply_Kstar",
    "solve_volterra",
    "l2_pairing",
    "h1_pairing",
    "stability_ratio",
]

_FIRST_KIND_FLOOR = 1e-12


# ===================================================================
# Container
# ===================================================================

@dataclass
class TimeSeriesField:
    """Scalar field sampled on the (0, τ) sub-grid of a global time grid.

    ``values[m]`` is the field at t_m for m = 0..N_τ; ``derivative`` (when
    present) is staggered: ``derivative[m]`` approximates ∂t on the interval
    (t_m, t_{m+1}), m = 0..N_τ−1.
    """

    values: np.ndarray
    grid: TimeGrid
    tau: float
    derivative: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("time-series field must be a (time, point) array")
        n_tau = self.grid.index_of(self.tau)
        if self.values.shape[0] != n_tau + 1:
            raise ValueError(
                f"field has {self.values.shape[0]} time rows, horizon tau={self.tau} needs {n_tau + 1}"
            )
        if self.derivative is not None:
            self.derivative = np.asarray(self.derivative, dtype=float)
            if self.derivative.shape != (n_tau, self.values.shape[1]):
                raise ValueError("staggered derivative shape mismatch")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1

    @property
    def n_points(self) -> int:
        return self.values.shape[1]

    def slopes(self) -> np.ndarray:
        """Staggered time derivative: stored if available, else differenced."""
        if self.derivative is not None:
            return self.derivative
        return np.diff(self.values, axis=0) / self.grid.dt


def _check_same_grid(a: TimeSeriesField, sigma: SigmaProfile) -> None:
    g, h = a.grid, sigma.grid
    if g.n_steps != h.n_steps or abs(g.T - h.T) > 1e-14 * max(1.0, g.T):
        raise ValueError("field and sigma profile live on different time grids")


def _sigma_prime_half(sigma: SigmaProfile) -> np.ndarray:
    """σ′ at half-grid offsets (j+1/2)dt, by linear interpolation."""
    d = sigma.derivative_samples
    return 0.5 * (d[:-1] + d[1:])


# ===================================================================
# Operators
# ===================================================================

def apply_K(v: TimeSeriesField, sigma: SigmaProfile) -> TimeSeriesField:
    """(Kv)(t_m) = ∫₀^{t_m} σ(s) v(t_m − s) ds by trapezoid; (Kv)(0) = 0."""
    _check_same_grid(v, sigma)
    N = v.n_steps
    dt = v.grid.dt
    out = np.zeros_like(v.values)
    s = sigma.samples
    for m in range(1, N + 1):
        w = np.full(m + 1, dt)
        w[0] = w[-1] = 0.5 * dt
        out[m] = (w * s[: m + 1]) @ v.values[m::-1]
    return TimeSeriesField(out, v.grid, v.tau)


def apply_Kstar(theta: TimeSeriesField, sigma: SigmaProfile) -> TimeSeriesField:
    """Adjoint-operator evaluation mirroring the solver's quadrature.

    At node m < N_τ the slope on (t_m, t_{m+1}) carries the σ(0)∂tθ term,
    the θ-memory is the trapezoid over nodes m..N_τ, and the σ′-memory the
    midpoint rule over the intervals m+1..N_τ; at m = N_τ only the σ(0)
    term survives.
    """
    _check_same_grid(theta, sigma)
    N = theta.n_steps
    dt = theta.grid.dt
    sig = sigma.samples
    d = theta.slopes()
    sdh = _sigma_prime_half(sigma)
    out = np.zeros_like(theta.values)
    sigma0 = sigma.sigma0
    for m in range(N):
        L = N - m
        w = np.full(L + 1, dt)
        w[0] = w[-1] = 0.5 * dt
        mem_theta = (w * sig[: L + 1]) @ theta.values[m:]
        mem_slope = (dt * sdh[:L]) @ d[m:]
        out[m] = sigma0 * d[m] + mem_theta + mem_slope
    out[N] = sigma0 * d[N - 1] if N >= 1 else 0.0
    return TimeSeriesField(out, theta.grid, theta.tau)


def solve_volterra(eta: TimeSeriesField, sigma: SigmaProfile) -> TimeSeriesField:
    """Solve K*θ = η on (0, τ) with θ(·, τ) = 0 by backward marching.

    At step m the equation is collocated at t_{m−1} with the slope
    d_m = (θ_m − θ_{m−1})/dt as the unknown; eliminating θ_{m−1} gives the
    per-step scalar coefficient

        c = σ(0)·(1 − dt²/2) + dt·σ′(dt/2),

    which stays away from zero in the second-kind regime σ(0) ≠ 0.
    """
    _check_same_grid(eta, sigma)
    sigma0 = sigma.sigma0
    if abs(sigma0) < _FIRST_KIND_FLOOR:
        raise ValueError("first-kind regime unsupported: sigma(0) is (numerically) zero")
    N = eta.n_steps
    if N < 1:
        raise ValueError("horizon must contain at least one time step")
    dt = eta.grid.dt
    sig = sigma.samples
    sdh = _sigma_prime_half(sigma)

    theta = np.zeros_like(eta.values)
    d = np.zeros((N, eta.n_points))
    c = sigma0 * (1.0 - 0.5 * dt * dt) + dt * sdh[0]
    for m in range(N, 0, -1):
        L = N - (m - 1)
        w = np.full(L + 1, dt)
        w[0] = w[-1] = 0.5 * dt
        known = (w[1:] * sig[1 : L + 1]) @ theta[m:]
        if m < N:
            known = known + (dt * sdh[1:L]) @ d[m:]
        rhs = eta.values[m - 1] - known - 0.5 * dt * sig[0] * theta[m]
        d[m - 1] = rhs / c
        theta[m - 1] = theta[m] - dt * d[m - 1]
    return TimeSeriesField(theta, eta.grid, eta.tau, derivative=d)


# ===================================================================
# Time-space pairings and the stability report
# ===================================================================

def _spatial_inner(M, a: np.ndarray, b: np.ndarray) -> float:
    if M is None:
        return float(a @ b)
    return float(a @ (M @ b))


def l2_pairing(u: TimeSeriesField, v: TimeSeriesField, M=None) -> float:
    """(u, v)_{L²(0,τ;L²)}: trapezoid in time, mass matrix M (or dot) in space."""
    N = u.n_steps
    dt = u.grid.dt
    w = np.full(N + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return sum(w[m] * _spatial_inner(M, u.values[m], v.values[m]) for m in range(N + 1))


def h1_pairing(u: TimeSeriesField, v: TimeSeriesField, M=None) -> float:
    """(u, v)_{H¹(0,τ;L²)}: the L² pairing plus the staggered-slope pairing."""
    du, dv = u.slopes(), v.slopes()
    dt = u.grid.dt
    deriv = sum(dt * _spatial_inner(M, du[m], dv[m]) for m in range(du.shape[0]))
    return l2_pairing(u, v, M) + deriv


def h1_norm(u: TimeSeriesField, M=None) -> float:
    return float(np.sqrt(max(h1_pairing(u, u, M), 0.0)))


def l2_norm(u: TimeSeriesField, M=None) -> float:
    return float(np.sqrt(max(l2_pairing(u, u, M), 0.0)))


def stability_ratio(theta: TimeSeriesField, eta: TimeSeriesField, M: sp.spmatrix | None = None) -> float:
    """Empirical constant ‖θ‖_{H¹(0,τ;L²)} / ‖η‖_{L²(0,τ;L²)} of the solve."""
    denom = l2_norm(eta, M)
    if denom == 0.0:
        return 0.0
    return h1_norm(theta, M) / denom
