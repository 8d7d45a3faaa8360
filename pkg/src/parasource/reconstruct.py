"""Recovery of spectral source coefficients from last-component observations.

The forward flow maps an unknown spatial source F = (f_1, …, f_n) to the
trajectory Y with Y(0) = 0 and separated time profile σ(t).  Observing only
the last component y_n on a patch O over a time window, each Dirichlet mode
k yields one scalar identity

    Σ_j a_j(τ) (f_j, φ_k)  =  C_1 + C_2 (+ C_3),

where the right-hand side is computable from y_n paired against the
time-convolution transforms θ^{(s)} of a null control, and the coefficient
row a_j(τ) comes from the mode ODE (``spectral.coeff_aQ_folded`` /
``spectral.coeff_aL_bL``).  Collecting the identity over several horizons τ
separates the per-component coefficients; summing modes synthesizes the
source fields.

Two regimes are covered:

* constant n×n coupling on any interval: unknowns (f_1^k, …, f_n^k) per mode;
* 2×2 variable lower-triangular coupling on (0, π): unknowns (X_k, f_1^{φ_k})
  with X_k = f_1^{φ_k} + f_1^{ψ_k} + f_2^{φ_k}, synthesized through the
  companion family (φ_k, ψ_k).

Full-state "global" evaluations of the same identities are provided as oracle
paths for validation against the measurement-only route.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from parasource import fem
from parasource.control import ControlFunction
from parasource.forward import CouplingMatrix, FieldSeries, SigmaProfile, TimeGrid
from parasource.meshing import Mesh, SubdomainMask
from parasource.spectral import ModeBasis, laplace_eigenpair
from parasource.volterra import TimeSeriesField, h1_pairing, solve_volterra

__all__ = [
    "MeasurementSet",
    "HorizonFamily",
    "CoefficientEstimate",
    "SynthesisResult",
    "theta_family_from_controls",
    "suggest_horizons",
    "reconstruct_global_constQ",
    "reconstruct_global_2x2_variable",
    "reconstruct_local_constQ",
    "reconstruct_local_2x2_variable",
    "separate_coefficients",
    "synthesize_source",
    "export_reconstruction_csv",
    "export_source_csv",
]

_FIRST_KIND_FLOOR = 1e-12
_COND_CAP = 1e8


# ===================================================================
# Measurement container
# ===================================================================

@dataclass(frozen=True)
class MeasurementSet:
    """Last-component observations on the patch O.

    Parameters
    ----------
    y_last:
        ``(n_steps + 1, n_obs)`` samples of y_n at the observation nodes.
    dt_y_last:
        Backward differences of ``y_last``; row ``m >= 1`` must equal
        ``(y_last[m] - y_last[m-1]) / dt`` exactly and row 0 is zero.
        Pass ``None`` to have them computed.
    node_ids:
        Global mesh indices of the observation nodes (the mask's nodes).
    mesh, grid, mask:
        Discretization the observations live on.
    terminal:
        Optional full-state snapshot ``(n, node_count)`` at the final time,
        used only by the global oracle paths.
    snr:
        Signal-to-noise ratio of an applied perturbation, if any.
    """

    y_last: np.ndarray
    dt_y_last: np.ndarray | None
    node_ids: np.ndarray
    mesh: Mesh
    grid: TimeGrid
    mask: SubdomainMask
    terminal: np.ndarray | None = None
    snr: float | None = None

    def __post_init__(self) -> None:
        y = np.asarray(self.y_last, dtype=float)
        ids = np.asarray(self.node_ids, dtype=int)
        object.__setattr__(self, "y_last", y)
        object.__setattr__(self, "node_ids", ids)
        if y.ndim != 2 or y.shape != (self.grid.n_steps + 1, ids.size):
            raise ValueError(
                f"measurements must be ({self.grid.n_steps + 1}, {ids.size}), got {y.shape}"
            )
        diffs = np.diff(y, axis=0) / self.grid.dt
        if self.dt_y_last is None:
            dty = np.vstack([np.zeros((1, ids.size)), diffs])
        else:
            dty = np.asarray(self.dt_y_last, dtype=float)
            if dty.shape != y.shape:
                raise ValueError("time-derivative samples must match the measurement shape")
            scale = max(1.0, float(np.abs(diffs).max(initial=0.0)))
            if np.abs(dty[1:] - diffs).max(initial=0.0) > 1e-10 * scale or np.any(dty[0]):
                raise ValueError("dt_y_last must hold exact backward differences (row 0 zero)")
        object.__setattr__(self, "dt_y_last", dty)

    @staticmethod
    def from_series(
        series: FieldSeries,
        mask: SubdomainMask,
        keep_terminal: bool = False,
        component: int | None = None,
    ) -> "MeasurementSet":
        """Sample one component of a trajectory on the mask's nodes.

        ``component`` defaults to the last one (the observation channel of
        the coefficient formulas); the optimizer passes explicit indices to
        observe several components at once.
        """
        if component is None:
            component = series.n_components - 1
        if not 0 <= component < series.n_components:
            raise ValueError(f"component {component} outside 0..{series.n_components - 1}")
        ids = mask.node_indices
        y = series.component(component)[:, ids].copy()
        terminal = series.snapshot(series.grid.n_steps).copy() if keep_terminal else None
        return MeasurementSet(y, None, ids, series.mesh, series.grid, mask, terminal)

    @property
    def n_obs(self) -> int:
        return self.node_ids.size

    def window(self, tau: float) -> TimeSeriesField:
        """Observations restricted to (0, τ), with the stored derivative rows."""
        idx = self.grid.index_of(tau)
        if idx < 1:
            raise ValueError("observation window must contain at least one time step")
        return TimeSeriesField(
            self.y_last[: idx + 1],
            self.grid,
            tau,
            derivative=self.dt_y_last[1 : idx + 1],
        )

    def with_noise(self, rng: np.random.Generator, snr: float) -> "MeasurementSet":
        """Gaussian perturbation with std = rms(y)/snr; derivatives recomputed."""
        if snr <= 0.0:
            raise ValueError("signal-to-noise ratio must be positive")
        rms = float(np.sqrt(np.mean(self.y_last**2)))
        noisy = self.y_last + rng.normal(0.0, rms / snr, size=self.y_last.shape)
        return MeasurementSet(
            noisy, None, self.node_ids, self.mesh, self.grid, self.mask,
            terminal=self.terminal, snr=float(snr),
        )


# ===================================================================
# Horizon families of transformed controls
# ===================================================================

@dataclass(frozen=True)
class HorizonFamily:
    """Transforms θ^{(s)} indexed by ascending horizons s, the last being
    the reconstruction window."""

    fields: tuple[TimeSeriesField, ...]

    def __post_init__(self) -> None:
        if not self.fields:
            raise ValueError("horizon family must contain at least one field")
        taus = [f.tau for f in self.fields]
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError("horizons must be strictly increasing")
        pts = {f.n_points for f in self.fields}
        if len(pts) != 1:
            raise ValueError("family fields live on different observation sets")

    @property
    def horizons(self) -> tuple[float, ...]:
        return tuple(f.tau for f in self.fields)

    @property
    def final(self) -> TimeSeriesField:
        return self.fields[-1]


def _as_family(theta) -> HorizonFamily:
    if isinstance(theta, HorizonFamily):
        return theta
    if isinstance(theta, TimeSeriesField):
        return HorizonFamily((theta,))
    raise TypeError("expected a TimeSeriesField or a HorizonFamily")


def theta_family_from_controls(
    controls: Sequence[ControlFunction],
    sigma: SigmaProfile,
    mask: SubdomainMask | None = None,
) -> HorizonFamily:
    """Solve K*θ = u_n|_O for each control and collect θ^{(s)} by horizon.

    The controls must share mesh and grid; they are sorted by horizon.
    The control's own rectangle-rule convention (value rows 0..N_τ−1, zero
    at τ) matches the transform's terminal condition.

    ``mask`` selects the observation node set the family is sampled on
    (default: the controls' own mask).  Passing the full observation patch
    while the controls were solved on a strictly interior sub-mask keeps
    the measured pairing honest: nodal basis functions on the patch edge
    reach one element outside it, where the state is unmeasured, so
    controls are best supported one ring inside (see ``erode_mask``).  The
    control must vanish identically outside the requested node set.
    """
    if not controls:
        raise ValueError("need at least one control")
    ordered = sorted(controls, key=lambda u: u.tau)
    base = ordered[0]
    obs = base.mask if mask is None else mask
    ids = obs.node_indices
    fields = []
    for u in ordered:
        if u.grid.n_steps != base.grid.n_steps or abs(u.grid.T - base.grid.T) > 1e-12:
            raise ValueError("controls live on different time grids")
        if u.values.shape[1] != obs.node_flags.shape[0]:
            raise ValueError("control and mask sized for different meshes")
        if np.any(u.values[:, ~obs.node_flags]):
            raise ValueError(
                "control is nonzero outside the observation node set; "
                "solve it on a (sub)mask of the observation patch"
            )
        eta = TimeSeriesField(u.values[: u.tau_index + 1][:, ids], u.grid, u.tau)
        fields.append(solve_volterra(eta, sigma))
    return HorizonFamily(tuple(fields))


def suggest_horizons(
    lambda_k: float,
    grid: TimeGrid,
    scales: Sequence[float] = (1.0, 2.0),
    min_steps: int = 8,
) -> tuple[float, ...]:
    """Grid-aligned horizons ~ scale/λ_k, clipped to [min_steps·dt, T].

    Fast modes decay as e^{−λ_k s}, so useful windows shrink like 1/λ_k;
    the clip keeps enough time steps for the control stage to resolve.
    Returned horizons are strictly increasing.
    """
    if lambda_k <= 0.0:
        raise ValueError("decay rate must be positive")
    dt, N = grid.dt, grid.n_steps
    steps: list[int] = []
    for s in sorted(scales):
        m = int(round(s / (lambda_k * dt)))
        m = max(m, min_steps, steps[-1] + 1 if steps else min_steps)
        steps.append(min(m, N))
    if len(set(steps)) != len(steps):
        raise ValueError("grid too coarse to separate the requested horizons")
    return tuple(m * dt for m in steps)


# ===================================================================
# Coefficient estimates
# ===================================================================

@dataclass(frozen=True)
class CoefficientEstimate:
    """One mode-k reconstruction identity, optionally separated.

    ``combined_value`` is the measured right-hand side C_1 + C_2 (+ C_3);
    ``lhs_coefficients`` is the coefficient row it equals when applied to
    the unknown mode coefficients (quadrature-endpoint corrections already
    folded in).  After :func:`separate_coefficients` the per-component
    values, the condition number of the horizon system, and its residual
    are attached.
    """

    k: int
    combined_value: float
    rhs_terms: tuple[float, ...]
    lhs_coefficients: np.ndarray
    window: float
    kind: str
    component_values: np.ndarray | None = None
    condition_number: float | None = None
    residual: float = 0.0
    separation_failed: bool = False
    suppressed: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "lhs_coefficients", np.asarray(self.lhs_coefficients, dtype=float)
        )
        if self.kind not in ("constQ", "riesz2x2"):
            raise ValueError(f"unknown estimate kind {self.kind!r}")


# ===================================================================
# Shared quadrature helpers
# ===================================================================

def _trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    """Composite-trapezoid weights on an increasing (possibly uneven) grid."""
    w = np.zeros(nodes.size)
    gaps = np.diff(nodes)
    w[:-1] += 0.5 * gaps
    w[1:] += 0.5 * gaps
    return w


def _sigma_at(sigma: SigmaProfile, t: float) -> tuple[float, float]:
    idx = sigma.grid.index_of(t)
    return float(sigma.samples[idx]), float(sigma.derivative_samples[idx])


def _sigma_is_constant(sigma: SigmaProfile, up_to: float) -> bool:
    idx = sigma.grid.index_of(up_to)
    scale = max(1.0, float(np.abs(sigma.samples).max()))
    return float(np.abs(sigma.derivative_samples[: idx + 1]).max()) <= 1e-12 * scale


def _observation_mass(mesh: Mesh, mask: SubdomainMask):
    """Gram matrix of the zero-extended nodal fields on the patch.

    The full-mesh mass submatrix at the patch nodes — NOT the
    element-restricted patch mass: the forcing 1_O B u enters the flow
    through the full mass matrix, so the duality pairing must weight the
    patch-boundary nodes with both adjacent element halves.
    """
    M = fem.assemble_mass(mesh)
    ids = mask.node_indices
    return M[ids][:, ids]


def _check_obs_compatible(meas: MeasurementSet, fam: HorizonFamily) -> None:
    if fam.fields[0].n_points != meas.n_obs:
        raise ValueError("transform family and measurements use different observation sets")
    for f in fam.fields:
        g = f.grid
        if g.n_steps != meas.grid.n_steps or abs(g.T - meas.grid.T) > 1e-12:
            raise ValueError("transform family and measurements live on different time grids")


def _memory_quadrature(
    meas: MeasurementSet,
    fam: HorizonFamily,
    weight_at: callable,
    M_obs,
    include_zero_node: bool,
) -> tuple[float, float]:
    """Quadrature of weight(s)·(y_n, θ^{(s)})_{H¹(0,s;L²(O))} over the family.

    Returns ``(value, w0)`` where ``w0`` is the s = 0 trapezoid weight when
    the zero node is kept implicit (its integrand is linear in the unknowns
    and is absorbed into the coefficient row by the caller); with
    ``include_zero_node=False`` the first cell uses its right endpoint and
    ``w0 = 0``.
    """
    taus = np.asarray(fam.horizons)
    nodes = np.concatenate([[0.0], taus])
    w = _trapezoid_weights(nodes)
    if not include_zero_node:
        w[1] += w[0]
        w[0] = 0.0
    total = 0.0
    for wp, f in zip(w[1:], fam.fields):
        if wp == 0.0:
            continue
        total += wp * weight_at(f.tau) * h1_pairing(meas.window(f.tau), f, M_obs)
    return total, float(w[0])


# ===================================================================
# Global (full-state) oracle paths
# ===================================================================

def reconstruct_global_constQ(
    Y: FieldSeries,
    W: FieldSeries,
    Q,
    sigma: SigmaProfile,
    k: int,
    folded: bool = False,
    mass=None,
) -> float:
    """Full-state evaluation of the mode-k combined coefficient, constant Q.

    Evaluates, with Ψ⁰_k = (φ_k, …, φ_k)ᵗ and W the unit-datum kernel flow,

        (σ(0)/σ(T)) (W(T), Ψ⁰_k)
        + (1/σ(T)) ∫₀ᵀ σ′(T−s) (W(s), Ψ⁰_k) ds
        + (1/σ(T)) (Q Y(T), Ψ⁰_k),

    which equals Σ_j a_j(T) f_j^k up to discretization (``coeff_aQ`` row).
    The last term is the coupling memory ∫ σ(T−s)(QW(s), Ψ⁰_k) ds collapsed
    through the superposition identity ∫₀ᵀ σ(T−s) W(s) ds = Y(T); with
    ``folded=True`` it is omitted and the result matches the
    ``coeff_aQ_folded`` row instead.

    Parameters
    ----------
    Y, W:
        Driven trajectory and unit-datum kernel trajectory on the same
        mesh and grid.
    Q:
        Constant coupling, as an array or a constant ``CouplingMatrix``.
    """
    if isinstance(Q, CouplingMatrix):
        Qa = Q.constant_array()
    else:
        Qa = np.asarray(Q, dtype=float)
    n = Y.n_components
    if Qa.shape != (n, n) or W.n_components != n:
        raise ValueError("coupling and trajectories disagree on the component count")
    if Y.mesh is not W.mesh or Y.grid.n_steps != W.grid.n_steps:
        raise ValueError("trajectories live on different discretizations")
    sT = sigma.sigmaT
    if abs(sT) < _FIRST_KIND_FLOOR:
        raise ValueError("sigma(T) must be nonzero")
    mesh, grid = Y.mesh, Y.grid
    M = fem.assemble_mass(mesh) if mass is None else mass
    phi = laplace_eigenpair(mesh, k, 1.0)[1]
    Mphi = M @ phi

    def proj(snap: np.ndarray) -> float:
        return float(snap.sum(axis=0) @ Mphi)

    N = grid.n_steps
    term1 = (sigma.sigma0 / sT) * proj(W.snapshot(N))
    if _sigma_is_constant(sigma, grid.T):
        term2 = 0.0
    else:
        vals = np.array([proj(W.snapshot(m)) for m in range(N + 1)])
        term2 = float(np.trapezoid(sigma.derivative_samples[::-1] * vals, dx=grid.dt)) / sT
    if folded:
        return term1 + term2
    term3 = proj(Qa @ Y.snapshot(N)) / sT
    return term1 + term2 + term3


def reconstruct_global_2x2_variable(
    W: FieldSeries,
    mode: ModeBasis,
    sigma: SigmaProfile,
    mass=None,
) -> float:
    """Full-state evaluation of the 2×2 variable-coupling identity RHS.

    Projects the kernel flow on the dual pair sum, (v₁, φ_k + ψ_k) + (v₂, φ_k),
    and evaluates σ(0)(W(T), ·) + ∫₀ᵀ σ′(T−s)(W(s), ·) ds, which equals
    a_k(T)·X_k + b_k(T)·f₁^{φ_k} up to discretization.
    """
    if W.n_components != 2:
        raise ValueError("the variable-coupling identity is for 2-component systems")
    if mode.psi_k is None:
        raise ValueError("mode carries no companion field; build the basis with a weight")
    mesh, grid = W.mesh, W.grid
    M = fem.assemble_mass(mesh) if mass is None else mass
    g1 = M @ (mode.phi_k + mode.psi_k)
    g2 = M @ mode.phi_k

    def proj(snap: np.ndarray) -> float:
        return float(snap[0] @ g1 + snap[1] @ g2)

    N = grid.n_steps
    term1 = sigma.sigma0 * proj(W.snapshot(N))
    if _sigma_is_constant(sigma, grid.T):
        return term1
    vals = np.array([proj(W.snapshot(m)) for m in range(N + 1)])
    term2 = float(np.trapezoid(sigma.derivative_samples[::-1] * vals, dx=grid.dt))
    return term1 + term2


# ===================================================================
# Local (measurement-only) paths
# ===================================================================

def reconstruct_local_constQ(
    meas: MeasurementSet,
    theta_n,
    theta_hat_n,
    sigma: SigmaProfile,
    aQ,
    k: int,
) -> CoefficientEstimate:
    """Mode-k combined coefficient from y_n on O alone, constant coupling.

    Parameters
    ----------
    theta_n:
        Transform(s) of the null control for datum Ψ⁰_k: a single
        ``TimeSeriesField`` at the reconstruction window (enough whenever σ
        is constant) or a ``HorizonFamily`` whose horizons serve as
        quadrature nodes for the σ′ memory term; its largest horizon fixes
        the window τ.
    theta_hat_n:
        Transform(s) for the coupling memory term C₃, or ``None``.  The
        θ̂ route builds its datum from the last control component alone,
        so it recovers the coupling memory exactly when (φ_k, …, φ_k)ᵗ is
        an eigenvector of Qᵗ — equivalently, when every column of Q sums
        to Q_nn.  Otherwise pass ``None`` and fold the coupling memory
        into the coefficient row with ``coeff_aQ_folded`` — C₃ is then
        reported as zero.
    aQ:
        Coefficient row a_j(τ) matching the chosen C₃ convention
        (``coeff_aQ`` with a θ̂ family, ``coeff_aQ_folded`` without).

    Returns
    -------
    CoefficientEstimate
        With ``combined_value`` = C₁ + C₂ + C₃ and ``lhs_coefficients`` =
        aQ plus the s = 0 quadrature-endpoint correction (the endpoint
        integrand is a known multiple of the unknowns, so it moves to the
        coefficient side rather than being dropped).

    Notes
    -----
    C₁ = −(σ(0)/σ(τ)) (y_n, θ^{(τ)})_{H¹(0,τ;L²(O))};
    C₂ = −(1/σ(τ)) ∫₀^τ σ′(τ−s) (y_n, θ^{(s)})_{H¹(0,s;L²(O))} ds;
    C₃ = −(1/σ(τ)) ∫₀^τ σ(τ−s) (y_n, θ̂^{(s)})_{H¹(0,s;L²(O))} ds.
    """
    if abs(sigma.sigma0) < _FIRST_KIND_FLOOR:
        raise ValueError("first-kind regime unsupported: sigma(0) is (numerically) zero")
    fam = _as_family(theta_n)
    _check_obs_compatible(meas, fam)
    tau = fam.horizons[-1]
    s_tau, ds_tau = _sigma_at(sigma, tau)
    if abs(s_tau) < _FIRST_KIND_FLOOR:
        raise ValueError("sigma at the reconstruction window must be nonzero")
    aQ = np.asarray(aQ, dtype=float)
    M_obs = _observation_mass(meas.mesh, meas.mask)

    c1 = -(sigma.sigma0 / s_tau) * h1_pairing(meas.window(tau), fam.final, M_obs)

    correction = 0.0
    if _sigma_is_constant(sigma, tau):
        c2 = 0.0
    else:
        def dsig_rev(s: float) -> float:
            return _sigma_at(sigma, tau - s)[1]

        val, w0 = _memory_quadrature(meas, fam, dsig_rev, M_obs, include_zero_node=True)
        c2 = -val / s_tau
        # s = 0 endpoint: (W(0), Ψ⁰_k) = Σ_j f_j^k, moved to the rows.
        correction = -w0 * ds_tau / s_tau

    c3 = 0.0
    if theta_hat_n is not None:
        fam_hat = _as_family(theta_hat_n)
        _check_obs_compatible(meas, fam_hat)
        if abs(fam_hat.horizons[-1] - tau) > 1e-12:
            raise ValueError("theta and theta-hat families must share the window")

        def sig_rev(s: float) -> float:
            return _sigma_at(sigma, tau - s)[0]

        val, _ = _memory_quadrature(meas, fam_hat, sig_rev, M_obs, include_zero_node=False)
        c3 = -val / s_tau

    return CoefficientEstimate(
        k=k,
        combined_value=c1 + c2 + c3,
        rhs_terms=(c1, c2, c3),
        lhs_coefficients=aQ + correction,
        window=tau,
        kind="constQ",
    )


def reconstruct_local_2x2_variable(
    meas: MeasurementSet,
    theta,
    sigma: SigmaProfile,
    aL: float,
    bL: float,
    k: int,
) -> CoefficientEstimate:
    """Mode-k combined Riesz coefficient from y₂ on O, 2×2 variable coupling.

    Same structure as the constant-coupling route with two differences: the
    identity is not normalized by σ(τ) (the coefficient a_k(τ) = σ(τ) − k²E
    carries it), and there is no coupling memory term — the control datum
    already encodes the coupling through the companion mode, so the
    coefficient row is just (a_k, b_k) acting on (X_k, f₁^{φ_k}).

    ``theta`` follows the same single-field / family convention as the
    constant-coupling route; its largest horizon fixes the window.
    """
    if abs(sigma.sigma0) < _FIRST_KIND_FLOOR:
        raise ValueError("first-kind regime unsupported: sigma(0) is (numerically) zero")
    fam = _as_family(theta)
    _check_obs_compatible(meas, fam)
    tau = fam.horizons[-1]
    _, ds_tau = _sigma_at(sigma, tau)
    M_obs = _observation_mass(meas.mesh, meas.mask)

    c1 = -sigma.sigma0 * h1_pairing(meas.window(tau), fam.final, M_obs)

    a_eff = float(aL)
    if _sigma_is_constant(sigma, tau):
        c2 = 0.0
    else:
        def dsig_rev(s: float) -> float:
            return _sigma_at(sigma, tau - s)[1]

        val, w0 = _memory_quadrature(meas, fam, dsig_rev, M_obs, include_zero_node=True)
        c2 = -val
        # s = 0 endpoint: (W(0), Φ*₁+Φ*₂) = X_k exactly — a-coefficient only.
        a_eff -= w0 * ds_tau

    return CoefficientEstimate(
        k=k,
        combined_value=c1 + c2,
        rhs_terms=(c1, c2),
        lhs_coefficients=np.array([a_eff, float(bL)]),
        window=tau,
        kind="riesz2x2",
    )


# ===================================================================
# Horizon separation
# ===================================================================

def separate_coefficients(
    estimates: Sequence[CoefficientEstimate],
    a_table=None,
    noise_scale: float = 0.0,
    amplification_cap: float | None = None,
) -> CoefficientEstimate:
    """Least-squares split of one mode's combined values over its horizons.

    Stacks the per-horizon rows into A (m × n_unknowns) and solves
    A f = c for the per-component coefficients; m must be at least the
    unknown count and the estimates must share mode and kind.

    Parameters
    ----------
    a_table:
        Optional explicit coefficient rows, one per estimate in window
        order; defaults to each estimate's own ``lhs_coefficients``.
    noise_scale:
        A-priori uncertainty of the combined values (control residual plus
        time-discretization error).  When ``amplification_cap`` is set and
        ‖A⁺‖₂ · noise_scale exceeds it, the mode is below the reliability
        floor: its components are reported as zero with ``suppressed=True``
        (zero is the honest answer for a coefficient the data cannot see).
    Returns
    -------
    CoefficientEstimate
        The largest-window estimate with ``component_values``,
        ``condition_number``, and the least-squares ``residual`` attached;
        ``separation_failed`` is set when the system is numerically
        singular (condition number above 1e8) and the combined value is
        still reported.
    """
    if not estimates:
        raise ValueError("need at least one estimate")
    ordered = sorted(estimates, key=lambda e: e.window)
    k, kind = ordered[0].k, ordered[0].kind
    if any(e.k != k or e.kind != kind for e in ordered):
        raise ValueError("estimates mix modes or identity kinds")
    windows = [e.window for e in ordered]
    if any(b <= a for a, b in zip(windows, windows[1:])):
        raise ValueError("estimates must come from distinct horizons")
    if a_table is None:
        A = np.vstack([e.lhs_coefficients for e in ordered])
    else:
        A = np.asarray(a_table, dtype=float)
        if A.shape[0] != len(ordered):
            raise ValueError("coefficient table must have one row per estimate")
    c = np.array([e.combined_value for e in ordered])
    n_unknowns = A.shape[1]
    if len(ordered) < n_unknowns:
        raise ValueError(
            f"{n_unknowns} unknowns need at least {n_unknowns} horizons, got {len(ordered)}"
        )

    base = ordered[-1]
    svals = np.linalg.svd(A, compute_uv=False)
    cond = float("inf") if svals[-1] == 0.0 else float(svals[0] / svals[-1])
    if not np.isfinite(cond) or cond > _COND_CAP:
        return replace(base, condition_number=cond, separation_failed=True)

    f_hat, *_ = np.linalg.lstsq(A, c, rcond=None)
    residual = float(np.linalg.norm(A @ f_hat - c))
    suppressed = False
    if amplification_cap is not None and noise_scale / svals[-1] > amplification_cap:
        f_hat = np.zeros_like(f_hat)
        suppressed = True
    return replace(
        base,
        component_values=f_hat,
        condition_number=cond,
        residual=residual,
        suppressed=suppressed,
    )


# ===================================================================
# Synthesis
# ===================================================================

@dataclass(frozen=True)
class SynthesisResult:
    """Partial-sum source fields with the mode coverage that built them."""

    fields: np.ndarray
    modes_used: tuple[int, ...]
    modes_failed: tuple[int, ...]
    modes_suppressed: tuple[int, ...]
    kind: str

    @property
    def coverage(self) -> float:
        total = len(self.modes_used) + len(self.modes_failed)
        return 1.0 if total == 0 else len(self.modes_used) / total


def synthesize_source(
    estimates: Sequence[CoefficientEstimate],
    basis: Sequence[ModeBasis],
) -> SynthesisResult:
    """Sum separated mode coefficients against the basis fields.

    Constant coupling: F_j = Σ_k f_j^k φ_k.  Variable 2×2 coupling, from the
    biorthogonal split (the unknown pair per mode is (X_k, f₁^{φ_k})):

        f₁ = Σ_k f₁^{φ_k} φ_k,
        f₂ = Σ_k (X_k − f₁^{φ_k}) φ_k + f₁^{φ_k} ψ_k.

    Modes without separated components (failed separation, or absent from
    ``basis``) are skipped and reported; suppressed modes contribute their
    zeros and are listed separately.
    """
    if not estimates:
        raise ValueError("need at least one estimate")
    kind = estimates[0].kind
    if any(e.kind != kind for e in estimates):
        raise ValueError("estimates mix identity kinds")
    by_k = {m.k: m for m in basis}
    node_count = basis[0].phi_k.size if basis else 0
    n_fields = estimates[0].lhs_coefficients.size if kind == "constQ" else 2
    fields = np.zeros((n_fields, node_count))
    used: list[int] = []
    failed: list[int] = []
    suppressed: list[int] = []
    for e in sorted(estimates, key=lambda e: e.k):
        mode = by_k.get(e.k)
        if e.component_values is None or mode is None:
            failed.append(e.k)
            continue
        if kind == "riesz2x2" and mode.psi_k is None:
            failed.append(e.k)
            continue
        (suppressed if e.suppressed else used).append(e.k)
        if e.suppressed:
            continue
        if kind == "constQ":
            fields += np.outer(e.component_values, mode.phi_k)
        else:
            x_k, f1_phi = float(e.component_values[0]), float(e.component_values[1])
            fields[0] += f1_phi * mode.phi_k
            fields[1] += (x_k - f1_phi) * mode.phi_k + f1_phi * mode.psi_k
    return SynthesisResult(fields, tuple(used), tuple(failed), tuple(suppressed), kind)


# ===================================================================
# Reporting
# ===================================================================

def export_reconstruction_csv(estimates: Sequence[CoefficientEstimate], path) -> None:
    """Audit table: k, tau, combined, C1, C2, C3, cond, f1_k, ..., fn_k."""
    n_comp = max(
        (e.component_values.size for e in estimates if e.component_values is not None),
        default=0,
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["k", "tau", "combined", "C1", "C2", "C3", "cond"]
            + [f"f{j + 1}_k" for j in range(n_comp)]
        )
        for e in estimates:
            rhs = list(e.rhs_terms) + [0.0] * (3 - len(e.rhs_terms))
            row = [e.k, f"{e.window:.12g}", f"{e.combined_value:.12g}"]
            row += [f"{v:.12g}" for v in rhs]
            row.append("" if e.condition_number is None else f"{e.condition_number:.6g}")
            vals = [] if e.component_values is None else list(e.component_values)
            row += [f"{v:.12g}" for v in vals] + [""] * (n_comp - len(vals))
            writer.writerow(row)


def export_source_csv(mesh: Mesh, F_true: np.ndarray, F_rec: np.ndarray, path) -> None:
    """Nodal comparison table: x[,y], f1_true, f1_rec, ..., fn_true, fn_rec."""
    F_true = np.atleast_2d(np.asarray(F_true, dtype=float))
    F_rec = np.atleast_2d(np.asarray(F_rec, dtype=float))
    if F_true.shape != F_rec.shape or F_true.shape[1] != mesh.node_count:
        raise ValueError("source fields must share the mesh's nodal shape")
    coords = mesh.coords()
    axes = ["x", "y"][: coords.shape[1]]
    n = F_true.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = axes + [f"f{j + 1}_{tag}" for j in range(n) for tag in ("true", "rec")]
        writer.writerow(header)
        for i in range(mesh.node_count):
            row = [f"{c:.12g}" for c in coords[i]]
            for j in range(n):
                row += [f"{F_true[j, i]:.12g}", f"{F_rec[j, i]:.12g}"]
            writer.writerow(row)
