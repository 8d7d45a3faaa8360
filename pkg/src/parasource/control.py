"""Penalized null control for the backward coupled system.

Computes a distributed control u, acting only on the last component inside
the observation region O, that drives the backward system

    −∂t Ψ − ν ΔΨ + Qᵗ Ψ = 1_O B u,   Ψ(·,τ) = Ψ⁰,   B = diag(0,…,0,1),

to (approximately) Ψ(·,0) = 0.  Exact discrete null control is ill-posed at
a fixed mesh, so the module minimizes the penalized functional

    J(u) = (dt/2) Σ_m (u^m)ᵗ M_O u^m + (1/2ε) Ψ_u(0)ᵗ M̂ Ψ_u(0)

by conjugate gradient directly on the control variable.  The gradient is
evaluated with the forward companion system (the adjoint of the adjoint):
for W⁰ = (1/ε)Ψ_u(0) and the homogeneous forward march W^m, the Euclidean
gradient rows are dt·[M_O u^{m−1} + (M̂ W^m)_n|_O].  Because the forward and
backward marches share one LU factorization (operator and its exact
transpose), the underlying duality identity holds to machine precision and
the CG operator is symmetric positive definite by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from parasource import fem
from parasource.forward import BlockStepper, CouplingMatrix, FieldSeries, TimeGrid
from parasource.meshing import Mesh, SubdomainMask

__all__ = [
    "ControlFunction",
    "ControlReport",
    "ControlError",
    "solve_null_control",
    "solve_null_control_2x2_variable",
    "transport_control",
    "export_control_csv",
    "export_control_report_csv",
]


# ===================================================================
# Containers
# ===================================================================

@dataclass(frozen=True)
class ControlFunction:
    """Last-component control samples u_n on [0, τ], zero-extended to (τ, T].

    ``values[m, j]`` is the control at node j and time t_m; entries at nodes
    outside O are exact zeros, and the time march consumes rows 0..N_τ−1
    (left endpoints), so row N_τ is stored as zero as well.
    """

    values: np.ndarray
    mesh: Mesh
    grid: TimeGrid
    tau: float
    mask: SubdomainMask
    n_components: int
    zero_extended: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        n_tau = self.grid.index_of(self.tau)
        expected = (n_tau + 1, self.mesh.node_count)
        if self.values.shape != expected:
            raise ValueError(f"control values shape {self.values.shape} != expected {expected}")

    @property
    def tau_index(self) -> int:
        return self.grid.index_of(self.tau)

    def as_series(self) -> FieldSeries:
        """Full-horizon n-component series with u in the last component.

        Components 1..n−1 are identically zero; the last component carries
        the control on [0, τ] and the zero extension on (τ, T].
        """
        data = np.zeros((self.grid.n_steps + 1, self.n_components, self.mesh.node_count))
        data[: self.tau_index + 1, self.n_components - 1, :] = self.values
        return FieldSeries(data, self.mesh, self.grid)


@dataclass(frozen=True)
class ControlReport:
    """Outcome of one penalized null-control solve.

    ``terminal_residual`` is ‖Ψ_u(·,0)‖_{L²} / ‖Ψ⁰‖_{L²}; ``control_cost``
    is ‖u_n‖_{L²(0,τ;L²(O))} under the left-endpoint rectangle rule used by
    the march.  ``coupling_flag`` is None when the cascade coupling satisfies
    the positivity hypothesis, else a short description of the violation.
    """

    epsilon: float
    terminal_residual: float
    control_cost: float
    cg_iterations: int
    converged: bool
    coupling_flag: str | None = None


class ControlError(RuntimeError):
    """CG failed to converge; carries the best iterate and its report."""

    def __init__(self, message: str, control: ControlFunction, report: ControlReport):
        super().__init__(message)
        self.control = control
        self.report = report


# ===================================================================
# Penalized-HUM engine
# ===================================================================

def _hypothesis_flag(Qt: CouplingMatrix) -> str | None:
    """Check the cascade entries Q_{i+1,i} = (Qᵗ)_{i,i+1} for positivity."""
    issues = []
    for i in range(Qt.n - 1):
        entry = Qt.entries[i][i + 1]
        if Qt.entry_is_zero(i, i + 1):
            issues.append(f"cascade entry ({i + 2},{i + 1}) is zero: component {i + 1} is uncontrollable")
        elif isinstance(entry, np.ndarray):
            if float(np.min(entry)) <= 0.0:
                issues.append(f"cascade entry ({i + 2},{i + 1}) is not uniformly positive")
        elif float(entry) < 0.0:
            issues.append(f"cascade entry ({i + 2},{i + 1}) is negative")
    return "; ".join(issues) if issues else None


def _hum_solve(
    mesh: Mesh,
    grid: TimeGrid,
    Qt: CouplingMatrix,
    nu: float,
    psi0: np.ndarray,
    tau: float,
    mask: SubdomainMask,
    epsilon: float,
    max_iter: int,
    rel_tol: float,
    coupling_flag: str | None,
) -> tuple[ControlFunction, ControlReport]:
    if epsilon <= 0.0:
        raise ValueError("penalty epsilon must be positive")
    if mask.element_indices.size == 0:
        raise ValueError("control region mask is empty")
    n = Qt.n
    psi0 = np.asarray(psi0, dtype=float)
    if psi0.shape != (n, mesh.node_count):
        raise ValueError(f"terminal datum must be ({n}, {mesh.node_count}) nodal components")
    N = grid.index_of(tau)
    if N < 1:
        raise ValueError("horizon tau must cover at least one time step")
    dt = grid.dt

    # One factorization serves both marches: the stepper is built on the
    # primal coupling Q = Qtᵗ, so ``advance_transposed`` is the backward
    # operator M̂ + dt·K̂(Qᵗ) and ``advance`` the forward companion.
    stepper = BlockStepper(mesh, Qt.transpose(), nu, grid)
    M_hat = stepper.M_hat
    n_free = stepper.n_free

    ctrl_pos = np.nonzero(mask.node_flags[stepper.free])[0]
    if ctrl_pos.size == 0:
        raise ValueError("control region has no interior nodes")
    ctrl_global = stepper.free[ctrl_pos]
    ctrl_offsets = (n - 1) * n_free + ctrl_pos
    M_rest = fem.assemble_mass_on_elements(mesh, mask.element_flags)
    M_O = M_rest[ctrl_global][:, ctrl_global].toarray()
    n_c = ctrl_pos.size

    psi0_vec = stepper.restrict(psi0)
    psi0_norm = fem.mass_norm(M_hat, psi0_vec)

    def empty_control() -> ControlFunction:
        return ControlFunction(np.zeros((N + 1, mesh.node_count)), mesh, grid, tau, mask, n)

    if psi0_norm == 0.0:
        report = ControlReport(epsilon, 0.0, 0.0, 0, True, coupling_flag)
        return empty_control(), report

    def march_state_to_zero(U: np.ndarray | None, with_datum: bool) -> np.ndarray:
        """Backward march from t_τ; returns the free-node state at t=0."""
        vec = psi0_vec.copy() if with_datum else np.zeros(n * n_free)
        for m in range(N, 0, -1):
            dual = None
            if U is not None:
                scattered = np.zeros(n * n_free)
                scattered[ctrl_offsets] = U[m - 1]
                dual = M_hat @ scattered
            vec = stepper.advance_transposed(vec, dual)
        return vec

    def companion_rows(w0: np.ndarray) -> np.ndarray:
        """Forward companion from W⁰ = w0; row m−1 is (M̂ W^m) at control DOFs."""
        G = np.empty((N, n_c))
        w = w0
        for m in range(1, N + 1):
            w = stepper.advance(w)
            G[m - 1] = (M_hat @ w)[ctrl_offsets]
        return G

    def H_apply(U: np.ndarray) -> np.ndarray:
        return dt * (U @ M_O + companion_rows(march_state_to_zero(U, False) / epsilon))

    psi_hom0 = march_state_to_zero(None, True)
    b = -dt * companion_rows(psi_hom0 / epsilon)
    b_norm = float(np.linalg.norm(b))

    x = np.zeros((N, n_c))
    iterations = 0
    converged = b_norm == 0.0
    if not converged:
        r = b.copy()
        p = r.copy()
        rs = float(np.vdot(r, r))
        best_x, best_rnorm = x.copy(), np.sqrt(rs)
        for iterations in range(1, max_iter + 1):
            Hp = H_apply(p)
            curvature = float(np.vdot(p, Hp))
            if curvature <= 0.0:
                break
            alpha = rs / curvature
            x = x + alpha * p
            r = r - alpha * Hp
            rs_new = float(np.vdot(r, r))
            rnorm = np.sqrt(rs_new)
            if rnorm < best_rnorm:
                best_x, best_rnorm = x.copy(), rnorm
            if rnorm <= rel_tol * b_norm:
                converged = True
                break
            p = r + (rs_new / rs) * p
            rs = rs_new
        x = best_x

    psi_final = psi_hom0 + march_state_to_zero(x, False)
    residual = fem.mass_norm(M_hat, psi_final) / psi0_norm
    cost = float(np.sqrt(dt * np.einsum("mi,ij,mj->", x, M_O, x)))

    values = np.zeros((N + 1, mesh.node_count))
    values[:N, ctrl_global] = x
    control = ControlFunction(values, mesh, grid, tau, mask, n)
    report = ControlReport(epsilon, residual, cost, iterations, converged, coupling_flag)
    if not converged:
        raise ControlError(
            f"conjugate gradient stagnated after {iterations} iterations "
            f"(terminal residual {residual:.3e})",
            control,
            report,
        )
    return control, report


# ===================================================================
# Public solvers
# ===================================================================

def solve_null_control(
    mesh: Mesh,
    grid: TimeGrid,
    Qt: CouplingMatrix,
    nu: float,
    psi0,
    tau: float,
    mask: SubdomainMask,
    epsilon: float,
    max_iter: int = 500,
    rel_tol: float = 1e-8,
) -> tuple[ControlFunction, ControlReport]:
    """Penalized null control for −∂tΨ − νΔΨ + QᵗΨ = 1_O B u, Ψ(τ) = Ψ⁰.

    ``Qt`` is the coupling of the backward system itself.  Returns the
    minimizer of J(u) = ½‖u‖²_{L²(0,τ;L²(O))} + (1/2ε)‖Ψ_u(·,0)‖²_{L²} and
    its report; raises :class:`ControlError` (carrying the best iterate) if
    CG does not reach ``rel_tol`` within ``max_iter`` iterations.
    """
    flag = _hypothesis_flag(Qt)
    return _hum_solve(mesh, grid, Qt, nu, np.asarray(psi0, dtype=float), tau, mask,
                      epsilon, max_iter, rel_tol, flag)


def solve_null_control_2x2_variable(
    mesh: Mesh,
    grid: TimeGrid,
    q,
    psi0,
    tau: float,
    mask: SubdomainMask,
    epsilon: float,
    nu: float = 1.0,
    max_iter: int = 500,
    rel_tol: float = 1e-8,
) -> tuple[ControlFunction, ControlReport]:
    """Null control for the 2×2 variable-coupling backward system.

    The backward operator is −∂t − νΔ + Qᵗ(x) with Q(x) = [[0,0],[q,0]], the
    control acting on component 2.  When q vanishes somewhere (or is zero),
    component 1 is only partially reachable; the solve proceeds but the
    report flags the hypothesis violation.
    """
    if np.isscalar(q):
        q_entry: object = float(q)
    else:
        q_entry = np.asarray(q, dtype=float)
        if q_entry.shape != (mesh.node_count,):
            raise ValueError("variable coupling q must be a nodal field")
    Qt = CouplingMatrix([[0.0, q_entry], [0.0, 0.0]])
    if Qt.entry_is_zero(0, 1):
        flag = "zero coupling: component 1 is uncontrollable (needs q >= C > 0)"
    else:
        qmin = float(np.min(q_entry)) if isinstance(q_entry, np.ndarray) else float(q_entry)
        flag = None if qmin > 0.0 else "coupling is not uniformly positive: q changes sign or vanishes"
    return _hum_solve(mesh, grid, Qt, nu, np.asarray(psi0, dtype=float), tau, mask,
                      epsilon, max_iter, rel_tol, flag)


def transport_control(U: ControlFunction, Qt_const) -> FieldSeries:
    """Datum Qᵗ B U for the second controlled system, as a full n-series.

    Component i of the output is (Qᵗ)_{i,n} · u_n.  Only constant couplings
    are supported (the substitution argument is stated for constant Q).
    """
    if isinstance(Qt_const, CouplingMatrix):
        if not Qt_const.is_constant:
            raise ValueError("transport_control requires a constant coupling matrix")
        Qt_arr = Qt_const.constant_array()
    else:
        Qt_arr = np.asarray(Qt_const, dtype=float)
    n = U.n_components
    if Qt_arr.shape != (n, n):
        raise ValueError(f"coupling must be ({n}, {n})")
    series = U.as_series()
    u_last = series.data[:, n - 1, :]
    data = np.einsum("i,mj->mij", Qt_arr[:, n - 1], u_last)
    return FieldSeries(data, U.mesh, U.grid)


# ===================================================================
# CSV export
# ===================================================================

def export_control_csv(path, U: ControlFunction) -> None:
    """Write rows ``t,node_id,u_n`` for the O-flagged nodes on [0, τ]."""
    t = U.grid.times()
    nodes = U.mask.node_indices
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "node_id", "u_n"])
        for m in range(U.tau_index + 1):
            for j in nodes:
                writer.writerow([f"{t[m]:.12g}", int(j), f"{U.values[m, j]:.12g}"])


def export_control_report_csv(path, report: ControlReport) -> None:
    """Write the one-row report for a control solve."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epsilon", "terminal_residual", "control_cost",
                         "cg_iterations", "converged", "coupling_flag"])
        writer.writerow([
            f"{report.epsilon:.12g}",
            f"{report.terminal_residual:.12g}",
            f"{report.control_cost:.12g}",
            report.cg_iterations,
            report.converged,
            "" if report.coupling_flag is None else report.coupling_flag,
        ])
