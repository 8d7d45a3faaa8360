"""Implicit-Euler time stepping for the coupled system and its companions.

Solves, on a shared P1 mesh and uniform time grid,

* the primal system      ∂t Y − ν ΔY + Q Y = σ(t) F(x),  Y(0)=0,
* the homogeneous kernel ∂t W − ν ΔW + Q W = 0,          W(0)=σ₀·F,
* the backward system    −∂t Ψ − ν ΔΨ + Qᵗ Ψ = r(x,t),   Ψ(τ) given,

all with homogeneous Dirichlet conditions, plus the Duhamel composition
Y(t) = ∫₀ᵗ σ(s) W(t−s) ds as a discrete convolution.

The n·(free nodes) block operator is assembled once per (mesh, Q, ν, dt) and
factored with a sparse LU; every step is then a pair of triangular solves.
The backward stepper uses the exact transpose of the forward operator, which
is what makes the control and optimizer adjoints exact at machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from parasource import fem
from parasource.meshing import Mesh

__all__ = [
    "TimeGrid",
    "SigmaProfile",
    "CouplingMatrix",
    "FieldSeries",
    "BlockStepper",
    "solve_forward",
    "solve_duhamel_kernel",
    "solve_backward",
    "duhamel_compose",
]


# ===================================================================
# Grid / data containers
# ===================================================================

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on (0, T) with n_steps steps (n_steps+1 nodes)."""

    T: float
    n_steps: int

    def __post_init__(self) -> None:
        if self.T <= 0.0 or self.n_steps < 1:
            raise ValueError("need T > 0 and n_steps >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of a time that must sit on the grid (e.g. a horizon τ)."""
        idx = int(round(t / self.dt))
        if not (0 <= idx <= self.n_steps) or abs(idx * self.dt - t) > 1e-10 * max(1.0, self.T):
            raise ValueError(f"time {t} is not aligned with the grid (dt={self.dt})")
        return idx


@dataclass(frozen=True)
class SigmaProfile:
    """Sampled time profile σ with its derivative on the same grid."""

    samples: np.ndarray
    derivative_samples: np.ndarray
    grid: TimeGrid

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=float))
        object.__setattr__(self, "derivative_samples", np.asarray(self.derivative_samples, dtype=float))
        if self.samples.shape != (self.grid.n_steps + 1,):
            raise ValueError("sigma samples do not match the time grid")
        if self.derivative_samples.shape != self.samples.shape:
            raise ValueError("sigma derivative samples do not match the time grid")
        if abs(self.samples[-1]) <= 0.0:
            raise ValueError("sigma(T) must be nonzero")

    @property
    def sigma0(self) -> float:
        return float(self.samples[0])

    @property
    def sigmaT(self) -> float:
        return float(self.samples[-1])

    @staticmethod
    def constant(value: float, grid: TimeGrid) -> "SigmaProfile":
        n = grid.n_steps + 1
        return SigmaProfile(np.full(n, float(value)), np.zeros(n), grid)

    @staticmethod
    def from_callable(fn, grid: TimeGrid, dfn=None) -> "SigmaProfile":
        """Sample σ (and σ′ if given, else centered differences) on the grid."""
        t = grid.times()
        samples = np.array([float(fn(ti)) for ti in t])
        if dfn is not None:
            dsamples = np.array([float(dfn(ti)) for ti in t])
        else:
            dsamples = np.gradient(samples, grid.dt)
        return SigmaProfile(samples, dsamples, grid)

    @staticmethod
    def cosine_plateau(grid: TimeGrid, t0: float | None = None) -> "SigmaProfile":
        """σ(t) = 1 + cos(4πt/(T−t₀))/2 for t < T−t₀, then the constant 3/2.

        The default ramp cut t₀ is 0.1·T.  The profile is C¹ (the cosine
        reaches its crest exactly at the junction), so the analytic
        derivative is used.
        """
        T = grid.T
        if t0 is None:
            t0 = 0.1 * T
        if not 0.0 < t0 < T:
            raise ValueError("t0 must lie inside (0, T)")
        t = grid.times()
        w = 4.0 * np.pi / (T - t0)
        ramp = t < T - t0
        samples = np.where(ramp, 1.0 + 0.5 * np.cos(w * t), 1.5)
        dsamples = np.where(ramp, -0.5 * w * np.sin(w * t), 0.0)
        return SigmaProfile(samples, dsamples, grid)


class CouplingMatrix:
    """n×n zero-order coupling Q; entries are constants or nodal fields."""

    def __init__(self, entries):
        self.entries = [[e for e in row] for row in entries]
        self.n = len(self.entries)
        for row in self.entries:
            if len(row) != self.n:
                raise ValueError("coupling matrix must be square")
        self._node_count = None
        for row in self.entries:
            for e in row:
                if isinstance(e, np.ndarray):
                    if self._node_count is None:
                        self._node_count = e.shape[0]
                    elif e.shape[0] != self._node_count:
                        raise ValueError("variable coupling entries live on different meshes")

    @staticmethod
    def constant(array) -> "CouplingMatrix":
        a = np.asarray(array, dtype=float)
        return CouplingMatrix([[float(a[i, j]) for j in range(a.shape[1])] for i in range(a.shape[0])])

    @staticmethod
    def zero(n: int) -> "CouplingMatrix":
        return CouplingMatrix([[0.0] * n for _ in range(n)])

    @staticmethod
    def lower_2x2(q) -> "CouplingMatrix":
        """The 2×2 matrix [[0, 0], [q, 0]] with q constant or nodal."""
        return CouplingMatrix([[0.0, 0.0], [q, 0.0]])

    @property
    def is_constant(self) -> bool:
        return all(not isinstance(e, np.ndarray) for row in self.entries for e in row)

    def constant_array(self) -> np.ndarray:
        if not self.is_constant:
            raise ValueError("coupling matrix has variable entries")
        return np.array([[float(e) for e in row] for row in self.entries])

    def transpose(self) -> "CouplingMatrix":
        return CouplingMatrix([[self.entries[j][i] for j in range(self.n)] for i in range(self.n)])

    def entry_is_zero(self, i: int, j: int) -> bool:
        e = self.entries[i][j]
        if isinstance(e, np.ndarray):
            return not np.any(e)
        return float(e) == 0.0


@dataclass
class FieldSeries:
    """Trajectory of an n-component nodal field: data[m, i, :] = component i at t_m."""

    data: np.ndarray
    mesh: Mesh
    grid: TimeGrid

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=float)
        expected = (self.grid.n_steps + 1, self.data.shape[1], self.mesh.node_count)
        if self.data.shape != expected:
            raise ValueError(f"field series shape {self.data.shape} != expected {expected}")

    @property
    def n_components(self) -> int:
        return self.data.shape[1]

    def component(self, i: int) -> np.ndarray:
        return self.data[:, i, :]

    def snapshot(self, m: int) -> np.ndarray:
        return self.data[m]

    def backward_differences(self) -> np.ndarray:
        """(n_steps, n, nodes) array of (v^m − v^{m−1}) / dt."""
        return np.diff(self.data, axis=0) / self.grid.dt


# ===================================================================
# Block operator / steppers
# ===================================================================

def _coupling_block(mesh: Mesh, M_free: sp.csr_matrix, free: np.ndarray, entry) -> sp.csr_matrix | None:
    if isinstance(entry, np.ndarray):
        if not np.any(entry):
            return None
        return fem.restrict_matrix(fem.assemble_weighted_mass(mesh, entry), free)
    value = float(entry)
    if value == 0.0:
        return None
    return (value * M_free).tocsr()


class BlockStepper:
    """Factored implicit-Euler operators for one (mesh, Q, ν, grid) tuple.

    The step operator is A = M̂ + dt K̂ with K̂ = blockdiag(ν·S) plus the
    mass-weighted coupling blocks, restricted to the free (non-Dirichlet)
    nodes; vectors are stacked component-major.  ``advance`` solves with A
    (used marching in either time direction with this stepper's own
    coupling), ``advance_transposed`` with Aᵀ (the adjoint march, reusing
    the same factorization).  Since the weighted-mass blocks are symmetric,
    Aᵀ equals the step operator assembled from the transposed coupling.
    """

    def __init__(self, mesh: Mesh, Q: CouplingMatrix, nu: float, grid: TimeGrid):
        self.mesh = mesh
        self.Q = Q
        self.nu = float(nu)
        self.grid = grid
        self.n = Q.n
        self.free = mesh.interior_nodes
        self.n_free = self.free.shape[0]

        M = fem.assemble_mass(mesh)
        S = fem.assemble_stiffness(mesh, nu)
        self.M_free = fem.restrict_matrix(M, self.free)
        S_free = fem.restrict_matrix(S, self.free)

        blocks = [[None] * self.n for _ in range(self.n)]
        for i in range(self.n):
            blocks[i][i] = S_free.copy()
        for i in range(self.n):
            for j in range(self.n):
                qb = _coupling_block(mesh, self.M_free, self.free, Q.entries[i][j])
                if qb is not None:
                    blocks[i][j] = qb if blocks[i][j] is None else (blocks[i][j] + qb)
        self.K_hat = sp.bmat(blocks, format="csr")
        self.M_hat = sp.block_diag([self.M_free] * self.n, format="csr")

        dt = grid.dt
        A = (self.M_hat + dt * self.K_hat).tocsc()
        self._lu_fwd = spla.splu(A)
        self._lu_bwd = spla.splu(A.T.tocsc())

    # ---- stacked-vector helpers ------------------------------------

    def restrict(self, fields: np.ndarray) -> np.ndarray:
        """(n, nodes) nodal fields -> stacked free-node vector."""
        return np.concatenate([fields[i][self.free] for i in range(self.n)])

    def embed(self, vec: np.ndarray) -> np.ndarray:
        """Stacked free-node vector -> (n, nodes) with zeros on the boundary."""
        out = np.zeros((self.n, self.mesh.node_count))
        for i in range(self.n):
            out[i][self.free] = vec[i * self.n_free : (i + 1) * self.n_free]
        return out

    def weak_source(self, fields: np.ndarray) -> np.ndarray:
        """M̂ · (stacked nodal fields): the dual vector of a source term."""
        return self.M_hat @ self.restrict(fields)

    def advance(self, vec: np.ndarray, dual_rhs: np.ndarray | None = None) -> np.ndarray:
        """One implicit step with this stepper's own coupling: solve (M̂+dtK̂)x = M̂v + dt·g."""
        rhs = self.M_hat @ vec
        if dual_rhs is not None:
            rhs = rhs + self.grid.dt * dual_rhs
        return self._lu_fwd.solve(rhs)

    def advance_transposed(self, vec: np.ndarray, dual_rhs: np.ndarray | None = None) -> np.ndarray:
        """One implicit step with the exact transpose (M̂+dtK̂)ᵀ.

        Reuses this stepper's factorization for the adjoint march — the
        coupling is effectively transposed, which is what makes discrete
        duality identities hold to machine precision.
        """
        rhs = self.M_hat @ vec
        if dual_rhs is not None:
            rhs = rhs + self.grid.dt * dual_rhs
        return self._lu_bwd.solve(rhs)

    # ---- trajectory drivers ----------------------------------------

    def run_forward(self, F: np.ndarray, sigma: SigmaProfile | None, sigma0: float | None = None) -> FieldSeries:
        """Primal solve when ``sigma`` is given, kernel solve otherwise."""
        N = self.grid.n_steps
        data = np.zeros((N + 1, self.n, self.mesh.node_count))
        if sigma is None:
            vec = float(sigma0) * self.restrict(F)
            data[0] = self.embed(vec)
            for m in range(1, N + 1):
                vec = self.advance(vec)
                self._check(vec, m)
                data[m] = self.embed(vec)
        else:
            src = self.weak_source(F)
            vec = np.zeros(self.n * self.n_free)
            for m in range(1, N + 1):
                vec = self.advance(vec, sigma.samples[m] * src)
                self._check(vec, m)
                data[m] = self.embed(vec)
        return FieldSeries(data, self.mesh, self.grid)

    def run_backward(self, terminal: np.ndarray, rhs: FieldSeries | None, tau_index: int | None = None) -> FieldSeries:
        """March (M̂+dtK̂ᵗ)Ψ^{m−1} = M̂Ψ^m + dt·M̂ r^{m−1} from t_τ down to 0."""
        N = self.grid.n_steps
        tau_index = N if tau_index is None else tau_index
        data = np.zeros((N + 1, self.n, self.mesh.node_count))
        vec = self.restrict(terminal)
        data[tau_index] = self.embed(vec)
        for m in range(tau_index, 0, -1):
            dual = self.weak_source(rhs.data[m - 1]) if rhs is not None else None
            vec = self.advance(vec, dual)
            self._check(vec, m - 1)
            data[m - 1] = self.embed(vec)
        return FieldSeries(data, self.mesh, self.grid)

    @staticmethod
    def _check(vec: np.ndarray, m: int) -> None:
        if not np.all(np.isfinite(vec)):
            raise fem.SolverError(f"non-finite state at time step {m}")


# ===================================================================
# Public solver fronts
# ===================================================================

def _as_fields(F, mesh: Mesh, n: int) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.shape != (n, mesh.node_count):
        raise ValueError(f"source must be ({n}, {mesh.node_count}) nodal components")
    return F


def solve_forward(
    mesh: Mesh,
    Q: CouplingMatrix,
    nu: float,
    sigma: SigmaProfile,
    F,
    grid: TimeGrid,
    stepper: BlockStepper | None = None,
) -> FieldSeries:
    """Implicit-Euler solution of ∂tY − νΔY + QY = σ(t)F, Y(0)=0.

    σ is evaluated at the new time level of each step.
    """
    stepper = stepper or BlockStepper(mesh, Q, nu, grid)
    return stepper.run_forward(_as_fields(F, mesh, Q.n), sigma)


def solve_duhamel_kernel(
    mesh: Mesh,
    Q: CouplingMatrix,
    nu: float,
    F,
    sigma0: float,
    grid: TimeGrid,
    stepper: BlockStepper | None = None,
) -> FieldSeries:
    """Homogeneous coupled heat flow with initial datum sigma0·F."""
    stepper = stepper or BlockStepper(mesh, Q, nu, grid)
    return stepper.run_forward(_as_fields(F, mesh, Q.n), None, sigma0=sigma0)


def solve_backward(
    mesh: Mesh,
    Qt: CouplingMatrix,
    nu: float,
    rhs: FieldSeries | None,
    terminal,
    grid: TimeGrid,
    tau: float | None = None,
    stepper: BlockStepper | None = None,
) -> FieldSeries:
    """Backward implicit Euler for −∂tΨ − νΔΨ + QᵗΨ = r, Ψ(τ) = terminal.

    ``Qt`` is the coupling of the backward system itself (pass Q.transpose()
    of the primal coupling).  ``rhs`` is a nodal field series sampled at the
    left endpoint of each step; ``None`` means a homogeneous system.
    """
    stepper = stepper or BlockStepper(mesh, Qt, nu, grid)
    tau_index = grid.n_steps if tau is None else grid.index_of(tau)
    return stepper.run_backward(_as_fields(terminal, mesh, Qt.n), rhs, tau_index)


def duhamel_compose(W: FieldSeries, sigma: SigmaProfile) -> FieldSeries:
    """Trapezoidal convolution Y(t_m) = ∫₀^{t_m} σ(s) W(t_m − s) ds."""
    if sigma.grid.n_steps != W.grid.n_steps or abs(sigma.grid.T - W.grid.T) > 1e-14 * max(1.0, W.grid.T):
        raise ValueError("sigma and kernel live on different time grids")
    N = W.grid.n_steps
    dt = W.grid.dt
    out = np.zeros_like(W.data)
    s = sigma.samples
    for m in range(1, N + 1):
        # weights for nodes j=0..m of ∫₀^{t_m}, endpoint-halved
        w = np.full(m + 1, dt)
        w[0] = w[-1] = 0.5 * dt
        coeff = w * s[: m + 1]
        out[m] = np.tensordot(coeff, W.data[m::-1], axes=(0, 0))
    return FieldSeries(out, W.mesh, W.grid)
