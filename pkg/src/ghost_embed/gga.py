"""Bethe-lattice quasiparticle solver and the ghost-Gutzwiller loop.

Per-spin conventions (paramagnetic, spin blocks identical): R is a length-B
real vector, lambda a BxB real symmetric matrix, and the quasiparticle
Hamiltonian at band energy eps is h(eps) = R eps R^T + lambda.  The chemical
potential is pinned at 0 by particle-hole symmetry of the half-filled model.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import fock
from .fock import EmbeddingParams

EIG_FLOOR = 1e-12
ZERO_ENERGY_TOL = 1e-12


class DegenerateBathWarning(UserWarning):
    """Auxiliary occupations pinned at 0 or 1 (decoupled band)."""


@dataclass(frozen=True)
class QuadratureGrid:
    """Nodes/weights for integrals against the semicircular DOS
    D0(eps) = (2/pi) sqrt(1 - eps^2) on [-1, 1]."""

    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def chebyshev(cls, n_nodes: int = 1000) -> "QuadratureGrid":
        """Gauss-Chebyshev (second kind): exact for polynomial integrands,
        so DOS moments are machine-exact."""
        i = np.arange(1, n_nodes + 1)
        theta = i * np.pi / (n_nodes + 1)
        nodes = np.cos(theta)
        weights = (2.0 / (n_nodes + 1)) * np.sin(theta) ** 2
        return cls(nodes=nodes, weights=weights)


@dataclass
class GGAState:
    """Self-consistency unknowns plus the lattice density matrix."""

    R: np.ndarray
    lam: np.ndarray
    delta: np.ndarray
    mu: float = 0.0

    @property
    def B(self) -> int:
        return len(self.R)


def lattice_moments(
    R: np.ndarray, lam: np.ndarray, grid: QuadratureGrid
) -> tuple[np.ndarray, np.ndarray]:
    """Occupied-band moments of h(eps) over the semicircular DOS.

    Returns (delta_lat, K) with delta_lat = int D0 P(eps) and
    K_a = int D0 eps [P(eps) R]_a, P the projector onto eigenvalues < 0
    (states at exactly 0 weighted 1/2).
    """
    R = np.asarray(R, dtype=float)
    lam = np.asarray(lam, dtype=float)
    B = len(R)
    h = grid.nodes[:, None, None] * np.outer(R, R)[None, :, :] + lam[None, :, :]
    evals, evecs = np.linalg.eigh(h)
    occ = np.where(evals < -ZERO_ENERGY_TOL, 1.0, np.where(evals > ZERO_ENERGY_TOL, 0.0, 0.5))
    # P_i = V_i diag(occ_i) V_i^T for each node i
    proj = np.einsum("iak,ik,ibk->iab", evecs, occ, evecs)
    delta_lat = np.einsum("i,iab->ab", grid.weights, proj)
    K = np.einsum("i,i,iab,b->a", grid.weights, grid.nodes, proj, R)
    delta_lat = 0.5 * (delta_lat + delta_lat.T)
    spec = np.linalg.eigvalsh(delta_lat)
    if spec.min() < EIG_FLOOR or spec.max() > 1.0 - EIG_FLOOR:
        warnings.warn(
            "lattice density matrix has occupations pinned at 0/1",
            DegenerateBathWarning,
            stacklevel=2,
        )
    return delta_lat, K


def _sqrt_factor(delta: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Eigendecomposition of delta with occupations floored into
    (EIG_FLOOR, 1-EIG_FLOOR); returns (eigvals, eigvecs, floored)."""
    delta = 0.5 * (delta + delta.T)
    d, v = np.linalg.eigh(delta)
    floored = bool(d.min() < EIG_FLOOR or d.max() > 1.0 - EIG_FLOOR)
    d = np.clip(d, EIG_FLOOR, 1.0 - EIG_FLOOR)
    return d, v, floored


def hybridization(delta: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Solve sqrt(delta(1-delta)) D = K for the bath coupling D."""
    d, v, floored = _sqrt_factor(delta)
    if floored:
        warnings.warn(
            f"delta eigenvalue floored to [{EIG_FLOOR}, 1-{EIG_FLOOR}] "
            f"(raw spectrum {np.linalg.eigvalsh(delta)})",
            DegenerateBathWarning,
            stacklevel=2,
        )
    f = np.sqrt(d * (1.0 - d))
    return v @ ((v.T @ np.asarray(K, dtype=float)) / f)


def _divided_difference(d: np.ndarray) -> np.ndarray:
    """f^[1](d_i, d_j) for f(x) = sqrt(x(1-x)), with the analytic f' limit
    on near-degenerate pairs."""
    f = np.sqrt(d * (1.0 - d))
    di = d[:, None]
    dj = d[None, :]
    gap = di - dj
    near = np.abs(gap) < 1e-9
    mid = 0.5 * (di + dj)
    deriv = (1.0 - 2.0 * mid) / (2.0 * np.sqrt(mid * (1.0 - mid)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (f[:, None] - f[None, :]) / gap
    return np.where(near, deriv, ratio)


def _trace_sqrt_gradient(delta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """d Tr[A f(delta)] / d delta_ab for f(x) = sqrt(x(1-x)), via the
    Daleckii-Krein divided-difference formula; symmetrized over (a, b)."""
    d, v, _ = _sqrt_factor(delta)
    f1 = _divided_difference(d)
    c = v.T @ A @ v
    grad = v @ (f1 * c.T) @ v.T
    return 0.5 * (grad + grad.T)


def lambda_c_from(
    R: np.ndarray, delta: np.ndarray, D: np.ndarray, lam: np.ndarray
) -> np.ndarray:
    """Bath-level matrix: lambda_c = -lambda - d/d(delta) [Tr(R^T f(delta) D) + c.c.]."""
    R = np.asarray(R, dtype=float)
    D = np.asarray(D, dtype=float)
    A = 2.0 * np.outer(D, R)  # Tr(R^T f D) + c.c. = 2 Tr(f D R^T) for real inputs
    return -np.asarray(lam, dtype=float) - _trace_sqrt_gradient(delta, A)


def lambda_from(
    R: np.ndarray, delta: np.ndarray, D: np.ndarray, lam_c: np.ndarray
) -> np.ndarray:
    """Rearranged form: lambda = -lambda_c - d/d(delta) [Tr(R^T f(delta) D) + c.c.]."""
    R = np.asarray(R, dtype=float)
    D = np.asarray(D, dtype=float)
    A = 2.0 * np.outer(D, R)
    return -np.asarray(lam_c, dtype=float) - _trace_sqrt_gradient(delta, A)


def embedding_update(rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map the solver's per-spin density matrix back to (delta_emb, R_new).

    rho is the (B+1)x(B+1) spin block with index 0 the impurity;
    delta_emb,ab = delta_ab - rho_bath[b, a] and R solves
    <c^dag b_a> = [R^T sqrt(delta(1-delta))]_a.
    """
    rho = np.asarray(rho, dtype=float)
    mixed = rho[0, 1:]
    delta_emb = np.eye(rho.shape[0] - 1) - rho[1:, 1:].T
    delta_emb = 0.5 * (delta_emb + delta_emb.T)
    d, v, floored = _sqrt_factor(delta_emb)
    if floored:
        warnings.warn(
            "embedding bath occupation floored (constraint violation)",
            DegenerateBathWarning,
            stacklevel=2,
        )
    f = np.sqrt(d * (1.0 - d))
    R_new = v @ ((v.T @ mixed) / f)
    return delta_emb, R_new


def state_from_density_matrix(
    rho: np.ndarray, D: np.ndarray, lam_c: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Recover (R, lambda) from a (possibly noisy) measured density matrix,
    given the embedding couplings the circuit was built from."""
    _, R = embedding_update(rho)
    delta_emb = np.eye(rho.shape[0] - 1) - np.asarray(rho, dtype=float)[1:, 1:].T
    lam = lambda_from(R, delta_emb, D, np.diag(np.asarray(lam_c, dtype=float)))
    return R, 0.5 * (lam + lam.T)


def initial_state(B: int, seed: int | None = None, perturbation: float = 0.0) -> GGAState:
    """Default loop seed: normalized R biased toward the physical amplitude,
    alternating-sign ghost levels to break the R_ghost = 0 saddle."""
    R = np.full(B, 0.3)
    R[0] = 1.0
    R /= np.linalg.norm(R)
    diag = np.zeros(B)
    for a in range(1, B):
        diag[a] = 0.5 if a % 2 == 1 else -0.5
    lam = np.diag(diag)
    if perturbation > 0.0 and seed is not None:
        rng = np.random.default_rng(seed)
        R = R + perturbation * rng.normal(size=B)
        R /= np.linalg.norm(R)
        bump = perturbation * rng.normal(size=(B, B))
        lam = lam + 0.5 * (bump + bump.T)
    return GGAState(R=R, lam=lam, delta=np.full((B, B), 0.5))


def _fix_gauge(lam_c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Diagonalize lambda_c with deterministic ordering and column signs."""
    lc, O = np.linalg.eigh(0.5 * (lam_c + lam_c.T))
    for col in range(O.shape[1]):
        lead = np.argmax(np.abs(O[:, col]))
        if O[lead, col] < 0:
            O[:, col] = -O[:, col]
    return lc, O


@dataclass
class LoopConfig:
    mixing: float = 0.3
    tol: float = 1e-6
    max_iter: int = 500
    g: float = 10.0
    n_nodes: int = 1000
    seed: int | None = None
    perturbation: float = 0.0


@dataclass
class IterationRecord:
    iteration: int
    residual: float
    energy: float
    docc: float
    R: np.ndarray


@dataclass
class SelfConsistencyResult:
    converged: bool
    state: GGAState
    params: EmbeddingParams
    docc: float
    energy: float
    rho: np.ndarray
    history: list[IterationRecord] = field(default_factory=list)
    solver_info: dict = field(default_factory=dict)

    @property
    def residual(self) -> float:
        return self.history[-1].residual if self.history else np.inf


class EDSolver:
    """Sector exact diagonalization as the embedding ground-state solver."""

    name = "ed"

    def solve(self, params: EmbeddingParams) -> tuple[float, np.ndarray, float, dict]:
        energy, state = fock.ground_state(params)
        rho = fock.density_matrix(state)[0]
        return energy, rho, fock.double_occupancy(state), {}


def self_consistency(
    U: float,
    B: int,
    solver=None,
    config: LoopConfig | None = None,
    init: GGAState | None = None,
) -> SelfConsistencyResult:
    """Iterate lattice moments <-> embedding ground state to the gGA fixed
    point, re-imposing the diagonal-lambda_c gauge each iteration."""
    config = config or LoopConfig()
    solver = solver or EDSolver()
    grid = QuadratureGrid.chebyshev(config.n_nodes)
    if init is None:
        init = initial_state(B, seed=config.seed, perturbation=config.perturbation)
    R = init.R.copy()
    lam = init.lam.copy()
    alpha = config.mixing
    history: list[IterationRecord] = []
    converged = False
    params = None
    rho = None
    docc = np.nan
    energy = np.nan
    delta_lat = np.full((B, B), 0.5)

    for it in range(config.max_iter):
        delta_lat, K = lattice_moments(R, lam, grid)
        D = hybridization(delta_lat, K)
        lam_c = lambda_c_from(R, delta_lat, D, lam)

        lc, O = _fix_gauge(lam_c)
        R = O.T @ R
        lam = O.T @ lam @ O
        delta_lat = O.T @ delta_lat @ O
        D = O.T @ D

        params = EmbeddingParams(U=U, D=tuple(D), lambda_c=tuple(lc), g=config.g)
        energy, rho, docc, _info = solver.solve(params)

        delta_emb, R_new = embedding_update(rho)
        lam_new = lambda_from(R_new, delta_emb, D, np.diag(lc))

        residual = max(
            np.max(np.abs(R_new - R)),
            np.max(np.abs(lam_new - lam)),
        )
        R = (1.0 - alpha) * R + alpha * R_new
        lam = (1.0 - alpha) * lam + alpha * lam_new
        history.append(
            IterationRecord(iteration=it, residual=float(residual), energy=energy, docc=docc, R=R.copy())
        )
        if residual < config.tol:
            converged = True
            break

    state = GGAState(R=R, lam=lam, delta=delta_lat)
    return SelfConsistencyResult(
        converged=converged,
        state=state,
        params=params,
        docc=float(docc),
        energy=float(energy),
        rho=rho,
        history=history,
        solver_info=getattr(solver, "info", {}),
    )
