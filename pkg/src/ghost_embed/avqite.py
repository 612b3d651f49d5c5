"""Adaptive variational imaginary-time ground-state preparation.

The ansatz is a pseudo-Trotter product prod_k exp(-i theta_k G_k) |ref> with
generators drawn from the odd-Y qubit-excitation pool, so every factor is a
real matrix and the state stays real for the real embedding Hamiltonians.
Time stepping follows the McLachlan flow; the ansatz grows only when the
McLachlan distance to the exact imaginary-time derivative exceeds the cut.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import fock
from .fock import EmbeddingParams
from .pauli import (
    ModeLayout,
    PauliString,
    PauliSum,
    build_pool,
    density_matrix_operator,
    double_occupancy_operator,
    map_embedding_hamiltonian,
)
from .qsim import (
    Circuit,
    PauliRotation,
    X,
    _layered_depth,
    _pauli_action,
    apply_pauli,
    basis_state,
)

TIKHONOV = 1e-6
ENERGY_BACKTRACK_TOL = 1e-8
MAX_HALVINGS = 20


class StepFailureError(RuntimeError):
    """Energy refused to decrease after exhausting time-step halvings."""


class AdaptationStallError(RuntimeError):
    """No pool candidate reduces the McLachlan distance."""


def reference_bitmask(layout: ModeLayout) -> int:
    """Product reference: impurity plus the first (B-1)/2 bath modes fully
    occupied in both spin sectors (B+1 particles, S_z = 0)."""
    mask = 0
    for spin in (0, 1):
        for mu in range((layout.B - 1) // 2 + 1):
            mask |= 1 << layout.qubit(mu, spin)
    return mask


@dataclass
class AnsatzState:
    n_qubits: int
    reference: int
    generators: list[PauliString] = field(default_factory=list)
    thetas: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_params(self) -> int:
        return len(self.generators)

    @property
    def depth(self) -> int:
        """Layers of unitaries under greedy disjoint-support packing."""
        return _layered_depth(g.support for g in self.generators)

    def top_layer_qubits(self) -> set[int]:
        levels: dict[int, int] = {}
        depth = 0
        for g in self.generators:
            lvl = 1 + max((levels.get(q, 0) for q in g.support), default=0)
            for q in g.support:
                levels[q] = lvl
            depth = max(depth, lvl)
        return {q for q, lvl in levels.items() if lvl == depth}

    def statevector(self) -> np.ndarray:
        psi = basis_state(self.n_qubits, self.reference)
        for g, theta in zip(self.generators, self.thetas):
            perm, phase = _pauli_action(self.n_qubits, g.z, g.x)
            psi = np.cos(theta) * psi - (1j * np.sin(theta) * phase) * psi[perm]
        return psi

    def to_circuit(self) -> Circuit:
        circ = Circuit(self.n_qubits)
        for q in range(self.n_qubits):
            if (self.reference >> q) & 1:
                circ.add(X(q))
        for g, theta in zip(self.generators, self.thetas):
            circ.add(PauliRotation(g, float(theta)))
        return circ

    def to_json(self) -> dict:
        return {
            "n_qubits": self.n_qubits,
            "reference": format(self.reference, f"0{self.n_qubits}b")[::-1],
            "terms": [[g.label(), float(t)] for g, t in zip(self.generators, self.thetas)],
        }

    @classmethod
    def from_json(cls, data: dict | str) -> "AnsatzState":
        if isinstance(data, str):
            data = json.loads(data)
        n = int(data["n_qubits"])
        ref_bits = data["reference"][::-1]
        return cls(
            n_qubits=n,
            reference=int(ref_bits, 2) if ref_bits else 0,
            generators=[PauliString.from_label(lbl) for lbl, _ in data["terms"]],
            thetas=np.array([t for _, t in data["terms"]], dtype=float),
        )


@dataclass
class McLachlanData:
    M: np.ndarray
    V: np.ndarray
    varH: float
    L2: float
    energy: float
    theta_dot: np.ndarray
    psi: np.ndarray = field(repr=False, default=None)
    dstates: np.ndarray = field(repr=False, default=None)
    hpsi: np.ndarray = field(repr=False, default=None)


class CompiledHamiltonian:
    """Pauli-sum fixed to arrays for fast repeated application."""

    def __init__(self, h: PauliSum):
        if not h.is_hermitian():
            raise ValueError("Hamiltonian must be Hermitian")
        self.n = h.n
        items = sorted(h.terms.items(), key=lambda it: it[0].label())
        self.coeffs = np.array([c.real for _, c in items])
        self.perms = np.stack(
            [_pauli_action(self.n, p.z, p.x)[0] for p, _ in items]
        ) if items else np.zeros((0, 1 << h.n), dtype=int)
        self.phases = np.stack(
            [_pauli_action(self.n, p.z, p.x)[1] for p, _ in items]
        ) if items else np.zeros((0, 1 << h.n), dtype=complex)

    def apply(self, psi: np.ndarray) -> np.ndarray:
        if len(self.coeffs) == 0:
            return np.zeros_like(psi)
        return np.einsum("t,td,td->d", self.coeffs, self.phases, psi[self.perms])


def derivative_states(ansatz: AnsatzState) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass returning (psi, D) with D[k] = prod_{j>=k} U_j (-i G_k)
    prod_{j<k} U_j |ref> computed exactly on the statevector."""
    n = ansatz.n_qubits
    dim = 1 << n
    psi = basis_state(n, ansatz.reference)
    N = ansatz.n_params
    D = np.zeros((N, dim), dtype=complex)
    for k, (g, theta) in enumerate(zip(ansatz.generators, ansatz.thetas)):
        perm, phase = _pauli_action(n, g.z, g.x)
        D[k] = -1j * (phase * psi[perm])
        block = D[: k + 1]
        D[: k + 1] = np.cos(theta) * block - (1j * np.sin(theta) * phase) * block[:, perm]
        psi = np.cos(theta) * psi - (1j * np.sin(theta) * phase) * psi[perm]
    return psi, D


def mclachlan(
    ansatz: AnsatzState, ham: CompiledHamiltonian, tikhonov: float = TIKHONOV
) -> McLachlanData:
    """Metric M, gradient V, energy variance, and McLachlan distance L^2.

    M_kl = Re(<d_k|d_l> + <d_k|psi><psi|d_l>); V_k = Re <d_k|(H-E)|psi>;
    L^2 = varH - V^T (M + r)^+ V with the same Tikhonov-regularized inverse
    used for the flow theta_dot = -(M + r)^{-1} V.
    """
    psi, D = derivative_states(ansatz)
    hpsi = ham.apply(psi)
    energy = float(np.real(np.vdot(psi, hpsi)))
    varh = float(np.real(np.vdot(hpsi, hpsi))) - energy**2
    varh = max(varh, 0.0)
    if ansatz.n_params == 0:
        return McLachlanData(
            M=np.zeros((0, 0)), V=np.zeros(0), varH=varh, L2=varh,
            energy=energy, theta_dot=np.zeros(0), psi=psi, dstates=D, hpsi=hpsi,
        )
    a = D.conj() @ psi
    M = np.real(D.conj() @ D.T) + np.real(np.outer(a, a.conj()))
    resid = hpsi - energy * psi
    V = np.real(D.conj() @ resid)
    reg = M + tikhonov * np.eye(len(V))
    theta_dot = scipy.linalg.solve(reg, -V, assume_a="pos")
    l2 = varh + float(V @ theta_dot)
    return McLachlanData(
        M=M, V=V, varH=varh, L2=max(l2, 0.0), energy=energy,
        theta_dot=theta_dot, psi=psi, dstates=D, hpsi=hpsi,
    )


_POOL_ACTION_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _pool_actions(pool: list[PauliString], n: int):
    key = (n, tuple((g.z, g.x) for g in pool))
    if key not in _POOL_ACTION_CACHE:
        perms = np.stack([_pauli_action(n, g.z, g.x)[0] for g in pool])
        phases = np.stack([_pauli_action(n, g.z, g.x)[1] for g in pool])
        _POOL_ACTION_CACHE.clear()  # one pool in flight at a time
        _POOL_ACTION_CACHE[key] = (perms, phases)
    return _POOL_ACTION_CACHE[key]


def _score_candidates(mcl: McLachlanData, pool, n, tikhonov):
    """Prospective L^2 for each pool generator appended at theta = 0,
    via the bordered (Schur-complement) update of the regularized solve."""
    perms, phases = _pool_actions(pool, n)
    psi = mcl.psi
    dc = -1j * (phases * psi[perms])  # (n_pool, dim)
    resid = mcl.hpsi - mcl.energy * psi
    v_new = np.real(dc.conj() @ resid)
    a_new = dc.conj() @ psi
    diag = 1.0 + np.abs(a_new) ** 2 + tikhonov
    N = len(mcl.V)
    if N == 0:
        drop = v_new**2 / diag
        return mcl.L2 - drop
    a = mcl.dstates.conj() @ psi
    mcols = np.real(mcl.dstates.conj() @ dc.T) + np.real(np.outer(a, a_new.conj()))
    reg = mcl.M + tikhonov * np.eye(N)
    cho = scipy.linalg.cho_factor(reg)
    u_vec = scipy.linalg.cho_solve(cho, mcl.V)
    C = scipy.linalg.cho_solve(cho, mcols)
    schur = diag - np.sum(mcols * C, axis=0)
    schur = np.maximum(schur, 1e-12)
    drop = (v_new - mcols.T @ u_vec) ** 2 / schur
    return mcl.L2 - drop


def adapt(
    ansatz: AnsatzState,
    ham: CompiledHamiltonian,
    pool: list[PauliString],
    l2_cut: float,
    tikhonov: float = TIKHONOV,
    max_params: int = 10_000,
) -> tuple[AnsatzState, McLachlanData]:
    """Append zero-angle generators (tangent directions only) until the
    McLachlan distance falls below the cut.

    Candidates are ranked by prospective L^2; ties within 1e-10 prefer
    supports disjoint from the current top circuit layer, then the lowest
    label lexicographically.
    """
    if not pool:
        raise ValueError("empty operator pool")
    mcl = mclachlan(ansatz, ham, tikhonov)
    while mcl.L2 > l2_cut and ansatz.n_params < max_params:
        prospective = _score_candidates(mcl, pool, ansatz.n_qubits, tikhonov)
        best = prospective.min()
        if mcl.L2 - best <= 1e-12:
            raise AdaptationStallError(
                f"no candidate reduces L2 = {mcl.L2:.3e} (cut {l2_cut:.1e}, "
                f"N_theta = {ansatz.n_params})"
            )
        tied = np.flatnonzero(prospective <= best + 1e-10)
        top = ansatz.top_layer_qubits()
        disjoint = [i for i in tied if not (set(pool[i].support) & top)]
        ranked = disjoint if disjoint else list(tied)
        pick = min(ranked, key=lambda i: pool[i].label())
        ansatz.generators.append(pool[pick])
        ansatz.thetas = np.append(ansatz.thetas, 0.0)
        mcl = mclachlan(ansatz, ham, tikhonov)
    return ansatz, mcl


def step(
    ansatz: AnsatzState,
    ham: CompiledHamiltonian,
    dtau: float,
    mcl: McLachlanData,
) -> tuple[McLachlanData, float]:
    """theta <- theta + dtau * theta_dot with energy-decrease backtracking."""
    base = ansatz.thetas.copy()
    trial_dtau = dtau
    for _ in range(MAX_HALVINGS + 1):
        ansatz.thetas = base + trial_dtau * mcl.theta_dot
        new = mclachlan(ansatz, ham)
        if new.energy <= mcl.energy + ENERGY_BACKTRACK_TOL:
            return new, trial_dtau
        trial_dtau *= 0.5
    ansatz.thetas = base
    raise StepFailureError(
        f"energy non-decreasing after {MAX_HALVINGS} halvings "
        f"(E = {mcl.energy:.10f}, dtau = {dtau})"
    )


@dataclass
class AvqiteConfig:
    dtau: float = 0.02
    l2_cut: float = 1e-3
    energy_tol: float = 1e-8
    max_params: int = 500
    tikhonov: float = TIKHONOV
    max_steps: int = 100_000


@dataclass
class Checkpoint:
    depth: int
    n_theta: int
    energy: float
    eps_dm_max: float
    infidelity: float
    R: list[float]
    docc: float

    def to_json(self) -> dict:
        return {
            "D": self.depth,
            "N_theta": self.n_theta,
            "energy": self.energy,
            "eps_dm_max": self.eps_dm_max,
            "infidelity": self.infidelity,
            "R": self.R,
            "docc": self.docc,
        }


@dataclass
class AvqiteResult:
    ansatz: AnsatzState
    energy: float
    trajectory: list[Checkpoint]
    converged: bool
    n_steps: int


def statevector_density_matrix(psi: np.ndarray, layout: ModeLayout) -> np.ndarray:
    """Per-spin one-particle density matrix of a register state."""
    n_orb = layout.B + 1
    rho = np.zeros((2, n_orb, n_orb))
    for spin in (0, 1):
        for mu in range(n_orb):
            for nu in range(mu, n_orb):
                op = density_matrix_operator(mu, nu, spin, layout)
                val = 0.0
                for p, c in op:
                    val += np.real(c * np.vdot(psi, apply_pauli(psi, p)))
                rho[spin, mu, nu] = val
                rho[spin, nu, mu] = val
    return rho


def statevector_double_occupancy(psi: np.ndarray, layout: ModeLayout) -> float:
    op = double_occupancy_operator(layout)
    val = 0.0
    for p, c in op:
        val += np.real(c * np.vdot(psi, apply_pauli(psi, p)))
    return float(val)


class EDReference:
    """Exact-diagonalization observables for convergence tracking."""

    def __init__(self, params: EmbeddingParams):
        self.layout = ModeLayout(params.B)
        self.energy, state = fock.ground_state(params)
        self.rho = fock.density_matrix(state)
        self.docc = fock.double_occupancy(state)
        self.statevector = state.to_statevector()


def _checkpoint(ansatz, mcl, ref: EDReference | None) -> Checkpoint:
    if ref is None:
        # generic Hamiltonian: no embedding observables to track
        return Checkpoint(
            depth=ansatz.depth,
            n_theta=ansatz.n_params,
            energy=mcl.energy,
            eps_dm_max=float("nan"),
            infidelity=float("nan"),
            R=[],
            docc=float("nan"),
        )
    psi = mcl.psi
    rho = statevector_density_matrix(psi, ref.layout)
    docc = statevector_double_occupancy(psi, ref.layout)
    eps = float(np.max(np.abs(rho - ref.rho)))
    fid = float(np.abs(np.vdot(ref.statevector, psi)) ** 2)
    from .gga import embedding_update

    try:
        with np.errstate(all="ignore"):
            _, R = embedding_update(rho[0])
        r_list = [float(x) for x in R]
    except Exception:
        r_list = []
    return Checkpoint(
        depth=ansatz.depth,
        n_theta=ansatz.n_params,
        energy=mcl.energy,
        eps_dm_max=eps,
        infidelity=max(1.0 - fid, 0.0),
        R=r_list,
        docc=docc,
    )


def run(
    h: PauliSum,
    config: AvqiteConfig | None = None,
    reference: int | None = None,
    pool: list[PauliString] | None = None,
    ed_reference: EDReference | None = None,
    ansatz: AnsatzState | None = None,
) -> AvqiteResult:
    """Alternate adapt/step until the energy plateaus.

    Convergence requires |dE| < energy_tol over 10 consecutive steps;
    growth stops at max_params.  A checkpoint is recorded every time the
    layered circuit depth increases (observables of the last state at the
    previous depth) plus one final record.
    """
    config = config or AvqiteConfig()
    ham = CompiledHamiltonian(h)
    n = h.n
    pool = pool or build_pool(n)
    if ansatz is None:
        if reference is None:
            raise ValueError("need a reference bitstring or an initial ansatz")
        ansatz = AnsatzState(n_qubits=n, reference=reference)
    trajectory: list[Checkpoint] = []
    mcl = mclachlan(ansatz, ham, config.tikhonov)
    flat = 0
    converged = False
    steps_taken = 0
    last_depth = ansatz.depth
    pending = _checkpoint(ansatz, mcl, ed_reference)
    for _ in range(config.max_steps):
        if mcl.L2 > config.l2_cut and ansatz.n_params < config.max_params:
            ansatz, mcl = adapt(
                ansatz, ham, pool, config.l2_cut, config.tikhonov, config.max_params
            )
            if ansatz.depth > last_depth:
                trajectory.append(pending)
                last_depth = ansatz.depth
        e_before = mcl.energy
        mcl, _used = step(ansatz, ham, config.dtau, mcl)
        steps_taken += 1
        pending = _checkpoint(ansatz, mcl, ed_reference)
        if abs(mcl.energy - e_before) < config.energy_tol:
            flat += 1
            if flat >= 10:
                converged = True
                break
        else:
            flat = 0
        if ansatz.n_params >= config.max_params and mcl.L2 > config.l2_cut:
            # growth exhausted; keep relaxing until the plateau triggers
            pass
    trajectory.append(pending)
    return AvqiteResult(
        ansatz=ansatz,
        energy=mcl.energy,
        trajectory=trajectory,
        converged=converged,
        n_steps=steps_taken,
    )
