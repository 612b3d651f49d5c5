"""Exact-diagonalization impurity solver in the half-filled singlet sector.

Basis states are occupation bitmasks over the 2(B+1) spin-orbital modes of
``ModeLayout`` (bit p = mode p occupied).  A basis state is the Fock state
built by applying creation operators in ascending mode order, which makes
the sector amplitudes directly reusable as computational-basis amplitudes
after Jordan-Wigner mapping.
"""
from __future__ import annotations

import functools
import itertools
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .pauli import ModeLayout

DEGENERACY_TOL = 1e-10


@dataclass(frozen=True)
class EmbeddingParams:
    """Couplings of the impurity-plus-bath embedding Hamiltonian.

    D and lambda_c are length-B, spin-independent; lambda_c holds the
    diagonal bath levels (diagonal gauge).  Energies in units of the
    half-bandwidth.
    """

    U: float
    D: tuple[float, ...]
    lambda_c: tuple[float, ...]
    g: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "D", tuple(float(v) for v in self.D))
        object.__setattr__(self, "lambda_c", tuple(float(v) for v in self.lambda_c))
        if len(self.D) != len(self.lambda_c):
            raise ValueError("D and lambda_c must have equal length")
        if len(self.D) % 2 == 0:
            raise ValueError("bath orbital parameter B must be odd")
        if self.g < 0:
            raise ValueError("penalty prefactor g must be nonnegative")

    @property
    def B(self) -> int:
        return len(self.D)

    def to_json(self) -> dict:
        return {
            "U": self.U,
            "D": list(self.D),
            "lambda_c": list(self.lambda_c),
            "g": self.g,
        }

    @classmethod
    def from_json(cls, data: dict | str) -> "EmbeddingParams":
        if isinstance(data, str):
            data = json.loads(data)
        return cls(
            U=float(data["U"]),
            D=tuple(data["D"]),
            lambda_c=tuple(data["lambda_c"]),
            g=float(data.get("g", 10.0)),
        )


@dataclass
class SectorBasis:
    """All bitmasks with B+1 particles and S_z = 0 under the ModeLayout."""

    B: int
    states: np.ndarray  # ascending int bitmasks
    index: dict[int, int] = field(repr=False)

    @property
    def n_modes(self) -> int:
        return 2 * (self.B + 1)

    @property
    def dim(self) -> int:
        return len(self.states)


@functools.lru_cache(maxsize=8)
def build_basis(B: int) -> SectorBasis:
    if B % 2 == 0:
        raise ValueError("bath orbital parameter B must be odd")
    if B > 7:
        raise ValueError("sector basis limited to B <= 7")
    n_orb = B + 1
    half = n_orb // 2
    ups = [
        sum(1 << m for m in combo)
        for combo in itertools.combinations(range(n_orb), half)
    ]
    dns = [mask << n_orb for mask in ups]
    states = np.array(sorted(u | d for u in ups for d in dns), dtype=np.int64)
    states.setflags(write=False)
    index = {int(s): i for i, s in enumerate(states)}
    return SectorBasis(B=B, states=states, index=index)


@dataclass
class ManyBodyState:
    basis: SectorBasis
    amplitudes: np.ndarray

    def normalized(self) -> "ManyBodyState":
        return ManyBodyState(self.basis, self.amplitudes / np.linalg.norm(self.amplitudes))

    def to_statevector(self) -> np.ndarray:
        """Embed into the full 2^(2(B+1)) computational-basis register."""
        vec = np.zeros(1 << self.basis.n_modes, dtype=complex)
        vec[self.basis.states] = self.amplitudes
        return vec


def _apply_ops(mask: int, ops: list[tuple[bool, int]]) -> tuple[int, int] | None:
    """Apply a right-to-left product of ladder operators to a Fock bitmask.

    ops lists (create, mode) pairs left-to-right as written in the operator
    product; returns (sign, new_mask) or None when annihilated.
    """
    sign = 1
    for create, mode in reversed(ops):
        bit = 1 << mode
        occupied = mask & bit
        if create == bool(occupied):
            return None
        if (mask & (bit - 1)).bit_count() % 2:
            sign = -sign
        mask ^= bit
    return sign, mask


@functools.lru_cache(maxsize=256)
def _one_body_cached(B: int, p: int, q: int) -> np.ndarray:
    basis = build_basis(B)
    dim = basis.dim
    out = np.zeros((dim, dim))
    for col, mask in enumerate(basis.states):
        res = _apply_ops(int(mask), [(True, p), (False, q)])
        if res is None:
            continue
        sign, new_mask = res
        row = basis.index.get(new_mask)
        if row is not None:
            out[row, col] += sign
    out.setflags(write=False)
    return out


def _one_body_matrix(basis: SectorBasis, p: int, q: int) -> np.ndarray:
    """Dense sector matrix of a^dag_p a_q."""
    return _one_body_cached(basis.B, p, q)


@functools.lru_cache(maxsize=8)
def _spin_squared_cached(B: int) -> np.ndarray:
    basis = build_basis(B)
    n_orb = B + 1
    dim = basis.dim
    out = np.zeros((dim, dim))
    for mu in range(n_orb):
        for nu in range(n_orb):
            ops = [(True, mu), (False, mu + n_orb), (True, nu + n_orb), (False, nu)]
            for col, mask in enumerate(basis.states):
                res = _apply_ops(int(mask), ops)
                if res is None:
                    continue
                sign, new_mask = res
                row = basis.index.get(new_mask)
                if row is not None:
                    out[row, col] += sign
    out.setflags(write=False)
    return out


def _spin_squared_matrix(basis: SectorBasis) -> np.ndarray:
    """S^2 restricted to the S_z = 0 sector, where S^2 = S+ S-."""
    return _spin_squared_cached(basis.B)


def build_hamiltonian(params: EmbeddingParams, basis: SectorBasis | None = None) -> np.ndarray:
    """Dense embedding Hamiltonian in the (N = B+1, S_z = 0) sector.

    The number penalty vanishes identically inside the sector; the g*S^2
    penalty is kept to pin the singlet.
    """
    B = params.B
    if basis is None:
        basis = build_basis(B)
    n_orb = B + 1
    layout = ModeLayout(B)
    dim = basis.dim
    h = np.zeros((dim, dim))

    occ = np.array(
        [[(int(m) >> p) & 1 for p in range(2 * n_orb)] for m in basis.states],
        dtype=float,
    )
    n_up = occ[:, layout.qubit(0, 0)]
    n_dn = occ[:, layout.qubit(0, 1)]
    diag = params.U * n_up * n_dn - (params.U / 2.0) * (n_up + n_dn)
    for a in range(1, B + 1):
        lam = params.lambda_c[a - 1]
        diag += lam * (1.0 - occ[:, layout.qubit(a, 0)])
        diag += lam * (1.0 - occ[:, layout.qubit(a, 1)])
    h[np.diag_indices(dim)] += diag

    for a in range(1, B + 1):
        for spin in (0, 1):
            hop = _one_body_matrix(basis, layout.qubit(0, spin), layout.qubit(a, spin))
            h += params.D[a - 1] * (hop + hop.T)

    if params.g > 0.0:
        h += params.g * _spin_squared_matrix(basis)

    if not np.allclose(h, h.T, atol=1e-12):
        raise RuntimeError("embedding Hamiltonian construction is not Hermitian")
    return h


def ground_state(params: EmbeddingParams) -> tuple[float, ManyBodyState]:
    """Lowest eigenpair in the sector; near-degenerate levels are broken
    toward the smaller <S^2> so the singlet is chosen deterministically at
    the metal-insulator coexistence point."""
    basis = build_basis(params.B)
    h = build_hamiltonian(params, basis)
    vals, vecs = scipy.linalg.eigh(h)
    pick = 0
    if len(vals) > 1 and vals[1] - vals[0] < DEGENERACY_TOL:
        s2 = _spin_squared_matrix(basis)
        cluster = np.flatnonzero(vals - vals[0] < DEGENERACY_TOL)
        expect = [vecs[:, i] @ s2 @ vecs[:, i] for i in cluster]
        pick = int(cluster[int(np.argmin(expect))])
    state = ManyBodyState(basis, vecs[:, pick].astype(complex)).normalized()
    return float(vals[pick]), state


def density_matrix(state: ManyBodyState) -> np.ndarray:
    """Per-spin one-particle density matrix rho[s, mu, nu] = <a^dag_mu a_nu>."""
    basis = state.basis
    B = basis.B
    n_orb = B + 1
    layout = ModeLayout(B)
    amp = state.amplitudes
    rho = np.zeros((2, n_orb, n_orb))
    for spin in (0, 1):
        for mu in range(n_orb):
            for nu in range(mu, n_orb):
                op = _one_body_matrix(basis, layout.qubit(mu, spin), layout.qubit(nu, spin))
                val = np.real(np.conj(amp) @ op @ amp)
                rho[spin, mu, nu] = val
                rho[spin, nu, mu] = val
    return rho


def double_occupancy(state: ManyBodyState) -> float:
    basis = state.basis
    layout = ModeLayout(basis.B)
    qu, qd = layout.qubit(0, 0), layout.qubit(0, 1)
    occ_both = ((basis.states >> qu) & 1) * ((basis.states >> qd) & 1)
    return float(np.sum(np.abs(state.amplitudes) ** 2 * occ_both))


def spin_squared_expectation(state: ManyBodyState) -> float:
    s2 = _spin_squared_matrix(state.basis)
    return float(np.real(np.conj(state.amplitudes) @ s2 @ state.amplitudes))


@dataclass(frozen=True)
class DmErrorMetrics:
    """Elementwise density-matrix errors plus the Frobenius trace distance."""

    eps: np.ndarray          # |rho_m - rho_ref| elementwise
    entries: np.ndarray      # flattened eps, with the docc error appended
    eps_max: float
    delta: float             # 0.5 * ||rho_m - rho_ref||_F


def dm_error_metrics(
    rho_measured: np.ndarray,
    rho_reference: np.ndarray,
    docc_measured: float | None = None,
    docc_reference: float | None = None,
) -> DmErrorMetrics:
    rho_measured = np.asarray(rho_measured)
    rho_reference = np.asarray(rho_reference)
    if rho_measured.shape != rho_reference.shape:
        raise ValueError("density-matrix shapes differ")
    diff = rho_measured - rho_reference
    eps = np.abs(diff)
    entries = eps.ravel()
    if (docc_measured is None) != (docc_reference is None):
        raise ValueError("supply both or neither double occupancy")
    if docc_measured is not None:
        entries = np.append(entries, abs(docc_measured - docc_reference))
    delta = 0.5 * float(np.linalg.norm(diff))
    return DmErrorMetrics(
        eps=eps,
        entries=entries,
        eps_max=float(entries.max()),
        delta=delta,
    )
