"""Phase-tracked Pauli-string algebra, Jordan-Wigner mapping, and operator pools.

Pauli strings are stored in symplectic form: an n-qubit string is a pair of
bitmasks (z, x) with bit q set when qubit q carries a Z / X component
(Y sets both).  Qubit 0 is the least significant bit and appears leftmost
in text labels, e.g. "YIXZ" puts Y on qubit 0.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

COEFF_PRUNE = 1e-14

_PAULI_MATS = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}

_LETTERS = {(0, 0): "I", (0, 1): "X", (1, 1): "Y", (1, 0): "Z"}
_BITS = {v: k for k, v in _LETTERS.items()}


class PauliString:
    """Immutable n-qubit Pauli word (no coefficient)."""

    __slots__ = ("n", "z", "x", "_hash")

    def __init__(self, n: int, z: int, x: int):
        if n <= 0:
            raise ValueError("need at least one qubit")
        mask = (1 << n) - 1
        if z & ~mask or x & ~mask:
            raise ValueError("z/x masks exceed qubit count")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "_hash", hash((n, z, x)))

    def __setattr__(self, *_):
        raise AttributeError("PauliString is immutable")

    @classmethod
    def from_label(cls, label: str) -> "PauliString":
        z = x = 0
        for q, ch in enumerate(label):
            try:
                zb, xb = _BITS[ch]
            except KeyError:
                raise ValueError(f"invalid Pauli letter {ch!r}") from None
            z |= zb << q
            x |= xb << q
        return cls(len(label), z, x)

    @classmethod
    def identity(cls, n: int) -> "PauliString":
        return cls(n, 0, 0)

    @classmethod
    def single(cls, n: int, q: int, letter: str) -> "PauliString":
        if not 0 <= q < n:
            raise ValueError(f"qubit {q} out of range for n={n}")
        zb, xb = _BITS[letter]
        return cls(n, zb << q, xb << q)

    def label(self) -> str:
        return "".join(
            _LETTERS[(self.z >> q) & 1, (self.x >> q) & 1] for q in range(self.n)
        )

    @property
    def support(self) -> tuple[int, ...]:
        zx = self.z | self.x
        return tuple(q for q in range(self.n) if (zx >> q) & 1)

    @property
    def weight(self) -> int:
        return (self.z | self.x).bit_count()

    @property
    def y_count(self) -> int:
        return (self.z & self.x).bit_count()

    def letter(self, q: int) -> str:
        return _LETTERS[(self.z >> q) & 1, (self.x >> q) & 1]

    def commutes(self, other: "PauliString") -> bool:
        if self.n != other.n:
            raise ValueError("qubit count mismatch")
        sym = (self.z & other.x).bit_count() + (self.x & other.z).bit_count()
        return sym % 2 == 0

    def qubitwise_commutes(self, other: "PauliString") -> bool:
        """True when the two words agree (or one is I) on every qubit."""
        if self.n != other.n:
            raise ValueError("qubit count mismatch")
        both = (self.z | self.x) & (other.z | other.x)
        return (self.z ^ other.z) & both == 0 and (self.x ^ other.x) & both == 0

    def matrix(self) -> np.ndarray:
        """Dense matrix; qubit 0 is the least significant index bit."""
        m = np.array([[1.0 + 0j]])
        for q in reversed(range(self.n)):
            m = np.kron(m, _PAULI_MATS[self.letter(q)])
        return m

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PauliString)
            and self.n == other.n
            and self.z == other.z
            and self.x == other.x
        )

    def __hash__(self) -> int:
        return self._hash

    def __repr__(self) -> str:
        return f"PauliString('{self.label()}')"


def multiply(p: PauliString, q: PauliString) -> tuple[complex, PauliString]:
    """Product of two Pauli words: matrix(p) @ matrix(q) == phase * matrix(r).

    The phase is one of {1, -1, 1j, -1j}, tracked through the symplectic
    representation P = i^{|y|} X^x Z^z.
    """
    if p.n != q.n:
        raise ValueError("qubit count mismatch")
    z = p.z ^ q.z
    x = p.x ^ q.x
    # i exponent: canonical-form factors of p, q minus the result's, plus the
    # anticommutation sign from moving Z^zp past X^xq.
    k = (
        p.y_count
        + q.y_count
        - (z & x).bit_count()
        + 2 * (p.z & q.x).bit_count()
    ) % 4
    return (1j) ** k, PauliString(p.n, z, x)


class PauliSum:
    """Weighted sum of Pauli words over a fixed qubit register.

    Terms with |coefficient| below ``COEFF_PRUNE`` are dropped on
    simplification.  Energies are in units of the half-bandwidth W = 1.
    """

    __slots__ = ("n", "terms")

    def __init__(self, n: int, terms: dict[PauliString, complex] | None = None):
        self.n = n
        self.terms: dict[PauliString, complex] = {}
        if terms:
            for p, c in terms.items():
                self._add_term(p, c)
            self.simplify()

    def _add_term(self, p: PauliString, c: complex) -> None:
        if p.n != self.n:
            raise ValueError("qubit count mismatch")
        self.terms[p] = self.terms.get(p, 0.0) + complex(c)

    def simplify(self, threshold: float = COEFF_PRUNE) -> "PauliSum":
        self.terms = {p: c for p, c in self.terms.items() if abs(c) > threshold}
        return self

    def copy(self) -> "PauliSum":
        out = PauliSum(self.n)
        out.terms = dict(self.terms)
        return out

    @classmethod
    def zero(cls, n: int) -> "PauliSum":
        return cls(n)

    @classmethod
    def from_term(cls, p: PauliString, c: complex = 1.0) -> "PauliSum":
        out = cls(p.n)
        out._add_term(p, c)
        return out.simplify()

    @classmethod
    def constant(cls, n: int, c: complex) -> "PauliSum":
        return cls.from_term(PauliString.identity(n), c)

    def __iter__(self) -> Iterator[tuple[PauliString, complex]]:
        return iter(self.terms.items())

    def __len__(self) -> int:
        return len(self.terms)

    def __add__(self, other: "PauliSum") -> "PauliSum":
        out = self.copy()
        for p, c in other:
            out._add_term(p, c)
        return out.simplify()

    def __sub__(self, other: "PauliSum") -> "PauliSum":
        return self + (other * -1.0)

    def __mul__(self, scalar: complex) -> "PauliSum":
        out = PauliSum(self.n)
        for p, c in self.terms.items():
            out.terms[p] = c * scalar
        return out.simplify()

    __rmul__ = __mul__

    def __matmul__(self, other: "PauliSum") -> "PauliSum":
        out = PauliSum(self.n)
        for p, cp in self.terms.items():
            for q, cq in other.terms.items():
                phase, r = multiply(p, q)
                out._add_term(r, cp * cq * phase)
        return out.simplify()

    def dagger(self) -> "PauliSum":
        out = PauliSum(self.n)
        for p, c in self.terms.items():
            out.terms[p] = c.conjugate()
        return out

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        # every Pauli word is Hermitian, so Hermiticity <=> real coefficients
        return all(abs(c.imag) <= tol for c in self.terms.values())

    def matrix(self) -> np.ndarray:
        dim = 1 << self.n
        m = np.zeros((dim, dim), dtype=complex)
        for p, c in self.terms.items():
            m += c * p.matrix()
        return m

    def to_json(self) -> list[dict]:
        items = sorted(self.terms.items(), key=lambda it: it[0].label())
        return [
            {"string": p.label(), "re": float(c.real), "im": float(c.imag)}
            for p, c in items
        ]

    @classmethod
    def from_json(cls, data: Iterable[dict] | str) -> "PauliSum":
        if isinstance(data, str):
            data = json.loads(data)
        data = list(data)
        if not data:
            raise ValueError("empty PauliSum serialization (qubit count unknown)")
        n = len(data[0]["string"])
        out = cls(n)
        for item in data:
            out._add_term(
                PauliString.from_label(item["string"]),
                complex(item["re"], item.get("im", 0.0)),
            )
        return out.simplify()

    def __repr__(self) -> str:
        return f"PauliSum(n={self.n}, {len(self.terms)} terms)"


@dataclass(frozen=True)
class ModeLayout:
    """Spin-major mode ordering for the embedding model.

    Mode (mu, s) with mu in {0..B} (0 = impurity, 1..B = bath) and spin
    s in {0 (up), 1 (down)} sits on qubit mu + (B+1)*s.
    """

    B: int

    def __post_init__(self):
        if self.B < 1 or self.B % 2 == 0:
            raise ValueError("bath orbital parameter B must be odd and positive")

    @property
    def n_qubits(self) -> int:
        return 2 * (self.B + 1)

    def qubit(self, mu: int, spin: int) -> int:
        if not 0 <= mu <= self.B or spin not in (0, 1):
            raise ValueError(f"invalid mode ({mu}, {spin})")
        return mu + (self.B + 1) * spin


def jordan_wigner(mode: int, n_modes: int, kind: str) -> PauliSum:
    """Jordan-Wigner image of a single fermionic ladder operator.

    create:      (prod_{q<mode} Z_q) (X - iY)/2
    annihilate:  (prod_{q<mode} Z_q) (X + iY)/2
    """
    if not 0 <= mode < n_modes:
        raise ValueError(f"mode {mode} out of range for {n_modes} modes")
    if kind not in ("create", "annihilate"):
        raise ValueError("kind must be 'create' or 'annihilate'")
    zstring = (1 << mode) - 1
    sign = -1j if kind == "create" else 1j
    out = PauliSum(n_modes)
    out._add_term(PauliString(n_modes, zstring, 1 << mode), 0.5)  # Z...Z X
    out._add_term(PauliString(n_modes, zstring | (1 << mode), 1 << mode), 0.5 * sign)
    return out.simplify()


def number_operator(mode: int, n_modes: int) -> PauliSum:
    """a^dag a on one mode: (I - Z)/2."""
    out = PauliSum(n_modes)
    out._add_term(PauliString.identity(n_modes), 0.5)
    out._add_term(PauliString.single(n_modes, mode, "Z"), -0.5)
    return out


def build_pool(n_qubits: int) -> list[PauliString]:
    """Qubit-excitation operator pool: all Y_i X_j plus all weight-4 {X,Y}
    words with an odd number of Y letters.

    Every element has odd Y parity, hence a purely imaginary matrix in the
    computational basis; evolution under exp(-i theta G) keeps real states
    real.
    """
    if n_qubits < 4:
        raise ValueError("pool construction requires n_qubits >= 4")
    pool: list[PauliString] = []
    for i in range(n_qubits):
        for j in range(n_qubits):
            if i == j:
                continue
            z = 1 << i
            x = (1 << i) | (1 << j)
            pool.append(PauliString(n_qubits, z, x))  # Y_i X_j
    for positions in itertools.combinations(range(n_qubits), 4):
        for letters in itertools.product("XY", repeat=4):
            if letters.count("Y") % 2 == 0:
                continue
            z = x = 0
            for q, letter in zip(positions, letters):
                x |= 1 << q
                if letter == "Y":
                    z |= 1 << q
            pool.append(PauliString(n_qubits, z, x))
    return pool


def _ladder(layout: ModeLayout, mu: int, spin: int, kind: str) -> PauliSum:
    return jordan_wigner(layout.qubit(mu, spin), layout.n_qubits, kind)


def spin_operators(layout: ModeLayout) -> tuple[PauliSum, PauliSum, PauliSum]:
    """(S_z, S_plus, S_minus) summed over impurity and bath modes."""
    n = layout.n_qubits
    sz = PauliSum(n)
    sp = PauliSum(n)
    for mu in range(layout.B + 1):
        n_up = number_operator(layout.qubit(mu, 0), n)
        n_dn = number_operator(layout.qubit(mu, 1), n)
        sz = sz + 0.5 * (n_up - n_dn)
        sp = sp + (_ladder(layout, mu, 0, "create") @ _ladder(layout, mu, 1, "annihilate"))
    return sz, sp, sp.dagger()


def total_number_operator(layout: ModeLayout) -> PauliSum:
    n = layout.n_qubits
    out = PauliSum(n)
    for q in range(n):
        out = out + number_operator(q, n)
    return out


def total_spin_squared(layout: ModeLayout) -> PauliSum:
    """S^2 = S_z^2 + (S+ S- + S- S+)/2."""
    sz, sp, sm = spin_operators(layout)
    return (sz @ sz) + 0.5 * ((sp @ sm) + (sm @ sp))


def map_embedding_hamiltonian(params, layout: ModeLayout) -> PauliSum:
    """Qubit operator for the impurity-plus-bath embedding Hamiltonian.

    Includes the U interaction on the impurity, diagonal bath levels in the
    hole form lambda_c * b b^dag, the hybridization D (c^dag b + h.c.), and
    the penalty g * (S^2 + (N - B - 1)^2) that pins the half-filled singlet
    sector.
    """
    B = layout.B
    D = np.asarray(params.D, dtype=float)
    lam_c = np.asarray(params.lambda_c, dtype=float)
    if len(D) != B or len(lam_c) != B:
        raise ValueError(f"D and lambda_c must have length B={B}")
    if params.g < 0:
        raise ValueError("penalty prefactor g must be nonnegative")
    n = layout.n_qubits
    U = float(params.U)

    n_imp_up = number_operator(layout.qubit(0, 0), n)
    n_imp_dn = number_operator(layout.qubit(0, 1), n)
    h = U * (n_imp_up @ n_imp_dn) - (U / 2.0) * (n_imp_up + n_imp_dn)

    for a in range(1, B + 1):
        for spin in (0, 1):
            q = layout.qubit(a, spin)
            # lambda_c * b b^dag = lambda_c * (1 - n_b)
            h = h + lam_c[a - 1] * (PauliSum.constant(n, 1.0) - number_operator(q, n))
            hyb = _ladder(layout, 0, spin, "create") @ _ladder(layout, a, spin, "annihilate")
            h = h + D[a - 1] * (hyb + hyb.dagger())

    g = float(params.g)
    if g > 0.0:
        h = h + g * total_spin_squared(layout)
        dn = total_number_operator(layout) - PauliSum.constant(n, float(B + 1))
        h = h + g * (dn @ dn)
    return h.simplify()


def density_matrix_operator(mu: int, nu: int, spin: int, layout: ModeLayout) -> PauliSum:
    """JW image of a^dag_{mu,spin} a_{nu,spin}."""
    return _ladder(layout, mu, spin, "create") @ _ladder(layout, nu, spin, "annihilate")


def double_occupancy_operator(layout: ModeLayout) -> PauliSum:
    n = layout.n_qubits
    return number_operator(layout.qubit(0, 0), n) @ number_operator(layout.qubit(0, 1), n)
