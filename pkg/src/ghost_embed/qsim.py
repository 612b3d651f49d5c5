"""Statevector circuit simulator with mid-circuit measurement, shot sampling,
transpilation, and stochastic Pauli-noise trajectories.

States are dense complex vectors with qubit 0 on the least significant index
bit.  Gate application is functional (arrays may be reused in place when
contiguity allows).  Noise is realized as per-shot Pauli insertions, exact in
distribution for the bit-flip/depolarizing channels used here; the shot
engine shares the deterministic noiseless prefix between trajectories and
only integrates the suffix of shots that actually drew an insertion.
"""
from __future__ import annotations

import functools
import io
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .pauli import PauliString, PauliSum

SQRT1_2 = 1.0 / math.sqrt(2.0)
_MCM_TOL = 1e-9

_TWO_QUBIT_PAULIS = [
    (a, b) for a in "IXYZ" for b in "IXYZ" if (a, b) != ("I", "I")
]


# ---------------------------------------------------------------------------
# gates and circuits


@dataclass(frozen=True)
class H:
    q: int


@dataclass(frozen=True)
class Sdg:
    q: int


@dataclass(frozen=True)
class X:
    q: int


@dataclass(frozen=True)
class CX:
    control: int
    target: int


@dataclass(frozen=True)
class RZZ:
    """exp(-i theta Z_q1 Z_q2)."""

    q1: int
    q2: int
    theta: float


@dataclass(frozen=True)
class PauliRotation:
    """exp(-i theta P) = cos(theta) I - i sin(theta) P."""

    pauli: PauliString
    theta: float


@dataclass(frozen=True)
class MeasureZ:
    q: int
    cbit: int


@dataclass(frozen=True)
class Reset:
    q: int


Gate = H | Sdg | X | CX | RZZ | PauliRotation | MeasureZ | Reset

_1Q_GATES = (H, Sdg, X)


def gate_support(gate: Gate) -> tuple[int, ...]:
    if isinstance(gate, _1Q_GATES):
        return (gate.q,)
    if isinstance(gate, CX):
        return (gate.control, gate.target)
    if isinstance(gate, RZZ):
        return (gate.q1, gate.q2)
    if isinstance(gate, PauliRotation):
        return gate.pauli.support
    if isinstance(gate, MeasureZ):
        return (gate.q,)
    if isinstance(gate, Reset):
        return (gate.q,)
    raise TypeError(f"unknown gate {gate!r}")


def _layered_depth(supports) -> int:
    levels: dict[int, int] = {}
    depth = 0
    for qs in supports:
        lvl = 1 + max((levels.get(q, 0) for q in qs), default=0)
        for q in qs:
            levels[q] = lvl
        depth = max(depth, lvl)
    return depth


@dataclass
class Circuit:
    n_qubits: int
    gates: list[Gate] = field(default_factory=list)

    def __post_init__(self):
        for g in self.gates:
            self._check(g)

    def _check(self, gate: Gate) -> None:
        for q in gate_support(gate):
            if not 0 <= q < self.n_qubits:
                raise ValueError(f"qubit {q} out of range in {gate!r}")

    def add(self, gate: Gate) -> "Circuit":
        self._check(gate)
        self.gates.append(gate)
        return self

    def extend(self, gates) -> "Circuit":
        for g in gates:
            self.add(g)
        return self

    @property
    def n_cbits(self) -> int:
        bits = [g.cbit for g in self.gates if isinstance(g, MeasureZ)]
        return max(bits) + 1 if bits else 0

    @property
    def depth(self) -> int:
        """Layers of disjoint-support operations under greedy packing."""
        return _layered_depth(gate_support(g) for g in self.gates)

    def two_qubit_count(self) -> int:
        return sum(
            1
            for g in self.gates
            if isinstance(g, (CX, RZZ))
            or (isinstance(g, PauliRotation) and g.pauli.weight == 2)
        )

    def copy(self) -> "Circuit":
        return Circuit(self.n_qubits, list(self.gates))


# ---------------------------------------------------------------------------
# primitive state operations; all accept arrays of shape (..., 2^n)


@functools.lru_cache(maxsize=512)
def _cached_indices(n: int) -> np.ndarray:
    return np.arange(1 << n)


@functools.lru_cache(maxsize=512)
def _cx_perm(n: int, control: int, target: int) -> np.ndarray:
    idx = _cached_indices(n)
    perm = idx ^ (((idx >> control) & 1) << target)
    perm.setflags(write=False)
    return perm


@functools.lru_cache(maxsize=512)
def _x_perm(n: int, q: int) -> np.ndarray:
    perm = _cached_indices(n) ^ (1 << q)
    perm.setflags(write=False)
    return perm


@functools.lru_cache(maxsize=512)
def _sdg_phase(n: int, q: int) -> np.ndarray:
    idx = _cached_indices(n)
    phase = np.where((idx >> q) & 1, -1j, 1.0 + 0j)
    phase.setflags(write=False)
    return phase


@functools.lru_cache(maxsize=512)
def _rzz_sign(n: int, q1: int, q2: int) -> np.ndarray:
    idx = _cached_indices(n)
    parity = ((idx >> q1) ^ (idx >> q2)) & 1
    sign = 1.0 - 2.0 * parity
    sign.setflags(write=False)
    return sign


@functools.lru_cache(maxsize=2048)
def _pauli_action(n: int, z: int, x: int) -> tuple[np.ndarray, np.ndarray]:
    """(perm, phase) such that (P psi)[j] = phase[j] * psi[perm[j]]."""
    idx = _cached_indices(n)
    perm = idx ^ x
    y = (z & x).bit_count()
    signs = 1.0 - 2.0 * (np.bitwise_count(perm & z) & 1)
    phase = (1j**y) * signs.astype(complex)
    perm.setflags(write=False)
    phase.setflags(write=False)
    return perm, phase


def apply_pauli(state: np.ndarray, p: PauliString) -> np.ndarray:
    perm, phase = _pauli_action(p.n, p.z, p.x)
    return state[..., perm] * phase


def _apply_h(state, q):
    v = state.reshape(-1, 2, 1 << q)
    a = v[:, 0].copy()
    b = v[:, 1]
    v[:, 0] = (a + b) * SQRT1_2
    v[:, 1] = (a - b) * SQRT1_2
    return state


def apply_unitary_gate(state: np.ndarray, gate: Gate, n: int) -> np.ndarray:
    """Apply a non-measurement gate to shape (..., 2^n); may modify in place."""
    if isinstance(gate, H):
        return _apply_h(np.ascontiguousarray(state), gate.q)
    if isinstance(gate, Sdg):
        state *= _sdg_phase(n, gate.q)
        return state
    if isinstance(gate, X):
        return state[..., _x_perm(n, gate.q)]
    if isinstance(gate, CX):
        return state[..., _cx_perm(n, gate.control, gate.target)]
    if isinstance(gate, RZZ):
        state *= np.cos(gate.theta) - 1j * np.sin(gate.theta) * _rzz_sign(n, gate.q1, gate.q2)
        return state
    if isinstance(gate, PauliRotation):
        perm, phase = _pauli_action(n, gate.pauli.z, gate.pauli.x)
        return np.cos(gate.theta) * state - (1j * np.sin(gate.theta) * phase) * state[..., perm]
    raise TypeError(f"not a unitary gate: {gate!r}")


def _prob_one(state: np.ndarray, q: int) -> np.ndarray:
    """P(bit q = 1) for each leading row of shape (..., 2^n)."""
    lead = state.shape[:-1]
    v = state.reshape(*lead, -1, 2, 1 << q)
    return np.sum(np.abs(v[..., 1, :]) ** 2, axis=(-2, -1))


def _collapse(state: np.ndarray, q: int, outcome, prob_one) -> np.ndarray:
    """Project rows onto the given outcome of bit q and renormalize."""
    outcome = np.asarray(outcome)
    v = state.reshape(*state.shape[:-1], -1, 2, 1 << q)
    keep0 = (outcome == 0).astype(state.real.dtype)
    keep1 = 1.0 - keep0
    shape = outcome.shape + (1, 1)
    v[..., 0, :] *= keep0.reshape(shape)
    v[..., 1, :] *= keep1.reshape(shape)
    p = np.where(outcome == 1, prob_one, 1.0 - np.asarray(prob_one))
    p = np.maximum(p, 1e-300)
    state *= (1.0 / np.sqrt(p)).reshape(outcome.shape + (1,))
    return state


def apply(state: np.ndarray, gate: Gate, rng: np.random.Generator | None = None):
    """Single-state gate application; returns (state, outcome-or-None)."""
    n = int(math.log2(state.shape[-1]))
    if isinstance(gate, MeasureZ):
        if rng is None:
            raise ValueError("measurement needs an RNG")
        p1 = float(_prob_one(state[None, :], gate.q)[0])
        outcome = int(rng.random() < p1)
        state = _collapse(state.copy(), gate.q, np.array(outcome), np.array(p1))
        return state, outcome
    if isinstance(gate, Reset):
        if rng is None:
            raise ValueError("reset needs an RNG")
        p1 = float(_prob_one(state[None, :], gate.q)[0])
        outcome = int(rng.random() < p1)
        state = _collapse(state.copy(), gate.q, np.array(outcome), np.array(p1))
        if outcome:
            state = state[..., _x_perm(n, gate.q)]
        return state, None
    return apply_unitary_gate(state.copy(), gate, n), None


def zero_state(n: int) -> np.ndarray:
    state = np.zeros(1 << n, dtype=complex)
    state[0] = 1.0
    return state


def basis_state(n: int, bits: int) -> np.ndarray:
    state = np.zeros(1 << n, dtype=complex)
    state[bits] = 1.0
    return state


def simulate(circuit: Circuit, rng: np.random.Generator | None = None,
             initial: np.ndarray | None = None):
    """Run a circuit on a fresh |0..0> state; returns (state, bits array)."""
    state = zero_state(circuit.n_qubits) if initial is None else initial.astype(complex).copy()
    bits = np.zeros(circuit.n_cbits, dtype=np.uint8)
    for gate in circuit.gates:
        if isinstance(gate, MeasureZ):
            state, outcome = apply(state, gate, rng)
            bits[gate.cbit] = outcome
        elif isinstance(gate, Reset):
            state, _ = apply(state, gate, rng)
        else:
            state = apply_unitary_gate(state, gate, circuit.n_qubits)
    return state, bits


def expectation(state: np.ndarray, obs: PauliSum) -> complex:
    if state.shape[-1] != (1 << obs.n):
        raise ValueError("state dimension does not match observable register")
    total = 0.0 + 0.0j
    for p, c in obs:
        total += c * np.vdot(state, apply_pauli(state, p))
    return complex(total)


# ---------------------------------------------------------------------------
# noise model


@dataclass(frozen=True)
class NoiseModel:
    """SPAM bit-flip plus depolarizing channels, uniformly scaled.

    Defaults follow randomized-benchmarking rates of a trapped-ion device:
    p_bi = p_1q = 4e-4 and p_2q = p_bm = 3e-3.
    """

    p_bi: float = 4e-4
    p_1q: float = 4e-4
    p_2q: float = 3e-3
    p_bm: float = 3e-3
    noise_scale: float = 1.0

    def scaled(self) -> tuple[float, float, float, float]:
        probs = tuple(self.noise_scale * p for p in (self.p_bi, self.p_1q, self.p_2q, self.p_bm))
        if any(p < 0.0 or p > 1.0 for p in probs):
            raise ValueError(f"scaled error probabilities outside [0, 1]: {probs}")
        return probs

    @property
    def is_trivial(self) -> bool:
        return all(p == 0.0 for p in self.scaled())


def _pauli_gate_1q(n: int, q: int, kind: int) -> PauliString:
    return PauliString.single(n, q, "XYZ"[kind])


def _pauli_gate_2q(n: int, qs: tuple[int, int], kind: int) -> PauliString:
    la, lb = _TWO_QUBIT_PAULIS[kind]
    z = x = 0
    for q, letter in zip(qs, (la, lb)):
        if letter in ("Z", "Y"):
            z |= 1 << q
        if letter in ("X", "Y"):
            x |= 1 << q
    return PauliString(n, z, x)


# ---------------------------------------------------------------------------
# transpilation


@dataclass
class TranspileResult:
    circuit: Circuit
    n_2q: int
    depth: int


def _basis_change(letter: str, q: int, inverse: bool) -> list[Gate]:
    """Single-qubit rotation between the P eigenbasis and Z. The forward
    direction matches measurement convention (Sdg then H for Y); the
    inverse uses S = Sdg^3 since the gate set carries no S."""
    if letter == "X":
        return [H(q)]
    if letter == "Y":
        if inverse:
            return [H(q), Sdg(q), Sdg(q), Sdg(q)]
        return [Sdg(q), H(q)]
    return []


def _decompose_rotation(gate: PauliRotation) -> list[Gate]:
    p = gate.pauli
    support = list(p.support)
    w = len(support)
    if w == 0:
        return []  # global phase only
    if w == 1:
        return [gate]  # acts as a plain 1q unitary
    out: list[Gate] = []
    for q in support:
        out.extend(_basis_change(p.letter(q), q, inverse=False))
    for a, b in zip(support[:-2], support[1:-1]):
        out.append(CX(a, b))
    out.append(RZZ(support[-2], support[-1], gate.theta))
    for a, b in reversed(list(zip(support[:-2], support[1:-1]))):
        out.append(CX(a, b))
    for q in support:
        out.extend(_basis_change(p.letter(q), q, inverse=True))
    return out


def transpile(circuit: Circuit) -> TranspileResult:
    """Expand Pauli rotations into {1q, CX, RZZ} via the CNOT-ladder
    decomposition: a weight-w rotation costs 2(w-2) + 1 two-qubit gates."""
    gates: list[Gate] = []
    for g in circuit.gates:
        if isinstance(g, PauliRotation):
            gates.extend(_decompose_rotation(g))
        else:
            gates.append(g)
    out = Circuit(circuit.n_qubits, gates)
    return TranspileResult(circuit=out, n_2q=out.two_qubit_count(), depth=out.depth)


# ---------------------------------------------------------------------------
# trajectory engine

# step kinds
_GATE, _INIT_FLIP, _NOISE1, _NOISE2, _PREMEAS, _MEASURE, _RESET = range(7)


@dataclass
class _Step:
    kind: int
    gate: Gate | None = None
    qubits: tuple[int, ...] = ()
    prob: float = 0.0
    cbit: int = -1
    slot: int = -1  # uniform-draw index, -1 if none


def _build_steps(circuit: Circuit, noise: NoiseModel | None) -> tuple[list[_Step], int]:
    p_bi, p_1q, p_2q, p_bm = noise.scaled() if noise is not None else (0.0,) * 4
    steps: list[_Step] = []
    slot = 0

    def add(step: _Step, draws: bool) -> None:
        nonlocal slot
        if draws:
            step.slot = slot
            slot += 1
        steps.append(step)

    if noise is not None:
        for q in range(circuit.n_qubits):
            add(_Step(_INIT_FLIP, qubits=(q,), prob=p_bi), p_bi > 0)
    for gate in circuit.gates:
        if isinstance(gate, MeasureZ):
            if noise is not None:
                add(_Step(_PREMEAS, qubits=(gate.q,), prob=p_bm), p_bm > 0)
            add(_Step(_MEASURE, qubits=(gate.q,), cbit=gate.cbit), True)
        elif isinstance(gate, Reset):
            add(_Step(_RESET, gate=gate, qubits=(gate.q,)), True)
            if noise is not None:
                add(_Step(_INIT_FLIP, qubits=(gate.q,), prob=p_bi), p_bi > 0)
        else:
            if isinstance(gate, PauliRotation) and gate.pauli.weight > 2:
                raise ValueError(
                    "trajectory noise is defined on transpiled circuits; "
                    f"found weight-{gate.pauli.weight} rotation"
                )
            add(_Step(_GATE, gate=gate), False)
            if noise is not None:
                qs = gate_support(gate)
                if len(qs) == 1:
                    add(_Step(_NOISE1, qubits=qs, prob=p_1q), p_1q > 0)
                else:
                    add(_Step(_NOISE2, qubits=qs, prob=p_2q), p_2q > 0)
    return steps, slot


def noisy_trajectory(
    circuit: Circuit, noise: NoiseModel | None, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One stochastic pure-state run; returns (state, classical bits).

    Pauli insertions: X after initialization (p_bi) and before measurement
    (p_bm); uniform single-qubit depolarizing after 1q gates; uniform
    two-qubit depolarizing after CX/RZZ/weight-2 rotations.  With all
    probabilities zero this is the identity transformation of the pipeline.
    """
    n = circuit.n_qubits
    steps, _ = _build_steps(circuit, noise)
    state = zero_state(n)
    bits = np.zeros(circuit.n_cbits, dtype=np.uint8)
    for step in steps:
        if step.kind == _GATE:
            state = apply_unitary_gate(state, step.gate, n)
        elif step.kind in (_INIT_FLIP, _PREMEAS):
            if rng.random() < step.prob:
                state = state[..., _x_perm(n, step.qubits[0])]
        elif step.kind == _NOISE1:
            u = rng.random()
            if u < step.prob:
                kind = min(int(3 * u / step.prob), 2)
                state = apply_pauli(state, _pauli_gate_1q(n, step.qubits[0], kind))
        elif step.kind == _NOISE2:
            u = rng.random()
            if u < step.prob:
                kind = min(int(15 * u / step.prob), 14)
                state = apply_pauli(state, _pauli_gate_2q(n, step.qubits, kind))
        elif step.kind == _MEASURE:
            p1 = float(_prob_one(state[None, :], step.qubits[0])[0])
            outcome = int(rng.random() < p1)
            state = _collapse(state, step.qubits[0], np.array(outcome), np.array(p1))
            bits[step.cbit] = outcome
        elif step.kind == _RESET:
            q = step.qubits[0]
            p1 = float(_prob_one(state[None, :], q)[0])
            outcome = int(rng.random() < p1)
            state = _collapse(state, q, np.array(outcome), np.array(p1))
            if outcome:
                state = state[..., _x_perm(n, q)]
    return state, bits


class BranchingCircuitError(RuntimeError):
    """The noiseless path hits a genuinely random mid-circuit measurement;
    the shared-prefix shot engine does not apply."""


def _final_measure_start(steps: list[_Step]) -> int:
    """Index of the trailing MEASURE/PREMEAS block (classical-flip zone)."""
    i = len(steps)
    while i > 0 and steps[i - 1].kind in (_MEASURE, _PREMEAS):
        i -= 1
    return i


def _apply_pauli_rows(batch: np.ndarray, rows: np.ndarray, p: PauliString) -> None:
    perm, phase = _pauli_action(p.n, p.z, p.x)
    batch[rows] = batch[rows][:, perm] * phase


def run_shots(
    circuit: Circuit,
    shots: int,
    seed: int,
    noise: NoiseModel | None = None,
    chunk_size: int = 2048,
) -> np.ndarray:
    """Sample classical bits over many independent noise trajectories.

    Per-shot randomness comes from fixed-length slices of a Philox
    counter-based stream keyed by the seed, so results are reproducible and
    independent of batching.  Trajectories share the deterministic noiseless
    prefix; only shots that draw an insertion integrate their own suffix.
    Returns a (shots, n_cbits) uint8 array.
    """
    if shots <= 0:
        raise ValueError("shots must be positive")
    if noise is not None and noise.is_trivial:
        noise = None
    n = circuit.n_qubits
    steps, _ = _build_steps(circuit, noise)
    fin = _final_measure_start(steps)

    # The prefix sharing requires the noiseless mid-circuit measurements to
    # be deterministic (true for stabilizer syndromes on code states).
    state = zero_state(n)
    base_bits = np.zeros(circuit.n_cbits, dtype=np.uint8)
    for step in steps[:fin]:
        if step.kind == _GATE:
            state = apply_unitary_gate(state, step.gate, n)
        elif step.kind in (_MEASURE, _RESET):
            p1 = float(_prob_one(state[None, :], step.qubits[0])[0])
            if _MCM_TOL < p1 < 1.0 - _MCM_TOL:
                return _run_shots_sequential(circuit, shots, seed, noise)
            outcome = int(p1 >= 0.5)
            state = _collapse(state, step.qubits[0], np.array(outcome), np.array(p1))
            if step.kind == _MEASURE:
                base_bits[step.cbit] = outcome
            elif outcome:
                state = state[..., _x_perm(n, step.qubits[0])]

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    out = np.empty((shots, circuit.n_cbits), dtype=np.uint8)
    done = 0
    while done < shots:
        m = min(chunk_size, shots - done)
        out[done : done + m] = _run_chunk(circuit, steps, fin, base_bits, m, rng)
        done += m
    return out


def _run_shots_sequential(circuit, shots, seed, noise):
    out = np.empty((shots, circuit.n_cbits), dtype=np.uint8)
    root = np.random.SeedSequence(seed)
    for s in range(shots):
        rng = np.random.Generator(np.random.Philox(root.spawn(1)[0]))
        _, bits = noisy_trajectory(circuit, noise, rng)
        out[s] = bits
    return out


def _sample_rows(states: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sample of one basis index per row from |states|^2."""
    probs = np.abs(states) ** 2
    cum = np.cumsum(probs, axis=-1)
    cum /= cum[..., -1:]
    return np.minimum((cum < u[..., None]).sum(axis=-1), states.shape[-1] - 1)


_ERROR_KINDS = (_INIT_FLIP, _NOISE1, _NOISE2, _PREMEAS)


def _run_chunk(circuit, steps, fin, base_bits, m, rng):
    n = circuit.n_qubits
    dim = 1 << n
    n_slots = max((s.slot for s in steps), default=-1) + 1
    u = rng.random((m, n_slots)) if n_slots else np.zeros((m, 0))
    bits = np.tile(base_bits, (m, 1)) if base_bits.size else np.zeros((m, 0), dtype=np.uint8)

    # first insertion per shot within the evolution zone
    err = [
        (i, s.slot, s.prob)
        for i, s in enumerate(steps[:fin])
        if s.kind in _ERROR_KINDS and s.slot >= 0 and s.prob > 0.0
    ]
    first_step = np.full(m, len(steps), dtype=np.int64)
    if err:
        slots = np.array([e[1] for e in err])
        probs = np.array([e[2] for e in err])
        step_of = np.array([e[0] for e in err])
        hit = u[:, slots] < probs
        any_hit = hit.any(axis=1)
        first_step[any_hit] = step_of[hit.argmax(axis=1)[any_hit]]

    # stream the evolution zone, forking error shots off the noiseless state
    batch = np.zeros((0, dim), dtype=complex)
    batch_rows = np.zeros(0, dtype=np.int64)
    noiseless = zero_state(n)
    for i, step in enumerate(steps[:fin]):
        fork = np.flatnonzero(first_step == i)
        if fork.size:
            batch = np.concatenate([batch, np.tile(noiseless, (fork.size, 1))])
            batch_rows = np.concatenate([batch_rows, fork])
        if step.kind == _GATE:
            noiseless = apply_unitary_gate(noiseless, step.gate, n)
            if batch.size:
                batch = apply_unitary_gate(batch, step.gate, n)
        elif step.kind in (_INIT_FLIP, _PREMEAS):
            if batch.size and step.prob > 0.0:
                rows = np.flatnonzero(u[batch_rows, step.slot] < step.prob)
                if rows.size:
                    _apply_pauli_rows(batch, rows, PauliString.single(n, step.qubits[0], "X"))
        elif step.kind == _NOISE1:
            if batch.size and step.prob > 0.0:
                uu = u[batch_rows, step.slot]
                for r in np.flatnonzero(uu < step.prob):
                    kind = min(int(3 * uu[r] / step.prob), 2)
                    _apply_pauli_rows(batch, np.array([r]), _pauli_gate_1q(n, step.qubits[0], kind))
        elif step.kind == _NOISE2:
            if batch.size and step.prob > 0.0:
                uu = u[batch_rows, step.slot]
                for r in np.flatnonzero(uu < step.prob):
                    kind = min(int(15 * uu[r] / step.prob), 14)
                    _apply_pauli_rows(batch, np.array([r]), _pauli_gate_2q(n, step.qubits, kind))
        elif step.kind in (_MEASURE, _RESET):
            q = step.qubits[0]
            p1 = float(_prob_one(noiseless[None, :], q)[0])
            det = int(p1 >= 0.5)
            noiseless = _collapse(noiseless, q, np.array(det), np.array(p1))
            if step.kind == _RESET and det:
                noiseless = noiseless[..., _x_perm(n, q)]
            if batch.size:
                p1v = _prob_one(batch, q)
                outc = (u[batch_rows, step.slot] < p1v).astype(np.uint8)
                batch = _collapse(batch, q, outc, p1v)
                if step.kind == _MEASURE:
                    bits[batch_rows, step.cbit] = outc
                else:
                    flip = np.flatnonzero(outc == 1)
                    if flip.size:
                        batch[flip] = batch[flip][:, _x_perm(n, q)]

    # trailing measurement zone: joint outcome sampling + classical flips
    final_measures = [s for s in steps[fin:] if s.kind == _MEASURE]
    if final_measures:
        sample_slot = final_measures[0].slot
        noiseless_rows = np.flatnonzero(first_step == len(steps))
        if noiseless_rows.size:
            cum = np.cumsum(np.abs(noiseless) ** 2)
            cum /= cum[-1]
            idx = np.minimum(
                (cum[None, :] < u[noiseless_rows, sample_slot][:, None]).sum(axis=1),
                dim - 1,
            )
            for s in final_measures:
                bits[noiseless_rows, s.cbit] = (idx >> s.qubits[0]) & 1
        if batch.size:
            idx = _sample_rows(batch, u[batch_rows, sample_slot])
            for s in final_measures:
                bits[batch_rows, s.cbit] = (idx >> s.qubits[0]) & 1
        # bit-flip measurement channel on terminal measurements acts as a
        # classical flip of the recorded bit
        pending: dict[int, _Step] = {}
        for s in steps[fin:]:
            if s.kind == _PREMEAS:
                pending[s.qubits[0]] = s
            elif s.kind == _MEASURE and s.qubits[0] in pending:
                ps = pending.pop(s.qubits[0])
                if ps.prob > 0.0 and ps.slot >= 0:
                    flips = u[:, ps.slot] < ps.prob
                    bits[flips, s.cbit] ^= 1
    return bits


# ---------------------------------------------------------------------------
# observable sampling


def group_qubitwise(strings: list[PauliString]) -> list[list[PauliString]]:
    """Greedy first-fit grouping into qubit-wise commuting families."""
    families: list[list[PauliString]] = []
    masks: list[tuple[int, int, int]] = []  # (z, x, occupied)
    for p in sorted(set(strings), key=lambda s: s.label()):
        placed = False
        supp = p.z | p.x
        for i, (fz, fx, focc) in enumerate(masks):
            both = focc & supp
            if (fz ^ p.z) & both == 0 and (fx ^ p.x) & both == 0:
                families[i].append(p)
                masks[i] = (fz | p.z, fx | p.x, focc | supp)
                placed = True
                break
        if not placed:
            families.append([p])
            masks.append((p.z, p.x, supp))
    return families


@dataclass
class StringTally:
    string: PauliString
    basis: str
    shots: int
    ones: int

    @property
    def estimate(self) -> float:
        return 1.0 - 2.0 * self.ones / self.shots


@dataclass
class PauliSampleResult:
    estimates: dict[PauliString, float]
    parities: dict[PauliString, np.ndarray]
    tallies: list[StringTally]
    shots_per_family: int
    n_families: int


def _family_basis(family: list[PauliString], n: int) -> str:
    letters = ["I"] * n
    for p in family:
        for q in p.support:
            letters[q] = p.letter(q)
    return "".join(letters)


def sample_pauli_strings(
    circuit: Circuit,
    strings: list[PauliString],
    shots: int,
    seed: int,
    noise: NoiseModel | None = None,
) -> PauliSampleResult:
    """Estimate <P> for each string by computational-basis sampling.

    Strings are grouped into qubit-wise commuting families; each family runs
    its own measurement circuit (basis changes: H for X, Sdg then H for Y)
    with `shots` fresh trajectories and a family-specific RNG stream.
    """
    if shots <= 0:
        raise ValueError("shots must be positive")
    n = circuit.n_qubits
    base = transpile(circuit).circuit if noise is not None else circuit
    families = group_qubitwise([p for p in strings if p.weight > 0])
    estimates: dict[PauliString, float] = {}
    parities: dict[PauliString, np.ndarray] = {}
    tallies: list[StringTally] = []
    for p in strings:
        if p.weight == 0:
            estimates[p] = 1.0
            parities[p] = np.ones(shots)
    for fam_idx, family in enumerate(families):
        basis = _family_basis(family, n)
        meas = base.copy()
        measured = sorted({q for p in family for q in p.support})
        cbit_of = {q: i for i, q in enumerate(measured)}
        for q in measured:
            letter = basis[q]
            if letter == "X":
                meas.add(H(q))
            elif letter == "Y":
                meas.add(Sdg(q)).add(H(q))
        for q in measured:
            meas.add(MeasureZ(q, cbit_of[q]))
        fam_seed = np.random.SeedSequence(entropy=seed, spawn_key=(fam_idx,))
        bits = run_shots(meas, shots, fam_seed.generate_state(1)[0], noise)
        for p in family:
            cols = [cbit_of[q] for q in p.support]
            par = bits[:, cols].sum(axis=1) % 2
            vals = 1.0 - 2.0 * par
            estimates[p] = float(vals.mean())
            parities[p] = vals
            tallies.append(
                StringTally(string=p, basis=basis, shots=shots, ones=int(par.sum()))
            )
    return PauliSampleResult(
        estimates=estimates,
        parities=parities,
        tallies=tallies,
        shots_per_family=shots,
        n_families=len(families),
    )


@dataclass
class SampleResult:
    estimate: float
    stderr: float
    tallies: list[StringTally]


def sample_expectation(
    circuit: Circuit,
    obs: PauliSum,
    shots: int,
    seed: int,
    noise: NoiseModel | None = None,
) -> SampleResult:
    """Shot-based estimate of <obs>; deterministic for a fixed seed."""
    if not obs.is_hermitian():
        raise ValueError("sampling is defined for Hermitian observables")
    res = sample_pauli_strings(circuit, [p for p, _ in obs], shots, seed, noise)
    total = 0.0
    var = 0.0
    # combine per-shot composites within families to keep covariances
    by_family: dict[str, list[tuple[PauliString, float]]] = {}
    for t in res.tallies:
        by_family.setdefault(t.basis, [])
    coeffs = dict(obs.terms)
    for p, c in coeffs.items():
        if p.weight == 0:
            total += c.real
    for t in res.tallies:
        by_family[t.basis].append((t.string, coeffs[t.string].real))
    for basis, members in by_family.items():
        comp = np.zeros(shots)
        for p, c in members:
            comp += c * res.parities[p]
        total += float(comp.mean())
        var += float(comp.var(ddof=1)) / shots
    return SampleResult(estimate=total, stderr=math.sqrt(var), tallies=res.tallies)


def tallies_to_csv(tallies: list[StringTally]) -> str:
    buf = io.StringIO()
    buf.write("string,basis,shots,ones\n")
    for t in tallies:
        buf.write(f"{t.string.label()},{t.basis},{t.shots},{t.ones}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# OpenQASM 2.0 export/import (subset)


def to_qasm(circuit: Circuit) -> str:
    """Export as OpenQASM-2.0-style text; Pauli rotations are expanded first.

    Our RZZ(theta) = exp(-i theta ZZ) maps to rzz(2*theta) under the common
    cx/u1/cx definition (equal up to global phase)."""
    circ = transpile(circuit).circuit
    lines = [
        "OPENQASM 2.0;",
        'include "qelib1.inc";',
        "gate rzz(theta) a,b { cx a,b; u1(theta) b; cx a,b; }",
        f"qreg q[{circ.n_qubits}];",
    ]
    if circ.n_cbits:
        lines.append(f"creg c[{circ.n_cbits}];")
    for g in circ.gates:
        if isinstance(g, H):
            lines.append(f"h q[{g.q}];")
        elif isinstance(g, Sdg):
            lines.append(f"sdg q[{g.q}];")
        elif isinstance(g, X):
            lines.append(f"x q[{g.q}];")
        elif isinstance(g, CX):
            lines.append(f"cx q[{g.control}],q[{g.target}];")
        elif isinstance(g, RZZ):
            lines.append(f"rzz({2 * g.theta!r}) q[{g.q1}],q[{g.q2}];")
        elif isinstance(g, PauliRotation):  # weight-1 survivor
            q = g.pauli.support[0]
            letter = g.pauli.letter(q)
            angle = 2 * g.theta
            name = {"X": "rx", "Y": "ry", "Z": "rz"}[letter]
            lines.append(f"{name}({angle!r}) q[{q}];")
        elif isinstance(g, MeasureZ):
            lines.append(f"measure q[{g.q}] -> c[{g.cbit}];")
        elif isinstance(g, Reset):
            lines.append(f"reset q[{g.q}];")
    return "\n".join(lines) + "\n"


_QASM_RE = re.compile(
    r"^(?P<name>[a-z]+)\s*(\((?P<arg>[^)]+)\))?\s+(?P<ops>[^;]+);$"
)


def from_qasm(text: str) -> Circuit:
    """Parse the subset emitted by to_qasm."""
    circ: Circuit | None = None
    for raw in text.splitlines():
        line = raw.strip()
        if (
            not line
            or line.startswith(("OPENQASM", "include", "gate", "//"))
        ):
            continue
        if line.startswith("qreg"):
            n = int(re.search(r"\[(\d+)\]", line).group(1))
            circ = Circuit(n)
            continue
        if line.startswith("creg"):
            continue
        if circ is None:
            raise ValueError("qreg declaration missing")
        if line.startswith("measure"):
            m = re.match(r"measure\s+q\[(\d+)\]\s*->\s*c\[(\d+)\];", line)
            circ.add(MeasureZ(int(m.group(1)), int(m.group(2))))
            continue
        m = _QASM_RE.match(line)
        if not m:
            raise ValueError(f"cannot parse QASM line: {line!r}")
        name = m.group("name")
        qubits = [int(x) for x in re.findall(r"q\[(\d+)\]", m.group("ops"))]
        if name == "h":
            circ.add(H(qubits[0]))
        elif name == "sdg":
            circ.add(Sdg(qubits[0]))
        elif name == "x":
            circ.add(X(qubits[0]))
        elif name == "cx":
            circ.add(CX(*qubits))
        elif name == "rzz":
            circ.add(RZZ(qubits[0], qubits[1], float(m.group("arg")) / 2))
        elif name in ("rx", "ry", "rz"):
            letter = name[1].upper()
            circ.add(
                PauliRotation(
                    PauliString.single(circ.n_qubits, qubits[0], letter),
                    float(m.group("arg")) / 2,
                )
            )
        elif name == "reset":
            circ.add(Reset(qubits[0]))
        else:
            raise ValueError(f"unsupported QASM gate {name!r}")
    if circ is None:
        raise ValueError("qreg declaration missing")
    return circ
