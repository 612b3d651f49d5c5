"""Sector ED solver against brute-force Fock-space oracles."""
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghost_embed.fock import (
    EmbeddingParams,
    build_basis,
    build_hamiltonian,
    density_matrix,
    dm_error_metrics,
    double_occupancy,
    ground_state,
    spin_squared_expectation,
)
from ghost_embed.pauli import ModeLayout

from test_pauli import fermion_dense


class TestBasis:
    @pytest.mark.parametrize("B,dim", [(1, 4), (3, 36), (5, 400)])
    def test_dimension(self, B, dim):
        n_orb = B + 1
        assert build_basis(B).dim == math.comb(n_orb, n_orb // 2) ** 2 == dim

    def test_even_b_rejected(self):
        with pytest.raises(ValueError):
            build_basis(2)

    def test_states_have_fixed_particle_numbers(self):
        basis = build_basis(3)
        up_mask = (1 << 4) - 1
        for m in basis.states:
            assert (int(m) & up_mask).bit_count() == 2
            assert (int(m) >> 4).bit_count() == 2

    def test_enumeration_oracle_b3(self):
        # Exhaustive independent enumeration over all 2^8 bitmasks.
        expected = sorted(
            m
            for m in range(1 << 8)
            if (m & 0b1111).bit_count() == 2 and (m >> 4).bit_count() == 2
        )
        assert list(build_basis(3).states) == expected


class TestGroundState:
    def test_b1_noninteracting_bonding(self):
        params = EmbeddingParams(U=0.0, D=(-0.8,), lambda_c=(0.0,), g=10.0)
        energy, state = ground_state(params)
        assert np.isclose(energy, -1.6, atol=1e-12)
        rho = density_matrix(state)
        assert np.allclose(rho[0], 0.5, atol=1e-10)
        assert np.allclose(rho[1], 0.5, atol=1e-10)
        assert np.isclose(double_occupancy(state), 0.25, atol=1e-12)

    def test_b1_energy_sign_independent(self):
        e_neg, _ = ground_state(EmbeddingParams(U=0.0, D=(-0.8,), lambda_c=(0.0,), g=10.0))
        e_pos, _ = ground_state(EmbeddingParams(U=0.0, D=(0.8,), lambda_c=(0.0,), g=10.0))
        assert np.isclose(e_neg, e_pos)

    def test_penalty_selects_singlet(self):
        params = EmbeddingParams(U=2.5, D=(-0.35, -0.2, 0.15), lambda_c=(0.1, 0.8, -0.7))
        _, state = ground_state(params)
        assert spin_squared_expectation(state) < 1e-8

    def test_bath_permutation_invariance(self):
        rng = np.random.default_rng(3)
        d = rng.normal(size=3)
        lc = rng.normal(size=3)
        base, _ = ground_state(EmbeddingParams(U=1.7, D=tuple(d), lambda_c=tuple(lc)))
        for perm in itertools.permutations(range(3)):
            e, _ = ground_state(
                EmbeddingParams(U=1.7, D=tuple(d[list(perm)]), lambda_c=tuple(lc[list(perm)]))
            )
            assert abs(e - base) < 1e-10

    def test_symmetric_bath_pair_degeneracy(self):
        params = EmbeddingParams(U=2.0, D=(-0.3, -0.2, -0.2), lambda_c=(0.0, 0.5, 0.5))
        _, state = ground_state(params)
        rho = density_matrix(state)
        assert abs(rho[0, 2, 2] - rho[0, 3, 3]) < 1e-10


class TestDensityMatrix:
    def test_full_fock_space_oracle_b3(self):
        params = EmbeddingParams(
            U=2.5, D=(-0.35, -0.2, 0.15), lambda_c=(0.1, 0.8, -0.7), g=10.0
        )
        _, state = ground_state(params)
        vec = state.to_statevector()
        layout = ModeLayout(3)
        n = layout.n_qubits
        rho = density_matrix(state)
        for spin in (0, 1):
            for mu in range(4):
                for nu in range(4):
                    cr = fermion_dense(layout.qubit(mu, spin), n)
                    an = fermion_dense(layout.qubit(nu, spin), n).conj().T
                    val = np.real(np.conj(vec) @ cr @ an @ vec)
                    assert np.isclose(rho[spin, mu, nu], val, atol=1e-10), (spin, mu, nu)

    def test_spin_blocks_equal_for_singlet(self):
        params = EmbeddingParams(U=1.3, D=(-0.5, 0.2, -0.1), lambda_c=(0.3, -0.4, 0.9))
        _, state = ground_state(params)
        rho = density_matrix(state)
        assert np.allclose(rho[0], rho[1], atol=1e-9)

    def test_trace_and_spectrum(self):
        params = EmbeddingParams(U=2.5, D=(-0.35, -0.2, 0.15), lambda_c=(0.1, 0.8, -0.7))
        _, state = ground_state(params)
        rho = density_matrix(state)
        for spin in (0, 1):
            assert np.isclose(np.trace(rho[spin]), 2.0, atol=1e-10)
            vals = np.linalg.eigvalsh(rho[spin])
            assert vals.min() > -1e-12 and vals.max() < 1 + 1e-12


class TestErrorMetrics:
    def test_identity_case(self):
        rho = np.array([[0.5, 0.1], [0.1, 0.5]])
        m = dm_error_metrics(rho, rho)
        assert m.eps_max == 0.0
        assert m.delta == 0.0

    def test_single_hermitian_pair(self):
        ref = np.array([[0.5, 0.2], [0.2, 0.5]])
        meas = np.array([[0.5, 0.3], [0.3, 0.5]])
        m = dm_error_metrics(meas, ref)
        assert np.isclose(m.eps_max, 0.1)
        assert np.isclose(m.delta, 0.5 * np.sqrt(2 * 0.01))

    def test_docc_appended(self):
        rho = np.eye(2) * 0.5
        m = dm_error_metrics(rho, rho, docc_measured=0.3, docc_reference=0.1)
        assert np.isclose(m.eps_max, 0.2)
        assert len(m.entries) == 5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dm_error_metrics(np.eye(2), np.eye(3))

    def test_docc_pairing_enforced(self):
        with pytest.raises(ValueError):
            dm_error_metrics(np.eye(2), np.eye(2), docc_measured=0.1)


class TestParams:
    def test_json_roundtrip(self):
        p = EmbeddingParams(U=2.5, D=(-0.3, 0.1, 0.2), lambda_c=(0.0, 1.0, -1.0), g=10.0)
        assert EmbeddingParams.from_json(p.to_json()) == p

    def test_rejects_even_bath_count(self):
        with pytest.raises(ValueError):
            EmbeddingParams(U=1.0, D=(0.1, 0.2), lambda_c=(0.0, 0.0))

    def test_rejects_negative_penalty(self):
        with pytest.raises(ValueError):
            EmbeddingParams(U=1.0, D=(0.1,), lambda_c=(0.0,), g=-1.0)
