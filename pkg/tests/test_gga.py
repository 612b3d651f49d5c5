"""Quasiparticle-lattice moments, hybridization, and the gGA loop."""
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghost_embed.fock import EmbeddingParams, density_matrix, ground_state
from ghost_embed.gga import (
    DegenerateBathWarning,
    LoopConfig,
    QuadratureGrid,
    embedding_update,
    hybridization,
    initial_state,
    lambda_c_from,
    lambda_from,
    lattice_moments,
    self_consistency,
    state_from_density_matrix,
)

GRID = QuadratureGrid.chebyshev(1000)


def _sqrtfac(delta):
    d, v = np.linalg.eigh(delta)
    return v @ np.diag(np.sqrt(d * (1 - d))) @ v.T


class TestQuadrature:
    def test_dos_normalization(self):
        assert abs(GRID.weights.sum() - 1.0) < 1e-10

    def test_kinetic_moment(self):
        m2 = np.sum(GRID.weights * GRID.nodes**2)
        assert abs(m2 - 0.25) < 1e-8

    def test_fourth_moment(self):
        m4 = np.sum(GRID.weights * GRID.nodes**4)
        assert abs(m4 - 0.125) < 1e-10

    def test_odd_moments_vanish(self):
        assert abs(np.sum(GRID.weights * GRID.nodes)) < 1e-12


class TestLatticeMoments:
    def test_b1_half_filled_band(self):
        delta, K = lattice_moments(np.array([1.0]), np.zeros((1, 1)), GRID)
        assert np.isclose(delta[0, 0], 0.5, atol=1e-10)
        assert np.isclose(K[0], -2.0 / (3.0 * np.pi), atol=1e-8)

    def test_r_zero_gives_projector(self):
        lam = np.diag([1.0, -1.0])
        with pytest.warns(DegenerateBathWarning):
            delta, K = lattice_moments(np.zeros(2), lam, GRID)
        assert np.allclose(delta, np.diag([0.0, 1.0]), atol=1e-12)
        assert np.allclose(K, 0.0)

    def test_auxiliary_filling_at_symmetric_point(self, converged_b3):
        state = converged_b3.state
        delta, _ = lattice_moments(state.R, state.lam, GRID)
        assert abs(2.0 * np.trace(delta) - 3.0) < 1e-6


class TestHybridization:
    def test_half_filled_delta(self):
        K = np.array([0.3, -0.1])
        D = hybridization(0.5 * np.eye(2), K)
        assert np.allclose(D, 2.0 * K)

    def test_diagonal_componentwise(self):
        delta = np.diag([0.2, 0.7])
        K = np.array([0.1, -0.3])
        D = hybridization(delta, K)
        expect = K / np.sqrt(np.diag(delta) * (1 - np.diag(delta)))
        assert np.allclose(D, expect)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_residual(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(3, 3))
        delta = 0.5 * np.eye(3) + 0.05 * (m + m.T)
        K = rng.normal(size=3)
        D = hybridization(delta, K)
        assert np.allclose(_sqrtfac(delta) @ D, K, atol=1e-12)

    def test_floored_eigenvalue_warns(self):
        with pytest.warns(DegenerateBathWarning):
            hybridization(np.diag([0.0, 0.5]), np.array([0.1, 0.1]))


class TestLambdaC:
    def test_vanishing_coupling(self):
        lam = np.array([[0.2, 0.1], [0.1, -0.3]])
        delta = 0.5 * np.eye(2)
        assert np.allclose(lambda_c_from(np.zeros(2), delta, np.zeros(2), lam), -lam)

    def test_particle_hole_stationary_point(self):
        # d sqrt(x(1-x))/dx = 0 at x = 1/2, so lambda_c = -lambda exactly
        lam = np.array([[0.4]])
        out = lambda_c_from(np.array([0.8]), 0.5 * np.eye(1), np.array([-0.3]), lam)
        assert np.allclose(out, -lam, atol=1e-12)

    def test_finite_difference_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            m = rng.normal(size=(3, 3))
            delta = 0.5 * np.eye(3) + 0.06 * (m + m.T)
            R = rng.normal(size=3)
            D = rng.normal(size=3)
            lam = np.zeros((3, 3))
            grad = -lambda_c_from(R, delta, D, lam)  # the derivative part alone

            def trace_term(dl):
                return 2.0 * R @ _sqrtfac(dl) @ D

            h = 1e-6
            for a in range(3):
                for b in range(3):
                    e = np.zeros((3, 3))
                    e[a, b] += 0.5
                    e[b, a] += 0.5
                    fd = (trace_term(delta + h * e) - trace_term(delta - h * e)) / (2 * h)
                    assert abs(grad[a, b] - fd) < 1e-6, (a, b)

    def test_degenerate_eigenvalue_branch(self):
        # equal occupations exercise the analytic divided-difference limit
        delta = np.full((2, 2), 0.0) + 0.3 * np.eye(2)
        R = np.array([0.5, 0.5])
        D = np.array([0.2, -0.2])
        out = lambda_c_from(R, delta, D, np.zeros((2, 2)))
        assert np.all(np.isfinite(out))
        assert np.allclose(out, out.T)


class TestEmbeddingUpdate:
    def test_noninteracting_bonding_fixed_point(self):
        rho = np.full((2, 2), 0.5)
        delta_emb, R_new = embedding_update(rho)
        assert np.isclose(delta_emb[0, 0], 0.5)
        assert np.isclose(R_new[0], 1.0)

    def test_empty_bath_floors_with_warning(self):
        rho = np.array([[1.0, 0.0], [0.0, 1.0]])  # bath fully occupied
        with pytest.warns(DegenerateBathWarning):
            embedding_update(rho)

    def test_fixed_point_residual_b3(self, converged_b3):
        # feeding ED observables of the converged parameters back through the
        # update reproduces R within the loop tolerance
        res = converged_b3
        _, state = ground_state(res.params)
        rho = density_matrix(state)[0]
        _, R_new = embedding_update(rho)
        assert np.max(np.abs(R_new - res.state.R)) < 1e-5

    def test_state_from_density_matrix_roundtrip(self, converged_b3):
        res = converged_b3
        R, lam = state_from_density_matrix(
            res.rho, np.array(res.params.D), np.array(res.params.lambda_c)
        )
        assert np.max(np.abs(R - res.state.R)) < 1e-5
        assert np.max(np.abs(lam - res.state.lam)) < 1e-5


class TestSelfConsistency:
    def test_noninteracting_limit(self):
        res = self_consistency(U=0.0, B=1)
        assert res.converged
        assert np.isclose(res.state.R[0], 1.0, atol=1e-8)
        assert np.isclose(res.state.lam[0, 0], 0.0, atol=1e-8)
        assert np.isclose(res.docc, 0.25, atol=1e-8)

    def test_brinkman_rice_b1(self, converged_b1):
        from ghost_embed.spectra import gauge_blocks, qp_weight

        uc = 32.0 / (3.0 * np.pi)
        res = converged_b1
        Z = qp_weight(gauge_blocks(res.state.R, res.state.lam))
        assert abs(Z - (1.0 - (2.5 / uc) ** 2)) < 1e-3
        assert abs(res.docc - (1.0 - 2.5 / uc) / 4.0) < 1e-3

    def test_particle_hole_symmetry_b3(self, converged_b3):
        assert abs(converged_b3.rho[0, 0] - 0.5) < 1e-6

    def test_converged_residuals_simultaneous(self, converged_b3):
        assert converged_b3.residual < 1e-6

    def test_gutzwiller_constraint_b3(self, converged_b3):
        # delta used for the embedding model equals the lattice moment of the
        # converged (R, lambda)
        res = converged_b3
        delta_lat, _ = lattice_moments(res.state.R, res.state.lam, GRID)
        delta_emb, _ = embedding_update(res.rho)
        assert np.max(np.abs(delta_lat - delta_emb)) < 1e-5

    def test_iteration_history_recorded(self, converged_b3):
        hist = converged_b3.history
        assert hist[-1].residual < 1e-6
        assert all(np.isfinite(rec.energy) for rec in hist)

    def test_nonconvergence_reports_history(self):
        cfg = LoopConfig(max_iter=3)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = self_consistency(U=2.5, B=3, config=cfg)
        assert not res.converged
        assert len(res.history) == 3

    def test_seeded_perturbation_reaches_same_metal(self):
        cfg = LoopConfig(seed=42, perturbation=0.02)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = self_consistency(U=2.5, B=1, config=cfg)
        assert res.converged
        assert abs(res.docc - 0.0659) < 2e-3


class TestInitialState:
    def test_normalized_r(self):
        st0 = initial_state(5)
        assert np.isclose(np.linalg.norm(st0.R), 1.0)

    def test_alternating_ghost_levels(self):
        st0 = initial_state(5)
        assert np.allclose(np.diag(st0.lam), [0.0, 0.5, -0.5, 0.5, -0.5])
