"""Green's function, gauge blocks, self-energy, and quasiparticle weight."""
import numpy as np
import pytest

from ghost_embed.gga import QuadratureGrid
from ghost_embed.spectra import (
    FrequencyGrid,
    GaugeUndefinedError,
    find_peaks,
    gauge_blocks,
    greens,
    qp_weight,
    qp_weight_slope,
    self_energy,
    self_energy_dyson,
    spectral_function,
)

GRID = QuadratureGrid.chebyshev(1000)


def semicircle_gf(z):
    """Closed-form Hilbert transform of the semicircular DOS (W = 1):
    G(z) = 2 (z - sqrt(z-1) sqrt(z+1)), analytic in the upper half plane."""
    return 2.0 * (z - np.sqrt(z - 1.0) * np.sqrt(z + 1.0))


class TestGreens:
    def test_noninteracting_matches_hilbert_transform(self):
        freq = FrequencyGrid.linspace(-2.0, 2.0, 401, eta=0.05)
        G = greens(np.array([1.0]), np.zeros((1, 1)), GRID, freq)
        exact = semicircle_gf(freq.omega + 1j * freq.eta)
        assert np.max(np.abs(G - exact)) < 2e-3

    def test_fermi_level_height(self):
        # Im G(i eta) = -2 (sqrt(1 + eta^2) - eta) exactly; -> -2 as eta -> 0
        eta = 0.02
        freq = FrequencyGrid(omega=np.array([0.0]), eta=eta)
        G = greens(np.array([1.0]), np.zeros((1, 1)), GRID, freq)
        exact = -2.0 * (np.sqrt(1 + eta**2) - eta)
        assert abs(G[0].imag - exact) < 1e-3
        assert abs(G[0].imag + 2.0) < 0.05

    def test_sum_rule(self, converged_b3):
        freq = FrequencyGrid.linspace(-4.0, 4.0, 2001, eta=0.02)
        state = converged_b3.state
        A = spectral_function(greens(state.R, state.lam, GRID, freq))
        total = np.trapezoid(A, freq.omega)
        assert abs(total - state.R @ state.R) < 0.01 * (state.R @ state.R)

    def test_spectral_function_nonnegative(self, converged_b3):
        freq = FrequencyGrid.linspace()
        state = converged_b3.state
        A = spectral_function(greens(state.R, state.lam, GRID, freq))
        assert A.min() > -1e-12

    def test_three_peak_structure(self, converged_b3):
        freq = FrequencyGrid.linspace()
        state = converged_b3.state
        A = spectral_function(greens(state.R, state.lam, GRID, freq))
        peaks = find_peaks(freq.omega, A)
        assert any(abs(p) < 0.1 for p in peaks)
        assert any(0.95 <= p <= 1.55 for p in peaks)
        assert any(-1.55 <= p <= -0.95 for p in peaks)

    def test_eta_validation(self):
        with pytest.raises(ValueError):
            FrequencyGrid(omega=np.linspace(-1, 1, 5), eta=0.0)


class TestGaugeBlocks:
    def test_b1_trivial(self):
        blocks = gauge_blocks(np.array([0.7]), np.array([[0.3]]))
        assert np.allclose(blocks.u, 1.0)
        assert np.isclose(blocks.R0, 0.7)
        assert np.isclose(blocks.lam0, 0.3)
        assert blocks.lam1.size == 0

    def test_aligned_r_rotates_lower_block_only(self):
        R = np.array([0.9, 0.0, 0.0])
        lam = np.diag([0.1, 0.5, -0.5])
        blocks = gauge_blocks(R, lam)
        assert np.allclose(blocks.u[:, 0], [1.0, 0.0, 0.0])
        assert np.allclose(np.abs(blocks.u[0, :]), [1.0, 0.0, 0.0])

    def test_reassembly_random(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            R = rng.normal(size=4)
            m = rng.normal(size=(4, 4))
            lam = 0.5 * (m + m.T)
            blocks = gauge_blocks(R, lam)
            u = blocks.u
            assert np.allclose(u.T @ u, np.eye(4), atol=1e-12)
            # u maps (R0, 0, ..) back to R
            r_vec = np.zeros(4)
            r_vec[0] = blocks.R0
            assert np.allclose(u @ r_vec, R, atol=1e-12)
            rot = u.T @ lam @ u
            assert np.allclose(rot[0, 0], blocks.lam0)
            assert np.allclose(rot[0, 1:], blocks.lam1, atol=1e-12)
            assert np.all(blocks.lam1 >= -1e-14)
            assert np.allclose(rot[1:, 1:], np.diag(blocks.lam2), atol=1e-10)
            assert np.all(np.diff(blocks.lam2) >= -1e-12)

    def test_insulating_gauge_undefined(self):
        with pytest.raises(GaugeUndefinedError):
            gauge_blocks(np.zeros(3), np.eye(3))


class TestSelfEnergy:
    def test_b1_linear_no_poles(self):
        freq = FrequencyGrid.linspace(-2, 2, 101, eta=0.02)
        blocks = gauge_blocks(np.array([0.6]), np.array([[0.12]]))
        sig = self_energy(blocks, freq)
        z = freq.omega + 1j * freq.eta
        expect = z * (1 - 1 / 0.36) + 0.12 / 0.36
        assert np.allclose(sig, expect, atol=1e-12)

    def test_pole_equals_dyson(self, converged_b3):
        freq = FrequencyGrid.linspace()
        state = converged_b3.state
        sig_pole = self_energy(gauge_blocks(state.R, state.lam), freq)
        sig_dyson = self_energy_dyson(state.R, state.lam, 0.0, freq)
        assert np.max(np.abs(sig_pole - sig_dyson)) < 1e-8

    def test_eps_independence(self, converged_b3):
        freq = FrequencyGrid.linspace()
        state = converged_b3.state
        s0 = self_energy_dyson(state.R, state.lam, 0.0, freq)
        s5 = self_energy_dyson(state.R, state.lam, 0.5, freq)
        assert np.max(np.abs(s0 - s5)) < 1e-8


class TestQpWeight:
    def test_b1_z_equals_r_squared(self):
        blocks = gauge_blocks(np.array([0.6]), np.array([[0.0]]))
        assert np.isclose(qp_weight(blocks), 0.36)

    def test_noninteracting_unity(self):
        blocks = gauge_blocks(np.array([1.0]), np.array([[0.0]]))
        assert np.isclose(qp_weight(blocks), 1.0)

    def test_matches_slope_definition(self, converged_b3):
        state = converged_b3.state
        z_pole = qp_weight(gauge_blocks(state.R, state.lam))
        z_slope = qp_weight_slope(state.R, state.lam)
        assert abs(z_pole - z_slope) < 1e-3

    def test_zero_pole_energy_raises(self):
        blocks = gauge_blocks(np.array([0.9, 0.2]), np.diag([0.0, 0.0]))
        with pytest.raises(ZeroDivisionError):
            qp_weight(blocks)

    def test_table1_b3(self, converged_b3):
        state = converged_b3.state
        Z = qp_weight(gauge_blocks(state.R, state.lam))
        assert abs(Z - 0.13) < 0.01
        assert abs(converged_b3.docc - 0.046) < 0.002
