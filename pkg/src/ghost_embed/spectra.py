"""Green's function, spectral function, pole-expansion self-energy, and Z.

All quantities are per spin for the paramagnetic solution.  The physical
Green's function integrates the quasiparticle resolvent over the
semicircular DOS:

    G(w) = int d(eps) D0(eps) R^T [(w + i eta - h(eps))^(-1)] R .
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gga import QuadratureGrid


class GaugeUndefinedError(ValueError):
    """Raised when ||R|| vanishes (insulating fixed point): the pole gauge
    of the self-energy does not exist."""


@dataclass(frozen=True)
class FrequencyGrid:
    omega: np.ndarray
    eta: float

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("broadening eta must be positive")

    @classmethod
    def linspace(cls, omega_min: float = -3.0, omega_max: float = 3.0,
                 n_omega: int = 1201, eta: float = 0.02) -> "FrequencyGrid":
        return cls(omega=np.linspace(omega_min, omega_max, n_omega), eta=eta)


@dataclass(frozen=True)
class GaugeBlocks:
    """Rotated-frame blocks with R aligned to e_1 and the ghost sector
    diagonal: u^T lam u = [[lam0, lam1], [lam1^T, diag(lam2)]]."""

    u: np.ndarray
    R0: float
    lam0: float
    lam1: np.ndarray
    lam2: np.ndarray


def _pole_data(R: np.ndarray, lam: np.ndarray, grid: QuadratureGrid):
    """Eigen-poles of h(eps) at every node: energies and |R^T v|^2 weights."""
    R = np.asarray(R, dtype=float)
    lam = np.asarray(lam, dtype=float)
    h = grid.nodes[:, None, None] * np.outer(R, R)[None, :, :] + lam[None, :, :]
    evals, evecs = np.linalg.eigh(h)
    amps = np.einsum("a,iak->ik", R, evecs) ** 2
    return evals, amps


def greens(R: np.ndarray, lam: np.ndarray, grid: QuadratureGrid,
           freq: FrequencyGrid) -> np.ndarray:
    """G(w) on the frequency grid."""
    evals, amps = _pole_data(R, lam, grid)
    z = freq.omega + 1j * freq.eta
    weights = grid.weights[:, None] * amps  # (nodes, bands)
    return np.einsum(
        "ik,wik->w", weights, 1.0 / (z[:, None, None] - evals[None, :, :])
    )


def greens_fixed_eps(R: np.ndarray, lam: np.ndarray, eps: float,
                     freq: FrequencyGrid) -> np.ndarray:
    """Quasiparticle resolvent at a single band energy (for Dyson checks)."""
    R = np.asarray(R, dtype=float)
    h = eps * np.outer(R, R) + np.asarray(lam, dtype=float)
    evals, evecs = np.linalg.eigh(h)
    amps = (R @ evecs) ** 2
    z = freq.omega + 1j * freq.eta
    return np.sum(amps[None, :] / (z[:, None] - evals[None, :]), axis=1)


def spectral_function(G: np.ndarray) -> np.ndarray:
    return -G.imag / np.pi


def gauge_blocks(R: np.ndarray, lam: np.ndarray) -> GaugeBlocks:
    """Householder rotation sending R to ||R|| e_1, composed with a
    diagonalization of the ghost block; pole energies ascend and the lam1
    couplings are made nonnegative by column sign flips."""
    R = np.asarray(R, dtype=float)
    lam = np.asarray(lam, dtype=float)
    B = len(R)
    norm = np.linalg.norm(R)
    if norm < 1e-10:
        raise GaugeUndefinedError("||R|| ~ 0: insulating fixed point")
    e1 = np.zeros(B)
    e1[0] = 1.0
    v = R / norm - e1
    if np.linalg.norm(v) < 1e-14:
        u = np.eye(B)
    else:
        v /= np.linalg.norm(v)
        u = np.eye(B) - 2.0 * np.outer(v, v)  # reflection: u @ (R/norm) = e1
    # note u is symmetric; we need R = u [R0, 0..]^T, i.e. u^T R = R0 e1
    lam_rot = u.T @ lam @ u
    if B > 1:
        ghost = lam_rot[1:, 1:]
        d, w = np.linalg.eigh(0.5 * (ghost + ghost.T))
        full = np.eye(B)
        full[1:, 1:] = w
        u = u @ full
        lam_rot = u.T @ lam @ u
        lam1 = lam_rot[0, 1:].copy()
        flip = lam1 < 0
        if np.any(flip):
            full = np.eye(B)
            full[1:, 1:] = np.diag(np.where(flip, -1.0, 1.0))
            u = u @ full
            lam_rot = u.T @ lam @ u
            lam1 = lam_rot[0, 1:]
        lam2 = np.diag(lam_rot[1:, 1:]).copy()
    else:
        lam1 = np.zeros(0)
        lam2 = np.zeros(0)
    return GaugeBlocks(u=u, R0=float(norm), lam0=float(lam_rot[0, 0]),
                       lam1=np.abs(lam1), lam2=lam2)


def self_energy(blocks: GaugeBlocks, freq: FrequencyGrid) -> np.ndarray:
    """Pole-expansion self-energy evaluated at z = w + i eta."""
    z = freq.omega + 1j * freq.eta
    r2 = blocks.R0 ** 2
    sigma = z * (1.0 - 1.0 / r2) + blocks.lam0 / r2
    for coup, pole in zip(blocks.lam1, blocks.lam2):
        sigma = sigma + (coup ** 2 / r2) / (z - pole)
    return sigma


def self_energy_dyson(R: np.ndarray, lam: np.ndarray, eps: float,
                      freq: FrequencyGrid) -> np.ndarray:
    """Dyson route: Sigma = z - eps - 1/G_eps(w); locality makes it
    eps-independent."""
    g = greens_fixed_eps(R, lam, eps, freq)
    z = freq.omega + 1j * freq.eta
    return z - eps - 1.0 / g


def qp_weight(blocks: GaugeBlocks) -> float:
    """Quasiparticle weight from the pole expansion."""
    if np.any(np.abs(blocks.lam2) < 1e-14):
        raise ZeroDivisionError("self-energy pole at zero frequency")
    r2 = blocks.R0 ** 2
    inv = 1.0 / r2 + np.sum((blocks.lam1 ** 2 / r2) / blocks.lam2 ** 2)
    return float(1.0 / inv)


def qp_weight_slope(R: np.ndarray, lam: np.ndarray, eta: float = 0.02,
                    h: float = 1e-4) -> float:
    """Numerical cross-check: Z = [1 - dRe(Sigma)/dw at 0]^(-1) by central
    differences on the Dyson form with reduced broadening."""
    freq = FrequencyGrid(omega=np.array([-h, h]), eta=eta / 10.0)
    sig = self_energy_dyson(R, lam, 0.0, freq)
    slope = (sig[1].real - sig[0].real) / (2 * h)
    return float(1.0 / (1.0 - slope))


def find_peaks(omega: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Frequencies of strict local maxima of the spectral curve."""
    inner = (A[1:-1] > A[:-2]) & (A[1:-1] > A[2:])
    return omega[1:-1][inner]
