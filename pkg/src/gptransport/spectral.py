"""Pathwise Fourier-side solver for constant-direction transport with diffusion.

Mode xi evolves independently of all others:

    mode(t, xi) = theta0_hat(xi) * exp(-kappa |xi|^2 t + i sum_k (sigma_k . xi) g_k(t))

where g_k is the mollified drive.  The noise factor is unimodular, so the mode
magnitude is the deterministic heat decay.  Physical fields are recovered on a
square grid by FFT over a truncated frequency lattice; truncating the lattice
implicitly periodizes space with period 1/dxi, and fields are kept supported
well inside one period.

Transform convention: f(x) = integral of exp(2 pi i xi.x) f_hat(xi) dxi, so the
initial bump exp(-pi |x|^2 / a) has transform a * exp(-pi a |xi|^2) in 2-d.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sampling import RegularizedDrive


class SpectrumSymmetryError(RuntimeError):
    """Inverse transform produced a non-negligible imaginary part."""


@dataclass(frozen=True)
class GaussianBump:
    """Isotropic initial datum exp(-pi |x|^2 / a); transform exact."""

    a: float = 1.0

    def value(self, x1, x2):
        return np.exp(-np.pi * (np.asarray(x1) ** 2 + np.asarray(x2) ** 2) / self.a)

    def hat(self, f1, f2):
        return self.a * np.exp(-np.pi * self.a * (np.asarray(f1) ** 2 + np.asarray(f2) ** 2))


@dataclass(frozen=True, eq=False)
class SpectralProblem:
    """Diffusivity, transport directions, initial transform and frequency lattice."""

    kappa: float = 0.0
    sigmas: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.0]]))
    theta0: GaussianBump = field(default_factory=GaussianBump)
    xi_max: float = 8.0
    dxi: float = 1.0 / 16.0
    horizon: float = 1.0

    def __post_init__(self):
        sig = np.atleast_2d(np.asarray(self.sigmas, dtype=float))
        if sig.ndim != 2 or sig.shape[1] != 2:
            raise ValueError("sigmas must be a (K, 2) array of constant vectors")
        object.__setattr__(self, "sigmas", sig)
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        n = 2.0 * self.xi_max / self.dxi
        if abs(n - round(n)) > 1e-9 or int(round(n)) % 2:
            raise ValueError("2*xi_max/dxi must be an even integer lattice size")

    @property
    def n_modes(self) -> int:
        return int(round(2.0 * self.xi_max / self.dxi))

    @property
    def half_width(self) -> float:
        # reconstruction half-width: one spatial period of the lattice is 1/dxi
        return 0.5 / self.dxi

    def freqs(self) -> np.ndarray:
        n = self.n_modes
        return np.fft.fftfreq(n, d=1.0 / (n * self.dxi))

    def lattice(self):
        f = self.freqs()
        return np.meshgrid(f, f, indexing="ij")

    def x_grid(self) -> np.ndarray:
        n = self.n_modes
        length = 2.0 * self.half_width
        return -self.half_width + np.arange(n) * (length / n)

    def sigma_dot(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        return self.sigmas @ xi

    def sigma_sq(self, f1, f2=None):
        """sum_k (sigma_k . xi)^2, vectorized over lattice arrays."""
        if f2 is None:
            f1, f2 = np.asarray(f1[..., 0]), np.asarray(f1[..., 1])
        out = 0.0
        for sk in self.sigmas:
            out = out + (sk[0] * np.asarray(f1) + sk[1] * np.asarray(f2)) ** 2
        return out

    def rho(self, xi, eta) -> float:
        """sum_k (sigma_k . xi)(sigma_k . eta)."""
        return float(self.sigma_dot(xi) @ self.sigma_dot(eta))

    def theta0_hat_lattice(self) -> np.ndarray:
        f1, f2 = self.lattice()
        return self.theta0.hat(f1, f2).astype(complex)


@dataclass(frozen=True, eq=False)
class ModeTrajectory:
    xi: np.ndarray
    times: np.ndarray
    values: np.ndarray  # complex, shape (len(times),)


@dataclass(frozen=True, eq=False)
class PhysicalField:
    x: np.ndarray       # 1-d coordinates, both axes
    values: np.ndarray  # real (n, n)
    t: float | None = None


def _drive_at(drive: RegularizedDrive, times: np.ndarray) -> np.ndarray:
    return np.vstack(
        [np.interp(times, drive.t_grid, drive.g_values[k]) for k in range(drive.n_components)]
    )


def solve_mode(
    problem: SpectralProblem,
    drive: RegularizedDrive,
    xi,
    times=None,
) -> ModeTrajectory:
    """Explicit per-mode solution along one drive realization."""
    xi = np.asarray(xi, dtype=float)
    times = drive.t_grid if times is None else np.asarray(times, dtype=float)
    g = _drive_at(drive, times)
    if g.shape[0] != problem.sigmas.shape[0]:
        raise ValueError(
            f"drive has {g.shape[0]} components but problem has {problem.sigmas.shape[0]} directions"
        )
    phase = problem.sigma_dot(xi) @ g
    decay = np.exp(-problem.kappa * float(xi @ xi) * times)
    values = complex(problem.theta0.hat(xi[0], xi[1])) * decay * np.exp(1j * phase)
    return ModeTrajectory(xi=xi, times=times, values=values)


def solve_lattice(problem: SpectralProblem, drive: RegularizedDrive, t: float) -> np.ndarray:
    """All lattice modes at one time, as an (n, n) complex array."""
    f1, f2 = problem.lattice()
    g = _drive_at(drive, np.array([float(t)]))[:, 0]
    phase = np.zeros_like(f1)
    for k, sk in enumerate(problem.sigmas):
        phase = phase + (sk[0] * f1 + sk[1] * f2) * g[k]
    heat = np.exp(-problem.kappa * (f1**2 + f2**2) * float(t))
    return problem.theta0.hat(f1, f2) * heat * np.exp(1j * phase)


def verify_ode_residual(
    traj: ModeTrajectory, problem: SpectralProblem, drive: RegularizedDrive
) -> float:
    """Max defect of the integrated mode equation under trapezoid quadrature.

    Checks value(t) - value(0) + kappa|xi|^2 int value ds
    - i sum_k (sigma_k.xi) int value dg_k; expected O(dt^2) for fixed epsilon.
    """
    times = traj.times
    vals = traj.values
    g = _drive_at(drive, times)
    proj = problem.sigma_dot(traj.xi)
    mid = 0.5 * (vals[1:] + vals[:-1])
    heat_int = np.concatenate([[0.0j], np.cumsum(mid * np.diff(times))])
    stoch_int = np.zeros_like(vals)
    for k in range(g.shape[0]):
        stoch_int = stoch_int + proj[k] * np.concatenate(
            [[0.0j], np.cumsum(mid * np.diff(g[k]))]
        )
    resid = vals - vals[0] + problem.kappa * float(traj.xi @ traj.xi) * heat_int - 1j * stoch_int
    return float(np.max(np.abs(resid)))


def reconstruct(
    problem: SpectralProblem,
    mode_grid: np.ndarray,
    t: float | None = None,
    imag_tol: float = 1e-9,
) -> PhysicalField:
    """Physical field dxi^2 * sum_xi exp(2 pi i xi.x) mode(xi) on the square grid.

    Evaluated by inverse FFT; the alternating sign re-centers x on
    [-half_width, half_width).  A surviving imaginary part above ``imag_tol``
    signals broken conjugate symmetry and raises.
    """
    n = problem.n_modes
    if mode_grid.shape != (n, n):
        raise ValueError(f"mode grid must be ({n}, {n})")
    k_int = np.rint(problem.freqs() / problem.dxi).astype(int)
    signs = np.where(k_int % 2 == 0, 1.0, -1.0)
    shifted = mode_grid * signs[:, None] * signs[None, :]
    field_c = np.fft.ifft2(shifted) * (n * problem.dxi) ** 2
    imag_max = float(np.max(np.abs(field_c.imag)))
    if imag_max > imag_tol:
        raise SpectrumSymmetryError(
            f"imaginary residue {imag_max:.3g} exceeds {imag_tol:.3g}: "
            "mode grid is not conjugate-symmetric"
        )
    return PhysicalField(x=problem.x_grid(), values=field_c.real, t=t)
