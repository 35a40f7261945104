"""Limiting mean and covariance of the mode ensemble, closed form and by ODE.

With sigma_sq(xi) = sum_k (sigma_k . xi)^2 and the kernel variance gamma, the
small-window limit of the mode ensemble satisfies

    mean(t, xi) = theta0_hat(xi) exp(-kappa |xi|^2 t - sigma_sq(xi) gamma(t) / 2)

    cov(t, xi, eta) = theta0_hat(xi) conj(theta0_hat(eta))
                      * exp(-kappa (|xi|^2 + |eta|^2) t)
                      * (exp(-sigma_sq(xi-eta) gamma(t) / 2)
                         - exp(-(sigma_sq(xi) + sigma_sq(eta)) gamma(t) / 2)),

both direct consequences of the joint Gaussian characteristic function of the
drive.  The same quantities are integrated as ordinary differential equations
against the finite-window dissipation clock (mean) or against gamma itself
(covariance); the two routes must agree to quadrature accuracy, which is
enforced, not assumed.

Physical-space fields come back through the frequency lattice of the attached
spectral problem.  The ODE routes refuse kernels whose variance density is
unbounded (singular class); the closed forms are valid for every kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .dissipation import DissipationCurve, dissipation_curve, dissipation_density
from .kernels import CovarianceKernel
from .spectral import PhysicalField, SpectralProblem, reconstruct


class OdeAgreementError(RuntimeError):
    """Quadrature and closed-form routes disagreed beyond tolerance."""


@dataclass(frozen=True)
class EllipticOperator:
    """Constant-coefficient operator div(Q grad .) with Q = sum_k sigma_k (x) sigma_k."""

    q: np.ndarray  # (2, 2), symmetric PSD

    @classmethod
    def from_directions(cls, sigmas) -> "EllipticOperator":
        sig = np.atleast_2d(np.asarray(sigmas, dtype=float))
        q = sum(np.outer(s, s) for s in sig)
        return cls(q=np.asarray(q))

    def sigma_sq(self, xi) -> float:
        xi = np.asarray(xi, dtype=float)
        return float(xi @ self.q @ xi)

    def fourier_symbol(self, f1, f2):
        """Multiplier of the operator on the lattice: -sigma_sq(xi)."""
        q = self.q
        return -(q[0, 0] * f1**2 + 2.0 * q[0, 1] * f1 * f2 + q[1, 1] * f2**2)


def _require_regular(kernel: CovarianceKernel, horizon: float, what: str):
    cls = kernel.classify(horizon)
    if not cls.is_regular:
        raise ValueError(
            f"{what} integrates the variance density and refuses singular kernels: "
            f"{cls.reason}"
        )


def mean_mode(problem: SpectralProblem, kernel: CovarianceKernel, t, xi) -> complex:
    """Closed-form limiting mean of one mode; valid for every kernel."""
    xi = np.asarray(xi, dtype=float)
    t = np.asarray(t, dtype=float)
    hat0 = complex(problem.theta0.hat(xi[0], xi[1]))
    expo = -problem.kappa * float(xi @ xi) * t - 0.5 * problem.sigma_sq(xi[0], xi[1]) * kernel.gamma(t)
    out = hat0 * np.exp(expo)
    return out if np.ndim(t) else complex(out)


def mean_lattice(problem: SpectralProblem, kernel: CovarianceKernel, t: float) -> np.ndarray:
    """Closed-form limiting mean on the full frequency lattice."""
    f1, f2 = problem.lattice()
    gam = float(kernel.gamma(float(t)))
    expo = -problem.kappa * (f1**2 + f2**2) * float(t) - 0.5 * problem.sigma_sq(f1, f2) * gam
    return problem.theta0.hat(f1, f2).astype(complex) * np.exp(expo)


def _rk4_linear(t_grid, coeff_nodes, coeff_mid, y0, source_nodes=None, source_mid=None):
    # y' = -coeff(t) y + source(t); coefficient/source supplied at grid nodes
    # and interval midpoints.
    n = len(t_grid)
    y = np.empty(n, dtype=complex)
    y[0] = y0
    zeros = np.zeros(n)
    s_nodes = zeros if source_nodes is None else source_nodes
    s_mid = zeros[:-1] if source_mid is None else source_mid
    for i in range(n - 1):
        h = t_grid[i + 1] - t_grid[i]
        c0, cm, c1 = coeff_nodes[i], coeff_mid[i], coeff_nodes[i + 1]
        f0, fm, f1 = s_nodes[i], s_mid[i], s_nodes[i + 1]
        k1 = -c0 * y[i] + f0
        k2 = -cm * (y[i] + 0.5 * h * k1) + fm
        k3 = -cm * (y[i] + 0.5 * h * k2) + fm
        k4 = -c1 * (y[i] + h * k3) + f1
        y[i + 1] = y[i] + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def mean_mode_mollified(
    problem: SpectralProblem,
    kernel: CovarianceKernel,
    epsilon: float,
    t_grid,
    xi,
    curve: DissipationCurve | None = None,
    agree_tol: float = 1e-10,
) -> np.ndarray:
    """Finite-window mean along t_grid, by RK4 against the dissipation clock.

    The clock density is taken piecewise linear between grid nodes, so the
    exact flow is the exponential of its trapezoid cumulative; both routes are
    computed and must agree to ``agree_tol`` (relative to |theta0_hat|).
    """
    t_grid = np.asarray(t_grid, dtype=float)
    xi = np.asarray(xi, dtype=float)
    _require_regular(kernel, float(t_grid[-1]), "mean_mode_mollified")
    if curve is None:
        curve = dissipation_curve(kernel, epsilon, t_grid)
    if curve.t_grid.shape != t_grid.shape or np.max(np.abs(curve.t_grid - t_grid)) > 1e-12:
        raise ValueError("dissipation curve grid does not match t_grid")
    ssq = problem.sigma_sq(xi[0], xi[1])
    ksq = problem.kappa * float(xi @ xi)
    hat0 = complex(problem.theta0.hat(xi[0], xi[1]))
    coeff_nodes = ksq + ssq * curve.density
    coeff_mid = ksq + ssq * 0.5 * (curve.density[1:] + curve.density[:-1])
    ode = _rk4_linear(t_grid, coeff_nodes, coeff_mid, hat0)
    closed = hat0 * np.exp(-ksq * t_grid - ssq * curve.cumulative)
    gap = float(np.max(np.abs(ode - closed)))
    if gap > agree_tol * max(abs(hat0), 1e-300):
        raise OdeAgreementError(
            f"mollified-mean routes disagree by {gap:.3g} (tol {agree_tol:.3g})"
        )
    return ode


def covariance_mode(
    problem: SpectralProblem, kernel: CovarianceKernel, t, xi, eta
) -> complex:
    """Closed-form limiting covariance of two modes."""
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    t = np.asarray(t, dtype=float)
    hat = complex(problem.theta0.hat(xi[0], xi[1])) * np.conj(
        complex(problem.theta0.hat(eta[0], eta[1]))
    )
    gam = kernel.gamma(t)
    heat = np.exp(-problem.kappa * (float(xi @ xi) + float(eta @ eta)) * t)
    diff = xi - eta
    s_diff = problem.sigma_sq(diff[0], diff[1])
    s_sum = problem.sigma_sq(xi[0], xi[1]) + problem.sigma_sq(eta[0], eta[1])
    out = hat * heat * (np.exp(-0.5 * s_diff * gam) - np.exp(-0.5 * s_sum * gam))
    return out if np.ndim(t) else complex(out)


def covariance_mode_ode(
    problem: SpectralProblem,
    kernel: CovarianceKernel,
    t_grid,
    xi,
    eta,
) -> np.ndarray:
    """Covariance along t_grid by RK4 with the closed-form mean as source.

    dC = -kappa(|xi|^2+|eta|^2) C dt - sigma_sq(xi-eta)/2 C dgamma
         + rho(xi, eta) mean(xi) conj(mean(eta)) dgamma,  C(0) = 0.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    _require_regular(kernel, float(t_grid[-1]), "covariance_mode_ode")
    t_mid = 0.5 * (t_grid[1:] + t_grid[:-1])
    dg_nodes = np.asarray(kernel.dgamma(t_grid), dtype=float)
    dg_mid = np.asarray(kernel.dgamma(t_mid), dtype=float)
    diff = xi - eta
    ksum = problem.kappa * (float(xi @ xi) + float(eta @ eta))
    s_diff = problem.sigma_sq(diff[0], diff[1])
    rho = problem.rho(xi, eta)

    def source(ts, dg):
        e_xi = np.asarray(mean_mode(problem, kernel, ts, xi))
        e_eta = np.asarray(mean_mode(problem, kernel, ts, eta))
        return rho * e_xi * np.conj(e_eta) * dg

    coeff_nodes = ksum + 0.5 * s_diff * dg_nodes
    coeff_mid = ksum + 0.5 * s_diff * dg_mid
    return _rk4_linear(
        t_grid,
        coeff_nodes,
        coeff_mid,
        0.0 + 0.0j,
        source_nodes=source(t_grid, dg_nodes),
        source_mid=source(t_mid, dg_mid),
    )


def mean_field(problem: SpectralProblem, kernel: CovarianceKernel, t: float) -> PhysicalField:
    """Inverse transform of the closed-form mean over the lattice."""
    return reconstruct(problem, mean_lattice(problem, kernel, t), t=float(t))


def mean_equation_residual(
    problem: SpectralProblem, kernel: CovarianceKernel, t: float, xis
) -> float:
    """Defect of the integrated mean equation, by independent adaptive quadrature.

    Max over the sample modes of |mean(t) - theta0_hat
    + int_0^t (kappa|xi|^2 + sigma_sq(xi) dgamma/2) mean(s) ds|.
    """
    t = float(t)
    worst = 0.0
    for xi in np.atleast_2d(np.asarray(xis, dtype=float)):
        ksq = problem.kappa * float(xi @ xi)
        ssq = problem.sigma_sq(xi[0], xi[1])

        def integrand(s, real, xi=xi, ksq=ksq, ssq=ssq):
            val = (ksq + 0.5 * ssq * kernel.dgamma(s)) * mean_mode(problem, kernel, s, xi)
            return val.real if real else val.imag

        re, _ = integrate.quad(integrand, 0.0, t, args=(True,), epsabs=1e-11, epsrel=1e-11, limit=200)
        im, _ = integrate.quad(integrand, 0.0, t, args=(False,), epsabs=1e-11, epsrel=1e-11, limit=200)
        hat0 = complex(problem.theta0.hat(xi[0], xi[1]))
        resid = abs(mean_mode(problem, kernel, t, xi) - hat0 + (re + 1j * im))
        worst = max(worst, resid)
    return worst


def covariance_equation_residual(
    problem: SpectralProblem, kernel: CovarianceKernel, t: float, pairs
) -> float:
    """Defect of the integrated covariance identity for sampled (xi, eta) pairs.

    This is the Fourier-side form of the physical-space variance equation;
    each pair's identity is checked by independent adaptive quadrature.
    """
    t = float(t)
    worst = 0.0
    for xi, eta in pairs:
        xi = np.asarray(xi, dtype=float)
        eta = np.asarray(eta, dtype=float)
        diff = xi - eta
        ksum = problem.kappa * (float(xi @ xi) + float(eta @ eta))
        s_diff = problem.sigma_sq(diff[0], diff[1])
        rho = problem.rho(xi, eta)

        def integrand_part(s, real, xi=xi, eta=eta, ksum=ksum, s_diff=s_diff, rho=rho):
            c = covariance_mode(problem, kernel, s, xi, eta)
            e = rho * mean_mode(problem, kernel, s, xi) * np.conj(
                mean_mode(problem, kernel, s, eta)
            )
            dg = kernel.dgamma(s)
            val = -(ksum + 0.5 * s_diff * dg) * c + e * dg
            return val.real if real else val.imag

        re, _ = integrate.quad(integrand_part, 0.0, t, args=(True,), epsabs=1e-11, epsrel=1e-11, limit=200)
        im, _ = integrate.quad(integrand_part, 0.0, t, args=(False,), epsabs=1e-11, epsrel=1e-11, limit=200)
        resid = abs(covariance_mode(problem, kernel, t, xi, eta) - (re + 1j * im))
        worst = max(worst, resid)
    return worst


def _reduced_freqs(problem: SpectralProblem, xi_cut: float) -> np.ndarray:
    m = int(round(xi_cut / problem.dxi))
    return np.arange(-m, m + 1) * problem.dxi


def _separable_dft(weights: np.ndarray, freqs: np.ndarray, x: np.ndarray) -> np.ndarray:
    # sum_zeta exp(2 pi i zeta.x) weights(zeta), evaluated as two matmuls
    e1 = np.exp(2j * np.pi * np.outer(freqs, x))
    return e1.T @ weights @ e1


def variance_field(
    problem: SpectralProblem,
    kernel: CovarianceKernel,
    t: float,
    xi_cut: float = 4.0,
    imag_tol: float = 1e-9,
    neg_tol: float = 1e-9,
) -> PhysicalField:
    """Limiting pointwise variance field from the mode-covariance pair sum.

    The sum runs over the reduced lattice max(|xi_i|) <= xi_cut (both
    arguments), grouped by the difference frequency: the separable part of the
    closed form is the squared reduced mean field, and the coupled part is a
    lattice autocorrelation times the difference multiplier.  Identical to the
    literal pair sum, evaluated in O(N^2 log N).
    """
    t = float(t)
    if xi_cut > problem.xi_max + 1e-12:
        raise ValueError("xi_cut exceeds the lattice extent")
    freqs = _reduced_freqs(problem, xi_cut)
    f1, f2 = np.meshgrid(freqs, freqs, indexing="ij")
    gam = float(kernel.gamma(t))
    heat = np.exp(-problem.kappa * (f1**2 + f2**2) * t)
    g = problem.theta0.hat(f1, f2) * heat  # noise-free decayed transform
    e = g * np.exp(-0.5 * problem.sigma_sq(f1, f2) * gam)

    # autocorrelation A(zeta) = sum_eta g(eta+zeta) conj(g(eta)) over the
    # reduced lattice; computed densely (lattices here are a few hundred wide)
    n_r = freqs.size
    pad = np.zeros((2 * n_r, 2 * n_r), dtype=complex)
    pad[:n_r, :n_r] = g
    spec = np.fft.fft2(pad)
    corr = np.fft.ifft2(spec * np.conj(spec))
    idx = np.concatenate([np.arange(-(n_r - 1), 0) % (2 * n_r), np.arange(n_r)])
    auto = corr[np.ix_(idx, idx)]  # zeta index range [-(n_r-1), n_r-1]

    zeta = np.arange(-(n_r - 1), n_r) * problem.dxi
    z1, z2 = np.meshgrid(zeta, zeta, indexing="ij")
    coupler = np.exp(-0.5 * problem.sigma_sq(z1, z2) * gam)

    x = problem.x_grid()
    dxi4 = problem.dxi**4
    second_moment = _separable_dft(coupler * auto * dxi4, zeta, x)
    mean_part = _separable_dft(e * problem.dxi**2, freqs, x)
    values = second_moment - np.abs(mean_part) ** 2

    # roundoff is relative to the pair-sum inputs, not to the (possibly
    # cancelling) variance itself
    scale = max(float(np.max(np.abs(second_moment))), 1e-300)
    if float(np.max(np.abs(values.imag))) > imag_tol * scale:
        raise RuntimeError("variance pair sum has a non-negligible imaginary part")
    out = values.real
    if float(out.min()) < -neg_tol * scale:
        raise RuntimeError(f"variance field dips to {out.min():.3g}; pair sum inconsistent")
    return PhysicalField(x=x, values=out, t=t)


def smalltime_exponents(
    problem: SpectralProblem, kernel: CovarianceKernel, t_seq
) -> tuple[float, float]:
    """Least-squares slopes of log ||mean(t) - theta0||_2 and log ||sqrt(V(t))||_2.

    Pure-transport setting (kappa = 0); norms evaluated on the lattice via the
    Parseval identity, so no spatial reconstruction enters the fit.
    """
    if problem.kappa != 0.0:
        raise ValueError("small-time exponent fits require kappa = 0")
    t_seq = np.asarray(t_seq, dtype=float)
    f1, f2 = problem.lattice()
    hat0 = problem.theta0.hat(f1, f2)
    ssq = problem.sigma_sq(f1, f2)
    n_mean = np.empty(t_seq.size)
    n_sd = np.empty(t_seq.size)
    for i, t in enumerate(t_seq):
        gam = float(kernel.gamma(float(t)))
        damp = np.exp(-0.5 * ssq * gam)
        n_mean[i] = np.sqrt(np.sum(np.abs(hat0 * (damp - 1.0)) ** 2)) * problem.dxi
        diag = hat0**2 * (1.0 - np.exp(-ssq * gam))
        n_sd[i] = np.sqrt(np.sum(diag)) * problem.dxi
    slope_mean = float(np.polyfit(np.log(t_seq), np.log(n_mean), 1)[0])
    slope_sd = float(np.polyfit(np.log(t_seq), np.log(n_sd), 1)[0])
    return slope_mean, slope_sd
