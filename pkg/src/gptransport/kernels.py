"""Covariance algebra for stationary-increment Gaussian noise kernels.

A kernel is summarized by its variance function gamma(t) = Var(G_t).  Because
the driving processes start at zero and have stationary increments, every
second-order quantity (two-time covariance, increment inner products) reduces
to evaluations of gamma; negative lags enter through absolute values only,
never by evaluating gamma at a negative argument.

Catalog:

* ``BrownianMotion`` -- gamma(t) = t.
* ``FractionalBrownianMotion`` -- gamma(t) = t^(2H), any Hurst index in (0,1),
  normalized so gamma(1) = 1.
* ``DampedFractionalKernel`` -- fractional small-lag structure with exponential
  loss of memory at rate ``lam``; gamma has no elementary closed form and is
  evaluated by adaptive quadrature with a series branch near t = 0.
* ``TabulatedGammaKernel`` -- user-supplied variance table, monotone cubic
  interpolation, no extrapolation.

All kernel objects are immutable and safe to share between workers.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, interpolate, special


class KernelDomainError(ValueError):
    """Argument outside the domain of a kernel operation."""


class TabulatedRangeError(KernelDomainError):
    """Evaluation outside a tabulated kernel's grid (no extrapolation)."""


@dataclass(frozen=True)
class RegularityClass:
    """Whether the variance density dgamma/dt is defined, >= 0 and bounded."""

    tag: str  # "regular" or "singular"
    reason: str

    @property
    def is_regular(self) -> bool:
        return self.tag == "regular"


def _as_times(t, name="t"):
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0):
        raise KernelDomainError(f"{name} must be >= 0, got {arr[arr < 0].min()}")
    return arr


class CovarianceKernel:
    """Base class; subclasses provide vectorized ``gamma`` and ``dgamma``."""

    def gamma(self, t):
        """Variance gamma(t) = Var(G_t); accepts scalars or arrays, t >= 0."""
        raise NotImplementedError

    def dgamma(self, t):
        """Density of dgamma at t > 0 (t = 0 allowed where the density is bounded)."""
        raise NotImplementedError

    def cov(self, t, s):
        """Two-time covariance Cov(G_t, G_s) = (gamma(t)+gamma(s)-gamma(|t-s|))/2."""
        t = _as_times(t)
        s = _as_times(s, "s")
        return 0.5 * (self.gamma(t) + self.gamma(s) - self.gamma(np.abs(t - s)))

    def increment_cov(self, first, second):
        """Cov(G_b - G_a, G_d - G_c) for intervals ``first=(a,b)``, ``second=(c,d)``.

        Equals (gamma(|d-a|) + gamma(|c-b|) - gamma(|c-a|) - gamma(|d-b|))/2;
        components may be arrays of matching shape.
        """
        a, b = (np.asarray(v, dtype=float) for v in first)
        c, d = (np.asarray(v, dtype=float) for v in second)
        if np.any(a < 0) or np.any(c < 0):
            raise KernelDomainError("interval endpoints must be >= 0")
        if np.any(b < a) or np.any(d < c):
            raise KernelDomainError("intervals must satisfy a <= b and c <= d")
        return 0.5 * (
            self.gamma(np.abs(d - a))
            + self.gamma(np.abs(c - b))
            - self.gamma(np.abs(c - a))
            - self.gamma(np.abs(d - b))
        )

    def classify(self, horizon) -> RegularityClass:
        """Regular iff dgamma/dt exists, is >= 0 and bounded on (0, horizon]."""
        raise NotImplementedError

    def cache_key(self) -> tuple:
        """Hashable identity used by factorization caches."""
        raise NotImplementedError


@dataclass(frozen=True)
class BrownianMotion(CovarianceKernel):
    """Standard Brownian motion: gamma(t) = t, density identically 1."""

    def gamma(self, t):
        return _as_times(t).copy() if np.ndim(t) else float(_as_times(t))

    def dgamma(self, t):
        t = _as_times(t)
        return np.ones_like(t) if np.ndim(t) else 1.0

    def classify(self, horizon) -> RegularityClass:
        return RegularityClass("regular", "constant density 1")

    def cache_key(self):
        return ("bm",)


@dataclass(frozen=True)
class FractionalBrownianMotion(CovarianceKernel):
    """gamma(t) = t^(2H); increments positively correlated for H > 1/2."""

    hurst: float

    def __post_init__(self):
        if not 0.0 < self.hurst < 1.0:
            raise KernelDomainError(f"hurst must lie in (0,1), got {self.hurst}")

    def gamma(self, t):
        t = _as_times(t)
        return t ** (2.0 * self.hurst)

    def dgamma(self, t):
        t = _as_times(t)
        h = self.hurst
        if h < 0.5 and np.any(t == 0.0):
            raise KernelDomainError(
                f"density 2H t^(2H-1) is unbounded as t -> 0 for hurst={h} < 1/2"
            )
        with np.errstate(divide="ignore"):
            out = 2.0 * h * t ** (2.0 * h - 1.0)
        if h == 0.5:
            out = np.ones_like(t) if np.ndim(t) else 1.0
        elif h > 0.5:
            out = np.where(t == 0.0, 0.0, out)
        return out if np.ndim(t) else float(out)

    def classify(self, horizon) -> RegularityClass:
        h = self.hurst
        if h < 0.5:
            return RegularityClass(
                "singular", f"density 2H t^(2H-1) diverges at t = 0 for H = {h}"
            )
        bound = 2.0 * h * float(horizon) ** (2.0 * h - 1.0)
        return RegularityClass(
            "regular", f"density 2H t^(2H-1) nonnegative, bounded by {bound:.6g}"
        )

    def cache_key(self):
        return ("fbm", self.hurst)


def _damped_gamma_series(h, lam, alpha, t, n_terms=30):
    # gamma(t) = 2 a t^(2H) sum_n (-lam t)^n / (n! (2H-1+n)(2H+n)); converges
    # fast for lam*t <= 1.
    acc = 0.0
    term = 1.0  # (-lam t)^n / n!
    for n in range(n_terms):
        acc += term / ((2 * h - 1 + n) * (2 * h + n))
        term *= -lam * t / (n + 1)
        if abs(term) < 1e-18 * max(abs(acc), 1.0):
            break
    return 2.0 * alpha * t ** (2.0 * h) * acc


def _damped_gamma_quad(h, lam, alpha, t):
    # 2 a int_0^t (t-u) e^(-lam u) u^(2H-2) du with the algebraic endpoint
    # weight u^(2H-2) handled by QAWS.
    val, _ = integrate.quad(
        lambda u: (t - u) * math.exp(-lam * u),
        0.0,
        t,
        weight="alg",
        wvar=(2.0 * h - 2.0, 0.0),
        epsabs=1e-12,
        epsrel=1e-12,
        limit=200,
    )
    return 2.0 * alpha * val


@dataclass(frozen=True)
class DampedFractionalKernel(CovarianceKernel):
    """Fractional memory that decays exponentially at rate ``lam``.

    The increment correlation density is alpha |t-s|^(2H-2) e^(-lam |t-s|),
    so gamma(t) = 2 alpha int_0^t (t-u) u^(2H-2) e^(-lam u) du and
    dgamma(t) = 2 alpha int_0^t u^(2H-2) e^(-lam u) du, which saturates at
    2 alpha Gamma(2H-1) lam^(1-2H) for large t.
    """

    hurst: float
    lam: float
    alpha: float = 1.0

    def __post_init__(self):
        if not 0.5 < self.hurst < 1.0:
            raise KernelDomainError(f"hurst must lie in (1/2,1), got {self.hurst}")
        if self.lam <= 0:
            raise KernelDomainError(f"lam must be > 0, got {self.lam}")
        if self.alpha <= 0:
            raise KernelDomainError(f"alpha must be > 0, got {self.alpha}")

    def _gamma_scalar(self, t):
        if t == 0.0:
            return 0.0
        if self.lam * t <= 0.5:
            return _damped_gamma_series(self.hurst, self.lam, self.alpha, t)
        return _damped_gamma_quad(self.hurst, self.lam, self.alpha, t)

    def gamma(self, t):
        t = _as_times(t)
        if np.ndim(t) == 0:
            return self._gamma_scalar(float(t))
        flat = np.array([self._gamma_scalar(float(v)) for v in np.ravel(t)])
        return flat.reshape(np.shape(t))

    def dgamma(self, t):
        t = _as_times(t)
        a = 2.0 * self.hurst - 1.0
        scale = 2.0 * self.alpha * special.gamma(a) * self.lam ** (-a)
        out = scale * special.gammainc(a, self.lam * t)
        return out if np.ndim(t) else float(out)

    def dgamma_plateau(self):
        """Large-time limit of the density, 2 alpha Gamma(2H-1) lam^(1-2H)."""
        a = 2.0 * self.hurst - 1.0
        return 2.0 * self.alpha * special.gamma(a) * self.lam ** (-a)

    def classify(self, horizon) -> RegularityClass:
        return RegularityClass(
            "regular",
            f"density increases to the plateau {self.dgamma_plateau():.6g}",
        )

    def cache_key(self):
        return ("damped", self.hurst, self.lam, self.alpha)


@dataclass(frozen=True, eq=False)
class TabulatedGammaKernel(CovarianceKernel):
    """Variance function given by a table, interpolated by a monotone cubic.

    The grid must start at 0 with gamma(0) = 0 and be strictly increasing;
    evaluation outside the grid raises instead of extrapolating.
    """

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape or grid.size < 2:
            raise KernelDomainError("grid and values must be matching 1-d arrays")
        if grid[0] != 0.0 or values[0] != 0.0:
            raise KernelDomainError("tabulated gamma must start at gamma(0) = 0")
        if np.any(np.diff(grid) <= 0):
            raise KernelDomainError("tabulated grid must be strictly increasing")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_pchip", interpolate.PchipInterpolator(grid, values))
        object.__setattr__(self, "_dpchip", self._pchip.derivative())

    def _check_range(self, t):
        if np.any(t > self.grid[-1] * (1 + 1e-12)):
            raise TabulatedRangeError(
                f"t beyond tabulated range [{self.grid[0]}, {self.grid[-1]}]"
            )

    def gamma(self, t):
        t = _as_times(t)
        self._check_range(t)
        out = self._pchip(np.clip(t, 0.0, self.grid[-1]))
        return out if np.ndim(t) else float(out)

    def dgamma(self, t):
        t = _as_times(t)
        self._check_range(t)
        out = self._dpchip(np.clip(t, 0.0, self.grid[-1]))
        return out if np.ndim(t) else float(out)

    def classify(self, horizon) -> RegularityClass:
        horizon = float(horizon)
        self._check_range(horizon)
        ts = np.linspace(self.grid[0], horizon, 1024)[1:]
        dens = self._dpchip(ts)
        scale = max(float(np.max(np.abs(dens))), 1e-300)
        if float(np.min(dens)) < -1e-12 * scale:
            return RegularityClass(
                "singular", f"interpolated density is negative near t = {ts[int(np.argmin(dens))]:.6g}"
            )
        return RegularityClass(
            "regular", f"interpolated density nonnegative, bounded by {np.max(dens):.6g}"
        )

    def cache_key(self):
        digest = hashlib.sha1(self.grid.tobytes() + self.values.tobytes()).hexdigest()
        return ("tabulated", digest)
