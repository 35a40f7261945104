"""Exact Gaussian path sampling and construction of mollified drives.

Paths are drawn on uniform grids by Cholesky factorization of the stationary
increment-covariance (symmetric Toeplitz) matrix, then cumulative-summed, so
the finite-dimensional law is exact up to floating point.  The mollified
drive integrates the symmetric difference quotient of the path over a window
2*epsilon, producing a Lipschitz-in-time driving signal.

Seed discipline: component k of replica r draws from the PCG64 stream spawned
as SeedSequence(seed, spawn_key=(k, r)).  Replicas are therefore independent
and reproducible regardless of how work is partitioned.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import toeplitz

from .kernels import CovarianceKernel


class CovarianceFactorizationError(RuntimeError):
    """Increment covariance not positive definite after jitter."""


class HorizonError(ValueError):
    """Requested times need a longer sampled path."""


@dataclass(frozen=True, eq=False)
class DrivePath:
    """One multi-component Gaussian path on a uniform grid; values[k][0] = 0."""

    kernel: CovarianceKernel | None
    dt: float
    values: np.ndarray  # (n_components, n_steps + 1)
    seed: int | None = None

    @property
    def n_components(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1] - 1

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values.shape[1]) * self.dt


@dataclass(frozen=True, eq=False)
class RegularizedDrive:
    """Windowed-average integrals of a path, one row per component."""

    epsilon: float
    t_grid: np.ndarray
    g_values: np.ndarray  # (n_components, len(t_grid))

    @property
    def n_components(self) -> int:
        return self.g_values.shape[0]

    def increments(self) -> np.ndarray:
        return np.diff(self.g_values, axis=1)


_CHOL_CACHE: dict = {}


def increment_cholesky(kernel: CovarianceKernel, dt: float, n_steps: int) -> np.ndarray:
    """Lower Cholesky factor of the n_steps x n_steps increment covariance.

    Cached per (kernel identity, dt, n_steps); a jitter of 1e-12 * Var is
    attempted once before the kernel is rejected.
    """
    key = (kernel.cache_key(), float(dt), int(n_steps))
    hit = _CHOL_CACHE.get(key)
    if hit is not None:
        return hit
    lags = np.arange(n_steps, dtype=float)
    gam = kernel.gamma(np.concatenate([lags, [n_steps]]) * dt)
    row = np.empty(n_steps)
    row[0] = gam[1]
    if n_steps > 1:
        m = np.arange(1, n_steps)
        row[1:] = 0.5 * (gam[m + 1] + gam[m - 1] - 2.0 * gam[m])
    cov = toeplitz(row)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        jitter = 1e-12 * row[0]
        try:
            chol = np.linalg.cholesky(cov + jitter * np.eye(n_steps))
        except np.linalg.LinAlgError as exc:
            raise CovarianceFactorizationError(
                f"increment covariance for {kernel!r} at dt={dt}, n={n_steps} is not "
                f"positive definite even with jitter {jitter:.3g}"
            ) from exc
    _CHOL_CACHE[key] = chol
    return chol


def path_rng(seed: int, component: int, replica: int = 0) -> np.random.Generator:
    """Deterministic substream for one (component, replica) pair."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(component), int(replica)))
    return np.random.Generator(np.random.PCG64(ss))


def sample_paths(
    kernel: CovarianceKernel,
    dt: float,
    n_steps: int,
    n_components: int,
    seed: int,
    replica: int = 0,
) -> DrivePath:
    """Draw one exact multi-component path; deterministic for a fixed seed."""
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if n_steps < 1 or n_components < 1:
        raise ValueError("n_steps and n_components must be >= 1")
    chol = increment_cholesky(kernel, dt, n_steps)
    values = np.zeros((n_components, n_steps + 1))
    for k in range(n_components):
        z = path_rng(seed, k, replica).standard_normal(n_steps)
        values[k, 1:] = np.cumsum(chol @ z)
    return DrivePath(kernel=kernel, dt=dt, values=values, seed=seed)


def _interp_weights(positions: np.ndarray, n_points: int):
    idx = np.clip(np.floor(positions).astype(int), 0, n_points - 2)
    frac = np.clip(positions - idx, 0.0, 1.0)
    return idx, frac


def regularize(path: DrivePath, epsilon: float, t_grid) -> RegularizedDrive:
    """Integrate (G(s+eps) - G((s-eps)+)) / (2 eps) up to each requested time.

    Trapezoid quadrature on the path grid; the path is evaluated at off-grid
    points s +- eps by linear interpolation.  Requires epsilon >= dt (the grid
    resolves the window) and max(t_grid) + epsilon <= path horizon.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid < 0):
        raise ValueError("t_grid must be nonnegative")
    if epsilon < path.dt * (1 - 1e-12):
        raise ValueError(f"epsilon={epsilon} must be >= path dt={path.dt}")
    t_max = float(t_grid.max()) if t_grid.size else 0.0
    needed = t_max + epsilon
    if needed > path.horizon * (1 + 1e-12):
        raise HorizonError(
            f"path horizon {path.horizon:.6g} too short: need >= {needed:.6g} "
            f"(max t {t_max:.6g} plus epsilon {epsilon:.6g})"
        )
    dt = path.dt
    # quadrature nodes: path grid points covering [0, t_max]
    n_nodes = int(np.ceil(t_max / dt - 1e-9)) + 1
    n_nodes = min(n_nodes, path.n_steps + 1)
    s = np.arange(n_nodes) * dt
    n_pts = path.values.shape[1]
    idx_p, frac_p = _interp_weights((s + epsilon) / dt, n_pts)
    idx_m, frac_m = _interp_weights(np.maximum(s - epsilon, 0.0) / dt, n_pts)
    vals = path.values
    g_plus = vals[:, idx_p] * (1.0 - frac_p) + vals[:, idx_p + 1] * frac_p
    g_minus = vals[:, idx_m] * (1.0 - frac_m) + vals[:, idx_m + 1] * frac_m
    quotient = (g_plus - g_minus) / (2.0 * epsilon)
    cum = cumulative_trapezoid(quotient, dx=dt, axis=1, initial=0.0)
    g_values = np.vstack([np.interp(t_grid, s, cum[k]) for k in range(vals.shape[0])])
    return RegularizedDrive(epsilon=float(epsilon), t_grid=t_grid, g_values=g_values)


def dump_paths(path: DrivePath, fh) -> None:
    """Append NDJSON audit records, one per component."""
    for k in range(path.n_components):
        rec = {
            "seed": path.seed,
            "k": k,
            "dt": path.dt,
            "values": [float(v) for v in path.values[k]],
        }
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
