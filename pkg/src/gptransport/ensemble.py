"""Monte Carlo engine: replica-parallel moment estimation for mode ensembles.

Replicas are cheap and independent, so parallelism is at replica level only.
Work is cut into fixed chunks whose statistics are one-pass Welford
accumulations; chunk partials are merged in chunk order, so the result is
bit-identical no matter how many workers computed them.  Replica r always
draws from the substream (seed, k, r), independent of the chunking.

Pair covariances are estimated in a second streaming pass that accumulates
the centered products (x - mean_x) conj(y - mean_y) against the first pass's
frozen means; the spread of those products is the influence-function variance
of the covariance estimator, which stays meaningful even when the raw product
x conj(y) is deterministic (as it is on the diagonal for unimodular noise).
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .kernels import CovarianceKernel
from .sampling import regularize, sample_paths
from .spectral import SpectralProblem, reconstruct, solve_lattice


@dataclass
class WelfordAccumulator:
    """Streaming mean and squared scatter of complex arrays, with merge."""

    count: int
    mean: np.ndarray  # complex
    m2: np.ndarray    # real, sum |x - mean|^2

    @classmethod
    def empty(cls, shape) -> "WelfordAccumulator":
        return cls(count=0, mean=np.zeros(shape, dtype=complex), m2=np.zeros(shape))

    def update(self, values: np.ndarray) -> None:
        self.count += 1
        delta = values - self.mean
        self.mean += delta / self.count
        self.m2 += (delta * np.conj(values - self.mean)).real

    def merge(self, other: "WelfordAccumulator") -> "WelfordAccumulator":
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        na, nb = self.count, other.count
        n = na + nb
        delta = other.mean - self.mean
        out = WelfordAccumulator.empty(self.mean.shape)
        out.count = n
        out.mean = self.mean + delta * (nb / n)
        out.m2 = self.m2 + other.m2 + np.abs(delta) ** 2 * (na * nb / n)
        return out


@dataclass(frozen=True, eq=False)
class EnsembleStats:
    """Empirical moments of mode values over replicas, with standard errors."""

    n_replicas: int
    times: np.ndarray
    xis: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    se_mean: np.ndarray
    pairs: tuple = ()
    pair_cov: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=complex))
    pair_cov_se: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def _mode_values(problem, kernel, epsilon, dt, seed, times, xis, replica):
    n_steps = int(np.ceil((times.max() + epsilon) / dt - 1e-9))
    path = sample_paths(kernel, dt, n_steps, problem.sigmas.shape[0], seed, replica=replica)
    drive = regularize(path, epsilon, times)
    proj = xis @ problem.sigmas.T           # (n_xi, K)
    phase = proj @ drive.g_values           # (n_xi, n_t)
    hat0 = problem.theta0.hat(xis[:, 0], xis[:, 1]).astype(complex)
    ksq = problem.kappa * np.sum(xis**2, axis=1)
    heat = np.exp(-np.outer(ksq, times))
    return hat0[:, None] * heat * np.exp(1j * phase)


def _mean_chunk(args) -> WelfordAccumulator:
    problem, kernel, epsilon, dt, seed, times, xis, start, stop = args
    acc = WelfordAccumulator.empty((len(xis), len(times)))
    for r in range(start, stop):
        acc.update(_mode_values(problem, kernel, epsilon, dt, seed, times, xis, r))
    return acc


def _pair_chunk(args) -> WelfordAccumulator:
    problem, kernel, epsilon, dt, seed, times, xis, pair_idx, frozen_mean, start, stop = args
    ii = [p[0] for p in pair_idx]
    jj = [p[1] for p in pair_idx]
    acc = WelfordAccumulator.empty((len(pair_idx), len(times)))
    for r in range(start, stop):
        vals = _mode_values(problem, kernel, epsilon, dt, seed, times, xis, r)
        centered = vals - frozen_mean
        acc.update(centered[ii] * np.conj(centered[jj]))
    return acc


def _map_chunks(worker, chunks, workers):
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(worker, chunks))
    return [worker(c) for c in chunks]


def _merge_ordered(partials):
    acc = partials[0]
    for part in partials[1:]:
        acc = acc.merge(part)
    return acc


def run_ensemble(
    problem: SpectralProblem,
    kernel: CovarianceKernel,
    epsilon: float,
    n_replicas: int,
    seed: int,
    times,
    xis,
    pairs=(),
    dt: float | None = None,
    chunk_size: int = 2048,
    workers: int = 1,
) -> EnsembleStats:
    """Estimate mode means/variances (and configured pair covariances).

    ``pairs`` lists index pairs into ``xis``.  The result depends only on
    (seed, config): chunk boundaries are fixed by ``chunk_size`` and partials
    are merged in chunk order, so any worker count reproduces the same bytes.
    """
    if n_replicas < 2:
        raise ValueError("need n_replicas >= 2")
    times = np.asarray(times, dtype=float)
    xis = np.atleast_2d(np.asarray(xis, dtype=float))
    dt = epsilon if dt is None else dt
    bounds = [(s, min(s + chunk_size, n_replicas)) for s in range(0, n_replicas, chunk_size)]
    chunks = [(problem, kernel, epsilon, dt, seed, times, xis, s, e) for s, e in bounds]
    acc = _merge_ordered(_map_chunks(_mean_chunk, chunks, workers))
    n = acc.count
    variance = acc.m2 / (n - 1)
    pair_idx = tuple(tuple(int(i) for i in p) for p in pairs)
    pair_cov = np.zeros((0, len(times)), dtype=complex)
    pair_se = np.zeros((0, len(times)))
    if pair_idx:
        frozen = acc.mean.copy()
        pchunks = [
            (problem, kernel, epsilon, dt, seed, times, xis, pair_idx, frozen, s, e)
            for s, e in bounds
        ]
        pacc = _merge_ordered(_map_chunks(_pair_chunk, pchunks, workers))
        # mean of centered products is (n-1)/n of the usual covariance estimate
        pair_cov = pacc.mean * (n / (n - 1))
        pair_se = np.sqrt(pacc.m2 / (n - 1) / n)
    return EnsembleStats(
        n_replicas=n,
        times=times,
        xis=xis,
        mean=acc.mean,
        variance=variance,
        se_mean=np.sqrt(variance / n),
        pairs=pair_idx,
        pair_cov=pair_cov,
        pair_cov_se=pair_se,
    )


@dataclass
class FieldMoments:
    """Per-gridpoint streaming central moments up to order four."""

    count: int
    mean: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    m4: np.ndarray

    @classmethod
    def empty(cls, shape) -> "FieldMoments":
        return cls(0, np.zeros(shape), np.zeros(shape), np.zeros(shape), np.zeros(shape))

    def update(self, x: np.ndarray) -> None:
        n = self.count + 1
        delta = x - self.mean
        dn = delta / n
        term = delta * dn * (n - 1)
        self.m4 += term * dn**2 * (n * n - 3 * n + 3) + 6 * dn**2 * self.m2 - 4 * dn * self.m3
        self.m3 += term * dn * (n - 2) - 3 * dn * self.m2
        self.m2 += term
        self.mean += dn
        self.count = n

    def merge(self, other: "FieldMoments") -> "FieldMoments":
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        na, nb = self.count, other.count
        n = na + nb
        d = other.mean - self.mean
        out = FieldMoments.empty(self.mean.shape)
        out.count = n
        out.mean = self.mean + d * nb / n
        out.m2 = self.m2 + other.m2 + d**2 * na * nb / n
        out.m3 = (
            self.m3 + other.m3
            + d**3 * na * nb * (na - nb) / n**2
            + 3.0 * d * (na * other.m2 - nb * self.m2) / n
        )
        out.m4 = (
            self.m4 + other.m4
            + d**4 * na * nb * (na**2 - na * nb + nb**2) / n**3
            + 6.0 * d**2 * (na**2 * other.m2 + nb**2 * self.m2) / n**2
            + 4.0 * d * (na * other.m3 - nb * self.m3) / n
        )
        return out


@dataclass(frozen=True, eq=False)
class FieldStats:
    x: np.ndarray
    t: float
    n_replicas: int
    mean: np.ndarray
    variance: np.ndarray
    variance_se: np.ndarray


def _field_chunk(args) -> FieldMoments:
    problem, kernel, epsilon, dt, seed, t, start, stop = args
    times = np.array([t])
    moments = FieldMoments.empty((problem.n_modes, problem.n_modes))
    n_steps = int(np.ceil((t + epsilon) / dt - 1e-9))
    for r in range(start, stop):
        path = sample_paths(kernel, dt, n_steps, problem.sigmas.shape[0], seed, replica=r)
        drive = regularize(path, epsilon, times)
        modes = solve_lattice(problem, drive, t)
        field = reconstruct(problem, modes, t=t)
        moments.update(field.values)
    return moments


def mc_variance_field(
    problem: SpectralProblem,
    kernel: CovarianceKernel,
    epsilon: float,
    n_replicas: int,
    t: float,
    seed: int,
    dt: float | None = None,
    chunk_size: int = 512,
    workers: int = 1,
) -> FieldStats:
    """Per-gridpoint empirical variance of the reconstructed field, with SE.

    The SE of the variance uses the fourth central moment:
    Var(s^2) = m4/n - s^4 (n-3)/(n (n-1)).
    """
    if n_replicas < 2:
        raise ValueError("need n_replicas >= 2")
    dt = epsilon if dt is None else dt
    chunks = [
        (problem, kernel, epsilon, dt, seed, float(t), s, min(s + chunk_size, n_replicas))
        for s in range(0, n_replicas, chunk_size)
    ]
    partials = _map_chunks(_field_chunk, chunks, workers)
    moments = _merge_ordered(partials)
    n = moments.count
    variance = moments.m2 / (n - 1)
    mu4 = moments.m4 / n
    var_of_var = np.maximum(mu4 / n - variance**2 * (n - 3) / (n * (n - 1)), 0.0)
    return FieldStats(
        x=problem.x_grid(),
        t=float(t),
        n_replicas=n,
        mean=moments.mean,
        variance=variance,
        variance_se=np.sqrt(var_of_var),
    )
