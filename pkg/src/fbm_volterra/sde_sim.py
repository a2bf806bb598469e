"""Euler schemes for SDEs with additive Gaussian Volterra noise, particle systems and a McKean-Vlasov proxy.

Drift callables are batched over paths and see the whole prefix of each path:

    b0(t, x)              x: (m, i+1, d)                        -> (m, d)
    pairwise b(t, x, y)   x, y: (p, i+1, d)                     -> (p, d)
    measure b(t, x, mu)   x: (m, i+1, d), mu: (m or 1, N, i+1, d) -> (m, d)

so only values up to the current grid index are ever visible.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import wasserstein_distance

from .exceptions import GridMismatchError, NonFiniteDriftError
from .gaussian_paths import SamplePath, sample_fbm_cholesky, volterra_from_increments
from .kernels import HurstLike, HurstParam, TimeGrid, as_hurst, check_same_grid, fbm_kernel_matrix
from .replications import ReplicationProcessor
from .utils import SeedLike, spawn_seeds, validate_int_at_least

logger = logging.getLogger(__name__)

DriftFn = Callable[..., np.ndarray]


class DriftKind(Enum):
    SINGLE = "single"
    PAIRWISE = "pairwise"
    MEASURE = "measure"


@dataclass(frozen=True)
class DriftSpec:
    kind: DriftKind
    b0: Optional[DriftFn] = None
    b: Optional[DriftFn] = None
    separable: Optional[Tuple[DriftFn, DriftFn]] = None
    modulus: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""

    @classmethod
    def single(cls, b0: DriftFn, modulus=None, name: str = "") -> "DriftSpec":
        return cls(DriftKind.SINGLE, b0=b0, modulus=modulus, name=name)

    @classmethod
    def pairwise(cls, b: DriftFn, b0: DriftFn = None, modulus=None, name: str = "") -> "DriftSpec":
        return cls(DriftKind.PAIRWISE, b0=b0, b=b, modulus=modulus, name=name)

    @classmethod
    def separable_pairwise(cls, phi: DriftFn, psi: DriftFn, b0: DriftFn = None, modulus=None,
                           name: str = "") -> "DriftSpec":
        """b(t, x, y) = phi(t, x) + psi(t, y); enables the O(n) particle update"""
        return cls(DriftKind.PAIRWISE, b0=b0, b=lambda t, x, y: phi(t, x) + psi(t, y),
                   separable=(phi, psi), modulus=modulus, name=name)

    @classmethod
    def measure(cls, b: DriftFn, b0: DriftFn = None, modulus=None, name: str = "") -> "DriftSpec":
        return cls(DriftKind.MEASURE, b0=b0, b=b, modulus=modulus, name=name)

    @classmethod
    def zero(cls) -> "DriftSpec":
        return cls(DriftKind.SINGLE, name="zero")

    def base(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.b0 is None:
            return np.zeros((x.shape[0], x.shape[2]))
        return np.asarray(self.b0(t, x), dtype=float)

    def interaction(self, t: float, x: np.ndarray, other: np.ndarray) -> np.ndarray:
        """Pairwise b(t, x, y) or measure b(t, x, mu); zero when no interaction is declared"""
        if self.b is None:
            return np.zeros((x.shape[0], x.shape[2]))
        return np.asarray(self.b(t, x, other), dtype=float)


def check_finite(values: np.ndarray, step: int, what: str = "drift") -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteDriftError(step, what)
    return values


def initial_array(x0, m: int, dim: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        return np.full((m, dim), float(x0))
    if x0.ndim == 1:
        return np.broadcast_to(x0, (m, dim)).copy()
    return x0.reshape(m, dim).copy()


def euler_paths(drift_fn: Callable[[int, float, np.ndarray], np.ndarray], grid: TimeGrid, x0,
                noise: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Explicit Euler with pre-materialized noise, batched over paths.

    Args:
        drift_fn: (step, t, prefix (m, i+1, d)) -> (m, d)
        grid: time grid
        x0: scalar, (d,) or (m, d) initial values
        noise: noise paths (m, n+1, d) with noise[:, 0] = 0

    Returns:
        (paths, drift values) with shapes (m, n+1, d) and (m, n, d)
    """
    noise = np.asarray(noise, dtype=float)
    m, n_points, dim = noise.shape
    if n_points != grid.n_steps + 1:
        raise GridMismatchError(f"Noise has {n_points} points, grid has {grid.n_steps + 1}")
    t = grid.points
    paths = np.empty((m, n_points, dim))
    paths[:, 0] = initial_array(x0, m, dim)
    drifts = np.empty((m, grid.n_steps, dim))
    dz = np.diff(noise, axis=1)
    for i in range(grid.n_steps):
        b = check_finite(drift_fn(i, t[i], paths[:, :i + 1]), i)
        drifts[:, i] = b
        paths[:, i + 1] = paths[:, i] + b * grid.dt + dz[:, i]
    return paths, drifts


def euler_solve(drift: DriftSpec, h: HurstLike, grid: TimeGrid, x0, noise: SamplePath) -> SamplePath:
    """X_{i+1} = X_i + b(t_i, X[0..i]) dt + (Z_{i+1} - Z_i)"""
    as_hurst(h)
    check_same_grid(grid, noise.grid)
    if drift.kind is not DriftKind.SINGLE:
        raise ValueError(f"euler_solve takes a single-path drift, got {drift.kind.value}")
    paths, _ = euler_paths(lambda i, t, x: drift.base(t, x), grid, x0, noise.values[None])
    return SamplePath(grid, paths[0])


def drift_along_paths(drift: DriftSpec, grid: TimeGrid, paths: np.ndarray) -> np.ndarray:
    """b0(t_i, X[0..i]) at every grid point, shape (m, n+1, d)"""
    paths = np.asarray(paths, dtype=float)
    t = grid.points
    out = np.empty(paths.shape)
    for i in range(grid.n_steps + 1):
        out[:, i] = check_finite(drift.base(t[i], paths[:, :i + 1]), i)
    return out


def noise_from_seeds(h: HurstLike, grid: TimeGrid, dim: int, seeds: Sequence,
                     method: str = "kernel") -> np.ndarray:
    """fBm noise paths (len(seeds), n+1, dim); path k depends only on seeds[k]"""
    if method == "kernel":
        scale = np.sqrt(grid.dt)
        dw = np.stack([np.random.default_rng(s).standard_normal((grid.n_steps, dim)) * scale for s in seeds])
        return volterra_from_increments(fbm_kernel_matrix(h, grid), dw)
    if method == "cholesky":
        return np.stack([sample_fbm_cholesky(h, grid, dim, s).values for s in seeds])
    raise ValueError(f"Unknown noise method {method!r} (expected 'kernel' or 'cholesky')")


@dataclass(frozen=True)
class Ensemble:
    grid: TimeGrid
    h: HurstParam
    drift: DriftSpec
    paths: np.ndarray
    noise_seeds: Tuple = field(default=(), compare=False)

    @property
    def n(self) -> int:
        return self.paths.shape[0]

    @property
    def particles(self) -> List[SamplePath]:
        return [SamplePath(self.grid, p) for p in self.paths]

    def to_frame(self, replication_id: int = 0) -> pd.DataFrame:
        """Long format: replication_id, particle_id, time, dim_0.."""
        n, n_points, dim = self.paths.shape
        df = pd.DataFrame(self.paths.reshape(n * n_points, dim), columns=[f"dim_{k}" for k in range(dim)])
        df.insert(0, "time", np.tile(self.grid.points, n))
        df.insert(0, "particle_id", np.repeat(np.arange(n), n_points))
        df.insert(0, "replication_id", replication_id)
        return df


def _particle_drift(drift: DriftSpec, n: int):
    """Drift of all n particles from their prefixes, fixed reduction order"""
    if drift.kind is DriftKind.PAIRWISE and drift.separable is not None:
        phi, psi = drift.separable

        def step(i, t, x):
            own = np.asarray(phi(t, x), dtype=float)
            other = np.asarray(psi(t, x), dtype=float)
            return drift.base(t, x) + own + (other.sum(axis=0) - other) / (n - 1)
        return step

    if drift.kind is DriftKind.PAIRWISE:
        rows, cols = np.nonzero(~np.eye(n, dtype=bool))

        def step(i, t, x):
            pair = drift.interaction(t, x[rows], x[cols]).reshape(n, n - 1, -1)
            return drift.base(t, x) + pair.sum(axis=1) / (n - 1)
        return step

    if drift.kind is DriftKind.MEASURE:
        def step(i, t, x):
            return drift.base(t, x) + drift.interaction(t, x, x[None])
        return step

    return lambda i, t, x: drift.base(t, x)


def simulate_particle_system(drift: DriftSpec, n: int, h: HurstLike, grid: TimeGrid, seed: SeedLike = None,
                             x0=0.0, dim: int = 1, noise_seeds: Optional[Sequence] = None,
                             noise_method: str = "kernel") -> Ensemble:
    """Synchronous Euler stepping of n particles with i.i.d. fBm noises.

    Particle k is driven by the noise stream noise_seeds[k], so permuting the seeds
    permutes the particles.
    """
    validate_int_at_least(n, 2, "n")
    hp = as_hurst(h)
    seeds = list(noise_seeds) if noise_seeds is not None else spawn_seeds(seed, n)
    if len(seeds) != n:
        raise ValueError(f"Expected {n} noise seeds, got {len(seeds)}")
    noise = noise_from_seeds(hp, grid, dim, seeds, noise_method)
    paths, _ = euler_paths(_particle_drift(drift, n), grid, x0, noise)
    return Ensemble(grid, hp, drift, paths, tuple(seeds))


def simulate_replications(drift: DriftSpec, n: int, h: HurstLike, grid: TimeGrid, n_replications: int,
                          seed: SeedLike = None, x0=0.0, dim: int = 1, noise_method: str = "kernel",
                          workers: int = None, sequential: bool = True,
                          processor: ReplicationProcessor = None) -> np.ndarray:
    """Independent particle systems, shape (n_replications, n, n+1, dim)"""
    processor = processor or ReplicationProcessor(chunk_size=50, desc="Particle systems")

    def chunk(first, seeds):
        return np.stack([
            simulate_particle_system(drift, n, h, grid, seed=s, x0=x0, dim=dim, noise_method=noise_method).paths
            for s in seeds
        ])

    return processor.run(chunk, n_replications, seed, workers=workers, sequential=sequential)


def checkpoint_indices(grid: TimeGrid, count: int = 8) -> np.ndarray:
    return np.unique(np.round(np.linspace(grid.n_steps / count, grid.n_steps, count)).astype(int))


def sliced_wasserstein1(a: np.ndarray, b: np.ndarray, indices: Sequence[int], n_projections: int = 16,
                        seed: int = 0) -> float:
    """Max over checkpoints of the sliced 1-Wasserstein distance between path marginals"""
    dim = a.shape[2]
    if dim == 1:
        directions = np.ones((1, 1))
    else:
        directions = np.random.default_rng(seed).standard_normal((n_projections, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    worst = 0.0
    for i in indices:
        pa, pb = a[:, i] @ directions.T, b[:, i] @ directions.T
        dist = np.mean([wasserstein_distance(pa[:, k], pb[:, k]) for k in range(directions.shape[0])])
        worst = max(worst, float(dist))
    return worst


@dataclass
class ConvergenceReport:
    distances: List[float]
    converged: bool
    n_iterations: int
    tol: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"iteration": np.arange(1, len(self.distances) + 1), "distance": self.distances})


def mckean_vlasov_proxy(drift: DriftSpec, h: HurstLike, grid: TimeGrid, n_pool: int = 1000, n_iter: int = 20,
                        tol: float = 1e-3, seed: SeedLike = None, x0=0.0, dim: int = 1,
                        noise_method: str = "kernel") -> Tuple[np.ndarray, ConvergenceReport]:
    """Fixed-point iteration on the measure flow.

    The pool is first solved against the degenerate flow sitting at x0; each
    iteration then re-solves the pool with the measure argument frozen to the
    previous pool. Noise is shared across iterations, so the distances measure
    the contraction of the solution map rather than Monte Carlo noise.
    """
    validate_int_at_least(n_pool, 100, "n_pool")
    if drift.kind is not DriftKind.MEASURE:
        raise ValueError(f"mckean_vlasov_proxy takes a measure drift, got {drift.kind.value}")
    hp = as_hurst(h)
    noise = noise_from_seeds(hp, grid, dim, spawn_seeds(seed, n_pool), noise_method)
    indices = checkpoint_indices(grid)

    def solve(frozen: np.ndarray) -> np.ndarray:
        def step(i, t, x):
            return drift.base(t, x) + drift.interaction(t, x, frozen[None, :, :i + 1])
        return euler_paths(step, grid, x0, noise)[0]

    start = np.broadcast_to(initial_array(x0, 1, dim)[:, None, :], (1, grid.n_steps + 1, dim))
    pool = solve(start)
    distances: List[float] = []
    converged = False
    for k in range(1, n_iter + 1):
        new_pool = solve(pool)
        distances.append(sliced_wasserstein1(new_pool, pool, indices))
        pool = new_pool
        logger.debug(f"MV iteration {k}: sliced W1 = {distances[-1]:.3e}")
        if distances[-1] < tol:
            converged = True
            break
    if not converged:
        logger.warning(f"McKean-Vlasov iteration did not reach tol={tol:g} in {n_iter} iterations "
                       f"(last distance {distances[-1]:.3e})")
    return pool, ConvergenceReport(distances, converged, len(distances), tol)


def marginal_samples(replications: Union[np.ndarray, Sequence[Ensemble]], k: int) -> np.ndarray:
    """Particles 0..k-1 of every replication, shape (R, k, n+1, d)"""
    if not isinstance(replications, np.ndarray):
        replications = np.stack([e.paths for e in replications])
    n = replications.shape[1]
    validate_int_at_least(k, 1, "k")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of particles n={n}")
    return replications[:, :k]
