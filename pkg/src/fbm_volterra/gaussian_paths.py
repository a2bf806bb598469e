import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cholesky, eigvalsh

from .exceptions import GridMismatchError, SingularMatrixError
from .kernels import HurstLike, KernelMatrix, TimeGrid, as_hurst, check_same_grid, fbm_covariance_matrix
from .utils import SeedLike, as_2d, spawn_seeds

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplePath:
    """One realization on a grid, values of shape (n_steps + 1, dim)"""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(as_2d(self.values), dtype=float)
        if values.shape[0] != self.grid.n_steps + 1:
            raise GridMismatchError(
                f"Path has {values.shape[0]} points, grid has {self.grid.n_steps + 1}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=[f"dim_{k}" for k in range(self.dim)])
        df.insert(0, "time", self.grid.points)
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "SamplePath":
        times = df["time"].to_numpy(dtype=float)
        grid = TimeGrid(float(times[-1]), len(times) - 1)
        columns = sorted((c for c in df.columns if c.startswith("dim_")), key=lambda c: int(c[4:]))
        return cls(grid, df[columns].to_numpy(dtype=float))


def stack_paths(paths: Union[np.ndarray, Sequence[SamplePath]]) -> np.ndarray:
    """Collection of paths as an (m, n_steps + 1, dim) array"""
    if isinstance(paths, np.ndarray):
        arr = np.asarray(paths, dtype=float)
        return arr[:, :, None] if arr.ndim == 2 else arr
    paths = list(paths)
    if not paths:
        raise ValueError("Empty path collection")
    for p in paths[1:]:
        check_same_grid(paths[0].grid, p.grid)
    return np.stack([p.values for p in paths])


@dataclass(frozen=True)
class GaussianLaw:
    """Mean and covariance over (grid point x dimension), grid-major ordering"""

    mean: np.ndarray
    cov: np.ndarray
    dim: int = 1

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"Covariance shape {cov.shape} does not match mean of size {mean.size}")
        scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10 * scale:
            raise ValueError("Covariance matrix is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if cov.size:
            smallest = float(eigvalsh(cov, subset_by_index=[0, 0])[0])
            if smallest < -1e-10 * max(float(np.trace(cov)), 1e-300):
                raise ValueError(f"Covariance matrix is not PSD (smallest eigenvalue {smallest:.3e})")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def size(self) -> int:
        return self.mean.size

    def restrict(self, indices: Sequence[int]) -> "GaussianLaw":
        """Marginal on the given flat coordinates"""
        idx = np.asarray(indices, dtype=int)
        return GaussianLaw(self.mean[idx], self.cov[np.ix_(idx, idx)], 1)

    def time_marginal(self, i: int) -> "GaussianLaw":
        idx = np.arange(i * self.dim, (i + 1) * self.dim)
        return GaussianLaw(self.mean[idx], self.cov[np.ix_(idx, idx)], self.dim)


@dataclass(frozen=True)
class RkhsElement:
    """h = int K(., s) q_s ds, represented by its Q-density on the grid"""

    grid: TimeGrid
    q_density: np.ndarray

    def __post_init__(self):
        q = as_2d(self.q_density)
        if q.shape[0] != self.grid.n_steps + 1:
            raise GridMismatchError(f"Q-density has {q.shape[0]} points, grid has {self.grid.n_steps + 1}")
        object.__setattr__(self, "q_density", q)


class MomentAccumulator:
    """Running mean and covariance of flat vectors, mergeable in any order"""

    def __init__(self, size: int):
        self.count = 0
        self.mean = np.zeros(size)
        self.m2 = np.zeros((size, size))

    def update(self, batch: np.ndarray) -> "MomentAccumulator":
        batch = np.asarray(batch, dtype=float).reshape(len(batch), -1)
        other = MomentAccumulator(batch.shape[1])
        other.count = batch.shape[0]
        other.mean = batch.mean(axis=0)
        centered = batch - other.mean
        other.m2 = centered.T @ centered
        return self.merge(other)

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return self
        total = self.count + other.count
        delta = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.count * other.count / total)
        self.mean = self.mean + delta * (other.count / total)
        self.count = total
        return self

    def covariance(self) -> np.ndarray:
        if self.count < 2:
            raise ValueError("Need at least 2 samples for a covariance")
        return self.m2 / (self.count - 1)


def sample_bm(grid: TimeGrid, dim: int = 1, rng_seed: SeedLike = None) -> SamplePath:
    rng = np.random.default_rng(rng_seed)
    increments = rng.standard_normal((grid.n_steps, dim)) * np.sqrt(grid.dt)
    return SamplePath(grid, np.vstack([np.zeros((1, dim)), np.cumsum(increments, axis=0)]))


def sample_bm_increments(grid: TimeGrid, dim: int, n_paths: int, seed: SeedLike = None) -> np.ndarray:
    """Brownian increments, shape (n_paths, n_steps, dim), one stream per path index"""
    scale = np.sqrt(grid.dt)
    return np.stack([
        np.random.default_rng(s).standard_normal((grid.n_steps, dim)) * scale
        for s in spawn_seeds(seed, n_paths)
    ])


def volterra_from_bm(kmat: KernelMatrix, bm: SamplePath) -> SamplePath:
    """Z_{t_i} = sum_{j<i} K[i, j] (W_{j+1} - W_j)"""
    check_same_grid(kmat.grid, bm.grid)
    return SamplePath(kmat.grid, kmat.apply_increments(bm.values))


def volterra_from_increments(kmat: KernelMatrix, increments: np.ndarray) -> np.ndarray:
    """Batched version of volterra_from_bm on raw increments (m, n_steps, dim)"""
    increments = np.asarray(increments, dtype=float)
    if increments.shape[1] != kmat.n_steps:
        raise GridMismatchError(f"Expected {kmat.n_steps} increments, got {increments.shape[1]}")
    return np.einsum("ij,mjd->mid", kmat.entries, increments)


@lru_cache(maxsize=16)
def _cholesky_factor(h: float, horizon: float, n_steps: int) -> np.ndarray:
    grid = TimeGrid(horizon, n_steps)
    cov = fbm_covariance_matrix(h, grid)[1:, 1:]
    try:
        factor = cholesky(cov, lower=True)
    except LinAlgError:
        jitter = 1e-12 * np.trace(cov) / n_steps
        logger.warning(f"Cholesky of R failed for h={h}, n={n_steps}; retrying with jitter {jitter:.2e}")
        try:
            factor = cholesky(cov + jitter * np.eye(n_steps), lower=True)
        except LinAlgError:
            smallest = float(eigvalsh(cov, subset_by_index=[0, 0])[0])
            raise SingularMatrixError(
                f"Covariance not positive definite (smallest eigenvalue {smallest:.3e}); "
                f"increase the jitter or coarsen the grid",
                smallest_eigenvalue=smallest,
            )
    factor.setflags(write=False)
    return factor


def sample_fbm_cholesky(h: HurstLike, grid: TimeGrid, dim: int = 1, rng_seed: SeedLike = None) -> SamplePath:
    """Exact-in-law fBm on the grid"""
    factor = _cholesky_factor(as_hurst(h).h, grid.horizon, grid.n_steps)
    draws = np.random.default_rng(rng_seed).standard_normal((grid.n_steps, dim))
    return SamplePath(grid, np.vstack([np.zeros((1, dim)), factor @ draws]))


def sample_fbm_cholesky_batch(h: HurstLike, grid: TimeGrid, dim: int, n_paths: int,
                              seed: SeedLike = None) -> np.ndarray:
    factor = _cholesky_factor(as_hurst(h).h, grid.horizon, grid.n_steps)
    draws = np.stack([
        np.random.default_rng(s).standard_normal((grid.n_steps, dim)) for s in spawn_seeds(seed, n_paths)
    ])
    values = np.einsum("ij,mjd->mid", factor, draws)
    return np.concatenate([np.zeros((n_paths, 1, dim)), values], axis=1)


def rkhs_norm(q: RkhsElement, up_to: Optional[float] = None) -> float:
    """sqrt(sum_{t_j < up_to} |q_j|^2 dt)"""
    stop = q.grid.n_steps if up_to is None else q.grid.index_of(up_to)
    return float(np.sqrt(np.sum(q.q_density[:stop] ** 2) * q.grid.dt))


def empirical_covariance(paths: Union[np.ndarray, Sequence[SamplePath]]) -> GaussianLaw:
    """Sample mean and unbiased covariance over (grid x dim)"""
    arr = stack_paths(paths)
    if arr.shape[0] < 2:
        raise ValueError("empirical_covariance needs at least 2 paths")
    acc = MomentAccumulator(arr.shape[1] * arr.shape[2]).update(arr.reshape(arr.shape[0], -1))
    return GaussianLaw(acc.mean, acc.covariance(), arr.shape[2])


def write_paths_csv(paths: Union[np.ndarray, Sequence[SamplePath]], grid: TimeGrid, path: str) -> str:
    """Long format: path_id, time, dim_0..dim_{d-1}"""
    arr = stack_paths(paths)
    m, n_points, dim = arr.shape
    df = pd.DataFrame(arr.reshape(m * n_points, dim), columns=[f"dim_{k}" for k in range(dim)])
    df.insert(0, "time", np.tile(grid.points, m))
    df.insert(0, "path_id", np.repeat(np.arange(m), n_points))
    df.to_csv(path, index=False)
    return path


def read_paths_csv(path: str) -> Tuple[TimeGrid, np.ndarray]:
    df = pd.read_csv(path, comment="#")
    times = df.loc[df["path_id"] == df["path_id"].iloc[0], "time"].to_numpy(dtype=float)
    grid = TimeGrid(float(times[-1]), len(times) - 1)
    columns = sorted((c for c in df.columns if c.startswith("dim_")), key=lambda c: int(c[4:]))
    m = df["path_id"].nunique()
    values = df.sort_values(["path_id", "time"])[columns].to_numpy(dtype=float)
    return grid, values.reshape(m, len(times), len(columns))
