"""Mimicking SDEs: per-time regression of Q^b on path features, the exact
linear-Gaussian oracle, and simulation of the mimicked process

    X^_t = X^_0 + int_0^t K(t, s) Q~(s, X^[s]) ds + Z^_t,   Q~(t, X[t]) = E[Q^b_t | X[t]].
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.stats import ks_2samp
from sklearn.linear_model import Ridge

from .exceptions import GridMismatchError, NonFiniteDriftError, SingularMatrixError
from .gaussian_paths import GaussianLaw, SamplePath, sample_bm_increments, stack_paths
from .kernels import HurstLike, KernelMatrix, KernelMode, TimeGrid, as_hurst, check_same_grid, fbm_kernel_matrix
from .sde_sim import euler_paths, noise_from_seeds
from .transforms import q_transform_matrix, q_transform_paths
from .utils import SeedLike, spawn_seeds, validate_int_at_least, validate_positive

logger = logging.getLogger(__name__)

MIN_TRAINING_PAIRS = 500


@dataclass(frozen=True)
class FeatureMap:
    """Current value, n_lags evenly spaced earlier values and optionally X_0, per path coordinate"""

    n_lags: int = 4
    include_initial: bool = True

    def lag_indices(self, i: int) -> List[int]:
        """Grid indices used at step i, current value first"""
        span = self.n_lags + 1
        indices = [i] + [(i * (span - lag)) // span for lag in range(1, self.n_lags + 1)]
        if self.include_initial:
            indices.append(0)
        return indices

    def n_features(self, dim: int, n_coordinates: int = 1) -> int:
        return n_coordinates * dim * (1 + self.n_lags + int(self.include_initial))

    def transform(self, i: int, *coordinates: np.ndarray) -> np.ndarray:
        """Features at step i from one or more path arrays (m, >= i+1, d); only indices <= i are read"""
        idx = self.lag_indices(i)
        blocks = [np.asarray(c, dtype=float)[:, idx, :].reshape(len(c), -1) for c in coordinates]
        return np.concatenate(blocks, axis=1)

    def names(self, i: int, dim: int, coordinate_names: Sequence[str] = ("x",)) -> List[str]:
        out = []
        for name in coordinate_names:
            for j in self.lag_indices(i):
                out.extend(f"{name}[{j}]_{k}" for k in range(dim))
        return out


@dataclass
class ConditionalDriftEstimator:
    grid: TimeGrid
    feature_map: FeatureMap
    coefficients: np.ndarray        # (n+1, F, d_out)
    intercepts: np.ndarray          # (n+1, d_out)
    std_errors: np.ndarray          # (n+1, F, d_out)
    r2: np.ndarray                  # (n+1,)
    n_samples: int
    alphas: np.ndarray              # (n+1,)
    rank_deficient_steps: List[int] = field(default_factory=list)
    n_coordinates: int = 1

    @property
    def dim(self) -> int:
        return self.intercepts.shape[1]

    def predict(self, i: int, *coordinates: np.ndarray) -> np.ndarray:
        if len(coordinates) != self.n_coordinates:
            raise ValueError(f"Estimator expects {self.n_coordinates} path coordinates, got {len(coordinates)}")
        features = self.feature_map.transform(i, *coordinates)
        out = features @ self.coefficients[i] + self.intercepts[i]
        if not np.all(np.isfinite(out)):
            raise NonFiniteDriftError(i, "estimator")
        return out

    def predict_paths(self, *coordinates: np.ndarray) -> np.ndarray:
        """Q~ at every grid index along full paths, shape (m, n+1, d_out)"""
        return np.stack([self.predict(i, *coordinates) for i in range(self.grid.n_steps + 1)], axis=1)

    def to_frame(self) -> pd.DataFrame:
        """One row per (step, output, feature) plus the intercepts"""
        n_points, n_features, d_out = self.coefficients.shape
        in_dim = n_features // self.feature_map.n_features(1, self.n_coordinates)
        coordinate_names = [f"c{k}" for k in range(self.n_coordinates)]
        rows = []
        for i in range(n_points):
            names = self.feature_map.names(i, in_dim, coordinate_names) + ["intercept"]
            for out in range(d_out):
                coefs = np.append(self.coefficients[i, :, out], self.intercepts[i, out])
                errors = np.append(self.std_errors[i, :, out], np.nan)
                for name, coef, err in zip(names, coefs, errors):
                    rows.append({"step": i, "time": i * self.grid.dt, "output": out, "feature": name,
                                 "coefficient": coef, "std_error": err, "r2": self.r2[i],
                                 "alpha": self.alphas[i]})
        return pd.DataFrame(rows)

    def to_csv(self, path: str) -> str:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# horizon={self.grid.horizon!r} n_steps={self.grid.n_steps} "
                     f"n_lags={self.feature_map.n_lags} include_initial={self.feature_map.include_initial} "
                     f"n_samples={self.n_samples}\n")
            self.to_frame().to_csv(fh, index=False)
        return path


def _fit_step(i: int, features: np.ndarray, target: np.ndarray, regularization: float):
    m, n_features = features.shape
    d_out = target.shape[1]
    coef = np.zeros((n_features, d_out))
    err = np.zeros((n_features, d_out))
    spread = features.std(axis=0)
    keep = spread > 1e-12 * np.maximum(1.0, np.abs(features.mean(axis=0)))
    # repeated lag indices early on the grid give identical columns
    for j in range(n_features):
        if keep[j] and any(keep[k] and np.array_equal(features[:, j], features[:, k]) for k in range(j)):
            keep[j] = False
    alpha = regularization * m
    deficient = False
    x = features[:, keep]
    y_mean = target.mean(axis=0)

    if x.shape[1] == 0:
        tss = float(np.sum((target - y_mean) ** 2))
        r2 = 0.0 if tss > 0 else 1.0
        return coef, y_mean, err, r2, alpha, deficient

    centered = x - x.mean(axis=0)
    if np.linalg.matrix_rank(centered) < x.shape[1]:
        alpha *= 1e3
        deficient = True
        logger.warning(f"Step {i}: rank-deficient design ({x.shape[1]} features); "
                       f"ridge strength raised to {alpha:.3g}")

    model = Ridge(alpha=alpha, fit_intercept=True)
    model.fit(x, target)
    kept_coef = np.asarray(model.coef_, dtype=float).reshape(d_out, -1).T
    intercept = np.asarray(model.intercept_, dtype=float).reshape(d_out)
    if not (np.all(np.isfinite(kept_coef)) and np.all(np.isfinite(intercept))):
        raise NonFiniteDriftError(i, "regression coefficient")

    residual = target - (x @ kept_coef + intercept)
    rss = np.sum(residual ** 2, axis=0)
    tss = np.sum((target - y_mean) ** 2, axis=0)
    r2 = float(1.0 - rss.sum() / tss.sum()) if tss.sum() > 0 else 1.0

    gram = centered.T @ centered
    inv = np.linalg.pinv(gram + alpha * np.eye(gram.shape[0]))
    sandwich = np.diag(inv @ gram @ inv)
    dof = max(m - x.shape[1] - 1, 1)
    sigma2 = rss / dof
    coef[keep] = kept_coef
    err[keep] = np.sqrt(np.outer(sandwich, sigma2))
    return coef, intercept, err, r2, alpha, deficient


def fit_conditional_q(q_paths: np.ndarray, x_paths, grid: TimeGrid, feature_map: FeatureMap = None,
                      regularization: float = 1e-8, workers: int = 1,
                      min_samples: int = MIN_TRAINING_PAIRS) -> ConditionalDriftEstimator:
    """Per-step ridge regression of Q^b_t on features of X[t].

    Args:
        q_paths: realized Q^b paths (m, n+1, d_out)
        x_paths: observed paths (m, n+1, d), or a tuple of such arrays for several coordinates
        grid: common time grid
        feature_map: features of the path prefix, defaults to FeatureMap()
        regularization: ridge strength per sample
        workers: thread count for the independent per-step fits
        min_samples: minimum number of training pairs

    Returns:
        ConditionalDriftEstimator with per-step diagnostics
    """
    feature_map = feature_map or FeatureMap()
    coordinates = tuple(x_paths) if isinstance(x_paths, (tuple, list)) else (x_paths,)
    coordinates = tuple(stack_paths(c) for c in coordinates)
    q = stack_paths(q_paths)
    m = q.shape[0]
    validate_int_at_least(m, min_samples, "samples")
    for c in coordinates:
        if c.shape[0] != m:
            raise ValueError(f"Got {m} Q paths but {c.shape[0]} observed paths")
        if c.shape[1] != grid.n_steps + 1:
            raise GridMismatchError(f"Paths have {c.shape[1]} points, grid has {grid.n_steps + 1}")
    if q.shape[1] != grid.n_steps + 1:
        raise GridMismatchError(f"Q paths have {q.shape[1]} points, grid has {grid.n_steps + 1}")
    validate_positive(regularization, "regularization")

    def fit(i):
        return _fit_step(i, feature_map.transform(i, *coordinates), q[:, i], regularization)

    steps = range(grid.n_steps + 1)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(fit, steps))
    else:
        results = [fit(i) for i in steps]

    estimator = ConditionalDriftEstimator(
        grid=grid,
        feature_map=feature_map,
        coefficients=np.stack([r[0] for r in results]),
        intercepts=np.stack([r[1] for r in results]),
        std_errors=np.stack([r[2] for r in results]),
        r2=np.array([r[3] for r in results]),
        n_samples=m,
        alphas=np.array([r[4] for r in results]),
        rank_deficient_steps=[i for i, r in zip(steps, results) if r[5]],
        n_coordinates=len(coordinates),
    )
    logger.info(f"Fitted conditional drift on {m} paths, {grid.n_steps + 1} steps "
                f"(median R^2 {np.median(estimator.r2):.3f})")
    return estimator


def linear_gaussian_training(theta: float, h: HurstLike, grid: TimeGrid, n_samples: int, seed: SeedLike = None,
                             x0: float = 0.0, noise_method: str = "kernel") -> Tuple[np.ndarray, np.ndarray]:
    """Sample (Q^b, X) pairs of X_t = x0 + theta int_0^t B~_s ds + Z_t with B~ an independent BM"""
    aux_seed, noise_seed = spawn_seeds(seed, 2)
    aux = sample_bm_increments(grid, 1, n_samples, aux_seed)
    b = theta * np.concatenate([np.zeros((n_samples, 1, 1)), np.cumsum(aux, axis=1)], axis=1)
    noise = noise_from_seeds(h, grid, 1, spawn_seeds(noise_seed, n_samples), noise_method)
    x, _ = euler_paths(lambda i, t, prefix: b[:, i], grid, x0, noise)
    return q_transform_paths(h, b, grid), x


@dataclass(frozen=True)
class LinearGaussianOracle:
    """Exact laws of the linear-Gaussian model and of its mimicking SDE on the grid"""

    grid: TimeGrid
    theta: float
    law_x: GaussianLaw
    law_mimicked: GaussianLaw
    q_coefficients: np.ndarray      # Q~_i = sum_k G[i, k] (X_{k+1} - x0)
    cov_qx: np.ndarray              # Cov(Q_i, X_j), (n+1, n+1)
    var_q: np.ndarray
    condition_number: float
    jittered: bool = False

    def relative_gap(self) -> float:
        """max |Cov_X - Cov_mimicked| / max |Cov_X|"""
        scale = float(np.max(np.abs(self.law_x.cov)))
        return float(np.max(np.abs(self.law_x.cov - self.law_mimicked.cov))) / scale if scale > 0 else 0.0

    def conditional_variance(self) -> np.ndarray:
        """Var(Q~_i) along the grid"""
        cov = self.law_x.cov[1:, 1:]
        g = self.q_coefficients
        return np.einsum("ik,kl,il->i", g, cov, g)

    def feature_projection(self, i: int, feature_indices: Sequence[int]) -> np.ndarray:
        """Coefficients of the exact projection of Q_i onto X at the given grid indices.

        Deterministic indices (t_0) get a zero coefficient.
        """
        idx = np.asarray(feature_indices, dtype=int)
        if np.any(idx > i):
            raise ValueError(f"Features at step {i} may only use indices <= {i}")
        coef = np.zeros(len(idx))
        random = idx > 0
        _, first = np.unique(idx, return_index=True)
        use = np.zeros(len(idx), dtype=bool)
        use[first] = True
        use &= random
        if not np.any(use):
            return coef
        sel = idx[use]
        cov = self.law_x.cov[np.ix_(sel, sel)]
        coef[use] = np.linalg.solve(cov, self.cov_qx[i, sel])
        return coef


def _factor_with_jitter(cov: np.ndarray) -> Tuple[np.ndarray, bool]:
    try:
        return cholesky(cov, lower=True), False
    except LinAlgError:
        jitter = 1e-12 * np.trace(cov) / cov.shape[0]
        logger.warning(f"Conditioning covariance not positive definite; retrying with jitter {jitter:.2e}")
        try:
            return cholesky(cov + jitter * np.eye(cov.shape[0]), lower=True), True
        except LinAlgError:
            condition = float(np.linalg.cond(cov))
            raise SingularMatrixError(
                f"Conditioning covariance is singular (condition number {condition:.3e})",
                condition_number=condition,
            )


def linear_gaussian_oracle(theta: float, h: HurstLike, grid: TimeGrid, x0: float = 0.0) -> LinearGaussianOracle:
    """Exact law of X = x0 + theta int B~ + Z and of its mimicking SDE.

    With u = (dB~, dW) ~ N(0, dt I), X - x0 = [theta S C, A] u and Q = [theta Mq C, 0] u,
    where C cumulates increments, S is the left Riemann sum and A the K matrix.
    Conditioning on X[t_i] is done with innovations e = L^-1 (X_{1:n} - x0):
    E[Q_i | X_1..X_i] = sum_{k <= i} Cov(Q_i, e_k) e_k. The mimicked recursion
    Y = M Y + A dW^ is then propagated exactly.
    """
    hp = as_hurst(h)
    n = grid.n_steps
    dt = grid.dt
    kmat = fbm_kernel_matrix(hp, grid, "K", KernelMode.INCREMENT)
    a = np.asarray(kmat.entries)
    cum = np.tril(np.ones((n + 1, n)), -1)
    riemann = np.tril(np.ones((n + 1, n + 1)), -1) * dt
    drift_map = theta * riemann @ cum
    q_map = theta * q_transform_matrix(hp, grid) @ cum

    cov_x = dt * (drift_map @ drift_map.T + a @ a.T)
    cov_qx = dt * q_map @ drift_map.T
    var_q = dt * np.sum(q_map ** 2, axis=1)

    cov_obs = cov_x[1:, 1:]
    factor, jittered = _factor_with_jitter(cov_obs)
    condition = float(np.linalg.cond(factor) ** 2)
    factor_inv = solve_triangular(factor, np.eye(n), lower=True)
    innovations = cov_qx[:, 1:] @ factor_inv.T
    causal = np.arange(n)[None, :] < np.arange(n + 1)[:, None]
    g = (innovations * causal) @ factor_inv

    m = a[1:] @ (dt * g[:n])
    propagate = solve_triangular(np.eye(n) - m, a[1:], lower=True, unit_diagonal=True)
    cov_hat = np.zeros((n + 1, n + 1))
    cov_hat[1:, 1:] = dt * propagate @ propagate.T
    mean = np.full(n + 1, float(x0))

    oracle = LinearGaussianOracle(grid, float(theta), GaussianLaw(mean, cov_x), GaussianLaw(mean, cov_hat),
                                  g, cov_qx, var_q, condition, jittered)
    logger.info(f"Linear-Gaussian oracle (h={hp.h}, theta={theta}, n={n}): "
                f"relative covariance gap {oracle.relative_gap():.3e}, condition {condition:.2e}")
    return oracle


def _initial_values(x0_law, m: int, dim: int, seed) -> np.ndarray:
    if hasattr(x0_law, "rvs"):
        draws = np.asarray(x0_law.rvs(size=(m, dim), random_state=np.random.default_rng(seed)), dtype=float)
        return draws.reshape(m, dim)
    x0 = np.asarray(x0_law, dtype=float)
    return np.broadcast_to(x0.reshape(-1) if x0.ndim else x0, (m, dim)).astype(float)


def simulate_mimicked_ensemble(estimator: ConditionalDriftEstimator, kmat: KernelMatrix, h: HurstLike,
                               grid: TimeGrid, x0_law, n_paths: int, seed: SeedLike = None,
                               noise_method: str = "kernel") -> np.ndarray:
    """Mimicked paths (n_paths, n+1, d); the K-weighted history is re-summed at every step"""
    check_same_grid(estimator.grid, kmat.grid)
    check_same_grid(grid, kmat.grid)
    if kmat.mode is KernelMode.PATH:
        raise ValueError("simulate_mimicked needs a density or increment K matrix")
    if estimator.n_coordinates != 1:
        raise ValueError("simulate_mimicked takes a single-coordinate estimator")
    dim = estimator.dim
    noise_seed, x0_seed = spawn_seeds(seed, 2)
    noise = noise_from_seeds(h, grid, dim, spawn_seeds(noise_seed, n_paths), noise_method)
    x0 = _initial_values(x0_law, n_paths, dim, x0_seed)

    n = grid.n_steps
    entries = kmat.entries
    paths = np.empty((n_paths, n + 1, dim))
    paths[:, 0] = x0
    q_tilde = np.empty((n_paths, n, dim))
    for i in range(1, n + 1):
        q_tilde[:, i - 1] = estimator.predict(i - 1, paths[:, :i])
        history = np.einsum("j,mjd->md", entries[i, :i], q_tilde[:, :i])
        paths[:, i] = x0 + grid.dt * history + noise[:, i]
    return paths


def simulate_mimicked(estimator: ConditionalDriftEstimator, kmat: KernelMatrix, h: HurstLike, grid: TimeGrid,
                      x0_law, seed: SeedLike = None) -> SamplePath:
    return SamplePath(grid, simulate_mimicked_ensemble(estimator, kmat, h, grid, x0_law, 1, seed)[0])


def _variance_se(samples: np.ndarray) -> float:
    m = len(samples)
    centered = samples - samples.mean()
    var = centered.var(ddof=1)
    m4 = np.mean(centered ** 4)
    return float(np.sqrt(max(m4 - var ** 2 * (m - 3) / (m - 1), 0.0) / m))


def law_distance(samples_a, samples_b, grid: TimeGrid,
                 fractions: Sequence[float] = (0.25, 0.5, 0.75, 1.0)) -> pd.DataFrame:
    """Per checkpoint and dimension: two-sample KS, mean gap and variance gap with standard errors"""
    a = stack_paths(samples_a)
    b = stack_paths(samples_b)
    if a.shape[1:] != b.shape[1:] or a.shape[1] != grid.n_steps + 1:
        raise GridMismatchError(f"Sample shapes {a.shape} and {b.shape} do not share the grid")
    rows = []
    for i in grid.checkpoint_indices(fractions):
        for k in range(a.shape[2]):
            xa, xb = a[:, i, k], b[:, i, k]
            ks = ks_2samp(xa, xb)
            rows.append({
                "time": i * grid.dt,
                "index": i,
                "dim": k,
                "ks_statistic": float(ks.statistic),
                "ks_pvalue": float(ks.pvalue),
                "mean_gap": float(xa.mean() - xb.mean()),
                "mean_gap_se": float(np.sqrt(xa.var(ddof=1) / len(xa) + xb.var(ddof=1) / len(xb))),
                "var_gap": float(xa.var(ddof=1) - xb.var(ddof=1)),
                "var_gap_se": float(np.hypot(_variance_se(xa), _variance_se(xb))),
            })
    return pd.DataFrame(rows)


def ks_passes(report: pd.DataFrame, level: float = 0.01) -> bool:
    return bool((report["ks_pvalue"] >= level).all())
