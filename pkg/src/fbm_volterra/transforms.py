"""The Q-transform, its inverse, and the fundamental semimartingale X -> X-dagger.

Q^b is the density with int_0^t b_s ds = int_0^t K(t, s) Q^b_s ds. On the grid it
is linear in b; with b interpolated linearly between grid points:

    h < 1/2, c = 1/2 - h:
        Q_t = C t^-c int_0^t (t-u)^(c-1) u^c b_u du
    h > 1/2, a = h - 1/2:
        Q_t = C [ t^-a b_t + a t^a ( t^-2a g_a b_t + int_0^t r^-a (b_t - b_r) (t-r)^(-a-1) dr ) ]
        g_a = Gamma(-a) (1/Gamma(1-a) - Gamma(1-a)/Gamma(1-2a))

C is the constant in front of L. Q(t_0) is 0 for h < 1/2 and the cell average of
the leading t^-a term for h > 1/2.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Union

import numpy as np
import pandas as pd
from scipy.linalg import cho_factor, cho_solve
from scipy.special import beta as beta_fn, gamma as gamma_fn

from .exceptions import GridMismatchError
from .gaussian_paths import SamplePath, stack_paths
from .kernels import (
    HurstLike, HurstParam, KernelMatrix, KernelMode, TimeGrid, as_hurst, check_same_grid,
    fbm_covariance_matrix, inverse_normalizing_constant, kernel_K_array, kernel_exponents, normalizing_constant_cH,
)
from .quadrature import cell_averages, gauss_jacobi, gauss_legendre, product_weights
from .sde_sim import DriftSpec, drift_along_paths
from .utils import as_2d

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QFunction:
    grid: TimeGrid
    h: HurstParam
    values: np.ndarray
    conditioning_warning: bool = False

    def __post_init__(self):
        values = np.array(as_2d(self.values), dtype=float)
        if values.shape[0] != self.grid.n_steps + 1:
            raise GridMismatchError(f"Q has {values.shape[0]} points, grid has {self.grid.n_steps + 1}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def q_exponent(h: HurstLike) -> float:
    """Power of t in Q^1: -delta for h > 1/2, +delta for h < 1/2, 0 for Brownian motion"""
    hp = as_hurst(h)
    if hp.is_brownian:
        return 0.0
    return -hp.delta if hp.h > 0.5 else hp.delta


def q_constant_coefficient(h: HurstLike) -> float:
    """kappa in Q^1_t = kappa t^e"""
    hp = as_hurst(h)
    if hp.is_brownian:
        return 1.0
    c_h = normalizing_constant_cH(hp)
    d = hp.delta
    if hp.h > 0.5:
        return float(1.0 / (c_h * beta_fn(1.0 - 2.0 * d, d)))
    return float(1.0 / (c_h * (1.0 + d) * beta_fn(1.0 + 2.0 * d, 1.0 - d)))


def q_of_constant(h: HurstLike, t) -> np.ndarray:
    """Q^1 in closed form; infinite at t = 0 when h > 1/2"""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return q_constant_coefficient(h) * t ** q_exponent(h)


def fundamental_drift_of_constant(h: HurstLike, t) -> np.ndarray:
    """int_0^t Q^1_s ds, zero at t = 0"""
    e = q_exponent(h)
    t = np.asarray(t, dtype=float)
    return q_constant_coefficient(h) * t ** (1.0 + e) / (1.0 + e)


def q_energy_of_constant(h: HurstLike, t) -> np.ndarray:
    """int_0^t |Q^1_s|^2 ds"""
    e = q_exponent(h)
    t = np.asarray(t, dtype=float)
    return q_constant_coefficient(h) ** 2 * t ** (1.0 + 2.0 * e) / (1.0 + 2.0 * e)


@lru_cache(maxsize=16)
def _energy_moments(e: float, horizon: float, n_steps: int, n_nodes: int = 8):
    """int_cell t^2e (1-u)^2, t^2e u(1-u), t^2e u^2 dt on cells 1..n-1, u the position in the cell"""
    dt = horizon / n_steps
    v, w = gauss_legendre(n_nodes)
    start = np.arange(1, n_steps) * dt
    weight = (start[:, None] + dt * v[None, :]) ** (2.0 * e) * w[None, :] * dt
    moments = (weight @ (1.0 - v) ** 2, weight @ (v * (1.0 - v)), weight @ v ** 2)
    for arr in moments:
        arr.setflags(write=False)
    return moments


def q_energy(h: HurstLike, q, grid: TimeGrid) -> np.ndarray:
    """int_0^T |Q_t|^2 dt from grid values of Q, shape (n+1,), (n+1, d) or (m, n+1, d).

    Q is written as t^e p_t with e the exponent of Q^1 and p linear on every
    cell; on [0, dt] p is held at p(t_1), where the power law is integrated
    exactly. For Brownian motion this is the integral of the linear
    interpolant squared. Exact for constant drifts.
    """
    values = np.asarray(q, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    batched = values.ndim == 3
    if not batched:
        values = values[None]
    if values.shape[1] != grid.n_steps + 1:
        raise GridMismatchError(f"Q has {values.shape[1]} points, grid has {grid.n_steps + 1}")
    e = q_exponent(h)
    dt = grid.dt
    t = grid.points
    if e == 0.0:
        p = values
        first = dt / 3.0 * np.sum(p[:, 0] ** 2 + p[:, 0] * p[:, 1] + p[:, 1] ** 2, axis=-1)
    else:
        p = np.zeros_like(values)
        p[:, 1:] = values[:, 1:] / t[1:, None] ** e
        first = np.sum(p[:, 1] ** 2, axis=-1) * dt ** (1.0 + 2.0 * e) / (1.0 + 2.0 * e)
    m_aa, m_ab, m_bb = _energy_moments(e, grid.horizon, grid.n_steps)
    left, right = p[:, 1:-1], p[:, 2:]
    rest = np.einsum("j,mjd->m", m_aa, left ** 2) + 2.0 * np.einsum("j,mjd->m", m_ab, left * right) \
        + np.einsum("j,mjd->m", m_bb, right ** 2)
    energy = first + rest
    return energy if batched else float(energy[0])


def gamma_coefficient(a: float) -> float:
    """g_a = int_0^1 (1 - u^-a) (1-u)^(-a-1) du"""
    return float(gamma_fn(-a) * (1.0 / gamma_fn(1.0 - a) - gamma_fn(1.0 - a) / gamma_fn(1.0 - 2.0 * a)))


@dataclass(frozen=True)
class _QParts:
    matrix: np.ndarray            # Q = matrix @ b
    lead: np.ndarray              # h > 1/2: coefficient of b_i in the boundary term
    gamma_term: np.ndarray        # h > 1/2: coefficient of b_i in the Gamma term
    increments: np.ndarray        # h > 1/2: W with increment term sum_j W[i, j] (b_i - b_j)
    increment_scale: np.ndarray   # h > 1/2: C a t_i^a
    positive: np.ndarray          # h < 1/2: nonnegative matrix, Q = positive @ b


@lru_cache(maxsize=16)
def _q_parts(h: float, horizon: float, n_steps: int) -> _QParts:
    hp = HurstParam(h)
    n = n_steps
    dt = horizon / n
    t = np.linspace(0.0, horizon, n + 1)
    empty = np.zeros(0)
    if hp.is_brownian:
        return _QParts(np.eye(n + 1), empty, empty, np.zeros((0, 0)), empty, np.zeros((0, 0)))

    C = inverse_normalizing_constant(hp)
    if hp.h < 0.5:
        c = hp.delta
        wl, wr = product_weights(lambda tt, s: (tt - s) ** (c - 1.0) * s ** c, n, dt, left_exp=c, right_exp=c - 1.0)
        p = np.zeros((n + 1, n + 1))
        p[:, :n] += wl
        p[:, 1:] += wr
        scale = np.zeros(n + 1)
        scale[1:] = C * t[1:] ** (-c)
        positive = scale[:, None] * p
        return _QParts(positive, empty, empty, np.zeros((0, 0)), empty, positive)

    a = hp.delta
    wl, wr = product_weights(lambda tt, s: s ** (-a) * (tt - s) ** (-a - 1.0), n, dt,
                             left_exp=-a, right_exp=0.0, skip_last=True)
    w = np.zeros((n + 1, n + 1))
    w[:, :n] += wl
    w[:, 1:] += wr
    # cell ending at t_i: b_i - b_r is linear there, leaving int r^-a (t_i - r)^-a dr
    last = np.zeros(n + 1)
    last[1] = dt ** (1.0 - 2.0 * a) * beta_fn(1.0 - a, 1.0 - a)
    v, wv = gauss_jacobi(16, 0.0, -a)
    for i in range(2, n + 1):
        last[i] = dt ** (1.0 - a) * np.sum(wv * (t[i - 1] + dt * v) ** (-a))
    idx = np.arange(1, n + 1)
    w[idx, idx - 1] += last[1:] / dt

    lead = np.zeros(n + 1)
    gamma_term = np.zeros(n + 1)
    scale = np.zeros(n + 1)
    lead[1:] = C * t[1:] ** (-a)
    scale[1:] = C * a * t[1:] ** a
    gamma_term[1:] = scale[1:] * t[1:] ** (-2.0 * a) * gamma_coefficient(a)

    matrix = -scale[:, None] * w
    matrix[np.arange(n + 1), np.arange(n + 1)] += lead + gamma_term + scale * w.sum(axis=1)
    # t_0: cell average of Q^1 b_0 over [0, dt]
    matrix[0, 0] = float(fundamental_drift_of_constant(hp, dt)) / dt
    return _QParts(matrix, lead, gamma_term, w, scale, np.zeros((0, 0)))


def q_transform_matrix(h: HurstLike, grid: TimeGrid) -> np.ndarray:
    """Matrix M with Q^b = M @ b on the grid (read-only, cached)"""
    parts = _q_parts(as_hurst(h).h, grid.horizon, grid.n_steps)
    parts.matrix.setflags(write=False)
    return parts.matrix


def q_transform_paths(h: HurstLike, b: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Q-transform of a batch of drift paths (m, n+1, d)"""
    b = np.asarray(b, dtype=float)
    if b.shape[1] != grid.n_steps + 1:
        raise GridMismatchError(f"Drift has {b.shape[1]} points, grid has {grid.n_steps + 1}")
    return np.einsum("ij,mjd->mid", q_transform_matrix(h, grid), b)


def holder_quotient(b: np.ndarray, grid: TimeGrid, exponent: float) -> float:
    """max_{j<i} |b_i - b_j| / (t_i - t_j)^exponent"""
    b = as_2d(b)
    t = grid.points
    i, j = np.tril_indices(grid.n_steps + 1, -1)
    diffs = np.linalg.norm(b[i] - b[j], axis=1)
    return float(np.max(diffs / (t[i] - t[j]) ** exponent, initial=0.0))


def q_transform(h: HurstLike, b, grid: TimeGrid, holder_bound: float = 50.0,
                holder_exponent: Optional[float] = None) -> QFunction:
    """Q^b for a grid function b of shape (n+1,) or (n+1, d)"""
    hp = as_hurst(h)
    b = as_2d(b)
    if b.shape[0] != grid.n_steps + 1:
        raise GridMismatchError(f"Drift has {b.shape[0]} points, grid has {grid.n_steps + 1}")
    if not np.all(np.isfinite(b)):
        raise ValueError("Drift values must be finite")
    warning = False
    if hp.h > 0.5:
        exponent = holder_exponent if holder_exponent is not None else 0.5 * (hp.h + 0.5)
        quotient = holder_quotient(b, grid, exponent)
        if quotient > holder_bound:
            warning = True
            logger.warning(f"Drift is poorly conditioned for h={hp.h}: Hoelder quotient "
                           f"{quotient:.3g} (exponent {exponent:.3g}) exceeds {holder_bound:g}")
    return QFunction(grid, hp, q_transform_matrix(hp, grid) @ b, warning)


def q_decomposition(h: HurstLike, b, grid: TimeGrid) -> pd.DataFrame:
    """Terms of Q^b per grid time (first dimension), with the triangle-inequality majorant"""
    hp = as_hurst(h)
    values = as_2d(b)[:, 0]
    parts = _q_parts(hp.h, grid.horizon, grid.n_steps)
    q = parts.matrix @ values
    df = pd.DataFrame({"time": grid.points, "b": values, "q": q})
    if hp.is_brownian:
        df["majorant"] = np.abs(values)
        return df
    if hp.h < 0.5:
        df["majorant"] = parts.positive @ np.abs(values)
        return df
    spread = parts.increments * (values[:, None] - values[None, :])
    df["boundary"] = parts.lead * values
    df["gamma_term"] = parts.gamma_term * values
    df["increment_term"] = parts.increment_scale * spread.sum(axis=1)
    df["majorant"] = (np.abs(df["boundary"]) + np.abs(df["gamma_term"])
                      + parts.increment_scale * np.abs(spread).sum(axis=1))
    df.loc[0, ["boundary", "gamma_term", "increment_term"]] = np.nan
    df.loc[0, "majorant"] = abs(q[0])
    return df


@lru_cache(maxsize=16)
def _power_weighted_k(h: float, horizon: float, n_steps: int) -> np.ndarray:
    """(1/dt) int_cell K(t_i, s) (s / s_j)^e ds, with s_1 standing in for s_0 = 0"""
    dt = horizon / n_steps
    e = q_exponent(h)
    left, right = kernel_exponents(h, "K")
    weighted = cell_averages(lambda t, s: kernel_K_array(h, t, s) * s ** e, n_steps, dt,
                             left_exp=left + e, right_exp=right)
    anchor = np.arange(n_steps) * dt
    anchor[0] = dt
    weighted /= anchor[None, :] ** e
    weighted.setflags(write=False)
    return weighted


def inverse_q(h: HurstLike, q: Union[QFunction, np.ndarray], grid: TimeGrid) -> np.ndarray:
    """b~ = d/dt int_0^t K(t, s) Q_s ds.

    On each cell Q is taken as Q(s_j) (s / s_j)^e, e the exponent of Q^1, and
    on the first cell as Q(t_1) (s / t_1)^e. The integral is differentiated
    with centered differences inside and one-sided ones at the ends.
    """
    hp = as_hurst(h)
    values = q.values if isinstance(q, QFunction) else as_2d(q)
    if values.shape[0] != grid.n_steps + 1:
        raise GridMismatchError(f"Q has {values.shape[0]} points, grid has {grid.n_steps + 1}")
    if hp.is_brownian:
        return np.array(values, dtype=float)
    paired = np.array(values[:-1], dtype=float)
    if grid.n_steps > 1:
        paired[0] = values[1]
    integral = _power_weighted_k(hp.h, grid.horizon, grid.n_steps) @ paired * grid.dt
    return np.gradient(integral, grid.dt, axis=0, edge_order=1)


def to_fundamental(lmat: KernelMatrix, x: SamplePath) -> SamplePath:
    """X-dagger_t = X_0 + int_0^t L(t, s) dX_s"""
    check_same_grid(lmat.grid, x.grid)
    x0 = x.values[0]
    if lmat.mode is KernelMode.PATH:
        increments = lmat.apply_path(x.values)
        return SamplePath(x.grid, x0 + np.vstack([np.zeros((1, x.dim)), np.cumsum(increments, axis=0)]))
    return SamplePath(x.grid, x0 + lmat.apply_increments(x.values))


def from_fundamental(kmat: KernelMatrix, x_dagger: SamplePath) -> SamplePath:
    """X_t = X-dagger_0 + int_0^t K(t, s) dX-dagger_s"""
    check_same_grid(kmat.grid, x_dagger.grid)
    if kmat.mode is KernelMode.PATH:
        raise ValueError("from_fundamental expects an increment-action K matrix")
    return SamplePath(x_dagger.grid, x_dagger.values[0] + kmat.apply_increments(x_dagger.values))


def rkhs_norm_gram(h: HurstLike, b, grid: TimeGrid) -> float:
    """RKHS norm of F = int_0^. b on the grid via F^T R^-1 F (t_1..t_n)"""
    b = as_2d(b)
    integral = np.cumsum(b[:-1], axis=0) * grid.dt
    cov = fbm_covariance_matrix(h, grid)[1:, 1:]
    factor = cho_factor(cov, lower=True)
    return float(np.sqrt(np.sum(integral * cho_solve(factor, integral))))


@dataclass
class GrowthReport:
    table: pd.DataFrame
    violations: int
    max_ratio: float
    growth_constant: float


def q_growth_check(h: HurstLike, drift: DriftSpec, paths, grid: TimeGrid) -> GrowthReport:
    """Check |Q^b(t, X[t])| <= M~_t (1 + ||X||_inf,t) along sampled paths.

    M~ is the image of the modulus under the positive part of the Q map; for
    h > 1/2 the increment term is bounded by its triangle-inequality majorant
    along the path, since it depends on time regularity rather than on M.
    """
    hp = as_hurst(h)
    if drift.modulus is None:
        raise ValueError("q_growth_check needs a drift with a modulus function M_t")
    arr = stack_paths(paths)
    t = grid.points
    b = drift_along_paths(drift, grid, arr)
    q = q_transform_paths(hp, b, grid)
    q_norm = np.linalg.norm(q, axis=2)
    b_norm = np.linalg.norm(b, axis=2)
    running_sup = np.maximum.accumulate(np.linalg.norm(arr, axis=2), axis=1)
    modulus = np.asarray(drift.modulus(t), dtype=float) * np.ones(grid.n_steps + 1)
    parts = _q_parts(hp.h, grid.horizon, grid.n_steps)

    if hp.is_brownian:
        bound = modulus * (1.0 + running_sup)
    elif hp.h < 0.5:
        bound = (parts.positive @ modulus) * (1.0 + running_sup)
    else:
        leading = (np.abs(parts.lead) + np.abs(parts.gamma_term)) * modulus
        spread = np.linalg.norm(b[:, :, None, :] - b[:, None, :, :], axis=3)
        inc = parts.increment_scale * np.einsum("ij,mij->mi", parts.increments, spread)
        bound = leading * (1.0 + running_sup) + inc
        bound[:, 0] = np.abs(parts.matrix[0, 0]) * b_norm[:, 0]

    tolerance = 1e-12 * (1.0 + bound)
    violated = q_norm > bound + tolerance
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, q_norm / bound, 0.0)
    table = pd.DataFrame({
        "path_id": np.arange(arr.shape[0]),
        "max_abs_q": q_norm.max(axis=1),
        "max_ratio": ratio.max(axis=1),
        "violations": violated.sum(axis=1),
    })
    growth = 0.0
    if hp.h > 0.5:
        growth = float(np.max(q_norm[:, 1:] * t[1:] ** hp.delta / (1.0 + running_sup[:, 1:]), initial=0.0))
    report = GrowthReport(table, int(violated.sum()), float(ratio.max(initial=0.0)), growth)
    logger.info(f"Q growth check (h={hp.h}): {report.violations} violations, max |Q|/bound {report.max_ratio:.3f}")
    return report
