"""Covariance and Volterra kernels of fractional Brownian motion, and their discretization.

Both kernels are homogeneous, K(t, s) = t**(h-1/2) k(s/t) and
L(t, s) = t**(1/2-h) l(s/t), and every profile reduces to the Beta tail
T(sigma; a, b) = int_sigma^1 u**(a-1) (1-u)**(b-1) du:

    h > 1/2, a = h - 1/2:
        k(sigma) = c_H sigma**a T(sigma; -2a, a)
        l(sigma) = C [(sigma (1-sigma))**(-a) - a sigma**(-a) T(sigma; 0, 1-a)]
    h < 1/2, b = 1/2 - h:
        k(sigma) = c_H [sigma**b (1-sigma)**(-b) + b sigma**(-b) T(sigma; 2b, 1-b)]
        l(sigma) = C sigma**b T(sigma; 0, b)

with C = sin(pi delta) / (pi c_H), delta = |h - 1/2|, the constant for which
L inverts K.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import solve_triangular
from scipy.special import beta as beta_fn

from .exceptions import ConfigError, GridMismatchError, QuadratureError, SingularMatrixError
from .quadrature import ADAPTIVE_TOL, KernelFn, beta_tail, integrate_cells, signed_rms_first_cell
from .utils import validate_hurst, validate_int_at_least, validate_positive

logger = logging.getLogger(__name__)

HurstLike = Union[float, "HurstParam"]


@dataclass(frozen=True)
class HurstParam:
    h: float

    def __post_init__(self):
        object.__setattr__(self, "h", validate_hurst(self.h))

    @property
    def regime(self) -> str:
        if self.h < 0.5:
            return "sub"
        if self.h > 0.5:
            return "super"
        return "brownian"

    @property
    def is_brownian(self) -> bool:
        return self.h == 0.5

    @property
    def delta(self) -> float:
        return abs(self.h - 0.5)

    def __float__(self) -> float:
        return self.h


def as_hurst(h: HurstLike) -> HurstParam:
    return h if isinstance(h, HurstParam) else HurstParam(h)


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        object.__setattr__(self, "horizon", validate_positive(self.horizon, "horizon"))
        object.__setattr__(self, "n_steps", validate_int_at_least(self.n_steps, 1, "n_steps"))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def points(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of a time that lies on the grid"""
        index = int(round(t / self.dt))
        if index < 0 or index > self.n_steps or abs(index * self.dt - t) > 1e-9 * max(1.0, self.horizon):
            raise ValueError(f"Time {t} is not a point of the grid (T={self.horizon}, n={self.n_steps})")
        return index

    def checkpoint_indices(self, fractions: Sequence[float] = (0.25, 0.5, 0.75, 1.0)) -> List[int]:
        return [int(round(f * self.n_steps)) for f in fractions]


def check_same_grid(a: TimeGrid, b: TimeGrid) -> None:
    if a != b:
        raise GridMismatchError(
            f"Grid mismatch: (T={a.horizon}, n={a.n_steps}) vs (T={b.horizon}, n={b.n_steps})"
        )


class KernelMode(Enum):
    DENSITY = "density"
    INCREMENT = "increment"
    PATH = "path"


def _time_matmul(matrix: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Apply a matrix along the time axis of (n,), (n, d) or (m, n, d) arrays"""
    if values.ndim == 3:
        return np.einsum("ij,mjd->mid", matrix, values)
    return matrix @ values


@dataclass(frozen=True)
class KernelMatrix:
    """Discretized Volterra kernel.

    DENSITY and INCREMENT matrices have shape (n+1, n): entry (i, j) stands for
    the kernel over the cell [s_j, s_{j+1}) seen from t_i, and is paired with
    f(s_j)*dt (density) or with X_{j+1} - X_j (increments).
    PATH matrices have shape (n, n) and map X_{1..n} - X_0 to increments.
    """

    grid: TimeGrid
    entries: np.ndarray
    mode: KernelMode = KernelMode.INCREMENT
    label: str = ""
    unconverged_cells: Tuple[Tuple[int, int], ...] = field(default=(), compare=False)

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        n = self.grid.n_steps
        expected = (n, n) if self.mode is KernelMode.PATH else (n + 1, n)
        if entries.shape != expected:
            raise ValueError(f"{self.mode.value} kernel matrix must have shape {expected}, got {entries.shape}")
        if not np.all(np.isfinite(entries)):
            bad = np.argwhere(~np.isfinite(entries))
            raise QuadratureError(
                f"Kernel matrix has {len(bad)} non-finite entries", [tuple(map(int, c)) for c in bad]
            )
        if self.mode is not KernelMode.PATH and np.any(np.triu(entries, 0)):
            raise ValueError("Kernel matrix must be supported strictly below the diagonal (j < i)")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    def apply_density(self, values) -> np.ndarray:
        """(K f)(t_i) ~ sum_{j<i} entries[i, j] f(s_j) dt"""
        values = np.asarray(values, dtype=float)
        axis = 1 if values.ndim == 3 else 0
        if values.shape[axis] != self.n_steps + 1:
            raise GridMismatchError(f"Expected {self.n_steps + 1} grid values, got {values.shape[axis]}")
        left = values[:, :-1] if values.ndim == 3 else values[:-1]
        return _time_matmul(self.entries, left) * self.grid.dt

    def apply_increments(self, values) -> np.ndarray:
        """sum_{j<i} entries[i, j] (X_{j+1} - X_j), zero at t_0"""
        if self.mode is KernelMode.PATH:
            raise ValueError("apply_increments needs a density or increment matrix")
        values = np.asarray(values, dtype=float)
        axis = 1 if values.ndim == 3 else 0
        if values.shape[axis] != self.n_steps + 1:
            raise GridMismatchError(f"Expected {self.n_steps + 1} grid values, got {values.shape[axis]}")
        return _time_matmul(self.entries, np.diff(values, axis=axis))

    def apply_path(self, values) -> np.ndarray:
        """Increments recovered from path values (PATH mode), shape of values minus one time point"""
        if self.mode is not KernelMode.PATH:
            raise ValueError("apply_path needs a path-mode matrix")
        values = np.asarray(values, dtype=float)
        if values.ndim == 3:
            return _time_matmul(self.entries, values[:, 1:] - values[:, :1])
        return _time_matmul(self.entries, values[1:] - values[:1])

    def as_increment_action(self) -> "KernelMatrix":
        """Increment-action form of a path-mode matrix (cumulate, apply, cumulate)"""
        if self.mode is not KernelMode.PATH:
            raise ValueError("as_increment_action needs a path-mode matrix")
        cum = np.tril(np.ones((self.n_steps, self.n_steps)))
        inner = cum @ self.entries @ cum
        entries = np.vstack([np.zeros((1, self.n_steps)), inner])
        # exact zeros above the diagonal
        entries = np.tril(entries, -1)
        return KernelMatrix(self.grid, entries, KernelMode.INCREMENT, self.label)

    def to_csv(self, path: str) -> str:
        df = pd.DataFrame(self.entries, columns=[f"s_{j}" for j in range(self.entries.shape[1])])
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(
                f"# horizon={self.grid.horizon!r} n_steps={self.grid.n_steps} "
                f"mode={self.mode.value} label={self.label}\n"
            )
            df.to_csv(fh, index=False)
        return path

    @classmethod
    def from_csv(cls, path: str) -> "KernelMatrix":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().lstrip("#").split()
        meta = dict(item.split("=", 1) for item in header if "=" in item)
        grid = TimeGrid(float(meta["horizon"]), int(meta["n_steps"]))
        entries = pd.read_csv(path, comment="#").to_numpy(dtype=float)
        return cls(grid, entries, KernelMode(meta["mode"]), meta.get("label", ""))


def fbm_covariance(h: HurstLike, t, s):
    """R(t, s) = (t^2h + s^2h - |t-s|^2h) / 2, vectorized"""
    two_h = 2.0 * as_hurst(h).h
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    value = 0.5 * (np.abs(t) ** two_h + np.abs(s) ** two_h - np.abs(t - s) ** two_h)
    return float(value) if value.ndim == 0 else value


def fbm_covariance_matrix(h: HurstLike, grid: TimeGrid) -> np.ndarray:
    t = grid.points
    return fbm_covariance(h, t[:, None], t[None, :])


def normalizing_constant_cH(h: HurstLike) -> float:
    hp = as_hurst(h)
    if hp.is_brownian:
        raise ConfigError("hurst", "c_H is degenerate at h = 1/2 (K is the indicator there)")
    H = hp.h
    if H > 0.5:
        return float(np.sqrt(H * (2.0 * H - 1.0) / beta_fn(2.0 - 2.0 * H, H - 0.5)))
    return float(np.sqrt(2.0 * H / ((1.0 - 2.0 * H) * beta_fn(1.0 - 2.0 * H, H + 0.5))))


def inverse_normalizing_constant(h: HurstLike) -> float:
    """Constant in front of L so that int L(t, s) dZ_s is the driving Brownian motion"""
    hp = as_hurst(h)
    if hp.is_brownian:
        return 1.0
    return float(np.sin(np.pi * hp.delta) / (np.pi * normalizing_constant_cH(hp)))


def _k_profile(h: float, sigma: np.ndarray) -> np.ndarray:
    c = normalizing_constant_cH(h)
    if h > 0.5:
        a = h - 0.5
        return c * sigma ** a * beta_tail(sigma, -2.0 * a, a)
    b = 0.5 - h
    return c * (sigma ** b * (1.0 - sigma) ** (-b) + b * sigma ** (-b) * beta_tail(sigma, 2.0 * b, 1.0 - b))


def _l_profile(h: float, sigma: np.ndarray) -> np.ndarray:
    c = inverse_normalizing_constant(h)
    if h > 0.5:
        a = h - 0.5
        return c * ((sigma * (1.0 - sigma)) ** (-a) - a * sigma ** (-a) * beta_tail(sigma, 0.0, 1.0 - a))
    b = 0.5 - h
    return c * sigma ** b * beta_tail(sigma, 0.0, b)


def _kernel_array(h: HurstLike, t, s, which: str) -> np.ndarray:
    hp = as_hurst(h)
    t, s = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(s, dtype=float))
    out = np.zeros(t.shape)
    valid = (s > 0.0) & (s < t)
    if hp.is_brownian:
        out[valid] = 1.0
        return out
    tv = t[valid]
    sigma = s[valid] / tv
    if which == "K":
        out[valid] = tv ** (hp.h - 0.5) * _k_profile(hp.h, sigma)
    else:
        out[valid] = tv ** (0.5 - hp.h) * _l_profile(hp.h, sigma)
    return out


def kernel_K_array(h: HurstLike, t, s) -> np.ndarray:
    """K(t, s) on broadcast arrays; zero outside 0 < s < t"""
    return _kernel_array(h, t, s, "K")


def kernel_L_array(h: HurstLike, t, s) -> np.ndarray:
    """L(t, s) on broadcast arrays; zero outside 0 < s < t"""
    return _kernel_array(h, t, s, "L")


def _check_kernel_args(t: float, s: float) -> None:
    if s <= 0.0:
        raise ValueError(f"Kernel needs s > 0, got s={s}")
    if s >= t:
        raise ValueError(f"Kernel needs s < t, got s={s}, t={t}")


def kernel_K(h: HurstLike, t: float, s: float) -> float:
    _check_kernel_args(t, s)
    if as_hurst(h).is_brownian:
        return 1.0
    return float(kernel_K_array(h, t, s))


def kernel_L(h: HurstLike, t: float, s: float) -> float:
    _check_kernel_args(t, s)
    if as_hurst(h).is_brownian:
        return 1.0
    return float(kernel_L_array(h, t, s))


def kernel_exponents(h: HurstLike, which: str = "K") -> Tuple[float, float]:
    """Leading power of the kernel at s = 0 and at s = t"""
    hp = as_hurst(h)
    if hp.is_brownian:
        return 0.0, 0.0
    d = hp.delta
    if which == "K":
        return (-d, d) if hp.h > 0.5 else (-d, -d)
    return (-d, -d) if hp.h > 0.5 else (d, d)


def _vectorized(kernel: Callable) -> KernelFn:
    sample_t = np.array([[1.0, 1.0]])
    sample_s = np.array([[0.25, 0.5]])
    try:
        out = np.asarray(kernel(sample_t, sample_s), dtype=float)
        if out.shape == sample_t.shape:
            return kernel
    except (TypeError, ValueError):
        pass
    return np.vectorize(lambda t, s: float(kernel(float(t), float(s))), otypes=[float])


def discretize_kernel(kernel: Callable, grid: TimeGrid, mode: KernelMode = KernelMode.INCREMENT,
                      left_exp: float = 0.0, right_exp: float = 0.0, n_nodes: int = 8,
                      tol: float = ADAPTIVE_TOL, label: str = "",
                      rms_first_cell: bool = False) -> KernelMatrix:
    """Cell-averaged discretization of a Volterra kernel.

    Args:
        kernel: callable (t, s) -> value; vectorized callables are used as is
        grid: uniform time grid
        mode: DENSITY or INCREMENT
        left_exp: power-law behaviour of the kernel at s = 0
        right_exp: power-law behaviour of the kernel at s = t
        n_nodes: Gauss nodes per bisection piece
        tol: relative tolerance of the adaptive bisection
        rms_first_cell: INCREMENT only; column 0 holds the signed root mean
            square of the kernel over [0, dt] instead of its mean, so that
            sum_j entries[i, j]**2 dt keeps the energy of the singular cell

    Returns:
        KernelMatrix with the cells where bisection did not converge recorded
    """
    if mode is KernelMode.PATH:
        raise ValueError("discretize_kernel builds density or increment matrices")
    if rms_first_cell and mode is not KernelMode.INCREMENT:
        raise ValueError("rms_first_cell applies to increment matrices only")
    fn = _vectorized(kernel)
    cells = integrate_cells(fn, grid.n_steps, grid.dt, left_exp, right_exp, n_nodes, tol)
    entries = cells.total / grid.dt
    unconverged = set(cells.unconverged)
    if rms_first_cell:
        first, first_unconverged = signed_rms_first_cell(fn, grid.n_steps, grid.dt, left_exp, right_exp,
                                                         n_nodes, tol)
        entries[:, 0] = first
        unconverged |= set(first_unconverged)
    if not np.all(np.isfinite(entries)):
        bad = np.argwhere(~np.isfinite(entries))
        raise QuadratureError(f"Quadrature failed on {len(bad)} cells", [tuple(map(int, c)) for c in bad])

    cells_out = tuple(sorted(unconverged))
    if cells_out:
        logger.warning(f"Kernel '{label or 'custom'}': bisection did not reach tolerance {tol:g} "
                       f"on {len(cells_out)} cells")
    return KernelMatrix(grid, entries, mode, label, cells_out)


@lru_cache(maxsize=32)
def _fbm_matrix(h: float, horizon: float, n_steps: int, which: str, mode: KernelMode,
                n_nodes: int) -> KernelMatrix:
    grid = TimeGrid(horizon, n_steps)
    hp = HurstParam(h)
    label = f"{which}(h={h:g})"
    if hp.is_brownian:
        return KernelMatrix(grid, np.tril(np.ones((n_steps + 1, n_steps)), -1), mode, label)
    left, right = kernel_exponents(hp, which)
    kernel = kernel_K_array if which == "K" else kernel_L_array
    logger.debug(f"Building {label} ({mode.value}) on {n_steps} steps")
    return discretize_kernel(lambda t, s: kernel(h, t, s), grid, mode, left, right, n_nodes, label=label,
                             rms_first_cell=which == "K" and mode is KernelMode.INCREMENT)


def fbm_kernel_matrix(h: HurstLike, grid: TimeGrid, which: str = "K",
                      mode: KernelMode = KernelMode.INCREMENT, n_nodes: int = 8) -> KernelMatrix:
    """Cached K or L matrix of fBm on a grid.

    Density matrices hold cell averages. The increment form of K differs in
    column 0 only (signed root mean square over the first cell); L is cell
    averaged in both forms.
    """
    if which not in ("K", "L"):
        raise ValueError(f"which must be 'K' or 'L', got {which!r}")
    if mode is KernelMode.PATH:
        raise ValueError("fbm_kernel_matrix builds density or increment matrices")
    return _fbm_matrix(as_hurst(h).h, grid.horizon, grid.n_steps, which, mode, n_nodes)


def verify_isometry(kmat: KernelMatrix, h: HurstLike) -> float:
    """max_{i,j} |sum_u K[i,u] K[j,u] dt - R(t_i, t_j)|"""
    gram = kmat.entries @ kmat.entries.T * kmat.grid.dt
    return float(np.max(np.abs(gram - fbm_covariance_matrix(h, kmat.grid))))


def isometry_study(h: HurstLike, n_list: Sequence[int], horizon: float = 1.0) -> pd.DataFrame:
    rows = []
    previous = None
    for n in n_list:
        grid = TimeGrid(horizon, n)
        defect = verify_isometry(fbm_kernel_matrix(h, grid), h)
        scale = float(np.max(np.abs(fbm_covariance_matrix(h, grid))))
        rows.append({
            "h": as_hurst(h).h,
            "n_steps": n,
            "defect": defect,
            "relative_defect": defect / scale,
            "refinement_ratio": previous / defect if previous and defect > 0 else np.nan,
        })
        previous = defect
    return pd.DataFrame(rows)


def discrete_inverse_L(kmat: KernelMatrix, pivot_tol: float = 1e-13) -> KernelMatrix:
    """Exact inverse of the increment action of kmat, as a path-mode matrix"""
    if kmat.mode is KernelMode.PATH:
        raise ValueError("discrete_inverse_L expects an increment-action matrix")
    a = np.asarray(kmat.entries[1:, :])
    scale = float(np.max(np.abs(a))) or 1.0
    pivots = np.abs(np.diag(a))
    bad = np.flatnonzero(pivots <= pivot_tol * scale)
    if bad.size:
        raise SingularMatrixError(
            f"Triangular system is singular at pivot {int(bad[0])} (|pivot|={pivots[bad[0]]:.3e})",
            pivot=int(bad[0]),
        )
    inverse = solve_triangular(a, np.eye(a.shape[0]), lower=True)
    if not np.all(np.isfinite(inverse)):
        raise SingularMatrixError("Triangular solve overflowed", pivot=int(np.argmin(pivots)))
    return KernelMatrix(kmat.grid, inverse, KernelMode.PATH, f"inverse({kmat.label})")


def analytic_l_gap(h: HurstLike, grid: TimeGrid, margin: float = 0.125) -> Dict[str, float]:
    """Analytic L against the exact discrete inverse of K, both in increment form.

    ``interior`` covers the cells at least ``margin`` (times the horizon) away
    from s = 0 and from the diagonal, relative to the largest analytic entry
    there; ``first_column`` covers column 0 for t >= 2 margin.
    """
    analytic = fbm_kernel_matrix(h, grid, "L").entries
    exact = discrete_inverse_L(fbm_kernel_matrix(h, grid)).as_increment_action().entries
    gap = np.abs(analytic - exact)
    rows, cols = np.indices(analytic.shape)
    t, s = rows * grid.dt, cols * grid.dt
    away = margin * grid.horizon - 1e-12
    interior = (s >= away) & (t - s - grid.dt >= away)
    first = (cols == 0) & (t >= 2.0 * away)
    result = {}
    for name, mask in (("interior", interior), ("first_column", first)):
        scale = float(np.max(np.abs(analytic[mask]), initial=0.0))
        result[name] = float(np.max(gap[mask], initial=0.0)) / scale if scale > 0 else 0.0
    return result
