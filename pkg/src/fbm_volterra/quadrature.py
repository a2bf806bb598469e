"""Gauss rules on [0, 1], the Beta-tail integral and adaptive product weights for weakly singular kernels."""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

logger = logging.getLogger(__name__)

# below this point the Beta tail is integrated in log(u)
LOG_SPLIT = 0.25
CHUNK_SIZE = 65536

ADAPTIVE_TOL = 1e-8
MAX_DEPTH = 30
# cells smaller than this fraction of the largest one are held to an absolute tolerance
SCALE_FLOOR = 1e-6

KernelFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _freeze(*arrays):
    for arr in arrays:
        arr.setflags(write=False)
    return arrays


@lru_cache(maxsize=256)
def gauss_jacobi(n_nodes: int, left_exp: float, right_exp: float) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [0, 1] for the weight u**left_exp * (1 - u)**right_exp"""
    if left_exp == 0.0 and right_exp == 0.0:
        return gauss_legendre(n_nodes)
    x, w = roots_jacobi(n_nodes, right_exp, left_exp)
    nodes = 0.5 * (x + 1.0)
    weights = w / 2.0 ** (left_exp + right_exp + 1.0)
    return _freeze(nodes, weights)


@lru_cache(maxsize=64)
def gauss_legendre(n_nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [0, 1]"""
    x, w = roots_legendre(n_nodes)
    return _freeze(0.5 * (x + 1.0), 0.5 * w)


def beta_tail(sigma, a: float, b: float, n_log: int = 32, n_jacobi: int = 24) -> np.ndarray:
    """Evaluate T(sigma; a, b) = int_sigma^1 u**(a-1) (1-u)**(b-1) du for sigma in (0, 1].

    Requires b > 0; a may be negative. The piece on [sigma, 1/4] is integrated
    in the variable w = log(u) with Gauss-Legendre, the piece on
    [max(sigma, 1/4), 1] with a Gauss-Jacobi rule carrying (1-u)**(b-1).
    Neither endpoint singularity is ever sampled.
    """
    if b <= 0.0:
        raise ValueError(f"beta_tail needs b > 0, got {b}")
    sigma = np.asarray(sigma, dtype=float)
    out = np.empty(sigma.shape)
    flat_in = sigma.reshape(-1)
    flat_out = out.reshape(-1)
    for start in range(0, flat_in.size, CHUNK_SIZE):
        stop = start + CHUNK_SIZE
        flat_out[start:stop] = _beta_tail_flat(flat_in[start:stop], a, b, n_log, n_jacobi)
    return out


def _beta_tail_flat(s: np.ndarray, a: float, b: float, n_log: int, n_jacobi: int) -> np.ndarray:
    lo = np.maximum(s, LOG_SPLIT)
    v, wj = gauss_jacobi(n_jacobi, 0.0, b - 1.0)
    u = lo[:, None] + (1.0 - lo)[:, None] * v[None, :]
    result = (1.0 - lo) ** b * (u ** (a - 1.0) @ wj)

    mask = s < LOG_SPLIT
    if np.any(mask):
        x, wl = gauss_legendre(n_log)
        w_lo = np.log(s[mask])
        span = np.log(LOG_SPLIT) - w_lo
        w = w_lo[:, None] + span[:, None] * x[None, :]
        integrand = np.exp(a * w) * (-np.expm1(w)) ** (b - 1.0)
        result[mask] += span * (integrand @ wl)
    return result


@dataclass(frozen=True)
class CellIntegrals:
    """Hat-function moments of a kernel over the cells of a uniform grid.

    ``left[i, j]`` pairs with the grid value at s_j and ``right[i, j]`` with
    the value at s_{j+1}; their sum is the plain cell integral.
    """

    left: np.ndarray
    right: np.ndarray
    unconverged: Tuple[Tuple[int, int], ...] = ()

    @property
    def total(self) -> np.ndarray:
        return self.left + self.right


def _rule_moments(kernel: KernelFn, t: np.ndarray, lo: np.ndarray, hi: np.ndarray, anchor: np.ndarray,
                  dt: float, sing_left: np.ndarray, sing_right: np.ndarray, left_exp: float,
                  right_exp: float, n_nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """int_lo^hi kernel(t, s) ds and int_lo^hi kernel(t, s) (s - anchor) / dt ds per interval"""
    m0 = np.empty(lo.shape)
    m1 = np.empty(lo.shape)
    for is_left in (True, False):
        for is_right in (True, False):
            sel = (sing_left == is_left) & (sing_right == is_right)
            if not np.any(sel):
                continue
            e_left = left_exp if is_left else 0.0
            e_right = right_exp if is_right else 0.0
            v, w = gauss_jacobi(n_nodes, e_left, e_right)
            unit_weight = v ** e_left * (1.0 - v) ** e_right
            width = (hi - lo)[sel]
            s = lo[sel][:, None] + width[:, None] * v[None, :]
            g = kernel(t[sel][:, None] * np.ones_like(v)[None, :], s) / unit_weight
            m0[sel] = width * (g @ w)
            m1[sel] = width * ((g * (s - anchor[sel][:, None]) / dt) @ w)
    return m0, m1


def _bisect_cells(kernel: KernelFn, rows: np.ndarray, cols: np.ndarray, dt: float, left_exp: float,
                  right_exp: float, n_nodes: int, tol: float,
                  max_depth: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adaptive bisection of the cells (rows, cols) until every piece agrees with its halves.

    A piece is accepted once |whole - (left half + right half)| is within tol
    times the magnitude of its cell (floored at SCALE_FLOOR of the largest
    cell). Only the pieces touching s = 0 or s = t_i keep the singular
    Gauss-Jacobi weight.
    """
    n_cells = rows.size
    m0 = np.zeros(n_cells)
    m1 = np.zeros(n_cells)
    failed = np.zeros(n_cells, dtype=bool)

    owner = np.arange(n_cells)
    t = rows * dt
    anchor = cols * dt
    lo = cols * dt
    hi = (cols + 1) * dt
    sing_left = cols == 0
    sing_right = cols == rows - 1
    whole0, whole1 = _rule_moments(kernel, t, lo, hi, anchor, dt, sing_left, sing_right,
                                   left_exp, right_exp, n_nodes)
    scale = np.maximum(np.abs(whole0), np.abs(whole1))
    scale = np.maximum(scale, SCALE_FLOOR * scale.max())

    for depth in range(max_depth + 1):
        if owner.size == 0:
            break
        mid = 0.5 * (lo + hi)
        no_left = np.zeros_like(sing_left)
        no_right = np.zeros_like(sing_right)
        left0, left1 = _rule_moments(kernel, t, lo, mid, anchor, dt, sing_left, no_right,
                                     left_exp, right_exp, n_nodes)
        right0, right1 = _rule_moments(kernel, t, mid, hi, anchor, dt, no_left, sing_right,
                                       left_exp, right_exp, n_nodes)
        gap = np.maximum(np.abs(whole0 - left0 - right0), np.abs(whole1 - left1 - right1))
        done = gap <= tol * scale[owner]
        if depth == max_depth:
            failed[np.unique(owner[~done])] = True
            done[:] = True

        np.add.at(m0, owner[done], left0[done] + right0[done])
        np.add.at(m1, owner[done], left1[done] + right1[done])

        split = ~done
        owner = np.concatenate([owner[split], owner[split]])
        t = np.concatenate([t[split], t[split]])
        anchor = np.concatenate([anchor[split], anchor[split]])
        whole0 = np.concatenate([left0[split], right0[split]])
        whole1 = np.concatenate([left1[split], right1[split]])
        lo, hi = np.concatenate([lo[split], mid[split]]), np.concatenate([mid[split], hi[split]])
        sing_left = np.concatenate([sing_left[split], no_left[split]])
        sing_right = np.concatenate([no_right[split], sing_right[split]])
    return m0, m1, failed


def integrate_cells(kernel: KernelFn, n_steps: int, dt: float, left_exp: float = 0.0,
                    right_exp: float = 0.0, n_nodes: int = 8, tol: float = ADAPTIVE_TOL,
                    max_depth: int = MAX_DEPTH, skip_last: bool = False,
                    columns: Optional[Sequence[int]] = None) -> CellIntegrals:
    """Hat-function weights of a kernel on a uniform grid.

    For row i (t_i = i*dt) and cell j < i returns

        left[i, j]  = int_{s_j}^{s_{j+1}} kernel(t_i, s) (s_{j+1} - s) / dt ds
        right[i, j] = int_{s_j}^{s_{j+1}} kernel(t_i, s) (s - s_j) / dt ds

    The kernel may behave like s**left_exp at s = 0 and like (t_i - s)**right_exp
    at s = t_i; pieces touching those points use Gauss-Jacobi rules with the
    matching weight, all other pieces Gauss-Legendre. Cells are bisected
    until the relative gap drops below ``tol``; cells still above it after
    ``max_depth`` levels are reported. With ``skip_last`` the cell ending at
    t_i is left at zero; ``columns`` restricts the work to some cells j.
    """
    rows, cols = np.tril_indices(n_steps + 1, -1)
    keep = np.ones(rows.size, dtype=bool)
    if skip_last:
        keep &= cols != rows - 1
    if columns is not None:
        keep &= np.isin(cols, np.asarray(columns, dtype=int))
    rows, cols = rows[keep], cols[keep]

    left = np.zeros((n_steps + 1, n_steps))
    right = np.zeros((n_steps + 1, n_steps))
    if rows.size == 0:
        return CellIntegrals(left, right)
    m0, m1, failed = _bisect_cells(kernel, rows, cols, dt, left_exp, right_exp, n_nodes, tol, max_depth)
    left[rows, cols] = m0 - m1
    right[rows, cols] = m1
    unconverged = tuple((int(i), int(j)) for i, j in zip(rows[failed], cols[failed]))
    if unconverged:
        logger.debug(f"Bisection stopped at depth {max_depth} on {len(unconverged)} cells")
    return CellIntegrals(left, right, unconverged)


def product_weights(kernel: KernelFn, n_steps: int, dt: float, left_exp: float = 0.0,
                    right_exp: float = 0.0, n_nodes: int = 8,
                    skip_last: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """(left, right) hat weights of :func:`integrate_cells`"""
    cells = integrate_cells(kernel, n_steps, dt, left_exp, right_exp, n_nodes, skip_last=skip_last)
    if cells.unconverged:
        logger.warning(f"Product weights: {len(cells.unconverged)} cells did not converge")
    return cells.left, cells.right


def cell_averages(kernel: KernelFn, n_steps: int, dt: float, left_exp: float = 0.0,
                  right_exp: float = 0.0, n_nodes: int = 8) -> np.ndarray:
    """(1/dt) int_cell kernel(t_i, s) ds for every cell j < i, shape (n_steps+1, n_steps)"""
    return integrate_cells(kernel, n_steps, dt, left_exp, right_exp, n_nodes).total / dt


def signed_rms_first_cell(kernel: KernelFn, n_steps: int, dt: float, left_exp: float = 0.0,
                          right_exp: float = 0.0, n_nodes: int = 8, tol: float = ADAPTIVE_TOL,
                          max_depth: int = MAX_DEPTH) -> Tuple[np.ndarray, Tuple[Tuple[int, int], ...]]:
    """sign(mean) * sqrt((1/dt) int_0^dt kernel(t_i, s)**2 ds) for i = 0..n_steps (zero at i = 0)"""
    mean = integrate_cells(kernel, n_steps, dt, left_exp, right_exp, n_nodes, tol, max_depth,
                           columns=[0])
    energy = integrate_cells(lambda t, s: kernel(t, s) ** 2, n_steps, dt, 2.0 * left_exp,
                             2.0 * right_exp, n_nodes, tol, max_depth, columns=[0])
    rms = np.sign(mean.total[:, 0]) * np.sqrt(np.maximum(energy.total[:, 0], 0.0) / dt)
    return rms, tuple(sorted(set(mean.unconverged) | set(energy.unconverged)))
