"""Interacting SDEs on truncated kappa-regular trees and the local equation on the root ball.

The local equation has coordinates (center, neighbor_1, ..., neighbor_kappa):

    X^0_t = X_0 + int_0^t [b0(s, X^0) + b(s, X^0, mu^0)] ds + Z^0_t
    X^u_t = X_0 + int_0^t b0(s, X^u) ds + int_0^t K(t, s) gamma(s, X^u[s], X^0[s]) ds + Z^u_t

with mu^0 the empirical measure of the neighbors and gamma the conditional
Q-transform of the interaction given (own path, center path).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd
from scipy.stats import ks_2samp

from .exceptions import GridMismatchError
from .kernels import HurstLike, KernelMode, TimeGrid, as_hurst, fbm_kernel_matrix
from .mimic import ConditionalDriftEstimator, FeatureMap, fit_conditional_q
from .replications import ReplicationProcessor
from .sde_sim import DriftKind, DriftSpec, check_finite, initial_array, noise_from_seeds
from .transforms import q_transform_paths
from .utils import SeedLike, spawn_seeds, validate_int_at_least

logger = logging.getLogger(__name__)

BOUNDARY_POLICIES = ("frozen", "free")
GAMMA_FEATURES = FeatureMap(n_lags=2, include_initial=False)


@dataclass(frozen=True)
class TruncatedTree:
    """Ball of radius ``depth`` around the root of the kappa-regular tree.

    The root has kappa children and every other non-leaf vertex kappa - 1, so
    interior vertices have exactly kappa neighbors. Vertices are numbered in
    breadth-first order; the root's children are 1..kappa.
    """

    kappa: int
    depth: int
    boundary: str
    graph: nx.Graph = field(compare=False, repr=False)
    parent: np.ndarray = field(compare=False, repr=False)
    level: np.ndarray = field(compare=False, repr=False)

    @classmethod
    def build(cls, kappa: int, depth: int, boundary: str = "frozen") -> "TruncatedTree":
        validate_int_at_least(kappa, 2, "kappa")
        validate_int_at_least(depth, 2, "depth")
        if boundary not in BOUNDARY_POLICIES:
            raise ValueError(f"boundary must be one of {BOUNDARY_POLICIES}, got {boundary!r}")
        graph = nx.Graph()
        graph.add_node(0)
        parent = [-1]
        level = [0]
        frontier = [0]
        for d in range(1, depth + 1):
            next_frontier = []
            for v in frontier:
                for _ in range(kappa if v == 0 else kappa - 1):
                    child = len(parent)
                    graph.add_edge(v, child)
                    parent.append(v)
                    level.append(d)
                    next_frontier.append(child)
            frontier = next_frontier
        logger.debug(f"Built tree kappa={kappa} depth={depth} with {len(parent)} vertices")
        return cls(kappa, depth, boundary, graph, np.array(parent), np.array(level))

    @property
    def n_vertices(self) -> int:
        return len(self.parent)

    def neighbors(self, v: int) -> List[int]:
        return sorted(self.graph.neighbors(v))

    def root_ball(self) -> List[int]:
        return [0] + self.neighbors(0)

    def is_boundary(self, v: int) -> bool:
        return int(self.level[v]) == self.depth

    def interaction_groups(self) -> List[Tuple[np.ndarray, Optional[np.ndarray]]]:
        """Vertices grouped by neighbor count with their neighbor index arrays.

        Frozen boundary vertices get None: their interaction is switched off.
        """
        groups: Dict[int, List[int]] = {}
        frozen: List[int] = []
        for v in range(self.n_vertices):
            if self.boundary == "frozen" and self.is_boundary(v):
                frozen.append(v)
            else:
                groups.setdefault(self.graph.degree[v], []).append(v)
        out = [(np.array(vs), np.array([self.neighbors(v) for v in vs])) for _, vs in sorted(groups.items())]
        if frozen:
            out.append((np.array(frozen), None))
        return out


def _check_measure_drift(drift: DriftSpec) -> None:
    if drift.kind is DriftKind.PAIRWISE:
        raise ValueError("Tree systems take a measure drift b(t, x, mu) or a single-path drift")


def _tree_chunk(tree: TruncatedTree, drift: DriftSpec, h, grid: TimeGrid, x0, dim: int, noise_method: str,
                seeds: Sequence) -> np.ndarray:
    r = len(seeds)
    v_count = tree.n_vertices
    noise = np.stack([noise_from_seeds(h, grid, dim, spawn_seeds(s, v_count), noise_method) for s in seeds])
    dz = np.diff(noise, axis=2)
    paths = np.empty((r, v_count, grid.n_steps + 1, dim))
    paths[:, :, 0] = initial_array(x0, 1, dim)[0]
    groups = tree.interaction_groups()
    t = grid.points
    for i in range(grid.n_steps):
        prefix = paths[:, :, :i + 1]
        own_all = prefix.reshape(r * v_count, i + 1, dim)
        b = np.array(drift.base(t[i], own_all)).reshape(r, v_count, dim)
        for vertices, neighbor_idx in groups:
            if neighbor_idx is None or drift.b is None:
                continue
            own = prefix[:, vertices].reshape(-1, i + 1, dim)
            mu = prefix[:, neighbor_idx].reshape(-1, neighbor_idx.shape[1], i + 1, dim)
            b[:, vertices] += drift.interaction(t[i], own, mu).reshape(r, len(vertices), dim)
        check_finite(b, i)
        paths[:, :, i + 1] = paths[:, :, i] + b * grid.dt + dz[:, :, i]
    return paths


def simulate_tree(tree: TruncatedTree, drift: DriftSpec, h: HurstLike, grid: TimeGrid, n_replications: int = 1,
                  seed: SeedLike = None, x0=0.0, dim: int = 1, noise_method: str = "kernel",
                  workers: int = None, sequential: bool = True,
                  processor: ReplicationProcessor = None) -> np.ndarray:
    """Synchronous Euler stepping of all vertices, shape (R, V, n+1, d).

    Each vertex's interaction uses the empirical measure of its neighbors in
    the truncated tree; under the frozen policy boundary vertices feel b0 only.
    """
    _check_measure_drift(drift)
    hp = as_hurst(h)
    processor = processor or ReplicationProcessor(chunk_size=50, desc="Tree replications")
    return processor.run(
        lambda first, seeds: _tree_chunk(tree, drift, hp, grid, x0, dim, noise_method, seeds),
        n_replications, seed, workers=workers, sequential=sequential,
    )


def root_ball_samples(tree_samples: np.ndarray, tree: TruncatedTree) -> np.ndarray:
    """(R, kappa+1, n+1, d): root first, then its children"""
    return np.asarray(tree_samples)[:, tree.root_ball()]


def interaction_along_paths(drift: DriftSpec, grid: TimeGrid, own: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """b(t_i, X[0..i], mu[0..i]) for own (m, n+1, d) and neighbors (m, N, n+1, d)"""
    t = grid.points
    out = np.empty(own.shape)
    for i in range(grid.n_steps + 1):
        out[:, i] = check_finite(drift.interaction(t[i], own[:, :i + 1], neighbors[:, :, :i + 1]), i)
    return out


def estimate_gamma(tree_samples: np.ndarray, tree: TruncatedTree, drift: DriftSpec, h: HurstLike,
                   grid: TimeGrid, feature_map: FeatureMap = GAMMA_FEATURES, regularization: float = 1e-8,
                   min_replications: int = 1000, workers: int = 1) -> ConditionalDriftEstimator:
    """Regress the root's realized interaction Q-transform on (root path, child path).

    Every child of the root contributes one training pair per replication, so
    the estimator reads gamma(t, own, other) with own = the conditioning vertex
    and other = its neighbor.
    """
    samples = np.asarray(tree_samples, dtype=float)
    validate_int_at_least(samples.shape[0], min_replications, "replications")
    if samples.shape[2] != grid.n_steps + 1:
        raise GridMismatchError(f"Tree samples have {samples.shape[2]} points, grid has {grid.n_steps + 1}")
    children = tree.neighbors(0)
    root = samples[:, 0]
    target = q_transform_paths(h, interaction_along_paths(drift, grid, root, samples[:, children]), grid)

    own = np.concatenate([root] * len(children))
    other = np.concatenate([samples[:, c] for c in children])
    q = np.concatenate([target] * len(children))
    return fit_conditional_q(q, (own, other), grid, feature_map, regularization, workers=workers,
                             min_samples=min(500, len(q)))


def _local_chunk(gamma: ConditionalDriftEstimator, drift: DriftSpec, kappa: int, h, grid: TimeGrid, x0,
                 noise_method: str, coordinate_seeds: Sequence[Sequence]) -> np.ndarray:
    r = len(coordinate_seeds)
    dim = gamma.dim
    n = grid.n_steps
    dt = grid.dt
    kmat = fbm_kernel_matrix(h, grid, "K", KernelMode.DENSITY).entries
    noise = np.stack([noise_from_seeds(h, grid, dim, seeds, noise_method) for seeds in coordinate_seeds])
    start = initial_array(x0, 1, dim)[0]
    paths = np.empty((r, kappa + 1, n + 1, dim))
    paths[:, :, 0] = start
    base_sum = np.zeros((r, kappa, dim))
    gamma_values = np.empty((r * kappa, n, dim))
    t = grid.points
    for i in range(n):
        center = paths[:, 0, :i + 1]
        neigh = paths[:, 1:, :i + 1]
        b_center = drift.base(t[i], center) + drift.interaction(t[i], center, neigh)
        check_finite(b_center, i)
        paths[:, 0, i + 1] = paths[:, 0, i] + b_center * dt + noise[:, 0, i + 1] - noise[:, 0, i]

        own = neigh.reshape(r * kappa, i + 1, dim)
        other = np.repeat(center, kappa, axis=0)
        base_sum += check_finite(drift.base(t[i], own), i).reshape(r, kappa, dim)
        gamma_values[:, i] = gamma.predict(i, own, other)
        history = np.einsum("j,mjd->md", kmat[i + 1, :i + 1], gamma_values[:, :i + 1]).reshape(r, kappa, dim)
        paths[:, 1:, i + 1] = start + dt * (base_sum + history) + noise[:, 1:, i + 1]
    return paths


def simulate_local_equation(gamma: ConditionalDriftEstimator, drift: DriftSpec, kappa: int, h: HurstLike,
                            grid: TimeGrid, n_replications: int = 1, seed: SeedLike = None, x0=0.0,
                            noise_method: str = "kernel", coordinate_seeds: Optional[Sequence[Sequence]] = None,
                            workers: int = None, sequential: bool = True,
                            processor: ReplicationProcessor = None) -> np.ndarray:
    """(R, kappa+1, n+1, d) samples of the local equation, center first.

    Replication r draws coordinate c's noise from spawn_seeds(child_r, kappa+1)[c]
    unless ``coordinate_seeds`` lists the kappa+1 seeds of every replication.
    """
    _check_measure_drift(drift)
    validate_int_at_least(kappa, 2, "kappa")
    if gamma.grid != grid:
        raise GridMismatchError("gamma was fitted on a different grid")
    if gamma.n_coordinates != 2:
        raise ValueError("gamma must be fitted on (own path, neighbor path) pairs")
    hp = as_hurst(h)
    if coordinate_seeds is not None:
        seeds = [list(s) for s in coordinate_seeds]
        if any(len(s) != kappa + 1 for s in seeds):
            raise ValueError(f"Every replication needs {kappa + 1} coordinate seeds")
        return _local_chunk(gamma, drift, kappa, hp, grid, x0, noise_method, seeds)
    processor = processor or ReplicationProcessor(chunk_size=100, desc="Local equation")
    return processor.run(
        lambda first, chunk_seeds: _local_chunk(gamma, drift, kappa, hp, grid, x0, noise_method,
                                                [spawn_seeds(s, kappa + 1) for s in chunk_seeds]),
        n_replications, seed, workers=workers, sequential=sequential,
    )


def _coordinate_name(c: int, k: int, dim: int) -> str:
    name = "center" if c == 0 else f"neighbor_{c}"
    return f"{name}[{k}]" if dim > 1 else name


def compare_root_ball(tree_samples: np.ndarray, local_samples: np.ndarray, grid: TimeGrid,
                      fractions: Sequence[float] = (0.5, 1.0)) -> pd.DataFrame:
    """Gaps between two (R, kappa+1, n+1, d) root-ball sample sets.

    Rows carry (time, coordinate, statistic, value, std_error) for the mean,
    variance and center-neighbor cross-covariance gaps, plus KS statistics.
    """
    a = np.asarray(tree_samples, dtype=float)
    b = np.asarray(local_samples, dtype=float)
    if a.shape[1:] != b.shape[1:] or a.shape[2] != grid.n_steps + 1:
        raise GridMismatchError(f"Root-ball shapes {a.shape} and {b.shape} do not share the grid")
    rows = []
    for i in grid.checkpoint_indices(fractions):
        time = i * grid.dt
        for k in range(a.shape[3]):
            for c in range(a.shape[1]):
                xa, xb = a[:, c, i, k], b[:, c, i, k]
                name = _coordinate_name(c, k, a.shape[3])

                def add(statistic, value, std_error):
                    rows.append({"time": time, "coordinate": name, "statistic": statistic,
                                 "value": float(value), "std_error": float(std_error)})

                add("mean", xa.mean() - xb.mean(),
                    np.sqrt(xa.var(ddof=1) / len(xa) + xb.var(ddof=1) / len(xb)))
                sq_a, sq_b = (xa - xa.mean()) ** 2, (xb - xb.mean()) ** 2
                add("variance", xa.var(ddof=1) - xb.var(ddof=1),
                    np.hypot(sq_a.std(ddof=1) / np.sqrt(len(xa)), sq_b.std(ddof=1) / np.sqrt(len(xb))))
                if c > 0:
                    pa = (xa - xa.mean()) * (a[:, 0, i, k] - a[:, 0, i, k].mean())
                    pb = (xb - xb.mean()) * (b[:, 0, i, k] - b[:, 0, i, k].mean())
                    add("cross_covariance", pa.mean() - pb.mean(),
                        np.hypot(pa.std(ddof=1) / np.sqrt(len(pa)), pb.std(ddof=1) / np.sqrt(len(pb))))
                ks = ks_2samp(xa, xb)
                add("ks_statistic", ks.statistic, np.nan)
                add("ks_pvalue", ks.pvalue, np.nan)
    return pd.DataFrame(rows, columns=["time", "coordinate", "statistic", "value", "std_error"])


GAP_STATISTICS = ("mean", "variance", "cross_covariance")


def truncation_allowance(shallow: np.ndarray, deep: np.ndarray, grid: TimeGrid,
                         fractions: Sequence[float] = (0.5, 1.0)) -> pd.DataFrame:
    """Measured root-ball gaps between two truncation depths, one row per (time, coordinate, statistic)"""
    report = compare_root_ball(shallow, deep, grid, fractions)
    report = report[report["statistic"].isin(GAP_STATISTICS)].copy()
    report["allowance"] = report["value"].abs()
    return report[["time", "coordinate", "statistic", "allowance"]].reset_index(drop=True)


def check_agreement(report: pd.DataFrame, allowance: Optional[pd.DataFrame] = None,
                    n_se: float = 3.0) -> pd.DataFrame:
    """Gap rows with threshold n_se * std_error + allowance and a pass flag"""
    gaps = report[report["statistic"].isin(GAP_STATISTICS)].copy()
    if allowance is not None:
        gaps = gaps.merge(allowance, on=["time", "coordinate", "statistic"], how="left")
        gaps["allowance"] = gaps["allowance"].fillna(0.0)
    else:
        gaps["allowance"] = 0.0
    gaps["threshold"] = n_se * gaps["std_error"] + gaps["allowance"]
    gaps["passed"] = gaps["value"].abs() <= gaps["threshold"]
    return gaps.reset_index(drop=True)
