"""One runner per CLI subcommand. Each returns an ExperimentResult whose ``passed``
flag reflects the experiment's acceptance thresholds."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np
import pandas as pd

from .chaos import (
    FouParams, chaos_rate_table, entropy_between_laws, fou_rate_limit,
    gaussian_entropy, hierarchy_closed_form, hierarchy_moment_bound, hierarchy_table, hierarchy_tail_bound,
)
from .config import ExperimentConfig
from .gaussian_paths import GaussianLaw, SamplePath, sample_bm, volterra_from_bm
from .kernels import (
    TimeGrid, analytic_l_gap, discrete_inverse_L, fbm_covariance_matrix, fbm_kernel_matrix, isometry_study,
)
from .mimic import (
    fit_conditional_q, law_distance, linear_gaussian_oracle, linear_gaussian_training, simulate_mimicked_ensemble,
)
from .models import constant_drift, linear_state_drift, linear_tree_drift
from .replications import ReplicationProcessor
from .transforms import (
    from_fundamental, fundamental_drift_of_constant, inverse_q, q_energy_of_constant, q_transform, rkhs_norm_gram,
    to_fundamental,
)
from .tree_local import (
    TruncatedTree, check_agreement, compare_root_ball, estimate_gamma, root_ball_samples, simulate_local_equation,
    simulate_tree, truncation_allowance,
)
from .utils import spawn_seeds

logger = logging.getLogger(__name__)

ROUNDTRIP_THRESHOLD = 5e-2
HALVING_BAND = (1.6, 2.4)
# roundtrip errors below this are quadrature noise
EXACT_FLOOR = 1e-4
FUNDAMENTAL_DRIFT_THRESHOLD = 1e-2


@dataclass
class ExperimentResult:
    name: str
    table: pd.DataFrame
    passed: bool
    summary: Dict[str, object] = field(default_factory=dict)
    extra_tables: Dict[str, pd.DataFrame] = field(default_factory=dict)


def _hurst_values(config: ExperimentConfig, default: Sequence[float]) -> List[float]:
    return [config.hurst] if config.hurst is not None else list(default)


def _processor(desc: str) -> ReplicationProcessor:
    return ReplicationProcessor(chunk_size=100, desc=desc)


def _seed(config: ExperimentConfig, count: int):
    return spawn_seeds(config.seed, count)


def run_kernels_check(config: ExperimentConfig) -> ExperimentResult:
    """Isometry defect of the K matrix under refinement, the exact discrete inverse of K,
    and analytic L against that inverse"""
    steps = config.steps or 256
    rows = []
    noise_seed = _seed(config, 1)[0]
    for h in _hurst_values(config, (0.3, 0.5, 0.7)):
        study = isometry_study(h, [steps, 2 * steps], config.horizon)
        roundtrips, interior_gaps, first_gaps = [], [], []
        for n in study["n_steps"]:
            grid = TimeGrid(config.horizon, int(n))
            kmat = fbm_kernel_matrix(h, grid)
            inverse = discrete_inverse_L(kmat)
            increments = np.random.default_rng(noise_seed).standard_normal((grid.n_steps, 100)) * np.sqrt(grid.dt)
            values = np.vstack([np.zeros((1, 100)), kmat.entries[1:] @ increments])
            roundtrips.append(float(np.max(np.abs(inverse.apply_path(values) - increments))))
            gaps = analytic_l_gap(h, grid)
            interior_gaps.append(gaps["interior"])
            first_gaps.append(gaps["first_column"])
        study["inverse_roundtrip_error"] = roundtrips
        study["analytic_L_gap"] = interior_gaps
        study["analytic_L_gap_first_column"] = first_gaps
        rows.append(study)
    table = pd.concat(rows, ignore_index=True)

    coarse = table.groupby("h").head(1).reset_index(drop=True)
    fine = table.groupby("h").tail(1).reset_index(drop=True)
    exact = coarse["h"] == 0.5
    accurate = (coarse["relative_defect"] <= 1e-2) | (exact & (coarse["defect"] <= 1e-12))
    refined = (fine["refinement_ratio"] >= 1.5) | exact
    l_within = (table["analytic_L_gap"] <= 10.0 * table["relative_defect"] + 1e-12).all()
    l_shrinks = ((fine["analytic_L_gap"] < coarse["analytic_L_gap"]) | (fine["analytic_L_gap"] <= 1e-12)).all()
    passed = bool(accurate.all() and refined.all() and (table["inverse_roundtrip_error"] <= 1e-10).all()
                  and l_within and l_shrinks)
    summary = {"max_isometry_error": float(coarse["defect"].max()),
               "min_refinement_ratio": float(fine.loc[~exact, "refinement_ratio"].min()) if (~exact).any() else np.nan,
               "max_inverse_roundtrip_error": float(table["inverse_roundtrip_error"].max()),
               "max_analytic_L_gap": float(table["analytic_L_gap"].max())}
    return ExperimentResult("kernels-check", table, passed, summary)


def transform_test_drifts(grid: TimeGrid) -> Dict[str, np.ndarray]:
    """Constant, linear in time, periodic, and linear-in-state b = -x along a fixed smooth path"""
    t = grid.points
    return {
        "constant": np.ones_like(t),
        "linear_time": t.copy(),
        "sine": np.sin(2.0 * np.pi * t),
        "linear_state": -np.exp(-t) * np.cos(3.0 * t),
    }


def q_roundtrip_error(h: float, b: np.ndarray, grid: TimeGrid) -> float:
    back = inverse_q(h, q_transform(h, b, grid), grid)[:, 0]
    return float(np.linalg.norm(back - b) / np.linalg.norm(b))


def roundtrip_halves(err_coarse: float, err_fine: float, threshold: float = ROUNDTRIP_THRESHOLD) -> bool:
    """Fine error within threshold and half the coarse one up to 20%, or exact up to quadrature"""
    if err_fine > threshold:
        return False
    if err_fine <= EXACT_FLOOR:
        return True
    return HALVING_BAND[0] <= err_coarse / err_fine <= HALVING_BAND[1]


def run_transform_roundtrip(config: ExperimentConfig) -> ExperimentResult:
    """Q roundtrip under refinement and the fundamental-semimartingale path roundtrip"""
    steps = config.steps or 512
    bm_seed = _seed(config, 1)[0]
    rows = []
    for h in _hurst_values(config, (0.3, 0.7)):
        coarse_grid, fine_grid = TimeGrid(config.horizon, steps // 2), TimeGrid(config.horizon, steps)
        coarse_drifts = transform_test_drifts(coarse_grid)
        for name, b in transform_test_drifts(fine_grid).items():
            err_coarse = q_roundtrip_error(h, coarse_drifts[name], coarse_grid)
            err_fine = q_roundtrip_error(h, b, fine_grid)
            rows.append({"check": "q_roundtrip", "h": h, "case": name, "n_steps": steps, "error": err_fine,
                         "threshold": ROUNDTRIP_THRESHOLD, "coarse_error": err_coarse,
                         "passed": roundtrip_halves(err_coarse, err_fine)})

        grid = fine_grid
        kmat = fbm_kernel_matrix(h, grid)
        bm = sample_bm(grid, 1, bm_seed)
        z = volterra_from_bm(kmat, bm)
        x = z.values + config.theta * grid.points[:, None]
        path = SamplePath(grid, x)
        exact_l = discrete_inverse_L(kmat)
        analytic_l = fbm_kernel_matrix(h, grid, "L")
        scale = float(np.max(np.abs(x)))
        checks = [
            ("fundamental_exact", "drifted",
             np.max(np.abs(from_fundamental(kmat, to_fundamental(exact_l, path)).values - x)), 1e-8),
            ("bm_recovery_exact", "noise",
             np.max(np.abs(to_fundamental(exact_l, z).values - bm.values)), 1e-8),
            ("fundamental_analytic", "drifted",
             np.max(np.abs(from_fundamental(kmat, to_fundamental(analytic_l, path)).values - x)) / scale, 5e-2),
            ("bm_recovery_analytic", "noise",
             np.max(np.abs(to_fundamental(analytic_l, z).values - bm.values))
             / max(float(np.max(np.abs(z.values))), 1e-12), 5e-2),
        ]
        for check, case, error, threshold in checks:
            rows.append({"check": check, "h": h, "case": case, "n_steps": steps, "error": float(error),
                         "threshold": threshold, "coarse_error": np.nan, "passed": bool(error <= threshold)})

        drift_path = SamplePath(grid, config.theta * grid.points[:, None])
        recovered = to_fundamental(exact_l, drift_path).values[:, 0]
        expected = config.theta * fundamental_drift_of_constant(h, grid.points)
        error = float(np.max(np.abs(recovered - expected)) / max(float(np.max(np.abs(expected))), 1e-12))
        rows.append({"check": "fundamental_drift", "h": h, "case": "constant", "n_steps": steps, "error": error,
                     "threshold": FUNDAMENTAL_DRIFT_THRESHOLD, "coarse_error": np.nan,
                     "passed": error <= FUNDAMENTAL_DRIFT_THRESHOLD})

    table = pd.DataFrame(rows)
    summary = {"max_q_roundtrip_error": float(table.loc[table["check"] == "q_roundtrip", "error"].max()),
               "failed_checks": int((~table["passed"]).sum())}
    return ExperimentResult("transform-roundtrip", table, bool(table["passed"].all()), summary)


def run_mimic_verify(config: ExperimentConfig) -> ExperimentResult:
    """Exact oracle covariance gap under refinement and a Monte Carlo KS comparison"""
    steps = config.steps or 256
    samples = config.samples or 4000
    mc_steps = min(steps, 64)
    oracle_rows, mc_tables = [], []
    seeds = _seed(config, 3)
    for h in _hurst_values(config, (0.3, 0.5, 0.7)):
        gap_coarse = linear_gaussian_oracle(config.theta, h, TimeGrid(config.horizon, steps // 2)).relative_gap()
        gap_fine = linear_gaussian_oracle(config.theta, h, TimeGrid(config.horizon, steps)).relative_gap()
        oracle_rows.append({"h": h, "n_steps": steps, "relative_gap": gap_fine, "coarse_gap": gap_coarse,
                            "passed": gap_fine <= 2e-2 and gap_fine <= gap_coarse + 1e-12})

        grid = TimeGrid(config.horizon, mc_steps)
        q, x = linear_gaussian_training(config.theta, h, grid, samples, seeds[0])
        estimator = fit_conditional_q(q, x, grid, workers=config.effective_workers)
        kmat = fbm_kernel_matrix(h, grid)
        mimicked = simulate_mimicked_ensemble(estimator, kmat, h, grid, 0.0, samples, seeds[1])
        _, original = linear_gaussian_training(config.theta, h, grid, samples, seeds[2])
        report = law_distance(mimicked, original, grid)
        report.insert(0, "h", h)
        mc_tables.append(report)

    table = pd.DataFrame(oracle_rows)
    law = pd.concat(mc_tables, ignore_index=True)
    law["passed"] = law["ks_pvalue"] >= 0.01
    passed = bool(table["passed"].all() and law["passed"].all())
    summary = {"max_relative_gap": float(table["relative_gap"].max()),
               "min_ks_pvalue": float(law["ks_pvalue"].min())}
    return ExperimentResult("mimic-verify", table, passed, summary, {"law_distance": law})


def constant_drift_entropy_oracle(h: float, c: float, grid: TimeGrid) -> float:
    """Relative entropy between the grid laws of c*t + Z and Z"""
    cov = fbm_covariance_matrix(h, grid)[1:, 1:]
    mean = c * grid.points[1:]
    return gaussian_entropy(GaussianLaw(mean, cov), GaussianLaw(np.zeros_like(mean), cov))


def run_entropy_check(config: ExperimentConfig) -> ExperimentResult:
    """Brownian Girsanov energy, fBm constant drift against the Gaussian oracle, and a state-dependent case.

    The grid oracle converges to its continuous value at first order, so the
    fBm constant-drift rows allow twice the oracle's change from n/2 to n on
    top of three standard errors.
    """
    steps = config.steps or 256
    samples = config.samples or 10000
    grid = TimeGrid(config.horizon, steps)
    seeds = _seed(config, 3)
    c1, c2 = config.theta, 0.0
    rows = []

    est = entropy_between_laws(constant_drift(c1), constant_drift(c2), 0.5, grid, samples, seeds[0])
    exact = 0.5 * config.horizon * (c1 - c2) ** 2
    rows.append({"case": "brownian_constant", "h": 0.5, "estimate": est.estimate, "std_error": est.std_error,
                 "reference": exact, "tolerance": 3 * est.std_error + 1e-9 * max(exact, 1)})

    h = config.hurst if config.hurst is not None and config.hurst != 0.5 else 0.7
    est = entropy_between_laws(constant_drift(c1), constant_drift(c2), h, grid, samples, seeds[1])
    oracle = constant_drift_entropy_oracle(h, c1 - c2, grid)
    oracle_coarse = constant_drift_entropy_oracle(h, c1 - c2, TimeGrid(config.horizon, max(steps // 2, 1)))
    discretization = 2.0 * abs(oracle - oracle_coarse)
    closed = 0.5 * (c1 - c2) ** 2 * float(q_energy_of_constant(h, config.horizon))
    gram = 0.5 * rkhs_norm_gram(h, np.full(steps + 1, c1 - c2), grid) ** 2
    rows.append({"case": "fbm_constant", "h": h, "estimate": est.estimate, "std_error": est.std_error,
                 "reference": oracle, "tolerance": 3 * est.std_error + discretization})
    rows.append({"case": "fbm_constant_gram", "h": h, "estimate": gram, "std_error": 0.0,
                 "reference": oracle, "tolerance": 1e-8 * max(abs(oracle), 1e-12)})
    rows.append({"case": "fbm_constant_closed_form", "h": h, "estimate": closed, "std_error": 0.0,
                 "reference": oracle, "tolerance": discretization})

    est = entropy_between_laws(linear_state_drift(-1.0), constant_drift(0.0), h, grid, min(samples, 2000), seeds[2])
    rows.append({"case": "fbm_linear_state", "h": h, "estimate": est.estimate, "std_error": est.std_error,
                 "reference": np.nan, "tolerance": np.nan})

    table = pd.DataFrame(rows)
    within = (table["estimate"] - table["reference"]).abs() <= table["tolerance"]
    table["passed"] = np.where(table["reference"].notna(), within, table["estimate"] >= 0.0)
    return ExperimentResult("entropy-check", table, bool(table["passed"].all()),
                            {"fbm_constant_estimate": float(table.loc[1, "estimate"]),
                             "fbm_constant_oracle": float(oracle)})


def hierarchy_check(gammas=(0.5, 1.0), ks=(1, 2, 4), l_max: int = 64, times=(0.5, 1.0, 2.0)) -> pd.DataFrame:
    """Recursion against the closed form and the explicit bounds on a (gamma, k, t) grid"""
    rows = []
    for gamma in gammas:
        for k in ks:
            for t in times:
                table = hierarchy_table(gamma, k, l_max, t)
                l = table["l"].to_numpy()
                a_closed, b_closed = hierarchy_closed_form(gamma, k, l, t)
                tail = hierarchy_tail_bound(gamma, k, l, t)
                moment = float(np.sum(l.astype(float) ** 2 * table["B"]))
                rows.append({
                    "gamma": gamma, "k": k, "t": t,
                    "max_recursion_error": float(max(np.max(np.abs(table["A"] - a_closed)),
                                                     np.max(np.abs(table["B"] - b_closed)))),
                    "base_error": float(max(abs(table["A"].iloc[0] + np.expm1(-gamma * k * t)),
                                            abs(table["B"].iloc[0] - np.exp(-gamma * k * t)))),
                    "tail_bound_holds": bool(np.all(table["A"].to_numpy() <= tail * (1 + 5e-3) + 1e-9)),
                    "second_moment": moment,
                    "second_moment_bound": 2.0 * k ** 2 * np.exp(2.0 * gamma * t),
                    "first_moment_bound_holds": bool(np.sum(l * table["A"]) <= hierarchy_moment_bound(gamma, k, 1, t)),
                })
    df = pd.DataFrame(rows)
    df["passed"] = (df["base_error"] <= 1e-10) & df["tail_bound_holds"] & \
        (df["second_moment"] <= df["second_moment_bound"]) & df["first_moment_bound_holds"] & \
        (df["max_recursion_error"] <= 1e-2)
    return df


def log_log_slope(n: Sequence[float], values: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(n, dtype=float)), np.log(np.asarray(values, dtype=float)), 1)[0])


def run_chaos_rate(config: ExperimentConfig) -> ExperimentResult:
    """Exact fOU k-marginal entropy against the chaos bound, its n^-2 scaling and the hierarchy checks"""
    p = FouParams(config.hurst if config.hurst is not None else 0.7, config.fou_a, config.fou_b)
    t = config.t_list[0] if config.t_list else config.horizon
    n_list = config.n_list or (8, 16, 32, 64)
    grid = TimeGrid(t, config.steps or 128)
    tables = [chaos_rate_table(p, k, t, n_list, grid) for k in (config.k_list or (2,))]
    table = pd.concat(tables, ignore_index=True)
    table["dominated"] = table["gaussian_entropy"] <= table["chaos_bound"]
    slopes = {int(k): log_log_slope(g["n"], g["gaussian_entropy"]) for k, g in table.groupby("k") if len(g) > 1}
    hierarchy = hierarchy_check()
    passed = bool(table["dominated"].all() and all(-2.2 <= s <= -1.8 for s in slopes.values())
                  and hierarchy["passed"].all())
    summary = {"entropy_slopes": slopes, "hierarchy_failures": int((~hierarchy["passed"]).sum())}
    return ExperimentResult("chaos-rate", table, passed, summary, {"hierarchy": hierarchy})


def run_fou_limit(config: ExperimentConfig) -> ExperimentResult:
    """n^2/k^2 W2^2 against its analytic limit; the largest n must land within 5%"""
    p = FouParams(config.hurst if config.hurst is not None else 0.7, config.fou_a, config.fou_b)
    t = config.t_list[0] if config.t_list else config.horizon
    k = config.k_list[0] if config.k_list else 2
    table = fou_rate_limit(p, k, t, config.n_list or (50, 100, 200, 400, 800))
    last = float(table["ratio"].iloc[-1])
    passed = bool(0.95 <= last <= 1.05)
    return ExperimentResult("fou-limit", table, passed, {"last_ratio": last, "limit": float(table["limit"].iloc[0])})


def run_tree_local(config: ExperimentConfig) -> ExperimentResult:
    """Tree root ball against the local equation, with the depth-refinement allowance"""
    steps = config.steps or 32
    replications = config.replications or 2000
    grid = TimeGrid(config.horizon, steps)
    drift = linear_tree_drift(config.fou_a, config.coupling)
    deep = TruncatedTree.build(config.kappa, config.depth, config.boundary)
    shallow = TruncatedTree.build(config.kappa, config.depth - 1, config.boundary) if config.depth > 2 else deep
    workers = config.effective_workers
    reports, agreements = [], []
    for h in _hurst_values(config, (0.5, 0.7)):
        seeds = _seed(config, 4)
        run = dict(workers=workers, sequential=config.sequential)
        training = simulate_tree(deep, drift, h, grid, replications, seeds[0],
                                 processor=_processor("Tree (training)"), **run)
        gamma = estimate_gamma(training, deep, drift, h, grid, min_replications=min(1000, replications),
                               workers=workers)
        tree_ball = root_ball_samples(simulate_tree(deep, drift, h, grid, replications, seeds[1],
                                                    processor=_processor("Tree"), **run), deep)
        shallow_ball = root_ball_samples(simulate_tree(shallow, drift, h, grid, replications, seeds[2],
                                                       processor=_processor("Tree (shallow)"), **run),
                                         shallow)
        local = simulate_local_equation(gamma, drift, config.kappa, h, grid, replications, seeds[3],
                                        processor=_processor("Local equation"), **run)
        report = compare_root_ball(tree_ball, local, grid)
        allowance = truncation_allowance(shallow_ball, tree_ball, grid)
        agreement = check_agreement(report, allowance)
        report.insert(0, "h", h)
        agreement.insert(0, "h", h)
        reports.append(report)
        agreements.append(agreement)
    table = pd.concat(reports, ignore_index=True)
    checks = pd.concat(agreements, ignore_index=True)
    passed = bool(checks["passed"].all())
    return ExperimentResult("tree-local", table, passed, {"failed_gaps": int((~checks["passed"]).sum())},
                            {"agreement": checks})


RUNNERS: Dict[str, Callable[[ExperimentConfig], ExperimentResult]] = {
    "kernels-check": run_kernels_check,
    "transform-roundtrip": run_transform_roundtrip,
    "mimic-verify": run_mimic_verify,
    "entropy-check": run_entropy_check,
    "chaos-rate": run_chaos_rate,
    "fou-limit": run_fou_limit,
    "tree-local": run_tree_local,
}
