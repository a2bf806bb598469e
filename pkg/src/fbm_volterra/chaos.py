"""Relative entropy and Wasserstein closed forms, the fractional OU rate example,
hierarchy functions and the propagation-of-chaos bound.

The hierarchy functions are transition quantities of a pure-birth chain with
rate gamma*j in state j:

    B_k^l(t) = P(state l at t | k at 0) = C(l-1, k-1) e^{-gamma k t} (1 - e^{-gamma t})^{l-k}
    A_k^l(t) = P(state > l at t | k at 0)

Both satisfy f_m(t) = gamma m int_0^t e^{-gamma m (t-s)} f_{m+1}(s) ds for m < l,
with top levels B_l^l = e^{-gamma l t} and A_l^l = 1 - e^{-gamma l t}.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import quad
from scipy.linalg import LinAlgError, cho_factor, cho_solve, expm, sqrtm
from scipy.signal import lfilter
from scipy.stats import nbinom

from .exceptions import ConfigError, EntropyEstimationError, SingularMatrixError
from .gaussian_paths import GaussianLaw
from .kernels import HurstLike, HurstParam, TimeGrid, as_hurst, fbm_covariance_matrix
from .sde_sim import DriftSpec, euler_paths, noise_from_seeds
from .transforms import q_energy, q_transform_matrix
from .utils import SeedLike, spawn_seeds, validate_int_at_least, validate_positive

logger = logging.getLogger(__name__)

HIERARCHY_POINTS = 2048


@dataclass(frozen=True)
class EntropyEstimate:
    estimate: float
    std_error: float
    n_used: int
    n_excluded: int


def _drift_values(drift: DriftSpec, grid: TimeGrid, paths: np.ndarray) -> np.ndarray:
    t = grid.points
    return np.stack([drift.base(t[i], paths[:, :i + 1]) for i in range(grid.n_steps + 1)], axis=1)


def entropy_between_laws(drift1: DriftSpec, drift2: DriftSpec, h: HurstLike, grid: TimeGrid,
                         n_samples: int, seed: SeedLike = None, x0=0.0, dim: int = 1,
                         initial_entropy: float = 0.0, max_excluded: float = 0.01,
                         noise_method: str = "kernel") -> EntropyEstimate:
    """H[P^1 | P^2] = H_0 + 1/2 E^{P^1} int_0^T |Q^{b1} - Q^{b2}|^2 ds, Monte Carlo under P^1.

    Samples whose Q difference is not finite are excluded and counted; more than
    ``max_excluded`` of them aborts the estimate.
    """
    validate_int_at_least(n_samples, 2, "samples")
    hp = as_hurst(h)
    noise = noise_from_seeds(hp, grid, dim, spawn_seeds(seed, n_samples), noise_method)
    paths, _ = euler_paths(lambda i, t, x: drift1.base(t, x), grid, x0, noise)

    with np.errstate(invalid="ignore", over="ignore"):
        diff = _drift_values(drift1, grid, paths) - _drift_values(drift2, grid, paths)
        q = np.einsum("ij,mjd->mid", q_transform_matrix(hp, grid), diff)
        energy = 0.5 * q_energy(hp, q, grid)
    finite = np.isfinite(energy)
    excluded = int(n_samples - finite.sum())
    if excluded > max_excluded * n_samples:
        raise EntropyEstimationError(
            f"{excluded} of {n_samples} samples have a non-finite Q difference "
            f"(limit {max_excluded:.1%})"
        )
    if excluded:
        logger.warning(f"Excluded {excluded} samples with non-finite Q from the entropy estimate")
    used = energy[finite]
    std_error = float(used.std(ddof=1) / np.sqrt(used.size)) if used.size > 1 else 0.0
    return EntropyEstimate(float(initial_entropy + used.mean()), std_error, int(used.size), excluded)


def _factor(cov: np.ndarray):
    try:
        return cho_factor(cov, lower=True)
    except LinAlgError:
        jitter = 1e-12 * np.trace(cov) / cov.shape[0]
        logger.warning(f"Reference covariance not positive definite; retrying with jitter {jitter:.2e}")
        try:
            return cho_factor(cov + jitter * np.eye(cov.shape[0]), lower=True)
        except LinAlgError:
            smallest = float(np.linalg.eigvalsh(cov)[0])
            raise SingularMatrixError(
                f"Reference law is singular (smallest eigenvalue {smallest:.3e})",
                smallest_eigenvalue=smallest,
            )


def gaussian_entropy(law1: GaussianLaw, law2: GaussianLaw) -> float:
    """Relative entropy H[law1 | law2] of two Gaussian laws"""
    if law1.size != law2.size:
        raise ValueError(f"Laws have different sizes ({law1.size} vs {law2.size})")
    factor = _factor(np.asarray(law2.cov))
    k = law1.size
    gap = law2.mean - law1.mean
    trace = float(np.trace(cho_solve(factor, law1.cov)))
    mahalanobis = float(gap @ cho_solve(factor, gap))
    logdet2 = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    sign, logdet1 = np.linalg.slogdet(law1.cov)
    if sign <= 0:
        logger.warning("First law is degenerate; relative entropy is infinite")
        return float("inf")
    return max(0.5 * (trace + mahalanobis - k + logdet2 - logdet1), 0.0)


def _commute(a: np.ndarray, b: np.ndarray) -> bool:
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a @ b - b @ a))) <= 1e-12 * scale ** 2


def gaussian_wasserstein2(law1: GaussianLaw, law2: GaussianLaw, squared: bool = False) -> float:
    """2-Wasserstein (Bures) distance; commuting covariances take the joint eigenbasis"""
    if law1.size != law2.size:
        raise ValueError(f"Laws have different sizes ({law1.size} vs {law2.size})")
    s1, s2 = np.asarray(law1.cov), np.asarray(law2.cov)
    mean_part = float(np.sum((law1.mean - law2.mean) ** 2))
    if _commute(s1, s2):
        # generic combination separates eigenspaces shared by both matrices
        _, basis = np.linalg.eigh(s1 + 0.5772156649015329 * s2)
        d1 = np.clip(np.einsum("ij,ik,kj->j", basis, s1, basis), 0.0, None)
        d2 = np.clip(np.einsum("ij,ik,kj->j", basis, s2, basis), 0.0, None)
        cov_part = float(np.sum((np.sqrt(d1) - np.sqrt(d2)) ** 2))
    else:
        root2 = np.real(sqrtm(s2))
        cross = np.real(sqrtm(root2 @ s1 @ root2))
        cov_part = float(np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    value = max(mean_part + cov_part, 0.0)
    return value if squared else float(np.sqrt(value))


@dataclass(frozen=True)
class FouParams:
    """Fractional OU system dX^i = -(a X^i + (b/n) sum_j X^j) dt + dZ^i"""

    h: HurstParam
    a: float
    b: float

    def __post_init__(self):
        hp = as_hurst(self.h)
        if hp.h <= 0.5:
            raise ConfigError("hurst", f"the fOU example needs h > 1/2, got {hp.h}")
        if float(self.a) + float(self.b) == 0.0:
            raise ConfigError("fou_b", "a + b must be nonzero")
        object.__setattr__(self, "h", hp)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))


def fou_variance(h: HurstLike, rate: float, t: float) -> float:
    """C_H int int_{[0,t]^2} e^{-rate(u+v)} |u-v|^{2H-2} du dv with C_H = H(2H-1).

    With w = u - v the diagonal singularity becomes an algebraic weight:
    2 C_H int_0^t w^{2H-2} e^{-rate w} g(t-w) dw, g(x) = (1 - e^{-2 rate x}) / (2 rate).
    """
    H = as_hurst(h).h
    if t <= 0.0:
        return 0.0
    c_h = H * (2.0 * H - 1.0)

    def g(x):
        return x if rate == 0.0 else -np.expm1(-2.0 * rate * x) / (2.0 * rate)

    value, _ = quad(lambda w: np.exp(-rate * w) * g(t - w), 0.0, t, weight="alg",
                    wvar=(2.0 * H - 2.0, 0.0), epsabs=1e-13, epsrel=1e-11, limit=200)
    return float(2.0 * c_h * value)


def fou_xi_eta(p: FouParams, t: float) -> Tuple[float, float]:
    """(xi, eta): variances along the directions orthogonal to and along (1, ..., 1)"""
    return fou_variance(p.h, p.a, t), fou_variance(p.h, p.a + p.b, t)


def fou_generator(p: FouParams, n: int) -> np.ndarray:
    return -(p.a * np.eye(n) + (p.b / n) * np.ones((n, n)))


def fou_matrix_exponential(p: FouParams, n: int, r: float, method: str = "closed") -> np.ndarray:
    """e^{r A_n} = e^{-ra} (I + (1/n)(e^{-rb} - 1) J), or scipy's scaling-and-squaring"""
    if method == "closed":
        return np.exp(-r * p.a) * (np.eye(n) + np.expm1(-r * p.b) / n * np.ones((n, n)))
    if method == "expm":
        return expm(r * fou_generator(p, n))
    raise ValueError(f"Unknown method {method!r} (expected 'closed' or 'expm')")


def fou_system_covariance(p: FouParams, n: int, t: float) -> GaussianLaw:
    """Sigma_t^n = xi I_n + (1/n)(eta - xi) J_n"""
    validate_int_at_least(n, 1, "n")
    xi, eta = fou_xi_eta(p, t)
    cov = xi * np.eye(n) + (eta - xi) / n * np.ones((n, n))
    return GaussianLaw(np.zeros(n), cov)


def fou_marginal_law(p: FouParams, n: int, k: int, t: float) -> Tuple[GaussianLaw, GaussianLaw]:
    """(k-marginal of the n-particle law, k-fold product of the mean-field law) at time t"""
    if not 1 <= k <= n:
        raise ConfigError("k", f"must satisfy 1 <= k <= n={n}, got {k}")
    xi, eta = fou_xi_eta(p, t)
    marginal = GaussianLaw(np.zeros(k), xi * np.eye(k) + (eta - xi) / n * np.ones((k, k)))
    return marginal, GaussianLaw(np.zeros(k), xi * np.eye(k))


def fou_contrast(p: FouParams, t: float) -> float:
    """c_{a,b}(t) = (eta - xi) / xi"""
    xi, eta = fou_xi_eta(p, t)
    return (eta - xi) / xi


def fou_marginal_entropy(p: FouParams, n: int, k: int, t: float) -> float:
    """H[P^{(n,k)}_t | mu_t^k] = (x - log(1 + x)) / 2 with x = (k/n) c_{a,b}(t)"""
    x = k / n * fou_contrast(p, t)
    return 0.5 * float(x - np.log1p(x))


def fou_rate_limit(p: FouParams, k: int, t: float, n_list: Sequence[int]) -> pd.DataFrame:
    """n^2/k^2 W2^2 between the k-marginal and the product law, against xi c^2 / 4"""
    validate_int_at_least(k, 1, "k")
    validate_positive(t, "t")
    xi, eta = fou_xi_eta(p, t)
    c = (eta - xi) / xi
    limit = xi * c ** 2 / 4.0
    rows = []
    for n in n_list:
        marginal, product = fou_marginal_law(p, n, k, t)
        scaled = n ** 2 / k ** 2 * gaussian_wasserstein2(marginal, product, squared=True)
        rows.append({
            "n": int(n),
            "k": int(k),
            "t": float(t),
            "w2_scaled": scaled,
            "limit": limit,
            "ratio": scaled / limit if limit > 0 else np.nan,
            "gaussian_entropy": gaussian_entropy(marginal, product),
        })
    return pd.DataFrame(rows)


def _exponential_weights(lam: float, step: float) -> Tuple[float, float, float]:
    """Weights of lam int_0^step e^{-lam(step-u)} f(u) du for linear f"""
    x = lam * step
    decay = np.exp(-x)
    ratio = -np.expm1(-x) / x
    return decay, ratio - decay, 1.0 - ratio


def hierarchy_table(gamma: float, k: int, l_max: int, t: float,
                    n_points: int = HIERARCHY_POINTS) -> pd.DataFrame:
    """A_k^l(t) and B_k^l(t) for l = k..l_max by the level recursion.

    Each level is one exponentially weighted integral of the level above, exact
    for piecewise-linear integrands on an n_points grid over [0, t], run for all
    targets l at once with lfilter.
    """
    validate_positive(gamma, "gamma")
    validate_int_at_least(k, 1, "k")
    validate_int_at_least(l_max, k, "l_max")
    levels = np.arange(k, l_max + 1)
    if t == 0.0:
        return pd.DataFrame({"l": levels, "A": np.zeros(len(levels)), "B": (levels == k).astype(float)})
    if t < 0.0:
        raise ConfigError("t", f"must be nonnegative, got {t}")

    s = np.linspace(0.0, t, n_points)
    step = s[1] - s[0]
    values = np.zeros((2, len(levels), n_points))   # [A, B] x target level x time
    for m in range(l_max, k - 1, -1):
        active = levels > m
        if np.any(active):
            decay, w0, w1 = _exponential_weights(gamma * m, step)
            upper = values[:, active]
            forcing = w0 * upper[..., :-1] + w1 * upper[..., 1:]
            updated = np.zeros_like(upper)
            updated[..., 1:] = lfilter([1.0], [1.0, -decay], forcing, axis=-1)
            values[:, active] = updated
        top = levels == m
        values[0, top] = -np.expm1(-gamma * m * s)
        values[1, top] = np.exp(-gamma * m * s)
    return pd.DataFrame({"l": levels, "A": values[0, :, -1], "B": values[1, :, -1]})


def hierarchy_AB(gamma: float, k: int, l: int, t: float, n_points: int = HIERARCHY_POINTS) -> Tuple[float, float]:
    if l < k:
        raise ConfigError("l", f"must be at least k={k}, got {l}")
    row = hierarchy_table(gamma, k, l, t, n_points).iloc[-1]
    return float(row["A"]), float(row["B"])


def hierarchy_closed_form(gamma: float, k: int, l, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """(A_k^l, B_k^l) from the negative binomial law of the number of births"""
    l = np.asarray(l)
    p = np.exp(-gamma * t)
    if p >= 1.0:
        return np.zeros(l.shape), (l == k).astype(float)
    births = l - k
    return nbinom.sf(births, k, p), np.exp(nbinom.logpmf(births, k, p))


def hierarchy_tail_bound(gamma: float, k: int, l, t: float) -> np.ndarray:
    """exp(-2(l+1)(e^{-gamma t} - k/(l+1))_+^2)"""
    l = np.asarray(l, dtype=float)
    gap = np.clip(np.exp(-gamma * t) - k / (l + 1.0), 0.0, None)
    return np.exp(-2.0 * (l + 1.0) * gap ** 2)


def hierarchy_moment_bound(gamma: float, k: int, r: int, t: float) -> float:
    """(k+r)!/(k-1)! (e^{gamma(r+1)t} - 1)/(r+1), bounding sum_l l^r A_k^l(t)"""
    falling = float(np.prod(np.arange(k, k + r + 1, dtype=float)))
    return falling * np.expm1(gamma * (r + 1) * t) / (r + 1)


@dataclass(frozen=True)
class HierarchyInputs:
    gamma: float
    M: float
    C0: float
    T: float
    n: int
    k: int

    def __post_init__(self):
        validate_positive(self.gamma, "gamma")
        validate_positive(self.T, "horizon")
        for name in ("M", "C0"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be nonnegative, got {getattr(self, name)}")
        validate_int_at_least(self.k, 1, "k")
        validate_int_at_least(self.n, self.k, "n")


@dataclass(frozen=True)
class ChaosBound:
    value: float
    levels: pd.DataFrame
    top_term: float
    global_entropy: float
    explicit_constant: float
    packaged_bound: float
    m_bar: float
    packaged_valid: bool


def chaos_bound(inputs: HierarchyInputs, n_points: int = HIERARCHY_POINTS) -> ChaosBound:
    """Iterated-Gronwall bound on H_T^{(n,k)}.

    sum_{l=k}^{n-1} [B_k^l(T) C0 l^2/n^2 + (l-1)^2 T M / (gamma (n-1)^2) A_k^l(T)]
    + A_k^{n-1}(T) H_T^{(n,n)}, with H_T^{(n,n)} <= C0 + n M / 2.
    """
    g, M, C0, T, n, k = inputs.gamma, inputs.M, inputs.C0, inputs.T, inputs.n, inputs.k
    global_entropy = C0 + n * M / 2.0
    explicit_constant = 8.0 * (C0 + (1.0 + g) * M * T) * np.exp(6.0 * g * T)
    gap = max(np.exp(-g * T) - k / n, 0.0)
    packaged = 2.0 * explicit_constant * k ** 2 / n ** 2 + explicit_constant * np.exp(-2.0 * n * gap ** 2)

    if k == n:
        levels = pd.DataFrame(columns=["l", "A", "B", "initial_term", "drift_term"])
        return ChaosBound(global_entropy, levels, global_entropy, global_entropy, explicit_constant,
                          packaged, 2.0 * explicit_constant, n >= 6.0 * np.exp(g * T))

    levels = hierarchy_table(g, k, n - 1, T, n_points)
    l = levels["l"].to_numpy(dtype=float)
    levels["initial_term"] = levels["B"] * C0 * l ** 2 / n ** 2
    levels["drift_term"] = (l - 1.0) ** 2 * T * M / (g * (n - 1.0) ** 2) * levels["A"]
    top = float(levels["A"].iloc[-1]) * global_entropy
    value = float(levels["initial_term"].sum() + levels["drift_term"].sum()) + top
    return ChaosBound(value, levels, top, global_entropy, explicit_constant, packaged,
                      2.0 * explicit_constant, n >= 6.0 * np.exp(g * T))


def mean_field_fou_covariance(p: FouParams, grid: TimeGrid) -> np.ndarray:
    """Grid covariance of the Euler-discretized mean-field fOU path (rate a, X_0 = 0)"""
    n = grid.n_steps
    factor = 1.0 - p.a * grid.dt
    i, j = np.indices((n + 1, n))
    propagate = np.where(j < i, factor ** np.clip(i - 1 - j, 0, None), 0.0)
    diff = np.zeros((n, n + 1))
    diff[np.arange(n), np.arange(n)] = -1.0
    diff[np.arange(n), np.arange(1, n + 1)] = 1.0
    d = propagate @ diff
    return d @ fbm_covariance_matrix(p.h, grid) @ d.T


def fou_chaos_constants(p: FouParams, grid: TimeGrid) -> Tuple[float, float]:
    """(M, gamma) for the fOU instance.

    The interaction -b(y - <mu, y>) has Q-transform -b Q^{Y - E Y}; M bounds its
    second moment over time, and Gaussian transport for linear functionals gives gamma = 2M.
    """
    mq = q_transform_matrix(p.h, grid)
    var_q = np.einsum("ij,jk,ik->i", mq, mean_field_fou_covariance(p, grid), mq)
    M = p.b ** 2 * float(np.max(var_q))
    gamma = max(2.0 * M, 1e-12)
    logger.debug(f"fOU chaos constants: M={M:.4g}, gamma={gamma:.4g}")
    return M, gamma


def chaos_rate_table(p: FouParams, k: int, t: float, n_list: Sequence[int],
                     grid: Optional[TimeGrid] = None) -> pd.DataFrame:
    """fou_rate_limit with the chaos bound for each n appended"""
    grid = grid or TimeGrid(t, 128)
    M, gamma = fou_chaos_constants(p, grid)
    table = fou_rate_limit(p, k, t, n_list)
    table["chaos_bound"] = [chaos_bound(HierarchyInputs(gamma, M, 0.0, t, int(n), k)).value for n in table["n"]]
    return table
