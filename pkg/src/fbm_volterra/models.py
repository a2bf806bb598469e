"""Ready-made drifts for the experiments: constants, linear state feedback, fOU interactions, linear tree coupling."""

import numpy as np

from .sde_sim import DriftSpec


def _current(x: np.ndarray) -> np.ndarray:
    return x[:, -1, :]


def _neighbour_mean(x: np.ndarray, sample: np.ndarray) -> np.ndarray:
    """Mean of the current states of a measure argument, broadcast to x's batch"""
    mean = sample[..., -1, :].mean(axis=-2)
    return np.broadcast_to(mean, (x.shape[0], x.shape[2]))


def constant_drift(c: float) -> DriftSpec:
    return DriftSpec.single(
        lambda t, x: np.full((x.shape[0], x.shape[2]), float(c)),
        modulus=lambda t: np.full(np.shape(t), abs(float(c))),
        name=f"constant({c:g})",
    )


def linear_state_drift(coef: float = 1.0) -> DriftSpec:
    """b(t, x) = coef * x_t, Lipschitz modulus |coef|"""
    return DriftSpec.single(
        lambda t, x: coef * _current(x),
        modulus=lambda t: np.full(np.shape(t), abs(float(coef))),
        name=f"linear({coef:g})",
    )


def fou_particle_drift(a: float, b: float, n: int) -> DriftSpec:
    """dX^i = -(a X^i + (b/n) sum_j X^j) dt + dZ^i written as b0 + mean of pairwise terms"""
    return DriftSpec.separable_pairwise(
        phi=lambda t, x: np.zeros((x.shape[0], x.shape[2])),
        psi=lambda t, y: -b * (n - 1) / n * _current(y),
        b0=lambda t, x: -(a + b / n) * _current(x),
        name=f"fou(a={a:g}, b={b:g}, n={n})",
    )


def mean_field_fou_drift(a: float, b: float) -> DriftSpec:
    """Limit of the fOU system: b0(x) = -a x_t, b(x, mu) = -b <mu, y_t>"""
    return DriftSpec.measure(
        lambda t, x, mu: -b * _neighbour_mean(x, mu),
        b0=lambda t, x: -a * _current(x),
        name=f"mean-field-fou(a={a:g}, b={b:g})",
    )


def linear_tree_drift(a: float, c: float) -> DriftSpec:
    """b0(x) = -a x_t and b(x, mu) = c <mu, y_t> over the neighbours"""
    return DriftSpec.measure(
        lambda t, x, mu: c * _neighbour_mean(x, mu),
        b0=lambda t, x: -a * _current(x),
        name=f"linear-tree(a={a:g}, c={c:g})",
    )
