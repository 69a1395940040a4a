"""Renormalized mutual information between data and a deterministic feature.

``value = H(y) - < ln sqrt det(J Sigma J^T) >_x`` where ``J`` is the feature
Jacobian and ``Sigma`` the noise metric (identity by default).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .entropy import (
    GridPolicy,
    GridSpec,
    entropy_of_binned,
    kde_binned_density,
    pairwise_mi,
    resolve_grid,
)
from .features import Feature, Stacked

DET_FLOOR = 1e-300
# relative floor for det(G) against the product of its diagonal (K = 2)
REL_DET_FLOOR = 1e-12

_POOLED_TARGET = 200_000


class DegenerateFeatureError(ArithmeticError):
    """The Jacobian Gram matrix is singular at some sample."""

    def __init__(self, index: int, message: str | None = None):
        self.index = index
        super().__init__(message or f"degenerate feature Jacobian at sample {index}")


def as_batch(data) -> np.ndarray:
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 1:
        raise ValueError(f"a sample batch needs shape (n>=2, N>=1), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("sample batch contains non-finite entries")
    return x


@dataclass(frozen=True)
class RmiEstimate:
    entropy_term: float
    jacobian_term: float
    value: float
    grid: GridSpec | None = None

    @classmethod
    def from_terms(cls, entropy_term, jacobian_term, grid=None):
        return cls(float(entropy_term), float(jacobian_term),
                   float(entropy_term - jacobian_term), grid)


class NoiseMetric:
    """Covariance of the regularizing input noise: identity, constant, or position dependent."""

    def __init__(self, kind="identity", matrix=None, fn=None):
        self.kind = kind
        self.matrix = None if matrix is None else np.asarray(matrix, dtype=float)
        self.fn = fn
        if kind == "constant":
            _check_spd(self.matrix[None])

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def constant(cls, matrix):
        return cls("constant", matrix=matrix)

    @classmethod
    def position_dependent(cls, fn):
        """``fn`` maps an (n, N) batch to an (n, N, N) stack of SPD matrices."""
        return cls("position", fn=fn)

    def matrices(self, x):
        if self.kind == "identity":
            return None
        if self.kind == "constant":
            if self.matrix.shape != (x.shape[1], x.shape[1]):
                raise ValueError("metric dimension does not match the data")
            return self.matrix
        sig = np.asarray(self.fn(x), dtype=float)
        if sig.shape != (x.shape[0], x.shape[1], x.shape[1]):
            raise ValueError("position-dependent metric returned the wrong shape")
        _check_spd(sig)
        return sig


def _check_spd(mats, tol=1e-12):
    if not np.allclose(mats, np.swapaxes(mats, -1, -2), rtol=1e-10, atol=1e-12):
        raise ValueError("noise metric is not symmetric")
    if np.any(np.linalg.eigvalsh(mats) <= tol):
        raise ValueError("noise metric is not positive definite")


def gram_log_det(jac: np.ndarray, sigma=None) -> np.ndarray:
    """Per-sample ``ln det(J Sigma J^T)``; raises on singular Gram matrices."""
    if sigma is None:
        g = jac @ np.swapaxes(jac, 1, 2)
    else:
        g = jac @ sigma @ np.swapaxes(jac, 1, 2)
    k = g.shape[1]
    if k == 1:
        det = g[:, 0, 0]
        scale = det
    elif k == 2:
        det = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]
        scale = g[:, 0, 0] * g[:, 1, 1]
    else:
        raise ValueError("only K = 1 or 2 features are supported")
    bad = (det <= DET_FLOOR) | (det <= REL_DET_FLOOR * scale)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise DegenerateFeatureError(i, f"det(J J^T) = {det[i]:.3g} at sample {i}")
    return np.log(det)


def jacobian_penalty(batch, f: Feature, metric: NoiseMetric | None = None) -> float:
    x = as_batch(batch)
    if f.input_dim != x.shape[1]:
        raise ValueError(f"feature expects {f.input_dim} dims, batch has {x.shape[1]}")
    sigma = None if metric is None else metric.matrices(x)
    return float(np.mean(0.5 * gram_log_det(f.jacobian(x), sigma)))


def compute_rmi(batch, f: Feature, grid=None, metric: NoiseMetric | None = None) -> RmiEstimate:
    """Histogram-KDE entropy of ``f(x)`` minus the Jacobian penalty.

    ``grid`` is a fixed ``GridSpec`` or a ``GridPolicy`` fitted to the
    feature values (default: K-dependent bins and kernel widths).
    """
    x = as_batch(batch)
    penalty = jacobian_penalty(x, f, metric)
    y = f.value(x)
    g = resolve_grid(grid, y)
    h = entropy_of_binned(kde_binned_density(y, g))
    return RmiEstimate.from_terms(h, penalty, g)


def gaussian_entropy(var, k=1) -> float:
    """Entropy of a K-dim isotropic Gaussian with per-axis variance ``var``."""
    return 0.5 * k * float(np.log(2.0 * np.pi * np.e * var))


@dataclass(frozen=True)
class NoisyEstimate:
    """Monte-Carlo estimate of ``I(x, y_noisy) + H_eps``."""

    value: float
    mutual_information: float
    noise_entropy: float
    marginal_entropy: float
    conditional_entropy: float
    sparse_bins: bool = False

    def __float__(self):
        return self.value


def _noisy_mi(x, f, epsilon, n_noise_draws, grid, rng, where):
    """``I(x, y)`` as ``H(y) - <H(y | x_i)>`` with ``n_noise_draws`` draws per ``x_i``.

    The pooled marginal and every conditional are estimated with the same
    binned-KDE estimator; conditionals use grids fitted row by row with
    ``n_noise_draws // 10`` bins, where the estimator's small-sample bias
    is negligible.
    """
    n, n_dims = x.shape
    lam_shape = (n, n_noise_draws, n_dims if where == "input" else 1)
    lam = rng.standard_normal(lam_shape)
    if where == "input":
        y = f.value((x[:, None, :] + epsilon * lam).reshape(-1, n_dims))
        y = y.reshape(n, n_noise_draws)
    else:
        y = f.value(x)[:, 0][:, None] + epsilon * lam[:, :, 0]
    # the marginal only needs enough draws to smooth over the x sample
    m_pool = max(1, min(n_noise_draws, -(-_POOLED_TARGET // n)))
    pooled = y[:, :m_pool].reshape(-1, 1)
    g = resolve_grid(grid, pooled)
    h_marg = entropy_of_binned(kde_binned_density(pooled, g))
    cond_bins = max(2, min(g.n_bins[0], n_noise_draws // 10))
    sparse = pooled.shape[0] / g.n_bins[0] < 5 or n_noise_draws / cond_bins < 5
    h_cond = _row_entropies(y, cond_bins, g.s[0]).mean()
    return h_marg - h_cond, h_marg, float(h_cond), sparse


def _row_entropies(y: np.ndarray, n_bins: int, s: float, chunk=64) -> np.ndarray:
    """Binned-KDE entropy of every row of ``y``, each on its own padded grid."""
    from scipy.special import ndtr

    out = np.empty(y.shape[0])
    for start in range(0, y.shape[0], chunk):
        rows = y[start:start + chunk]
        lo = rows.min(axis=1)
        hi = rows.max(axis=1)
        span = hi - lo
        span = np.where(span > 0, span, 1.0)
        lo = lo - 0.1 * span
        hi = hi + 0.1 * span
        width = (hi - lo) / n_bins
        edges = lo[:, None] + width[:, None] * np.arange(1, n_bins)[None, :]
        u = (edges[:, None, :] - rows[:, :, None]) / (s * width)[:, None, None]
        cdf = ndtr(u).mean(axis=1)
        zeros = np.zeros((len(rows), 1))
        p = np.diff(np.hstack([zeros, cdf, zeros + 1.0]), axis=1)
        dens = p / width[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log(dens), 0.0)
        out[start:start + chunk] = -terms.sum(axis=1)
    return out


def _check_noisy_inputs(x, f, epsilon):
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if x.shape[1] > 2 or f.output_dim != 1:
        raise ValueError("noisy estimates are limited to N <= 2 inputs and K = 1 features")


def compute_rmi_epsilon(batch, f: Feature, epsilon: float, n_noise_draws: int = 500,
                        grid=None, seed=0) -> NoisyEstimate:
    """Noise-regularized RMI: ``I(x, f(x + eps*lambda)) + K*H_eps``.

    Converges to ``compute_rmi`` as ``epsilon -> 0``.
    """
    x = as_batch(batch)
    _check_noisy_inputs(x, f, epsilon)
    rng = np.random.default_rng(seed)
    mi, h_marg, h_cond, sparse = _noisy_mi(x, f, epsilon, n_noise_draws, grid, rng, "input")
    h_eps = gaussian_entropy(epsilon ** 2)
    if sparse:
        warnings.warn("fewer than 5 samples per bin on average; noisy MI estimate is unreliable",
                      RuntimeWarning, stacklevel=2)
    return NoisyEstimate(mi + h_eps, mi, h_eps, h_marg, h_cond, sparse)


@dataclass(frozen=True)
class InequalityCheck:
    lhs_joint: float
    rhs: float
    gap: float
    rmi_1: float
    rmi_2: float
    mi_12: float


def inequality_gap(batch, f1: Feature, f2: Feature, grid=None, marginal_grid=None) -> InequalityCheck:
    """Both sides of ``I~(x,(y1,y2)) >= I~(x,y1) + I~(x,y2) - I(y1,y2)``.

    ``grid`` sizes the joint 2D histogram; ``I(y1, y2)`` is binned on the
    same per-axis grids so its smoothing matches the joint estimate.
    """
    x = as_batch(batch)
    if f1.output_dim != 1 or f2.output_dim != 1:
        raise ValueError("inequality_gap expects two scalar features")
    joint = Stacked(f1, f2)
    lhs = compute_rmi(x, joint, grid)
    r1 = compute_rmi(x, f1, marginal_grid).value
    r2 = compute_rmi(x, f2, marginal_grid).value
    g = lhs.grid
    y = joint.value(x)
    mi = pairwise_mi(y[:, :1], y[:, 1:], g.axis(0), g.axis(1))
    rhs = r1 + r2 - mi
    return InequalityCheck(lhs.value, rhs, lhs.value - rhs, r1, r2, mi)


@dataclass(frozen=True)
class InformationLoss:
    rmi: float
    reconstructed: float
    entropy: float
    mi_input_noise: float
    mi_output_noise: float


def information_loss_identity(batch, f: Feature, epsilon: float, grid=None,
                              n_noise_draws: int = 500, seed=0) -> InformationLoss:
    """RMI rebuilt from the gap between input-noise and output-noise mutual informations."""
    x = as_batch(batch)
    _check_noisy_inputs(x, f, epsilon)
    est = compute_rmi(x, f, grid)
    mi_in = _noisy_mi(x, f, epsilon, n_noise_draws, None, np.random.default_rng(seed), "input")[0]
    mi_out = _noisy_mi(x, f, epsilon, n_noise_draws, None, np.random.default_rng(seed), "output")[0]
    return InformationLoss(est.value, float(est.entropy_term + mi_in - mi_out),
                           est.entropy_term, float(mi_in), float(mi_out))

