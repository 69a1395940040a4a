"""Kernel-smoothed histogram estimates of low-dimensional feature densities.

Every sample spreads a Gaussian kernel of standard deviation ``s * dy`` over a
regular grid; the mass each bin receives is an exact difference of normal
CDFs.  Kernel tails beyond the grid are folded into the two end bins so the
binned probabilities always sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

# Defaults for 1D and 2D features: bins per axis and kernel width in bins.
DEFAULT_BINS = {1: 180, 2: 100}
DEFAULT_KERNEL_WIDTH = {1: 1.0, 2: 2.0}
DEFAULT_PADDING = 0.1

KL_FLOOR = -0.05

_CHUNK = 8192
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class GridError(ValueError):
    """Raised when feature values do not fit the histogram grid."""


def _per_axis(value, ndim, cast):
    arr = np.atleast_1d(np.asarray(value))
    if arr.size == 1 and ndim > 1:
        arr = np.repeat(arr, ndim)
    return tuple(cast(v) for v in arr)


@dataclass(frozen=True)
class GridSpec:
    """Regular histogram grid with per-axis bounds and bin counts.

    ``s`` is the kernel standard deviation measured in bin widths.
    """

    lo: tuple
    hi: tuple
    n_bins: tuple
    s: tuple = (1.0,)

    def __post_init__(self):
        lo = _per_axis(self.lo, 1, float)
        ndim = len(lo)
        hi = _per_axis(self.hi, ndim, float)
        n_bins = _per_axis(self.n_bins, ndim, int)
        s = _per_axis(self.s, ndim, float)
        if not (len(hi) == len(n_bins) == len(s) == ndim):
            raise ValueError("grid axes have inconsistent lengths")
        if ndim not in (1, 2):
            raise ValueError(f"grids must be 1D or 2D, got {ndim} axes")
        for a, b, k, w in zip(lo, hi, n_bins, s):
            if not (np.isfinite(a) and np.isfinite(b) and a < b):
                raise ValueError(f"invalid grid bounds [{a}, {b}]")
            if k < 2:
                raise ValueError(f"need at least 2 bins per axis, got {k}")
            if not w > 0:
                raise ValueError(f"kernel width factor must be positive, got {w}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n_bins", n_bins)
        object.__setattr__(self, "s", s)

    @property
    def ndim(self) -> int:
        return len(self.lo)

    @property
    def widths(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / np.array(self.n_bins)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    def axis(self, i: int) -> "GridSpec":
        return GridSpec(self.lo[i], self.hi[i], self.n_bins[i], self.s[i])

    def centers(self, i: int = 0) -> np.ndarray:
        w = (self.hi[i] - self.lo[i]) / self.n_bins[i]
        return self.lo[i] + w * (np.arange(self.n_bins[i]) + 0.5)

    @classmethod
    def product(cls, *grids: "GridSpec") -> "GridSpec":
        axes = [g.axis(i) for g in grids for i in range(g.ndim)]
        return cls(
            tuple(a.lo[0] for a in axes),
            tuple(a.hi[0] for a in axes),
            tuple(a.n_bins[0] for a in axes),
            tuple(a.s[0] for a in axes),
        )

    @classmethod
    def fit(cls, values, n_bins=None, s=None, padding=DEFAULT_PADDING) -> "GridSpec":
        """Bounds ``[min - padding*range, max + padding*range]`` per axis."""
        return GridPolicy(n_bins, s, padding).fit(values)

    def as_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi),
                "n_bins": list(self.n_bins), "s": list(self.s)}


@dataclass(frozen=True)
class GridPolicy:
    """Recipe for sizing a grid to the data; ``None`` means the K-dependent default."""

    n_bins: int | None = None
    s: float | None = None
    padding: float = DEFAULT_PADDING

    def fit(self, values) -> GridSpec:
        values = _as_values(values)
        k = values.shape[1]
        if k not in (1, 2):
            raise ValueError(f"only 1D and 2D features are supported, got K={k}")
        n_bins = self.n_bins if self.n_bins is not None else DEFAULT_BINS[k]
        s = self.s if self.s is not None else DEFAULT_KERNEL_WIDTH[k]
        vmin = values.min(axis=0)
        vmax = values.max(axis=0)
        span = vmax - vmin
        # a constant axis still needs a finite grid
        span = np.where(span > 0, span, np.maximum(np.abs(vmax), 1.0))
        return GridSpec(tuple(vmin - self.padding * span),
                        tuple(vmax + self.padding * span), n_bins, s)


def resolve_grid(grid, values) -> GridSpec:
    if isinstance(grid, GridSpec):
        return grid
    if grid is None:
        grid = GridPolicy()
    return grid.fit(values)


@dataclass
class BinnedDensity:
    """Bin probabilities (not densities) on ``grid``; shape equals ``grid.n_bins``."""

    probabilities: np.ndarray
    grid: GridSpec

    @property
    def density(self) -> np.ndarray:
        return self.probabilities / self.grid.cell_volume


def _as_values(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.ndim != 2 or v.shape[0] < 1:
        raise ValueError(f"expected an (n, K) array of feature values, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("feature values must be finite")
    return v


def _check_inside(values: np.ndarray, grid: GridSpec) -> None:
    if values.shape[1] != grid.ndim:
        raise GridError(f"values have {values.shape[1]} columns, grid has {grid.ndim} axes")
    lo = np.array(grid.lo)
    hi = np.array(grid.hi)
    bad = np.any((values < lo) | (values > hi), axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise GridError(f"sample {i} with value {values[i].tolist()} lies outside the grid "
                        f"[{grid.lo}, {grid.hi}]")


def _axis_mass(v: np.ndarray, grid: GridSpec, i: int, derivative: bool = False):
    """Kernel mass of each sample in each bin along axis ``i``.

    Returns an (n, n_bins) array, and with ``derivative`` also its derivative
    with respect to the sample position.
    """
    lo, hi, k, s = grid.lo[i], grid.hi[i], grid.n_bins[i], grid.s[i]
    width = (hi - lo) / k
    h = s * width
    inner_edges = lo + width * np.arange(1, k)
    u = (inner_edges[None, :] - v[:, None]) / h
    n = v.shape[0]
    cdf = np.empty((n, k + 1))
    cdf[:, 0] = 0.0
    cdf[:, -1] = 1.0
    cdf[:, 1:-1] = ndtr(u)
    mass = np.diff(cdf, axis=1)
    if not derivative:
        return mass
    pdf = np.zeros((n, k + 1))
    pdf[:, 1:-1] = np.exp(-0.5 * u * u) * (_INV_SQRT_2PI / h)
    # d/dv of cdf(edge) is -pdf(edge)
    dmass = -np.diff(pdf, axis=1)
    return mass, dmass


def _accumulate(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    n = values.shape[0]
    if grid.ndim == 1:
        total = np.zeros(grid.n_bins[0])
        for start in range(0, n, _CHUNK):
            total += _axis_mass(values[start:start + _CHUNK, 0], grid, 0).sum(axis=0)
    else:
        total = np.zeros(grid.n_bins)
        for start in range(0, n, _CHUNK):
            chunk = values[start:start + _CHUNK]
            a1 = _axis_mass(chunk[:, 0], grid, 0)
            a2 = _axis_mass(chunk[:, 1], grid, 1)
            total += a1.T @ a2
    return total / n


def _canonical_order(values: np.ndarray) -> np.ndarray:
    # sorting makes the floating-point reduction independent of sample order
    if values.shape[1] == 1:
        return values[np.argsort(values[:, 0], kind="stable")]
    return values[np.lexsort(values.T[::-1])]


def kde_binned_density(values, grid: GridSpec) -> BinnedDensity:
    values = _as_values(values)
    _check_inside(values, grid)
    probs = _accumulate(_canonical_order(values), grid)
    return BinnedDensity(probs, grid)


def entropy_of_binned(d: BinnedDensity) -> float:
    """Differential entropy in nats, ``-sum p ln(p / dy)`` over occupied bins."""
    p = d.probabilities.ravel()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p / d.grid.cell_volume)))


def entropy(values, grid=None) -> float:
    values = _as_values(values)
    return entropy_of_binned(kde_binned_density(values, resolve_grid(grid, values)))


def entropy_and_grad(values, grid: GridSpec):
    """Entropy estimate and its gradient with respect to every sample position.

    The grid is held fixed; only the kernel centres move.  Returns ``(H, dH)``
    with ``dH`` of the same (n, K) shape as ``values``.
    """
    values = _as_values(values)
    _check_inside(values, grid)
    n = values.shape[0]
    vol = grid.cell_volume
    if grid.ndim == 1:
        mass, dmass = _axis_mass(values[:, 0], grid, 0, derivative=True)
        p = mass.sum(axis=0) / n
        logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0) / vol), 0.0)
        h = float(-np.sum(p * logp))
        g = -(logp + 1.0) * (p > 0)
        grad = (dmass @ g)[:, None] / n
        return h, grad
    a1, d1 = _axis_mass(values[:, 0], grid, 0, derivative=True)
    a2, d2 = _axis_mass(values[:, 1], grid, 1, derivative=True)
    p = (a1.T @ a2) / n
    occupied = p > 0
    logp = np.where(occupied, np.log(np.where(occupied, p, 1.0) / vol), 0.0)
    h = float(-np.sum(p * logp))
    g = -(logp + 1.0) * occupied
    grad = np.empty((n, 2))
    grad[:, 0] = np.einsum("nk,nk->n", d1, a2 @ g.T) / n
    grad[:, 1] = np.einsum("nl,nl->n", d2, a1 @ g) / n
    return h, grad


def add_bound_gradient(values, grid: GridSpec, dh: np.ndarray, padding: float) -> np.ndarray:
    """Extend a fixed-grid gradient ``dh`` to a grid fitted by ``GridPolicy``.

    Fitted bounds are ``min - p*range`` and ``max + p*range`` per axis, so only
    the extreme samples pick up extra terms.  Bin masses depend on positions
    in bin units and ``H`` carries ``+ln(width)``; that fixes ``dH/dlo`` and
    ``dH/dhi``.  The result makes ``H`` exactly shift-equivariant in gradient
    as well as value: ``sum(dH) = 0`` and ``sum(dH * v) = 1`` per axis.
    """
    values = _as_values(values)
    out = np.array(dh, dtype=float, copy=True)
    for i in range(values.shape[1]):
        v, g = values[:, i], out[:, i].copy()
        lo, hi = grid.lo[i], grid.hi[i]
        span = hi - lo
        t = (v - lo) / span
        d_lo = -np.sum(g * (1.0 - t)) - 1.0 / span
        d_hi = -np.sum(g * t) + 1.0 / span
        a, b = int(np.argmin(v)), int(np.argmax(v))
        out[a, i] += (1.0 + padding) * d_lo - padding * d_hi
        out[b, i] += (1.0 + padding) * d_hi - padding * d_lo
    return out


def kl_to_gaussian(values, sigma_target: float, grid=None) -> float:
    """KL divergence from the binned feature density to an isotropic zero-mean Gaussian.

    Clipped below at the estimator noise floor ``KL_FLOOR``.
    """
    if not sigma_target > 0:
        raise ValueError("sigma_target must be positive")
    values = _as_values(values)
    k = values.shape[1]
    h = entropy(values, grid)
    kl = (-h + np.mean(np.sum(values ** 2, axis=1)) / (2.0 * sigma_target ** 2)
          + 0.5 * k * np.log(2.0 * np.pi * sigma_target ** 2))
    return float(max(kl, KL_FLOOR))


def pairwise_mi(y1, y2, grid1=None, grid2=None) -> float:
    """Mutual information of two scalar features from their binned joint density.

    The marginals are binned on the same per-axis grids as the joint, so the
    estimate is the exact mutual information of the binned distribution.
    """
    y1 = _as_values(y1)
    y2 = _as_values(y2)
    if y1.shape != y2.shape or y1.shape[1] != 1:
        raise ValueError("pairwise_mi expects two 1D samples of equal length")
    g1 = resolve_grid(grid1, y1)
    g2 = resolve_grid(grid2, y2)
    joint = GridSpec.product(g1, g2)
    h1 = entropy_of_binned(kde_binned_density(y1, g1))
    h2 = entropy_of_binned(kde_binned_density(y2, g2))
    h12 = entropy_of_binned(kde_binned_density(np.hstack([y1, y2]), joint))
    return float(max(h1 + h2 - h12, 0.0))
