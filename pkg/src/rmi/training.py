"""Gradient-based maximization of RMI for neural features.

The minimized cost is

    C = -I~(x, f(x)) + A exp(-n / tau) <||J||_F> + B KL(P_y || N(0, sigma^2))

with the histogram grid refitted to each batch.  With ``whiten`` a 2D
feature's entropy is binned in the batch's decorrelated frame,
``H(y) = H(W (y - mu)) - ln|det W|``.  Gradients follow the batch-fitted grid
bounds and frame, so they are exact for the estimate being minimized; a grid
or frame passed in by the caller is a constant.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .core import DegenerateFeatureError, gram_log_det
from .entropy import GridPolicy, GridSpec, add_bound_gradient, entropy_and_grad
from .features import Mlp

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "rmsprop", "adam")
MAX_DEGENERATE_STEPS = 10


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    optimizer: str = "adam"
    learning_rate: float = 5e-3
    batch_size: int = 100
    steps: int = 5000
    reg_A: float = 0.0
    reg_tau: float = 1000.0
    reg_B: float = 0.0
    sigma_target: float = 1.0
    n_bins: int | None = None
    kernel_width: float | None = None
    grid_padding: float = 0.1
    seed: int = 0
    # network arithmetic; cost terms are always accumulated in float64
    dtype: str = "float64"
    whiten: bool = False

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0 or self.batch_size < 2:
            raise ValueError("need steps >= 0 and batch_size >= 2")
        if self.reg_A > 0 and not self.reg_tau > 0:
            raise ValueError("reg_tau must be positive when reg_A > 0")
        if self.reg_B > 0 and not self.sigma_target > 0:
            raise ValueError("sigma_target must be positive when reg_B > 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def grid_policy(self) -> GridPolicy:
        return GridPolicy(self.n_bins, self.kernel_width, self.grid_padding)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


# Reference layouts and hyperparameters per system.
PRESETS = {
    "spiral": dict(sizes=[2, 30, 30, 1], activation="tanh",
                   config=dict(optimizer="adam", learning_rate=5e-3, batch_size=100,
                               steps=30_000, reg_A=0.0, reg_B=5.0)),
    "wavepacket": dict(sizes=[100, 70, 70, 1], activation="tanh",
                       config=dict(optimizer="adam", learning_rate=5e-3, batch_size=700,
                                   steps=15_000, reg_A=100.0, reg_tau=1000.0, reg_B=5.0)),
    "drop": dict(sizes=[120, 800, 2], activation="relu",
                 config=dict(optimizer="rmsprop", learning_rate=5e-3, batch_size=5000,
                             steps=30_000, reg_A=15.0, reg_tau=500.0, reg_B=5e-2,
                             dtype="float32")),
}


# Shorter runs for a single CPU core.  The drop net sees batches of 2000
# instead of 5000; at that size lr 5e-3 only adds gradient noise, so it
# trains at 1e-3.
DESK_SCALE = {
    "spiral": dict(steps=5000),
    "wavepacket": dict(steps=5000),
    "drop": dict(batch_size=2000, steps=10_000, learning_rate=1e-3, whiten=True),
}


def preset(name: str, desk: bool = False, **overrides):
    """``(sizes, activation, TrainingConfig)`` for a named system.

    ``desk`` applies the reduced ``DESK_SCALE`` settings before ``overrides``.
    """
    p = PRESETS[name]
    cfg = dict(p["config"])
    if desk:
        cfg.update(DESK_SCALE[name])
    cfg.update(overrides)
    return list(p["sizes"]), p["activation"], TrainingConfig(**cfg)


@dataclass
class CostTerms:
    cost: float
    rmi: float
    entropy: float
    penalty: float
    grad_pen: float
    kl: float
    grid: GridSpec
    frame: Frame | None = None


def schedule_factor(step, cfg: TrainingConfig) -> float:
    if cfg.reg_A == 0:
        return 0.0
    return cfg.reg_A * math.exp(-step / cfg.reg_tau)


def _gram_solve(jac: np.ndarray) -> np.ndarray:
    """``(J J^T)^-1 J`` per sample, in closed form for K <= 2."""
    g = jac @ np.swapaxes(jac, 1, 2)
    if g.shape[1] == 1:
        return jac / g
    a, b, d = g[:, 0, 0], g[:, 0, 1], g[:, 1, 1]
    det = (a * d - b * b)[:, None]
    j0, j1 = jac[:, 0], jac[:, 1]
    return np.stack([(d[:, None] * j0 - b[:, None] * j1) / det,
                     (a[:, None] * j1 - b[:, None] * j0) / det], axis=1)


class Frame(NamedTuple):
    mu: np.ndarray
    w: np.ndarray
    log_det_w: float
    evals: np.ndarray
    evecs: np.ndarray


def whitening_frame(y: np.ndarray) -> Frame:
    """Batch mean and ``W = C^-1/2`` for the batch covariance ``C``."""
    mu = y.mean(axis=0)
    d = y - mu
    evals, evecs = np.linalg.eigh(d.T @ d / len(y))
    if evals[0] <= 1e-12 * evals[-1]:
        raise DegenerateFeatureError(0, "feature outputs are collinear over the batch")
    w = (evecs / np.sqrt(evals)) @ evecs.T
    return Frame(mu, w, float(-0.5 * np.sum(np.log(evals))), evals, evecs)


def _frame_gradient(y: np.ndarray, frame: Frame, gv: np.ndarray) -> np.ndarray:
    """dH/dy for ``H = H_v(W (y - mu)) - ln|det W|`` with ``mu`` and ``W`` fitted to ``y``.

    ``gv`` is dH_v/dv.  Uses ``dW = -W dS W`` with ``S dS + dS S = dC`` for
    ``S = C^1/2``, solved in the eigenbasis of ``C``.
    """
    n = len(y)
    d = y - frame.mu
    w, vecs = frame.w, frame.evecs
    root = np.sqrt(frame.evals)
    a = vecs.T @ (w @ (gv.T @ d) @ w) @ vecs
    p = vecs @ (a / (root[:, None] + root[None, :])) @ vecs.T
    # dH/dC, symmetric
    dc = -0.5 * (p + p.T) + 0.5 * (w @ w)
    # the mean enters every v, and C through sum(d) = 0 only
    return gv @ w - (gv.sum(axis=0) @ w) / n + (2.0 / n) * d @ dc


def total_cost(model: Mlp, batch, step: int, cfg: TrainingConfig, grid: GridSpec | None = None,
               with_grad: bool = False, frame: Frame | None = None):
    """Cost terms for one batch, and with ``with_grad`` the parameter gradients.

    ``grid`` and ``frame`` default to fits on this batch.  Returns
    ``CostTerms`` or ``(CostTerms, grads)``.
    """
    x = np.asarray(batch, dtype=model.dtype)
    cache = model.forward(x, jacobian=True)
    y = np.asarray(cache["acts"][-1], dtype=float)
    jac = np.asarray(cache["jac"], dtype=float)
    n, k = y.shape
    logdet = gram_log_det(jac)
    penalty = float(np.mean(0.5 * logdet))
    binned, fit_frame = y, False
    if cfg.whiten and k == 2:
        if frame is None:
            frame, fit_frame = whitening_frame(y), True
        binned = (y - frame.mu) @ frame.w
    else:
        frame = None
    fit_grid = grid is None
    if fit_grid:
        grid = cfg.grid_policy.fit(binned)
    h, dh = entropy_and_grad(binned, grid)
    if with_grad and fit_grid:
        dh = add_bound_gradient(binned, grid, dh, cfg.grid_padding)
    if frame is not None:
        h = h - frame.log_det_w
        if with_grad:
            # W is symmetric
            dh = _frame_gradient(y, frame, dh) if fit_frame else dh @ frame.w
    rmi = h - penalty

    frob = np.sqrt(np.sum(jac * jac, axis=(1, 2)))
    factor = schedule_factor(step, cfg)
    grad_pen = factor * float(np.mean(frob))
    sig2 = cfg.sigma_target ** 2
    kl = -h + float(np.mean(np.sum(y * y, axis=1))) / (2.0 * sig2) + 0.5 * k * math.log(2.0 * math.pi * sig2)
    cost = -rmi + grad_pen + cfg.reg_B * kl
    terms = CostTerms(cost, rmi, h, penalty, grad_pen, kl, grid, frame)
    if not with_grad:
        return terms

    dy = -(1.0 + cfg.reg_B) * dh
    if cfg.reg_B:
        dy = dy + cfg.reg_B * y / (sig2 * n)
    # d/dJ of 0.5 ln det(J J^T) is (J J^T)^-1 J
    djac = _gram_solve(jac) / n
    if factor:
        djac = djac + factor * jac / (frob[:, None, None] * n)
    grads, _ = model.backward(cache, dy=dy.astype(model.dtype), djac=djac.astype(model.dtype))
    return terms, grads


def cost_gradient(model: Mlp, batch, cfg: TrainingConfig, step: int = 0, grid=None, frame=None):
    """Gradient of the full cost with respect to every weight and bias."""
    return total_cost(model, batch, step, cfg, grid, with_grad=True, frame=frame)[1]


# -- optimizers -------------------------------------------------------------

class Optimizer:
    def __init__(self, lr):
        self.lr = lr
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient at optimizer step {self.t}")
        self._update(params, grads)

    def _update(self, params, grads):
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


class RMSprop(Optimizer):
    def __init__(self, lr, decay=0.9, eps=1e-8):
        super().__init__(lr)
        self.decay, self.eps = decay, eps
        self.v = None

    def _update(self, params, grads):
        if self.v is None:
            self.v = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.v):
            v *= self.decay
            v += (1.0 - self.decay) * g * g
            p -= self.lr * g / (np.sqrt(v) + self.eps)


class Adam(Optimizer):
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        super().__init__(lr)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = self.v = None

    def _update(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, lr: float) -> Optimizer:
    return {"sgd": SGD, "rmsprop": RMSprop, "adam": Adam}[kind](lr)


# -- training loop ------------------------------------------------------------

@dataclass
class TrainingHistory:
    step: list = field(default_factory=list)
    rmi: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    grad_pen: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    grid_lo: list = field(default_factory=list)
    grid_hi: list = field(default_factory=list)
    degenerate: list = field(default_factory=list)

    def __len__(self):
        return len(self.step)

    def record(self, step, terms: CostTerms | None, k: int):
        self.step.append(step)
        if terms is None:
            nan = float("nan")
            self.rmi.append(nan)
            self.cost.append(nan)
            self.grad_pen.append(nan)
            self.kl.append(nan)
            self.grid_lo.append((nan,) * k)
            self.grid_hi.append((nan,) * k)
            self.degenerate.append(True)
            return
        self.rmi.append(terms.rmi)
        self.cost.append(terms.cost)
        self.grad_pen.append(terms.grad_pen)
        self.kl.append(terms.kl)
        self.grid_lo.append(tuple(terms.grid.lo))
        self.grid_hi.append(tuple(terms.grid.hi))
        self.degenerate.append(False)

    def header(self) -> list[str]:
        k = len(self.grid_lo[0]) if self.grid_lo else 1
        head = ["step", "rmi", "cost", "grad_pen", "kl"]
        if k == 1:
            return head + ["grid_lo", "grid_hi"]
        for i in range(1, k + 1):
            head += [f"grid_lo_{i}", f"grid_hi_{i}"]
        return head

    def rows(self):
        for i in range(len(self.step)):
            row = [self.step[i], self.rmi[i], self.cost[i], self.grad_pen[i], self.kl[i]]
            for lo, hi in zip(self.grid_lo[i], self.grid_hi[i]):
                row += [lo, hi]
            yield row

    def to_csv(self, path, comment: str | None = None):
        with open(path, "w", newline="") as fh:
            if comment:
                for line in comment.splitlines():
                    fh.write(f"# {line}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.header())
            for row in self.rows():
                writer.writerow([r if isinstance(r, int) else repr(float(r)) for r in row])

    def smoothed_rmi(self, window=200) -> np.ndarray:
        r = np.asarray(self.rmi, dtype=float)
        if len(r) < window:
            return np.array([np.nanmean(r)]) if len(r) else r
        kernel = np.ones(window) / window
        return np.convolve(r, kernel, mode="valid")


def read_history(path) -> dict:
    with open(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    cols = {h: [] for h in header}
    for row in reader:
        for h, v in zip(header, row):
            cols[h].append(float(v))
    return {h: np.array(v) for h, v in cols.items()}


def batch_sampler(source):
    """Normalize a data source to ``draw(rng, n) -> (n, N) array``.

    A callable is used as a fresh-sample generator; an array is treated as a
    finite pool and sampled without replacement within each batch.
    """
    if callable(source):
        return source
    pool = np.asarray(source, dtype=float)

    def draw(rng, n):
        if n >= len(pool):
            return pool[rng.permutation(len(pool))]
        return pool[rng.choice(len(pool), size=n, replace=False)]
    return draw


def particle_shuffle_sampler(pool, dims: int = 2):
    """Pool sampler that also relabels particles at random in every sample.

    Rows of ``pool`` hold ``dims`` coordinates per particle.  For exchangeable
    particles a relabeled sample is an equally likely draw, so this stretches
    a finite pool without changing the distribution.
    """
    pool = np.asarray(pool, dtype=float)
    n_pool, width = pool.shape
    if width % dims:
        raise ValueError(f"row width {width} is not a multiple of {dims}")
    parts = pool.reshape(n_pool, width // dims, dims)

    def draw(rng, n):
        idx = rng.choice(n_pool, size=min(n, n_pool), replace=False)
        perm = np.argsort(rng.random((len(idx), parts.shape[1])), axis=1)
        return np.take_along_axis(parts[idx], perm[:, :, None], axis=1).reshape(len(idx), width)
    return draw


def train_feature(source, model, cfg: TrainingConfig, activation="tanh", callback=None):
    """Maximize RMI of an MLP feature.

    ``model`` is an ``Mlp`` or a list of layer sizes (initialized from the
    seed).  ``callback(step, terms, model, batch)`` sees the parameters that
    produced ``terms``, before the update.  Returns ``(model, history)``.
    """
    init_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    if not isinstance(model, Mlp):
        model = Mlp.init(list(model), activation, np.random.default_rng(init_seq))
    else:
        model = model.copy()
    history = TrainingHistory()
    if cfg.steps == 0:
        return model, history
    rng = np.random.default_rng(data_seq)
    draw = batch_sampler(source)
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    model = model.astype(cfg.dtype)
    params = model.parameters()
    k = model.output_dim
    streak = 0
    for step in range(cfg.steps):
        x = draw(rng, cfg.batch_size)
        try:
            terms, grads = total_cost(model, x, step, cfg, with_grad=True)
        except DegenerateFeatureError as err:
            streak += 1
            history.record(step, None, k)
            log.warning("step %d: %s", step, err)
            if streak > MAX_DEGENERATE_STEPS:
                raise TrainingAborted(
                    f"feature degenerate for {streak} consecutive steps (last at step {step}): {err}"
                ) from err
            continue
        streak = 0
        history.record(step, terms, k)
        if callback is not None:
            callback(step, terms, model, x)
        try:
            opt.step(params, grads)
        except FloatingPointError as err:
            raise TrainingAborted(f"step {step}: {err}") from err
    return model.astype(np.float64), history


def config_dict(cfg: TrainingConfig) -> dict:
    return asdict(cfg)
