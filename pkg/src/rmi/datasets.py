"""Seeded generators for the synthetic systems: spiral, wave packet, liquid drop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _sample_stream(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


# -- spiral ---------------------------------------------------------------

@dataclass
class SpiralConfig:
    covariance: tuple = ((0.64, -0.56), (-0.56, 1.0))
    alpha: float = 0.5

    def __post_init__(self):
        c = np.asarray(self.covariance, dtype=float)
        if c.shape != (2, 2) or not np.allclose(c, c.T) or np.any(np.linalg.eigvalsh(c) <= 0):
            raise ValueError("spiral covariance must be a 2x2 SPD matrix")


def spiral_twist(xp: np.ndarray, alpha: float) -> np.ndarray:
    """Rotate each point by ``alpha`` times its own radius."""
    r = np.hypot(xp[:, 0], xp[:, 1])
    c, s = np.cos(alpha * r), np.sin(alpha * r)
    return np.stack([xp[:, 0] * c - xp[:, 1] * s, xp[:, 0] * s + xp[:, 1] * c], axis=1)


def gen_spiral(n: int, cfg: SpiralConfig | None = None, seed=0) -> np.ndarray:
    cfg = cfg or SpiralConfig()
    if n < 1:
        raise ValueError("n must be positive")
    xp = _rng(seed).multivariate_normal(np.zeros(2), np.asarray(cfg.covariance), size=n)
    return spiral_twist(xp, cfg.alpha)


# -- wave packet ----------------------------------------------------------

@dataclass
class WavePacketConfig:
    n_sites: int = 100
    width: float = 9.0
    center_range: tuple = (30.0, 70.0)
    noise_std: float = 0.38

    def __post_init__(self):
        lo, hi = self.center_range
        if self.n_sites < 1 or not self.width > 0:
            raise ValueError("need n_sites >= 1 and width > 0")
        if not 1 <= lo <= hi <= self.n_sites:
            raise ValueError("center_range must lie within [1, n_sites]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def wave_packet_bump(centers: np.ndarray, cfg: WavePacketConfig) -> np.ndarray:
    j = np.arange(1, cfg.n_sites + 1, dtype=float)
    return np.exp(-((j[None, :] - centers[:, None]) ** 2) / cfg.width ** 2)


def gen_wave_packet(n: int, cfg: WavePacketConfig | None = None, seed=0, centers=None):
    """Field samples ``xi_j + exp(-(j - c)^2 / width^2)`` and their centres ``c``.

    ``centers`` forces the packet positions instead of drawing them.
    """
    cfg = cfg or WavePacketConfig()
    if n < 1:
        raise ValueError("n must be positive")
    rng = _rng(seed)
    if centers is None:
        centers = rng.uniform(cfg.center_range[0], cfg.center_range[1], size=n)
    else:
        centers = np.broadcast_to(np.asarray(centers, dtype=float), (n,)).copy()
    noise = rng.standard_normal((n, cfg.n_sites)) * cfg.noise_std
    return noise + wave_packet_bump(centers, cfg), centers


# -- liquid drop ----------------------------------------------------------

@dataclass
class DropConfig:
    radius: float = 1.0
    n_particles: int = 60
    exponent: int = 6
    d_eq: float = 0.27
    d_coll: float = 0.06
    wall_strength: float = 200.0
    therm_step: float = 1e-5
    temperature: float = 1e-3
    therm_steps: int = 2000
    deform_range: tuple = (0.0, 0.8)
    angle_range: tuple = (0.0, math.pi)
    # per-step displacement cap keeping the descent stable for close pairs
    max_step: float = 0.01
    # placement exclusion radius; below d_coll the capped potential cannot separate pairs
    min_separation: float = 0.06

    def __post_init__(self):
        if not 0 < self.d_coll < self.d_eq < self.radius:
            raise ValueError("need 0 < d_coll < d_eq < radius")
        if self.n_particles < 1 or self.exponent < 1 or self.therm_steps < 0:
            raise ValueError("invalid particle count, exponent or step count")
        if self.temperature < 0 or self.therm_step <= 0:
            raise ValueError("temperature must be >= 0 and therm_step > 0")


def ellipse_axes(deform: float, radius: float = 1.0) -> tuple[float, float]:
    """Semi-axes ``(R + dr, R^2 / (R + dr))``; the area stays ``pi R^2``."""
    a = radius + deform
    return a, radius * radius / a


def inside_ellipse(pos: np.ndarray, a: float, b: float, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    u = c * pos[..., 0] + s * pos[..., 1]
    v = -s * pos[..., 0] + c * pos[..., 1]
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def lj_potential(d, cfg: DropConfig | None = None):
    """Pair potential with a quadratic cap below ``d_coll``, continuous at the cap."""
    cfg = cfg or DropConfig()
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("pair distance must be positive")
    n = cfg.exponent
    ratio = cfg.d_eq / np.maximum(d, cfg.d_coll)
    outer = 0.5 * ratio ** (2 * n) - 0.5 * ratio ** n + 0.5
    rc = cfg.d_eq / cfg.d_coll
    inner = -(d ** 2) / cfg.d_coll ** 2 + 1.5 + 0.5 * rc ** (2 * n) - 0.5 * rc ** n
    out = np.where(d < cfg.d_coll, inner, outer)
    return out[()] if out.ndim == 0 else out


def drop_energy(pos: np.ndarray, a: float, b: float, theta: float, cfg: DropConfig | None = None) -> float:
    """Total pair plus boundary potential of one particle configuration."""
    cfg = cfg or DropConfig()
    diff = pos[:, None, :] - pos[None, :, :]
    d = np.sqrt(np.sum(diff ** 2, axis=-1))
    iu = np.triu_indices(len(pos), 1)
    pair = float(np.sum(lj_potential(d[iu], cfg)))
    outside = ~inside_ellipse(pos, a, b, theta)
    wall = float(cfg.wall_strength * np.sum(np.hypot(pos[outside, 0], pos[outside, 1])))
    return pair + wall


@njit(cache=True)
def _place(n_particles, a, b, c, s, min_sep, max_tries):
    pos = np.empty((n_particles, 2))
    min_sep2 = min_sep * min_sep
    for i in range(n_particles):
        placed = False
        for _ in range(max_tries):
            px = np.random.uniform(-a, a)
            py = np.random.uniform(-a, a)
            u = c * px + s * py
            v = -s * px + c * py
            if (u / a) ** 2 + (v / b) ** 2 > 1.0:
                continue
            ok = True
            for j in range(i):
                dx = px - pos[j, 0]
                dy = py - pos[j, 1]
                if dx * dx + dy * dy < min_sep2:
                    ok = False
                    break
            if ok:
                pos[i, 0] = px
                pos[i, 1] = py
                placed = True
                break
        if not placed:
            return pos, i
    return pos, -1


@njit(cache=True)
def _relax(pos, a, b, c, s, d_eq, d_coll, n_exp, wall, eta, temp, steps, max_step):
    n = pos.shape[0]
    grad = np.zeros((n, 2))
    noise_amp = math.sqrt(2.0 * eta * temp)
    d_eq2 = d_eq * d_eq
    d_coll2 = d_coll * d_coll
    half = n_exp // 2
    even = n_exp % 2 == 0
    for _ in range(steps):
        grad[:, :] = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                dx = pos[i, 0] - pos[j, 0]
                dy = pos[i, 1] - pos[j, 1]
                d2 = dx * dx + dy * dy
                if d2 >= d_coll2:
                    if even:
                        q = d_eq2 / d2
                        x = q
                        for _k in range(half - 1):
                            x *= q
                    else:
                        x = (d_eq / math.sqrt(d2)) ** n_exp
                    coef = -n_exp * x * (x - 0.5) / d2
                else:
                    coef = -2.0 / d_coll2
                grad[i, 0] += coef * dx
                grad[i, 1] += coef * dy
                grad[j, 0] -= coef * dx
                grad[j, 1] -= coef * dy
        for i in range(n):
            u = c * pos[i, 0] + s * pos[i, 1]
            v = -s * pos[i, 0] + c * pos[i, 1]
            if (u / a) ** 2 + (v / b) ** 2 > 1.0:
                r = math.sqrt(pos[i, 0] ** 2 + pos[i, 1] ** 2)
                if r > 0.0:
                    grad[i, 0] += wall * pos[i, 0] / r
                    grad[i, 1] += wall * pos[i, 1] / r
        for i in range(n):
            sx = eta * grad[i, 0]
            sy = eta * grad[i, 1]
            if max_step > 0.0:
                m = math.sqrt(sx * sx + sy * sy)
                if m > max_step:
                    sx *= max_step / m
                    sy *= max_step / m
            pos[i, 0] -= sx
            pos[i, 1] -= sy
            if noise_amp > 0.0:
                pos[i, 0] += noise_amp * np.random.standard_normal()
                pos[i, 1] += noise_amp * np.random.standard_normal()
    return pos


@njit(cache=True)
def _seed_numba(seed):
    np.random.seed(seed)


def _numba_seed(stream: np.random.SeedSequence) -> int:
    return int(stream.generate_state(1, dtype=np.uint32)[0])


def place_particles(deform, theta, cfg: DropConfig | None = None, seed=0, index=0):
    cfg = cfg or DropConfig()
    a, b = ellipse_axes(deform, cfg.radius)
    _seed_numba(_numba_seed(_sample_stream(seed, index)))
    pos, failed = _place(cfg.n_particles, a, b, math.cos(theta), math.sin(theta),
                         cfg.min_separation, 10_000)
    if failed >= 0:
        raise RuntimeError(f"could not place particle {failed} after 10000 tries")
    return pos


def relax_drop(pos, deform, theta, cfg: DropConfig | None = None, steps=None,
               temperature=None) -> np.ndarray:
    """Noisy gradient descent ``r <- r - eta grad V + sqrt(2 eta T) xi`` in place on a copy.

    Uses the numba random state, so seed it (``place_particles`` does) first.
    """
    cfg = cfg or DropConfig()
    a, b = ellipse_axes(deform, cfg.radius)
    steps = cfg.therm_steps if steps is None else steps
    temp = cfg.temperature if temperature is None else temperature
    return _relax(np.array(pos, dtype=float), a, b, math.cos(theta), math.sin(theta),
                  cfg.d_eq, cfg.d_coll, cfg.exponent, cfg.wall_strength, cfg.therm_step,
                  temp, steps, cfg.max_step)


def gen_liquid_drop(n: int, cfg: DropConfig | None = None, seed=0, progress=None):
    """Relaxed particle clouds, flattened to ``(x_1^(1), x_1^(2), x_2^(1), ...)``.

    Returns ``(X, labels)`` with labels ``(deform, theta)`` per sample.  Every
    sample draws from its own stream derived from ``(seed, index)``.
    """
    cfg = cfg or DropConfig()
    if n < 1:
        raise ValueError("n must be positive")
    out = np.empty((n, 2 * cfg.n_particles))
    labels = np.empty((n, 2))
    for i in range(n):
        rng = np.random.default_rng(_sample_stream(seed, i))
        deform = rng.uniform(*cfg.deform_range)
        theta = rng.uniform(*cfg.angle_range)
        pos = place_particles(deform, theta, cfg, seed, i)
        pos = relax_drop(pos, deform, theta, cfg)
        out[i] = pos.ravel()
        labels[i] = deform, theta
        if progress is not None:
            progress(i + 1, n)
    return out, labels


# -- files ----------------------------------------------------------------

GENERATORS = ("spiral", "wavepacket", "drop")


def generate(system: str, n: int, seed: int, params: dict | None = None):
    """Dispatch by name; returns ``(X, labels or None, resolved config dict)``."""
    params = dict(params or {})
    if system == "spiral":
        cfg = SpiralConfig(**params)
        return gen_spiral(n, cfg, seed), None, asdict(cfg)
    if system == "wavepacket":
        cfg = WavePacketConfig(**params)
        x, centers = gen_wave_packet(n, cfg, seed)
        return x, centers[:, None], asdict(cfg)
    if system == "drop":
        cfg = DropConfig(**params)
        x, labels = gen_liquid_drop(n, cfg, seed)
        return x, labels, asdict(cfg)
    raise ValueError(f"unknown system {system!r}; choose from {GENERATORS}")


LABEL_COLUMNS = {"wavepacket": ["center"], "drop": ["deform", "theta"]}


def dataset_paths(path) -> tuple[Path, Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix == ".csv" else path
    return (stem.with_suffix(".csv"), Path(f"{stem}.meta.json"), Path(f"{stem}.labels.csv"))


def save_dataset(path, x, meta: dict, labels=None, label_names=None) -> tuple[Path, ...]:
    data_path, meta_path, label_path = dataset_paths(path)
    header = ",".join(f"x{i + 1}" for i in range(x.shape[1]))
    np.savetxt(data_path, x, delimiter=",", header=header, comments="", fmt="%.17g")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written = [data_path, meta_path]
    if labels is not None:
        labels = np.asarray(labels).reshape(len(x), -1)
        names = label_names or [f"label{i + 1}" for i in range(labels.shape[1])]
        np.savetxt(label_path, labels, delimiter=",", header=",".join(names),
                   comments="", fmt="%.17g")
        written.append(label_path)
    return tuple(written)


def load_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data


def load_dataset(path):
    """Returns ``(X, labels or None, meta or {})``."""
    data_path, meta_path, label_path = dataset_paths(path)
    x = load_csv(data_path)
    labels = load_csv(label_path) if label_path.exists() else None
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return x, labels, meta
