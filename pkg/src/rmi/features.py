"""Differentiable feature maps y = f(x) with exact Jacobians.

All feature objects work on batches: ``value`` maps an (n, N) array to
(n, K) and ``jacobian`` returns the (n, K, N) stack of per-sample Jacobians.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh", "relu", "linear")


class FeatureError(ValueError):
    """Raised when a feature cannot be evaluated at the given input."""


def _batch(x, n_dims=None) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype != np.float32:
        x = x.astype(float, copy=False)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected an (n, N) array, got shape {x.shape}")
    if n_dims is not None and x.shape[1] != n_dims:
        raise ValueError(f"feature expects {n_dims} input dims, got {x.shape[1]}")
    return x


def _act(name, z):
    """Activation value and its first and second derivatives (``None`` when zero)."""
    if name == "tanh":
        a = np.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    if name == "relu":
        a = np.maximum(z, 0.0)
        # subgradient at 0 is 0
        d1 = (z > 0).astype(z.dtype)
        return a, d1, None
    if name == "linear":
        return z, np.ones_like(z), None
    raise ValueError(f"unknown activation {name!r}")


def _stack_matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``a @ w`` for a stack ``a`` of shape (n, k, d), as one 2D product."""
    n, k, d = a.shape
    return (a.reshape(n * k, d) @ w).reshape(n, k, w.shape[1])


class Feature:
    """Base class; subclasses implement ``value`` and ``jacobian`` on batches."""

    input_dim: int
    output_dim: int
    name = "feature"

    def value(self, x) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.value(x)


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        # float32 stays float32; anything else becomes float64
        dtype = np.result_type(np.asarray(self.weight), np.float32)
        self.weight = np.asarray(self.weight, dtype=dtype)
        self.bias = np.asarray(self.bias, dtype=dtype)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("layer weight must be (out, in) and bias (out,)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class Mlp(Feature):
    """Dense network; the parameter set of a neural feature."""

    name = "mlp"

    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("an MLP needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")

    @classmethod
    def init(cls, sizes, activations, rng) -> "Mlp":
        """Glorot-uniform weights and zero biases.

        ``activations`` names one activation per layer, or a single hidden
        activation followed by a linear output layer.
        """
        n_layers = len(sizes) - 1
        if isinstance(activations, str):
            activations = [activations] * (n_layers - 1) + ["linear"]
        if len(activations) != n_layers:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.weight.shape[0] for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def astype(self, dtype) -> "Mlp":
        """Copy with parameters in ``dtype`` (float32 roughly halves the cost of wide layers)."""
        out = self.copy()
        for layer in out.layers:
            layer.weight = layer.weight.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
        return out

    # -- passes -----------------------------------------------------------

    def forward(self, x, jacobian=False) -> dict:
        """Run the network and keep what ``backward`` needs.

        With ``jacobian`` the input Jacobian is built by a reverse sweep of
        per-sample (K, d) products, which stays cheap for K <= 2.
        """
        x = _batch(x, self.input_dim)
        acts = [x]
        slopes, curves = [], []
        a = x
        for layer in self.layers:
            z = a @ layer.weight.T + layer.bias
            a, d1, d2 = _act(layer.activation, z)
            acts.append(a)
            slopes.append(d1)
            curves.append(d2)
        cache = {"acts": acts, "slopes": slopes, "curves": curves}
        if jacobian:
            n, k = x.shape[0], self.output_dim
            upper = None  # V_{l+1}; None stands for the identity
            us, vs = [], []
            for layer, s in zip(reversed(self.layers), reversed(slopes)):
                if upper is None:
                    u = np.zeros((n, k, k), dtype=s.dtype)
                    idx = np.arange(k)
                    u[:, idx, idx] = s
                else:
                    u = upper * s[:, None, :]
                us.append(u)
                vs.append(upper)
                upper = _stack_matmul(u, layer.weight)
            cache["U"] = us[::-1]
            cache["V_upper"] = vs[::-1]
            cache["jac"] = upper
        return cache

    def value(self, x) -> np.ndarray:
        return self.forward(x)["acts"][-1]

    def jacobian(self, x) -> np.ndarray:
        return self.forward(x, jacobian=True)["jac"]

    def backward(self, cache, dy=None, djac=None, need_input_grad=False):
        """Parameter gradients of a scalar depending on outputs and Jacobians.

        ``dy`` is dC/dy with shape (n, K); ``djac`` is dC/dJ with shape
        (n, K, N) and requires a cache built with ``jacobian=True``.
        Returns ``(grads, dx)`` where ``grads`` follows ``parameters()``.
        """
        acts, slopes, curves = cache["acts"], cache["slopes"], cache["curves"]
        n = acts[0].shape[0]
        n_layers = len(self.layers)
        gw = [np.zeros_like(l.weight) for l in self.layers]
        gb = [np.zeros_like(l.bias) for l in self.layers]
        extra = [None] * n_layers

        if djac is not None:
            vbar = djac
            for i, layer in enumerate(self.layers):
                u = cache["U"][i]
                kk, d = u.shape[1], u.shape[2]
                gw[i] += u.reshape(n * kk, d).T @ vbar.reshape(n * kk, -1)
                ubar = _stack_matmul(vbar, layer.weight.T)
                upper = cache["V_upper"][i]
                if curves[i] is not None:
                    if upper is None:
                        sbar = np.einsum("nkk->nk", ubar)
                    else:
                        sbar = np.einsum("nkd,nkd->nd", ubar, upper)
                    extra[i] = sbar * curves[i]
                if upper is not None:
                    vbar = ubar * slopes[i][:, None, :]

        zbar = np.zeros_like(acts[-1]) if dy is None else dy * slopes[-1]
        if extra[-1] is not None:
            zbar = zbar + extra[-1]
        dx = None
        for i in range(n_layers - 1, -1, -1):
            layer = self.layers[i]
            gw[i] += zbar.T @ acts[i]
            gb[i] += zbar.sum(axis=0)
            if i > 0 or need_input_grad:
                abar = zbar @ layer.weight
                if i == 0:
                    dx = abar
                    break
                zbar = abar * slopes[i - 1]
                if extra[i - 1] is not None:
                    zbar = zbar + extra[i - 1]
        grads = []
        for w, b in zip(gw, gb):
            grads += [w, b]
        return grads, dx

    # -- serialization ----------------------------------------------------

    def to_json(self) -> str:
        return dump_mlp(self)

    @classmethod
    def from_json(cls, text: str) -> "Mlp":
        return load_mlp(text)


def _fmt(a) -> str:
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot serialize non-finite parameters")
    if a.ndim == 1:
        return "[" + ", ".join(format(v, ".17g") for v in a) + "]"
    rows = ",\n        ".join(_fmt(r) for r in a)
    return "[\n        " + rows + "\n      ]"


def dump_mlp(model: Mlp, extra: dict | None = None) -> str:
    """Text form of an MLP: layer sizes, activations and 17-digit weights."""
    parts = []
    for layer in model.layers:
        out_dim, in_dim = layer.weight.shape
        parts.append(
            "    {\n"
            f'      "in": {in_dim},\n'
            f'      "out": {out_dim},\n'
            f'      "activation": "{layer.activation}",\n'
            f'      "weight": {_fmt(layer.weight)},\n'
            f'      "bias": {_fmt(layer.bias)}\n'
            "    }"
        )
    header = '{\n  "format": "rmi-mlp/1",\n'
    header += f'  "sizes": {json.dumps(model.sizes)},\n'
    if extra:
        header += f'  "meta": {json.dumps(extra, sort_keys=True)},\n'
    return header + '  "layers": [\n' + ",\n".join(parts) + "\n  ]\n}\n"


def load_mlp(text: str) -> Mlp:
    doc = json.loads(text)
    if doc.get("format") != "rmi-mlp/1":
        raise ValueError("not an rmi-mlp document")
    layers = []
    for spec in doc["layers"]:
        w = np.array(spec["weight"], dtype=float).reshape(spec["out"], spec["in"])
        layers.append(Layer(w, np.array(spec["bias"], dtype=float), spec["activation"]))
    return Mlp(layers)


class Linear(Feature):
    """Affine feature ``y = W x + offset``."""

    name = "linear"

    def __init__(self, weight, offset=None):
        self.weight = np.atleast_2d(np.asarray(weight, dtype=float))
        k = self.weight.shape[0]
        self.offset = np.zeros(k) if offset is None else np.asarray(offset, dtype=float)

    @property
    def input_dim(self):
        return self.weight.shape[1]

    @property
    def output_dim(self):
        return self.weight.shape[0]

    def value(self, x):
        return _batch(x, self.input_dim) @ self.weight.T + self.offset

    def jacobian(self, x):
        n = _batch(x, self.input_dim).shape[0]
        return np.broadcast_to(self.weight, (n,) + self.weight.shape).copy()


class Transformed(Feature):
    """``g(f(x))`` for an elementwise scalar reparametrization ``g``."""

    def __init__(self, inner: Feature, g, dg, name="transformed"):
        self.inner, self.g, self.dg, self.name = inner, g, dg, name

    @property
    def input_dim(self):
        return self.inner.input_dim

    @property
    def output_dim(self):
        return self.inner.output_dim

    def value(self, x):
        return self.g(self.inner.value(x))

    def jacobian(self, x):
        y = self.inner.value(x)
        return self.dg(y)[:, :, None] * self.inner.jacobian(x)


class Stacked(Feature):
    """Concatenation of several features into one vector feature."""

    def __init__(self, *parts: Feature):
        self.parts = parts
        if len({p.input_dim for p in parts}) != 1:
            raise ValueError("stacked features must share their input dimension")

    @property
    def input_dim(self):
        return self.parts[0].input_dim

    @property
    def output_dim(self):
        return sum(p.output_dim for p in self.parts)

    def value(self, x):
        return np.hstack([p.value(x) for p in self.parts])

    def jacobian(self, x):
        return np.concatenate([p.jacobian(x) for p in self.parts], axis=1)


# -- handcrafted physics features ----------------------------------------

HANDCRAFTED = ("mean_field", "amp_weighted_pos", "int_weighted_pos",
               "normalized_int_pos", "f_var", "f_corr")


class Handcrafted(Feature):
    """Closed-form collective variables for fields and particle clouds.

    Field features index sites ``j = 1..N``.  Particle features expect the
    flattened layout ``(x_1^(1), x_1^(2), x_2^(1), ...)``.
    """

    def __init__(self, kind: str, input_dim: int):
        if kind not in HANDCRAFTED:
            raise ValueError(f"unknown handcrafted feature {kind!r}")
        if kind in ("f_var", "f_corr") and input_dim % 2:
            raise ValueError("particle features need an even input dimension")
        self.kind = kind
        self.name = kind
        self.input_dim = input_dim
        self.output_dim = 2 if kind in ("f_var", "f_corr") else 1

    def value(self, x):
        x = _batch(x, self.input_dim)
        n_sites = self.input_dim
        j = np.arange(1, n_sites + 1, dtype=float)
        kind = self.kind
        if kind == "mean_field":
            return x.mean(axis=1, keepdims=True)
        if kind == "amp_weighted_pos":
            return (x @ j / n_sites)[:, None]
        if kind == "int_weighted_pos":
            return ((x * x) @ j / n_sites)[:, None]
        if kind == "normalized_int_pos":
            norm = np.sum(x * x, axis=1)
            self._check_norm(norm)
            return ((x * x) @ j / norm)[:, None]
        p = x.reshape(x.shape[0], -1, 2)
        first = np.mean(p[:, :, 0] ** 2, axis=1)
        if kind == "f_var":
            second = np.mean(p[:, :, 1] ** 2, axis=1)
        else:
            second = np.mean(p[:, :, 0] * p[:, :, 1], axis=1)
        return np.stack([first, second], axis=1)

    def jacobian(self, x):
        x = _batch(x, self.input_dim)
        n, n_sites = x.shape
        j = np.arange(1, n_sites + 1, dtype=float)
        kind = self.kind
        if kind == "mean_field":
            return np.full((n, 1, n_sites), 1.0 / n_sites)
        if kind == "amp_weighted_pos":
            return np.broadcast_to(j / n_sites, (n, 1, n_sites)).copy()
        if kind == "int_weighted_pos":
            return (2.0 * x * j / n_sites)[:, None, :]
        if kind == "normalized_int_pos":
            norm = np.sum(x * x, axis=1)
            self._check_norm(norm)
            f = (x * x) @ j / norm
            return (2.0 * x * (j[None, :] - f[:, None]) / norm[:, None])[:, None, :]
        n_particles = n_sites // 2
        p = x.reshape(n, n_particles, 2)
        jac = np.zeros((n, 2, n_particles, 2))
        jac[:, 0, :, 0] = 2.0 * p[:, :, 0] / n_particles
        if kind == "f_var":
            jac[:, 1, :, 1] = 2.0 * p[:, :, 1] / n_particles
        else:
            jac[:, 1, :, 0] = p[:, :, 1] / n_particles
            jac[:, 1, :, 1] = p[:, :, 0] / n_particles
        return jac.reshape(n, 2, n_sites)

    @staticmethod
    def _check_norm(norm):
        if np.any(norm == 0):
            i = int(np.argmax(norm == 0))
            raise FeatureError(f"normalized_int_pos undefined: sample {i} has zero total intensity")


def feature_value(f: Feature, x) -> np.ndarray:
    """Evaluate ``f`` on one N-vector (returns a K-vector) or on a batch."""
    x = np.asarray(x, dtype=float)
    out = f.value(x)
    return out[0] if x.ndim == 1 else out


def feature_jacobian(f: Feature, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = f.jacobian(x)
    return out[0] if x.ndim == 1 else out


def pca_fit(batch, k: int = 1) -> Linear:
    """Projection onto the top-``k`` covariance eigenvectors.

    Each eigenvector is unit-norm with its largest-magnitude entry positive.
    No centring offset is applied (the offset is irrelevant for RMI).
    """
    x = _batch(batch)
    if x.shape[0] < 2:
        raise ValueError("PCA needs at least 2 samples")
    if not 1 <= k <= x.shape[1]:
        raise ValueError(f"k must lie in [1, {x.shape[1]}]")
    mean = x.mean(axis=0)
    cov = (x.T @ x) / x.shape[0] - np.outer(mean, mean)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    vecs = evecs[:, order].T.copy()
    for row in vecs:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    feat = Linear(vecs)
    feat.name = "pca"
    feat.eigenvalues = evals[order]
    return feat
