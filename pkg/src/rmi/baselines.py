"""Contractive autoencoder baseline and supervised probe evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .features import Mlp
from .training import TrainingAborted, TrainingConfig, batch_sampler, make_optimizer

log = logging.getLogger(__name__)


@dataclass
class Autoencoder:
    encoder: Mlp
    decoder: Mlp
    contractive_weight: float = 1e-2

    def __post_init__(self):
        k = self.encoder.output_dim
        if self.decoder.input_dim != k or self.decoder.output_dim != self.encoder.input_dim:
            raise ValueError("decoder must map the bottleneck back to the input space")

    def reconstruct(self, x):
        return self.decoder.value(self.encoder.value(x))

    def loss(self, x, with_grad=False):
        """Reconstruction MSE plus the weighted mean squared Frobenius norm of the encoder Jacobian."""
        x = np.asarray(x, dtype=float)
        enc = self.encoder.forward(x, jacobian=True)
        code = enc["acts"][-1]
        dec = self.decoder.forward(code)
        err = dec["acts"][-1] - x
        n = x.shape[0]
        mse = float(np.mean(err * err))
        jac = enc["jac"]
        frob2 = float(np.mean(np.sum(jac * jac, axis=(1, 2))))
        total = mse + self.contractive_weight * frob2
        if not with_grad:
            return total, mse, frob2
        g_dec, dcode = self.decoder.backward(dec, dy=2.0 * err / err.size, need_input_grad=True)
        djac = (2.0 * self.contractive_weight / n) * jac if self.contractive_weight else None
        g_enc, _ = self.encoder.backward(enc, dy=dcode, djac=djac)
        return (total, mse, frob2), g_enc + g_dec

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()


def mirrored_decoder_sizes(encoder_sizes):
    return list(reversed(encoder_sizes))


def train_contractive_ae(source, encoder_sizes, cfg: TrainingConfig, contractive_weight=1e-2,
                         encoder_activation="tanh", decoder_activation="relu", callback=None):
    """Fit a contractive autoencoder; the decoder mirrors the encoder with relu hidden layers."""
    init_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    init_rng = np.random.default_rng(init_seq)
    encoder = Mlp.init(list(encoder_sizes), encoder_activation, init_rng)
    decoder = Mlp.init(mirrored_decoder_sizes(encoder_sizes), decoder_activation, init_rng)
    ae = Autoencoder(encoder, decoder, contractive_weight)
    rng = np.random.default_rng(data_seq)
    draw = batch_sampler(source)
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    params = ae.parameters()
    for step in range(cfg.steps):
        x = draw(rng, cfg.batch_size)
        (total, mse, frob2), grads = ae.loss(x, with_grad=True)
        if not np.isfinite(total):
            raise TrainingAborted(f"non-finite autoencoder loss at step {step}")
        try:
            opt.step(params, grads)
        except FloatingPointError as err:
            raise TrainingAborted(f"step {step}: {err}") from err
        if callback is not None:
            callback(step, total, mse, frob2)
    return ae


# -- supervised probes ----------------------------------------------------------

TASKS = ("center", "drop")


@dataclass(frozen=True)
class SupervisedTask:
    kind: str
    sizes: tuple
    batch_size: int
    steps: int
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")


def probe_task(kind: str, input_dim: int | None = None, **overrides) -> SupervisedTask:
    """Probe layouts: 1-50-50-1 for the packet centre, 2-100-100-3 for drops."""
    if kind == "center":
        base = dict(sizes=(input_dim or 1, 50, 50, 1), batch_size=200, steps=10_000)
    elif kind == "drop":
        base = dict(sizes=(input_dim or 2, 100, 100, 3), batch_size=1500, steps=20_000)
    else:
        raise ValueError(f"task must be one of {TASKS}")
    base.update(overrides)
    return SupervisedTask(kind, **base)


def drop_targets(labels) -> np.ndarray:
    """``(deform, cos 2 theta, sin 2 theta)`` from ``(deform, theta)`` labels."""
    labels = np.asarray(labels, dtype=float)
    return np.stack([labels[:, 0], np.cos(2 * labels[:, 1]), np.sin(2 * labels[:, 1])], axis=1)


def drop_cost(pred, labels, per_sample=False):
    """Deformation error plus deformation-weighted orientation error.

    Uses the doubled angle, so orientations differing by pi cost the same.
    """
    t = drop_targets(labels)
    dr = t[:, 0]
    c = (pred[:, 0] - dr) ** 2 + dr * ((pred[:, 1] - t[:, 1]) ** 2 + (pred[:, 2] - t[:, 2]) ** 2)
    return c if per_sample else float(np.mean(c))


def _split(n, rng, held_out=0.2):
    perm = rng.permutation(n)
    n_test = max(1, int(round(held_out * n)))
    return perm[n_test:], perm[:n_test]


def supervised_eval(features, labels, task: SupervisedTask, seed=0, return_model=False):
    """Train a probe from frozen features to labels; return the held-out cost.

    Features are standardized with training-split statistics.  For the centre
    task the probe regresses standardized centres; the reported cost is the
    MSE in the original label units.
    """
    feats = np.asarray(features, dtype=float)
    if feats.ndim == 1:
        feats = feats[:, None]
    labels = np.asarray(labels, dtype=float)
    if labels.ndim == 1:
        labels = labels[:, None]
    if len(feats) != len(labels):
        raise ValueError("features and labels differ in length")
    split_seq, init_seq, data_seq = np.random.SeedSequence(seed).spawn(3)
    train, test = _split(len(feats), np.random.default_rng(split_seq))
    mu = feats[train].mean(axis=0)
    sd = feats[train].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    z = (feats - mu) / sd

    if task.kind == "center":
        t_mu = labels[train, 0].mean()
        t_sd = labels[train, 0].std() or 1.0
        target = (labels[:, :1] - t_mu) / t_sd
    else:
        if labels.shape[1] != 2:
            raise ValueError("drop labels must be (deform, theta)")
        target = labels

    sizes = list(task.sizes)
    sizes[0] = z.shape[1]
    probe = Mlp.init(sizes, "relu", np.random.default_rng(init_seq))
    opt = make_optimizer("adam", task.learning_rate)
    params = probe.parameters()
    rng = np.random.default_rng(data_seq)
    n_train = len(train)
    for step in range(task.steps):
        idx = train[rng.choice(n_train, size=min(task.batch_size, n_train), replace=False)]
        cache = probe.forward(z[idx])
        out = cache["acts"][-1]
        if task.kind == "center":
            resid = out - target[idx]
            dy = 2.0 * resid / len(idx)
        else:
            t = drop_targets(target[idx])
            w = np.stack([np.ones(len(idx)), t[:, 0], t[:, 0]], axis=1)
            dy = 2.0 * w * (out - t) / len(idx)
        grads, _ = probe.backward(cache, dy=dy)
        try:
            opt.step(params, grads)
        except FloatingPointError as err:
            raise TrainingAborted(f"probe diverged at step {step}: {err}") from err

    pred = probe.value(z[test])
    if task.kind == "center":
        pred = pred * t_sd + t_mu
        cost = float(np.mean((pred[:, 0] - labels[test, 0]) ** 2))
    else:
        cost = drop_cost(pred, labels[test])
    if return_model:
        return cost, probe
    return cost


def write_comparison(path, rows, comment: str | None = None):
    """CSV with columns feature,rmi,supervised_cost (cost may be empty)."""
    with open(path, "w", newline="") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "rmi", "supervised_cost"])
        for row in rows:
            name, rmi = row[0], row[1]
            cost = row[2] if len(row) > 2 else None
            w.writerow([name, "" if rmi is None else repr(float(rmi)),
                        "" if cost is None else repr(float(cost))])
