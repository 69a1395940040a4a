"""Command-line interface: ``rmi <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numerical
degeneracy.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import datasets
from .baselines import (
    Autoencoder,
    probe_task,
    supervised_eval,
    train_contractive_ae,
    write_comparison,
)
from .core import DegenerateFeatureError, compute_rmi
from .entropy import GridError, GridPolicy
from .features import FeatureError, Handcrafted, dump_mlp, load_mlp, pca_fit
from .training import (
    DESK_SCALE,
    PRESETS,
    TrainingAborted,
    TrainingConfig,
    particle_shuffle_sampler,
    read_history,
    train_feature,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

FEATURE_NAMES = {
    "mean": "mean_field",
    "jx": "amp_weighted_pos",
    "jx2": "int_weighted_pos",
    "fE": "normalized_int_pos",
    "fvar": "f_var",
    "fcorr": "f_corr",
}


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_config(path, config: dict):
    Path(f"{path}.config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def _require_file(path):
    if not Path(path).exists():
        raise ConfigError(f"file not found: {path}")
    return path


def _load_data(path):
    _require_file(datasets.dataset_paths(path)[0])
    x, labels, meta = datasets.load_dataset(path)
    return x, labels, meta


def build_feature(spec: str, x: np.ndarray, pca_k: int = 1):
    """Feature from a CLI name; ``pca`` is fitted on ``x``."""
    if spec == "pca":
        return pca_fit(x, pca_k)
    if spec in FEATURE_NAMES:
        return Handcrafted(FEATURE_NAMES[spec], x.shape[1])
    if spec.startswith("mlp:"):
        return load_model_file(spec[4:])
    raise ConfigError(f"unknown feature {spec!r}; use pca, {', '.join(FEATURE_NAMES)} or mlp:PATH")


def load_model_file(path):
    """An MLP document, or the encoder of an autoencoder document."""
    text = Path(_require_file(path)).read_text()
    doc = json.loads(text)
    if doc.get("format") == "rmi-autoencoder/1":
        return load_mlp(json.dumps(doc["encoder"]))
    return load_mlp(text)


def _grid_policy(args) -> GridPolicy:
    return GridPolicy(args.kf, args.s)


# -- commands -------------------------------------------------------------------

def cmd_gen(args):
    params = {}
    if args.system == "wavepacket" and args.sigma_xi is not None:
        params["noise_std"] = args.sigma_xi
    if args.system == "spiral" and args.alpha is not None:
        params["alpha"] = args.alpha
    if args.system == "drop":
        if args.temperature is not None:
            params["temperature"] = args.temperature
        if args.deform_max is not None:
            params["deform_range"] = (0.0, args.deform_max)
    x, labels, cfg = datasets.generate(args.system, args.n, args.seed, params)
    meta = {"generator": args.system, "config": cfg, "seed": args.seed, "n": args.n}
    names = datasets.LABEL_COLUMNS.get(args.system)
    written = datasets.save_dataset(args.out, x, meta, labels, names)
    for p in written:
        print(p)
    return EXIT_OK


def _score(x, feature, policy):
    est = compute_rmi(x, feature, policy)
    return est


def cmd_score(args):
    x, _, meta = _load_data(args.data)
    feature = build_feature(args.feature, x, args.pca_k)
    est = _score(x, feature, _grid_policy(args))
    print(f"rmi={est.value:.6f} entropy={est.entropy_term:.6f} penalty={est.jacobian_term:.6f}")
    out = args.out or f"{datasets.dataset_paths(args.data)[0].with_suffix('')}.score.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "rmi", "entropy", "penalty"])
        w.writerow([args.feature, repr(est.value), repr(est.entropy_term), repr(est.jacobian_term)])
    _write_config(out, {"command": "score", "data": str(args.data), "feature": args.feature,
                        "pca_k": args.pca_k, "grid": est.grid.as_dict(), "dataset_meta": meta})
    return EXIT_OK


def cmd_compare(args):
    x, labels, meta = _load_data(args.data)
    names = [s.strip() for s in args.features.split(",") if s.strip()]
    if args.labels:
        labels = datasets.load_csv(_require_file(args.labels))
    rows = []
    for name in names:
        feature = build_feature(name, x, args.pca_k)
        est = _score(x, feature, _grid_policy(args))
        cost = None
        if args.task:
            if labels is None:
                raise ConfigError("--task needs labels (a labels file next to the data or --labels)")
            task = probe_task(args.task, feature.output_dim,
                              **({"steps": args.probe_steps} if args.probe_steps else {}))
            cost = supervised_eval(feature.value(x), labels, task, seed=args.seed)
        rows.append((name, est.value, cost))
        print(f"{name}: rmi={est.value:.6f}" + ("" if cost is None else f" cost={cost:.6g}"))
    out = args.out or f"{datasets.dataset_paths(args.data)[0].with_suffix('')}.compare.csv"
    write_comparison(out, rows)
    _write_config(out, {"command": "compare", "data": str(args.data), "features": names,
                        "pca_k": args.pca_k, "kf": args.kf, "s": args.s, "task": args.task,
                        "probe_steps": args.probe_steps, "seed": args.seed, "dataset_meta": meta})
    return EXIT_OK


def cmd_supervised(args):
    x, _, meta = _load_data(args.data)
    labels = datasets.load_csv(_require_file(args.labels))
    feature = build_feature(args.feature, x, args.pca_k)
    overrides = {"steps": args.steps} if args.steps else {}
    task = probe_task(args.task, feature.output_dim, **overrides)
    cost = supervised_eval(feature.value(x), labels, task, seed=args.seed)
    print(f"cost={cost:.6g}")
    out = args.out or f"{datasets.dataset_paths(args.data)[0].with_suffix('')}.supervised.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "task", "cost"])
        w.writerow([args.feature, args.task, repr(cost)])
    _write_config(out, {"command": "supervised", "data": str(args.data), "labels": str(args.labels),
                        "feature": args.feature, "task": asdict(task), "seed": args.seed,
                        "dataset_meta": meta})
    return EXIT_OK


RUN_SECTIONS = {"dataset", "feature", "training", "output", "autoencoder"}
DATASET_KEYS = {"kind", "params", "seed", "path", "pool_size"}
FEATURE_KEYS = {"kind", "preset", "desk", "sizes", "activation", "model"}


def load_run_config(path) -> dict:
    """Parse and validate a JSON run configuration, rejecting unknown keys."""
    try:
        doc = json.loads(Path(_require_file(path)).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(doc) - RUN_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    ds = doc.get("dataset")
    if not isinstance(ds, dict):
        raise ConfigError("run config needs a 'dataset' section")
    if set(ds) - DATASET_KEYS:
        raise ConfigError(f"unknown dataset keys: {sorted(set(ds) - DATASET_KEYS)}")
    if "path" in ds:
        _require_file(datasets.dataset_paths(ds["path"])[0])
    elif ds.get("kind") not in datasets.GENERATORS:
        raise ConfigError(f"dataset.kind must be one of {datasets.GENERATORS}")
    feat = doc.get("feature", {})
    if set(feat) - FEATURE_KEYS:
        raise ConfigError(f"unknown feature keys: {sorted(set(feat) - FEATURE_KEYS)}")
    if "model" in feat:
        _require_file(feat["model"])
    if set(doc.get("autoencoder", {})) - {"contractive_weight"}:
        raise ConfigError("autoencoder section only accepts 'contractive_weight'")
    return doc


def _training_setup(doc):
    ds = doc["dataset"]
    feat = doc.get("feature", {})
    preset_name = feat.get("preset") or ds.get("kind")
    base = dict(PRESETS[preset_name]["config"]) if preset_name in PRESETS else {}
    if feat.get("desk") and preset_name in DESK_SCALE:
        base.update(DESK_SCALE[preset_name])
    try:
        base.update(doc.get("training", {}))
        cfg = TrainingConfig.from_dict(base)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"training config: {err}") from err
    if "model" in feat:
        model = load_model_file(feat["model"])
        activation = None
    else:
        sizes = feat.get("sizes") or (PRESETS[preset_name]["sizes"] if preset_name in PRESETS else None)
        if sizes is None:
            raise ConfigError("feature.sizes is required without a preset")
        model = list(sizes)
        activation = feat.get("activation") or PRESETS.get(preset_name, {}).get("activation", "tanh")
    return cfg, model, activation, _data_source(ds, cfg)


def _data_source(ds: dict, cfg: TrainingConfig):
    if "path" in ds:
        x, _, _ = datasets.load_dataset(ds["path"])
        return x
    kind = ds["kind"]
    params = ds.get("params", {})
    try:
        if kind == "spiral":
            scfg = datasets.SpiralConfig(**params)
            return lambda rng, n: datasets.gen_spiral(n, scfg, rng)
        if kind == "wavepacket":
            wcfg = datasets.WavePacketConfig(**params)
            return lambda rng, n: datasets.gen_wave_packet(n, wcfg, rng)[0]
        # drops are expensive: train on a finite pool with particles relabeled
        pool = int(ds.get("pool_size", 4 * cfg.batch_size))
        x, _, _ = datasets.generate("drop", pool, ds.get("seed", 0), params)
        return particle_shuffle_sampler(x)
    except TypeError as err:
        raise ConfigError(f"dataset params: {err}") from err


def cmd_train(args):
    doc = load_run_config(args.config)
    cfg, model, activation, source = _training_setup(doc)
    model, history = train_feature(source, model, cfg, activation or "tanh")
    resolved = {"run_config": doc, "training": asdict(cfg)}
    Path(args.out_model).write_text(dump_mlp(model, {"training": asdict(cfg)}))
    history.to_csv(args.out_history)
    _write_config(args.out_model, resolved)
    _write_config(args.out_history, resolved)
    if len(history):
        print(f"steps={len(history)} final_rmi={history.rmi[-1]:.6f}")
    return EXIT_OK


def cmd_autoencoder(args):
    doc = load_run_config(args.config)
    cfg, model, _, source = _training_setup(doc)
    if not isinstance(model, list):
        raise ConfigError("autoencoder training needs feature.sizes or a preset, not a model file")
    weight = doc.get("autoencoder", {}).get("contractive_weight", 1e-2)
    ae = train_contractive_ae(source, model, cfg, contractive_weight=weight)
    Path(args.out_model).write_text(dump_autoencoder(ae))
    _write_config(args.out_model, {"run_config": doc, "training": asdict(cfg),
                                   "contractive_weight": weight})
    print(f"wrote {args.out_model}")
    return EXIT_OK


def dump_autoencoder(ae: Autoencoder) -> str:
    enc = json.loads(dump_mlp(ae.encoder))
    dec = json.loads(dump_mlp(ae.decoder))
    doc = {"format": "rmi-autoencoder/1", "contractive_weight": ae.contractive_weight,
           "encoder": enc, "decoder": dec}
    # json emits shortest round-trip reprs, which restore float64 exactly
    return json.dumps(doc, indent=1) + "\n"


def cmd_plot(args):
    hist = read_history(_require_file(args.history))
    if "step" not in hist or "rmi" not in hist:
        raise ConfigError("history file needs step and rmi columns")
    Path(args.out).write_text(svg_curve(hist["step"], hist["rmi"], ylabel="RMI (nats)"))
    print(f"wrote {args.out}")
    return EXIT_OK


def svg_curve(xs, ys, width=640, height=400, xlabel="step", ylabel="value") -> str:
    """A standalone SVG line plot with plain axes."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    ok = np.isfinite(xs) & np.isfinite(ys)
    xs, ys = xs[ok], ys[ok]
    left, right, top, bottom = 70, 20, 20, 50
    pw, ph = width - left - right, height - top - bottom
    if len(xs) == 0:
        xs = ys = np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    px = left + (xs - x0) / (x1 - x0) * pw
    py = top + (1.0 - (ys - y0) / (y1 - y0)) * ph
    points = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    ax_y = top + ph
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{left}" y1="{ax_y}" x2="{left + pw}" y2="{ax_y}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{ax_y}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        tx = left + frac * pw
        ty = top + (1.0 - frac) * ph
        parts.append(f'<line x1="{tx:.2f}" y1="{ax_y}" x2="{tx:.2f}" y2="{ax_y + 5}" stroke="black"/>')
        parts.append(f'<text x="{tx:.2f}" y="{ax_y + 20}" font-size="12" text-anchor="middle">'
                     f'{x0 + frac * (x1 - x0):.4g}</text>')
        parts.append(f'<line x1="{left - 5}" y1="{ty:.2f}" x2="{left}" y2="{ty:.2f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{ty + 4:.2f}" font-size="12" text-anchor="end">'
                     f'{y0 + frac * (y1 - y0):.4g}</text>')
    parts.append(f'<text x="{left + pw / 2:.2f}" y="{height - 10}" font-size="13" '
                 f'text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="15" y="{top + ph / 2:.2f}" font-size="13" text-anchor="middle" '
                 f'transform="rotate(-90 15 {top + ph / 2:.2f})">{ylabel}</text>')
    parts.append(f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{points}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rmi", description="Renormalized mutual information toolkit")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS threads (RMI_THREADS overrides; default 1 for reproducibility)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--system", required=True, choices=datasets.GENERATORS)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--sigma-xi", type=float, dest="sigma_xi")
    g.add_argument("--alpha", type=float)
    g.add_argument("--temperature", type=float)
    g.add_argument("--deform-max", type=float, dest="deform_max")

    def grid_args(sp):
        sp.add_argument("--kf", type=int, help="bins per axis (default 180 in 1D, 100 in 2D)")
        sp.add_argument("--s", type=float, help="kernel width in bins (default 1 in 1D, 2 in 2D)")
        sp.add_argument("--pca-k", type=int, default=1, dest="pca_k")

    s = sub.add_parser("score", help="RMI of one feature on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--feature", required=True)
    s.add_argument("--out")
    grid_args(s)

    t = sub.add_parser("train", help="optimize an MLP feature")
    t.add_argument("--config", required=True)
    t.add_argument("--out-model", required=True, dest="out_model")
    t.add_argument("--out-history", required=True, dest="out_history")

    c = sub.add_parser("compare", help="score several features")
    c.add_argument("--data", required=True)
    c.add_argument("--features", required=True, help="comma-separated feature names")
    c.add_argument("--labels")
    c.add_argument("--task", choices=("center", "drop"))
    c.add_argument("--probe-steps", type=int, dest="probe_steps")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    grid_args(c)

    a = sub.add_parser("autoencoder", help="train a contractive autoencoder")
    a.add_argument("--config", required=True)
    a.add_argument("--out-model", required=True, dest="out_model")

    v = sub.add_parser("supervised", help="probe a feature on a regression task")
    v.add_argument("--data", required=True)
    v.add_argument("--labels", required=True)
    v.add_argument("--feature", required=True)
    v.add_argument("--task", required=True, choices=("center", "drop"))
    v.add_argument("--steps", type=int)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--pca-k", type=int, default=1, dest="pca_k")
    v.add_argument("--out")

    pl = sub.add_parser("plot", help="SVG of RMI versus training step")
    pl.add_argument("--history", required=True)
    pl.add_argument("--out", required=True)
    return p


COMMANDS = {
    "gen": cmd_gen, "score": cmd_score, "train": cmd_train, "compare": cmd_compare,
    "autoencoder": cmd_autoencoder, "supervised": cmd_supervised, "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
    except UsageError as err:
        print(f"rmi: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    threads = int(os.environ.get("RMI_THREADS", args.threads))
    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except (DegenerateFeatureError, TrainingAborted, FeatureError, FloatingPointError) as err:
        print(f"rmi: numerical degeneracy: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, GridError, OSError, ValueError, KeyError) as err:
        print(f"rmi: data/config error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
