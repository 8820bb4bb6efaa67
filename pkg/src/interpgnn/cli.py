"""Command-line driver: datagen, train, enhance, evaluate, rollout, coherency,
ensemble and export-mask.

Exit codes: 0 success, 1 runtime error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from . import tensorcore as tc
from .coherency import CoherencyConfig, coherency_series, write_coherency_csv
from .datagen import GEOMETRIES, GeometryTemplate, make_dataset, make_split_dataset, write_dataset
from .errors import FormatError, GraphMismatchError
from .evaluation import (build_sgd_ensemble, evaluate_trajectory, mask_ensemble_std,
                         predictions, rmse_rows, write_rmse_csv, write_step_csv)
from .meshgraph import load_trajectory, write_node_field
from .model import HyperParams, load_checkpoint, save_checkpoint
from .training import EnhanceConfig, TrainConfig, enhance, shared_graph, train_baseline

log = logging.getLogger("interpgnn")

DEFAULT_CONFIG = """
[data]
geometry = step
resolution = 12
length = 1.0
train_controls = 1.0, 1.4, 1.8, 2.2, 2.6, 3.0
test_controls = 1.2, 1.6, 2.0, 2.4
n_steps = 64
dt = 0.5
seed = 0

[train]
lr = 1e-3
lr_min = 1e-6
batch_size = 8
epochs = 50
patience = 10
factor = 0.5
noise_std = 1e-2
seed = 0
val_fraction = 0.1
lambda = 0
rf = 16
sigma = tanh
nh = 32
levels = 2

[evaluate]
split = test

[coherency]
divisor = 50
eps_mult = 3
min_pts = 3

[ensemble]
members = 10
lr = 1e-7
step = 0
"""

TRAIN_KEYS = ("lr", "lr_min", "batch_size", "epochs", "patience", "factor", "noise_std", "seed",
              "val_fraction", "lambda", "rf", "sigma", "nh", "levels")
FLOW_KEYS = {"n_vortices": int, "base_frequency": float, "core_radius": float,
             "strength": float, "decay_length": float}
DATA_KEYS = {"geometry", "resolution", "length", "grading", "controls", "train_controls",
             "test_controls", "n_steps", "dt", "seed", *FLOW_KEYS}


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------- config

def load_config(path: str | None) -> configparser.ConfigParser:
    """Built-in defaults, overlaid by the user's file.

    A user file must name the geometry explicitly in its [data] section when
    it has one.
    """
    cp = configparser.ConfigParser()
    cp.read_string(DEFAULT_CONFIG)
    if path is None:
        return cp
    user = configparser.ConfigParser()
    try:
        with open(path) as fh:
            user.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if user.has_section("data"):
        if not user.has_option("data", "geometry"):
            raise ConfigError(f"{path}: missing key 'geometry' in [data]")
        # an explicit control list replaces the default split
        if user.has_option("data", "controls"):
            for key in ("train_controls", "test_controls"):
                cp.remove_option("data", key)
    for section in user.sections():
        if not cp.has_section(section):
            cp.add_section(section)
        for key, val in user.items(section, raw=True):
            cp.set(section, key, val)
    return cp


def _get(cp, section, key, conv):
    try:
        return conv(cp.get(section, key))
    except (configparser.Error, ValueError) as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _check_keys(cp, section, allowed):
    extra = sorted(set(cp.options(section)) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(extra)}")


def train_config(cp, seed: int | None) -> TrainConfig:
    _check_keys(cp, "train", TRAIN_KEYS)
    try:
        return TrainConfig(
            lr=_get(cp, "train", "lr", float), lr_min=_get(cp, "train", "lr_min", float),
            batch_size=_get(cp, "train", "batch_size", int), epochs=_get(cp, "train", "epochs", int),
            patience=_get(cp, "train", "patience", int), factor=_get(cp, "train", "factor", float),
            noise_std=_get(cp, "train", "noise_std", float),
            seed=seed if seed is not None else _get(cp, "train", "seed", int),
            val_fraction=_get(cp, "train", "val_fraction", float))
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from exc


def hyper_params(cp) -> HyperParams:
    hp = HyperParams(n_hidden=_get(cp, "train", "nh", int), levels=_get(cp, "train", "levels", int),
                     rf=_get(cp, "train", "rf", int), sigma=cp.get("train", "sigma"))
    try:
        hp.validate()
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from exc
    return hp


def data_setup(cp, seed: int | None):
    _check_keys(cp, "data", DATA_KEYS)
    kind = cp.get("data", "geometry", fallback=None)
    if kind is None:
        raise ConfigError("missing key 'geometry' in [data]")
    if kind not in GEOMETRIES:
        raise ConfigError(f"[data] geometry: {kind!r} is not one of {', '.join(GEOMETRIES)}")
    kw = {"kind": kind, "resolution": _get(cp, "data", "resolution", int),
          "length": _get(cp, "data", "length", float)}
    if cp.has_option("data", "grading"):
        kw["grading"] = _get(cp, "data", "grading", float)
    try:
        tmpl = GeometryTemplate(**kw)
    except ValueError as exc:
        raise ConfigError(f"[data] {exc}") from exc
    flow = {k: _get(cp, "data", k, conv) for k, conv in FLOW_KEYS.items() if cp.has_option("data", k)}
    return {
        "tmpl": tmpl,
        "controls": _get(cp, "data", "controls", _floats) if cp.has_option("data", "controls") else None,
        "train_controls": (_get(cp, "data", "train_controls", _floats)
                           if cp.has_option("data", "train_controls") else None),
        "test_controls": (_get(cp, "data", "test_controls", _floats)
                          if cp.has_option("data", "test_controls") else []),
        "n_steps": _get(cp, "data", "n_steps", int), "dt": _get(cp, "data", "dt", float),
        "seed": seed if seed is not None else _get(cp, "data", "seed", int), "flow": flow,
    }


# --------------------------------------------------------------------- data

def load_dataset(path, split: str = "train") -> list:
    """Trajectories of a dataset split, sharing one Graph object per mesh."""
    p = Path(path)
    if p.is_file():
        files = [p]
    else:
        info_path = p / "dataset.json"
        if not info_path.exists():
            raise FileNotFoundError(f"{p}: no dataset.json")
        info = json.loads(info_path.read_text())
        if split not in info["files"]:
            raise FormatError(f"{p}: dataset has no split {split!r}")
        files = [p / f for f in info["files"][split]]
    trajs = []
    for f in files:
        t = load_trajectory(f)
        for other in trajs:
            if other.graph.same_as(t.graph):
                t = dataclasses.replace(t, graph=other.graph)
                break
        trajs.append(t)
    if not trajs:
        raise FormatError(f"{p}: split {split!r} is empty")
    return trajs


def dataset_crop(path):
    p = Path(path)
    info = p / "dataset.json" if p.is_dir() else p.parent.parent / "dataset.json"
    if info.exists():
        d = json.loads(info.read_text())
        return tuple(d["crop"]), float(d["template"]["length"])
    return None, 1.0


def _check_graph(model, trajs) -> None:
    g = shared_graph(trajs)
    trained = model.meta.get("graph") or model.meta.get("baseline", {}).get("graph")
    if trained and (trained["n_nodes"] != g.n_nodes or trained["n_edges"] != g.n_edges):
        raise GraphMismatchError(
            f"data graph has |V|={g.n_nodes}, |E|={g.n_edges} but the checkpoint was trained on "
            f"|V|={trained['n_nodes']}, |E|={trained['n_edges']}")
    if trajs[0].n_features != model.hp.n_features:
        raise GraphMismatchError(
            f"data has {trajs[0].n_features} node features, model expects {model.hp.n_features}")


# ------------------------------------------------------------------ manifest

def write_manifest(out: Path, args, inputs: dict, outputs: list, started: float) -> None:
    manifest = {
        "command": args.command,
        "config": args.config,
        "seed": args.seed,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "tool_version": f"interpgnn-{__version__}",
        "argv": list(args.argv),
        "wall_clock_s": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _loss_csv(path: Path, history: list) -> None:
    has_budget = any("budget" in r for r in history)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"] + (["budget"] if has_budget else []))
        for r in history:
            row = [r["epoch"], repr(float(r["train_mse"])), repr(float(r["val_mse"]))]
            if has_budget:
                row.append(repr(float(r["budget"])))
            w.writerow(row)


# ------------------------------------------------------------------ commands

def cmd_datagen(args, cp, out: Path):
    d = data_setup(cp, args.seed)
    try:
        if d["controls"] is not None:
            train, test = make_dataset(d["controls"], d["tmpl"], d["n_steps"], d["dt"], d["seed"],
                                       **d["flow"])
        else:
            train, test = make_split_dataset(d["train_controls"] or [], d["test_controls"], d["tmpl"],
                                             d["n_steps"], d["dt"], d["seed"], **d["flow"])
    except ValueError as exc:
        raise ConfigError(f"[data] {exc}") from exc
    info = write_dataset(out, train, test, d["tmpl"],
                         {"n_nodes": train[0].graph.n_nodes, "seed": d["seed"],
                          "controls": {"train": [t.control for t in train],
                                       "test": [t.control for t in test]}})
    return {}, info["files"]["train"] + info["files"]["test"] + ["dataset.json"]


def cmd_train(args, cp, out: Path):
    _need(args, "data")
    cfg = train_config(cp, args.seed)
    hp = hyper_params(cp)
    trajs = load_dataset(args.data, "train")
    resume = out / "resume.npz"
    model = train_baseline(trajs, cfg, hp, resume_path=resume)
    g = shared_graph(trajs)
    model.meta["graph"] = {"n_nodes": g.n_nodes, "n_edges": g.n_edges}
    save_checkpoint(out / "baseline.ckpt", model)
    _loss_csv(out / "loss.csv", model.meta["history"])
    resume.unlink(missing_ok=True)
    return {"data": str(args.data)}, ["baseline.ckpt", "loss.csv"]


def cmd_enhance(args, cp, out: Path):
    _need(args, "data", "checkpoint")
    cfg = train_config(cp, args.seed)
    base = load_checkpoint(args.checkpoint)
    if base.topk is not None:
        raise ConfigError("--checkpoint must be a baseline checkpoint")
    trajs = load_dataset(args.data, "train")
    _check_graph(base, trajs)
    l_bl = float(base.meta["l_bl"])
    lam_text = args.lam if args.lam is not None else cp.get("train", "lambda")
    rf = args.rf if args.rf is not None else _get(cp, "train", "rf", int)
    sigma = cp.get("train", "sigma")
    if lam_text.strip().lower() == "auto":
        ecfg = EnhanceConfig.auto(l_bl, rf, sigma)
    else:
        try:
            ecfg = EnhanceConfig(float(lam_text), rf, l_bl, sigma)
        except ValueError as exc:
            raise ConfigError(f"lambda must be a real number or 'auto', got {lam_text!r}") from exc
    resume = out / "resume.npz"
    model = enhance(base, trajs, cfg, ecfg, resume_path=resume)
    model.meta["graph"] = base.meta.get("graph")
    save_checkpoint(out / "enhanced.ckpt", model)
    _loss_csv(out / "loss.csv", model.meta["history"])
    resume.unlink(missing_ok=True)
    return {"data": str(args.data), "checkpoint": str(args.checkpoint)}, ["enhanced.ckpt", "loss.csv"]


def _eval_setup(args, cp):
    _need(args, "data", "checkpoint")
    model = load_checkpoint(args.checkpoint)
    split = cp.get("evaluate", "split", fallback="test")
    trajs = load_dataset(args.data, split)
    shared_graph(trajs)
    if trajs[0].n_features != model.hp.n_features:
        raise GraphMismatchError(f"data has {trajs[0].n_features} node features, model expects "
                                 f"{model.hp.n_features} (graph |V|={trajs[0].graph.n_nodes})")
    return model, trajs


def _steps(args, traj) -> int:
    n = traj.n_steps - 1 if args.steps is None else args.steps
    if not 1 <= n <= traj.n_steps - 1:
        raise ConfigError(f"--steps must lie in [1, {traj.n_steps - 1}] for this dataset")
    return n


def _run_eval(args, cp, out: Path, mode: str, prefix: str):
    model, trajs = _eval_setup(args, cp)
    rows, outputs = [], []
    for i, t in enumerate(trajs):
        rep = evaluate_trajectory(model, t, mode, _steps(args, t))
        rows.extend(rmse_rows(rep))
        name = f"{prefix}_{i:03d}.csv"
        write_step_csv(out / name, rep.budgets, rep.mae)
        outputs.append(name)
    write_rmse_csv(out / f"rmse_{mode}.csv", rows)
    outputs.append(f"rmse_{mode}.csv")
    return {"data": str(args.data), "checkpoint": str(args.checkpoint)}, outputs


def cmd_evaluate(args, cp, out):
    return _run_eval(args, cp, out, "single_step", "single_step")


def cmd_rollout(args, cp, out):
    return _run_eval(args, cp, out, "rollout", "rollout")


def coherency_config(cp, data_path) -> CoherencyConfig:
    crop, length = dataset_crop(data_path)
    if cp.has_option("coherency", "crop"):
        crop = tuple(_get(cp, "coherency", "crop", _floats))
    if cp.has_option("coherency", "length"):
        length = _get(cp, "coherency", "length", float)
    try:
        return CoherencyConfig(length, _get(cp, "coherency", "divisor", int),
                               _get(cp, "coherency", "eps_mult", float),
                               _get(cp, "coherency", "min_pts", int), crop)
    except ValueError as exc:
        raise ConfigError(f"[coherency] {exc}") from exc


def cmd_coherency(args, cp, out: Path):
    model, trajs = _eval_setup(args, cp)
    ccfg = coherency_config(cp, args.data)
    outputs = []
    for mode in ("single_step", "rollout"):
        for i, t in enumerate(trajs):
            series = coherency_series(model, t, mode, ccfg, _steps(args, t))
            name = f"coherency_{mode}_{i:03d}.csv"
            write_coherency_csv(out / name, series)
            outputs.append(name)
    return {"data": str(args.data), "checkpoint": str(args.checkpoint)}, outputs


def cmd_ensemble(args, cp, out: Path):
    _need(args, "data", "checkpoint")
    model = load_checkpoint(args.checkpoint)
    train = load_dataset(args.data, "train")
    _check_graph(model, train)
    n = _get(cp, "ensemble", "members", int)
    lr = _get(cp, "ensemble", "lr", float)
    step = _get(cp, "ensemble", "step", int)
    seed = args.seed if args.seed is not None else _get(cp, "train", "seed", int)
    members = build_sgd_ensemble(model, train, n, lr=lr, seed=seed)
    outputs = []
    (out / "members").mkdir(exist_ok=True)
    for k, m in enumerate(members):
        name = f"members/member_{k:03d}.ckpt"
        save_checkpoint(out / name, m)
        outputs.append(name)
    test = load_dataset(args.data, cp.get("evaluate", "split", fallback="test"))
    for i, t in enumerate(test):
        std = mask_ensemble_std(members, t.fields[0], t.graph, step)
        name = f"mask_std_{i:03d}.csv"
        write_node_field(out / name, t.graph.positions, std)
        outputs.append(name)
    return {"data": str(args.data), "checkpoint": str(args.checkpoint)}, outputs


def cmd_export_mask(args, cp, out: Path):
    model, trajs = _eval_setup(args, cp)
    if model.topk is None:
        raise ConfigError("export-mask needs an enhanced checkpoint")
    outputs = []
    for mode in ("single_step", "rollout"):
        for i, t in enumerate(trajs):
            _, masks = predictions(model, t, mode, _steps(args, t))
            for m, mf in enumerate(masks, start=1):
                name = f"mask_{mode}_{i:03d}_step{m:04d}.csv"
                write_node_field(out / name, t.graph.positions, mf.mask.astype(int))
                outputs.append(name)
    return {"data": str(args.data), "checkpoint": str(args.checkpoint)}, outputs


COMMANDS = {
    "datagen": cmd_datagen, "train": cmd_train, "enhance": cmd_enhance,
    "evaluate": cmd_evaluate, "rollout": cmd_rollout, "coherency": cmd_coherency,
    "ensemble": cmd_ensemble, "export-mask": cmd_export_mask,
}


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise ConfigError(f"{args.command} needs --{n}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="interpgnn", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"interpgnn {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", default=None, help="INI file overriding the built-in defaults")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None, help="dataset directory or a single trajectory file")
    p.add_argument("--lambda", dest="lam", default=None, help="real value or 'auto' (= -L_BL)")
    p.add_argument("--rf", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--checked", action="store_true", help="NaN/Inf guards on every tensor op")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    out = Path(args.out)
    prev = tc.is_checked()
    try:
        cp = load_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        tc.set_checked(args.checked or prev)
        inputs, outputs = COMMANDS[args.command](args, cp, out)
        write_manifest(out, args, inputs, outputs, started)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        tc.set_checked(prev)
    return 0


if __name__ == "__main__":
    sys.exit(main())
