"""Baseline training and budget-regularized interpretability enhancement."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .errors import ConsistencyError, GraphMismatchError, TrainingError
from .meshgraph import Trajectory, standardize_stats
from .model import GnnModel, HyperParams, Stats, forward
from .tensorcore import Adam, Tape, Tensor

log = logging.getLogger(__name__)

BUDGET_GUARD = 1e-30
BUDGET_FLOOR = 1e-6


@dataclass
class TrainConfig:
    lr: float = 1e-5
    lr_min: float = 1e-7
    batch_size: int = 8
    epochs: int = 100
    patience: int = 10
    factor: float = 0.5
    noise_std: float = 1e-2
    seed: int = 0
    val_fraction: float = 0.10

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr:
            raise ValueError("need 0 < lr_min <= lr")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


@dataclass
class EnhanceConfig:
    lam: float = 0.0
    rf: int = 16
    l_bl: float | None = None
    sigma: str = "tanh"

    @property
    def direct_budget(self) -> bool:
        """Negative lambda penalizes with the budget itself, not its inverse."""
        return self.lam < 0

    @classmethod
    def auto(cls, l_bl: float, rf: int = 16, sigma: str = "tanh") -> "EnhanceConfig":
        return cls(lam=-float(l_bl), rf=rf, l_bl=float(l_bl), sigma=sigma)


@dataclass
class LossReport:
    l_mse: float
    l_b: float
    l_r: float
    budget: float
    per_feature: list = field(default_factory=list)


# ------------------------------------------------------------------ losses

def mse_loss(pred, target) -> float:
    """Mean squared error per snapshot, averaged over the batch."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    err = (pred - target) ** 2
    return float(err.reshape(err.shape[0], -1).mean(axis=1).mean())


def budget(mask, pred, target) -> float:
    """Share of the squared forecast error carried by masked nodes."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask).reshape(-1)
    if mask.size != pred.shape[0]:
        raise ValueError("mask length must equal |V|")
    err = ((pred - target) ** 2).reshape(pred.shape[0], -1).sum(axis=1)
    total = err.sum()
    if total < BUDGET_GUARD:
        return 1.0
    return float((mask.astype(np.float64) * err).sum() / total)


def budget_tensor(err: Tensor, mask: np.ndarray, n_graphs: int) -> Tensor:
    """Per-graph budgets (n_graphs x 1) from stacked errors; the mask is constant."""
    n = err.rows // n_graphs
    batch = np.repeat(np.arange(n_graphs), n)
    node_sq = tc.sum_cols(tc.square(err))
    den = tc.scatter_add(node_sq, batch, n_graphs)
    num = tc.scatter_add(tc.mul(node_sq, Tensor(mask.astype(np.float64).reshape(-1, 1))),
                         batch, n_graphs)
    small = den.data < BUDGET_GUARD
    safe_den = tc.add(den, Tensor(small.astype(np.float64)))
    ratio = tc.div(num, safe_den)
    if small.any():
        ratio = tc.add(tc.mul(ratio, Tensor((~small).astype(np.float64))),
                       Tensor(small.astype(np.float64)))
    return ratio


def regularized_loss(cfg: EnhanceConfig, l_mse, budgets) -> tuple[Tensor, LossReport]:
    """L_R = L_MSE + lambda * L_B with L_B = 1/<B> (lambda >= 0) or <B> (lambda < 0)."""
    l_mse = l_mse if isinstance(l_mse, Tensor) else Tensor(float(l_mse))
    b = budgets if isinstance(budgets, Tensor) else Tensor(np.asarray(budgets, dtype=np.float64).reshape(-1, 1))
    if b.data.size == 0:
        raise ValueError("need at least one batch budget")
    mean_b = tc.mean_all(b)
    if cfg.direct_budget:
        l_b = mean_b
    else:
        l_b = tc.div(Tensor(1.0), tc.clamp_min(mean_b, BUDGET_FLOOR))
    l_r = l_mse if cfg.lam == 0 else tc.add(l_mse, tc.scale(l_b, cfg.lam))
    return l_r, LossReport(l_mse.item(), l_b.item(), l_r.item(), mean_b.item())


# ------------------------------------------------------------------ batches

def snapshot_pairs(trajs: Sequence[Trajectory]) -> list[tuple[int, int]]:
    return [(k, m) for k, t in enumerate(trajs) for m in range(t.n_steps - 1)]


def shared_graph(trajs: Sequence[Trajectory]):
    if not trajs:
        raise ValueError("need at least one trajectory")
    g = trajs[0].graph
    for t in trajs[1:]:
        if t.graph is not g and not t.graph.same_as(g):
            raise GraphMismatchError(
                f"trajectories use different graphs (|V|={g.n_nodes} vs |V|={t.graph.n_nodes})")
    return g


def _stack(trajs, pairs):
    x0 = np.stack([trajs[k].fields[m] for k, m in pairs])
    x1 = np.stack([trajs[k].fields[m + 1] for k, m in pairs])
    return x0, x1


def batch_loss(model: GnnModel, trajs, pairs, noise: np.ndarray | None = None):
    """Standardized error tensor, mean loss tensor, mask and budgets for one batch."""
    graph = trajs[pairs[0][0]].graph
    st = model.stats
    x0, x1 = _stack(trajs, pairs)
    nf = x0.shape[-1]
    xs = ((x0 - st.mean) / st.std).reshape(-1, nf)
    if noise is not None:
        xs = xs + noise
    target = ((x1 - st.mean) / st.std).reshape(-1, nf) - xs
    s, mf = forward(model, xs, graph, len(pairs))
    err = tc.sub(s, Tensor(target))
    l_mse = tc.mean_all(tc.square(err))
    budgets = budget_tensor(err, mf.mask, len(pairs)) if mf is not None else None
    return err, l_mse, mf, budgets


def evaluate_pairs(model: GnnModel, trajs, pairs, batch_size: int = 8) -> tuple[float, float]:
    """Noise-free mean L_MSE and mean budget (nan without module) over pairs."""
    if not pairs:
        return float("nan"), float("nan")
    tot = 0.0
    btot = 0.0
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        err, l_mse, mf, budgets = batch_loss(model, trajs, chunk)
        tot += l_mse.item() * len(chunk)
        if budgets is not None:
            btot += float(budgets.data.sum())
    n = len(pairs)
    return tot / n, (btot / n if model.topk is not None else float("nan"))


# ---------------------------------------------------------------- training

class PlateauScheduler:
    """Multiply lr by ``factor`` after more than ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float, patience: int, lr_min: float):
        self.lr, self.factor, self.patience, self.lr_min = lr, factor, patience, lr_min
        self.best = math.inf
        self.bad = 0

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad > self.patience:
                self.lr = max(self.lr * self.factor, self.lr_min)
                self.bad = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad": self.bad}

    def load(self, d: dict) -> None:
        self.lr, self.best, self.bad = d["lr"], d["best"], d["bad"]


def split_pairs(pairs, val_fraction: float, rng: np.random.Generator):
    idx = rng.permutation(len(pairs))
    n_val = int(round(val_fraction * len(pairs)))
    if len(pairs) >= 2:
        n_val = min(max(n_val, 1), len(pairs) - 1)
    else:
        n_val = 0
    val = sorted(pairs[i] for i in idx[:n_val])
    train = sorted(pairs[i] for i in idx[n_val:])
    return train, val


def fit(model: GnnModel, trajs: Sequence[Trajectory], cfg: TrainConfig,
        ecfg: EnhanceConfig | None = None, resume_path=None, on_epoch=None) -> list[dict]:
    """Optimize the model's trainable parameters; returns per-epoch history.

    Epoch 0 is the evaluation before any update. With ``resume_path`` the
    optimizer, scheduler and RNG state are written after each epoch and a
    previous state is picked up if present.
    """
    shared_graph(trajs)
    rng = np.random.default_rng(cfg.seed)
    train_pairs, val_pairs = split_pairs(snapshot_pairs(trajs), cfg.val_fraction, rng)
    if not train_pairs:
        raise ValueError("no training pairs")
    names = model.store.trainable_names()
    opt = Adam(cfg.lr)
    sched = PlateauScheduler(cfg.lr, cfg.factor, cfg.patience, cfg.lr_min)
    history: list[dict] = []
    start = 1
    resume_path = Path(resume_path) if resume_path else None
    if resume_path is not None and resume_path.exists():
        start, history = _load_resume(resume_path, model, opt, sched, rng)
    if not history:
        history.append(_epoch_row(model, trajs, train_pairs, val_pairs, 0, sched.lr, cfg))
        if on_epoch:
            on_epoch(history[-1])
    nf = model.hp.n_features
    n_nodes = trajs[0].graph.n_nodes
    for epoch in range(start, cfg.epochs + 1):
        order = rng.permutation(len(train_pairs))
        opt.lr = sched.lr
        for i in range(0, len(order), cfg.batch_size):
            chunk = [train_pairs[j] for j in order[i:i + cfg.batch_size]]
            noise = None
            if cfg.noise_std > 0:
                noise = rng.normal(0.0, cfg.noise_std, size=(len(chunk) * n_nodes, nf))
            try:
                with Tape() as tape:
                    err, l_mse, mf, budgets = batch_loss(model, trajs, chunk, noise)
                    loss = l_mse
                    if ecfg is not None and ecfg.lam != 0:
                        loss, _ = regularized_loss(ecfg, l_mse, budgets)
                if not np.isfinite(loss.item()):
                    raise FloatingPointError("loss is not finite")
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, batch {i // cfg.batch_size}: {exc}") from exc
            grads = tape.gradient(loss, [model.store[n] for n in names])
            opt.step(model.store, dict(zip(names, grads)))
        row = _epoch_row(model, trajs, train_pairs, val_pairs, epoch, sched.lr, cfg)
        history.append(row)
        sched.step(row["val_mse"] if val_pairs else row["train_mse"])
        if resume_path is not None:
            _save_resume(resume_path, model, opt, sched, rng, epoch, history)
        if on_epoch:
            on_epoch(row)
        log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, row["train_mse"], row["val_mse"], sched.lr)
    return history


def _epoch_row(model, trajs, train_pairs, val_pairs, epoch, lr, cfg) -> dict:
    try:
        tr, tb = evaluate_pairs(model, trajs, train_pairs, cfg.batch_size)
        va, _ = evaluate_pairs(model, trajs, val_pairs, cfg.batch_size)
    except FloatingPointError as exc:
        raise TrainingError(f"non-finite values evaluating epoch {epoch}: {exc}") from exc
    if not (np.isfinite(tr) and (np.isfinite(va) or not val_pairs)):
        raise TrainingError(f"non-finite loss evaluating epoch {epoch}")
    row = {"epoch": epoch, "train_mse": tr, "val_mse": va, "lr": lr}
    if model.topk is not None:
        row["budget"] = tb
    return row


def _save_resume(path: Path, model, opt: Adam, sched, rng, epoch, history) -> None:
    arrays = {f"p:{n}": model.store[n].data for n in model.store}
    arrays.update({f"m:{n}": v for n, v in opt.m.items()})
    arrays.update({f"v:{n}": v for n, v in opt.v.items()})
    state = {"epoch": epoch, "t": opt.t, "sched": sched.state(),
             "rng": rng.bit_generator.state, "history": history}
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, state=np.frombuffer(json.dumps(state).encode(), dtype=np.uint8), **arrays)
    tmp.replace(path)


def _load_resume(path: Path, model, opt: Adam, sched, rng):
    with np.load(path) as z:
        state = json.loads(bytes(z["state"]).decode())
        for key in z.files:
            if key.startswith("p:"):
                model.store.assign(key[2:], z[key])
            elif key.startswith("m:"):
                opt.m[key[2:]] = z[key].copy()
            elif key.startswith("v:"):
                opt.v[key[2:]] = z[key].copy()
    opt.t = state["t"]
    sched.load(state["sched"])
    rng.bit_generator.state = state["rng"]
    return state["epoch"] + 1, state["history"]


def make_stats(trajs: Sequence[Trajectory]) -> Stats:
    mean, std = standardize_stats(trajs)
    return Stats(mean, std, shared_graph(trajs).mean_edge_length or 1.0)


def train_baseline(trajs: Sequence[Trajectory], cfg: TrainConfig, hp: HyperParams | None = None,
                   resume_path=None, on_epoch=None) -> GnnModel:
    """Train G_B on L_MSE; L_BL is the final validation MSE."""
    if not trajs:
        raise ValueError("need at least one trajectory")
    hp = hp or HyperParams()
    hp = HyperParams(**{**asdict(hp), "module": False, "seed": cfg.seed})
    model = GnnModel(hp, make_stats(trajs))
    history = fit(model, trajs, cfg, None, resume_path, on_epoch)
    last = history[-1]
    model.meta = {"kind": "baseline", "epochs": last["epoch"], "l_bl": last["val_mse"],
                  "train_mse": last["train_mse"], "history": history, "config": asdict(cfg)}
    return model


def enhance(baseline: GnnModel, trajs: Sequence[Trajectory], cfg: TrainConfig, ecfg: EnhanceConfig,
            resume_path=None, on_epoch=None) -> GnnModel:
    """Append the sub-sampling module to a frozen copy of ``baseline`` and train it."""
    if baseline.topk is not None:
        raise ConsistencyError("enhance expects a baseline model without module")
    model = GnnModel.enhanced_from(baseline, ecfg.rf, ecfg.sigma, cfg.seed)
    history = fit(model, trajs, cfg, ecfg, resume_path, on_epoch)
    last = history[-1]
    model.meta = {"kind": "enhanced", "baseline": {k: v for k, v in baseline.meta.items() if k != "history"},
                  "lambda": ecfg.lam, "rf": ecfg.rf, "l_bl": ecfg.l_bl, "epochs": last["epoch"],
                  "train_mse": last["train_mse"], "val_mse": last["val_mse"],
                  "budget": last.get("budget"), "history": history, "config": asdict(cfg)}
    return model
