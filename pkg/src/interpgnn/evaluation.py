"""Single-step and rollout evaluation: RMSE, budgets, error series, mask ensembles."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConsistencyError
from .meshgraph import Graph, Trajectory
from .model import GnnModel, copy_model, predict_step, same_architecture, standardize
from .tensorcore import Tape, sgd_step
from .training import EnhanceConfig, batch_loss, budget, regularized_loss, snapshot_pairs

log = logging.getLogger(__name__)

MODES = ("single_step", "rollout")
FEATURES = ("u", "v")


@dataclass
class EvalReport:
    rmse: np.ndarray                       # per feature, % of u_in
    budgets: list = field(default_factory=list)
    mae: np.ndarray | None = None          # (n_steps + 1) x N_F, row 0 is zero
    meta: dict = field(default_factory=dict)


@dataclass
class RolloutResult:
    states: np.ndarray                     # (n + 1) x |V| x N_F, states[0] = X_0
    masks: list                            # MaskedField per predicted step (empty without module)
    nan_step: int | None = None            # first step whose state was non-finite


def rmse(pred, target, u_in: float) -> np.ndarray:
    """Per-feature 100 * <sqrt(mean_i err^2)> / u_in, averaged over samples."""
    if u_in <= 0:
        raise ValueError("u_in must be positive")
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    per_sample = np.sqrt(((pred - target) ** 2).mean(axis=1))
    return 100.0 * per_sample.mean(axis=0) / u_in


def rollout(model: GnnModel, x0, graph: Graph, n_steps: int) -> RolloutResult:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = np.asarray(x0, dtype=np.float64)
    states = [x]
    masks = []
    nan_step = None
    for m in range(n_steps):
        x, mf = predict_step(model, x, graph, return_mask=True)
        if not np.all(np.isfinite(x)):
            nan_step = m + 1
            log.warning("rollout state became non-finite at step %d; truncated", nan_step)
            break
        states.append(x)
        if mf is not None:
            masks.append(mf)
    return RolloutResult(np.stack(states), masks, nan_step)


def _std_budget(model: GnnModel, mask, pred, target) -> float:
    # budgets are taken in standardized units, as in training
    return budget(mask, standardize(model, pred), standardize(model, target))


def _n_steps(traj: Trajectory, n_steps: int | None) -> int:
    n = traj.n_steps - 1 if n_steps is None else int(n_steps)
    if not 1 <= n <= traj.n_steps - 1:
        raise ValueError(f"n_steps must lie in [1, {traj.n_steps - 1}]")
    return n


def predictions(model: GnnModel, traj: Trajectory, mode: str = "single_step",
                n_steps: int | None = None) -> tuple[np.ndarray, list]:
    """Predicted X_1..X_n and the mask used for each prediction."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    n = _n_steps(traj, n_steps)
    if mode == "rollout":
        res = rollout(model, traj.fields[0], traj.graph, n)
        return res.states[1:], res.masks
    # one snapshot per forward so single-step and rollout share identical arithmetic
    outs, masks = [], []
    for m in range(n):
        x, mf = predict_step(model, traj.fields[m], traj.graph, return_mask=True)
        outs.append(x)
        if mf is not None:
            masks.append(mf)
    return np.stack(outs), masks


def budget_series(model: GnnModel, traj: Trajectory, mode: str = "single_step",
                  n_steps: int | None = None) -> list[float]:
    if model.topk is None:
        raise ConsistencyError("budget series needs a model with the sub-sampling module")
    preds, masks = predictions(model, traj, mode, n_steps)
    return [_std_budget(model, mf.mask, preds[m], traj.fields[m + 1]) for m, mf in enumerate(masks)]


def mae_series(preds: np.ndarray, traj: Trajectory) -> np.ndarray:
    """Per-feature mean absolute error per step; row 0 is the exact initial condition."""
    n = preds.shape[0]
    err = np.abs(preds - traj.fields[1:n + 1]).mean(axis=1)
    return np.vstack([np.zeros((1, preds.shape[-1])), err])


def evaluate_trajectory(model: GnnModel, traj: Trajectory, mode: str = "single_step",
                        n_steps: int | None = None) -> EvalReport:
    preds, masks = predictions(model, traj, mode, n_steps)
    n = preds.shape[0]
    budgets = [_std_budget(model, mf.mask, preds[m], traj.fields[m + 1]) for m, mf in enumerate(masks)]
    return EvalReport(rmse(preds, traj.fields[1:n + 1], traj.u_in), budgets, mae_series(preds, traj),
                      {"re": traj.control, "mode": mode, "rf": model.hp.rf if model.topk else None,
                       "lambda": model.meta.get("lambda")})


def mean_test_metrics(model: GnnModel, trajs: Sequence[Trajectory]) -> tuple[float, float]:
    """Single-step RMSE (mean over features and trajectories) and mean budget."""
    rm, bs = [], []
    for t in trajs:
        rep = evaluate_trajectory(model, t, "single_step")
        rm.append(rep.rmse.mean())
        bs.extend(rep.budgets)
    return float(np.mean(rm)), (float(np.mean(bs)) if bs else float("nan"))


# ----------------------------------------------------------------- ensembles

def mask_ensemble_std(models: Sequence[GnnModel], x0, graph: Graph, step: int = 0) -> np.ndarray:
    """Per-node population std of the masks the members produce at a rollout step."""
    if len(models) < 1:
        raise ValueError("need at least one model")
    ref = models[0]
    for m in models[1:]:
        if not same_architecture(ref, m):
            raise ConsistencyError("ensemble members differ in architecture")
    masks = []
    for m in models:
        if m.topk is None:
            raise ConsistencyError("ensemble members need the sub-sampling module")
        x = np.asarray(x0, dtype=np.float64)
        if step > 0:
            x = rollout(m, x, graph, step).states[-1]
        _, mf = predict_step(m, x, graph, return_mask=True)
        masks.append(mf.mask.astype(np.float64))
    return np.std(np.stack(masks), axis=0)


def build_sgd_ensemble(model: GnnModel, trajs: Sequence[Trajectory], n_members: int,
                       lr: float = 1e-7, batch_size: int = 8, seed: int = 0) -> list[GnnModel]:
    """Members are the states after each of ``n_members`` plain SGD iterations on the module."""
    if model.topk is None:
        raise ConsistencyError("ensemble needs an enhanced model")
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    lam = float(model.meta.get("lambda") or 0.0)
    ecfg = EnhanceConfig(lam=lam, rf=model.hp.rf)
    pairs = snapshot_pairs(trajs)
    rng = np.random.default_rng(seed)
    work = copy_model(model)
    work.store.set_trainable(work.baseline_names(), False)
    work.store.set_trainable(work.module_names(), True)
    names = work.store.trainable_names()
    members = []
    for _ in range(n_members):
        idx = rng.choice(len(pairs), size=min(batch_size, len(pairs)), replace=False)
        chunk = [pairs[i] for i in sorted(idx)]
        with Tape() as tape:
            _, l_mse, _, budgets = batch_loss(work, trajs, chunk)
            loss = l_mse if lam == 0 else regularized_loss(ecfg, l_mse, budgets)[0]
        grads = tape.gradient(loss, [work.store[n] for n in names])
        sgd_step(work.store, dict(zip(names, grads)), lr)
        members.append(copy_model(work))
    return members


# ----------------------------------------------------------------- CSV output

def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def write_step_csv(path, budgets: Sequence[float], mae: np.ndarray) -> None:
    """``step,budget,mae_u,mae_v``; step 0 is the initial condition (no budget)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "budget", "mae_u", "mae_v"])
        for m in range(mae.shape[0]):
            b = budgets[m - 1] if 0 < m <= len(budgets) else None
            w.writerow([m, _fmt(b), _fmt(mae[m, 0]), _fmt(mae[m, 1])])


def write_rmse_csv(path, rows: Sequence[tuple[float, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["re", "feature", "rmse_pct"])
        for re_, feat, val in rows:
            w.writerow([_fmt(re_), feat, _fmt(val)])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def rmse_rows(report: EvalReport) -> list[tuple[float, str, float]]:
    return [(report.meta["re"], FEATURES[j] if j < len(FEATURES) else f"f{j}", float(v))
            for j, v in enumerate(report.rmse)]
