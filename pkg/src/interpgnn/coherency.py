"""Mask coherency: rasterize a masked field, cluster it with DBSCAN, count clusters."""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .evaluation import predictions
from .errors import ConsistencyError
from .meshgraph import Trajectory
from .pooling import MaskedField

NOISE = -1


@dataclass(frozen=True)
class CoherencyConfig:
    length: float = 1.0
    divisor: int = 50
    eps_mult: float = 3.0
    min_pts: int = 3
    crop: tuple[float, float, float, float] | None = None   # x0, x1, y0, y1

    def __post_init__(self):
        if self.length <= 0 or self.divisor < 1 or self.eps_mult <= 0 or self.min_pts < 1:
            raise ValueError("need L > 0, divisor >= 1, eps > 0 and n_p >= 1")
        if self.crop is not None:
            x0, x1, y0, y1 = self.crop
            if not (x1 > x0 and y1 > y0):
                raise ValueError(f"empty crop window {self.crop}")

    @property
    def dx(self) -> float:
        return self.length / self.divisor

    @property
    def eps(self) -> float:
        return self.eps_mult * self.dx


@dataclass
class ClusterResult:
    labels: np.ndarray      # cluster id per point, NOISE for noise
    n_clusters: int
    core: np.ndarray        # bool per point


def grid_centers(cfg: CoherencyConfig, positions: np.ndarray) -> np.ndarray:
    """Cell centres of the structured grid covering the crop window."""
    if cfg.crop is None:
        x0, y0 = positions.min(axis=0)
        x1, y1 = positions.max(axis=0)
    else:
        x0, x1, y0, y1 = cfg.crop
    dx = cfg.dx
    nx = max(1, int(np.ceil((x1 - x0) / dx - 1e-9)))
    ny = max(1, int(np.ceil((y1 - y0) / dx - 1e-9)))
    xs = x0 + (np.arange(nx) + 0.5) * dx
    ys = y0 + (np.arange(ny) + 0.5) * dx
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.reshape(-1), gy.reshape(-1)])


def nearest_nodes(positions: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest node per centre; exact distance ties go to the lower index."""
    k = min(4, positions.shape[0])
    tree = cKDTree(positions)
    _, idx = tree.query(centers, k=k)
    idx = idx.reshape(centers.shape[0], k)
    d2 = ((positions[idx] - centers[:, None, :]) ** 2).sum(axis=2)
    best = d2.min(axis=1, keepdims=True)
    cand = np.where(d2 == best, idx, np.iinfo(np.int64).max)
    return cand.min(axis=1)


_NN_CACHE: dict = {}


def _raster_map(positions: np.ndarray, cfg: CoherencyConfig):
    key = (positions.shape, hash(positions.tobytes()), cfg.crop, cfg.dx)
    hit = _NN_CACHE.get(key)
    if hit is None:
        centers = grid_centers(cfg, positions)
        if cfg.crop is not None:
            x0, x1, y0, y1 = cfg.crop
            inside = ((positions[:, 0] >= x0) & (positions[:, 0] <= x1)
                      & (positions[:, 1] >= y0) & (positions[:, 1] <= y1))
            if not inside.any():
                hit = (centers[:0], np.zeros(0, dtype=np.int64))
        if hit is None:
            hit = (centers, nearest_nodes(positions, centers))
        if len(_NN_CACHE) > 32:
            _NN_CACHE.clear()
        _NN_CACHE[key] = hit
    return hit


def rasterize_mask(mask, positions, cfg: CoherencyConfig) -> np.ndarray:
    """Centres of crop-grid cells whose nearest graph node is retained."""
    m = mask.mask if isinstance(mask, MaskedField) else np.asarray(mask)
    positions = np.asarray(positions, dtype=np.float64)
    if m.shape[0] != positions.shape[0]:
        raise ConsistencyError("mask length does not match the number of nodes")
    centers, nn = _raster_map(positions, cfg)
    if nn.size == 0:
        return np.zeros((0, 2))
    return centers[m.astype(bool)[nn]]


def dbscan(points, eps: float, min_pts: int) -> ClusterResult:
    """DBSCAN with neighbourhoods d^2 <= eps^2 counted inclusive of the point.

    Points are scanned in ascending index order and clusters are grown
    breadth-first, so a border point joins the first cluster that reaches it.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return ClusterResult(labels, 0, np.zeros(0, dtype=bool))
    tree = cKDTree(pts)
    eps2 = eps * eps
    neigh = []
    for i, cand in enumerate(tree.query_ball_point(pts, eps * (1.0 + 1e-9))):
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        d2 = ((pts[cand] - pts[i]) ** 2).sum(axis=1)
        neigh.append(cand[d2 <= eps2])
    core = np.array([nb.size >= min_pts for nb in neigh])
    cid = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cid
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for q in neigh[j]:
                if labels[q] == NOISE:
                    labels[q] = cid
                    if core[q]:
                        queue.append(q)
        cid += 1
    return ClusterResult(labels, cid, core)


def coherency_series(model, traj: Trajectory, mode: str = "single_step",
                     cfg: CoherencyConfig | None = None, n_steps: int | None = None) -> list[int]:
    """Number of DBSCAN clusters of the rasterized mask at each predicted step."""
    if model.topk is None:
        raise ConsistencyError("coherency needs a model with the sub-sampling module")
    cfg = cfg or CoherencyConfig()
    _, masks = predictions(model, traj, mode, n_steps)
    return [count_clusters(mf, traj.graph.positions, cfg) for mf in masks]


def count_clusters(mask, positions, cfg: CoherencyConfig) -> int:
    return dbscan(rasterize_mask(mask, positions, cfg), cfg.eps, cfg.min_pts).n_clusters


def write_coherency_csv(path, series: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "n_clusters"])
        for m, c in enumerate(series, start=1):
            w.writerow([m, int(c)])
