"""MLPs, single-scale message passing and the multiscale (U-net style) MP layer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import DimensionError
from .tensorcore import ParameterStore, Tensor

KNN_DELTA = 1e-12


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class Mlp:
    """Linear layers with ELU between them, optional residual and layer norm.

    The residual branch is only used when input and output widths match.
    """

    def __init__(self, store: ParameterStore, prefix: str, widths, rng: np.random.Generator,
                 residual: bool = True, layer_norm: bool = True):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        self.prefix = prefix
        self.widths = tuple(int(w) for w in widths)
        self.residual = residual and self.widths[0] == self.widths[-1]
        self.layer_norm = layer_norm
        self.store = store
        for k, (a, b) in enumerate(zip(self.widths, self.widths[1:])):
            store.add(f"{prefix}.w{k}", glorot_uniform(rng, a, b))
            store.add(f"{prefix}.b{k}", np.zeros((1, b)))
        if layer_norm:
            store.add(f"{prefix}.ln_g", np.ones((1, self.widths[-1])))
            store.add(f"{prefix}.ln_b", np.zeros((1, self.widths[-1])))

    @property
    def param_names(self) -> list[str]:
        names = []
        for k in range(len(self.widths) - 1):
            names += [f"{self.prefix}.w{k}", f"{self.prefix}.b{k}"]
        if self.layer_norm:
            names += [f"{self.prefix}.ln_g", f"{self.prefix}.ln_b"]
        return names

    @staticmethod
    def count(widths, layer_norm: bool = True) -> int:
        n = sum((a + 1) * b for a, b in zip(widths, widths[1:]))
        return n + (2 * widths[-1] if layer_norm else 0)

    def __call__(self, x: Tensor) -> Tensor:
        if x.cols != self.widths[0]:
            raise DimensionError(f"{self.prefix}: input width {x.cols} != {self.widths[0]}")
        s = self.store
        h = x
        n_layers = len(self.widths) - 1
        for k in range(n_layers):
            h = tc.add_row(tc.matmul(h, s[f"{self.prefix}.w{k}"]), s[f"{self.prefix}.b{k}"])
            if k < n_layers - 1:
                h = tc.elu(h)
        if self.residual:
            h = tc.add(h, x)
        if self.layer_norm:
            h = tc.layer_norm(h, s[f"{self.prefix}.ln_g"], s[f"{self.prefix}.ln_b"])
        return h

    def zero_output(self) -> None:
        """Make the MLP output identically zero (used for baseline embedding)."""
        if self.residual:
            raise ValueError("a residual MLP cannot be zeroed through its output layer")
        if self.layer_norm:
            self.store.assign(f"{self.prefix}.ln_g", np.zeros((1, self.widths[-1])))
            self.store.assign(f"{self.prefix}.ln_b", np.zeros((1, self.widths[-1])))
        else:
            k = len(self.widths) - 2
            self.store.assign(f"{self.prefix}.w{k}", np.zeros((self.widths[-2], self.widths[-1])))
            self.store.assign(f"{self.prefix}.b{k}", np.zeros((1, self.widths[-1])))


class MessagePassingLayer:
    """Edge update F_e(e_ij, x_i, x_j), mean aggregation at receivers, node update F_n(a_i, x_i)."""

    def __init__(self, store: ParameterStore, prefix: str, n_hidden: int, rng: np.random.Generator):
        self.prefix = prefix
        self.n_hidden = n_hidden
        self.edge_mlp = Mlp(store, f"{prefix}.fe", [3 * n_hidden, n_hidden, n_hidden], rng)
        self.node_mlp = Mlp(store, f"{prefix}.fn", [2 * n_hidden, n_hidden, n_hidden], rng)

    @property
    def param_names(self) -> list[str]:
        return self.edge_mlp.param_names + self.node_mlp.param_names


def mp_forward(layer: MessagePassingLayer, x: Tensor, e: Tensor, senders, receivers) -> tuple[Tensor, Tensor]:
    senders = np.asarray(senders, dtype=np.int64)
    receivers = np.asarray(receivers, dtype=np.int64)
    if e.rows != senders.size or receivers.size != senders.size:
        raise DimensionError(f"edge features have {e.rows} rows for {senders.size} edges")
    if x.cols != layer.n_hidden or e.cols != layer.n_hidden:
        raise DimensionError("feature width does not match layer width")
    x_s = tc.gather(x, senders)
    x_r = tc.gather(x, receivers)
    e_new = layer.edge_mlp(tc.concat_cols([e, x_s, x_r]))
    agg = tc.scatter_mean(e_new, receivers, x.rows)
    x_new = layer.node_mlp(tc.concat_cols([agg, x]))
    return x_new, e_new


# ----------------------------------------------------------------- coarsening

@dataclass(frozen=True, eq=False)
class CoarseMap:
    assignment: np.ndarray          # fine node -> coarse node
    positions: np.ndarray           # voxel centres
    batch: np.ndarray               # graph id of each coarse node
    senders: np.ndarray
    receivers: np.ndarray
    edge_source: np.ndarray         # fine edges that cross between clusters
    edge_assignment: np.ndarray     # coarse edge of each crossing fine edge

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]


def build_coarse_map(positions: np.ndarray, senders, receivers, voxel_size: float,
                     batch=None, origin=None) -> CoarseMap:
    """Bin nodes into voxels of side ``voxel_size``; empty voxels give no node."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    batch = np.zeros(n, dtype=np.int64) if batch is None else np.asarray(batch, dtype=np.int64)
    senders = np.asarray(senders, dtype=np.int64)
    receivers = np.asarray(receivers, dtype=np.int64)
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return CoarseMap(empty, np.zeros((0, 2)), empty, empty, empty, empty, empty)
    origin = positions.min(axis=0) if origin is None else np.asarray(origin, dtype=np.float64)
    cells = np.floor((positions - origin) / voxel_size).astype(np.int64)
    keys = np.column_stack([batch, cells])
    uniq, assign = np.unique(keys, axis=0, return_inverse=True)
    assign = assign.reshape(-1)
    centres = origin + (uniq[:, 1:] + 0.5) * voxel_size
    a_s, a_r = assign[senders], assign[receivers]
    cross = np.nonzero(a_s != a_r)[0]
    if cross.size:
        pairs, e_assign = np.unique(np.column_stack([a_s[cross], a_r[cross]]), axis=0,
                                    return_inverse=True)
        e_assign = e_assign.reshape(-1)
        c_send, c_recv = pairs[:, 0], pairs[:, 1]
    else:
        e_assign = c_send = c_recv = np.zeros(0, dtype=np.int64)
    return CoarseMap(assign, centres, uniq[:, 0].copy(), c_send, c_recv, cross, e_assign)


def voxel_coarsen(positions, x: Tensor, e: Tensor, senders, receivers, voxel_size: float,
                  batch=None, cmap: CoarseMap | None = None):
    """Cluster means of node features and of the fine edges crossing each cluster pair."""
    if cmap is None:
        cmap = build_coarse_map(positions, senders, receivers, voxel_size, batch)
    x_c = tc.scatter_mean(x, cmap.assignment, cmap.n_nodes)
    e_c = tc.scatter_mean(tc.gather(e, cmap.edge_source), cmap.edge_assignment, cmap.senders.size)
    return cmap, x_c, e_c


def knn_weights(coarse_positions, fine_positions, k: int, coarse_batch=None, fine_batch=None):
    """Sparse (rows, cols, weights) of normalized inverse-square-distance KNN weights."""
    if k < 1:
        raise ValueError("K must be >= 1")
    cp = np.asarray(coarse_positions, dtype=np.float64).reshape(-1, 2)
    fp = np.asarray(fine_positions, dtype=np.float64).reshape(-1, 2)
    if cp.shape[0] == 0:
        raise ValueError("knn_interpolate needs at least one coarse node")
    cb = np.zeros(cp.shape[0], np.int64) if coarse_batch is None else np.asarray(coarse_batch)
    fb = np.zeros(fp.shape[0], np.int64) if fine_batch is None else np.asarray(fine_batch)
    rows, cols, wts = [], [], []
    for g in np.unique(fb):
        fi = np.nonzero(fb == g)[0]
        ci = np.nonzero(cb == g)[0]
        if ci.size == 0:
            raise ValueError(f"graph {g} has no coarse nodes")
        kk = min(k, ci.size)
        d2 = ((fp[fi, None, :] - cp[None, ci, :]) ** 2).sum(axis=2)
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        dsel = np.take_along_axis(d2, nearest, axis=1)
        w = 1.0 / (dsel + KNN_DELTA)
        w = w / w.sum(axis=1, keepdims=True)
        rows.append(np.repeat(fi, kk))
        cols.append(ci[nearest].reshape(-1))
        wts.append(w.reshape(-1))
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(wts)


def knn_interpolate(x_c: Tensor, coarse_positions, fine_positions, k: int,
                    coarse_batch=None, fine_batch=None, weights=None) -> Tensor:
    n_fine = np.asarray(fine_positions).reshape(-1, 2).shape[0]
    if weights is None:
        weights = knn_weights(coarse_positions, fine_positions, k, coarse_batch, fine_batch)
    rows, cols, w = weights
    return tc.sparse_apply(x_c, rows, cols, w, n_fine)


# ------------------------------------------------------------------ topology

@dataclass(eq=False)
class Topology:
    """Connectivity of one (possibly batched) graph plus cached coarse levels."""

    positions: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    batch: np.ndarray
    _children: dict = field(default_factory=dict, repr=False)

    @classmethod
    def single(cls, positions, senders, receivers) -> "Topology":
        positions = np.asarray(positions, dtype=np.float64)
        return cls(positions, np.asarray(senders, np.int64), np.asarray(receivers, np.int64),
                   np.zeros(positions.shape[0], dtype=np.int64))

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    def coarsen(self, voxel_size: float, knn_k: int) -> tuple[CoarseMap, "Topology", tuple]:
        key = (float(voxel_size), int(knn_k))
        hit = self._children.get(key)
        if hit is None:
            cmap = build_coarse_map(self.positions, self.senders, self.receivers, voxel_size,
                                    self.batch)
            child = Topology(cmap.positions, cmap.senders, cmap.receivers, cmap.batch)
            w = knn_weights(cmap.positions, self.positions, knn_k, cmap.batch, self.batch)
            hit = (cmap, child, w)
            self._children[key] = hit
        return hit


class MmpLayer:
    """Multiscale message passing over ``n_levels`` voxel-coarsened graphs.

    Level l: MP on the fine graph, coarsen, recurse, KNN-interpolate back,
    residual add, MP on the fine graph again. The coarsest level is one MP.
    """

    def __init__(self, store: ParameterStore, prefix: str, n_hidden: int, n_levels: int,
                 rng: np.random.Generator, knn_k: int = 4, level_factor: float = 2.0):
        if n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        self.prefix = prefix
        self.n_levels = n_levels
        self.knn_k = knn_k
        self.level_factor = level_factor
        self.pre = [MessagePassingLayer(store, f"{prefix}.pre{l}", n_hidden, rng)
                    for l in range(n_levels - 1)]
        self.bottom = MessagePassingLayer(store, f"{prefix}.bottom", n_hidden, rng)
        self.post = [MessagePassingLayer(store, f"{prefix}.post{l}", n_hidden, rng)
                     for l in range(n_levels - 1)]

    @property
    def output_layer(self) -> MessagePassingLayer:
        return self.post[0] if self.post else self.bottom

    @property
    def param_names(self) -> list[str]:
        names = []
        for layer in self.pre + [self.bottom] + self.post:
            names += layer.param_names
        return names


def mmp_forward(layer: MmpLayer, x: Tensor, e: Tensor, topo: Topology, voxel_size: float,
                level: int = 0) -> tuple[Tensor, Tensor]:
    """Returns updated fine node and edge features; coarse edge updates are discarded."""
    if level == layer.n_levels - 1:
        return mp_forward(layer.bottom, x, e, topo.senders, topo.receivers)
    x, e = mp_forward(layer.pre[level], x, e, topo.senders, topo.receivers)
    size = voxel_size * layer.level_factor ** level
    cmap, child, weights = topo.coarsen(size, layer.knn_k)
    _, x_c, e_c = voxel_coarsen(topo.positions, x, e, topo.senders, topo.receivers, size,
                                cmap=cmap)
    x_c, _ = mmp_forward(layer, x_c, e_c, child, voxel_size, level + 1)
    up = knn_interpolate(x_c, child.positions, topo.positions, layer.knn_k, weights=weights)
    x = tc.add(x, up)
    return mp_forward(layer.post[level], x, e, topo.senders, topo.receivers)
