"""Top-K projection/truncation pooling and the masked fields it produces."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConsistencyError, DimensionError
from .meshgraph import read_node_field, write_node_field
from .tensorcore import ParameterStore, Tensor

NORM_DELTA = 1e-12
SIGMAS = {"tanh": tc.tanh, "relu": tc.relu}


def pool_size(n_nodes: int, rf: int) -> int:
    """Number of retained nodes, max(1, floor(|V| / RF))."""
    if rf < 1:
        raise ValueError("RF must be >= 1")
    return max(1, n_nodes // rf)


class TopKLayer:
    def __init__(self, store: ParameterStore, name: str, n_hidden: int, rf: int,
                 sigma: str = "tanh", rng: np.random.Generator | None = None):
        if sigma not in SIGMAS:
            raise ValueError(f"sigma must be one of {sorted(SIGMAS)}")
        if rf < 1:
            raise ValueError("RF must be >= 1")
        self.name = name
        self.rf = int(rf)
        self.sigma = sigma
        self.store = store
        rng = rng or np.random.default_rng(0)
        lim = 1.0 / np.sqrt(n_hidden)
        store.add(name, rng.uniform(-lim, lim, size=(n_hidden, 1)))

    @property
    def param_names(self) -> list[str]:
        return [self.name]

    @property
    def projection(self) -> Tensor:
        return self.store[self.name]


@dataclass(eq=False)
class MaskedField:
    """Retained-node indicator plus the vertex-induced sub-graph.

    For batched inputs every array spans all graphs in the batch; use
    :meth:`split` to get one field per graph.
    """

    mask: np.ndarray            # bool, one per node
    retained: np.ndarray        # ascending node indices
    senders: np.ndarray         # induced edges, indices into ``retained``
    receivers: np.ndarray
    scores: np.ndarray          # sigma(X p / |p|), one per node
    n_graphs: int = 1
    edge_ids: np.ndarray | None = None   # induced edges as indices into the input edge list

    @property
    def k(self) -> int:
        return int(self.retained.size) // self.n_graphs

    def split(self) -> list["MaskedField"]:
        if self.n_graphs == 1:
            return [self]
        n = self.mask.size // self.n_graphs
        k = self.k
        out = []
        sub_graph = np.repeat(np.arange(self.n_graphs), k)
        edge_graph = sub_graph[self.senders] if self.senders.size else self.senders
        for b in range(self.n_graphs):
            sel = edge_graph == b
            out.append(MaskedField(self.mask[b * n:(b + 1) * n].copy(),
                                   self.retained[b * k:(b + 1) * k] - b * n,
                                   self.senders[sel] - b * k, self.receivers[sel] - b * k,
                                   self.scores[b * n:(b + 1) * n].copy()))
        return out

    def original_edges(self) -> list[tuple[int, int]]:
        return list(zip(self.retained[self.senders].tolist(), self.retained[self.receivers].tolist()))


def select_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties to the lower index, returned ascending."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return np.sort(order[:k])


def induced_subgraph(retained: np.ndarray, senders, receivers, n_nodes: int):
    """Edges with both endpoints retained, re-indexed into ``retained`` order.

    Returns (senders, receivers, edge_ids).
    """
    pos = np.full(n_nodes, -1, dtype=np.int64)
    pos[retained] = np.arange(retained.size)
    s = np.asarray(senders, dtype=np.int64)
    r = np.asarray(receivers, dtype=np.int64)
    keep = np.nonzero((pos[s] >= 0) & (pos[r] >= 0))[0]
    return pos[s[keep]], pos[r[keep]], keep


def projection_scores(layer: TopKLayer, x: Tensor) -> Tensor:
    p = layer.projection
    if x.cols != p.rows:
        raise DimensionError(f"projection width {p.rows} != feature width {x.cols}")
    norm = tc.sqrt(tc.sum_all(tc.square(p)))
    inv = tc.div(Tensor(1.0), tc.add(norm, Tensor(NORM_DELTA)))
    proj = tc.matmul(x, p)
    proj = tc.mul_col(proj, tc.gather(inv, np.zeros(x.rows, dtype=np.int64)))
    return SIGMAS[layer.sigma](proj)


def topk_pool(layer: TopKLayer, x: Tensor, senders, receivers, n_graphs: int = 1):
    """Score nodes, keep the K best per graph and gate them by their score.

    Returns (x_sub, MaskedField); x_sub has K rows per graph.
    """
    n_total = x.rows
    if n_total % n_graphs:
        raise DimensionError("batched node count not divisible by n_graphs")
    n = n_total // n_graphs
    k = pool_size(n, layer.rf)
    y = projection_scores(layer, x)
    yd = y.data.reshape(n_graphs, n)
    retained = np.concatenate([select_topk(yd[b], k) + b * n for b in range(n_graphs)])
    sub_s, sub_r, eids = induced_subgraph(retained, senders, receivers, n_total)
    x_sub = tc.mul_col(tc.gather(x, retained), tc.gather(y, retained))
    mask = np.zeros(n_total, dtype=bool)
    mask[retained] = True
    return x_sub, MaskedField(mask, retained, sub_s, sub_r, y.data.reshape(-1).copy(), n_graphs,
                              eids)


def unpool(x_sub: Tensor, retained, n_nodes: int) -> Tensor:
    """Scatter retained rows back to their original positions; other rows are zero."""
    retained = np.asarray(retained, dtype=np.int64)
    if np.unique(retained).size != retained.size:
        raise ConsistencyError("unpool: duplicate retained index")
    return tc.scatter_rows(x_sub, retained, n_nodes)


def mask_to_field(mf: MaskedField, positions: np.ndarray) -> list[tuple[float, float, int]]:
    positions = np.asarray(positions)
    if positions.shape[0] != mf.mask.size:
        raise DimensionError("positions do not match mask length")
    return [(float(x), float(y), int(v)) for (x, y), v in zip(positions, mf.mask)]


def export_mask(path_or_buf, mf: MaskedField, positions: np.ndarray) -> None:
    write_node_field(path_or_buf, np.asarray(positions), mf.mask.astype(int))


def parse_mask(path_or_buf) -> np.ndarray:
    _, vals = read_node_field(path_or_buf)
    return vals.astype(int) == 1
