"""Encode-process-decode GNN with an optional Top-K sub-sampling module.

The module sits on a skip connection: it reads the output of the first
processor layer, pools it, runs one MMP layer on the induced sub-graph and
adds the un-pooled result back before the remaining processor layers.
"""
from __future__ import annotations

import io
import json
import struct
import weakref
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .errors import DimensionError, FormatError
from .layers import MmpLayer, Mlp, Topology, mmp_forward
from .meshgraph import Graph
from .pooling import MaskedField, TopKLayer, induced_subgraph, topk_pool, unpool
from .tensorcore import ParameterStore, Tensor

CKPT_MAGIC = b"GSCK0001"
CKPT_VERSION = 1
MODULE_PREFIX = "mod."


@dataclass
class HyperParams:
    n_features: int = 2
    n_hidden: int = 128
    n_layers: int = 2
    rf: int = 16
    module: bool = False
    levels: int = 2
    voxel_factor: float = 2.0
    knn_k: int = 4
    sigma: str = "tanh"
    seed: int = 0

    def validate(self) -> None:
        if self.n_layers < 1 or self.n_hidden < 1 or self.n_features < 1:
            raise ValueError("model needs at least one processor layer and positive widths")
        if self.module and self.n_layers < 2:
            raise ValueError("the sub-sampling module needs L >= 2 processor layers")
        if self.levels < 1 or self.rf < 1 or self.knn_k < 1 or self.voxel_factor <= 0:
            raise ValueError("invalid levels / rf / knn_k / voxel_factor")
        if self.sigma not in ("tanh", "relu"):
            raise ValueError("sigma must be tanh or relu")


@dataclass
class Stats:
    mean: np.ndarray
    std: np.ndarray
    edge_scale: float = 1.0

    def to_json(self) -> dict:
        return {"mean": self.mean.reshape(-1).tolist(), "std": self.std.reshape(-1).tolist(),
                "edge_scale": self.edge_scale}

    @classmethod
    def from_json(cls, d: dict) -> "Stats":
        return cls(np.array(d["mean"], dtype=np.float64).reshape(1, -1),
                   np.array(d["std"], dtype=np.float64).reshape(1, -1), float(d["edge_scale"]))


class GnnModel:
    def __init__(self, hp: HyperParams, stats: Stats | None = None):
        hp.validate()
        self.hp = hp
        self.stats = stats
        self.meta: dict = {}
        self.store = ParameterStore()
        rng = np.random.default_rng(hp.seed)
        nf, nh = hp.n_features, hp.n_hidden
        s = self.store
        self.node_encoder = Mlp(s, "enc_node", [nf, nh, nh, nh], rng)
        self.edge_encoder = Mlp(s, "enc_edge", [2, nh, nh, nh], rng)
        self.processor = [MmpLayer(s, f"proc{l}", nh, hp.levels, rng, hp.knn_k)
                          for l in range(hp.n_layers)]
        self.decoder = Mlp(s, "dec", [nh, nh, nh, nf], rng, layer_norm=False)
        self.topk = self.module_mmp = None
        if hp.module:
            mrng = np.random.default_rng([hp.seed, 1])
            self.topk = TopKLayer(s, "mod.topk.p", nh, hp.rf, hp.sigma, mrng)
            self.module_mmp = MmpLayer(s, "mod.mmp", nh, hp.levels, mrng, hp.knn_k)
            self.module_mmp.output_layer.node_mlp.zero_output()
        self._topologies: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()

    # -------------------------------------------------------------- names

    def baseline_names(self) -> list[str]:
        return [n for n in self.store if not n.startswith(MODULE_PREFIX)]

    def module_names(self) -> list[str]:
        return [n for n in self.store if n.startswith(MODULE_PREFIX)]

    @classmethod
    def enhanced_from(cls, baseline: "GnnModel", rf: int | None = None, sigma: str | None = None,
                      seed: int | None = None) -> "GnnModel":
        """Copy baseline parameters bit-exactly, append the module, freeze the baseline."""
        hp = HyperParams(**{**asdict(baseline.hp), "module": True})
        if rf is not None:
            hp.rf = int(rf)
        if sigma is not None:
            hp.sigma = sigma
        if seed is not None:
            hp.seed = int(seed)
        model = cls(hp, baseline.stats)
        for name in baseline.store:
            model.store.assign(name, baseline.store[name].data.copy())
        model.store.set_trainable(model.baseline_names(), False)
        model.store.set_trainable(model.module_names(), True)
        model.meta = {"baseline": dict(baseline.meta)}
        return model

    # ----------------------------------------------------------- topology

    def topology(self, graph: Graph, n_graphs: int = 1) -> "BatchTopology":
        per_graph = self._topologies.setdefault(graph, {})
        topo = per_graph.get(n_graphs)
        if topo is None:
            topo = per_graph[n_graphs] = BatchTopology.build(graph, n_graphs)
        return topo

    def voxel_size(self, graph: Graph) -> float:
        base = graph.mean_edge_length
        return self.hp.voxel_factor * (base if base > 0 else 1.0)


@dataclass(eq=False)
class BatchTopology:
    """Disjoint union of ``n_graphs`` copies of a graph in canonical node order.

    Nodes are sorted by position and edges by (receiver, sender), so every
    reduction sees its terms in an order independent of the input labelling.
    """

    graph: Graph
    n_graphs: int
    perm: np.ndarray        # canonical position -> input node (batched)
    inv: np.ndarray         # input node -> canonical position (batched)
    topo: Topology
    edge_features: np.ndarray

    @classmethod
    def build(cls, graph: Graph, n_graphs: int) -> "BatchTopology":
        pos = graph.positions
        n = graph.n_nodes
        order = np.lexsort((pos[:, 1], pos[:, 0]))
        inv = np.empty(n, dtype=np.int64)
        inv[order] = np.arange(n)
        s, r = inv[graph.senders], inv[graph.receivers]
        eorder = np.lexsort((s, r))
        s, r = s[eorder], r[eorder]
        offs = np.arange(n_graphs) * n
        cpos = pos[order]
        positions = np.tile(cpos, (n_graphs, 1))
        senders = (s[None, :] + offs[:, None]).reshape(-1)
        receivers = (r[None, :] + offs[:, None]).reshape(-1)
        batch = np.repeat(np.arange(n_graphs), n)
        perm = (order[None, :] + offs[:, None]).reshape(-1)
        binv = (inv[None, :] + offs[:, None]).reshape(-1)
        topo = Topology(positions, senders, receivers, batch)
        ef = positions[senders] - positions[receivers]
        return cls(graph, n_graphs, perm, binv, topo, ef)


def forward(model: GnnModel, x_std, graph: Graph, n_graphs: int = 1):
    """Standardized rate S_m for standardized input X_m (rows stacked per graph).

    Returns (S, MaskedField or None); the mask refers to input node labels.
    """
    x = x_std if isinstance(x_std, Tensor) else Tensor(np.asarray(x_std).reshape(-1, model.hp.n_features))
    n = graph.n_nodes
    if x.rows != n * n_graphs or x.cols != model.hp.n_features:
        raise DimensionError(f"input {x.shape} does not match graph |V|={n} x {n_graphs}")
    bt = model.topology(graph, n_graphs)
    topo = bt.topo
    scale = model.stats.edge_scale if model.stats is not None else 1.0
    h = model.node_encoder(tc.gather(x, bt.perm))
    e = model.edge_encoder(Tensor(bt.edge_features / scale))
    vox = model.voxel_size(graph)
    mf = None
    for l, layer in enumerate(model.processor):
        h, e = mmp_forward(layer, h, e, topo, vox)
        if l == 0 and model.topk is not None:
            h, mf = _module_forward(model, h, e, bt, vox)
    s_canon = model.decoder(h)
    out = tc.gather(s_canon, bt.inv)
    if mf is not None:
        mf = _relabel_mask(mf, bt)
    return out, mf


def _module_forward(model: GnnModel, h: Tensor, e: Tensor, bt: BatchTopology, vox: float):
    topo = bt.topo
    x_sub, mf = topk_pool(model.topk, h, topo.senders, topo.receivers, bt.n_graphs)
    e_sub = tc.gather(e, mf.edge_ids)
    sub_topo = Topology(topo.positions[mf.retained], mf.senders, mf.receivers,
                        topo.batch[mf.retained])
    x_mod, _ = mmp_forward(model.module_mmp, x_sub, e_sub, sub_topo, vox)
    return tc.add(h, unpool(x_mod, mf.retained, h.rows)), mf


def _relabel_mask(mf: MaskedField, bt: BatchTopology) -> MaskedField:
    mask = mf.mask[bt.inv]
    retained = np.nonzero(mask)[0]
    n = bt.graph.n_nodes
    g = bt.graph
    offs = np.arange(bt.n_graphs) * n
    send = (g.senders[None, :] + offs[:, None]).reshape(-1)
    recv = (g.receivers[None, :] + offs[:, None]).reshape(-1)
    s, r, eids = induced_subgraph(retained, send, recv, mask.size)
    return MaskedField(mask, retained, s, r, mf.scores[bt.inv], bt.n_graphs, eids)


def copy_model(model: GnnModel) -> GnnModel:
    """Independent copy with identical parameters, trainable flags and metadata."""
    out = GnnModel(HyperParams(**asdict(model.hp)), model.stats)
    for name in model.store:
        out.store.assign(name, model.store[name].data.copy())
        out.store.set_trainable([name], model.store.is_trainable(name))
    out.meta = json.loads(json.dumps(model.meta))
    return out


def same_architecture(a: GnnModel, b: GnnModel) -> bool:
    return (a.store.names() == b.store.names()
            and all(a.store[n].shape == b.store[n].shape for n in a.store))


def standardize(model: GnnModel, x_phys: np.ndarray) -> np.ndarray:
    return (x_phys - model.stats.mean) / model.stats.std


def predict_step(model: GnnModel, x_phys: np.ndarray, graph: Graph, return_mask: bool = False):
    """X_{m+1} = X_m + S_m mapped back to physical units.

    ``x_phys`` is |V| x N_F or B x |V| x N_F (a batch of snapshots on one graph).
    """
    x_phys = np.asarray(x_phys, dtype=np.float64)
    batched = x_phys.ndim == 3
    xb = x_phys if batched else x_phys[None]
    nb = xb.shape[0]
    flat = xb.reshape(-1, xb.shape[-1])
    s, mf = forward(model, standardize(model, flat), graph, nb)
    nxt = (flat + s.data * model.stats.std).reshape(xb.shape)
    out = nxt if batched else nxt[0]
    if return_mask:
        return out, mf
    return out


def count_parameters(model: GnnModel) -> dict:
    groups: dict[str, int] = {}
    for name, t in model.store.items():
        parts = name.split(".")
        key = ".".join(parts[:2]) if name.startswith(MODULE_PREFIX) else parts[0]
        groups[key] = groups.get(key, 0) + t.data.size
    base = model.store.n_params(model.baseline_names())
    mod = model.store.n_params(model.module_names())
    return {"groups": groups, "baseline": base, "module": mod, "total": base + mod,
            "ratio": mod / base if base else 0.0}


# ----------------------------------------------------------------- checkpoint

def save_checkpoint(path, model: GnnModel) -> None:
    """Magic, u32 version, u64 metadata length, UTF-8 JSON metadata, float64 payload."""
    names = model.store.names()
    meta = {
        "hyperparams": asdict(model.hp),
        "stats": model.stats.to_json() if model.stats is not None else None,
        "params": [{"name": n, "shape": list(model.store[n].shape),
                    "trainable": model.store.is_trainable(n)} for n in names],
        "meta": model.meta,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
    buf.write(blob)
    for n in names:
        buf.write(model.store[n].data.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> GnnModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header")
    version, mlen = struct.unpack_from("<IQ", raw, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if 20 + mlen > len(raw):
        raise FormatError(f"{path}: metadata length {mlen} exceeds file size")
    try:
        meta = json.loads(raw[20:20 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata block") from exc
    specs = meta["params"]
    need = sum(int(np.prod(p["shape"])) for p in specs) * 8
    if len(raw) - 20 - mlen != need:
        raise FormatError(f"{path}: payload is {len(raw) - 20 - mlen} bytes, expected {need}")
    stats = Stats.from_json(meta["stats"]) if meta.get("stats") else None
    model = GnnModel(HyperParams(**meta["hyperparams"]), stats)
    if [p["name"] for p in specs] != model.store.names():
        raise FormatError(f"{path}: parameter names do not match the architecture")
    off = 20 + mlen
    for p in specs:
        size = int(np.prod(p["shape"]))
        arr = np.frombuffer(raw, "<f8", size, off).reshape(p["shape"]).astype(np.float64)
        off += size * 8
        model.store.assign(p["name"], arr)
    for p in specs:
        model.store.set_trainable([p["name"]], p["trainable"])
    model.meta = meta.get("meta", {})
    return model
