"""Dual-mesh graphs, flow snapshots/trajectories and their file formats."""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, MeshError

TRAJ_MAGIC = b"GSRJ0001"
STD_FLOOR = 1e-12


@dataclass(frozen=True)
class Mesh:
    """2-D polygonal mesh: shared vertex table plus cells as vertex-index tuples.

    Cells listed counter-clockwise. Faces are matched by vertex index, so
    the mesh has to be conforming.
    """

    vertices: np.ndarray
    cells: tuple[tuple[int, ...], ...]
    geometry: str = "step"

    def cell_coords(self, k: int) -> np.ndarray:
        return self.vertices[list(self.cells[k])]


def polygon_area_centroid(pts: np.ndarray) -> tuple[float, np.ndarray]:
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if abs(area) < 1e-14:
        return 0.0, pts.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return float(area), np.array([cx, cy])


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed graph with node positions; edge features are sender - receiver."""

    positions: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        s = np.ascontiguousarray(self.senders, dtype=np.int64).reshape(-1)
        r = np.ascontiguousarray(self.receivers, dtype=np.int64).reshape(-1)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ValueError("positions must be |V| x 2")
        if s.shape != r.shape:
            raise ValueError("senders/receivers differ in length")
        n = pos.shape[0]
        if s.size and (min(s.min(), r.min()) < 0 or max(s.max(), r.max()) >= n):
            raise IndexError("edge endpoint out of range")
        for a in (pos, s, r):
            a.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "senders", s)
        object.__setattr__(self, "receivers", r)

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def n_edges(self) -> int:
        return self.senders.size

    @cached_property
    def edge_features(self) -> np.ndarray:
        out = self.positions[self.senders] - self.positions[self.receivers]
        out.flags.writeable = False
        return out

    @cached_property
    def mean_edge_length(self) -> float:
        if self.n_edges == 0:
            return 0.0
        return float(np.linalg.norm(self.edge_features, axis=1).mean())

    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.senders.tolist(), self.receivers.tolist()))

    def degree(self) -> np.ndarray:
        return np.bincount(self.receivers, minlength=self.n_nodes)

    def same_as(self, other: "Graph") -> bool:
        return (np.array_equal(self.positions, other.positions)
                and np.array_equal(self.senders, other.senders)
                and np.array_equal(self.receivers, other.receivers))


def dual_graph(mesh: Mesh) -> Graph:
    """One node per cell centroid, a directed edge pair per shared face."""
    n = len(mesh.cells)
    cent = np.zeros((n, 2))
    faces: dict[tuple[int, int], list[int]] = {}
    for k, cell in enumerate(mesh.cells):
        if len(cell) < 3:
            raise MeshError(f"cell {k} has fewer than 3 vertices")
        area, c = polygon_area_centroid(mesh.vertices[list(cell)])
        if area <= 1e-14:
            raise MeshError(f"cell {k} is degenerate or clockwise (area={area:g})")
        cent[k] = c
        for a, b in zip(cell, cell[1:] + cell[:1]):
            key = (a, b) if a < b else (b, a)
            owners = faces.setdefault(key, [])
            owners.append(k)
            if len(owners) > 2:
                raise MeshError(f"face {key} shared by more than two cells")
    pairs = sorted({(min(o), max(o)) for o in faces.values() if len(o) == 2 and o[0] != o[1]})
    send, recv = [], []
    for i, j in pairs:
        send += [i, j]
        recv += [j, i]
    return Graph(cent, np.array(send, dtype=np.int64), np.array(recv, dtype=np.int64))


@dataclass(frozen=True)
class Snapshot:
    node_features: np.ndarray
    time_index: int


@dataclass(eq=False)
class Trajectory:
    """Successive velocity snapshots (T x |V| x N_F) on one fixed graph."""

    graph: Graph
    fields: np.ndarray
    dt: float
    control: float
    u_in: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.fields, dtype=np.float64)
        if f.ndim != 3 or f.shape[1] != self.graph.n_nodes:
            raise ValueError(f"fields must be T x {self.graph.n_nodes} x N_F, got {f.shape}")
        if self.u_in <= 0:
            raise ValueError("u_in must be positive")
        self.fields = f

    @property
    def n_steps(self) -> int:
        return self.fields.shape[0]

    @property
    def n_features(self) -> int:
        return self.fields.shape[2]

    def snapshot(self, m: int) -> Snapshot:
        return Snapshot(self.fields[m], m)

    def snapshots(self) -> list[Snapshot]:
        return [self.snapshot(m) for m in range(self.n_steps)]


def standardize_stats(trajectories: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and population std over all nodes and snapshots."""
    blocks = [t.fields.reshape(-1, t.n_features) for t in trajectories if t.n_steps]
    if not blocks:
        raise ValueError("standardize_stats needs at least one snapshot")
    data = np.concatenate(blocks, axis=0)
    mean = data.mean(axis=0, keepdims=True)
    std = np.maximum(data.std(axis=0, keepdims=True), STD_FLOOR)
    return mean, std


# ------------------------------------------------------------------ file I/O

def save_trajectory(path, traj: Trajectory) -> None:
    """Little-endian layout: magic, u32 |V| N_F T |E|, positions, edges,
    T feature blocks, then dt/control/u_in."""
    if traj.n_steps == 0:
        raise ValueError("refusing to save an empty trajectory (T=0)")
    g = traj.graph
    buf = io.BytesIO()
    buf.write(TRAJ_MAGIC)
    buf.write(struct.pack("<4I", g.n_nodes, traj.n_features, traj.n_steps, g.n_edges))
    buf.write(g.positions.astype("<f8").tobytes())
    buf.write(np.stack([g.senders, g.receivers], axis=1).astype("<u4").tobytes())
    buf.write(traj.fields.astype("<f8").tobytes())
    buf.write(struct.pack("<3d", traj.dt, traj.control, traj.u_in))
    Path(path).write_bytes(buf.getvalue())


def load_trajectory(path) -> Trajectory:
    raw = Path(path).read_bytes()
    if raw[:8] != TRAJ_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 24:
        raise OSError(f"{path}: truncated header")
    nv, nf, nt, ne = struct.unpack_from("<4I", raw, 8)
    sizes = [nv * 2 * 8, ne * 2 * 4, nt * nv * nf * 8, 24]
    if len(raw) != 24 + sum(sizes):
        raise OSError(f"{path}: expected {24 + sum(sizes)} bytes, found {len(raw)}")
    off = 24
    pos = np.frombuffer(raw, "<f8", nv * 2, off).reshape(nv, 2).astype(np.float64)
    off += sizes[0]
    edges = np.frombuffer(raw, "<u4", ne * 2, off).reshape(ne, 2).astype(np.int64)
    off += sizes[1]
    fields = np.frombuffer(raw, "<f8", nt * nv * nf, off).reshape(nt, nv, nf).astype(np.float64)
    off += sizes[2]
    dt, control, u_in = struct.unpack_from("<3d", raw, off)
    graph = Graph(pos, edges[:, 0], edges[:, 1])
    return Trajectory(graph, fields, dt, control, u_in)


FIELD_HEADER = ["node_id", "x", "y", "value"]


def write_node_field(path_or_buf, positions: np.ndarray, values) -> None:
    """CSV with header node_id,x,y,value."""
    values = np.asarray(values).reshape(-1)
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELD_HEADER)
        for i, ((x, y), v) in enumerate(zip(positions.tolist(), values.tolist())):
            w.writerow([i, repr(float(x)), repr(float(y)), _fmt_value(v)])
    finally:
        if own:
            fh.close()


def _fmt_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if float(v).is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def read_node_field(path_or_buf) -> tuple[np.ndarray, np.ndarray]:
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, newline="") if own else path_or_buf
    try:
        reader = csv.reader(fh)
        header = next(reader)
        if header != FIELD_HEADER:
            raise FormatError(f"unexpected header {header}")
        rows = [r for r in reader if r]
    finally:
        if own:
            fh.close()
    pos = np.array([[float(r[1]), float(r[2])] for r in rows]).reshape(-1, 2)
    vals = np.array([float(r[3]) for r in rows])
    return pos, vals
