"""Deterministic synthetic shedding flows on graded, masked quad meshes.

The fields are analytic (a tanh shear layer plus Gaussian vortices shed
periodically from the top of the geometric feature and advected
downstream). They are not solutions of the Navier-Stokes equations; they
only provide smooth, unsteady, geometry-dependent dynamics to learn.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .meshgraph import Graph, Mesh, Trajectory, dual_graph, save_trajectory

GEOMETRIES = ("step", "ramp", "cube")
C_BOUND = 2.0  # max |u|, |v| <= C_BOUND * u_in


@dataclass(frozen=True)
class GeometryTemplate:
    kind: str = "step"
    length: float = 1.0            # feature height L
    resolution: int = 4            # cells per L at the feature
    grading: float = 1.12          # spacing growth ratio away from the feature
    x_range: tuple[float, float] = (-2.0, 8.0)   # in units of L
    height: float = 3.0                           # channel height in units of L

    def __post_init__(self):
        if self.kind not in GEOMETRIES:
            raise ValueError(f"unknown geometry {self.kind!r}; expected one of {GEOMETRIES}")
        if self.resolution < 4:
            raise ValueError("feature must be resolved by at least 4 cells per L")
        if self.length <= 0 or self.grading < 1.0:
            raise ValueError("length must be positive and grading >= 1")

    @property
    def feature_end(self) -> float:
        """Streamwise position where flow leaves the feature (shedding origin)."""
        return {"step": 0.0, "ramp": 1.5, "cube": 1.0}[self.kind] * self.length

    def solid(self, x, y):
        L = self.length
        x = np.asarray(x)
        y = np.asarray(y)
        if self.kind == "step":
            return (x < 0) & (y < L)
        if self.kind == "ramp":
            ramp = (x >= 0) & (x < 1.5 * L) & (y < L * (1.0 - x / (1.5 * L)))
            return ((x < 0) & (y < L)) | ramp
        return (x >= 0) & (x <= L) & (y <= L)

    def crop_window(self) -> tuple[float, float, float, float]:
        """Default coherency crop: the feature and its near wake."""
        L = self.length
        x0 = 0.0 if self.kind != "cube" else -0.5 * L
        return (x0, self.feature_end + 5.0 * L, 0.0, 2.0 * L)


def _segment(a: float, b: float, h0: float, ratio: float) -> np.ndarray:
    """Points from a to b (inclusive) with spacing h0 at a growing by ratio."""
    length = abs(b - a)
    if length == 0:
        return np.array([a])
    steps = []
    total = 0.0
    h = h0
    while total < length - 1e-12:
        steps.append(h)
        total += h
        h *= ratio
    steps = np.array(steps)
    if len(steps) > 1 and total - length > 0.5 * steps[-1]:
        steps = steps[:-1]
    steps *= length / steps.sum()
    pts = a + np.sign(b - a) * np.concatenate([[0.0], np.cumsum(steps)])
    pts[-1] = b
    return pts


def _axis(breaks: Sequence[float], fine: tuple[float, float], h0: float, ratio: float) -> np.ndarray:
    """Graded axis: uniform spacing inside ``fine``, geometric growth outside."""
    lo, hi = fine
    pieces = []
    for a, b in zip(breaks, breaks[1:]):
        if a >= lo and b <= hi:
            seg = _segment(a, b, h0, 1.0)
        elif b <= lo:
            seg = _segment(b, a, h0, ratio)[::-1]
        else:
            seg = _segment(a, b, h0, ratio)
        pieces.append(seg if not pieces else seg[1:])
    return np.concatenate(pieces)


def grid_axes(tmpl: GeometryTemplate) -> tuple[np.ndarray, np.ndarray]:
    L = tmpl.length
    h0 = L / tmpl.resolution
    x0, x1 = tmpl.x_range[0] * L, tmpl.x_range[1] * L
    fe = tmpl.feature_end
    xb = sorted({x0, 0.0, fe, x1})
    xs = _axis(xb, (0.0, max(fe, 0.0)), h0, tmpl.grading)
    ys = _axis([0.0, L, tmpl.height * L], (0.0, L), h0, tmpl.grading)
    return xs, ys


def make_mesh(tmpl: GeometryTemplate) -> Mesh:
    """Tensor-product graded quad grid with the solid feature removed."""
    xs, ys = grid_axes(tmpl)
    nx, ny = xs.size, ys.size
    vx, vy = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([vx.reshape(-1), vy.reshape(-1)])
    cx = 0.5 * (xs[:-1] + xs[1:])
    cy = 0.5 * (ys[:-1] + ys[1:])
    cells = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            if tmpl.solid(cx[i], cy[j]):
                continue
            v00 = i * ny + j
            cells.append((v00, v00 + ny, v00 + ny + 1, v00 + 1))
    return Mesh(vertices, tuple(cells), tmpl.kind)


@dataclass(frozen=True)
class FlowSpec:
    control: float = 1.0          # Reynolds-like parameter
    u_in: float | None = None     # defaults to ``control``
    n_vortices: int = 8
    base_frequency: float = 0.25  # shedding frequency at control = 1
    core_radius: float = 0.35     # in units of L
    strength: float = 0.8         # peak swirl ~ 0.6 * strength * u_in
    decay_length: float = 3.0     # in units of L
    seed: int = 0

    @property
    def inlet(self) -> float:
        return float(self.control if self.u_in is None else self.u_in)

    @property
    def frequency(self) -> float:
        return self.base_frequency * self.control


def shedding_frequency(control: float, base_frequency: float = 0.25) -> float:
    return base_frequency * control


def flow_field(spec: FlowSpec, tmpl: GeometryTemplate, positions: np.ndarray, t: float,
               phase0: float = 0.0) -> np.ndarray:
    """Velocity (u, v) at each position and time t."""
    L = tmpl.length
    u_in = spec.inlet
    x, y = positions[:, 0], positions[:, 1]
    xf, yf = tmpl.feature_end, L
    dist = np.maximum(x - xf, 0.0)
    delta = 0.15 * L + 0.05 * dist
    u = u_in * 0.5 * (1.0 + np.tanh((y - yf) / delta))
    v = np.zeros_like(u)
    if spec.n_vortices > 0:
        f = spec.frequency
        c = 0.5 * u_in
        rc = spec.core_radius * L
        gamma = spec.strength * u_in * rc
        phase = t * f + phase0
        frac = phase - np.floor(phase)
        for j in range(spec.n_vortices):
            d = c * (frac + j) / f
            xv = xf + d
            yv = yf - 0.4 * L * (1.0 - np.exp(-d / (2.0 * L)))
            amp = (1.0 - np.exp(-d / (0.5 * L))) * np.exp(-d / (spec.decay_length * L))
            dx, dy = x - xv, y - yv
            g = gamma * amp * np.exp(-(dx * dx + dy * dy) / (2.0 * rc * rc)) / (rc * rc)
            u += -g * dy
            v += g * dx
    return np.column_stack([u, v])


def sample_flow(spec: FlowSpec, graph: Graph, n_steps: int, dt: float,
                tmpl: GeometryTemplate | None = None) -> Trajectory:
    if n_steps < 2:
        raise ValueError("a trajectory needs T >= 2 snapshots")
    tmpl = tmpl or GeometryTemplate()
    phase0 = float(np.random.default_rng(spec.seed).uniform())
    fields = np.stack([flow_field(spec, tmpl, graph.positions, m * dt, phase0)
                       for m in range(n_steps)])
    return Trajectory(graph, fields, float(dt), float(spec.control), spec.inlet,
                      {"geometry": tmpl.kind, "seed": spec.seed})


def split_controls(controls: Sequence[float]) -> tuple[list[float], list[float]]:
    """Sorted controls alternate train (even positions) / test (odd positions)."""
    ordered = sorted(float(c) for c in controls)
    return ordered[0::2], ordered[1::2]


def make_dataset(controls: Sequence[float], tmpl: GeometryTemplate, n_steps: int, dt: float,
                 seed: int = 0, **flow_kw):
    """Train/test trajectory lists sharing one graph; controls alternate train/test."""
    if not controls:
        raise ValueError("need at least one control value")
    train_c, test_c = split_controls(controls)
    return make_split_dataset(train_c, test_c, tmpl, n_steps, dt, seed, **flow_kw)


def make_split_dataset(train_controls: Sequence[float], test_controls: Sequence[float],
                       tmpl: GeometryTemplate, n_steps: int, dt: float, seed: int = 0, **flow_kw):
    """Like :func:`make_dataset` with explicitly assigned control values."""
    if not train_controls:
        raise ValueError("need at least one training control value")
    graph = dual_graph(make_mesh(tmpl))

    def build(cs, offset):
        out = []
        for i, c in enumerate(cs):
            sub = int(np.random.SeedSequence([seed, offset, i]).generate_state(1)[0])
            out.append(sample_flow(FlowSpec(control=c, seed=sub, **flow_kw), graph, n_steps, dt, tmpl))
        return out

    return build(train_controls, 0), build(test_controls, 1)


def write_dataset(out_dir, train: Sequence[Trajectory], test: Sequence[Trajectory],
                  tmpl: GeometryTemplate, extra: dict | None = None) -> dict:
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    files = {"train": [], "test": []}
    for split, trajs in (("train", train), ("test", test)):
        for i, t in enumerate(trajs):
            name = f"{split}/traj_{i:03d}.gsrj"
            save_trajectory(out / name, t)
            files[split].append(name)
    info = {"template": asdict(tmpl), "crop": list(tmpl.crop_window()),
            "files": files, **(extra or {})}
    (out / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info
