import numpy as np
import pytest

from interpgnn import tensorcore as tc
from interpgnn.errors import DimensionError
from interpgnn.layers import (MessagePassingLayer, MmpLayer, Mlp, Topology, build_coarse_map,
                              knn_interpolate, knn_weights, mmp_forward, mp_forward, voxel_coarsen)
from interpgnn.tensorcore import ParameterStore, Tape, Tensor

from gradcheck import check_gradients, rel_err

# ------------------------------------------------------------ numpy oracles


def np_mlp(store, prefix, widths, x, layer_norm=True):
    h = x
    n = len(widths) - 1
    for k in range(n):
        h = h @ store[f"{prefix}.w{k}"].data + store[f"{prefix}.b{k}"].data
        if k < n - 1:
            h = np.where(h > 0, h, np.expm1(np.minimum(h, 0)))
    if widths[0] == widths[-1]:
        h = h + x
    if layer_norm:
        mu = h.mean(axis=1, keepdims=True)
        var = ((h - mu) ** 2).mean(axis=1, keepdims=True)
        h = (h - mu) / np.sqrt(var + 1e-5) * store[f"{prefix}.ln_g"].data + store[f"{prefix}.ln_b"].data
    return h


def np_mp(store, prefix, nh, x, e, senders, receivers):
    e_new = np.zeros((len(senders), nh))
    for k, (s, r) in enumerate(zip(senders, receivers)):
        inp = np.concatenate([e[k], x[s], x[r]])[None]
        e_new[k] = np_mlp(store, f"{prefix}.fe", [3 * nh, nh, nh], inp)[0]
    agg = np.zeros((x.shape[0], nh))
    for i in range(x.shape[0]):
        inc = [e_new[k] for k in range(len(receivers)) if receivers[k] == i]
        if inc:
            agg[i] = sum(inc) / len(inc)
    x_new = np_mlp(store, f"{prefix}.fn", [2 * nh, nh, nh], np.concatenate([agg, x], axis=1))
    return x_new, e_new


def np_coarsen(pos, senders, receivers, size):
    origin = pos.min(axis=0)
    keys = [tuple(np.floor((p - origin) / size).astype(int)) for p in pos]
    uniq = sorted(set(keys))
    index = {k: i for i, k in enumerate(uniq)}
    assign = np.array([index[k] for k in keys])
    centres = np.array([origin + (np.array(k) + 0.5) * size for k in uniq])
    pairs = sorted({(assign[s], assign[r]) for s, r in zip(senders, receivers) if assign[s] != assign[r]})
    return assign, centres, pairs


def np_knn(xc, cpos, fpos, k):
    out = np.zeros((fpos.shape[0], xc.shape[1]))
    for i, p in enumerate(fpos):
        d2 = [float(((p - c) ** 2).sum()) for c in cpos]
        order = sorted(range(len(d2)), key=lambda j: (d2[j], j))[:k]
        w = np.array([1.0 / (d2[j] + 1e-12) for j in order])
        out[i] = (w[:, None] * xc[order]).sum(axis=0) / w.sum()
    return out


def random_graph(rng, n, p=0.25):
    pos = rng.uniform(0, 3, size=(n, 2))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.uniform() < p]
    s = [a for i, j in pairs for a in (i, j)]
    r = [b for i, j in pairs for b in (j, i)]
    return pos, np.array(s, dtype=np.int64), np.array(r, dtype=np.int64)


# ------------------------------------------------------------------- Mlp

def test_mlp_parameter_count_and_residual_rule():
    rng = np.random.default_rng(0)
    s = ParameterStore()
    m = Mlp(s, "m", [5, 7, 7, 3], rng)
    assert s.n_params() == Mlp.count([5, 7, 7, 3]) == 6 * 7 + 8 * 7 + 8 * 3 + 2 * 3
    assert not m.residual
    assert Mlp(s, "r", [4, 4, 4], rng).residual
    assert not Mlp(s, "q", [4, 4], rng, residual=False).residual
    with pytest.raises(DimensionError):
        m(Tensor(np.ones((2, 4))))


def test_mlp_matches_numpy_oracle():
    rng = np.random.default_rng(1)
    s = ParameterStore()
    for widths in ([3, 6, 6, 3], [4, 5, 2]):
        prefix = "p" + "".join(map(str, widths))
        m = Mlp(s, prefix, widths, rng)
        s.assign(f"{prefix}.ln_g", rng.normal(size=(1, widths[-1])))
        x = rng.normal(size=(5, widths[0]))
        assert np.max(np.abs(m(Tensor(x)).data - np_mlp(s, prefix, widths, x))) < 1e-12


# ------------------------------------------------------------ message passing

def _mp_setup(seed, n, nh=4, p=0.3):
    rng = np.random.default_rng(seed)
    s = ParameterStore()
    layer = MessagePassingLayer(s, "mp", nh, rng)
    pos, snd, rcv = random_graph(rng, n, p)
    x = rng.normal(size=(n, nh))
    e = rng.normal(size=(snd.size, nh))
    return s, layer, pos, snd, rcv, x, e


def test_mp_two_node_loop_oracle():
    s, layer, _, _, _, _, _ = _mp_setup(2, 2)
    rng = np.random.default_rng(3)
    snd, rcv = np.array([0, 1]), np.array([1, 0])
    x, e = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    xn, en = mp_forward(layer, Tensor(x), Tensor(e), snd, rcv)
    xo, eo = np_mp(s, "mp", 4, x, e, snd, rcv)
    assert np.max(np.abs(xn.data - xo)) < 1e-12 and np.max(np.abs(en.data - eo)) < 1e-12


def test_mp_random_graph_loop_oracle():
    s, layer, _, snd, rcv, x, e = _mp_setup(4, 12)
    xn, en = mp_forward(layer, Tensor(x), Tensor(e), snd, rcv)
    xo, eo = np_mp(s, "mp", 4, x, e, snd, rcv)
    assert np.max(np.abs(xn.data - xo)) < 1e-12 and np.max(np.abs(en.data - eo)) < 1e-12


def test_mp_without_edges_uses_zero_aggregate():
    s, layer, _, _, _, x, _ = _mp_setup(5, 3)
    empty = np.zeros(0, dtype=np.int64)
    xn, en = mp_forward(layer, Tensor(x), Tensor(np.zeros((0, 4))), empty, empty)
    want = layer.node_mlp(Tensor(np.concatenate([np.zeros((3, 4)), x], axis=1)))
    assert en.shape == (0, 4) and np.array_equal(xn.data, want.data)


def test_mp_node_relabelling_is_exact():
    s, layer, _, snd, rcv, x, e = _mp_setup(6, 15)
    perm = np.random.default_rng(7).permutation(15)     # new label of old node i is inv[i]
    inv = np.argsort(perm)
    xn, en = mp_forward(layer, Tensor(x), Tensor(e), snd, rcv)
    xp, ep = mp_forward(layer, Tensor(x[perm]), Tensor(e), inv[snd], inv[rcv])
    assert np.array_equal(xp.data, xn.data[perm]) and np.array_equal(ep.data, en.data)


def test_mp_shape_errors():
    s, layer, _, snd, rcv, x, e = _mp_setup(8, 6)
    with pytest.raises(DimensionError):
        mp_forward(layer, Tensor(x), Tensor(e[:-1]), snd, rcv)
    with pytest.raises(DimensionError):
        mp_forward(layer, Tensor(x[:, :3]), Tensor(e), snd, rcv)


def _param_grad_error(store, names, loss_fn, h=1e-6):
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.gradient(loss, [store[n] for n in names])
    worst = 0.0
    for n, g in zip(names, grads):
        base = store[n].data.copy()
        num = np.zeros_like(base)
        for idx in np.ndindex(*base.shape):
            for sgn in (1, -1):
                pert = base.copy()
                pert[idx] += sgn * h
                store.assign(n, pert)
                num[idx] += sgn * loss_fn().item() / (2 * h)
        store.assign(n, base)
        worst = max(worst, rel_err(g, num))
    return worst


def test_mp_gradients_inputs_and_parameters():
    s, layer, _, snd, rcv, x, e = _mp_setup(9, 8, nh=3)

    assert check_gradients(lambda xt, et: mp_forward(layer, xt, et, snd, rcv)[0], [x, e]) < 1e-5
    assert check_gradients(lambda xt, et: mp_forward(layer, xt, et, snd, rcv)[1], [x, e]) < 1e-5
    w = np.random.default_rng(1).normal(size=(8, 3))

    def loss():
        xn, _ = mp_forward(layer, Tensor(x), Tensor(e), snd, rcv)
        return tc.sum_all(tc.mul(xn, Tensor(w)))

    assert _param_grad_error(s, layer.param_names, loss) < 1e-5


# ---------------------------------------------------------------- coarsening

def test_coarsen_single_voxel():
    pos = np.array([[0.1, 0.1], [0.2, 0.3], [0.4, 0.2], [0.3, 0.45]])
    snd, rcv = np.array([0, 1, 2, 3]), np.array([1, 0, 3, 2])
    x = np.arange(8.0).reshape(4, 2)
    cmap, xc, ec = voxel_coarsen(pos, Tensor(x), Tensor(np.ones((4, 2))), snd, rcv, 1.0)
    assert cmap.n_nodes == 1 and cmap.senders.size == 0 and ec.shape == (0, 2)
    assert np.array_equal(xc.data, x.mean(axis=0, keepdims=True))


def test_coarsen_two_adjacent_clusters():
    pos = np.array([[0.1, 0.1], [0.3, 0.2], [1.2, 0.1], [1.4, 0.3]])
    snd = np.array([0, 1, 1, 2, 2, 3])
    rcv = np.array([1, 0, 2, 1, 3, 2])
    e = np.array([[1.0, 0], [2, 0], [5, 6], [7, 8], [3, 0], [4, 0]])
    cmap, xc, ec = voxel_coarsen(pos, Tensor(np.ones((4, 1))), Tensor(e), snd, rcv, 1.0)
    assert cmap.n_nodes == 2 and list(cmap.assignment) == [0, 0, 1, 1]
    assert list(zip(cmap.senders, cmap.receivers)) == [(0, 1), (1, 0)]
    assert np.array_equal(ec.data, [[5, 6], [7, 8]])
    assert np.allclose(cmap.positions, [[0.6, 0.6], [1.6, 0.6]])


def test_coarsen_identity_limit_and_mass_conservation():
    rng = np.random.default_rng(10)
    pos, snd, rcv = random_graph(rng, 20, 0.3)
    tiny = 1e-4
    cmap = build_coarse_map(pos, snd, rcv, tiny)
    assert cmap.n_nodes == 20
    mapped = {(cmap.assignment[s], cmap.assignment[r]) for s, r in zip(snd, rcv)}
    assert mapped == set(zip(cmap.senders.tolist(), cmap.receivers.tolist()))
    x = rng.normal(size=(20, 3))
    cmap, xc, _ = voxel_coarsen(pos, Tensor(x), Tensor(rng.normal(size=(snd.size, 3))), snd, rcv, 0.9)
    for c in range(cmap.n_nodes):
        members = cmap.assignment == c
        assert np.allclose(xc.data[c] * members.sum(), x[members].sum(axis=0), atol=1e-12)
    assign, centres, pairs = np_coarsen(pos, snd, rcv, 0.9)
    assert np.array_equal(assign, cmap.assignment) and np.allclose(centres, cmap.positions)
    assert pairs == list(zip(cmap.senders.tolist(), cmap.receivers.tolist()))


# -------------------------------------------------------------------- knn

def test_knn_constant_field_and_coincident_point():
    rng = np.random.default_rng(11)
    cpos = rng.uniform(size=(6, 2))
    fpos = rng.uniform(size=(9, 2))
    const = np.tile([[2.5, -1.0]], (6, 1))
    out = knn_interpolate(Tensor(const), cpos, fpos, 4).data
    assert np.allclose(out, const[0], rtol=0, atol=1e-12)
    xc = rng.normal(size=(6, 2))
    at = knn_interpolate(Tensor(xc), cpos, cpos[[3]], 4).data
    assert np.max(np.abs(at[0] - xc[3])) < 1e-9
    with pytest.raises(ValueError):
        knn_weights(np.zeros((0, 2)), fpos, 4)


def test_knn_brute_force_oracle_and_convexity():
    rng = np.random.default_rng(12)
    for _ in range(10):
        cpos = rng.uniform(size=(rng.integers(1, 12), 2))
        fpos = rng.uniform(size=(15, 2))
        xc = rng.normal(size=(cpos.shape[0], 3))
        k = 4
        got = knn_interpolate(Tensor(xc), cpos, fpos, k).data
        assert np.max(np.abs(got - np_knn(xc, cpos, fpos, k))) < 1e-12
        rows, cols, _ = knn_weights(cpos, fpos, k)
        for i in range(15):
            src = xc[cols[rows == i]]
            assert np.all(got[i] >= src.min(axis=0) - 1e-12) and np.all(got[i] <= src.max(axis=0) + 1e-12)


def test_knn_gradient():
    rng = np.random.default_rng(13)
    cpos, fpos = rng.uniform(size=(7, 2)), rng.uniform(size=(10, 2))
    assert check_gradients(lambda t: knn_interpolate(t, cpos, fpos, 4), [rng.normal(size=(7, 2))]) < 1e-5


# -------------------------------------------------------------------- MMP

def _mmp(seed, n_levels, nh=4):
    s = ParameterStore()
    return s, MmpLayer(s, "mmp", nh, n_levels, np.random.default_rng(seed))


def test_mmp_single_level_is_one_mp():
    s, layer = _mmp(14, 1)
    rng = np.random.default_rng(15)
    pos, snd, rcv = random_graph(rng, 10)
    x, e = rng.normal(size=(10, 4)), rng.normal(size=(snd.size, 4))
    a, _ = mmp_forward(layer, Tensor(x), Tensor(e), Topology.single(pos, snd, rcv), 0.5)
    b, _ = mp_forward(layer.bottom, Tensor(x), Tensor(e), snd, rcv)
    assert np.max(np.abs(a.data - b.data)) < 1e-12
    assert all(not n.startswith("mmp.pre") for n in layer.param_names)


def test_mmp_two_levels_on_one_voxel():
    s, layer = _mmp(16, 2)
    rng = np.random.default_rng(17)
    pos, snd, rcv = random_graph(rng, 6, 0.5)
    topo = Topology.single(pos, snd, rcv)
    x, e = rng.normal(size=(6, 4)), rng.normal(size=(snd.size, 4))
    out, _ = mmp_forward(layer, Tensor(x), Tensor(e), topo, 100.0)
    cmap, child, _ = topo.coarsen(100.0, layer.knn_k)
    assert child.n_nodes == 1 and child.senders.size == 0
    # oracle: pre MP, mean, single-node MP, broadcast, residual, post MP
    x1, e1 = np_mp(s, "mmp.pre0", 4, x, e, snd, rcv)
    xc, _ = np_mp(s, "mmp.bottom", 4, x1.mean(axis=0, keepdims=True), np.zeros((0, 4)), [], [])
    want, _ = np_mp(s, "mmp.post0", 4, x1 + xc, e1, snd, rcv)
    assert np.max(np.abs(out.data - want)) < 1e-12


def test_mmp_thirty_nodes_sequential_oracle():
    s, layer = _mmp(18, 3)
    rng = np.random.default_rng(19)
    pos, snd, rcv = random_graph(rng, 30, 0.15)
    x, e = rng.normal(size=(30, 4)), rng.normal(size=(snd.size, 4))
    vox = 0.6
    out, _ = mmp_forward(layer, Tensor(x), Tensor(e), Topology.single(pos, snd, rcv), vox)

    def oracle(level, pos, snd, rcv, x, e):
        if level == 2:
            return np_mp(s, "mmp.bottom", 4, x, e, snd, rcv)[0]
        x, e = np_mp(s, f"mmp.pre{level}", 4, x, e, snd, rcv)
        size = vox * 2.0 ** level
        assign, centres, pairs = np_coarsen(pos, snd, rcv, size)
        nc = centres.shape[0]
        xc = np.array([x[assign == c].mean(axis=0) for c in range(nc)])
        ec = np.zeros((len(pairs), 4))
        for k, (a, b) in enumerate(pairs):
            rows = [e[j] for j in range(len(snd)) if assign[snd[j]] == a and assign[rcv[j]] == b]
            ec[k] = sum(rows) / len(rows)
        cs = np.array([p[0] for p in pairs], dtype=np.int64)
        cr = np.array([p[1] for p in pairs], dtype=np.int64)
        xc = oracle(level + 1, centres, cs, cr, xc, ec)
        x = x + np_knn(xc, centres, pos, 4)
        return np_mp(s, f"mmp.post{level}", 4, x, e, snd, rcv)[0]

    assert np.max(np.abs(out.data - oracle(0, pos, snd, rcv, x, e))) < 1e-12


def test_mmp_gradients_small_graph():
    s, layer = _mmp(20, 2, nh=3)
    rng = np.random.default_rng(21)
    pos, snd, rcv = random_graph(rng, 12, 0.3)
    topo = Topology.single(pos, snd, rcv)
    x, e = rng.normal(size=(12, 3)), rng.normal(size=(snd.size, 3))
    assert check_gradients(lambda a, b: mmp_forward(layer, a, b, topo, 0.8)[0], [x, e]) < 1e-5
    w = rng.normal(size=(12, 3))

    def loss():
        out, _ = mmp_forward(layer, Tensor(x), Tensor(e), topo, 0.8)
        return tc.sum_all(tc.mul(out, Tensor(w)))

    names = [n for n in layer.param_names if n.endswith((".w0", ".ln_g"))]
    assert _param_grad_error(s, names, loss) < 1e-5
