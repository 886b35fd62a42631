"""Gradient, forward, optimiser and checkpoint checks for rtslab.diffnum.

The finite-difference oracles run in float64 on independently written naive
code, so a bug shared by the analytic backward and the forward would not hide.
"""
import json
import math
import zipfile

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtslab import diffnum as dn
from rtslab.diffnum import GradTape, Mlp, Tensor

N_CASES = 100
FD_STEP = 1e-3
REL_TOL = 1e-3


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def central_fd(f, x, h=FD_STEP):
    """d f / d x by central differences; ``f`` maps a float64 array to a float."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


# -- naive float64 references ------------------------------------------------

def naive_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def naive_act(name, x):
    if name == "tanh":
        return np.vectorize(math.tanh)(x)
    if name == "relu":
        return np.where(x > 0, x, 0.0)
    return x


def naive_mlp(dims, ws, bs, hidden, out, x):
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    for i, (w, b) in enumerate(zip(ws, bs)):
        h = naive_matmul(h, np.asarray(w, dtype=np.float64))
        h = h + np.asarray(b, dtype=np.float64)[None, :]
        h = naive_act(out if i == len(ws) - 1 else hidden, h)
    return h


# -- per-op gradient checks --------------------------------------------------

# Each entry: (taped op on Tensors, float64 reference, input shapes builder)
def _shapes(rng):
    return int(rng.integers(1, 5)), int(rng.integers(1, 5))


def _unary(op, ref, positive=False, avoid_zero=False):
    def case(rng):
        n, m = _shapes(rng)
        x = rng.normal(size=(n, m))
        if positive:
            x = np.abs(x) + 0.5
        if avoid_zero:
            # keep relu away from its kink so finite differences stay valid
            x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-12) + x, x)
        return [x], (lambda t: op(t[0])), (lambda a: ref(a[0]))
    return case


def _binary(op, ref, row=False):
    def case(rng):
        n, m = _shapes(rng)
        a = rng.normal(size=(n, m))
        b = rng.normal(size=(m,) if row else (n, m))
        return [a, b], (lambda t: op(t[0], t[1])), (lambda x: ref(x[0], x[1]))
    return case


def _matmul_case(rng):
    n, k = _shapes(rng)
    m = int(rng.integers(1, 5))
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    return [a, b], (lambda t: dn.matmul(t[0], t[1])), (lambda x: naive_matmul(x[0], x[1]))


def _sum_axis_case(rng):
    n, m = _shapes(rng)
    axis = int(rng.integers(0, 2))
    x = rng.normal(size=(n, m))
    return [x], (lambda t: dn.sum(t[0], axis=axis)), (lambda a: a[0].sum(axis=axis))


def _concat_case(rng):
    n = int(rng.integers(1, 4))
    a, b = rng.normal(size=(n, int(rng.integers(1, 4)))), rng.normal(size=(n, int(rng.integers(1, 4))))
    return [a, b], (lambda t: dn.concat([t[0], t[1]])), (lambda x: np.hstack([x[0], x[1]]))


def _row_norm_case(rng):
    n, m = _shapes(rng)
    x = rng.normal(size=(n, m)) + 0.3
    return [x], (lambda t: dn.row_norm(t[0])), (lambda a: np.sqrt((a[0] ** 2).sum(-1) + 1e-8))


OP_CASES = {
    "add": _binary(dn.add, lambda a, b: a + b),
    "add_row": _binary(dn.add, lambda a, b: a + b[None, :], row=True),
    "sub": _binary(dn.sub, lambda a, b: a - b),
    "mul": _binary(dn.mul, lambda a, b: a * b),
    "mul_row": _binary(dn.mul, lambda a, b: a * b[None, :], row=True),
    "scale": _unary(lambda t: dn.scale(t, -1.7), lambda a: -1.7 * a),
    "matmul": _matmul_case,
    "tanh": _unary(dn.tanh, np.tanh),
    "relu": _unary(dn.relu, lambda a: np.where(a > 0, a, 0.0), avoid_zero=True),
    "square": _unary(dn.square, lambda a: a * a),
    "sqrt": _unary(dn.sqrt, np.sqrt, positive=True),
    "sum_axis": _sum_axis_case,
    "mean": _unary(dn.mean, np.mean),
    "concat": _concat_case,
    "row_norm": _row_norm_case,
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(name):
    build = OP_CASES[name]
    worst = 0.0
    for seed in range(N_CASES):
        rng = np.random.default_rng(seed)
        inputs, op, ref = build(rng)
        # random projection turns any output into a scalar loss
        out_shape = np.shape(ref(inputs))
        proj = rng.normal(size=out_shape)

        tape = GradTape()
        leaves = [Tensor(x) for x in inputs]
        watched = [tape.watch(p) for p in leaves]
        out = op(watched)
        loss = dn.sum(dn.mul(out, Tensor(proj))) if out.data.ndim else dn.mul(out, Tensor(proj))
        grads = tape.gradient(loss, leaves)

        for k, x in enumerate(inputs):
            def f(xk, k=k):
                args = [np.asarray(v, dtype=np.float64) for v in inputs]
                args[k] = xk
                return float(np.sum(ref(args) * proj))
            fd = central_fd(f, x)
            err = rel_err(grads[k], fd)
            worst = max(worst, err)
            assert err < REL_TOL, f"{name} seed {seed} input {k}: rel err {err:.2e}"
    assert worst < REL_TOL


def test_sum_of_weighted_inputs_gradient_is_input():
    x = np.array([0.5, -2.0, 3.0], dtype=np.float32)
    w = Tensor(np.zeros(3))
    tape = GradTape()
    loss = dn.sum(dn.mul(tape.watch(w), Tensor(x)))
    (g,) = tape.gradient(loss, [w])
    np.testing.assert_array_equal(g, x)


# -- MLP forward -------------------------------------------------------------

def test_identity_layer_is_identity():
    net = Mlp([3, 3], [Tensor(np.eye(3))], [Tensor(np.zeros(3))], "tanh", "linear")
    x = np.array([[0.3, -1.0, 2.0]], dtype=np.float32)
    np.testing.assert_array_equal(dn.mlp_forward(net, x).data, x)


def test_zero_weights_give_bias():
    b = np.array([1.0, -2.0], dtype=np.float32)
    net = Mlp([4, 2], [Tensor(np.zeros((4, 2)))], [Tensor(b)], "tanh", "linear")
    out = dn.mlp_forward(net, np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_array_equal(out.data, np.tile(b, (5, 1)))


@pytest.mark.parametrize("hidden,out", [("tanh", "linear"), ("relu", "tanh"), ("tanh", "tanh")])
def test_forward_matches_naive_loop(hidden, out):
    rng = np.random.default_rng(7)
    net = Mlp.init([5, 8, 3], rng, hidden, out)
    x = rng.normal(size=(6, 5))
    ref = naive_mlp(net.layer_dims, [w.data for w in net.weights], [b.data for b in net.biases],
                    hidden, out, x.astype(np.float32))
    got = dn.mlp_forward(net, x).data
    assert rel_err(got, ref) < 1e-6
    # taped slow path computes the same values
    tape = GradTape()
    taped = dn.mlp_forward(net, x, tape).data
    np.testing.assert_allclose(taped, got, rtol=1e-6, atol=1e-7)


def test_forward_rejects_bad_input_dim():
    net = Mlp.init([4, 3], np.random.default_rng(0))
    with pytest.raises(dn.DimensionError):
        dn.mlp_forward(net, np.zeros((2, 5)))


def test_forward_is_deterministic():
    rng = np.random.default_rng(1)
    net = Mlp.init([3, 16, 2], rng)
    x = rng.normal(size=(4, 3))
    assert np.array_equal(net(x).data, net(x).data)


def test_single_vector_input_keeps_rank():
    net = Mlp.init([3, 4, 2], np.random.default_rng(2))
    assert net(np.zeros(3)).shape == (2,)


# -- MLP parameter gradients -------------------------------------------------

def _mlp_param_fd(net, x, proj, hidden, out):
    """FD of sum(proj * mlp(x)) with respect to every parameter, in float64."""
    ws = [w.data.astype(np.float64) for w in net.weights]
    bs = [b.data.astype(np.float64) for b in net.biases]
    grads = []
    for layer in range(len(ws)):
        for which in ("w", "b"):
            def f(p, layer=layer, which=which):
                w2, b2 = list(ws), list(bs)
                if which == "w":
                    w2[layer] = p
                else:
                    b2[layer] = p
                return float(np.sum(naive_mlp(None, w2, b2, hidden, out, x) * proj))
            grads.append(central_fd(f, ws[layer] if which == "w" else bs[layer]))
    return grads


@pytest.mark.parametrize("hidden,out", [("tanh", "linear"), ("tanh", "tanh")])
def test_two_layer_net_parameter_gradients(hidden, out):
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        net = Mlp.init([3, 5, 2], rng, hidden, out)
        x = rng.normal(size=(4, 3)).astype(np.float32)
        proj = rng.normal(size=(4, 2))
        tape = GradTape()
        y = dn.mlp_forward(net, x, tape)
        loss = dn.sum(dn.mul(y, Tensor(proj)))
        analytic = tape.gradient(loss, net.params)
        for a, f in zip(analytic, _mlp_param_fd(net, x, proj, hidden, out)):
            assert rel_err(a, f) < REL_TOL


def test_composed_model_then_frozen_policy():
    """Gradients flow through a frozen policy into the model, and only the model."""
    for seed in range(10):
        rng = np.random.default_rng(200 + seed)
        S, A = 3, 1
        model = Mlp.init([S + A, 6, S], rng, "tanh", "linear")
        policy = Mlp.init([S, 5, A], rng, "tanh", "tanh")
        sa = rng.normal(size=(4, S + A)).astype(np.float32)
        s_true = rng.normal(size=(4, S))
        a_true = rng.uniform(-1, 1, size=(4, A))

        tape = GradTape()
        pred = dn.mlp_forward(model, sa, tape)
        act = dn.mlp_forward(policy, pred)  # no tape: policy weights are constants
        loss = dn.add(dn.mean(dn.row_norm(dn.sub(pred, Tensor(s_true)))),
                      dn.mean(dn.row_norm(dn.sub(act, Tensor(a_true)))))
        analytic = tape.gradient(loss, model.params)

        pw = [w.data.astype(np.float64) for w in policy.weights]
        pb = [b.data.astype(np.float64) for b in policy.biases]
        mw = [w.data.astype(np.float64) for w in model.weights]
        mb = [b.data.astype(np.float64) for b in model.biases]

        def composed(ws, bs):
            p = naive_mlp(None, ws, bs, "tanh", "linear", sa)
            a = naive_mlp(None, pw, pb, "tanh", "tanh", p)
            return (np.mean(np.sqrt(((p - s_true) ** 2).sum(-1) + 1e-8))
                    + np.mean(np.sqrt(((a - a_true) ** 2).sum(-1) + 1e-8)))

        k = 0
        for layer in range(len(mw)):
            for which in ("w", "b"):
                def f(p, layer=layer, which=which):
                    w2, b2 = list(mw), list(mb)
                    (w2 if which == "w" else b2)[layer] = p
                    return float(composed(w2, b2))
                fd = central_fd(f, mw[layer] if which == "w" else mb[layer])
                assert rel_err(analytic[k], fd) < REL_TOL
                k += 1


def test_frozen_policy_params_are_not_produced():
    rng = np.random.default_rng(3)
    model = Mlp.init([4, 6, 3], rng)
    policy = Mlp.init([3, 5, 1], rng, "tanh", "tanh")
    before = [p.data.copy() for p in policy.params]
    tape = GradTape()
    act = dn.mlp_forward(policy, dn.mlp_forward(model, rng.normal(size=(2, 4)), tape))
    loss = dn.mean(dn.square(act))
    with pytest.raises(dn.TapeError):
        tape.gradient(loss, model.params + policy.params)
    for p, b in zip(policy.params, before):
        assert np.array_equal(p.data, b)


def test_gradient_twice_is_an_error():
    w = Tensor(np.ones(3))
    tape = GradTape()
    loss = dn.sum(dn.square(tape.watch(w)))
    tape.gradient(loss, [w])
    with pytest.raises(dn.TapeError):
        tape.gradient(loss, [w])


def test_non_scalar_loss_is_an_error():
    w = Tensor(np.ones(3))
    tape = GradTape()
    out = dn.square(tape.watch(w))
    with pytest.raises(dn.TapeError):
        dn.gradient(tape, out, [w])


def test_rejects_general_broadcasting():
    with pytest.raises(dn.DimensionError):
        dn.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ops_stay_finite_on_finite_inputs(seed):
    rng = np.random.default_rng(seed)
    net = Mlp.init([4, 16, 16, 3], rng)
    x = rng.normal(scale=10.0, size=(8, 4))
    tape = GradTape()
    y = dn.mlp_forward(net, x, tape)
    loss = dn.mean(dn.row_norm(y))
    grads = tape.gradient(loss, net.params)
    assert np.isfinite(y.data).all()
    assert all(np.isfinite(g).all() for g in grads)


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]))
    state = dn.AdamState.zeros_like([p])
    state.m[0][:] = 0.5
    state.v[0][:] = 0.25
    dn.adam_step([p], [np.zeros(2, dtype=np.float32)], state)
    # zero gradient moves p only through leftover momentum; a fresh state stays put
    fresh = Tensor(np.array([1.0, -2.0]))
    s2 = dn.AdamState.zeros_like([fresh])
    dn.adam_step([fresh], [np.zeros(2, dtype=np.float32)], s2)
    np.testing.assert_array_equal(fresh.data, [1.0, -2.0])
    np.testing.assert_allclose(state.m[0], 0.45)
    np.testing.assert_allclose(state.v[0], 0.25 * 0.999)
    assert state.step == 1 and s2.step == 1


@pytest.mark.parametrize("lr", [1e-3, 0.05, 0.3])
def test_adam_first_step_is_lr(lr):
    p = Tensor(np.array([0.0]))
    state = dn.AdamState.zeros_like([p])
    dn.adam_step([p], [np.ones(1, dtype=np.float32)], state, lr=lr)
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    np.testing.assert_allclose(p.data, [-lr / (1 + 1e-8)], rtol=1e-5)


def test_adam_minimises_quadratic():
    p = Tensor(np.array([0.0]))
    opt = dn.Adam([p], lr=0.1)
    for _ in range(500):
        tape = GradTape()
        loss = dn.sum(dn.square(dn.sub(tape.watch(p), 3.0)))
        opt.step(tape.gradient(loss, [p]))
    assert abs(float(p.data[0]) - 3.0) < 1e-2


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3))
    with pytest.raises(dn.DimensionError):
        dn.adam_step([p], [np.zeros(2, dtype=np.float32)], dn.AdamState.zeros_like([p]))


# -- checkpoints -------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(dims=st.lists(st.integers(1, 12), min_size=2, max_size=4),
       hidden=st.sampled_from(["tanh", "relu", "linear"]),
       out=st.sampled_from(["tanh", "linear"]),
       seed=st.integers(0, 10_000))
def test_checkpoint_roundtrip_is_bit_exact(tmp_path_factory, dims, hidden, out, seed):
    net = Mlp.init(dims, np.random.default_rng(seed), hidden, out)
    path = tmp_path_factory.mktemp("ck") / "net.npz"
    dn.save_checkpoint(net, path)
    back = dn.load_checkpoint(path)
    assert back.layer_dims == net.layer_dims
    assert (back.hidden_activation, back.output_activation) == (hidden, out)
    for a, b in zip(net.params, back.params):
        assert a.data.dtype == b.data.dtype and a.data.tobytes() == b.data.tobytes()


def _rewrite_meta(path, mutate):
    with np.load(path) as z:
        files = {k: z[k] for k in z.files}
    meta = json.loads(files["__meta__"].tobytes())
    mutate(meta)
    files["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **files)


def test_checkpoint_wrong_version(tmp_path):
    path = tmp_path / "n.npz"
    dn.save_checkpoint(Mlp.init([2, 2], np.random.default_rng(0)), path)
    _rewrite_meta(path, lambda m: m.update(format_version=99))
    with pytest.raises(dn.CheckpointError, match="format_version"):
        dn.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "n.npz"
    dn.save_checkpoint(Mlp.init([8, 32, 8], np.random.default_rng(0)), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(dn.CheckpointError):
        dn.load_checkpoint(path)


def test_checkpoint_records_shape_and_version(tmp_path):
    path = tmp_path / "n.npz"
    dn.save_checkpoint(Mlp.init([3, 4, 2], np.random.default_rng(0)), path)
    with zipfile.ZipFile(path) as zf:
        names = set(zf.namelist())
    assert {"__meta__.npy", "net/W0.npy", "net/b1.npy"} <= names
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes())
    assert meta["format_version"] == dn.CHECKPOINT_VERSION
    assert meta["nets"]["net"]["layer_dims"] == [3, 4, 2]


def test_defender_checkpoint_has_expected_shape(tmp_path):
    from rtslab.defender import DynamicsModel, load_defender, save_defender
    S, A = 4, 1
    net = Mlp.init([S + A, 256, 256, S], np.random.default_rng(0))
    model = DynamicsModel(net, "single", 1.0, np.zeros(S), np.ones(S), np.zeros(A), np.ones(A))
    save_defender(model, tmp_path / "d.npz", threshold=0.5)
    loaded, _ = load_defender(tmp_path / "d.npz")
    assert loaded.net.layer_dims == [S + A, 256, 256, S]
