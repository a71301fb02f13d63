import math
import os

import numpy as np
import pytest

from speechsql import autodiff as ad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-8)) if a.size else 0.0


def finite_diff(fn, x, h=1e-3):
    """Central differences of a scalar fn at every entry of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def weighted_loss(tape, out, w):
    return tape.sum(tape.mul(out, tape.const(w)))


def check_op_grad(build, shapes, seed, h=1e-3, tol=1e-3):
    """FD-check one primitive: `build(tape, *tensors) -> Tensor`.

    Analytic gradients come from the float32 engine; the finite-difference
    oracle re-evaluates the same graph in float64 so truncation noise stays
    well under the tolerance.
    """
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    arrays = []
    for j, shp in enumerate(shapes):
        arr = rng.uniform(-1.0, 1.0, size=shp).astype(ad.DTYPE)
        arrays.append(store.add(f"x{j}", arr).data)

    def run(dtype=ad.DTYPE):
        tape = ad.Tape(dtype=dtype)
        xs = [tape.watch(store[f"x{j}"]) for j in range(len(shapes))]
        out = build(tape, *xs)
        w = np.random.default_rng(seed + 1).uniform(0.5, 1.5, size=out.data.shape)
        loss = weighted_loss(tape, out, w.astype(dtype))
        return tape, loss

    tape, loss = run()
    grads = tape.backward(loss)
    for j in range(len(shapes)):
        fd = finite_diff(lambda: float(run(np.float64)[1].data), arrays[j], h=h)
        err = rel_err(grads[f"x{j}"], fd)
        assert err < tol, f"param x{j}: rel err {err}"


SEEDS = range(20)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul(seed):
    check_op_grad(lambda t, a, b: t.matmul(a, b), [(2, 4), (4, 3)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_add_broadcast(seed):
    check_op_grad(lambda t, a, b: t.add(a, b), [(2, 4), (4,)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_mul_sub_div(seed):
    check_op_grad(lambda t, a, b: t.mul(t.sub(a, b), a), [(2, 4), (2, 4)], seed)
    check_op_grad(lambda t, a, b: t.div(a, t.add(b, t.const(np.full((2, 4), 3.0, ad.DTYPE)))),
                  [(2, 4), (2, 4)], seed + 100)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_tanh_sigmoid_relu(seed):
    check_op_grad(lambda t, a: t.tanh(a), [(2, 4)], seed)
    check_op_grad(lambda t, a: t.sigmoid(a), [(2, 4)], seed + 100)
    # keep relu inputs away from the kink
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.2, 1.0, size=(2, 4)) * rng.choice([-1.0, 1.0], size=(2, 4))
    store = ad.ParamStore()
    store.add("x", x.astype(ad.DTYPE))

    def run():
        tape = ad.Tape()
        out = tape.relu(tape.watch(store["x"]))
        w = np.random.default_rng(seed + 1).uniform(0.5, 1.5, size=(2, 4)).astype(ad.DTYPE)
        return tape, weighted_loss(tape, out, w)

    tape, loss = run()
    grads = tape.backward(loss)
    fd = finite_diff(lambda: float(run()[1].data), store["x"].data)
    assert rel_err(grads["x"], fd) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax_layernorm(seed):
    check_op_grad(lambda t, a: t.softmax(a), [(2, 4)], seed)
    check_op_grad(
        lambda t, x, g, b: t.layer_norm(x, g, b), [(2, 4), (4,), (4,)], seed + 100)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_concat_narrow_reshape_transpose(seed):
    check_op_grad(lambda t, a, b: t.concat([a, b], axis=1), [(2, 3), (2, 2)], seed)
    check_op_grad(lambda t, a: t.narrow(a, 1, 1, 2), [(2, 4)], seed + 100)
    check_op_grad(lambda t, a: t.reshape(a, (4, 2)), [(2, 4)], seed + 200)
    check_op_grad(lambda t, a: t.transpose(a, (1, 0)), [(2, 4)], seed + 300)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_embedding_cross_entropy(seed):
    ids = np.array([[0, 2], [1, 0]])
    check_op_grad(lambda t, w: t.embedding(w, ids), [(3, 4)], seed)
    targets = np.array([1, 3])
    check_op_grad(lambda t, a: t.cross_entropy(a, targets), [(2, 4)], seed + 100)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_select_and_time_gather(seed):
    pos = np.array([1, 0])
    check_op_grad(lambda t, x: t.select_positions(x, pos), [(2, 3, 4)], seed)
    idx = np.array([0, 2])
    check_op_grad(lambda t, x: t.time_gather(x, idx), [(3, 2, 4)], seed + 100)


def test_softmax_symmetry():
    tape = ad.Tape()
    out = tape.softmax(tape.const(np.array([0.0, 0.0], dtype=ad.DTYPE)))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3)).astype(ad.DTYPE)
    tape = ad.Tape()
    out = tape.matmul(tape.const(np.eye(3, dtype=ad.DTYPE)), tape.const(a))
    np.testing.assert_array_equal(out.data, a)


def test_cross_entropy_scalar_hand_value():
    # frozen from the scalar evaluation of -log(e^3 / (e^1 + e^2 + e^3))
    expected = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    tape = ad.Tape()
    out = tape.cross_entropy(tape.const(np.array([1.0, 2.0, 3.0], dtype=ad.DTYPE)), 2)
    assert out.data.shape == ()
    assert abs(float(out.data) - expected) < 1e-6


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 7)).astype(ad.DTYPE) * 3
    tape = ad.Tape()
    out = tape.softmax(tape.const(x))
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-6)


def test_layer_norm_statistics():
    rng = np.random.default_rng(4)
    x = rng.normal(2.0, 3.0, size=(6, 16)).astype(ad.DTYPE)
    tape = ad.Tape()
    out = tape.layer_norm(tape.const(x), tape.const(np.ones(16, ad.DTYPE)),
                          tape.const(np.zeros(16, ad.DTYPE)))
    mu = out.data.mean(axis=-1)
    var = out.data.var(axis=-1)
    assert np.all(np.abs(mu) < 1e-5)
    assert np.all(np.abs(var - 1.0) < 1e-4)


def test_shape_error_names_op_and_shapes():
    tape = ad.Tape()
    a = tape.const(np.zeros((2, 3), ad.DTYPE))
    b = tape.const(np.zeros((2, 3), ad.DTYPE))
    with pytest.raises(ad.ShapeError) as ei:
        tape.matmul(a, b)
    assert ei.value.op == "matmul"
    assert (2, 3) in ei.value.shapes


def test_nonfinite_forward_raises():
    tape = ad.Tape()
    a = tape.const(np.array([1.0, 0.0], ad.DTYPE))
    with pytest.raises(ad.NumericError):
        tape.div(a, tape.const(np.array([1.0, 0.0], ad.DTYPE)))


# -- grad_reverse ------------------------------------------------------------


def test_grad_reverse_forward_is_identity():
    x = np.array([1.0, -2.0], dtype=ad.DTYPE)
    tape = ad.Tape()
    out = tape.grad_reverse(tape.const(x))
    np.testing.assert_array_equal(out.data, x)


def test_grad_reverse_negates_downstream_gradient():
    # downstream gradient [0.3, -0.7] arrives via a weighted sum
    store = ad.ParamStore()
    store.add("x", np.array([2.0, 5.0], dtype=ad.DTYPE))
    w = np.array([0.3, -0.7], dtype=ad.DTYPE)
    tape = ad.Tape()
    out = tape.grad_reverse(tape.watch(store["x"]))
    loss = tape.sum(tape.mul(out, tape.const(w)))
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads["x"], -w)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_reverse_twin_graph_negation(seed):
    """Same graph with / without the reversal: gradients are exact negations."""
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    store.add("x", rng.normal(size=(3, 4)).astype(ad.DTYPE))
    store.add("w", rng.normal(size=(4, 2)).astype(ad.DTYPE))

    def graph(reverse):
        tape = ad.Tape()
        x = tape.watch(store["x"])
        if reverse:
            x = tape.grad_reverse(x)
        h = tape.tanh(tape.matmul(x, tape.watch(store["w"])))
        loss = tape.sum(h)
        return tape.backward(loss)

    g_rev = graph(True)
    g_plain = graph(False)
    np.testing.assert_array_equal(g_rev["x"], -g_plain["x"])
    # w sits above the reversal: its gradient is untouched
    np.testing.assert_array_equal(g_rev["w"], g_plain["w"])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_reverse_composed_fd(seed):
    """In a graph with a reversal, the branch below it carries the exact
    negation of the finite-difference gradient; branches above are untouched."""
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    store.add("a", rng.uniform(-1, 1, size=(2, 4)).astype(ad.DTYPE))
    store.add("b", rng.uniform(-1, 1, size=(4, 3)).astype(ad.DTYPE))
    w = np.random.default_rng(seed + 1).uniform(0.5, 1.5, size=(2, 3))

    def run(dtype=ad.DTYPE):
        tape = ad.Tape(dtype=dtype)
        out = tape.matmul(tape.grad_reverse(tape.tanh(tape.watch(store["a"]))),
                          tape.watch(store["b"]))
        return tape, weighted_loss(tape, out, w.astype(dtype))

    tape, loss = run()
    grads = tape.backward(loss)
    fd_a = finite_diff(lambda: float(run(np.float64)[1].data), store["a"].data)
    fd_b = finite_diff(lambda: float(run(np.float64)[1].data), store["b"].data)
    assert rel_err(grads["a"], -fd_a) < 1e-3
    assert rel_err(grads["b"], fd_b) < 1e-3


# -- backward bookkeeping ----------------------------------------------------


def test_backward_square_at_three():
    store = ad.ParamStore()
    store.add("x", np.array(3.0, dtype=ad.DTYPE))
    tape = ad.Tape()
    x = tape.watch(store["x"])
    loss = tape.mul(x, x)
    grads = tape.backward(loss)
    assert float(grads["x"]) == pytest.approx(6.0)


def test_backward_disconnected_param_gets_zero():
    store = ad.ParamStore()
    store.add("x", np.array(3.0, dtype=ad.DTYPE))
    store.add("unused", np.ones(4, dtype=ad.DTYPE))
    tape = ad.Tape()
    x = tape.watch(store["x"])
    tape.watch(store["unused"])
    grads = tape.backward(tape.mul(x, x))
    np.testing.assert_array_equal(grads["unused"], np.zeros(4))


def test_backward_rejects_nonscalar_loss():
    tape = ad.Tape()
    x = tape.const(np.ones(3, ad.DTYPE))
    with pytest.raises(ad.ShapeError):
        tape.backward(tape.mul(x, x))


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(7)
        store = ad.ParamStore()
        store.add("w", rng.normal(size=(6, 6)).astype(ad.DTYPE))
        tape = ad.Tape()
        w = tape.watch(store["w"])
        h = tape.dropout(tape.tanh(tape.matmul(w, w)), 0.3, np.random.default_rng(11))
        loss = tape.sum(h)
        return h.data.copy(), tape.backward(loss)["w"]

    h1, g1 = run()
    h2, g2 = run()
    np.testing.assert_array_equal(h1, h2)
    np.testing.assert_array_equal(g1, g2)


def test_dropout_eval_is_identity_train_scales():
    x = np.ones((4, 100), dtype=ad.DTYPE)
    tape = ad.Tape()
    xt = tape.const(x)
    assert tape.dropout(xt, 0.5, np.random.default_rng(0), train=False) is xt
    out = tape.dropout(xt, 0.5, np.random.default_rng(0), train=True)
    vals = np.unique(out.data)
    assert set(vals.tolist()) <= {0.0, 2.0}


# -- Adam ---------------------------------------------------------------------


def test_adam_zero_grad_keeps_params():
    store = ad.ParamStore()
    store.add("w", np.array([1.0, 2.0], dtype=ad.DTYPE))
    state = ad.AdamState(store, peak_lr=0.1, warmup_steps=0)
    before = store["w"].data.copy()
    ad.adam_step(store, {"w": np.zeros(2, dtype=ad.DTYPE)}, state)
    np.testing.assert_array_equal(store["w"].data, before)
    assert state.step == 1


def test_adam_single_step_closed_form():
    # frozen from the scalar update formula with m=v=g=1 at t=1
    store = ad.ParamStore()
    store.add("w", np.array(0.5, dtype=ad.DTYPE))
    state = ad.AdamState(store, peak_lr=0.1, warmup_steps=0)
    ad.adam_step(store, {"w": np.array(1.0, dtype=ad.DTYPE)}, state)
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    expected = 0.5 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert float(store["w"].data) == pytest.approx(expected, rel=1e-6)


def test_warmup_schedule_endpoints():
    store = ad.ParamStore()
    store.add("w", np.zeros(1, dtype=ad.DTYPE))
    state = ad.AdamState(store)  # defaults: peak 7.4e-4
    assert state.lr_at(0) == 0.0
    assert state.lr_at(state.warmup_steps) == pytest.approx(7.4e-4)
    assert state.lr_at(state.warmup_steps * 10) == pytest.approx(7.4e-4)


def test_adam_shape_mismatch():
    store = ad.ParamStore()
    store.add("w", np.zeros((2, 2), dtype=ad.DTYPE))
    state = ad.AdamState(store)
    with pytest.raises(ad.ShapeError):
        ad.adam_step(store, {"w": np.zeros(3, dtype=ad.DTYPE)}, state)


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0, 0.0], dtype=ad.DTYPE),
             "b": np.array([0.0, 4.0], dtype=ad.DTYPE)}
    clipped, norm = ad.clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = math.sqrt(sum(float(np.sum(g ** 2)) for g in clipped.values()))
    assert total == pytest.approx(1.0, rel=1e-5)


# -- checkpoint container ------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    store = ad.ParamStore()
    store.add("enc.w", rng.normal(size=(3, 5)).astype(ad.DTYPE))
    store.add("dec.b", rng.normal(size=(7,)).astype(ad.DTYPE))
    state = ad.AdamState(store, peak_lr=0.002, warmup_steps=17)
    ad.adam_step(store, {"enc.w": np.ones((3, 5), ad.DTYPE)}, state)

    path = tmp_path / "model.w2sq"
    ad.save_checkpoint(path, store, adam=state)
    params, opt = ad.load_checkpoint(path)
    np.testing.assert_array_equal(params["enc.w"], store["enc.w"].data)
    np.testing.assert_array_equal(params["dec.b"], store["dec.b"].data)

    store2 = ad.ParamStore()
    store2.add("enc.w", np.zeros((3, 5), ad.DTYPE))
    store2.add("dec.b", np.zeros((7,), ad.DTYPE))
    store2.load_values(params)
    state2 = ad.restore_adam(store2, opt)
    assert state2.step == 1
    assert state2.peak_lr == pytest.approx(0.002)
    assert state2.warmup_steps == 17
    np.testing.assert_array_equal(state2.m["enc.w"], state.m["enc.w"])
    np.testing.assert_array_equal(state2.v["enc.w"], state.v["enc.w"])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.w2sq"
    path.write_bytes(b"XXXX" + b"\x01\x00\x00\x00")
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    store = ad.ParamStore()
    store.add("w", np.ones((4, 4), dtype=ad.DTYPE))
    path = tmp_path / "t.w2sq"
    ad.save_checkpoint(path, store)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ad.CheckpointError) as ei:
        ad.load_checkpoint(path)
    assert "truncated" in str(ei.value)
