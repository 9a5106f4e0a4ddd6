"""Core engine tests: every op's backward rule against finite differences,
Adam against a hand-evaluated update, and the determinism/finiteness
contracts."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dceeg import autodiff as ad
from dceeg.checkpoint import CheckpointError, load_tensors, save_tensors


def t64(x, grad=False, name=None):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, name=name)


# ---------------------------------------------------------------------------
# forward basics
# ---------------------------------------------------------------------------

def test_identity_passthrough():
    x = t64([1.0, -2.0, 3.0])
    assert np.array_equal(ad.reshape(x, (3,)).data, x.data)


def test_softmax_uniform_logits():
    out = ad.softmax(t64([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_matmul_identity():
    a = t64([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, t64(np.eye(2)))
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_shape_error_names_both_nodes():
    a = t64(np.ones((2, 3)), name="lhs")
    b = t64(np.ones((2, 3)), name="rhs")
    with pytest.raises(ad.ShapeError, match="lhs.*rhs"):
        ad.matmul(a, b)


def test_non_finite_forward_raises_with_node_identifier():
    x = t64([0.0, 1.0], grad=True, name="probe")
    with np.errstate(divide="ignore"):
        with pytest.raises(ad.NonFiniteError, match="log#"):
            ad.log(x)


# ---------------------------------------------------------------------------
# backward basics
# ---------------------------------------------------------------------------

def test_grad_of_sum_is_ones():
    x = t64([1.0, 2.0, 3.0], grad=True)
    ad.backward(ad.tsum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_grad_of_mean_square():
    # d/dx mean(x^2) = x for two elements; confirmed by finite differences
    x = t64([1.0, 2.0], grad=True)
    ad.backward(ad.tmean(ad.mul(x, x)))
    np.testing.assert_allclose(x.grad, [1.0, 2.0], atol=1e-12)
    rep = ad.finite_diff_check(lambda: ad.tmean(ad.mul(x, x)), {"x": x})
    assert rep.passed


def test_backward_requires_scalar():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(ad.GraphError, match="scalar"):
        ad.backward(ad.mul(x, x))


def test_backward_without_graph_raises():
    x = t64(3.0)
    with pytest.raises(ad.GraphError, match="requires grad"):
        ad.backward(x)


def test_untouched_params_get_zero_grad():
    x = t64([1.0], grad=True)
    unused = t64([5.0, 6.0], grad=True)
    ad.backward(ad.tsum(x), params=[x, unused])
    np.testing.assert_array_equal(unused.grad, [0.0, 0.0])


def test_gradients_accumulate_across_reuse():
    x = t64([2.0], grad=True)
    y = ad.add(ad.mul(x, x), ad.mul(x, x))   # 2x^2, dy/dx = 4x
    ad.backward(ad.tsum(y))
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_blocks_recording():
    x = t64([1.0, 2.0], grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad and y._parents == ()


# ---------------------------------------------------------------------------
# finite-difference sweep over every registered op
# ---------------------------------------------------------------------------

def _rand(rng, shape):
    return ad.Tensor(rng.uniform(-2.0, 2.0, shape), requires_grad=True, dtype=np.float64)


def _op_cases(rng):
    """One loss builder per registered op kind."""
    a23 = _rand(rng, (2, 3))
    b34 = _rand(rng, (3, 4))
    c23 = _rand(rng, (2, 3))
    pos = ad.Tensor(rng.uniform(0.5, 2.0, (2, 3)), requires_grad=True, dtype=np.float64)
    conv_x = _rand(rng, (2, 3, 8))
    conv_w = _rand(rng, (4, 3, 3))
    conv_b = _rand(rng, (4,))
    gain = _rand(rng, (3,))
    bias = _rand(rng, (3,))
    emb = _rand(rng, (5, 3))
    ids = np.array([[0, 2], [4, 1]])
    idx = np.array([2, 0])

    def reduce(t):
        return ad.tmean(ad.mul(t, t))

    return {
        "add": ({"a": a23, "b": c23}, lambda p: reduce(ad.add(p["a"], p["b"]))),
        "sub": ({"a": a23, "b": c23}, lambda p: reduce(ad.sub(p["a"], p["b"]))),
        "mul": ({"a": a23, "b": c23}, lambda p: reduce(ad.mul(p["a"], p["b"]))),
        "scale": ({"a": a23}, lambda p: reduce(ad.scale(p["a"], -1.7))),
        "matmul": ({"a": a23, "b": b34}, lambda p: reduce(ad.matmul(p["a"], p["b"]))),
        "transpose": ({"a": a23}, lambda p: reduce(ad.transpose(p["a"]))),
        "reshape": ({"a": a23}, lambda p: reduce(ad.reshape(p["a"], (3, 2)))),
        "log": ({"a": pos}, lambda p: reduce(ad.log(p["a"]))),
        "exp": ({"a": a23}, lambda p: reduce(ad.exp(p["a"]))),
        "relu": ({"a": a23}, lambda p: reduce(ad.relu(p["a"]))),
        "gelu": ({"a": a23}, lambda p: reduce(ad.gelu(p["a"]))),
        "sum": ({"a": a23}, lambda p: reduce(ad.tsum(p["a"], axis=1))),
        "mean": ({"a": a23}, lambda p: reduce(ad.tmean(p["a"], axis=0))),
        "concat": ({"a": a23, "b": c23}, lambda p: reduce(ad.concat([p["a"], p["b"]], axis=1))),
        "narrow": ({"a": a23}, lambda p: reduce(ad.narrow(p["a"], 1, 1, 2))),
        "broadcast_batch": ({"a": a23}, lambda p: reduce(ad.broadcast_batch(p["a"], 4))),
        "embedding": ({"w": emb}, lambda p: reduce(ad.embedding(p["w"], ids))),
        "gather_index": ({"a": a23}, lambda p: reduce(ad.gather_index(p["a"], idx, axis=1))),
        "softmax": ({"a": a23}, lambda p: reduce(ad.softmax(p["a"], axis=1, temperature=2.5))),
        "log_softmax": ({"a": a23}, lambda p: reduce(ad.log_softmax(p["a"], axis=1, temperature=0.7))),
        "layer_norm": ({"a": a23, "g": gain, "b": bias},
                       lambda p: reduce(ad.layer_norm(p["a"], p["g"], p["b"]))),
        "l2_normalize": ({"a": a23}, lambda p: reduce(ad.l2_normalize(p["a"], axis=1))),
        "conv1d": ({"x": conv_x, "w": conv_w, "b": conv_b},
                   lambda p: reduce(ad.conv1d(p["x"], p["w"], p["b"], stride=2, padding=1))),
        "dropout": ({"a": a23},
                    lambda p: reduce(ad.dropout(p["a"], 0.4, train=True, seed=9,
                                                node_tag="sweep", step=3))),
    }


def test_every_registered_op_has_a_sweep_case(rng):
    missing = ad.REGISTERED_OPS - set(_op_cases(rng))
    assert not missing, f"ops without a finite-difference case: {sorted(missing)}"


@pytest.mark.parametrize("op_name", sorted(ad.REGISTERED_OPS))
def test_op_gradient_matches_finite_differences(op_name, rng):
    params, loss_fn = _op_cases(rng)[op_name]
    report = ad.finite_diff_check(lambda: loss_fn(params), params, tolerance=1e-4)
    assert report.passed, f"{op_name}: worst {report.worst}"


def test_corrupted_backward_rule_fails_check(rng, monkeypatch):
    x = _rand(rng, (2, 3))

    def bad_gelu(t, name=None):
        out = ad.gelu(t, name)
        orig = out._backward

        def corrupted(g):
            orig(g * 1.5)
        out._backward = corrupted
        return out

    report = ad.finite_diff_check(lambda: ad.tmean(ad.mul(bad_gelu(x), bad_gelu(x))),
                                  {"x": x}, tolerance=1e-4)
    assert not report.passed


# ---------------------------------------------------------------------------
# op properties
# ---------------------------------------------------------------------------

@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6),
       st.floats(0.1, 10.0))
def test_softmax_rows_sum_to_one_any_temperature(logits, temp):
    out = ad.softmax(ad.Tensor(np.asarray(logits, np.float64)), temperature=temp)
    assert out.data.min() >= 0.0
    assert abs(out.data.sum() - 1.0) <= 1e-9


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8).filter(
    lambda v: np.linalg.norm(v) > 1e-3))
def test_l2_normalize_unit_norm(vec):
    out = ad.l2_normalize(ad.Tensor(np.asarray(vec, np.float64)), axis=0)
    assert abs(np.linalg.norm(out.data) - 1.0) <= 1e-9


def test_dropout_eval_mode_is_identity(rng):
    x = _rand(rng, (4, 5))
    out = ad.dropout(x, 0.5, train=False, seed=1, node_tag="site", step=0)
    assert out is x


def test_dropout_counter_stream_independent_of_order():
    x = ad.Tensor(np.ones((8, 8)), dtype=np.float64)
    a = ad.dropout(x, 0.5, train=True, seed=3, node_tag="siteA", step=7)
    b = ad.dropout(x, 0.5, train=True, seed=3, node_tag="siteB", step=7)
    a2 = ad.dropout(x, 0.5, train=True, seed=3, node_tag="siteA", step=7)
    assert np.array_equal(a.data, a2.data)
    assert not np.array_equal(a.data, b.data)


def test_finite_checks_toggle():
    x = ad.Tensor(np.array([0.0]))
    ad.set_finite_checks(False)
    try:
        with np.errstate(divide="ignore"):
            out = ad.log(x)
        assert np.isneginf(out.data[0])
    finally:
        ad.set_finite_checks(True)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_grad_no_decay_keeps_params():
    p = ad.Tensor(np.array([1.5, -2.0]), requires_grad=True, dtype=np.float64)
    p.grad = np.zeros(2)
    state = ad.AdamState(lr=0.1, weight_decay=0.0)
    ad.adam_step({"p": p}, state)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    assert state.step == 1


def test_adam_descends_against_constant_gradient():
    p = ad.Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    state = ad.AdamState(lr=0.01, weight_decay=0.0)
    for _ in range(50):
        p.grad = np.array([2.0])
        ad.adam_step({"p": p}, state)
    assert p.data[0] < -0.3
    assert state.step == 50


def test_adam_single_step_hand_value():
    # p=1, g=1, lr=0.1, betas=(0.9, 0.999), eps=1e-8:
    # m_hat = 1, v_hat = 1 -> p' = 1 - 0.1 * 1/(1 + 1e-8) ~= 0.9
    p = ad.Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
    p.grad = np.array([1.0])
    ad.adam_step({"p": p}, ad.AdamState(lr=0.1, weight_decay=0.0))
    np.testing.assert_allclose(p.data, [0.9], atol=1e-8)


def test_adam_shape_mismatch():
    p = ad.Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
    with pytest.raises(ad.ShapeError):
        ad.adam_step({"p": p}, ad.AdamState(lr=0.1), grads={"p": np.ones(4)})


def test_adam_state_validation():
    with pytest.raises(ValueError):
        ad.AdamState(lr=-1.0)
    with pytest.raises(ValueError):
        ad.AdamState(lr=0.1, beta1=1.0)


# ---------------------------------------------------------------------------
# finite_diff_check reporting
# ---------------------------------------------------------------------------

def test_finite_diff_report_lists_every_parameter(rng):
    w = _rand(rng, (3, 2))
    b = _rand(rng, (2,))
    x = ad.Tensor(rng.normal(size=(4, 3)), dtype=np.float64)

    def loss():
        return ad.tmean(ad.gelu(ad.add(ad.matmul(x, w), b)))

    rep = ad.finite_diff_check(loss, {"w": w, "b": b}, tolerance=1e-4)
    assert rep.passed and set(rep.max_rel_error) == {"w", "b"}


def test_finite_diff_layer_norm_softmax_chain(rng):
    x = _rand(rng, (2, 4))
    g = _rand(rng, (4,))
    b = _rand(rng, (4,))

    def loss():
        h = ad.layer_norm(x, g, b)
        return ad.tmean(ad.mul(ad.softmax(h, axis=1), ad.Tensor(np.arange(4, dtype=np.float64))))

    rep = ad.finite_diff_check(loss, {"x": x, "g": g, "b": b}, tolerance=1e-4)
    assert rep.passed, rep.max_rel_error


# ---------------------------------------------------------------------------
# determinism and precision
# ---------------------------------------------------------------------------

def _tiny_training_run(dtype):
    rng = np.random.default_rng(77)
    w = ad.Tensor(rng.normal(size=(3, 2)).astype(dtype), requires_grad=True)
    x = np.asarray(rng.normal(size=(5, 3)), dtype=dtype)
    y = np.asarray(rng.normal(size=(5, 2)), dtype=dtype)
    state = ad.AdamState(lr=0.01)
    for step in range(20):
        h = ad.matmul(ad.Tensor(x), w)
        h = ad.dropout(h, 0.3, train=True, seed=5, node_tag="h", step=step)
        diff = ad.sub(h, ad.Tensor(y))
        loss = ad.tmean(ad.mul(diff, diff))
        ad.zero_grad([w])
        ad.backward(loss, [w])
        ad.adam_step({"w": w}, state)
    return w.data.copy()


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_training_trajectory_bit_identical_per_seed(dtype):
    assert np.array_equal(_tiny_training_run(dtype), _tiny_training_run(dtype))


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, rng):
    tensors = {
        "eeg_encoder/block0/W": rng.normal(size=(4, 5)).astype(np.float32),
        "clip/log_sigma": np.asarray(2.5, dtype=np.float64),
        "labels": np.arange(6, dtype=np.uint16),
    }
    path = tmp_path / "model.ckpt"
    save_tensors(path, tensors)
    header = path.read_bytes()[:6].decode()
    assert header == "DCEEG1"
    loaded = load_tensors(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == tensors[name].dtype
        assert loaded[name].shape == tensors[name].shape
        np.testing.assert_array_equal(loaded[name], tensors[name])


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE\nstuff")
    with pytest.raises(CheckpointError, match="DCEEG1"):
        load_tensors(p)


def test_checkpoint_rejects_truncation(tmp_path, rng):
    p = tmp_path / "trunc.ckpt"
    save_tensors(p, {"w": rng.normal(size=(8, 8)).astype(np.float32)})
    raw = p.read_bytes()
    p.write_bytes(raw[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_tensors(p)


def test_checkpoint_rejects_whitespace_names(tmp_path):
    with pytest.raises(CheckpointError, match="whitespace"):
        save_tensors(tmp_path / "x.ckpt", {"bad name": np.zeros(1, np.float32)})
