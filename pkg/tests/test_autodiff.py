import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visfuse import autodiff as ad


def taped(arr):
    tape = ad.Tape()
    p = ad.Parameter("x", np.asarray(arr, dtype=np.float64))
    return tape, p, tape.watch(p)


# --- frozen forward values ------------------------------------------------

def test_softmax_known_values():
    # e^0 = 1 and e^(ln 3) = 3, so the masses split 1/4 : 3/4
    out = ad.softmax(ad.constant([0.0, np.log(3.0)]))
    npt.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_singleton_is_one():
    out = ad.softmax(ad.constant([2.7]))
    npt.assert_allclose(out.data, [1.0], atol=0)


def test_relu_known_values():
    out = ad.relu(ad.constant([1.5, -2.0]))
    npt.assert_array_equal(out.data, [1.5, 0.0])


def test_dot_gradients_are_the_other_operand():
    tape = ad.Tape()
    a = ad.Parameter("a", [1.0, 2.0])
    b = ad.Parameter("b", [3.0, 4.0])
    out = ad.dot(tape.watch(a), tape.watch(b))
    npt.assert_allclose(out.data, 11.0)
    ad.backward(tape, out)
    npt.assert_array_equal(a.grad, [3.0, 4.0])
    npt.assert_array_equal(b.grad, [1.0, 2.0])


def test_matmul_vector_and_matrix_forms():
    w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    x = np.array([1.0, -1.0])
    out = ad.matmul(ad.constant(w), ad.constant(x))
    npt.assert_array_equal(out.data, [-1.0, -1.0, -1.0])
    m = ad.matmul(ad.constant(w), ad.constant(np.eye(2)))
    npt.assert_array_equal(m.data, w)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        ad.add(ad.constant([1.0, 2.0]), ad.constant([1.0, 2.0, 3.0]))


# --- backward mechanics -----------------------------------------------------

def test_backward_requires_scalar_loss():
    tape, _, x = taped([1.0, 2.0])
    y = ad.relu(x)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(tape, y)


def test_repeated_backward_without_reset_errors():
    tape, p, x = taped([1.0, 2.0])
    loss = ad.sum_all(ad.hadamard(x, x))
    ad.backward(tape, loss)
    with pytest.raises(RuntimeError, match="consumed"):
        ad.backward(tape, loss)
    tape.reset()  # after reset the tape records and differentiates again
    loss2 = ad.sum_all(tape.watch(p))
    ad.backward(tape, loss2)


def test_constant_function_has_zero_gradient():
    tape, p, x = taped([1.0, -2.0, 3.0])
    loss = ad.sum_all(ad.hadamard(ad.constant([1.0, 1.0]), ad.constant([2.0, 2.0])))
    ad.backward(tape, loss)
    npt.assert_array_equal(p.grad, np.zeros(3))


def test_frozen_parameter_receives_zero_accumulation():
    tape = ad.Tape()
    p = ad.Parameter("frozen", [1.0, 2.0], trainable=False)
    q = ad.Parameter("live", [3.0, 4.0])
    loss = ad.sum_all(ad.hadamard(tape.watch(p), tape.watch(q)))
    ad.backward(tape, loss)
    npt.assert_array_equal(p.grad, [0.0, 0.0])
    npt.assert_array_equal(q.grad, [1.0, 2.0])


def test_reused_node_accumulates_both_paths():
    # f(x) = sum(x*x) + sum(x) -> grad = 2x + 1
    tape, p, x = taped([1.0, -3.0])
    loss = ad.add(ad.sum_all(ad.hadamard(x, x)), ad.sum_all(x))
    ad.backward(tape, loss)
    npt.assert_allclose(p.grad, [3.0, -5.0])


# --- gradient checking ------------------------------------------------------

def test_grad_check_quadratic_is_tight():
    rng = np.random.default_rng(0)
    for _ in range(5):
        pt = rng.normal(size=6)
        err = ad.grad_check(lambda x: ad.sum_all(ad.hadamard(x, x)), pt)
        assert err < 1e-8


def test_grad_check_constant_function():
    err = ad.grad_check(lambda x: ad.constant(3.0), np.ones(4))
    assert err == 0.0


OP_CASES = [
    ("add", lambda x: ad.sum_all(ad.add(x, ad.constant(np.arange(6.0).reshape(2, 3)))), (2, 3)),
    ("sub", lambda x: ad.sum_all(ad.sub(ad.constant(np.ones((2, 3))), x)), (2, 3)),
    ("scale", lambda x: ad.sum_all(ad.scale(x, -2.5)), (4,)),
    ("hadamard", lambda x: ad.sum_all(ad.hadamard(x, x)), (3, 2)),
    ("tanh", lambda x: ad.sum_all(ad.tanh(x)), (5,)),
    ("sigmoid", lambda x: ad.sum_all(ad.sigmoid(x)), (5,)),
    ("softmax", lambda x: ad.dot(ad.softmax(x), ad.constant([1.0, -2.0, 0.5, 3.0])), (4,)),
    ("softmax2d", lambda x: ad.sum_all(ad.hadamard(ad.softmax(x), ad.constant(np.arange(6.0).reshape(2, 3)))), (2, 3)),
    ("log_sum_exp", lambda x: ad.log_sum_exp(x), (5,)),
    ("log_sum_exp2d", lambda x: ad.sum_all(ad.log_sum_exp(x)), (3, 4)),
    ("matmul", lambda x: ad.sum_all(ad.matmul(x, ad.constant(np.arange(6.0).reshape(3, 2)))), (2, 3)),
    ("matvec", lambda x: ad.sum_all(ad.matmul(x, ad.constant([1.0, -1.0, 2.0]))), (2, 3)),
    ("vecmat", lambda x: ad.sum_all(ad.matmul(x, ad.constant(np.arange(6.0).reshape(3, 2)))), (3,)),
    ("transpose", lambda x: ad.sum_all(ad.hadamard(ad.transpose(x), ad.constant(np.arange(6.0).reshape(3, 2)))), (2, 3)),
    ("l2_normalize", lambda x: ad.dot(ad.l2_normalize(x), ad.constant([1.0, 2.0, 3.0])), (3,)),
    ("l2_normalize2d", lambda x: ad.sum_all(ad.hadamard(ad.l2_normalize(x), ad.constant(np.arange(6.0).reshape(2, 3)))), (2, 3)),
    ("row_sum", lambda x: ad.dot(ad.row_sum(x), ad.constant([1.0, -2.0])), (2, 4)),
    ("mul_colvec", lambda x: ad.sum_all(ad.mul_colvec(x, ad.constant([1.5, -0.5]))), (2, 3)),
    ("add_bias", lambda x: ad.sum_all(ad.add_bias(x, ad.constant([1.0, 2.0, 3.0]))), (2, 3)),
    ("concat", lambda x: ad.dot(ad.concat([x, ad.scale(x, 2.0)]), ad.constant(np.arange(8.0))), (4,)),
    ("take", lambda x: ad.take(x, 2), (5,)),
    ("take_row", lambda x: ad.sum_all(ad.take_row(x, 1)), (3, 4)),
    ("take_rows", lambda x: ad.sum_all(ad.take_rows(x, [0, 2, 0])), (3, 4)),
    ("take_col", lambda x: ad.sum_all(ad.take_col(x, 1)), (3, 4)),
    ("pick_per_row", lambda x: ad.sum_all(ad.pick_per_row(x, [2, 0, 1])), (3, 4)),
    ("mean_all", lambda x: ad.mean_all(x), (3, 3)),
]


@pytest.mark.parametrize("name,fn,shape", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_op_gradients_match_finite_differences(name, fn, shape):
    rng = np.random.default_rng(hash(name) % 2 ** 31)
    for _ in range(3):
        pt = rng.normal(size=shape)
        assert ad.grad_check(fn, pt) < 1e-6


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(11)
    pt = rng.normal(size=6)
    pt[np.abs(pt) < 0.1] += 0.2  # keep clear of the hinge
    err = ad.grad_check(lambda x: ad.sum_all(ad.relu(x)), pt)
    assert err < 1e-8


def test_reduce_max_gradient_at_unique_max():
    pt = np.array([0.3, 2.0, -1.0, 0.9])
    err = ad.grad_check(lambda x: ad.reduce_max(x), pt)
    assert err < 1e-8


def test_row_max_matches_numpy_and_gradient():
    pt = np.array([[0.3, 2.0, -1.0], [5.0, 0.1, 4.9]])
    out = ad.row_max(ad.constant(pt))
    assert np.array_equal(out.data, [2.0, 5.0])
    err = ad.grad_check(lambda x: ad.dot(ad.row_max(x), ad.constant([1.0, -2.0])), pt)
    assert err < 1e-8
    with pytest.raises(ValueError):
        ad.row_max(ad.constant(np.ones(3)))


def test_weight_norm_linear_gradients():
    rng = np.random.default_rng(7)
    v0 = rng.normal(size=(3, 4))
    g0 = rng.normal(size=3)
    b0 = rng.normal(size=3)
    x0 = rng.normal(size=4)
    xb = rng.normal(size=(5, 4))
    w = ad.constant(np.array([0.7, -1.1, 0.4]))

    def wrt_x(x):
        return ad.dot(ad.weight_norm_linear(x, ad.constant(v0), ad.constant(g0), ad.constant(b0)), w)

    def wrt_v(v):
        return ad.dot(ad.weight_norm_linear(ad.constant(x0), v, ad.constant(g0), ad.constant(b0)), w)

    def wrt_g(g):
        return ad.dot(ad.weight_norm_linear(ad.constant(x0), ad.constant(v0), g, ad.constant(b0)), w)

    def wrt_b(b):
        return ad.dot(ad.weight_norm_linear(ad.constant(x0), ad.constant(v0), ad.constant(g0), b), w)

    def batched_wrt_v(v):
        return ad.sum_all(ad.weight_norm_linear(ad.constant(xb), v, ad.constant(g0), ad.constant(b0)))

    assert ad.grad_check(wrt_x, x0) < 1e-7
    assert ad.grad_check(wrt_v, v0) < 1e-7
    assert ad.grad_check(wrt_g, g0) < 1e-7
    assert ad.grad_check(wrt_b, b0) < 1e-7
    assert ad.grad_check(batched_wrt_v, v0) < 1e-7


def test_weight_norm_linear_rejects_zero_direction():
    v = np.zeros((2, 3))
    with pytest.raises(ValueError, match="degenerate"):
        ad.weight_norm_linear(ad.constant(np.ones(3)), ad.constant(v),
                              ad.constant(np.ones(2)))


def test_weight_norm_scale_invariance_in_direction():
    # g * v / ||v|| is invariant to positive rescaling of v
    rng = np.random.default_rng(3)
    v = rng.normal(size=(3, 4))
    g = rng.normal(size=3)
    x = rng.normal(size=4)
    a = ad.weight_norm_linear(ad.constant(x), ad.constant(v), ad.constant(g))
    b = ad.weight_norm_linear(ad.constant(x), ad.constant(7.0 * v), ad.constant(g))
    npt.assert_allclose(a.data, b.data, atol=1e-12)


# --- dropout ----------------------------------------------------------------

def test_dropout_eval_mode_is_identity():
    x = ad.constant([1.0, 2.0, 3.0])
    out = ad.dropout(x, 0.4, train=False)
    assert out is x


def test_dropout_train_mode_masks_and_rescales():
    rng = np.random.default_rng(5)
    x = np.ones(10000)
    out = ad.dropout(ad.constant(x), 0.4, train=True, rng=rng)
    vals = np.unique(out.data)
    assert set(np.round(vals, 12)) <= {0.0, np.round(1.0 / 0.6, 12)}
    # survivor mass stays near 1 on average
    assert abs(out.data.mean() - 1.0) < 0.05


def test_dropout_deterministic_under_seed():
    a = ad.dropout(ad.constant(np.ones(64)), 0.4, True, np.random.default_rng(9)).data
    b = ad.dropout(ad.constant(np.ones(64)), 0.4, True, np.random.default_rng(9)).data
    npt.assert_array_equal(a, b)


def test_dropout_rejects_bad_rate():
    with pytest.raises(ValueError, match="rate"):
        ad.dropout(ad.constant([1.0]), 1.0, True, np.random.default_rng(0))


# --- Adam -------------------------------------------------------------------

def test_adam_single_step_matches_hand_calculation():
    # m=0.1, v=0.001; bias-corrected both become 1; step = -lr * 1/(1+eps)
    p = ad.Parameter("w", np.array(0.0))
    p.grad = np.array(1.0)
    opt = ad.Adam(lr=0.1)
    opt.step([p])
    npt.assert_allclose(p.data, -0.1, atol=1e-8)


def test_adam_moments_persist_across_steps():
    p = ad.Parameter("w", np.array(0.0))
    opt = ad.Adam(lr=0.1)
    p.grad = np.array(1.0)
    opt.step([p])
    m, v = opt.moments["w"]
    npt.assert_allclose(m, 0.1)
    npt.assert_allclose(v, 0.001)
    p.grad = np.array(-1.0)
    opt.step([p])
    m2, v2 = opt.moments["w"]
    npt.assert_allclose(m2, 0.9 * 0.1 + 0.1 * -1.0)
    npt.assert_allclose(v2, 0.999 * 0.001 + 0.001 * 1.0)
    assert opt.step_count == 2


def test_adam_leaves_frozen_parameters_bit_identical():
    data = np.array([1.0, -2.0, 3.5])
    p = ad.Parameter("frozen", data.copy(), trainable=False)
    p.grad = np.array([10.0, 10.0, 10.0])
    opt = ad.Adam(lr=0.5)
    for _ in range(3):
        opt.step([p])
    assert p.data.tobytes() == data.tobytes()
    assert "frozen" not in opt.moments


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(ValueError, match="positive"):
        ad.Adam(lr=0.0)


def test_adam_state_roundtrip():
    p = ad.Parameter("w", np.zeros(3))
    p.grad = np.array([1.0, 2.0, 3.0])
    opt = ad.Adam(lr=0.01)
    opt.step([p])
    clone = ad.Adam(lr=0.01)
    clone.load_state_arrays(opt.state_arrays())
    assert clone.step_count == 1
    npt.assert_array_equal(clone.moments["w"][0], opt.moments["w"][0])
    npt.assert_array_equal(clone.moments["w"][1], opt.moments["w"][1])


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(2)
    arrays = {
        "a.weight": rng.normal(size=(3, 4)),
        "a.bias": rng.normal(size=4),
        "scalar": np.array(2.5),
    }
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, arrays)
    loaded = ad.load_checkpoint(path)
    assert list(loaded) == list(arrays)
    for k in arrays:
        assert loaded[k].tobytes() == np.asarray(arrays[k], dtype=np.float64).tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        ad.load_checkpoint(path)


def test_checkpoint_truncation_detected(tmp_path):
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, {"w": np.arange(6.0).reshape(2, 3)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(ValueError, match="truncated"):
        ad.load_checkpoint(path)


def test_load_arrays_into_checks_shapes(tmp_path):
    p = ad.Parameter("w", np.zeros((2, 2)))
    with pytest.raises(ValueError, match="shape"):
        ad.load_arrays_into([p], {"w": np.zeros(3)})
    with pytest.raises(KeyError):
        ad.load_arrays_into([p], {})


def test_checksum_tracks_content():
    p = ad.Parameter("w", np.array([1.0, 2.0]))
    before = ad.checksum([p])
    assert before == ad.checksum([p])
    p.data[0] = 5.0
    assert ad.checksum([p]) != before


# --- property tests -----------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=8))
def test_softmax_is_probability_vector(vals):
    out = ad.softmax(ad.constant(vals)).data
    assert np.all(out > 0.0)
    assert abs(out.sum() - 1.0) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_l2_normalize_gives_unit_norm(n, seed):
    x = np.random.default_rng(seed).normal(size=n) + 0.1
    out = ad.l2_normalize(ad.constant(x)).data
    assert abs(np.linalg.norm(out) - 1.0) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_forward_ops_stay_finite(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=100.0, size=6)
    for fn in (ad.relu, ad.tanh, ad.sigmoid, ad.softmax):
        assert np.all(np.isfinite(fn(ad.constant(x)).data))
