"""Tensor engine: forward oracles, gradients, graph lifetime, serialisation."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import signal
from scipy.special import erf

from stnet import engine as E
from stnet.engine import GraphError, Tensor, grad_check
from stnet.engine.ops import interp_matrix, unbroadcast
from stnet.engine.serialize import FormatError, read_record, write_record

finite = st.floats(-5, 5, allow_nan=False, width=64)


# ---------------------------------------------------------------------------
# forward oracles
# ---------------------------------------------------------------------------

def test_matmul_hand_case():
    out = E.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        E.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_hand_case():
    out = E.softmax(Tensor([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out.data, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_is_stable_for_huge_logits():
    out = E.softmax(Tensor([1000.0, 1000.0, -1000.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5, 0.0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5), elements=finite))
def test_softmax_rows_are_distributions(x):
    out = E.softmax(Tensor(x), axis=-1).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_gelu_matches_erf_form():
    x = np.linspace(-4, 4, 33)
    np.testing.assert_allclose(E.gelu(Tensor(x)).data, 0.5 * x * (1 + erf(x / np.sqrt(2))), atol=1e-12)
    assert E.gelu(Tensor([1.0])).data[0] == pytest.approx(0.8413447460685429, abs=1e-7)


def test_sigmoid_saturates_strictly_inside_unit_interval():
    out = E.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    assert 0.0 < out[0] < 1e-300
    assert out[1] == 0.5
    assert out[2] < 1.0


def test_layer_norm_two_values():
    out = E.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_batch_norm_running_stats_update():
    x = np.random.default_rng(0).normal(2.0, 3.0, size=(4, 2, 3, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    E.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    flat = x.transpose(1, 0, 2, 3, 4).reshape(2, -1)
    np.testing.assert_allclose(rm, 0.1 * flat.mean(axis=1), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * flat.var(axis=1, ddof=1), rtol=1e-12)


def test_batch_norm_eval_uses_running_stats():
    x = np.full((2, 1, 1, 1, 2), 5.0)
    out = E.batch_norm(Tensor(x), Tensor([2.0]), Tensor([1.0]), np.array([3.0]), np.array([4.0]),
                       training=False)
    np.testing.assert_allclose(out.data, 2.0 * (5.0 - 3.0) / np.sqrt(4.0 + 1e-5) + 1.0)


def test_interp_ramp_align_corners():
    np.testing.assert_allclose(interp_matrix(3, 2) @ np.array([0.0, 1.0]), [0.0, 0.5, 1.0])


def test_trilinear_same_size_is_exact_copy():
    p = np.random.default_rng(1).normal(size=(1, 3, 2, 3, 4))
    out = E.trilinear_interpolate(Tensor(p), (2, 3, 4))
    assert np.array_equal(out.data, p)


def test_conv_all_ones_counts_window():
    out = E.conv3d_grouped(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))))
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.data.item() == 27.0


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_grouped_conv_matches_scipy_correlate(stride, padding):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 5, 6, 5))
    w = rng.normal(size=(6, 2, 3, 3, 3))
    out = E.conv3d_grouped(Tensor(x), Tensor(w), groups=2, stride=stride, padding=padding).data
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    ref = np.zeros_like(out)
    for b in range(2):
        for o in range(6):
            g = o // 3
            acc = sum(signal.correlate(xp[b, 2 * g + c], w[o, c], mode="valid") for c in range(2))
            ref[b, o] = acc[::stride, ::stride, ::stride]
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_conv_rejects_indivisible_groups():
    with pytest.raises(ValueError):
        E.conv3d_grouped(Tensor(np.ones((1, 3, 3, 3, 3))), Tensor(np.ones((2, 1, 1, 1, 1))), groups=2)


def test_avg_pool_mean_of_cube():
    x = np.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2)
    assert E.avg_pool3d(Tensor(x), 2).data.item() == 4.5


def test_avg_pool_window_too_large():
    with pytest.raises(ValueError):
        E.avg_pool3d(Tensor(np.ones((1, 1, 1, 4, 4))), 2)


# ---------------------------------------------------------------------------
# autodiff
# ---------------------------------------------------------------------------

def test_reused_input_accumulates():
    x = Tensor([3.0], requires_grad=True)
    E.backward(E.tsum(x + x))
    np.testing.assert_array_equal(x.grad, [2.0])


def test_diamond_graph():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    E.backward(E.tsum(y * x + y))  # x^3 + x^2
    np.testing.assert_allclose(x.grad, [3 * 4 + 2 * 2])


def test_second_backward_on_released_graph_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = E.tsum(x * x)
    E.backward(loss)
    with pytest.raises(GraphError):
        E.backward(loss)


def test_backward_needs_scalar():
    with pytest.raises(GraphError, match="scalar"):
        E.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with E.no_grad():
        y = x * 3.0
    assert not y.requires_grad


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([(2, 3), (1, 3), (3,), (1,), ()]), st.integers(0, 2**16))
def test_unbroadcast_inverts_broadcast(shape, seed):
    g = np.random.default_rng(seed).normal(size=(2, 3))
    red = unbroadcast(g, shape)
    assert red.shape == shape
    assert red.sum() == pytest.approx(g.sum())


def test_grad_check_constant_function_reports_zero():
    rep = grad_check(lambda t: E.tsum(t * 0.0) + 1.0, np.ones(3))
    assert rep.max_rel_error == 0.0 and rep.passed


def test_grad_check_catches_wrong_gradient():
    from stnet.engine.tensor import make_result

    def bad_square(t):
        return make_result(np.asarray((t.data ** 2).sum()), "bad", (t,), lambda g: (g * 3.0 * t.data,))

    rep = grad_check(bad_square, np.array([1.0, -2.0]))
    assert not rep.passed


def test_grad_check_rejects_nondeterminism():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="deterministic"):
        grad_check(lambda t: E.tsum(t * float(rng.normal())), np.ones(2))


def test_engine_gradient_suite_passes():
    from stnet.checks import engine_checks

    failed = [(name, str(rep)) for name, rep in engine_checks() if not rep.passed]
    assert not failed


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.text(min_size=1, max_size=20),
       hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4),
                  elements=st.floats(-1e3, 1e3, width=32)))
def test_record_round_trip(name, arr):
    buf = io.BytesIO()
    write_record(buf, name, arr)
    buf.seek(0)
    got_name, got = read_record(buf)
    assert got_name == name
    assert got.shape == arr.shape
    assert np.array_equal(got, arr)


def test_truncated_record_is_a_format_error():
    buf = io.BytesIO()
    write_record(buf, "w", np.ones((2, 2), np.float32))
    with pytest.raises(FormatError):
        read_record(io.BytesIO(buf.getvalue()[:-3]))
