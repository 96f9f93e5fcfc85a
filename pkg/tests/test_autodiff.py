import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gto import autodiff as ad
from gto.errors import ConfigError, DimensionError, NumericError, UsageError

H = 1e-5
TOL = 1e-4


def weighted(op, shape_out, seed):
    """Scalar test function sum(op(x) * R) with a fixed random weight R."""
    R = ad.Tensor(np.random.default_rng(seed + 999).normal(size=shape_out))
    return lambda x: ad.sum_all(ad.mul(op(x), R))


def check(op, x, shape_out, seed=0):
    return ad.finite_diff_check(weighted(op, shape_out, seed), ad.Tensor(x), h=H)


UNARY = {
    "exp": (ad.exp, lambda r, s: r.normal(size=s)),
    "log": (ad.log, lambda r, s: r.uniform(0.5, 2.0, size=s)),
    "sqrt": (ad.sqrt, lambda r, s: r.uniform(0.5, 2.0, size=s)),
    "transpose": (ad.transpose, lambda r, s: r.normal(size=s)),
    "softmax": (ad.softmax_rows, lambda r, s: r.normal(size=s)),
    "silu": (lambda x: ad.activation(x, "silu"), lambda r, s: r.normal(size=s)),
    "gelu": (lambda x: ad.activation(x, "gelu"), lambda r, s: r.normal(size=s)),
    "scale": (lambda x: ad.scale(x, -2.5), lambda r, s: r.normal(size=s)),
    "neg": (lambda x: -x, lambda r, s: r.normal(size=s)),
    "slice_cols": (lambda x: ad.slice_cols(x, 1, 3), lambda r, s: r.normal(size=s)),
    "slice_rows": (lambda x: ad.slice_rows(x, 1, 3), lambda r, s: r.normal(size=s)),
    "norm": (ad.norm_all, lambda r, s: r.normal(size=s)),
}


def _away_from_kink(r, s):
    x = r.normal(size=s)
    return np.where(np.abs(x) < 0.1, np.sign(x + 1e-3) * 0.5, x)


UNARY["relu"] = (lambda x: ad.activation(x, "relu"), _away_from_kink)
UNARY["prelu"] = (lambda x: ad.activation(x, "prelu"), _away_from_kink)


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(5))
def test_unary_gradients(f64, name, seed):
    op, gen = UNARY[name]
    r = np.random.default_rng(seed)
    x = gen(r, (4, 5))
    with ad.no_tape():
        out_shape = op(ad.Tensor(x)).shape
    assert check(op, x, out_shape, seed) <= TOL


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("bshape", [(3, 4), (1, 4), (3, 1)])
@pytest.mark.parametrize("name", ["add", "sub", "mul"])
def test_binary_broadcast_gradients(f64, seed, bshape, name):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(3, 4)), r.normal(size=bshape)
    fn = getattr(ad, name)
    assert check(lambda x: fn(x, ad.Tensor(b)), a, (3, 4), seed) <= TOL
    assert check(lambda y: fn(ad.Tensor(a), y), b, (3, 4), seed) <= TOL


@pytest.mark.parametrize("seed", range(5))
def test_matmul_gradients(f64, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(3, 4)), r.normal(size=(4, 2))
    assert check(lambda x: x @ ad.Tensor(b), a, (3, 2), seed) <= TOL
    assert check(lambda y: ad.Tensor(a) @ y, b, (3, 2), seed) <= TOL


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_gradients(f64, seed):
    r = np.random.default_rng(seed)
    x, g, b = r.normal(size=(4, 6)), r.normal(size=(1, 6)), r.normal(size=(1, 6))
    assert check(lambda t: ad.layer_norm(t, ad.Tensor(g), ad.Tensor(b)), x, (4, 6), seed) <= TOL
    assert check(lambda t: ad.layer_norm(ad.Tensor(x), t, ad.Tensor(b)), g, (4, 6), seed) <= TOL
    assert check(lambda t: ad.layer_norm(ad.Tensor(x), ad.Tensor(g), t), b, (4, 6), seed) <= TOL


@pytest.mark.parametrize("seed", range(5))
def test_indexing_gradients(f64, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(5, 3))
    idx = r.integers(0, 5, size=8)
    seg = np.array([0, 0, 2, 2, 2])
    assert check(lambda t: ad.gather_rows(t, idx), x, (8, 3), seed) <= TOL
    assert check(lambda t: ad.segment_mean(t, seg, 4), x, (4, 3), seed) <= TOL
    assert check(lambda t: ad.assign_rows(t, [1, 3], 0.5), x, (5, 3), seed) <= TOL
    assert check(lambda t: ad.assign_rows(t, [1, 3], 0.5, cols=[2]), x, (5, 3), seed) <= TOL
    y = r.normal(size=(5, 2))
    assert check(lambda t: ad.concat_cols([t, ad.Tensor(y), t]), x, (5, 8), seed) <= TOL
    assert check(lambda t: ad.concat_rows([t, t]), x, (10, 3), seed) <= TOL


def test_sum_and_mean_all(f64):
    x = ad.Tensor(np.arange(6.0).reshape(2, 3))
    assert ad.sum_all(x).item() == 15.0
    assert ad.mean_all(x).item() == 2.5
    assert ad.finite_diff_check(ad.mean_all, x, h=H) <= TOL


def test_rank_two_promotion():
    assert ad.Tensor(3.0).shape == (1, 1)
    assert ad.Tensor([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(DimensionError):
        ad.Tensor(np.zeros((2, 2, 2)))


def test_default_precision_and_switch():
    assert ad.Tensor([1.0]).data.dtype == np.float32
    with ad.precision("float64"):
        assert ad.Tensor([1.0]).data.dtype == np.float64
    assert ad.default_dtype() == np.float32
    with pytest.raises(ConfigError):
        ad.set_precision("float16")


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.Tensor(np.zeros((2, 3))) @ ad.Tensor(np.zeros((2, 3)))


def test_broadcast_mismatch():
    with pytest.raises(DimensionError):
        ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((3, 2))))


def test_split_cols_odd_width():
    with pytest.raises(DimensionError):
        ad.split_cols(ad.Tensor(np.zeros((2, 3))))
    a, b = ad.split_cols(ad.Tensor(np.arange(8.0).reshape(2, 4)))
    np.testing.assert_array_equal(a.data, [[0, 1], [4, 5]])
    np.testing.assert_array_equal(b.data, [[2, 3], [6, 7]])


def test_softmax_rows_sum_to_one_and_nan_raises(rng):
    x = ad.Tensor(rng.normal(size=(7, 11)) * 30)
    s = ad.softmax_rows(x).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    with pytest.raises(NumericError):
        ad.softmax_rows(ad.Tensor([[0.0, np.nan]]))


@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 10_000))
def test_softmax_shift_invariance(shift, seed):
    with ad.precision("float64"):
        x = np.random.default_rng(seed).normal(size=(3, 5))
        a = ad.softmax_rows(ad.Tensor(x)).data
        b = ad.softmax_rows(ad.Tensor(x + shift)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_segment_mean_empty_segment_is_zero():
    v = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.segment_mean(v, [0, 0], 3).data
    np.testing.assert_allclose(out, [[2.0, 3.0], [0, 0], [0, 0]])
    with pytest.raises(IndexError):
        ad.segment_mean(v, [0, 5], 3)


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        ad.gather_rows(ad.Tensor(np.zeros((3, 2))), [3])


def test_unknown_activation():
    with pytest.raises(ConfigError):
        ad.activation(ad.Tensor([[1.0]]), "swish9")


def test_backward_twice_without_reset_fails():
    x = ad.parameter([[1.0, 2.0]])
    with ad.Tape() as tape:
        loss = ad.sum_all(x * x)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [[2.0, 4.0]])
    with pytest.raises(UsageError):
        tape.backward(loss)
    tape.reset()
    x.grad = None
    with tape:
        loss = ad.sum_all(x)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [[1.0, 1.0]])


def test_backward_requires_scalar_loss():
    x = ad.parameter([[1.0, 2.0]])
    with ad.Tape() as tape:
        y = x * 2.0
    with pytest.raises(UsageError):
        tape.backward(y)


def test_grad_accumulates_over_reuse(f64):
    x = ad.parameter([[3.0]])
    with ad.Tape() as tape:
        loss = x * x + x * 4.0
    tape.backward(loss)
    assert x.grad[0, 0] == pytest.approx(10.0)


def test_unused_leaf_gets_zero_grad():
    x = ad.parameter([[1.0]])
    y = ad.parameter([[2.0]])
    with ad.Tape() as tape:
        loss = ad.sum_all(x * 3.0) + ad.sum_all(ad.mul(y, ad.Tensor([[0.0]])))
    tape.backward(loss)
    assert y.grad[0, 0] == 0.0


def test_no_tape_records_nothing():
    x = ad.parameter([[1.0]])
    with ad.Tape() as tape:
        with ad.no_tape():
            x * 2.0
    assert len(tape) == 0


def test_norm_subgradient_at_zero():
    x = ad.parameter(np.zeros((2, 2)))
    with ad.Tape() as tape:
        loss = ad.norm_all(x)
    tape.backward(loss)
    assert np.all(x.grad == 0)


def test_division_only_by_scalar():
    with pytest.raises(UsageError):
        ad.Tensor([[1.0]]) / ad.Tensor([[2.0]])
