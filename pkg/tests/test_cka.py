import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from forgetprobe.cka import DriftTracker, cka, eval_subset, similarity
from forgetprobe.errors import DegenerateInputError, DimensionError, ProtocolError


def hsic_oracle(x, y):
    """Gram-matrix form: HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L)) with H = I - 11'/n."""
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    k, l = x @ x.T, y @ y.T

    def hsic(a, b):
        return np.trace(a @ h @ b @ h)

    return hsic(k, l) / np.sqrt(hsic(k, k) * hsic(l, l))


def random_orthogonal(m, rng):
    q, r = np.linalg.qr(rng.normal(size=(m, m)))
    return q * np.sign(np.diag(r))


matrices = st.integers(0, 2 ** 32 - 1).map(np.random.default_rng)


def test_identity():
    x = np.random.default_rng(0).normal(size=(20, 5))
    assert cka(x, x) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(rng=matrices, n=st.integers(3, 30), m=st.integers(1, 12))
def test_orthogonal_invariance(rng, n, m):
    x = rng.normal(size=(n, m))
    y = rng.normal(size=(n, m))
    q = random_orthogonal(m, rng)
    assert abs(cka(x, x @ q) - 1.0) < 1e-5
    assert abs(cka(x, y @ q) - cka(x, y)) < 1e-5


@settings(max_examples=60, deadline=None)
@given(rng=matrices, c=st.floats(-1e3, 1e3).filter(lambda c: abs(c) > 1e-3))
def test_scaling_invariance(rng, c):
    x, y = rng.normal(size=(10, 4)), rng.normal(size=(10, 6))
    assert abs(cka(x, c * x) - 1.0) < 1e-5
    assert abs(cka(c * x, y) - cka(x, y)) < 1e-5


@settings(max_examples=100, deadline=None)
@given(rng=matrices, n=st.integers(2, 25), mx=st.integers(1, 40), my=st.integers(1, 40))
def test_symmetry_bounds_and_oracle(rng, n, mx, my):
    x, y = rng.normal(size=(n, mx)), rng.normal(size=(n, my))
    v = cka(x, y)
    assert abs(v - cka(y, x)) < 1e-6
    assert 0.0 <= v <= 1 + 1e-6
    assert abs(v - hsic_oracle(x, y)) < 1e-6


def test_oracle_six_by_three_vs_four():
    rng = np.random.default_rng(42)
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 4))
    assert cka(x, y) == pytest.approx(hsic_oracle(x, y), abs=1e-6)


def test_both_gram_paths_agree():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 10))
    wide = rng.normal(size=(50, 80))
    # n < m uses the n x n Gram side, n >= m the feature side
    assert cka(x, wide) == pytest.approx(hsic_oracle(x, wide), abs=1e-9)
    near = x[:, ::-1] + 0.1 * rng.normal(size=x.shape)
    assert cka(x, near) == pytest.approx(hsic_oracle(x, near), abs=1e-9)


def test_column_centering_matters():
    # a constant offset is removed by centering
    x = np.random.default_rng(1).normal(size=(15, 3))
    assert cka(x, x + 100.0) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (8, 4), elements=st.floats(-10, 10, width=32)))
def test_float32_inputs_bounded(x):
    rng = np.random.default_rng(0)
    y = rng.normal(size=(8, 3)).astype(np.float32)
    try:
        v = cka(x, y)
    except DegenerateInputError:
        return
    assert 0 <= v <= 1 + 1e-6


def test_errors():
    with pytest.raises(DimensionError):
        cka(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(DimensionError):
        cka(np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(DegenerateInputError):
        cka(np.ones((5, 2)), np.random.default_rng(0).normal(size=(5, 2)))
    assert similarity(np.random.default_rng(0).normal(size=(5, 2)), np.ones((5, 2))) == 0.0


def test_drift_tracker_protocol():
    rng = np.random.default_rng(0)
    ref1 = rng.normal(size=(30, 6))
    t = DriftTracker(3)
    assert t.on_task_end(1, 2, ref1) == pytest.approx(1.0, abs=1e-6)
    # snapshot unchanged: constant curve at 1
    out = t.on_epoch_end(2, 3, {1: ref1.copy()})
    assert out == [(1, pytest.approx(1.0, abs=1e-9))]
    moved = ref1 + rng.normal(size=ref1.shape)
    (_, v), = t.on_epoch_end(2, 4, {1: moved})
    assert v < 1
    assert [p[0] for p in t.curves[1].points] == [2, 3, 4]
    with pytest.raises(ProtocolError):
        t.on_epoch_end(2, 5, {})
    with pytest.raises(ProtocolError):
        t.on_task_end(3, 5, ref1)
    with pytest.raises(ProtocolError):
        t.on_task_end(1, 5, ref1)
    with pytest.raises(ProtocolError):
        t.reference(2)


def test_reference_is_a_copy():
    ref = np.random.default_rng(0).normal(size=(10, 3))
    t = DriftTracker(2)
    t.on_task_end(1, 1, ref)
    ref *= 0
    assert t.reference(1).any()


def test_eval_subset():
    np.testing.assert_array_equal(eval_subset(5, 0), np.arange(5))
    a = eval_subset(5000, 1)
    assert len(a) == 2000 and len(set(a)) == 2000 and (np.diff(a) > 0).all()
    np.testing.assert_array_equal(a, eval_subset(5000, 1))
