import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmrag import tensor as T


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# matmul


def matmul_oracle(a, b):
    """Naive triple loop, float64."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def test_matmul_identity():
    b = T.constant(rng().normal(size=(2, 3)), dtype=np.float64)
    eye = T.constant(np.eye(2), dtype=np.float64)
    assert np.array_equal(T.matmul(eye, b).data, b.data)


def test_matmul_2x2_known():
    a = T.constant([[1.0, 2.0], [3.0, 4.0]])
    b = T.constant([[5.0, 6.0], [7.0, 8.0]])
    assert np.allclose(T.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_matches_triple_loop_oracle():
    a = rng(1).normal(size=(8, 5))
    b = rng(2).normal(size=(5, 3))
    got = T.matmul(T.constant(a, dtype=np.float64), T.constant(b, dtype=np.float64)).data
    assert np.abs(got - matmul_oracle(a, b)).max() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    a = T.constant(np.zeros((2, 3)))
    b = T.constant(np.zeros((4, 5)))
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(a, b)


def test_matmul_batched_matches_per_example():
    a = rng(3).normal(size=(4, 6, 5)).astype(np.float32)
    w = rng(4).normal(size=(5, 7)).astype(np.float32)
    got = T.matmul(T.constant(a), T.constant(w)).data
    for i in range(4):
        assert np.allclose(got[i], a[i] @ w, atol=1e-6)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_slice():
    x = T.constant(np.full((1, 4), 3.7))
    assert np.allclose(T.softmax(x).data, 0.25)


def test_softmax_shift_invariance():
    x = rng(5).normal(size=(3, 7))
    a = T.softmax(T.constant(x, dtype=np.float64)).data
    b = T.softmax(T.constant(x + 11.25, dtype=np.float64)).data
    assert np.abs(a - b).max() < 1e-12


def test_softmax_matches_direct_formula():
    x = rng(6).normal(size=(3, 7))
    want = np.exp(x) / np.exp(x).sum(axis=-1, keepdims=True)  # direct exp/sum oracle
    got = T.softmax(T.constant(x, dtype=np.float64)).data
    assert np.abs(got - want).max() < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 9))
def test_softmax_rows_sum_to_one(seed, n, m):
    x = np.random.default_rng(seed).normal(scale=5.0, size=(n, m))
    s = T.softmax(T.constant(x)).data
    assert np.abs(s.sum(axis=-1) - 1.0).max() < 1e-6


# ---------------------------------------------------------------------------
# layer_norm


def test_layer_norm_constant_row_gives_bias():
    x = T.constant(np.full((2, 5), 4.2))
    gain = T.constant(rng(7).normal(size=5))
    bias = T.constant(rng(8).normal(size=5))
    out = T.layer_norm(x, gain, bias, eps=1e-6)
    assert np.allclose(out.data, np.broadcast_to(bias.data, (2, 5)), atol=1e-5)


def test_layer_norm_already_normalized_row():
    x = T.constant([[1.0, -1.0]], dtype=np.float64)
    out = T.layer_norm(x, T.constant(np.ones(2)), T.constant(np.zeros(2)), eps=0.0)
    assert np.allclose(out.data, [[1.0, -1.0]])


def test_layer_norm_statistics():
    x = rng(9).normal(size=(4, 16))
    out = T.layer_norm(
        T.constant(x, dtype=np.float64),
        T.constant(np.ones(16)),
        T.constant(np.zeros(16)),
        eps=1e-12,
    ).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-9
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-6


# ---------------------------------------------------------------------------
# cross_entropy


def cross_entropy_oracle(logits, targets, ignore_id=None):
    """Direct log-sum-exp formula, float64."""
    total, count = 0.0, 0
    for row, t in zip(np.asarray(logits, dtype=np.float64), targets):
        if ignore_id is not None and t == ignore_id:
            continue
        total += np.log(np.exp(row).sum()) - row[t]
        count += 1
    return total / count


def test_cross_entropy_confident_correct_limit():
    prev = None
    for mag in (5.0, 20.0, 80.0):
        logits = np.zeros((1, 6))
        logits[0, 2] = mag
        loss = T.cross_entropy(T.constant(logits, dtype=np.float64), [2]).item()
        if prev is not None:
            assert loss < prev
        prev = loss
    assert prev < 1e-10


def test_cross_entropy_uniform_is_log_v():
    loss = T.cross_entropy(T.constant(np.zeros((3, 8))), [0, 5, 7]).item()
    assert abs(loss - np.log(8.0)) < 1e-6


def test_cross_entropy_matches_lse_oracle():
    logits = rng(10).normal(size=(4, 10))
    targets = [1, 0, 9, 4]
    got = T.cross_entropy(T.constant(logits, dtype=np.float64), targets).item()
    assert abs(got - cross_entropy_oracle(logits, targets)) < 1e-10


def test_cross_entropy_ignore_id():
    logits = rng(11).normal(size=(5, 7))
    targets = [1, -1, 3, -1, 0]
    got = T.cross_entropy(T.constant(logits, dtype=np.float64), targets, ignore_id=-1).item()
    assert abs(got - cross_entropy_oracle(logits, targets, ignore_id=-1)) < 1e-10


def test_cross_entropy_all_ignored_errors():
    with pytest.raises(ValueError, match="ignored"):
        T.cross_entropy(T.constant(np.zeros((2, 4))), [9, 9], ignore_id=9)


def test_multi_target_cross_entropy_single_target_matches_ce():
    logits = rng(12).normal(size=(3, 5))
    t64 = T.constant(logits, dtype=np.float64)
    a = T.multi_target_cross_entropy(t64, [[2], [0], [4]]).item()
    b = T.cross_entropy(t64, [2, 0, 4]).item()
    assert abs(a - b) < 1e-12


def test_multi_target_cross_entropy_averages_positives():
    logits = rng(13).normal(size=(1, 6))
    got = T.multi_target_cross_entropy(T.constant(logits, dtype=np.float64), [[1, 4]]).item()
    lse = np.log(np.exp(logits[0]).sum())
    want = lse - (logits[0, 1] + logits[0, 4]) / 2.0
    assert abs(got - want) < 1e-12


# ---------------------------------------------------------------------------
# backward


def test_backward_sum_gives_ones():
    x = T.parameter(rng(14).normal(size=(3, 4)))
    with T.tape() as tp:
        loss = T.tsum(x)
    T.backward(loss, tp)
    assert np.array_equal(x.grad, np.ones((3, 4), dtype=np.float32))


def test_backward_dot_self_gives_2x():
    x = T.parameter(rng(15).normal(size=(5,)).astype(np.float64), dtype=np.float64)
    with T.tape() as tp:
        loss = T.tsum(T.mul(x, x))
    T.backward(loss, tp)
    assert np.allclose(x.grad, 2 * x.data, atol=1e-12)


def test_backward_requires_scalar():
    x = T.parameter(np.ones((2, 2)))
    with T.tape() as tp:
        y = T.scale(x, 2.0)
    with pytest.raises(T.ShapeError, match="scalar"):
        T.backward(y, tp)


def test_backward_accumulates_until_reset():
    x = T.parameter(np.ones(3))
    for _ in range(2):
        with T.tape() as tp:
            loss = T.tsum(x)
        T.backward(loss, tp)
    assert np.array_equal(x.grad, np.full(3, 2.0, dtype=np.float32))
    x.zero_grad()
    assert np.array_equal(x.grad, np.zeros(3, dtype=np.float32))


def numeric_grad(f, x: np.ndarray, h=1e-5):
    """Central finite differences of scalar-valued f at x, float64."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_grad(build, params, tol=1e-4):
    """Analytic grads of build() vs central differences for every param."""
    with T.tape() as tp:
        loss = build()
    T.backward(loss, tp)
    for name, p in params.items():
        num = numeric_grad(lambda: build().item(), p.data)
        ana = p.grad
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
        rel = np.abs(ana - num) / denom
        assert rel.max() < tol, f"grad mismatch for {name}: rel={rel.max():.3e}"


@pytest.mark.parametrize(
    "opname",
    ["add", "sub", "mul", "matmul", "matmul_batched", "softmax", "layer_norm", "gelu",
     "concat", "take", "take_axis1", "permute", "reshape", "expand_rows", "mean",
     "cross_entropy", "multi_target", "transpose_last", "scale"],
)
def test_gradcheck_each_op(opname):
    r = rng(hash(opname) % 2**32)
    params = {}

    def P(shape):
        t = T.parameter(r.normal(size=shape), dtype=np.float64)
        params[f"p{len(params)}"] = t
        return t

    if opname == "add":
        a, b = P((3, 4)), P((4,))
        build = lambda: T.tsum(T.mul(T.add(a, b), T.add(a, b)))
    elif opname == "sub":
        a, b = P((2, 3, 4)), P((3, 4))
        build = lambda: T.tsum(T.mul(T.sub(a, b), T.sub(a, b)))
    elif opname == "mul":
        a, b = P((3, 4)), P((4,))
        build = lambda: T.tsum(T.gelu(T.mul(a, b)))
    elif opname == "matmul":
        a, b = P((3, 5)), P((5, 2))
        build = lambda: T.tsum(T.gelu(T.matmul(a, b)))
    elif opname == "matmul_batched":
        a, b = P((2, 3, 4)), P((2, 4, 5))
        build = lambda: T.tsum(T.gelu(T.matmul(a, b)))
    elif opname == "softmax":
        a = P((3, 6))
        w = P((6,))
        build = lambda: T.tsum(T.mul(T.softmax(a), w))
    elif opname == "layer_norm":
        x, g, b = P((4, 8)), P((8,)), P((8,))
        build = lambda: T.tsum(T.gelu(T.layer_norm(x, g, b, eps=1e-6)))
    elif opname == "gelu":
        a = P((5, 3))
        build = lambda: T.tsum(T.mul(T.gelu(a), T.gelu(a)))
    elif opname == "concat":
        a, b = P((2, 3)), P((4, 3))
        build = lambda: T.tsum(T.gelu(T.concat([a, b], axis=0)))
    elif opname == "take":
        a = P((6, 4))
        idx = np.array([[0, 2], [2, 5]])
        build = lambda: T.tsum(T.gelu(T.take(a, idx, axis=0)))
    elif opname == "take_axis1":
        a = P((3, 7, 2))
        build = lambda: T.tsum(T.gelu(T.take(a, np.array(0), axis=1)))
    elif opname == "permute":
        a = P((2, 3, 4, 5))
        build = lambda: T.tsum(T.gelu(T.permute(a, (0, 2, 1, 3))))
    elif opname == "reshape":
        a = P((4, 6))
        build = lambda: T.tsum(T.gelu(T.reshape(a, (2, 2, 6))))
    elif opname == "expand_rows":
        a = P((3, 2))
        build = lambda: T.tsum(T.gelu(T.expand_rows(a, 4)))
    elif opname == "mean":
        a = P((3, 5))
        build = lambda: T.tmean(T.mul(a, a))
    elif opname == "cross_entropy":
        a = P((4, 6))
        build = lambda: T.cross_entropy(a, [0, 5, -1, 3], ignore_id=-1)
    elif opname == "multi_target":
        a = P((3, 6))
        build = lambda: T.multi_target_cross_entropy(a, [[0], [1, 4], [2, 3, 5]])
    elif opname == "transpose_last":
        a = P((2, 3, 4))
        build = lambda: T.tsum(T.gelu(T.matmul(a, T.transpose_last(a))))
    elif opname == "scale":
        a = P((3, 3))
        build = lambda: T.tsum(T.gelu(T.scale(a, -1.7)))
    check_grad(build, params)


def test_grad_flows_through_shared_tensor():
    # a tensor consumed by two downstream ops must accumulate both paths
    x = T.parameter(rng(20).normal(size=(3,)).astype(np.float64), dtype=np.float64)

    def build():
        y = T.gelu(x)
        return T.add(T.tsum(T.mul(y, y)), T.tsum(y))

    check_grad(build, {"x": x})


# ---------------------------------------------------------------------------
# misc invariants


def test_suffix_broadcast_rejected_when_not_suffix():
    a = T.constant(np.zeros((2, 3)))
    b = T.constant(np.zeros((2,)))
    with pytest.raises(T.ShapeError):
        T.add(a, b)


def test_no_grad_blocks_recording():
    x = T.parameter(np.ones(3))
    with T.tape() as tp:
        with T.no_grad():
            y = T.scale(x, 2.0)
        assert not y.requires_grad
    assert tp.nodes == []


def test_finite_check_raises_when_enabled():
    T.set_debug_checks(True)
    try:
        big = T.constant(np.array([1e38], dtype=np.float32))
        with pytest.raises(T.NumericError):
            T.mul(big, big)
    finally:
        T.set_debug_checks(False)


def test_determinism_same_ops_bit_identical():
    def run():
        r = np.random.default_rng(42)
        x = T.parameter(r.normal(size=(6, 6)).astype(np.float32))
        with T.tape() as tp:
            y = T.matmul(T.gelu(x), x)
            loss = T.tmean(T.mul(y, y))
        T.backward(loss, tp)
        return loss.item(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert np.array_equal(g1, g2)
