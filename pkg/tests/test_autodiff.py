import numpy as np
import pytest

from cxrc import autodiff as ad
from cxrc.autodiff import (
    DegenerateInputError,
    GradGraph,
    ShapeError,
    Tensor,
    grad_check,
)


def t(data, rg=False, dtype=np.float64):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=rg)


def rand(rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


# ---------------------------------------------------------------------------
# forward definitions
# ---------------------------------------------------------------------------

def test_relu_definition():
    out = ad.relu(t([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rand(rng, (3, 5))
    out = ad.matmul(t(np.eye(3)), t(a))
    np.testing.assert_array_equal(out.data, a)


def test_conv2d_valid_ones():
    x = t(np.ones((1, 1, 3, 3)))
    w = t(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, w, stride=1, padding="valid")
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == pytest.approx(9.0)


def test_conv2d_same_shape():
    x = t(np.ones((2, 3, 8, 8)))
    w = t(np.ones((4, 3, 3, 3)))
    assert ad.conv2d(x, w, stride=1, padding="same").shape == (2, 4, 8, 8)
    assert ad.conv2d(x, w, stride=2, padding="same").shape == (2, 4, 4, 4)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rand(rng, (2, 2, 6, 6))
    w = rand(rng, (3, 2, 3, 3))
    out = ad.conv2d(t(x), t(w), stride=1, padding="valid").data
    # independent direct evaluation
    expect = np.zeros((2, 3, 4, 4))
    for b in range(2):
        for f in range(3):
            for i in range(4):
                for j in range(4):
                    expect[b, f, i, j] = (x[b, :, i:i + 3, j:j + 3] * w[f]).sum()
    np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = t(rand(rng, (5, 7), -3, 3))
    s = ad.softmax(x).data
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(5), atol=1e-9)
    np.testing.assert_allclose(ad.log_softmax(x).data, np.log(s), atol=1e-9)


def test_matmul_associativity():
    rng = np.random.default_rng(2)
    a, b, c = (t(rand(rng, (4, 4))) for _ in range(3))
    left = ad.matmul(ad.matmul(a, b), c).data
    right = ad.matmul(a, ad.matmul(b, c)).data
    np.testing.assert_allclose(left, right, atol=1e-9)


def test_l2_normalize_unit_rows():
    assert np.allclose(ad.l2_normalize(t([[1.0, 0.0, 0.0]])).data, [[1, 0, 0]])
    np.testing.assert_allclose(
        ad.l2_normalize(t([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-12)


def test_l2_normalize_random_rows_norm_one():
    rng = np.random.default_rng(7)
    x = t(rand(rng, (100, 9), -2, 2))
    out = ad.l2_normalize(x).data
    # direct norm recomputation oracle
    norms = np.sqrt((out ** 2).sum(axis=1))
    assert np.abs(norms - 1.0).max() < 1e-9


def test_l2_normalize_degenerate_row():
    with pytest.raises(DegenerateInputError):
        ad.l2_normalize(t([[0.0, 0.0], [1.0, 0.0]]))


def test_similarity_matrix():
    a = t([[1.0, 0.0], [0.0, 2.0]])
    b = t([[1.0, 1.0], [0.0, 1.0], [3.0, 0.0]])
    np.testing.assert_array_equal(
        ad.similarity_matrix(a, b).data, [[1, 0, 3], [2, 2, 0]])


def test_determinism_bit_identical():
    rng = np.random.default_rng(11)
    x = rand(rng, (4, 1, 8, 8))
    w = rand(rng, (3, 1, 3, 3))

    def run():
        out = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding="same")
        return ad.softmax(ad.reshape(ad.relu(out), (4, 48))).data
    r1, r2 = run(), run()
    assert np.array_equal(r1, r2)


# ---------------------------------------------------------------------------
# shape / input errors
# ---------------------------------------------------------------------------

def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.add(t(np.zeros((2, 3))), t(np.zeros((3, 2))))
    assert exc.value.op == "add"
    assert exc.value.shapes == ((2, 3), (3, 2))
    with pytest.raises(ShapeError):
        ad.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        ad.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))))


def test_cross_entropy_target_out_of_range():
    with pytest.raises(ValueError):
        ad.cross_entropy_with_logits(t(np.zeros((2, 3))), np.array([0, 3]))


def test_backward_rejects_non_scalar():
    x = t(np.ones(3), rg=True)
    y = ad.relu(x)
    with pytest.raises(ShapeError):
        y.backward()


# ---------------------------------------------------------------------------
# backward basics
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = t([1.0, 2.0, 3.0], rg=True)
    ad.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_unused_leaf_zero_grad():
    x = t([1.0, 2.0], rg=True)
    y = t([3.0, 4.0], rg=True)
    ad.sum_all(ad.mul(y, y)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_shared_input_accumulates():
    x = t([2.0], rg=True)
    ad.sum_all(ad.add(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0])


def test_grad_graph_visits_each_node_once():
    x = t(np.ones((2, 2)), rg=True)
    y = ad.add(x, x)
    z = ad.mul(y, y)
    out = ad.sum_all(z)
    graph = GradGraph.from_output(out)
    ids = [id(n) for n in graph.nodes]
    assert len(ids) == len(set(ids))
    assert ids[-1] == id(out)
    # parents always precede children
    pos = {i: k for k, i in enumerate(ids)}
    for node in graph.nodes:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_cross_entropy_grad_finite_difference():
    rng = np.random.default_rng(5)
    logits = rand(rng, (4, 6), -2, 2)
    targets = rng.integers(0, 6, size=4)
    err = grad_check(
        lambda z: ad.cross_entropy_with_logits(z, targets), Tensor(logits))
    assert err < 1e-4


def test_grad_check_linear_exact():
    x = t(np.arange(1.0, 5.0), rg=True)
    err = grad_check(lambda z: ad.sum_all(ad.scale(z, 2.0)), x)
    assert err < 1e-10


# ---------------------------------------------------------------------------
# finite-difference oracle across the op suite
# ---------------------------------------------------------------------------

def _op_cases(rng):
    """(name, fn, point) triples; fn maps a flat point to a scalar Tensor.

    All constants are drawn up front so each fn is a fixed function of its
    point (grad_check re-evaluates fn many times).
    """
    a = rand(rng, (3, 4), -1, 1)
    b = Tensor(rand(rng, (3, 4), -1, 1))
    m = Tensor(rand(rng, (4, 5)))
    bias4 = Tensor(rand(rng, (4,)))
    bmm_rhs = Tensor(rand(rng, (2, 4, 3)))
    bmm_pt = rand(rng, (2, 3, 4))
    sim_w = Tensor(rand(rng, (3, 3)))
    conv_w = Tensor(rand(rng, (2, 2, 3, 3)))
    conv_b = Tensor(rand(rng, (2,)))
    conv_x = rand(rng, (2, 2, 6, 6))
    convt_w = Tensor(rand(rng, (2, 3, 3, 3)))
    convt_b = Tensor(rand(rng, (3,)))
    convt_x = rand(rng, (1, 2, 4, 4))
    pool_w = Tensor(rand(rng, (2, 3)))
    pool_x = rand(rng, (2, 3, 4, 4))
    w43 = Tensor(rand(rng, (4, 3)))
    w43b = Tensor(rand(rng, (4, 3)))
    w38 = Tensor(rand(rng, (3, 8)))
    w32 = Tensor(rand(rng, (3, 2)))
    ln_gain = Tensor(rand(rng, (4,), 0.5, 1.5))
    ln_bias = Tensor(rand(rng, (4,)))
    emb_w = Tensor(rand(rng, (2, 2, 4)))
    emb_ids = np.array([[0, 2], [1, 1]])
    bce_t = (b.data > 0).astype(np.float64)

    return [
        ("add", lambda z: ad.sum_all(ad.mul(ad.add(z, b), b)), a),
        ("sub", lambda z: ad.sum_all(ad.mul(ad.sub(z, b), b)), a),
        ("mul", lambda z: ad.sum_all(ad.mul(z, b)), a),
        ("neg", lambda z: ad.sum_all(ad.mul(ad.neg(z), b)), a),
        ("scale", lambda z: ad.sum_all(ad.scale(z, -1.7)), a),
        ("add_bias", lambda z: ad.sum_all(ad.mul(ad.add_bias(z, bias4), b)), a),
        ("matmul", lambda z: ad.sum_all(ad.matmul(z, m)), a),
        ("bmm", lambda z: ad.sum_all(ad.bmm(z, bmm_rhs)), bmm_pt),
        ("similarity_matrix", lambda z: ad.sum_all(
            ad.mul(ad.similarity_matrix(z, b), sim_w)), a),
        ("conv2d_same", lambda z: ad.sum_all(ad.conv2d(
            z, conv_w, conv_b, stride=2, padding="same")), conv_x),
        ("conv2d_valid", lambda z: ad.sum_all(ad.conv2d(
            Tensor(conv_x), z, stride=1, padding="valid")),
         conv_w.data.copy()),
        ("conv2d_transpose", lambda z: ad.sum_all(ad.conv2d_transpose(
            z, convt_w, convt_b, stride=2)), convt_x),
        ("relu", lambda z: ad.sum_all(ad.mul(ad.relu(z), b)),
         a + np.sign(a) * 0.05),  # keep away from the kink
        ("sigmoid", lambda z: ad.sum_all(ad.mul(ad.sigmoid(z), b)), a),
        ("tanh", lambda z: ad.sum_all(ad.mul(ad.tanh(z), b)), a),
        ("mean_pool", lambda z: ad.sum_all(
            ad.mul(ad.mean_pool(z), pool_w)), pool_x),
        ("mean_all", lambda z: ad.mean_all(ad.mul(z, z)), a),
        ("reshape", lambda z: ad.sum_all(
            ad.mul(ad.reshape(z, (4, 3)), w43)), a),
        ("transpose", lambda z: ad.sum_all(
            ad.mul(ad.transpose(z, (1, 0)), w43b)), a),
        ("concat", lambda z: ad.sum_all(ad.mul(
            ad.concat([z, b], axis=1), w38)), a),
        ("slice_last", lambda z: ad.sum_all(
            ad.mul(ad.slice_last(z, 1, 3), w32)), a),
        ("softmax", lambda z: ad.sum_all(ad.mul(ad.softmax(z), b)), a),
        ("log_softmax", lambda z: ad.sum_all(ad.mul(ad.log_softmax(z), b)), a),
        ("cross_entropy", lambda z: ad.cross_entropy_with_logits(
            z, np.array([1, 3, 0]), np.array([1.0, 0.0, 1.0])), a),
        ("bce", lambda z: ad.bce_with_logits(z, bce_t), a),
        ("l2_normalize", lambda z: ad.sum_all(
            ad.mul(ad.l2_normalize(z), b)), a + np.sign(a) * 0.2),
        ("layer_norm", lambda z: ad.sum_all(
            ad.mul(ad.layer_norm(z, ln_gain, ln_bias), b)), a),
        ("embedding", lambda z: ad.sum_all(
            ad.mul(ad.embedding(z, emb_ids), emb_w)), a),
    ]


@pytest.mark.parametrize("seed", range(20))
def test_all_ops_match_finite_differences(seed):
    rng = np.random.default_rng(1000 + seed)
    for name, fn, point in _op_cases(rng):
        err = grad_check(fn, Tensor(point))
        assert err < 1e-4, f"{name}: rel err {err:.3e}"


def test_layer_norm_param_grads():
    rng = np.random.default_rng(42)
    x = Tensor(rand(rng, (3, 5)))
    b = rand(rng, (3, 5))

    def fn_gain(g):
        return ad.sum_all(ad.mul(
            ad.layer_norm(x, g, Tensor(np.zeros(5))), Tensor(b)))

    def fn_bias(bb):
        return ad.sum_all(ad.mul(
            ad.layer_norm(x, Tensor(np.ones(5)), bb), Tensor(b)))
    assert grad_check(fn_gain, Tensor(rand(rng, (5,), 0.5, 1.5))) < 1e-6
    assert grad_check(fn_bias, Tensor(rand(rng, (5,)))) < 1e-6


def test_conv_bias_grad():
    rng = np.random.default_rng(9)
    x = Tensor(rand(rng, (2, 1, 4, 4)))
    w = Tensor(rand(rng, (3, 1, 3, 3)))

    def fn(bias):
        return ad.sum_all(ad.mul(
            ad.conv2d(x, w, bias, stride=1, padding="same"),
            Tensor(rand(np.random.default_rng(4), (2, 3, 4, 4)))))
    assert grad_check(fn, Tensor(rand(rng, (3,)))) < 1e-6
