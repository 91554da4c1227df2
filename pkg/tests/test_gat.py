import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import fd_grad, random_graph, rel_err
from raincast.gat import EdgeIndex, GatError, GatWeights, gat_backward, gat_forward, multi_head_config


def _setup(seed, K, n=None, F=None, T=None, bank=1, activation="sigmoid"):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 9))
    F = F or int(rng.integers(1, 4))
    edges = random_graph(rng, n, p=0.4)
    w = multi_head_config(K, 3, F, edge_dim=2, bank=bank, rng=seed, activation=activation)
    X = rng.normal(size=(n, F) if T is None else (T, n, F))
    return rng, edges, w, X


def _check_grads(edges, w, X, rng, tol=1e-4):
    out, _, cache = gat_forward(X, edges, w)
    R = rng.normal(size=out.shape)
    grads, dX = gat_backward(R, cache, edges, w)

    def loss():
        return float(np.sum(gat_forward(X, edges, w)[0] * R))

    worst = 0.0
    for name, arr in w.params().items():
        worst = max(worst, rel_err(fd_grad(loss, arr), grads[name]).max())
    worst = max(worst, rel_err(fd_grad(loss, X), dX).max())
    assert worst <= tol
    return worst


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("K", [1, 4])
def test_gradients_match_finite_differences(seed, K):
    rng, edges, w, X = _setup(seed, K)
    _check_grads(edges, w, X, rng)


@pytest.mark.parametrize("activation", ["identity", "elu"])
def test_gradients_other_activations(activation):
    rng, edges, w, X = _setup(11, 2, n=5, F=3, T=2, bank=2, activation=activation)
    _check_grads(edges, w, X, rng)


def test_gradient_with_all_equal_logits():
    rng, edges, w, X = _setup(3, 2, n=5, F=2)
    # node terms off and one shared edge feature: every logit equals the same
    # positive constant, away from the LeakyReLU kink at zero
    D = w.out_dim
    edges = EdgeIndex(edges.src, edges.dst, np.ones_like(edges.feat), edges.n_nodes)
    w.a[..., :2 * D] = 0.0
    w.a[..., 2 * D:] = np.sign(w.W_edge) * 0.5
    _, alpha, _ = gat_forward(X, edges, w)
    _check_grads(edges, w, X, rng)
    for j in np.unique(edges.dst):
        sel = edges.dst == j
        np.testing.assert_allclose(alpha[0, :, sel], 1.0 / sel.sum(), atol=1e-15)


def test_zero_upstream_gives_zero_grads():
    _, edges, w, X = _setup(4, 4)
    out, _, cache = gat_forward(X, edges, w)
    grads, dX = gat_backward(np.zeros_like(out), cache, edges, w)
    assert all(not g.any() for g in grads.values()) and not dX.any()


def test_stale_cache_rejected():
    _, edges, w, X = _setup(5, 1)
    out, _, cache = gat_forward(X, edges, w)
    other = multi_head_config(1, 3, X.shape[1], edge_dim=2, rng=9)
    with pytest.raises(GatError):
        gat_backward(out, cache, edges, other)
    with pytest.raises(GatError):
        gat_backward(out, None, edges, w)


def test_single_isolated_node_self_term():
    w = multi_head_config(3, 4, 2, edge_dim=2, rng=0)
    X = np.array([[0.3, -1.2]])
    out, alpha, _ = gat_forward(X, EdgeIndex(np.array([], int), np.array([], int), np.array([]), 1), w)
    self_term = np.einsum("kdf,f->kd", w.W_node[0], X[0]).mean(axis=0)
    np.testing.assert_allclose(out[0, 0], 1 / (1 + np.exp(-self_term)), rtol=1e-14)
    assert alpha.shape[-1] == 0


def test_singleton_neighbourhood_alpha_is_one(rng):
    w = multi_head_config(4, 3, 2, edge_dim=2, rng=1)
    e = EdgeIndex(np.array([1]), np.array([0]), np.array([2.5]), 2)
    _, alpha, _ = gat_forward(rng.normal(size=(2, 2)), e, w)
    np.testing.assert_array_equal(alpha, 1.0)


def test_symmetric_neighbours_split_evenly(rng):
    w = multi_head_config(2, 3, 2, edge_dim=2, rng=1)
    X = rng.normal(size=(3, 2))
    X[2] = X[1]
    e = EdgeIndex(np.array([1, 2]), np.array([0, 0]), np.array([0.7, 0.7]), 3)
    _, alpha, _ = gat_forward(X, e, w)
    np.testing.assert_allclose(alpha, 0.5, atol=1e-15)


def test_duplicated_heads_equal_single_head(rng):
    one = multi_head_config(1, 3, 2, edge_dim=2, rng=3)
    dup = GatWeights(np.repeat(one.W_node, 4, axis=1), np.repeat(one.W_edge, 4, axis=1),
                     np.repeat(one.a, 4, axis=1))
    edges = random_graph(rng, 6, 0.5)
    X = rng.normal(size=(6, 2))
    np.testing.assert_allclose(gat_forward(X, edges, dup)[0], gat_forward(X, edges, one)[0], rtol=1e-13)


@given(st.integers(0, 10_000))
def test_attention_rows_sum_to_one(seed):
    rng, edges, w, X = _setup(seed, 4, T=2)
    _, alpha, _ = gat_forward(X * 10, edges, w)
    sums = np.zeros(alpha.shape[:-1] + (edges.n_nodes,))
    np.add.at(sums, (..., edges.dst), alpha)
    has = ~edges.isolated
    np.testing.assert_allclose(sums[..., has], 1.0, atol=1e-12)
    assert (alpha >= 0).all()


@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng, edges, w, X = _setup(seed, 2)
    perm = rng.permutation(edges.n_nodes)
    inv = np.argsort(perm)  # new label of old node i is inv[i]
    e2 = EdgeIndex(inv[edges.src], inv[edges.dst], edges.feat, edges.n_nodes)
    out1 = gat_forward(X, edges, w)[0]
    out2 = gat_forward(X[perm], e2, w)[0]
    np.testing.assert_allclose(out2, out1[:, perm], rtol=1e-12, atol=1e-14)


def test_shape_and_config_errors():
    with pytest.raises(GatError):
        multi_head_config(0, 3, 2)
    w = multi_head_config(1, 3, 2)
    e = EdgeIndex(np.array([0]), np.array([1]), np.array([1.0]), 2)
    with pytest.raises(GatError):
        gat_forward(np.zeros((3, 2)), e, w)
    with pytest.raises(GatError):
        gat_forward(np.array([[np.nan, 0], [0, 0]]), e, w)
    with pytest.raises(GatError):
        EdgeIndex(np.array([0]), np.array([5]), np.array([1.0]), 2)
    with pytest.raises(GatError):
        GatWeights(w.W_node, w.W_edge, w.a[..., :-1])


def test_large_head_setting_shapes():
    w = multi_head_config(8, 64, 3, edge_dim=4, bank=4)
    assert (w.heads, w.out_dim, w.in_dim) == (8, 64, 3)
    assert w.a.shape == (4, 8, 2 * 64 + 4)
    lim = 1 / np.sqrt(3)
    assert np.abs(w.W_node).max() <= lim
