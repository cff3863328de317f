import math

import numpy as np
import pytest

from chembridge.bridge import (
    TrainConfig, bridge_loss, encode, grad_check, init_params, load_checkpoint,
    loss_and_grads, margin_penalty, negative_weights, project, save_checkpoint, train,
)
from chembridge.errors import DataError, NumericError


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def plain_infonce(B_T, B_M, T):
    """Symmetric InfoNCE written out term by term."""
    n = B_T.shape[0]
    S = B_T @ B_M.T / T
    total = 0.0
    for M in (S, S.T):
        for i in range(n):
            m = max(M[i])
            total += -M[i, i] + m + math.log(sum(math.exp(v - m) for v in M[i]))
    return total / (2 * n)


def cfg(**kw):
    base = dict(hard_negative_beta=1.0, margin_weight=0.0)
    base.update(kw)
    return TrainConfig(**base)


def test_single_pair_zero_loss():
    B = np.array([[1.0, 0.0]])
    loss, gT, gM = bridge_loss(B, B, np.ones((1, 1)), cfg(temperature=1.0), ["a"])
    assert loss == pytest.approx(0.0, abs=1e-15)


def test_two_orthonormal_pairs_closed_form():
    B = np.eye(2)
    loss, _, _ = bridge_loss(B, B, np.ones((2, 2)), cfg(temperature=1.0), ["a", "b"])
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.313262, abs=1e-6)


def test_reduces_to_plain_infonce():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 12))
        B_T, B_M = unit_rows(rng, n, 6), unit_rows(rng, n, 6)
        targets = list(rng.choice(["a", "b", "c"], size=n))
        w = negative_weights(targets, 1.0)
        loss, _, _ = bridge_loss(B_T, B_M, w, cfg(temperature=0.07), targets)
        assert loss == pytest.approx(plain_infonce(B_T, B_M, 0.07), abs=1e-12)


def test_loss_increases_with_beta():
    rng = np.random.default_rng(1)
    B_T, B_M = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
    targets = ["a", "a", "b", "c", "d", "e"]
    losses = []
    for beta in (1.0, 2.0, 5.0, 20.0, 100.0):
        w = negative_weights(targets, beta)
        losses.append(bridge_loss(B_T, B_M, w, cfg(hard_negative_beta=beta), targets)[0])
    assert all(a < b for a, b in zip(losses, losses[1:]))


def test_large_beta_dominated_by_hard_negative():
    rng = np.random.default_rng(2)
    B_T, B_M = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    targets = ["a", "a", "b", "c"]
    T = 0.5
    beta = 1e8
    S = B_T @ B_M.T / T
    # with the same-target term dominating, row 0 loss -> log(beta) + S01 - S00
    approx = ((math.log(beta) + S[0, 1] - S[0, 0]) + (math.log(beta) + S[1, 0] - S[1, 1])
                    + (math.log(beta) + S[1, 0] - S[0, 0]) + (math.log(beta) + S[0, 1] - S[1, 1]))
    rest = sum(plain_row(S, i) + plain_row(S.T, i) for i in (2, 3))
    expected = (approx + rest) / (2 * 4)
    w = negative_weights(targets, beta)
    loss = bridge_loss(B_T, B_M, w, cfg(temperature=T, hard_negative_beta=beta), targets)[0]
    assert loss == pytest.approx(expected, rel=1e-6)


def plain_row(M, i):
    m = M[i].max()
    return -M[i, i] + m + math.log(np.exp(M[i] - m).sum())


def test_loss_symmetry_under_swap():
    # the hinge compares S_ii with row entries only, so symmetry is a
    # property of the contrastive part
    rng = np.random.default_rng(3)
    B_T, B_M = unit_rows(rng, 7, 5), unit_rows(rng, 7, 5)
    targets = ["a", "a", "a", "b", "b", "c", "d"]
    c = cfg(hard_negative_beta=2.0, margin_weight=0.0)
    w = negative_weights(targets, 2.0)
    a = bridge_loss(B_T, B_M, w, c, targets)[0]
    b = bridge_loss(B_M, B_T, w.T, c, targets)[0]
    assert a == pytest.approx(b, abs=1e-12)


def test_negative_weights():
    assert np.array_equal(negative_weights(["a", "b", "c"], 2.0), np.ones((3, 3)))
    w = negative_weights(["a", "b", "a"], 3.0)
    assert w[0, 2] == w[2, 0] == 3.0 and np.all(np.diag(w) == 1.0) and w[0, 1] == 1.0
    assert np.array_equal(negative_weights(["a", "a"], 1.0), np.ones((2, 2)))


def test_margin_penalty_cases():
    S = np.array([[0.5, 0.45], [0.1, 0.9]])
    assert margin_penalty(S, ["a", "b"], 0.15)[0] == 0.0
    val, grad = margin_penalty(np.array([[0.5, 0.45], [0.0, 0.9]]), ["a", "a"], 0.15)
    # pair (0,1): 0.15 - 0.05 = 0.10 active; pair (1,0): 0.15 - 0.9 < 0
    assert val == pytest.approx(0.10 / 2)
    assert grad.tolist() == [[-0.5, 0.5], [0.0, 0.0]]
    S = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert margin_penalty(S, ["a", "a"], 0.15)[0] == 0.0


def test_margin_symmetric_pair_value():
    S = np.array([[0.5, 0.45], [0.45, 0.5]])
    assert margin_penalty(S, ["t", "t"], 0.15)[0] == pytest.approx(0.10)


def test_margin_single_pair_value():
    S = np.array([[0.5, 0.45, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    # only (0,1) and (1,0) share a target; (1,0) is inactive
    val, _ = margin_penalty(S, ["t", "t", "u"], 0.15)
    assert val * 2 == pytest.approx(0.10)


def test_margin_kink_subgradient_zero():
    S = np.array([[0.5, 0.35], [0.0, 1.0]])
    _, grad = margin_penalty(S, ["a", "a"], 0.15)
    assert np.all(grad == 0.0)


def test_init_params():
    a, b = init_params(8, 16, 32, 5), init_params(8, 16, 32, 5)
    assert np.array_equal(a.W_T, b.W_T) and np.array_equal(a.W_M, b.W_M)
    assert not np.array_equal(a.W_T, init_params(8, 16, 32, 6).W_T)
    p = init_params(256, 64, 2048, 0)
    bound = math.sqrt(6 / 2304)
    assert bound == pytest.approx(0.0510, abs=1e-4)
    assert np.abs(p.W_M).max() <= bound and np.abs(p.W_M).max() > 0.99 * bound
    assert p.W_T.dtype == np.float32 and p.W_T.shape == (256, 64)


def test_project():
    rng = np.random.default_rng(0)
    X = unit_rows(rng, 4, 5)
    assert np.allclose(project(np.eye(5), X), X)
    W = rng.normal(size=(3, 5))
    out = project(W, X)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)
    X2 = X.copy()
    X2[1] *= 5
    assert np.allclose(project(W, X2)[1], out[1])
    with pytest.raises(NumericError):
        project(W, np.zeros((1, 5)))


def test_input_scale_invariance():
    rng = np.random.default_rng(4)
    p = init_params(6, 5, 7, 1).astype(np.float64)
    X, Z = rng.random((5, 7)), rng.normal(size=(5, 5))
    t = ["a", "a", "b", "c", "c"]
    c = TrainConfig()
    base = loss_and_grads(p, X, Z, t, c)[0]
    X[2] *= 3.0
    Z[0] *= 0.2
    assert loss_and_grads(p, X, Z, t, c)[0] == pytest.approx(base, abs=1e-12)


@pytest.mark.parametrize("beta, lam", [(1.0, 0.0), (2.0, 0.0), (2.0, 1.0), (3.0, 0.5)])
def test_grad_check(beta, lam):
    rng = np.random.default_rng(7)
    X, Z = rng.random((8, 48)), rng.normal(size=(8, 32))
    targets = ["a", "a", "a", "b", "b", "c", "d", "d"]
    params = init_params(16, 32, 48, 3)
    c = TrainConfig(hard_negative_beta=beta, margin_weight=lam, margin=0.15)
    assert grad_check(params, (X, Z, targets), c, eps=1e-5) < 1e-6


def test_embedding_gradients_by_finite_differences():
    rng = np.random.default_rng(8)
    B_T, B_M = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
    targets = ["a", "a", "b", "b", "b"]
    c = cfg(hard_negative_beta=2.0, margin_weight=0.0)
    w = negative_weights(targets, 2.0)
    _, gT, gM = bridge_loss(B_T, B_M, w, c, targets)
    eps = 1e-6
    for M, G, first in ((B_T, gT, True), (B_M, gM, False)):
        for i in range(5):
            for j in range(4):
                orig = M[i, j]
                M[i, j] = orig + eps
                up = bridge_loss(B_T, B_M, w, c, targets)[0]
                M[i, j] = orig - eps
                down = bridge_loss(B_T, B_M, w, c, targets)[0]
                M[i, j] = orig
                assert G[i, j] == pytest.approx((up - down) / (2 * eps), abs=1e-7)


def _synthetic(n=64, D_mol=32, D_text=16, seed=0):
    rng = np.random.default_rng(seed)
    X = (rng.random((n, D_mol)) < 0.2).astype(np.float32)
    X[X.sum(axis=1) == 0, 0] = 1
    A = rng.normal(size=(D_text, D_mol))
    Z = (X @ A.T + rng.normal(scale=0.05, size=(n, D_text))).astype(np.float32)
    return X, Z, [f"t{i % 16}" for i in range(n)]


def test_train_zero_epochs_returns_init():
    X, Z, t = _synthetic()
    c = TrainConfig(epochs=0, dim=8, seed=3)
    params, hist = train(X, Z, t, c)
    init = init_params(8, Z.shape[1], X.shape[1], 3)
    assert np.array_equal(params.W_T, init.W_T) and np.array_equal(params.W_M, init.W_M)
    assert len(hist) == 0


def test_train_deterministic_and_decreasing():
    X, Z, t = _synthetic()
    c = TrainConfig(epochs=15, dim=8, batch_size=20, seed=1)
    p1, h1 = train(X, Z, t, c)
    p2, h2 = train(X, Z, t, c)
    assert np.array_equal(p1.W_T, p2.W_T) and np.array_equal(p1.W_M, p2.W_M)
    assert h1.loss == h2.loss
    assert len(h1.loss) == len(h1.infonce) == len(h1.margin) == 15
    assert h1.loss[-1] < h1.loss[0]
    assert p1.W_T.dtype == np.float32


def test_partial_batch_of_one_skipped():
    X, Z, t = _synthetic(n=21)
    # 21 = 2 * 10 + 1: the trailing singleton batch must not break training
    _, hist = train(X, Z, t, TrainConfig(epochs=2, dim=4, batch_size=10))
    assert all(np.isfinite(hist.loss))


def test_train_needs_two_pairs():
    X, Z, t = _synthetic(n=1)
    with pytest.raises(DataError):
        train(X, Z, t, TrainConfig(epochs=1, dim=4))


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(4, 6, 8, 2)
    c = TrainConfig(epochs=3, temperature=0.05, seed=2)
    path = tmp_path / "b.brg1"
    save_checkpoint(p, c, path)
    raw = path.read_bytes()
    assert raw[:4] == b"BRG1"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [4, 6, 8]
    q, c2 = load_checkpoint(path)
    assert np.array_equal(p.W_T, q.W_T) and np.array_equal(p.W_M, q.W_M)
    assert c2 == c


def test_encode_shapes():
    X, Z, _ = _synthetic(n=10)
    p = init_params(8, Z.shape[1], X.shape[1], 0)
    B_T, B_M = encode(p, X, Z)
    assert B_T.shape == B_M.shape == (10, 8)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(temperature=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(hard_negative_beta=0.5).validate()
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1).validate()
