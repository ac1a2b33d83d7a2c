import math
import threading

import numpy as np
import pytest

from posdistill.distill import ce_loss, feature_distill_loss
from posdistill.model import cross_layer, din_pool
from posdistill.nn import (
    AdamState,
    ContractError,
    ParamStore,
    Tensor,
    adam_step,
    dense,
    embedding,
    grad_check,
    load_checkpoint,
    mul,
    read_checkpoint,
    save_checkpoint,
    sigmoid,
    sum_,
)


def _store(**values):
    store = ParamStore()
    for k, v in values.items():
        store.add(k, np.asarray(v, dtype=np.float64))
    return store


def numeric_grad(f, arr, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return out


# -- dense_forward -----------------------------------------------------------------
@pytest.mark.parametrize(
    "x, W, b, expected",
    [
        ([[1, 2]], [[1, 0], [0, 1]], [0, 0], [[1, 2]]),
        ([[1, 2]], [[0, 0], [0, 0]], [3, 4], [[3, 4]]),
        # 1*2 + 1*4 + 1 = 7, 1*3 + 1*5 + 1 = 9
        ([[1, 1]], [[2, 3], [4, 5]], [1, 1], [[7, 9]]),
    ],
)
def test_dense_examples(x, W, b, expected):
    out = dense(Tensor(x), Tensor(W), Tensor(b))
    np.testing.assert_array_equal(out.data, expected)


def test_dense_shape_mismatch_names_both_shapes():
    with pytest.raises(ContractError, match=r"\(1, 3\).*\(2, 2\)"):
        dense(Tensor([[1, 2, 3]]), Tensor(np.eye(2)), Tensor([0, 0]))


# -- backward -------------------------------------------------------------------------
def test_backward_linear():
    store = _store(w=[3.0])
    loss = sum_(mul(store["w"], 2.0))
    loss.backward()
    assert store["w"].grad[0] == 2.0


def test_backward_sigmoid_at_zero():
    x = Tensor([0.0], requires_grad=True)
    sum_(sigmoid(x)).backward()
    assert x.grad[0] == 0.25


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        mul(x, 2.0).backward()


def test_backward_unreachable_param_has_zero_grad():
    store = _store(a=[1.0, 2.0], b=[5.0])
    sum_(mul(store["a"], store["a"])).backward()
    np.testing.assert_array_equal(store["b"].grad, [0.0])
    np.testing.assert_array_equal(store["a"].grad, [2.0, 4.0])


def test_composed_graph_matches_finite_differences():
    rng = np.random.default_rng(3)
    store = _store(W=rng.normal(size=(4, 3)), b=rng.normal(size=3), v=rng.normal(size=(3, 1)))
    x = rng.normal(size=(5, 4))
    y = (rng.random(5) < 0.5).astype(float)

    def f():
        h = dense(Tensor(x), store["W"], store["b"])
        p = sigmoid(h @ store["v"]).reshape(5)
        return ce_loss(p, y)

    store.zero_grad()
    f().backward()
    for name in ("W", "b", "v"):
        num = numeric_grad(lambda: f().item(), store[name].data)
        ana = store[name].grad
        rel = np.abs(ana - num) / np.maximum(1.0, np.maximum(np.abs(ana), np.abs(num)))
        assert rel.max() < 1e-4


# -- grad_check ---------------------------------------------------------------------------
def test_grad_check_quadratic():
    store = _store(w=[3.0])
    err = grad_check(lambda: sum_(mul(store["w"], store["w"])), store, eps=1e-5)
    assert err < 1e-8


def test_grad_check_constant_function_is_zero():
    store = _store(w=[3.0, -1.0])
    assert grad_check(lambda: Tensor(np.array(4.0)), store, eps=1e-5) == 0.0


def test_grad_check_dense_sigmoid_ce():
    rng = np.random.default_rng(0)
    store = _store(W=rng.normal(size=(3, 1)), b=rng.normal(size=1))
    x = rng.normal(size=(6, 3))
    y = np.array([0, 1, 1, 0, 1, 0])
    err = grad_check(lambda: ce_loss(sigmoid(dense(Tensor(x), store["W"], store["b"])).reshape(6), y), store)
    assert err < 1e-4


def test_grad_check_detects_wrong_gradient():
    store = _store(w=[2.0])

    def broken():
        w = store["w"]
        out = Tensor(w.data**2, requires_grad=True, _parents=(w,), _backward=lambda g: w._accumulate(g * 3.0))
        return out.sum()

    assert grad_check(broken, store) > 1e-2


# -- per-layer gradient checks over many seeds -------------------------------------------------
def _layer_cases(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    y = (rng.random(4) < 0.5).astype(float)

    def dense_case():
        s = _store(W=rng.normal(size=(3, 2)), b=rng.normal(size=2))
        return s, lambda: sum_(mul(dense(Tensor(x), s["W"], s["b"]), Tensor(rng_fixed)))

    rng_fixed = rng.normal(size=(4, 2))

    def embedding_case():
        s = _store(T=rng.normal(size=(5, 3)))
        idx = np.array([0, 3, 3, 1])
        w = rng.normal(size=(4, 3))
        return s, lambda: sum_(mul(embedding(s["T"], idx), Tensor(w)))

    def attention_case():
        d, L = 3, 4
        s = _store(
            E=rng.normal(size=(2, L, d)), t=rng.normal(size=(2, d)),
            W0=rng.normal(size=(4 * d, 5)), b0=rng.normal(size=5),
            W1=rng.normal(size=(5, 1)), b1=rng.normal(size=1),
        )
        w = rng.normal(size=(2, d))
        layers = lambda: [(s["W0"], s["b0"]), (s["W1"], s["b1"])]  # noqa: E731
        return s, lambda: sum_(mul(din_pool(s["E"], np.array([4, 2]), s["t"], layers()), Tensor(w)))

    def cross_case():
        s = _store(x0=rng.normal(size=(3, 4)), xl=rng.normal(size=(3, 4)), w=rng.normal(size=4), b=rng.normal(size=4))
        c = rng.normal(size=(3, 4))
        return s, lambda: sum_(mul(cross_layer(s["x0"], s["xl"], s["w"], s["b"]), Tensor(c)))

    def sigmoid_case():
        s = _store(z=rng.normal(size=6))
        c = rng.normal(size=6)
        return s, lambda: sum_(mul(sigmoid(s["z"]), Tensor(c)))

    def ce_case():
        s = _store(p=rng.uniform(0.05, 0.95, size=4))
        return s, lambda: ce_loss(s["p"], y)

    def mse_case():
        s = _store(a=rng.normal(size=(3, 5)), b=rng.normal(size=(3, 5)))
        return s, lambda: feature_distill_loss(s["a"], s["b"])

    return {
        "dense": dense_case, "embedding": embedding_case, "attention": attention_case,
        "cross": cross_case, "sigmoid": sigmoid_case, "ce": ce_case, "mse": mse_case,
    }


@pytest.mark.parametrize("layer", ["dense", "embedding", "attention", "cross", "sigmoid", "ce", "mse"])
def test_every_layer_passes_grad_check_over_ten_seeds(layer):
    for seed in range(10):
        store, f = _layer_cases(seed)[layer]()
        assert grad_check(f, store, eps=1e-5) < 1e-4, (layer, seed)


# -- adam ---------------------------------------------------------------------------------------
def test_adam_zero_gradient_leaves_params():
    store = _store(w=[1.0, -2.0])
    state = AdamState.for_store(store)
    adam_step(store, state, lr=0.1)
    np.testing.assert_array_equal(store["w"].data, [1.0, -2.0])
    assert state.step == 1


def test_adam_single_step_moves_by_lr():
    store = _store(w=[0.5])
    state = AdamState.for_store(store)
    store["w"].grad[:] = 1.0
    adam_step(store, state, lr=0.1, beta1=0.9, beta2=0.999, epsilon=1e-8)
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
    assert store["w"].data[0] == pytest.approx(0.5 - 0.1 / (1 + 1e-8), abs=1e-15)
    assert store["w"].grad[0] == 0.0


def test_adam_symmetric_params_get_identical_updates():
    store = _store(a=[0.3], b=[0.3])
    state = AdamState.for_store(store)
    for g in (0.7, -0.2, 1.1):
        store["a"].grad[:] = g
        store["b"].grad[:] = g
        adam_step(store, state, lr=0.05)
    assert store["a"].data[0] == store["b"].data[0]


def test_adam_lr_zero_is_bitwise_noop():
    rng = np.random.default_rng(1)
    store = _store(w=rng.normal(size=(3, 3)))
    before = store["w"].data.copy()
    state = AdamState.for_store(store)
    for _ in range(3):
        store["w"].grad[:] = rng.normal(size=(3, 3))
        adam_step(store, state, lr=0.0)
    assert np.array_equal(store["w"].data, before)
    assert state.step == 3


# -- embedding ------------------------------------------------------------------------------------
def test_embedding_row_selection():
    table = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(embedding(table, 1).data, [3, 4])
    np.testing.assert_array_equal(embedding(table, 0).data, [1, 2])


def test_embedding_gradient_hits_only_selected_row():
    store = _store(T=[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    sum_(embedding(store["T"], 1)).backward()
    np.testing.assert_array_equal(store["T"].grad, [[0, 0], [1, 1], [0, 0]])


def test_embedding_out_of_range_names_index_and_vocab():
    with pytest.raises(ContractError, match="index 5.*vocab size 2"):
        embedding(Tensor(np.zeros((2, 3))), 5)


# -- properties ---------------------------------------------------------------------------------
def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(5)
    x, W, b = rng.normal(size=(8, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    a = sigmoid(dense(Tensor(x), Tensor(W), Tensor(b))).data
    c = sigmoid(dense(Tensor(x), Tensor(W), Tensor(b))).data
    assert a.tobytes() == c.tobytes()


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(2)
    store = _store(W=rng.normal(size=(3, 2)), b=rng.normal(size=2))
    x = Tensor(rng.normal(size=(4, 3)))
    c1, c2 = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))

    def l1():
        return sum_(mul(sigmoid(dense(x, store["W"], store["b"])), Tensor(c1)))

    def l2():
        return sum_(mul(dense(x, store["W"], store["b"]), Tensor(c2)))

    store.zero_grad()
    l1().backward()
    g1 = store.grads()
    store.zero_grad()
    l2().backward()
    g2 = store.grads()
    store.zero_grad()
    (l1() + l2()).backward()
    for k in g1:
        np.testing.assert_allclose(store[k].grad, g1[k] + g2[k], rtol=1e-12, atol=1e-14)


def test_param_names_are_unique():
    store = _store(w=[1.0])
    with pytest.raises(ContractError):
        store.add("w", np.zeros(1))


# -- checkpoint file ---------------------------------------------------------------------------------
def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    store = _store(a=rng.normal(size=(2, 3)), b=rng.normal(size=4) * 1e-300)
    save_checkpoint(store, tmp_path / "c.json", {"model": "x"})
    other = _store(a=np.zeros((2, 3)), b=np.zeros(4))
    meta = load_checkpoint(other, tmp_path / "c.json")
    assert meta == {"model": "x"}
    for k in ("a", "b"):
        assert store[k].data.tobytes() == other[k].data.tobytes()


def test_checkpoint_with_unknown_name_fails_loudly(tmp_path):
    save_checkpoint(_store(a=[1.0], extra=[2.0]), tmp_path / "c.json")
    with pytest.raises(ContractError, match="unknown names \\['extra'\\]"):
        load_checkpoint(_store(a=[0.0]), tmp_path / "c.json")


def test_checkpoint_is_version_tagged(tmp_path):
    save_checkpoint(_store(a=[1.0]), tmp_path / "c.json")
    text = (tmp_path / "c.json").read_text()
    assert '"version": 1' in text
    (tmp_path / "c.json").write_text(text.replace('"version": 1', '"version": 99'))
    with pytest.raises(ContractError, match="version"):
        read_checkpoint(tmp_path / "c.json")


def test_frozen_inference_is_thread_safe():
    rng = np.random.default_rng(0)
    store = _store(W=rng.normal(size=(16, 8)), b=rng.normal(size=8))
    xs = [rng.normal(size=(32, 16)) for _ in range(8)]
    expected = [sigmoid(dense(Tensor(x), store["W"], store["b"])).data for x in xs]
    results = [None] * len(xs)

    def work(i):
        for _ in range(20):
            results[i] = sigmoid(dense(Tensor(xs[i]), store["W"], store["b"])).data

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(xs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for r, e in zip(results, expected):
        assert r.tobytes() == e.tobytes()


def test_values_stay_finite_for_extreme_logits():
    x = Tensor([-800.0, 0.0, 800.0], requires_grad=True)
    out = sigmoid(x)
    sum_(out).backward()
    assert np.isfinite(out.data).all() and np.isfinite(x.grad).all()
    assert math.isclose(out.data[1], 0.5)
