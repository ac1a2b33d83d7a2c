import math
import threading
from dataclasses import replace

import numpy as np
import pytest

from conftest import random_dataset
from posdistill.data import DatasetSplit
from posdistill.distill import (
    DEFAULT_LAMBDA_GRID,
    DistillMode,
    DistillModel,
    TrainConfig,
    Variant,
    ce_loss,
    feature_distill_loss,
    logit_distill_loss,
    serve,
    sweep_lambda,
    total_loss,
    train,
)
from posdistill.nn import ContractError, Tensor, sum_
from posdistill.training import HISTORY_COLUMNS, NumericalAbort, fit

LN2 = math.log(2.0)


# -- ce_loss ---------------------------------------------------------------------------------
@pytest.mark.parametrize("y", [0, 1])
def test_ce_at_one_half_is_ln2(y):
    assert abs(ce_loss(0.5, y).item() - LN2) <= 1e-12


def test_ce_hand_value():
    assert ce_loss(0.9, 1).item() == pytest.approx(-math.log(0.9), abs=1e-12)
    assert ce_loss(0.9, 1).item() == pytest.approx(0.105361, abs=1e-6)


def test_ce_batch_is_mean():
    p, y = np.array([0.9, 0.2, 0.6]), np.array([1, 0, 0])
    expected = np.mean([-math.log(0.9), -math.log(0.8), -math.log(0.4)])
    assert ce_loss(p, y).item() == pytest.approx(expected, abs=1e-12)


def test_ce_is_finite_at_extremes():
    for p in (0.0, 1.0):
        for y in (0, 1):
            v = ce_loss(p, y).item()
            assert math.isfinite(v) and v >= 0


# -- logit distill --------------------------------------------------------------------------------
def test_logit_distill_equal_halves_is_ln2():
    assert logit_distill_loss(0.5, 0.5).item() == pytest.approx(LN2, abs=1e-12)


def test_logit_distill_near_one():
    eps = 1e-4
    t = 1 - eps
    exact = -(t * math.log(t) + eps * math.log(eps))
    v = logit_distill_loss(t, t).item()
    assert v == pytest.approx(exact, rel=1e-9)
    assert v == pytest.approx(eps * (1 - math.log(eps)), rel=1e-3)


def test_logit_distill_gradient_vanishes_at_target():
    s = Tensor(np.array([0.3]), requires_grad=True)
    logit_distill_loss(s, 0.3).backward()
    assert abs(s.grad[0]) < 1e-12


def test_logit_distill_minimised_at_target():
    t = 0.37
    base = logit_distill_loss(t, t).item()
    for s in (0.1, 0.3, 0.36, 0.38, 0.5, 0.9):
        assert logit_distill_loss(s, t).item() > base


# -- feature distill ---------------------------------------------------------------------------------
def test_feature_distill_identical_is_zero():
    z = np.random.default_rng(0).normal(size=(4, 6))
    assert feature_distill_loss(z, z).item() == 0.0


def test_feature_distill_hand_value():
    assert feature_distill_loss([1.0, 0.0], [0.0, 0.0]).item() == 0.5
    assert feature_distill_loss([1.0, 0.0], [0.0, 0.0], reduction="sum").item() == 1.0


def test_feature_distill_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    assert feature_distill_loss(a, b).item() == feature_distill_loss(b, a).item()


def test_feature_distill_dim_mismatch():
    with pytest.raises(ContractError):
        feature_distill_loss(np.zeros(3), np.zeros(2))


# -- total_loss --------------------------------------------------------------------------------------
def test_total_loss_lambda_zero_is_bitwise_sum_of_ce():
    rng = np.random.default_rng(2)
    ys, yt = rng.uniform(0.01, 0.99, 8), rng.uniform(0.01, 0.99, 8)
    zs, zt = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    y = rng.integers(0, 2, 8)
    expected = (ce_loss(ys, y) + ce_loss(yt, y)).item()
    for variant in Variant:
        loss, _ = total_loss(ys, yt, zs, zt, y, DistillMode(variant, 0.0))
        assert loss.item() == expected


def test_total_loss_three_ln2():
    loss, comps = total_loss(0.5, 0.5, [0.0], [0.0], 1, DistillMode(Variant.LOGIT, 1.0))
    assert loss.item() == pytest.approx(3 * LN2, abs=1e-12)
    assert loss.item() == pytest.approx(2.079442, abs=1e-6)
    assert comps["distill"] == pytest.approx(LN2)


def test_total_loss_feature_mode_equal_features_adds_nothing():
    z = np.ones((2, 3))
    loss, _ = total_loss([0.4, 0.7], [0.2, 0.9], z, z, [0, 1], DistillMode(Variant.FEATURE, 0.8))
    expected = (ce_loss([0.4, 0.7], [0, 1]) + ce_loss([0.2, 0.9], [0, 1])).item()
    assert loss.item() == expected


def test_total_loss_non_negative():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = rng.integers(1, 6)
        mode = DistillMode(Variant(rng.choice(["logit", "feature", "none"])), float(rng.uniform(0, 2)))
        loss, _ = total_loss(
            rng.random(n), rng.random(n), rng.normal(size=(n, 3)), rng.normal(size=(n, 3)),
            rng.integers(0, 2, n), mode,
        )
        assert loss.item() >= 0


def test_distill_mode_invariants():
    assert DistillMode(Variant.NONE, 0.7).lam == 0.0
    with pytest.raises(ContractError):
        DistillMode(Variant.LOGIT, -0.1)


def test_train_config_invariants():
    with pytest.raises(ContractError):
        TrainConfig(epochs=0)
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)


# -- teacher gradients --------------------------------------------------------------------------------
def _teacher_grads(schema, tower, ds, lam):
    model = DistillModel(schema, tower, 0, DistillMode(Variant.LOGIT, lam))
    loss, _ = model.loss(ds)
    loss.backward()
    return {k: v.grad.copy() for k, v in model.params.items() if k.startswith("teacher/")}


def test_teacher_gradients_ignore_lambda_under_stop_gradient(small_schema, small_tower):
    ds = random_dataset(small_schema, 32, seed=4)
    g0 = _teacher_grads(small_schema, small_tower, ds, 0.0)
    g1 = _teacher_grads(small_schema, small_tower, ds, 1.0)
    assert g0.keys() == g1.keys() and g0
    for k in g0:
        assert g0[k].tobytes() == g1[k].tobytes(), k


def test_teacher_gradients_change_without_stop_gradient(small_schema, small_tower):
    ds = random_dataset(small_schema, 32, seed=4)
    grads = []
    for lam in (0.0, 1.0):
        model = DistillModel(small_schema, small_tower, 0, DistillMode(Variant.LOGIT, lam), detach_teacher=False)
        model.loss(ds)[0].backward()
        grads.append(model.params["teacher/head1/W"].grad.copy())
    assert not np.array_equal(grads[0], grads[1])


# -- train ---------------------------------------------------------------------------------------------
def test_train_rejects_empty_dataset(small_schema, small_tower, small_split):
    empty = small_split.train.subset(np.arange(0))
    with pytest.raises(ContractError):
        train(empty, small_schema, small_tower, TrainConfig(epochs=1))


def test_lambda_zero_logit_and_feature_train_identically(small_schema, small_tower, small_split):
    params = []
    for variant in (Variant.LOGIT, Variant.FEATURE):
        cfg = TrainConfig(epochs=1, batch_size=128, mode=DistillMode(variant, 0.0))
        model, _ = train(small_split.train, small_schema, small_tower, cfg)
        params.append(model.params.values())
    for k in params[0]:
        assert params[0][k].tobytes() == params[1][k].tobytes(), k


def test_seeded_training_reproduces_history(small_schema, small_tower):
    from posdistill.data import GenConfig, generate

    gen = GenConfig(n_train=10_000, n_validation=1000, n_test=0, user_vocab=(300, 8, 4), item_vocab=200)
    split = generate(gen, seed=0)
    schema = gen.schema(4, 3)
    cfg = TrainConfig(epochs=2, batch_size=256, seed=5)
    runs = [train(split.train, schema, small_tower, cfg, split.validation) for _ in range(2)]
    assert len(runs[0][1]) == 2
    assert runs[0][1].to_csv() == runs[1][1].to_csv()
    for k, v in runs[0][0].params.values().items():
        assert v.tobytes() == runs[1][0].params[k].data.tobytes()


def test_history_csv_header_and_rows(small_schema, small_tower, small_split):
    _, history = train(
        small_split.train, small_schema, small_tower, TrainConfig(epochs=2, batch_size=256), small_split.validation
    )
    lines = history.to_csv().splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS)
    assert lines[0] == "epoch,student_ce,teacher_ce,distill,val_auc_s,val_logloss_s,val_auc_t,val_logloss_t"
    assert [line.split(",")[0] for line in lines[1:]] == ["1", "2"]


def test_nan_loss_aborts_with_step_and_components(small_schema, small_tower, small_split):
    model = DistillModel(small_schema, small_tower, 0)
    model.params["student/head1/b"].data[:] = np.nan
    with pytest.raises(NumericalAbort) as info:
        fit(model, small_split.train, None, epochs=1, batch_size=64, seed=0)
    assert info.value.epoch == 1 and info.value.step == 0
    assert "student_ce" in str(info.value) and "step 0" in str(info.value)


# -- sweep ----------------------------------------------------------------------------------------------
def test_default_grid():
    assert DEFAULT_LAMBDA_GRID == (0.01, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0)


def test_single_element_grid_selects_it(small_schema, small_tower, small_split):
    result = sweep_lambda(small_split, small_schema, small_tower, TrainConfig(epochs=1), [0.5])
    assert len(result.rows) == 1
    assert result.selected.lam == 0.5
    assert math.isfinite(result.selected.val_logloss)


def test_sweep_marks_failed_cells_and_continues(small_schema, small_tower, small_split):
    bad = small_split.validation.subset(np.arange(len(small_split.validation)))
    bad.user[0, 0] = 10**6  # validation scoring hits an out-of-vocab index
    split = DatasetSplit(small_split.train, bad, small_split.test)
    result = sweep_lambda(split, small_schema, small_tower, TrainConfig(epochs=1), [0.1, 0.2])
    assert all(r.error for r in result.rows)
    assert result.selected is None


def test_sweep_selects_argmin_validation_logloss(small_schema, small_tower, small_split):
    result = sweep_lambda(small_split, small_schema, small_tower, TrainConfig(epochs=1), [0.01, 1.0], Variant.FEATURE)
    best = min(result.rows, key=lambda r: r.val_logloss)
    assert best.selected and sum(r.selected for r in result.rows) == 1


def test_sweep_rejects_empty_grid(small_schema, small_tower, small_split):
    with pytest.raises(ContractError):
        sweep_lambda(small_split, small_schema, small_tower, TrainConfig(epochs=1), [])


# -- serve ------------------------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def trained(small_schema, small_tower, small_split):
    model, _ = train(small_split.train, small_schema, small_tower, TrainConfig(epochs=1, batch_size=128))
    return model


def test_serve_ignores_position(trained, small_schema):
    ds = random_dataset(small_schema, 1000, seed=11)
    a = trained.serve(ds.with_positions(np.full(1000, 1)))
    b = trained.serve(ds.with_positions(np.full(1000, 9)))
    assert a.tobytes() == b.tobytes()


def test_serve_never_reads_position_or_teacher(trained, small_schema):
    ds = random_dataset(small_schema, 20, seed=12)
    ref = trained.serve(ds)
    saved = {k: v.data.copy() for k, v in trained.params.items() if k.startswith(("pos/", "teacher/"))}
    try:
        for k in saved:
            trained.params[k].data[...] = np.nan
        assert trained.serve(ds.with_positions(np.full(20, 10**6))).tobytes() == ref.tobytes()
    finally:
        for k, v in saved.items():
            trained.params[k].data[...] = v


def test_zero_weight_model_serves_one_half(small_schema, small_tower):
    model = DistillModel(small_schema, small_tower, 0)
    for k, v in model.params.items():
        if k.startswith("student/"):
            v.data[...] = 0.0
    np.testing.assert_array_equal(model.serve(random_dataset(small_schema, 5)), 0.5)


def test_serve_matches_training_forward_student(trained, small_schema):
    ds = random_dataset(small_schema, 64, seed=13)
    _, y_s, _, _ = trained.forward(ds)
    assert trained.serve(ds).tobytes() == y_s.data.tobytes()
    assert serve(trained.net, ds).tobytes() == y_s.data.tobytes()


def test_serve_is_safe_under_concurrent_calls(trained, small_schema):
    sets = [random_dataset(small_schema, 300, seed=s) for s in range(6)]
    expected = [trained.serve(d) for d in sets]
    got = [None] * len(sets)

    def work(i):
        for _ in range(5):
            got[i] = trained.serve(sets[i])

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(sets))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for a, b in zip(expected, got):
        assert a.tobytes() == b.tobytes()


def test_schema_mismatch_on_serve(trained, small_schema):
    ds = random_dataset(small_schema, 3)
    ds = replace(ds, ctx=ds.ctx[:, :1])
    with pytest.raises(ContractError, match="ctx"):
        trained.serve(ds)


def test_sum_of_student_grads_nonzero_after_loss(small_schema, small_tower):
    model = DistillModel(small_schema, small_tower, 0)
    model.loss(random_dataset(small_schema, 16))[0].backward()
    assert np.abs(model.params["student/enc0/W"].grad).sum() > 0
    assert sum_(Tensor(model.params["pos/emb"].grad)).item() != 0
