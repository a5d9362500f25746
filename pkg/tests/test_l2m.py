import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from learnmatch import diffmath as dm
from learnmatch.evalio.config import ExperimentConfig
from learnmatch.l2m import (MatchSetup, composite_loss, lambda_schedule, lr_schedule, main_update, meta_update,
                            select_meta_data, train_baseline, train_l2m, validation_loss)
from learnmatch.matching import KernelSpec
from learnmatch.models import build_bundle, clone_assist


def small(**train):
    base = {"epochs": 2, "batch_size": 32}
    base.update(train)
    return ExperimentConfig().replace(data={"n": 80}, model={"feature_hidden": [8, 8], "meta_hidden": [8, 8]},
                                      train=base)


def params_of(bundle):
    return {k: v.data.copy() for k, v in bundle.all_params().items()}


# --- schedules ----------------------------------------------------------------------

def test_lr_schedule_values():
    assert lr_schedule(0, 0.004, 0.001, 0.75) == 0.004
    val = lr_schedule(200_000, 0.004, 0.001, 0.75)
    assert val == pytest.approx(0.004 / 201 ** 0.75, rel=1e-12)
    assert f"{val:.2e}" == "7.49e-05"


@given(k=st.integers(0, 10**6), gamma=st.floats(0, 1), upsilon=st.floats(0, 2))
def test_lr_schedule_non_increasing(k, gamma, upsilon):
    assert lr_schedule(k + 1, 0.5, gamma, upsilon) <= lr_schedule(k, 0.5, gamma, upsilon)


def test_lambda_schedule_values():
    assert lambda_schedule(0.0, 3.0) == 0.0
    assert lambda_schedule(1.0, 1.0) == pytest.approx(2 / (1 + math.exp(-10)) - 1, abs=1e-15)
    assert round(lambda_schedule(1.0, 1.0), 5) == 0.99991
    with pytest.raises(dm.UsageError):
        lambda_schedule(1.5, 1.0)


@given(a=st.floats(0, 1), b=st.floats(0, 1))
def test_lambda_schedule_monotone(a, b):
    lo, hi = sorted((a, b))
    assert lambda_schedule(lo, 2.0) <= lambda_schedule(hi, 2.0)


# --- meta-data ----------------------------------------------------------------------------

def probs_for(confidences, classes, C=2):
    out = np.zeros((len(confidences), C))
    for i, (c, k) in enumerate(zip(confidences, classes)):
        out[i] = (1 - c) / (C - 1)
        out[i, k] = c
    return out


def test_meta_data_top_three():
    conf = [0.95, 0.9, 0.85, 0.81, 0.79]
    probs = probs_for(conf, [0] * 5)
    meta = select_meta_data(None, np.arange(10.0).reshape(5, 2), m=3, tau=0.8, probs=probs)
    oracle = sorted(range(5), key=lambda i: (-conf[i], i))[:3]
    assert meta.indices.tolist() == oracle == [0, 1, 2]
    assert meta.per_class_counts.tolist() == [3, 0]


def test_meta_data_empty_when_nothing_is_confident():
    probs = probs_for([0.6, 0.7, 0.55], [0, 1, 1])
    meta = select_meta_data(None, np.zeros((3, 2)), m=5, tau=0.8, probs=probs)
    assert meta.empty and len(meta) == 0 and meta.per_class_counts.tolist() == [0, 0]


def test_meta_data_ties_go_to_lower_index():
    probs = probs_for([0.9, 0.95, 0.9, 0.9], [1, 1, 1, 1])
    meta = select_meta_data(None, np.zeros((4, 1)), m=2, tau=0.8, probs=probs)
    assert meta.indices.tolist() == [1, 0]


@given(seed=st.integers(0, 10**6), m=st.integers(1, 6), tau=st.floats(0.34, 1.0))
def test_meta_data_invariants(seed, m, tau):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.full(3, 0.3), size=40)
    meta = select_meta_data(None, rng.normal(size=(40, 2)), m=m, tau=tau, probs=probs)
    assert np.all(meta.per_class_counts <= m) and np.all(meta.confidences >= tau)
    assert len(meta) == meta.per_class_counts.sum()
    assert np.array_equal(meta.pseudo_labels, probs[meta.indices].argmax(axis=1))


def test_meta_data_default_m_is_five():
    assert ExperimentConfig().train.m == 5
    probs = probs_for([0.99] * 9, [0] * 9)
    assert len(select_meta_data(None, np.zeros((9, 1)), probs=probs)) == 5


# --- updates ----------------------------------------------------------------------------------

def toy(seed=0, mode="emb+mmd"):
    rng = np.random.default_rng(seed)
    Xs, Xt = rng.normal(size=(12, 2)), rng.normal(0.5, 1.0, size=(12, 2))
    ys = rng.integers(0, 2, size=12)
    from learnmatch.matching import feature_dim
    bundle = build_bundle(2, 2, feature_dim(mode, 6, 2), seed, feature_hidden=(6, 6), meta_hidden=(5, 5),
                          hidden_activation="tanh", meta_activation="tanh")
    return bundle, Xs, ys, Xt, MatchSetup(mode, KernelSpec(1.0), tau=0.0)


def test_zero_lambda_step_equals_cross_entropy_step():
    bundle, Xs, ys, Xt, setup = toy(1)
    twin = clone_assist(bundle)
    main_update(bundle, Xs, ys, Xt, 0.0, 0.1, setup)
    with dm.Tape() as tape:
        loss = dm.softmax_cross_entropy(twin.classifier(twin.feature_extractor(Xs)), ys)
    dm.backward(tape, loss)
    dm.sgd_step(twin.main_params(), 0.1)
    a, b = params_of(bundle), params_of(twin)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_small_step_decreases_batch_objective():
    bundle, Xs, ys, Xt, setup = toy(2)
    before, _, _ = composite_loss(clone_assist(bundle), Xs, ys, Xt, 0.5, setup, train_discriminators=False)
    main_update(bundle, Xs, ys, Xt, 0.5, 1e-3, setup)
    after, _, _ = composite_loss(bundle, Xs, ys, Xt, 0.5, setup, train_discriminators=False)
    assert after.item() < before.item()


def test_main_update_leaves_theta_alone():
    bundle, Xs, ys, Xt, setup = toy(3)
    theta = {k: v.data.copy() for k, v in bundle.meta_net.params.items()}
    main_update(bundle, Xs, ys, Xt, 1.0, 0.1, setup)
    assert all(np.array_equal(bundle.meta_net.params[k].data, v) for k, v in theta.items())


def meta_for(Xt):
    k = len(Xt)
    return select_meta_data(None, Xt, m=k, tau=0.0, probs=probs_for([0.9] * k, [i % 2 for i in range(k)]))


@pytest.mark.parametrize("mode", ["emb", "mmd", "adv", "emb+mmd", "emb+adv", "logit+mmd"])
def test_validation_loss_zero_on_identical_snapshots(mode):
    bundle, Xs, ys, Xt, setup = toy(4, mode)
    meta = meta_for(Xt[:6])
    with dm.Tape() as tape:
        l_val = validation_loss(bundle.meta_net, bundle, clone_assist(bundle), Xs, ys, meta, setup)
    assert l_val.item() == 0.0
    dm.zero_grad(bundle.meta_net.params)
    dm.backward(tape, l_val)
    assert all(np.all(p.grad == 0.0) for p in bundle.meta_net.params.values())


def test_identical_snapshot_meta_step_is_pure_weight_decay():
    bundle, Xs, ys, Xt, setup = toy(5)
    theta = {k: v.data.copy() for k, v in bundle.meta_net.params.items()}
    meta_update(bundle.meta_net, bundle, clone_assist(bundle), Xs, ys, meta_for(Xt[:6]), 0.1, setup,
                weight_decay=1e-4)
    for k, v in theta.items():
        assert np.allclose(bundle.meta_net.params[k].data, v * (1 - 0.1 * 1e-4), rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_validation_loss_inside_open_interval(seed):
    bundle, Xs, ys, Xt, setup = toy(seed)
    after = clone_assist(bundle)
    for p in after.main_params().values():
        p.data = p.data + np.random.default_rng(seed).normal(0, 3.0, size=p.data.shape)
    for p in bundle.meta_net.params.values():
        p.data = p.data * 50.0
    val = validation_loss(bundle.meta_net, bundle, after, Xs, ys, meta_for(Xt[:6]), setup).item()
    assert -1.0 < val < 1.0


def test_meta_gradient_against_finite_differences():
    bundle, Xs, ys, Xt, setup = toy(6)
    after = clone_assist(bundle)
    for p in after.main_params().values():
        p.data = p.data + np.random.default_rng(1).normal(0, 0.2, size=p.data.shape)
    meta = meta_for(Xt[:6])
    err = dm.finite_difference_gradcheck(
        bundle.meta_net.params, lambda: validation_loss(bundle.meta_net, bundle, after, Xs, ys, meta, setup),
        floor=1e-6)
    assert err <= 1e-4


def test_meta_dimension_mismatch_is_shape_error():
    bundle, Xs, ys, Xt, setup = toy(7)
    with pytest.raises(dm.ShapeError):
        validation_loss(bundle.meta_net, bundle, bundle, Xs, ys, meta_for(Xt[:4]), MatchSetup("mmd", KernelSpec(1.0)))


# --- full loops ----------------------------------------------------------------------------------

def test_smoke_run_logs_one_row_per_epoch():
    res = train_l2m(small())
    assert len(res.metrics) == 2 and res.metrics[-1].a_distance is not None
    assert all(np.isfinite(r.loss_cls) and -1 < r.loss_meta < 1 for r in res.metrics)


def test_training_is_deterministic():
    a, b = train_l2m(small(epochs=1)), train_l2m(small(epochs=1))
    pa, pb = params_of(a.bundle), params_of(b.bundle)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert a.metrics == b.metrics


def test_zero_lambda_without_meta_is_source_only():
    cfg = small(lambda_max=0.0, meta_enabled=False, clip_norm=0.0, baseline_clip_norm=0.0)
    a = train_l2m(cfg)
    b = train_baseline("source_only", cfg.replace(train={"method": "source_only"}))
    pa, pb = params_of(a.bundle), params_of(b.bundle)
    for k in pa:
        if k.startswith(("feature.", "classifier.")):
            assert np.array_equal(pa[k], pb[k]), k
    assert [r.target_accuracy for r in a.metrics] == [r.target_accuracy for r in b.metrics]


def test_corrupting_assist_after_meta_step_changes_nothing():
    def corrupt(assist, main):
        for p in assist.all_params().values():
            p.data = np.full_like(p.data, np.nan)

    a = train_l2m(small(meta_every="step"))
    b = train_l2m(small(meta_every="step"), on_meta_step=corrupt)
    pa, pb = params_of(a.bundle), params_of(b.bundle)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_meta_invariants_hold_every_epoch():
    res = train_l2m(small(epochs=3))
    assert len(res.meta_history) == 3
    for meta in res.meta_history:
        assert np.all(meta.per_class_counts <= 5) and np.all(meta.confidences >= 0.8)


def test_identical_domains_source_only():
    cfg = ExperimentConfig().replace(data={"angle_deg": 0.0}, train={"method": "source_only", "epochs": 20})
    res = train_baseline("source_only", cfg)
    src_acc = float(np.mean(res.bundle.predict(res.source.features) == res.source.labels))
    assert abs(res.target_accuracy - src_acc) <= 0.02


def test_unknown_baseline_kind():
    with pytest.raises(dm.ConfigurationError):
        train_baseline("coral", small())
