import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inboxrec.errors import ContractError, DivergedStepError
from inboxrec.model import checkpoint_load
from inboxrec.synthbench import SynthConfig, make_dataset
from inboxrec.training import (Adam, BatchSampler, EarlyStopper, TrainConfig, batch_loss,
                               grad_step, lr_schedule, margin_loss, run_pipeline,
                               validation_split)

from conftest import toy_dataset, toy_store
from gradcheck import CASES, gradient_check


# -- loss ---------------------------------------------------------------------

def test_margin_loss_hand_value():
    assert margin_loss(12.0, [12.0, 12.0, 12.0], 1.0, 12.0) == pytest.approx(2 * math.log(2))
    assert margin_loss(12.0, [12.0], 1.0, 12.0) == pytest.approx(1.3862943611)


def test_margin_loss_linear_in_weight():
    a = margin_loss(3.0, [5.0, 20.0], 0.7, 12.0)
    assert margin_loss(3.0, [5.0, 20.0], 1.4, 12.0) == pytest.approx(2 * a)


def test_margin_loss_limit_is_zero():
    assert margin_loss(0.0, [1e4], 1.0, 12.0) == pytest.approx(0.0, abs=1e-5)


def test_margin_loss_literal_form():
    g = 12.0
    ref = -(math.log(1 / (1 + math.exp(-(g - 2)))) - math.log(1 / (1 + math.exp(-(g - 30)))))
    assert margin_loss(2.0, [30.0], 1.0, g, literal_form=True) == pytest.approx(ref)
    # unbounded below: pushing negatives away drives the loss to -infinity
    assert margin_loss(0.0, [1e3], 1.0, g, literal_form=True) < -900


def test_margin_loss_errors():
    with pytest.raises(ContractError):
        margin_loss(1.0, [], 1.0, 12.0)
    with pytest.raises(ContractError):
        margin_loss(1.0, [1.0], 0.0, 12.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 40), st.lists(st.floats(0, 40), min_size=1, max_size=5),
       st.floats(0.01, 40), st.integers(0, 4))
def test_margin_loss_monotone(dp, dn, delta, k):
    k = k % len(dn)
    base = margin_loss(dp, dn, 1.0, 12.0)
    assert margin_loss(dp + delta, dn, 1.0, 12.0) >= base
    up = list(dn)
    up[k] += delta
    assert margin_loss(dp, up, 1.0, 12.0) <= base


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 40), min_size=2, max_size=6), st.randoms())
def test_margin_loss_negative_order_invariant(dn, rnd):
    perm = list(dn)
    rnd.shuffle(perm)
    assert margin_loss(1.0, dn, 1.0, 12.0) == pytest.approx(margin_loss(1.0, perm, 1.0, 12.0))


# -- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("literal", [False, True])
@pytest.mark.parametrize("stage,kind,variant", CASES)
def test_gradients_match_finite_differences(stage, kind, variant, literal):
    assert gradient_check(stage, kind, variant, literal) < 1e-3


@pytest.mark.parametrize("mode", ["item", "user"])
def test_gradients_box_modes(mode):
    assert gradient_check("recommendation", None, "attention", False, mode=mode) < 1e-3


def _sampler(ds, **kw):
    cfg = TrainConfig(dim=4, batch_size=4, n_negatives=3, val_fraction=0.0, **kw)
    return cfg, BatchSampler(ds, ds.graph, cfg)


def test_untouched_parameters_have_zero_gradient(toy):
    cfg, sampler = _sampler(toy)
    store = toy_store(toy)
    batch = sampler.pretrain(np.random.default_rng(0), kind="iri")
    _, grads, _ = grad_step(batch, store, toy, cfg)
    assert "users" not in grads and not any(k.startswith("user.") for k in grads)
    touched = set(batch["trip"][:, [0, 2]].ravel()) | set(batch["neg"].ravel())
    rows = np.nonzero(np.abs(grads["items"]).sum(axis=1))[0]
    assert set(rows) <= touched


def test_grad_step_deterministic(toy):
    cfg, sampler = _sampler(toy)
    store = toy_store(toy)
    b1 = sampler.recommendation(np.random.default_rng(3), np.arange(4))
    b2 = sampler.recommendation(np.random.default_rng(3), np.arange(4))
    assert all(np.array_equal(b1[k], b2[k]) for k in b1 if k != "stage")
    l1, g1, _ = grad_step(b1, store, toy, cfg)
    l2, g2, _ = grad_step(b2, store, toy, cfg)
    assert l1 == l2 and all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_loss_invariant_to_negative_order(toy):
    cfg, sampler = _sampler(toy)
    store = toy_store(toy)
    batch = sampler.intersection(np.random.default_rng(0), sampler.items_with_concepts[:4])
    perm = dict(batch, neg=batch["neg"][:, ::-1])
    assert batch_loss(batch, store, toy, cfg) == pytest.approx(batch_loss(perm, store, toy, cfg))


def test_stage3_leaves_positive_out_of_its_box(toy):
    cfg, sampler = _sampler(toy)
    b = sampler.recommendation(np.random.default_rng(0), np.arange(len(sampler.pairs)))
    for pos, hist, mask in zip(b["pos"], b["hist"], b["hist_mask"]):
        assert pos not in hist[mask]
    # negatives are never training items of the user
    for u, negs in zip(b["users"], b["neg"]):
        assert not np.isin(negs, toy.graph.train[u]).any()


def test_stage3_single_item_history_keeps_item():
    ds = toy_dataset()
    ds.graph.train[1] = np.array([3])
    ds.graph.train_order[1] = np.array([3])
    cfg, sampler = _sampler(ds)
    k = [i for i, (u, _) in enumerate(sampler.pairs) if u == 1]
    b = sampler.recommendation(np.random.default_rng(0), np.array(k))
    assert b["hist_mask"][0].sum() == 1 and b["hist"][0][b["hist_mask"][0]][0] == 3


def test_stage_weights(toy):
    cfg, sampler = _sampler(toy, alpha=4.0)
    b = sampler.intersection(np.random.default_rng(0), np.array([0, 2]))
    assert np.allclose(b["w"], [1 / 4, 1 / 2])
    b = sampler.recommendation(np.random.default_rng(0), np.array([0]))
    assert b["w"][0] == pytest.approx(1 / (3 + 4))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_is_reported(toy):
    cfg, sampler = _sampler(toy)
    store = toy_store(toy)
    store.tables["items"][:] = np.nan
    batch = sampler.pretrain(np.random.default_rng(0), kind="iri")
    with pytest.raises(DivergedStepError):
        grad_step(batch, store, toy, cfg)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_stage_aborts_pipeline(toy):
    cfg = TrainConfig(dim=4, batch_size=4, n_negatives=2, epochs=(1, 1, 1))
    store = toy_store(toy)
    store.tables["tags"][:] = np.inf
    with pytest.raises(DivergedStepError, match="pretrain"):
        run_pipeline(toy, cfg, store=store)


# -- optimizer ----------------------------------------------------------------

def test_lr_schedule_defaults():
    assert lr_schedule(0, 1000) == 1e-4
    assert lr_schedule(499, 1000) == 1e-4
    assert lr_schedule(600, 1000) == pytest.approx(2e-5)
    assert lr_schedule(900, 1000) == pytest.approx(4e-6)
    assert lr_schedule(5, 10, base_lr=1.0, milestones=(0.3,), factors=(0.5,)) == 0.5


def scalar_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8, p=0.0):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(p)
    return out


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(0)
    grads = list(rng.normal(size=50))
    ref = scalar_adam(grads, 0.01)
    opt, params = Adam(), {"x": np.zeros(1)}
    for g, want in zip(grads, ref):
        opt.step(params, {"x": np.array([g])}, 0.01)
        assert params["x"][0] == pytest.approx(want, rel=1e-12, abs=1e-15)


def test_adam_constant_gradient_step_is_lr():
    opt, params = Adam(), {"x": np.zeros(1)}
    prev = 0.0
    for _ in range(200):
        opt.step(params, {"x": np.array([3.7])}, 0.05)
        step, prev = prev - params["x"][0], params["x"][0]
    assert step == pytest.approx(0.05, rel=1e-6)


def test_adam_zero_gradient_leaves_parameters():
    params = {"x": np.arange(4.0), "y": np.ones(2)}
    before = {k: v.copy() for k, v in params.items()}
    opt = Adam()
    for _ in range(5):
        opt.step(params, {"x": np.zeros(4)}, 0.1)
    assert all(np.array_equal(params[k], before[k]) for k in params)


def test_adam_clipping_and_nonfinite_guard():
    opt, params = Adam(clip_norm=1.0), {"x": np.zeros(2)}
    opt.step(params, {"x": np.array([300.0, 400.0])}, 0.1)
    assert np.allclose(opt.m["x"], 0.1 * np.array([0.6, 0.8]))
    with pytest.raises(DivergedStepError):
        opt.step(params, {"x": np.array([np.nan, 0.0])}, 0.1)


def test_adam_state_round_trips_through_checkpoint(toy, tmp_path):
    cfg = TrainConfig(dim=4, batch_size=4, n_negatives=2, epochs=(1, 0, 1),
                      no_intersection=True, val_fraction=0.0)
    store, _ = run_pipeline(toy, cfg, out_dir=str(tmp_path))
    _, extra = checkpoint_load(tmp_path / "pretrain.ckpt", with_extra=True)
    opt = Adam.from_state(extra)
    assert opt.t > 0 and set(opt.m) <= set(store.tables)
    again = Adam.from_state(opt.state())
    assert again.t == opt.t
    assert all(np.array_equal(again.m[k], opt.m[k]) and np.array_equal(again.v[k], opt.v[k])
               for k in opt.m)


# -- config / schedule --------------------------------------------------------

def test_config_invariants():
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)
    with pytest.raises(ContractError):
        TrainConfig(n_negatives=0)
    with pytest.raises(ContractError):
        TrainConfig(lr_milestones=(0.5, 1.0))
    with pytest.raises(ContractError):
        TrainConfig(no_user_bias=True, only_user_bias=True)
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"nope": 1})
    cfg = TrainConfig(maxmin=True, epochs=[1, 2, 3])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_stage_toggles():
    assert TrainConfig().stages() == ["pretrain", "intersection", "recommendation"]
    assert TrainConfig(no_pretrain=True, no_intersection=True).stages() == ["recommendation"]
    assert TrainConfig(no_pretrain=True).stages() == ["intersection", "recommendation"]
    assert TrainConfig(maxmin=True).variant == "maxmin"
    assert TrainConfig(no_user_bias=True).box_mode == "item"
    assert TrainConfig(only_user_bias=True).box_mode == "user"


def test_early_stopper_rule():
    s = EarlyStopper(patience=2)
    stops = [s.update(v, e) for e, v in enumerate([0.1, 0.2, 0.2, 0.15], 1)]
    assert stops == [False, False, False, True]
    assert s.best_epoch == 2 and s.best == 0.2


def test_plateaued_run_stops_after_two_flat_epochs(toy):
    cfg = TrainConfig(dim=4, batch_size=4, n_negatives=2, epochs=(0, 0, 10), base_lr=0.0,
                      no_pretrain=True, no_intersection=True, val_fraction=0.5)
    _, logs = run_pipeline(toy, cfg)
    assert logs[-1].stopped_early and logs[-1].epochs_run == 3


def test_validation_split(toy):
    g = validation_split(toy.graph, 0.5, np.random.default_rng(0))
    for u in range(toy.n_users):
        full = toy.graph.train[u]
        assert np.array_equal(np.union1d(g.train[u], g.test[u]), full)
        assert len(np.intersect1d(g.train[u], g.test[u])) == 0
        assert len(g.train[u]) >= 1
        assert list(g.train_order[u]) == [i for i in toy.graph.train_order[u] if i in g.train[u]]
    assert [len(t) for t in g.test] == [2, 1, 1, 2]
    g0 = validation_split(toy.graph, 0.05, np.random.default_rng(0))
    assert all(len(t) == 0 for t in g0.test)


def test_training_log_format(toy, tmp_path):
    cfg = TrainConfig(dim=4, batch_size=4, n_negatives=2, epochs=(1, 1, 2), maxmin=True,
                      val_fraction=0.5)
    run_pipeline(toy, cfg, out_dir=str(tmp_path))
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert "# stage intersection variant maxmin mode both" in lines
    records = [ln.split() for ln in lines if not ln.startswith("#")]
    assert [r[0] for r in records] == ["pretrain", "intersection", "recommendation",
                                       "recommendation"]
    assert all(len(r) == 6 for r in records)
    assert records[0][5] == "nan" and records[-1][5] != "nan"
    for stage in ("pretrain", "intersection", "recommendation"):
        assert (tmp_path / f"{stage}.ckpt").exists()


def test_pipeline_reproducible(toy):
    cfg = TrainConfig(dim=4, batch_size=4, n_negatives=2, epochs=(2, 2, 2), seed=9)
    a, _ = run_pipeline(toy, cfg)
    b, _ = run_pipeline(toy, cfg)
    assert all(a.tables[k].tobytes() == b.tables[k].tobytes() for k in a.tables)


def test_stage3_loss_decreases_over_first_five_epochs():
    curves = []
    for seed in range(3):
        ds, _ = make_dataset(SynthConfig(n_concepts=8, n_items=300, n_users=50, seed=seed))
        cfg = TrainConfig(dim=16, epochs=(0, 0, 5), base_lr=5e-3, n_negatives=32, seed=seed,
                          no_pretrain=True, no_intersection=True, patience=10)
        _, logs = run_pipeline(ds, cfg)
        curves.append(logs[-1].losses)
    mean = np.mean(curves, axis=0)
    assert len(mean) == 5 and np.all(np.diff(mean) < 0)
