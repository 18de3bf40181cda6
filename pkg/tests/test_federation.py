"""Aggregation, gating, and round-protocol tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcert import adversarial as adv, attacks, data, federation as fed, nn
from fedcert.errors import ConfigError, InputError


def upd(cid, vec, mal=False):
    return fed.ClientUpdate(client_id=cid, params=np.asarray(vec, float), is_malicious=mal)


# ---------------------------------------------------------------------------
# median aggregation


def test_median_hand_case():
    out = fed.median_aggregate([upd(0, [1, 1]), upd(1, [2, 5]), upd(2, [3, 2])])
    assert np.array_equal(out, [2, 2])


def test_median_even_count_averages_middles():
    out = fed.median_aggregate([upd(0, [0.0]), upd(1, [1.0]), upd(2, [10.0]), upd(3, [11.0])])
    assert np.array_equal(out, [5.5])


def test_median_rejects_empty_and_mismatched():
    with pytest.raises(InputError):
        fed.median_aggregate([])
    with pytest.raises(InputError):
        fed.median_aggregate([upd(0, [1, 2]), upd(1, [1.0])])
    with pytest.raises(InputError):
        fed.ClientUpdate(client_id=0, params=np.array([np.inf]))


@given(st.integers(0, 500))
@settings(max_examples=30)
def test_median_bounded_by_honest_range_with_minority_outliers(seed):
    rng = np.random.default_rng(seed)
    honest = rng.normal(size=(3, 6))
    evil = rng.choice([-1e9, 1e9], size=(2, 6))
    ups = [upd(i, honest[i]) for i in range(3)]
    ups += [upd(3 + i, evil[i], mal=True) for i in range(2)]
    out = fed.median_aggregate(ups)
    assert np.all(out >= honest.min(axis=0) - 1e-12)
    assert np.all(out <= honest.max(axis=0) + 1e-12)


@given(st.integers(0, 500))
@settings(max_examples=30)
def test_median_majority_identical_captures_exactly(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=5)
    ups = [upd(i, v, mal=True) for i in range(3)]
    ups += [upd(3, rng.normal(size=5)), upd(4, rng.normal(size=5))]
    out = fed.median_aggregate(ups)
    assert np.array_equal(out, v)


# ---------------------------------------------------------------------------
# population and quorum


def test_population_shards_partition_pool():
    pop = fed.build_population(23, 5, 2, seed=1)
    sizes = [len(p) for p in pop.partition]
    assert sizes == [5, 5, 5, 4, 4]
    joined = np.concatenate(pop.partition)
    assert np.array_equal(np.sort(joined), np.arange(23))
    assert pop.num_malicious == 2
    assert all(0 <= c < 5 for c in pop.malicious_ids)


def test_population_deterministic():
    a = fed.build_population(50, 10, 4, seed=7)
    b = fed.build_population(50, 10, 4, seed=7)
    assert a.malicious_ids == b.malicious_ids
    c = fed.build_population(50, 10, 4, seed=8)
    # different seed usually picks a different set; sizes always hold
    assert c.num_malicious == 4


def test_population_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        fed.build_population(10, 0, 0, seed=0)
    with pytest.raises(ConfigError):
        fed.build_population(10, 5, 6, seed=0)
    with pytest.raises(ConfigError):
        fed.build_population(3, 5, 0, seed=0)


def test_sample_quorum_sorted_unique_and_bounded():
    pop = fed.build_population(40, 8, 3, seed=0)
    rng = np.random.default_rng(5)
    q = fed.sample_quorum(pop, 5, rng)
    assert q == sorted(q)
    assert len(set(q)) == 5
    assert all(0 <= c < 8 for c in q)
    with pytest.raises(ConfigError):
        fed.sample_quorum(pop, 9, rng)
    with pytest.raises(ConfigError):
        fed.sample_quorum(pop, 0, rng)


def test_sample_quorum_deterministic_per_seed():
    pop = fed.build_population(40, 8, 3, seed=0)
    a = fed.sample_quorum(pop, 4, np.random.default_rng(42))
    b = fed.sample_quorum(pop, 4, np.random.default_rng(42))
    assert a == b


# ---------------------------------------------------------------------------
# defender gate


def metrics(n=1.0, a=0.9, c=0.5, l=0.2):
    return fed.RoundMetrics(normal_acc=n, adv_acc=a, certified_acc=c, mean_cert_loss=l)


def test_gate_accepts_within_thresholds():
    th = fed.GateThresholds()
    v = fed.defender_gate(metrics(0.95, 0.85, 0.46, 0.21), metrics(), th)
    assert v.accepted and v.reason is None


def test_gate_first_failure_names_reason_in_order():
    th = fed.GateThresholds()
    prev = metrics()
    # everything fails; normal_acc is named first
    v = fed.defender_gate(metrics(0.1, 0.1, 0.0, 50.0), prev, th)
    assert (v.accepted, v.reason) == (False, "normal_acc")
    v = fed.defender_gate(metrics(1.0, 0.1, 0.0, 50.0), prev, th)
    assert v.reason == "adv_acc"
    v = fed.defender_gate(metrics(1.0, 0.9, 0.0, 50.0), prev, th)
    assert v.reason == "certified_acc"
    v = fed.defender_gate(metrics(1.0, 0.9, 0.5, 50.0), prev, th)
    assert v.reason == "cert_loss"


def test_gate_boundary_is_inclusive():
    th = fed.GateThresholds()
    prev = metrics(1.0, 1.0, 1.0, 0.2)
    v = fed.defender_gate(metrics(0.9, 0.9, 0.9, 0.22), prev, th)
    assert v.accepted  # exactly 0.9x accs, exactly +10% loss


def test_gate_cert_loss_band_is_two_sided():
    th = fed.GateThresholds()
    prev = metrics(l=0.2)
    drop = fed.defender_gate(metrics(l=0.17), prev, th)
    assert (drop.accepted, drop.reason) == (False, "cert_loss")
    rise = fed.defender_gate(metrics(l=0.23), prev, th)
    assert (rise.accepted, rise.reason) == (False, "cert_loss")


def test_gate_accuracy_only_mode_ignores_cert_fields():
    th = fed.GateThresholds(use_cert_checks=False)
    cand = fed.RoundMetrics(normal_acc=1.0, adv_acc=0.9)
    prev = fed.RoundMetrics(normal_acc=1.0, adv_acc=0.9)
    assert fed.defender_gate(cand, prev, th).accepted
    # huge cert regression passes the accuracy-only gate
    v = fed.defender_gate(metrics(1.0, 0.9, 0.0, 99.0), metrics(), th)
    assert v.accepted


def test_gate_missing_cert_metrics_is_config_error():
    th = fed.GateThresholds()
    with pytest.raises(ConfigError):
        fed.defender_gate(fed.RoundMetrics(1.0, 0.9), metrics(), th)


def test_gate_zero_previous_loss_accepts_only_zero():
    th = fed.GateThresholds()
    prev = metrics(l=0.0)
    assert fed.defender_gate(metrics(l=0.0), prev, th).accepted
    assert not fed.defender_gate(metrics(l=0.001), prev, th).accepted


# ---------------------------------------------------------------------------
# arming condition


def test_near_convergence_logic():
    plan = fed.AttackPlan(kind="backdoor",
                          backdoor=attacks.BackdoorSpec(trigger_magnitude=0.05),
                          convergence_floor=0.9, convergence_fraction=0.95,
                          convergence_lookback=3)
    assert not fed._near_convergence([], plan)
    assert not fed._near_convergence([0.5, 0.6, 0.7], plan)  # below floor
    assert fed._near_convergence([0.91], plan)
    assert fed._near_convergence([0.90, 0.91, 0.92, 0.93], plan)
    # recent regression: 0.93 < 0.95 * 0.99 relative to the lookback point
    assert not fed._near_convergence([0.99, 0.95, 0.94, 0.93], plan)
    # floor fails even though the ratio holds
    assert not fed._near_convergence([0.85, 0.85, 0.85, 0.85], plan)


def test_attack_plan_validation():
    with pytest.raises(ConfigError):
        fed.AttackPlan(kind="nope")
    with pytest.raises(ConfigError):
        fed.AttackPlan(kind="backdoor")
    with pytest.raises(ConfigError):
        fed.AttackPlan(kind="adaptive",
                       distill=attacks.DistillSpec(
                           temperature=10.0,
                           teacher_cfg=nn.TrainConfig(0.1, 8, 1, rng_seed=0),
                           student_cfg=nn.TrainConfig(0.1, 8, 1, rng_seed=1)))


# ---------------------------------------------------------------------------
# end-to-end mini simulations


def mini_setup(seed=0, per_class=30):
    ds = data.synth_dataset(3, per_class, image_shape=(1, 4, 4), seed=seed)
    splits = data.make_splits(ds, cert_n=8, val_n=12)
    model = nn.make_model("desk_mlp", seed=seed, num_classes=3, input_shape=(1, 4, 4))
    model = nn.train(model, splits.client_pool, nn.TrainConfig(0.3, 32, 6, rng_seed=seed))
    return model, splits


def mini_config(rounds=3, attack=None, **kw):
    return fed.SimulationConfig(
        rounds=rounds,
        quorum_size=3,
        num_clients=6,
        num_malicious=kw.pop("num_malicious", 0),
        local_train=kw.pop("local_train", nn.TrainConfig(0.1, 16, 1, rng_seed=0)),
        local_pgd=adv.PgdConfig(eps=0.05, num_steps=3, rng_seed=0),
        gate=fed.GateThresholds(eps_crt=0.01, eps_adv=0.05),
        master_seed=kw.pop("master_seed", 11),
        warmup_rounds=kw.pop("warmup_rounds", 1),
        attack=attack,
        population_seed=kw.pop("population_seed", 2),
        **kw,
    )


def record_fingerprint(res):
    return [(r.round_index, tuple(r.quorum), r.num_malicious_in_quorum, r.attack_armed,
             r.verdict.accepted, r.verdict.reason, r.model_hash) for r in res.records]


def test_simulation_honest_run_accepts_and_is_deterministic():
    model, splits = mini_setup()
    cfg = mini_config(rounds=3)
    a = fed.run_simulation(model, splits, cfg)
    b = fed.run_simulation(model, splits, cfg)
    assert record_fingerprint(a) == record_fingerprint(b)
    assert np.array_equal(nn.flatten_params(a.final_model), nn.flatten_params(b.final_model))
    assert len(a.records) == 3
    accepted = [r for r in a.records if r.verdict.accepted]
    assert accepted, "honest mini run should accept at least the warmup round"
    assert a.records[0].verdict.reason == "baseline"
    # the final model is the last accepted candidate
    last = max(a.accepted_models)
    assert nn.model_hash(a.accepted_models[last]) == nn.model_hash(a.final_model)


def test_simulation_master_seed_changes_quorums():
    model, splits = mini_setup()
    a = fed.run_simulation(model, splits, mini_config(rounds=3, master_seed=1))
    b = fed.run_simulation(model, splits, mini_config(rounds=3, master_seed=2))
    assert [r.quorum for r in a.records] != [r.quorum for r in b.records]


def test_simulation_requires_cert_set_when_gate_checks_enabled():
    model, splits = mini_setup()
    bare = data.DefenderSplits(cert_set=None, validation=splits.validation,
                               client_pool=splits.client_pool)
    with pytest.raises(ConfigError):
        fed.run_simulation(model, bare, mini_config(rounds=1))


def test_simulation_rejected_rounds_leave_accepted_model_unchanged():
    model, splits = mini_setup(seed=3)
    plan = fed.AttackPlan(kind="backdoor",
                          backdoor=attacks.BackdoorSpec(trigger_magnitude=0.05,
                                                        poison_fraction=0.5),
                          convergence_floor=0.0, convergence_fraction=0.0,
                          convergence_lookback=1)
    cfg = mini_config(rounds=6, attack=plan, num_malicious=4,
                      local_train=nn.TrainConfig(0.1, 16, 2, rng_seed=0))
    res = fed.run_simulation(model, splits, cfg)
    armed = [r for r in res.records if r.attack_armed]
    assert armed, "4 of 6 malicious should reach a quorum majority within 6 rounds"
    # every armed round carried a malicious majority
    assert all(r.num_malicious_in_quorum >= 2 for r in armed)
    # walk the record stream: a rejected round must not change the running model
    current = None
    for r in res.records:
        if r.verdict.accepted:
            current = r.round_index
    assert current is not None
    assert nn.model_hash(res.accepted_models[current]) == nn.model_hash(res.final_model)
    rejected = [r for r in res.records if not r.verdict.accepted]
    for r in rejected:
        assert r.round_index not in res.accepted_models


def test_simulation_warmup_rounds_accepted_unconditionally():
    model, splits = mini_setup()
    cfg = mini_config(rounds=3, warmup_rounds=3)
    res = fed.run_simulation(model, splits, cfg)
    assert all(r.verdict.accepted for r in res.records)
    assert all(r.verdict.reason == "baseline" for r in res.records)


def test_simulation_config_validation():
    with pytest.raises(ConfigError):
        mini_config(rounds=0)
    with pytest.raises(ConfigError):
        mini_config(rounds=1, warmup_rounds=0)
