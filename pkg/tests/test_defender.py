import logging

import numpy as np
import pytest

from rtslab import diffnum as dn
from rtslab.agent import AgentConfig, Policy
from rtslab.backdoor import Trigger, apply_trigger
from rtslab.defender import (ContractError, Defender, DefenderTrainConfig, DynamicsModel,
                             RolloutDataset, calibrate_threshold, collect_rollouts, detect,
                             guard_step, load_defender, normalization_stats, predict, residuals,
                             save_defender, train_defender)
from rtslab.diffnum import Mlp
from rtslab.envs import make_env


def random_policy(env, seed=0):
    return Policy.init(env.spec, AgentConfig(), np.random.default_rng(seed))


@pytest.fixture(scope="module")
def linear_setup():
    env = make_env("linear", max_episode_steps=20)
    pol = random_policy(env)
    # exploration noise on every step so the model sees a spread of actions
    ds = collect_rollouts(pol, env, 6000, noise_prob=1.0, noise_std=0.5, seed=1)
    train, hold = ds.split(0.1, seed=0)
    model = train_defender(train, "single", config=DefenderTrainConfig(epochs=30, lr=3e-4, seed=0))
    return env, pol, train, hold, model


def test_noiseless_rollouts_chain_exactly():
    env = make_env("cartpole-continuous")
    pol = random_policy(env)
    ds = collect_rollouts(pol, env, 500, noise_prob=0.0, seed=3)
    for i in range(len(ds)):
        assert np.array_equal(ds.states[i], env.true_transition(ds.prev_states[i], ds.prev_actions[i]))
        if i + 1 < len(ds) and ds.episode[i + 1] == ds.episode[i]:
            assert np.array_equal(ds.states[i], ds.prev_states[i + 1])
            assert np.array_equal(ds.actions[i], ds.prev_actions[i + 1])
    # batched and per-row float32 forwards may differ in the last bits
    np.testing.assert_allclose(ds.actions, pol.act(ds.states), rtol=0, atol=1e-6)


def test_noise_count_is_binomial():
    env = make_env("cartpole-continuous")
    ds = collect_rollouts(random_policy(env), env, 10_000, noise_prob=0.01, seed=0)
    sigma = np.sqrt(10_000 * 0.01 * 0.99)
    assert abs(int(ds.noised.sum()) - 100) <= 3 * sigma


def test_recorded_action_is_noiseless_even_after_noise():
    env = make_env("pendulum-swingup")
    pol = random_policy(env)
    ds = collect_rollouts(pol, env, 400, noise_prob=0.5, seed=0)
    np.testing.assert_allclose(ds.actions, pol.act(ds.states), rtol=0, atol=1e-6)
    assert not np.allclose(ds.prev_actions[ds.noised], pol.act(ds.prev_states[ds.noised]))


def test_dataset_roundtrip(tmp_path):
    env = make_env("linear")
    ds = collect_rollouts(random_policy(env), env, 300, seed=0)
    ds.save(tmp_path / "d.npz")
    back = RolloutDataset.load(tmp_path / "d.npz")
    assert back.digest() == ds.digest()
    (tmp_path / "bad.npz").write_bytes((tmp_path / "d.npz").read_bytes()[:200])
    with pytest.raises(dn.CheckpointError):
        RolloutDataset.load(tmp_path / "bad.npz")


def test_single_mode_fits_linear_system(linear_setup):
    env, _, _, hold, model = linear_setup
    truth = np.array([env.true_transition(s, a) for s, a in zip(hold.prev_states, hold.prev_actions)])
    err = np.linalg.norm(predict(model, hold.prev_states, hold.prev_actions) - truth, axis=1)
    assert err.mean() < 1e-2


def test_predict_is_deterministic_and_shaped(linear_setup):
    _, _, _, hold, model = linear_setup
    a = predict(model, hold.prev_states[:5], hold.prev_actions[:5])
    assert a.shape == (5, 2) and np.array_equal(a, predict(model, hold.prev_states[:5], hold.prev_actions[:5]))


def test_untrained_model_is_finite():
    S, A = 4, 1
    net = Mlp.init([S + A, 256, 256, S], np.random.default_rng(0))
    m = DynamicsModel(net, "single", 1.0, np.zeros(S), np.ones(S), np.zeros(A), np.ones(A))
    assert np.isfinite(predict(m, np.ones((3, S)) * 50, np.ones((3, A)))).all()


def test_model_shape_is_enforced():
    net = Mlp.init([5, 64, 4], np.random.default_rng(0))
    with pytest.raises(ValueError, match="256"):
        DynamicsModel(net, "single", 1.0, np.zeros(4), np.ones(4), np.zeros(1), np.ones(1))


def test_dual_mode_needs_policy(linear_setup):
    _, _, train, _, _ = linear_setup
    with pytest.raises(ContractError):
        train_defender(train, "dual", frozen_policy=None)
    with pytest.raises(ContractError):
        train_defender(train.subset(np.zeros(0, dtype=int)), "single")


def test_dual_training_leaves_policy_untouched(linear_setup):
    _, pol, train, _, _ = linear_setup
    before = [p.data.copy() for p in pol.actor.params]
    train_defender(train.subset(np.arange(500)), "dual", 1.0, pol, DefenderTrainConfig(epochs=1))
    assert all(np.array_equal(b, p.data) for b, p in zip(before, pol.actor.params))


def test_detect_exact_prediction_is_clean(linear_setup):
    _, _, _, hold, model = linear_setup
    s, a = hold.prev_states[0], hold.prev_actions[0]
    flag, r = detect(model, s, a, predict(model, s, a), H=1e-9)
    assert r == 0.0 and not flag


def test_calibration_properties(linear_setup, caplog):
    _, _, _, hold, model = linear_setup
    r = residuals(model, hold.prev_states, hold.prev_actions, hold.states)
    h_max = calibrate_threshold(model, hold, 1.0)
    assert h_max == r.max() and not np.any(r > h_max)
    hs = [calibrate_threshold(model, hold, q) for q in (0.6, 0.9, 0.99, 0.999, 1.0)]
    assert hs == sorted(hs)
    assert "only 600" in caplog.text or len(hold) >= 1000


def test_quantile_exceedance_count():
    # order-statistics oracle on a synthetic residual distribution
    r = np.random.default_rng(0).exponential(size=10_000)
    H = np.quantile(r, 0.999)
    assert 8 <= int(np.sum(r > H)) <= 11


def test_guard_passthrough_and_recovery(linear_setup):
    _, pol, _, hold, model = linear_setup
    s, a = hold.prev_states[0], hold.prev_actions[0]
    clean = hold.states[0]
    g = guard_step(model, 1e6, s, a, clean)
    assert g.state is clean and not g.flagged
    trig = Trigger.single_dim(2, 0, 30.0)
    bad = apply_trigger(trig, clean)
    g = guard_step(model, 0.05, s, a, bad)
    assert g.flagged and np.array_equal(g.state, predict(model, s, a))
    assert np.linalg.norm(pol.act(g.state) - pol.act(bad)) > 0


def test_consecutive_recoveries_chain(linear_setup):
    _, _, _, hold, model = linear_setup
    d = Defender(model, 0.05)
    s0, a0, a1 = hold.prev_states[0], hold.prev_actions[0], np.array([0.3])
    trig = Trigger.single_dim(2, 1, -40.0)
    g1 = d.guard(s0, a0, apply_trigger(trig, hold.states[0]))
    g2 = d.guard(g1.state, a1, apply_trigger(trig, hold.states[0]))
    assert g1.flagged and g2.flagged
    np.testing.assert_array_equal(g2.state, predict(model, predict(model, s0, a0), a1))


def test_action_detector_needs_policy(linear_setup):
    _, pol, _, hold, model = linear_setup
    with pytest.raises(ContractError):
        guard_step(model, 1.0, hold.prev_states[0], hold.prev_actions[0], hold.states[0], detector="action")
    g = guard_step(model, 1e9, hold.prev_states[0], hold.prev_actions[0], hold.states[0], pol, "action")
    assert not g.flagged


def test_defender_checkpoint_roundtrip(tmp_path, linear_setup):
    _, _, _, hold, model = linear_setup
    save_defender(model, tmp_path / "m.npz", threshold=0.125)
    back, meta = load_defender(tmp_path / "m.npz")
    assert meta["threshold"] == 0.125 and back.mode == "single"
    assert np.array_equal(predict(back, hold.prev_states, hold.prev_actions),
                          predict(model, hold.prev_states, hold.prev_actions))


def test_normalization_stats_are_shared_when_passed(linear_setup):
    _, pol, train, _, _ = linear_setup
    stats = normalization_stats(train)
    small = train.subset(np.arange(300))
    cfg = DefenderTrainConfig(epochs=1)
    a = train_defender(small, "single", config=cfg, stats=stats)
    b = train_defender(small, "dual", 1.0, pol, cfg, stats)
    for k in stats:
        assert np.array_equal(getattr(a, k), getattr(b, k))
