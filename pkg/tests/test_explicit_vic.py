import numpy as np
import pytest
from scipy import stats

from intrinsic_control.environments import GridSpec, make_env, reachable_set, tabular_model
from intrinsic_control.exact_empowerment import variational_bound
from intrinsic_control.explicit_vic import (
    ExplicitConfig, InferenceModel, OptionPrior, OptionQFunction, OptionRollout, StateBaseline,
    TabularWorld, baseline_update, bound_for_logits, empowerment_estimate, expected_prior_gradient,
    inference_update, intrinsic_reward, option_channel, option_prediction_map, prior_reinforce,
    q_learning_update, rollout_option, train_explicit,
)


def world(width=5, height=5, noise=0.0, seed=0, kind="standard"):
    return TabularWorld(make_env(GridSpec(kind=kind, width=width, height=height,
                                          push_noise_prob=noise, seed=seed)))


# ---------------------------------------------------------------- rollouts

def test_single_step_option():
    w = world()
    Q = OptionQFunction(w.n_states, 3, 5)
    ro = rollout_option(w, Q, 0, 1.0, 0.0, np.random.default_rng(0), start=7)
    assert len(ro.actions) == 1 and len(ro.states) == 2 and not ro.truncated


def test_uniform_exploration():
    w = world()
    Q = OptionQFunction(w.n_states, 3, 5, weights=np.random.default_rng(0).normal(size=(25, 3, 5)))
    rng = np.random.default_rng(1)
    counts = np.zeros(5)
    while counts.sum() < 100_000:
        ro = rollout_option(w, Q, 1, 0.2, 1.0, rng)
        np.add.at(counts, ro.actions, 1)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_mean_option_length_is_geometric():
    w = world()
    Q = OptionQFunction(w.n_states, 2, 5)
    rng = np.random.default_rng(2)
    lengths = np.array([len(rollout_option(w, Q, 0, 0.05, 1.0, rng).actions) for _ in range(20_000)])
    se = np.sqrt(0.95) / 0.05 / np.sqrt(len(lengths))
    assert abs(lengths.mean() - 20.0) < 3 * se


def test_option_channel_matches_rollouts():
    w = world(4, 4, noise=0.2)
    rng = np.random.default_rng(3)
    Q = OptionQFunction(w.n_states, 2, 5, weights=rng.normal(size=(16, 2, 5)))
    exact = option_channel(w.model, Q, 5, 0.3, 0.2)
    assert np.allclose(exact.sum(axis=1), 1.0)
    n = 100_000
    finals = np.bincount([rollout_option(w, Q, 1, 0.3, 0.2, rng, start=5).final for _ in range(n)],
                         minlength=w.n_states) / n
    assert np.abs(finals - exact[1]).sum() < 0.02


# ---------------------------------------------------------------- rewards

def test_intrinsic_reward_values():
    N = 30
    q = InferenceModel(10, N, condition_on_start=False)
    prior = OptionPrior(10, N)
    assert intrinsic_reward(q, prior, 3, 0, 1) == pytest.approx(0.0, abs=1e-12)
    q.final_weights[1, 3] = 1e6
    assert intrinsic_reward(q, prior, 3, 0, 1) == pytest.approx(np.log(30), abs=1e-9)
    q.final_weights[2, :2] = 5.0
    # two tied options: q = 1/2 -> log 30 + log 0.5
    q.final_weights[2, :] = -np.inf
    q.final_weights[2, :2] = 0.0
    assert intrinsic_reward(q, prior, 0, 0, 2) == pytest.approx(np.log(30) + np.log(0.5), abs=1e-12)


def test_reward_clamp_counts():
    from intrinsic_control.explicit_vic import RewardClamp
    q = InferenceModel(2, 2, condition_on_start=False)
    q.final_weights[0] = [0.0, -1e4]
    clamp = RewardClamp()
    r = intrinsic_reward(q, OptionPrior(2, 2), 1, 0, 0, clamp)
    assert clamp.count == 1 and r == pytest.approx(np.log(1e-30) + np.log(2))


def test_uniform_prior_reward_never_exceeds_log_n():
    rng = np.random.default_rng(0)
    q = InferenceModel(6, 5, final_weights=rng.normal(size=(6, 5)) * 10,
                       start_weights=rng.normal(size=(6, 5)))
    prior = OptionPrior(6, 5)
    for _ in range(500):
        r = intrinsic_reward(q, prior, rng.integers(5), rng.integers(6), rng.integers(6))
        assert r <= np.log(5) + 1e-12


def test_average_reward_equals_variational_bound():
    w = world(4, 4, noise=0.2)
    rng = np.random.default_rng(4)
    N, s0, p_term, eps = 4, 6, 0.25, 0.3
    Q = OptionQFunction(w.n_states, N, 5, weights=rng.normal(size=(16, N, 5)))
    q = InferenceModel(w.n_states, N, final_weights=rng.normal(size=(16, N)),
                       start_weights=rng.normal(size=(16, N)))
    prior = OptionPrior(w.n_states, N, trainable=True, logits=rng.normal(size=(16, N)))
    rewards = []
    for _ in range(20_000):
        opt = prior.sample(s0, rng)
        ro = rollout_option(w, Q, opt, p_term, eps, rng, start=s0)
        rewards.append(intrinsic_reward(q, prior, opt, s0, ro.final))
    rewards = np.array(rewards)
    channel = option_channel(w.model, Q, s0, p_term, eps)
    exact = variational_bound(prior.probs(s0), channel, q.table(s0).T)
    assert abs(rewards.mean() - exact) < 3 * rewards.std() / np.sqrt(len(rewards))


# ---------------------------------------------------------------- Q-learning

def test_terminal_backup_with_unit_rate():
    Q = OptionQFunction(4, 2, 5)
    ro = OptionRollout(states=[0, 1, 2], actions=[3, 1], truncated=False)
    q_learning_update(Q, ro, 1, r_I=2.5, lr=1.0, termination_prob=0.05)
    assert Q.weights[1, 1, 1] == 2.5


def test_zero_rewards_keep_q_zero():
    w = world(3, 3)
    N = 3
    Q = OptionQFunction(w.n_states, N, 5)
    q, prior = InferenceModel(w.n_states, N), OptionPrior(w.n_states, N)
    rng = np.random.default_rng(0)
    for _ in range(50):
        ro = rollout_option(w, Q, rng.integers(N), 0.2, 1.0, rng)
        q_learning_update(Q, ro, 0, 0.0, 0.5, 0.2, q, prior, update_all_options=True)
    assert not Q.weights.any()


def value_iteration(model, rewards, p, sweeps=2000):
    """Q*(s, a) = sum_s' P(s'|s,a) [p R(s') + (1 - p) max_a' Q*(s', a')]."""
    P = model.dense()
    Qv = np.zeros((model.n_states, model.n_actions))
    for _ in range(sweeps):
        Qv = P @ (p * rewards + (1 - p) * Qv.max(axis=1))
    return Qv


def test_expected_backups_match_value_iteration():
    w = world(3, 2)
    S, N, p = w.n_states, 3, 0.2
    rng = np.random.default_rng(5)
    q = InferenceModel(S, N, condition_on_start=False, final_weights=rng.normal(size=(S, N)))
    prior = OptionPrior(S, N)
    Q = OptionQFunction(S, N, 5)
    dense = w.model.dense()
    for _ in range(400):
        for s in range(S):
            for a in range(5):
                s2 = int(np.argmax(dense[s, a]))
                ro = OptionRollout([s, s2], [a], truncated=False)
                # option N-1 absorbs the sampled backup; the others get expected backups
                q_learning_update(Q, ro, N - 1, 0.0, 1.0, p, q, prior, update_all_options=True)
    for opt in range(N - 1):
        R = np.array([np.log(q.probs(0, s)[opt]) + np.log(N) for s in range(S)])
        assert np.allclose(Q.weights[:, opt, :], value_iteration(w.model, R, p), atol=1e-6)


def test_chain_values_decay_geometrically():
    # cell 3 of a 4x2 strip is the only rewarding end state; options walk right
    w = world(4, 2)
    S, p = w.n_states, 0.1
    goal = w.model.index(((3, 0), (), False))
    R = np.where(np.arange(S) == goal, 1.0, 0.0)
    Qv = value_iteration(w.model, R, p)
    for k in range(1, 4):
        s = w.model.index(((3 - k, 0), (), False))
        # reaching the goal takes k moves, the first of them is this action
        assert Qv[s].max() == pytest.approx((1 - p) ** (k - 1), abs=1e-9)


# ---------------------------------------------------------------- inference model

def test_repeated_pair_increases_q():
    q = InferenceModel(4, 5)
    last = 0.2
    for _ in range(100):
        inference_update(q, 2, 0, 3, 0.1)
        now = q.probs(0, 3)[2]
        assert now > last
        last = now


def test_separable_options_learned():
    q = InferenceModel(4, 2, condition_on_start=False)
    for _ in range(300):
        inference_update(q, 0, 0, 1, 0.5)
        inference_update(q, 1, 0, 2, 0.5)
    assert q.probs(0, 1)[0] > 0.99 and q.probs(0, 2)[1] > 0.99


def test_conflicting_labels_give_a_coin():
    q = InferenceModel(2, 2, condition_on_start=False)
    rng = np.random.default_rng(0)
    for label in rng.permutation(np.repeat([0, 1], 2000)):
        inference_update(q, int(label), 0, 1, 0.01)
    assert q.probs(0, 1) == pytest.approx([0.5, 0.5], abs=0.02)


# ---------------------------------------------------------------- prior and baseline

def test_zero_advantage_leaves_prior():
    prior = OptionPrior(3, 4, trainable=True)
    base = StateBaseline(3)
    base.values[1] = 0.7
    prior_reinforce(prior, base, 2, 1, 0.7, 0.5)
    assert not prior.logits.any()
    assert not prior_reinforce(OptionPrior(3, 4), base, 2, 1, 5.0, 0.5)


def test_bandit_prior_converges():
    prior = OptionPrior(1, 2, trainable=True)
    base = StateBaseline(1)
    rng = np.random.default_rng(0)
    for _ in range(5000):
        opt = prior.sample(0, rng)
        r = 1.0 if opt == 0 else 0.0
        prior_reinforce(prior, base, opt, 0, r, 0.1)
        baseline_update(base, 0, r, 0.05)
    assert prior.probs(0)[0] > 0.99


def test_baseline_tracks_constant():
    base = StateBaseline(2)
    assert empowerment_estimate(base, 0) == 0.0
    for _ in range(2000):
        baseline_update(base, 0, 1.7, 0.01)
    assert base(0) == pytest.approx(1.7, abs=1e-3)


@pytest.mark.parametrize("seed", range(5))
def test_baseline_invariance_of_exact_gradient(seed):
    rng = np.random.default_rng(seed)
    N, S = 4, 6
    logits = rng.normal(size=N)
    channel = rng.dirichlet(np.ones(S) * 0.5, size=N)
    log_q = np.log(rng.dirichlet(np.ones(N), size=S).T)
    reference = expected_prior_gradient(logits, channel, log_q, baseline=None)
    for b in [0.0, 1.0, -3.2, 17.0]:
        assert np.allclose(expected_prior_gradient(logits, channel, log_q, b), reference,
                           atol=1e-12, rtol=0)
    h = 1e-6
    fd = np.array([(bound_for_logits(logits + h * e, channel, log_q)
                    - bound_for_logits(logits - h * e, channel, log_q)) / (2 * h) for e in np.eye(N)])
    assert np.allclose(reference, fd, atol=1e-7)


# ---------------------------------------------------------------- read-outs

def test_prediction_map_columns_are_distributions():
    w = world(4, 3)
    q = InferenceModel(w.n_states, 6, final_weights=np.random.default_rng(0).normal(size=(12, 6)))
    grid = option_prediction_map(q, w.model, s0=2)
    assert grid.shape == (6, 3, 4)
    assert np.allclose(grid.sum(axis=0), 1.0)


def test_trained_estimate_respects_reachability_ceiling():
    w = world(5, 5)
    cfg = ExplicitConfig(n_options=25, episodes=12_000, condition_on_start=False)
    agent, logs = train_explicit(w, cfg, np.random.default_rng(0))
    ceiling = np.log(len(reachable_set(w.model, 12, 200)))
    assert ceiling == pytest.approx(np.log(25))
    assert agent.baseline.values.max() <= ceiling + 0.1
    assert np.mean(agent.baseline.values) > 0.5 * ceiling
