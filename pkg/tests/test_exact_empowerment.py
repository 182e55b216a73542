import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intrinsic_control.environments import (
    BatchEnv, CapacityError, EnvState, GridSpec, RIGHT, key_to_state, tabular_model,
)
from intrinsic_control.exact_empowerment import (
    Channel, DegenerateBoundWarning, bayes_posterior, blahut_arimoto, compose_open_loop_channel,
    empowerment_map, expected_posterior_kl, grid_to_csv, mutual_information, read_channel,
    variational_bound, write_channel,
)


def random_channel(rng, K, S, sparsity=0.3):
    W = rng.random((K, S)) * (rng.random((K, S)) > sparsity)
    W[np.arange(K), rng.integers(S, size=K)] += 0.1
    return W / W.sum(axis=1, keepdims=True)


def brute_force_capacity(W, grid=2000):
    """Capacity of a 2-input channel by scanning the input weight."""
    best = 0.0
    for t in np.linspace(0, 1, grid + 1):
        best = max(best, mutual_information([t, 1 - t], W))
    return best


# ---------------------------------------------------------------- channels

def test_channel_validation():
    with pytest.raises(ValueError):
        Channel(np.array([[0.5, 0.4]]))
    with pytest.raises(ValueError):
        Channel(np.array([[1.5, -0.5]]))


def test_channel_file_round_trip(tmp_path):
    W = random_channel(np.random.default_rng(0), 4, 6)
    write_channel(tmp_path / "c.txt", W)
    assert np.array_equal(read_channel(tmp_path / "c.txt").matrix, W)


# ---------------------------------------------------------------- information

def test_independent_channel_has_zero_information():
    W = np.tile([0.2, 0.3, 0.5], (4, 1))
    assert mutual_information([0.1, 0.2, 0.3, 0.4], W) == pytest.approx(0.0, abs=1e-15)


def test_identity_channel():
    K = 5
    W = np.eye(K)
    p = np.full(K, 1 / K)
    assert mutual_information(p, W) == pytest.approx(np.log(K), abs=1e-12)
    assert variational_bound(p, W, bayes_posterior(p, W)) == pytest.approx(np.log(K), abs=1e-12)


def test_bound_gap_is_expected_kl():
    rng = np.random.default_rng(1)
    W = random_channel(rng, 4, 6)
    p = rng.dirichlet(np.ones(4))
    q = rng.dirichlet(np.ones(4), size=6).T
    gap = mutual_information(p, W) - variational_bound(p, W, q)
    assert gap >= -1e-12
    assert gap == pytest.approx(expected_posterior_kl(p, W, q), abs=1e-12)


def test_zero_q_gives_minus_inf():
    W = np.eye(2)
    q = np.array([[1.0, 0.0], [0.0, 1.0]])[::-1]
    with pytest.warns(DegenerateBoundWarning):
        assert variational_bound([0.5, 0.5], W, q) == -np.inf


def test_posterior_excludes_unreached_states():
    W = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    post = bayes_posterior([0.5, 0.5], W)
    assert np.isnan(post[:, 2]).all()
    assert np.allclose(post[:, :2], np.eye(2))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 8), S=st.integers(1, 12))
def test_two_forms_agree_and_bound_holds(seed, K, S):
    rng = np.random.default_rng(seed)
    W = random_channel(rng, K, S)
    p = rng.dirichlet(np.ones(K))
    a = mutual_information(p, W, form="posterior")
    b = mutual_information(p, W, form="marginal")
    assert a == pytest.approx(b, abs=1e-12)
    q = rng.dirichlet(np.ones(K), size=S).T
    assert variational_bound(p, W, q) <= a + 1e-12


# ---------------------------------------------------------------- capacity

def test_binary_symmetric_channel():
    f = 0.2
    h2 = -(f * np.log(f) + (1 - f) * np.log(1 - f))
    res = blahut_arimoto(np.array([[1 - f, f], [f, 1 - f]]))
    assert res.capacity == pytest.approx(np.log(2) - h2, abs=1e-6)
    assert res.capacity == pytest.approx(0.19275, abs=1e-5)
    assert res.converged and res.gap_bound < 1e-9


@pytest.mark.parametrize("K", [1, 2, 4, 9])
def test_identity_capacity(K):
    res = blahut_arimoto(np.eye(K))
    assert res.capacity == pytest.approx(np.log(K), abs=1e-9)
    assert np.allclose(res.input_distribution, 1 / K)


def test_duplicated_rows_share_mass():
    W = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    res = blahut_arimoto(W)
    assert res.capacity == pytest.approx(np.log(2), abs=1e-9)
    p = res.input_distribution
    assert p[0] + p[1] == pytest.approx(0.5, abs=1e-9)
    assert p[2] == pytest.approx(0.5, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_two_input_capacity_matches_scan(seed):
    W = random_channel(np.random.default_rng(seed), 2, 5)
    res = blahut_arimoto(W)
    assert res.capacity == pytest.approx(brute_force_capacity(W), abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(2, 8), S=st.integers(2, 10))
def test_capacity_certificates(seed, K, S):
    rng = np.random.default_rng(seed)
    W = random_channel(rng, K, S)
    res = blahut_arimoto(W)
    assert res.converged
    assert res.input_distribution.sum() == pytest.approx(1.0, abs=1e-12)
    assert mutual_information(res.input_distribution, W) >= res.capacity - 1e-9
    assert res.capacity <= np.log(min(K, S)) + 1e-12
    # duplicating a row changes nothing
    dup = np.vstack([W, W[:1]])
    assert blahut_arimoto(dup).capacity == pytest.approx(res.capacity, abs=1e-9)
    # no random input does better than the certified upper bound
    for _ in range(5):
        assert mutual_information(rng.dirichlet(np.ones(K)), W) <= res.capacity + res.gap_bound + 1e-12


def test_unconverged_is_flagged():
    W = random_channel(np.random.default_rng(3), 6, 6)
    with pytest.warns(RuntimeWarning):
        res = blahut_arimoto(W, tol=1e-15, max_iter=3, polish_every=0)
    assert not res.converged


# ---------------------------------------------------------------- composition

def test_t1_is_model_slice():
    model = tabular_model(GridSpec(width=4, height=4, push_noise_prob=0.2))
    ch = compose_open_loop_channel(model, 5, 1)
    assert np.allclose(ch.matrix, model.dense()[5])


def test_deterministic_composition():
    model = tabular_model(GridSpec(width=3, height=3))
    s0 = model.index(((0, 1), (), False))
    ch = compose_open_loop_channel(model, s0, 2)
    row = ch.matrix[RIGHT * 5 + RIGHT]
    assert row[model.index(((2, 1), (), False))] == 1.0


def test_composition_matches_explicit_chain_products():
    model = tabular_model(GridSpec(kind="dangerous", width=4, height=4, corridor_length=2,
                                   push_noise_prob=0.1))
    dense = model.dense()
    ch = compose_open_loop_channel(model, 7, 3)
    for k, seq in enumerate(itertools.product(range(5), repeat=3)):
        dist = np.zeros(model.n_states)
        dist[7] = 1.0
        for a in seq:
            dist = dist @ dense[:, a, :]
        assert np.allclose(ch.matrix[k], dist, atol=1e-14)


def test_composition_matches_monte_carlo():
    spec = GridSpec(kind="dangerous", width=10, height=10)
    model = tabular_model(spec)
    key = ((spec.corridor_length + 5, 5), (), False)
    s0 = model.index(key)
    ch = compose_open_loop_channel(model, s0, 3)
    n = 1_000_000
    rng = np.random.default_rng(0)
    for seq in [(0, 2, 1), (2, 0, 3), (4, 4, 4)]:
        env = BatchEnv(spec, n=n, rng=rng)
        env.reset(states=[key_to_state(spec, key)] * n)
        for a in seq:
            env.step(np.full(n, a))
        idx = np.array([model.index(((int(x), int(y)), (), bool(t)))
                        for (x, y), t in zip(env.agent, env.trapped)])
        emp = np.bincount(idx, minlength=model.n_states) / n
        row = ch.matrix[seq[0] * 25 + seq[1] * 5 + seq[2]]
        assert np.abs(emp - row).sum() < 5e-3


def test_composition_cap():
    model = tabular_model(GridSpec(width=3, height=3))
    with pytest.raises(CapacityError):
        compose_open_loop_channel(model, 0, 7)


# ---------------------------------------------------------------- maps

def test_open_grid_t1_values():
    model = tabular_model(GridSpec(width=5, height=5))
    emp = empowerment_map(model, 1)
    centre = model.index(((2, 2), (), False))
    corner = model.index(((0, 0), (), False))
    assert emp[centre] == pytest.approx(np.log(5), abs=1e-9)
    # corner: two moves plus "stay" (stay, up and left all stay put)
    assert emp[corner] == pytest.approx(np.log(3), abs=1e-9)


def test_map_restricted_states_are_nan_elsewhere():
    model = tabular_model(GridSpec(width=3, height=3))
    emp = empowerment_map(model, 1, states=[0])
    assert not np.isnan(emp[0]) and np.isnan(emp[1:]).all()


def test_grid_csv_blank_for_walls():
    text = grid_to_csv(np.array([[1.0, np.nan], [0.5, 2.0]]))
    assert text == "1,\n0.5,2\n"
