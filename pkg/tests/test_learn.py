import json

import numpy as np
import pytest

from conftest import cycle_model, single_state
from wmdp.instances import GridInstance, random_mdp, random_minorized_mdp
from wmdp.learn import (
    bad_event_occurred,
    compute_kappas,
    exploration_invariant,
    learn_restart,
    learn_single_trajectory,
    learn_single_trajectory_many,
    learned_policy_loss,
)
from wmdp.mdp import ExplorationPolicy, FiniteMDP, ModelError
from wmdp.quantize import Partition, build_quantized_model, identity_partition, uniform_partition


def iid_env(q, n_actions=2, seed=0):
    n = len(q)
    rng = np.random.default_rng(seed)
    return FiniteMDP(np.linspace(0, 1, n), np.arange(n_actions, dtype=float),
                     np.tile(q, (n, n_actions, 1)), rng.random((n, n_actions)))


def test_single_state_env():
    m = single_state(2.0)
    p = identity_partition(m.coords)
    for algo in (lambda: learn_single_trajectory(m, p, [1.0], 5, seed=0),
                 lambda: learn_restart(m, p, None, 3, seed=0)):
        est = algo()
        assert est.cost.tolist() == [[2.0]]
        assert est.kernel.tolist() == [[[1.0]]]


def test_iid_env_rows_close_in_total_variation():
    q = np.array([0.1, 0.2, 0.3, 0.4])
    env = iid_env(q)
    est = learn_single_trajectory(env, identity_partition(env.coords), ExplorationPolicy.uniform(2), 100_000, 1)
    tv = 0.5 * np.abs(est.kernel - q).sum(axis=2)
    assert tv.max() < 0.02
    assert est.counts.sum() == 100_000


def test_zero_visit_convention():
    # state 2 is never reached from state 0
    K = np.zeros((3, 1, 3))
    K[0, 0, 1] = K[1, 0, 0] = K[2, 0, 2] = 1.0
    env = FiniteMDP([0.0, 0.5, 1.0], [0.0], K, np.array([[1.0], [1.0], [3.0]]))
    est = learn_single_trajectory(env, identity_partition(env.coords), [1.0], 50, seed=0)
    assert est.counts[2, 0] == 0
    assert est.kernel[2, 0].tolist() == [0.0, 0.0, 1.0]
    assert est.cost[2, 0] == 0.0
    assert est.zero_visit_fraction == pytest.approx(1 / 3)


def test_single_trajectory_batch_matches_individual():
    env = random_minorized_mdp(8, 2, 0.2, seed=3)
    p = uniform_partition(env.coords, 4)
    many = learn_single_trajectory_many(env, p, ExplorationPolicy.uniform(2), 3000, [5, 6])
    one = learn_single_trajectory(env, p, ExplorationPolicy.uniform(2), 3000, 6)
    assert np.array_equal(many[1].kernel, one.kernel) and np.array_equal(many[1].cost, one.cost)
    assert not np.array_equal(many[0].kernel, many[1].kernel)


def test_rows_stochastic_costs_bounded():
    env = random_mdp(10, 3, seed=4)
    p = uniform_partition(env.coords, 3)
    for est in (learn_single_trajectory(env, p, ExplorationPolicy.uniform(3), 500, 2),
                learn_restart(env, p, None, 20, 2)):
        assert np.allclose(est.kernel.sum(axis=2), 1.0)
        assert est.cost.min() >= 0 and est.cost.max() <= env.c_max


def test_learn_errors():
    env = random_mdp(4, 2, seed=0)
    p = identity_partition(env.coords)
    with pytest.raises(ModelError):
        learn_single_trajectory(env, p, ExplorationPolicy.uniform(2), 0, 0)
    with pytest.raises(ModelError):
        learn_restart(env, p, None, 0, 0)
    with pytest.raises(ModelError, match="zero weighting mass"):
        learn_restart(env, p, np.array([0.0, 0.5, 0.5, 0.0]), 5, 0)


def test_restart_deterministic_env_exact():
    K = np.zeros((4, 2, 4))
    for x in range(4):
        K[x, 0, (x + 1) % 4] = 1.0
        K[x, 1, x] = 1.0
    env = FiniteMDP(np.linspace(0, 1, 4), [0.0, 1.0], K, np.ones((4, 2)))
    est = learn_restart(env, identity_partition(env.coords), None, 7, seed=3)
    assert np.array_equal(est.kernel, K)
    assert est.n_samples == 4 * 2 * 7 and est.samples_per_cell == 7


def test_restart_single_draw_rows_are_vertices():
    env = random_mdp(9, 2, seed=5)
    est = learn_restart(env, uniform_partition(env.coords, 3), None, 1, seed=1)
    assert np.all(np.isin(est.kernel, [0.0, 1.0]))


def test_restart_cost_concentration():
    for seed in range(5):
        env = random_mdp(12, 2, seed=seed)
        p = uniform_partition(env.coords, 4)
        truth = build_quantized_model(env, p).model
        N0 = 400
        est = learn_restart(env, p, None, N0, seed=seed)
        assert np.abs(est.cost - truth.cost).max() <= 3 * env.c_max / np.sqrt(N0)


def test_restart_unbiased_at_single_draw():
    env = random_mdp(6, 2, seed=7)
    p = uniform_partition(env.coords, 3)
    truth = build_quantized_model(env, p).model.kernel
    R = 2000
    mean = sum(learn_restart(env, p, None, 1, seed=s).kernel for s in range(R)) / R
    band = 3 * np.sqrt(truth * (1 - truth) / R) + 1e-12
    assert np.all(np.abs(mean - truth) <= band)


def test_single_trajectory_converges_to_invariant_weighting():
    q = np.array([0.05, 0.15, 0.3, 0.1, 0.25, 0.15])
    env = iid_env(q, seed=1)
    gamma = ExplorationPolicy([0.3, 0.7])
    assert np.allclose(exploration_invariant(env, gamma), q)
    p = uniform_partition(env.coords, 3)
    truth = build_quantized_model(env, p, q).model
    est = learn_single_trajectory(env, p, gamma, 200_000, seed=2)
    assert np.abs(est.kernel - truth.kernel).max() < 0.01
    assert np.abs(est.cost - truth.cost).max() < 0.01


def test_kappa_examples():
    env = random_mdp(8, 3, seed=1)
    p = uniform_partition(env.coords, 4)
    q = build_quantized_model(env, p)
    assert compute_kappas(q).kappa_pi == pytest.approx(1 / 12)
    flat = FiniteMDP(np.linspace(0, 1, 8), [0.0], np.full((8, 1, 8), 1 / 8), np.zeros((8, 1)))
    assert compute_kappas(build_quantized_model(flat, p)).kappa_T == pytest.approx(1 / 4)
    K = np.array([[[0.2, 0.8, 0.0]], [[0.0, 0.2, 0.8]], [[0.8, 0.0, 0.2]]])
    hand = FiniteMDP([0.0, 0.5, 1.0], [0.0], K, np.zeros((3, 1)))
    k = compute_kappas(build_quantized_model(hand, identity_partition(hand.coords)))
    assert k.kappa_T == pytest.approx(0.2)
    assert k.support.sum() == 6


def test_bad_event():
    env = random_mdp(6, 2, seed=2)
    p = uniform_partition(env.coords, 3)
    q = build_quantized_model(env, p)
    assert not bad_event_occurred(q.model.kernel, q)
    halved = q.model.kernel.copy()
    halved[0, 0] = np.eye(3)[1]
    assert bad_event_occurred(halved, q)
    with pytest.raises(ModelError):
        bad_event_occurred(np.ones((2, 2, 2)), q)


def test_bad_event_frequency_decays():
    env = random_minorized_mdp(8, 2, 0.2, seed=3)
    p = uniform_partition(env.coords, 4)
    q = build_quantized_model(env, p, exploration_invariant(env, ExplorationPolicy.uniform(2)))
    freq = []
    for N in (100, 1000, 10_000, 100_000):
        ests = learn_single_trajectory_many(env, p, ExplorationPolicy.uniform(2), N, range(50))
        freq.append(np.mean([bad_event_occurred(e, q) for e in ests]))
    assert all(a >= b for a, b in zip(freq, freq[1:]))
    assert freq[0] > freq[-1]


def test_estimated_model_json():
    env = random_mdp(6, 2, seed=2)
    p = uniform_partition(env.coords, 2)
    doc = json.loads(learn_restart(env, p, None, 4, seed=9).to_json())
    prov = doc["provenance"]
    assert prov["algorithm"] == "restart" and prov["N0"] == 4 and prov["seed"] == 9
    assert prov["partition"] == p.digest()


def test_loss_identity_partition_exact_model():
    env = random_mdp(7, 3, seed=3)
    p = identity_partition(env.coords)
    loss, _ = learned_policy_loss(env, build_quantized_model(env, p), p, beta=0.9)
    assert loss <= 1e-9


@pytest.mark.parametrize("M", [2, 4, 8, 16])
def test_loss_within_quantization_bound(M):
    inst = GridInstance(n_states=64, n_actions=5, alpha=0.6)
    beta = 0.8
    p = uniform_partition(inst.coords, M)
    loss, rec = learned_policy_loss(inst.model, build_quantized_model(inst.model, p), p, beta=beta)
    bound = 2 * inst.lip_cost * p.delta / ((1 - beta) ** 2 * (1 - beta * inst.lip_kernel))
    assert 0 <= loss <= bound
    assert rec["delta"] == p.delta


def test_average_criterion():
    env = random_minorized_mdp(12, 2, 0.3, seed=6)
    p = uniform_partition(env.coords, 3)
    loss, rec = learned_policy_loss(env, learn_restart(env, p, None, 50, 0), p, criterion="average")
    assert loss >= 0 and rec["solver"] in {"minorized", "near-one-discount"}
    cycle = cycle_model()
    ident = identity_partition(cycle.coords)
    with pytest.raises(ModelError, match="minorized"):
        learned_policy_loss(cycle, build_quantized_model(cycle, ident), ident, criterion="average")


def test_restart_consistency_trend():
    inst = GridInstance(n_states=32, n_actions=3, alpha=0.6)
    p = uniform_partition(inst.coords, 4)
    limit, _ = learned_policy_loss(inst.model, build_quantized_model(inst.model, p), p, beta=0.8)
    gaps = []
    for N0 in (100, 1000, 10_000):
        losses = [learned_policy_loss(inst.model, learn_restart(inst.model, p, None, N0, s), p, beta=0.8)[0]
                  for s in range(20)]
        gaps.append(np.mean(np.abs(np.array(losses) - limit)))
    assert gaps[0] >= gaps[1] >= gaps[2]


def test_partition_mismatch():
    env = random_mdp(4, 2, seed=0)
    p = Partition(np.linspace(0, 1, 5), [0, 0, 1, 1, 1], [0, 3])
    with pytest.raises(ModelError):
        learn_restart(env, p, None, 2, 0)
