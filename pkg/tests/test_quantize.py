import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wmdp.instances import GridInstance, random_mdp, random_minorized_mdp
from wmdp.mdp import FiniteMDP, ModelError
from wmdp.metrics import DiscreteMeasure, kernel_lipschitz_in_state, kernel_w1, lipschitz_constant, w1_exact
from wmdp.quantize import (
    Partition,
    build_quantized_model,
    extend_kernel_averaged,
    extend_kernel_on_reps,
    extend_policy,
    extend_values,
    identity_partition,
    quantize_minorizer,
    uniform_partition,
)
from wmdp.solve import find_minorizer


def single_bin(coords):
    coords = np.asarray(coords, dtype=float)
    return Partition(coords, np.zeros(len(coords), dtype=int), [len(coords) // 2])


def test_five_point_grid_two_bins():
    coords = np.array([0, 0.25, 0.5, 0.75, 1.0])
    p = uniform_partition(coords, 2)
    assert p.labels.tolist() == [0, 0, 1, 1, 1]
    assert p.delta <= 0.5 + 0.25
    assert p.labels[p.representatives].tolist() == [0, 1]


def test_representative_nearest_centre_low_index():
    coords = np.linspace(0, 1, 9)
    p = uniform_partition(coords, 4)
    # bin 0 = {0, 0.125}, centre 0.125
    assert p.representatives[0] == 1
    # bin 1 = {0.25, 0.375}, centre 0.375
    assert p.representatives[1] == 3


def test_empty_bin_named():
    with pytest.raises(ModelError, match="bin 1"):
        uniform_partition(np.array([0.0, 0.1, 0.9]), 3)


def test_coords_outside_cube():
    with pytest.raises(ModelError):
        uniform_partition(np.array([0.0, 1.5]), 2)


def test_partition_invariants():
    with pytest.raises(ModelError):
        Partition([0.0, 1.0], [0, 1], [1, 0])
    with pytest.raises(ModelError):
        Partition([0.0, 1.0], [0, 0], [0, 1])


def test_identity_partition_on_grid():
    coords = np.linspace(0, 1, 6)
    p = uniform_partition(coords, 6)
    assert p.delta == 0.0
    assert p.labels.tolist() == list(range(6))
    m = random_mdp(6, 2, seed=1)
    q = build_quantized_model(m, p).model
    assert np.allclose(q.kernel, m.kernel) and np.allclose(q.cost, m.cost)


def test_doubling_halves_delta():
    coords = np.linspace(0, 1, 257)
    for m in (2, 4, 8, 16, 32):
        a, b = uniform_partition(coords, m), uniform_partition(coords, 2 * m)
        assert b.delta == pytest.approx(a.delta / 2, abs=1 / 256)


def test_2d_partition_delta_bound():
    g = np.linspace(0, 1, 9)
    coords = np.array([(x, y) for x in g for y in g])
    p = uniform_partition(coords, 4)
    assert p.n_bins == 16
    assert p.delta <= np.sqrt(2) / 4 + np.sqrt(2) / 8 + 1e-12


def test_partition_json_round_trip():
    coords = np.linspace(0, 1, 10)
    p = uniform_partition(coords, 3)
    back = Partition.from_dict(json.loads(p.to_json()), coords)
    assert np.array_equal(back.labels, p.labels) and back.delta == p.delta
    assert back.digest() == p.digest()


def test_single_bin_aggregation():
    m = random_mdp(5, 2, seed=2)
    q = build_quantized_model(m, single_bin(m.coords)).model
    assert q.n_states == 1
    assert np.allclose(q.kernel, 1.0)
    assert np.allclose(q.cost[0], m.cost.mean(axis=0))


def test_hand_computed_bin_averages():
    K = np.array([
        [[0.5, 0.5, 0.0, 0.0]],
        [[0.0, 0.0, 1.0, 0.0]],
        [[0.25, 0.25, 0.25, 0.25]],
        [[0.0, 0.0, 0.0, 1.0]],
    ])
    cost = np.array([[1.0], [3.0], [0.0], [2.0]])
    m = FiniteMDP([0.0, 0.3, 0.6, 1.0], [0.0], K, cost)
    q = build_quantized_model(m, uniform_partition(m.coords, 2)).model
    assert np.allclose(q.cost[:, 0], [2.0, 1.0])
    assert np.allclose(q.kernel[0, 0], [0.5, 0.5])
    assert np.allclose(q.kernel[1, 0], [0.25, 0.75])


def test_weighted_aggregation_and_zero_mass():
    m = random_mdp(4, 1, seed=3)
    p = uniform_partition(m.coords, 2)
    w = np.array([0.0, 0.5, 0.25, 0.25])
    q = build_quantized_model(m, p, w).model
    assert np.allclose(q.cost[0], m.cost[1])
    with pytest.raises(ModelError, match="zero weighting mass"):
        build_quantized_model(m, p, np.array([0.0, 0.0, 0.5, 0.5]))


def test_extend_values():
    coords = np.linspace(0, 1, 7)
    assert extend_values(np.arange(7.0), identity_partition(coords)).tolist() == list(range(7))
    assert np.all(extend_values([4.2], single_bin(coords)) == 4.2)
    p = uniform_partition(coords, 3)
    assert extend_policy([2, 0, 1], p).tolist() == [2, 2, 0, 0, 1, 1, 1]
    with pytest.raises(ModelError):
        extend_values([1.0, 2.0], p)


@pytest.mark.parametrize("M", [2, 4, 8, 16])
def test_cost_extension_error(M):
    inst = GridInstance(n_states=65, n_actions=3, alpha=0.7)
    p = uniform_partition(inst.coords, M)
    q = build_quantized_model(inst.model, p).model
    err = np.abs(inst.model.cost - q.cost[p.labels]).max()
    assert err <= inst.lip_cost * p.delta + 1e-12


@pytest.mark.parametrize("M", [2, 4, 8, 16])
def test_kernel_extensions_error(M):
    inst = GridInstance(n_states=65, n_actions=3, alpha=0.7)
    lip = kernel_lipschitz_in_state(inst.model)
    p = uniform_partition(inst.coords, M)
    q = build_quantized_model(inst.model, p).model
    ext1 = extend_kernel_averaged(inst.model, p)
    ext2 = extend_kernel_on_reps(q.kernel, p)
    assert kernel_w1(inst.model.kernel, ext1, inst.coords) <= lip * p.delta + 1e-9
    assert kernel_w1(inst.model.kernel, ext2, inst.coords) <= (1 + lip) * p.delta + 1e-9


def test_function_extension_error():
    coords = np.linspace(0, 1, 101)
    f = np.sin(3 * coords)
    p = uniform_partition(coords, 7)
    approx = extend_values(f[p.representatives], p)
    assert np.abs(approx - f).max() <= lipschitz_constant(f, coords) * p.delta + 1e-12


def test_extension_two_identity_and_single_bin():
    m = random_mdp(5, 2, seed=4)
    assert np.allclose(extend_kernel_on_reps(m.kernel, identity_partition(m.coords)), m.kernel)
    p = single_bin(m.coords)
    ext = extend_kernel_on_reps(np.ones((1, 2, 1)), p)
    assert np.all(ext[:, :, p.representatives[0]] == 1.0)
    assert ext.sum() == 5 * 2


def test_extension_two_keeps_minorization():
    fine = random_minorized_mdp(12, 2, 0.3, seed=5)
    p = uniform_partition(fine.coords, 4)
    q = build_quantized_model(fine, p).model
    minor = find_minorizer(q)
    ext = extend_kernel_on_reps(q.kernel, p)
    tau = np.zeros(12)
    tau[p.representatives] = minor.weights
    assert np.all(ext >= minor.epsilon * tau - 1e-15)


def test_quantize_minorizer():
    coords = np.linspace(0, 1, 4)
    rho = DiscreteMeasure.uniform(coords)
    p = uniform_partition(coords, 2)
    tau = quantize_minorizer(rho, p)
    assert np.allclose(tau.weights, [0.5, 0.5])
    assert w1_exact(rho, tau) <= p.delta + 1e-12
    ident = quantize_minorizer(rho, identity_partition(coords))
    assert np.allclose(ident.weights, rho.weights)
    one = quantize_minorizer(rho, single_bin(coords))
    assert one.weights.tolist() == [1.0]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(1, 8), st.integers(0, 1000))
def test_quantized_rows_stochastic(n, M, seed):
    M = min(M, n)
    coords = np.linspace(0, 1, n)
    try:
        p = uniform_partition(coords, M)
    except ModelError:
        return
    q = build_quantized_model(random_mdp(n, 2, seed=seed), p).model
    assert np.allclose(q.kernel.sum(axis=2), 1.0)
    assert set(np.unique(p.labels)) == set(range(p.n_bins))
