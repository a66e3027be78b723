import json
import zlib

import numpy as np
import pytest

from wmdp.bounds import (
    FORMULAS,
    NUMERIC_TOL,
    invariant_measure_perturbation,
    joint_model_noise,
    lipschitz_corollaries,
    noise_bounds,
    quantization_bounds,
    robust_average_minor,
    robust_discounted,
    robust_discounted_all,
    value_continuity_average_minor,
    value_continuity_discounted,
)
from wmdp.instances import GridInstance, perturb_model, random_mdp, random_minorized_mdp
from wmdp.mdp import ModelError
from wmdp.metrics import kernel_d_f, kernel_lipschitz_in_state, kernel_w1, lipschitz_constant, row_w1
from wmdp.solve import (
    find_minorizer,
    policy_evaluation_average,
    policy_evaluation_discounted,
    solve_acoe_minorization,
    solve_discounted,
)


def test_arithmetic_examples():
    assert value_continuity_discounted(0.1, 0.5, d_value=0.2).value == pytest.approx(0.4)
    assert robust_discounted(1, 0.0, 0.5, d_value_ref=0.1).value == pytest.approx(0.4)
    assert value_continuity_average_minor(0.1, 0.2).value == pytest.approx(0.3)
    assert robust_average_minor(0.1, 0.1, 0.0, 0.5).value == pytest.approx(1.0)
    rep = lipschitz_corollaries("discounted", 2, dc=0.0, dw1=0.1, lip_cost=1.0, lip_kernel=0.5, beta=0.5)
    assert rep.value == pytest.approx(0.5333, abs=1e-4)
    assert quantization_bounds(0.1, 1.0, 0.5, beta=0.5).value == pytest.approx(1.0667, abs=1e-4)
    rep = noise_bounds("w1", beta=0.5, w1_noise=0.1, lip_cost=1.0, lip_fx=0.5, lip_fw=1.0)
    assert rep.value == pytest.approx(0.2667, abs=1e-4)


def test_zero_inputs_give_zero():
    reports = [
        value_continuity_discounted(0.0, 0.9, d_value=0.0),
        *robust_discounted_all(0.0, 0.9, 0.0, 0.0),
        value_continuity_average_minor(0.0, 0.0),
        robust_average_minor(0.0, 0.0, 0.0, 0.3),
        lipschitz_corollaries("discounted", 1, dc=0, dw1=0, lip_cost=1, lip_kernel=0.5, beta=0.9),
        lipschitz_corollaries("average-minorized", 2, dc=0, dw1=0, lip_cost=1, lip_kernel=0.5, epsilon=0.2),
        lipschitz_corollaries("vanishing-discount", 1, dc=0, dw1=0, lip_cost=1, lip_kernel=0.5),
        quantization_bounds(0.0, 1.0, 0.5, beta=0.9),
        quantization_bounds(0.0, 1.0, 0.5, epsilon=0.5),
        noise_bounds("discrepancy", beta=0.9, d_value=0.0),
        noise_bounds("w1-average", w1_noise=0.0, lip_cost=1, lip_fx=0.5, lip_fw=1),
        joint_model_noise(0.0, 0.0, 0.9, 2.0),
    ]
    assert all(r.value == 0.0 for r in reports)


def test_recompute_and_serialize():
    rep = lipschitz_corollaries("discounted", 3, dc=0.03, dw1=0.2, lip_cost=1.2, lip_kernel=0.4, beta=0.8,
                                lip_cost_approx=1.1, lip_kernel_approx=0.5)
    assert abs(rep.recompute() - rep.value) <= 1e-12
    assert rep.value == pytest.approx(sum(rep.terms.values()))
    doc = json.loads(json.dumps(rep.to_dict()))
    assert doc["tag"] == rep.tag and doc["inputs"]["beta"] == 0.8


@pytest.mark.parametrize("tag", sorted(FORMULAS))
def test_monotone_in_distance_inputs(tag):
    rng = np.random.default_rng(zlib.crc32(tag.encode()))
    fn = FORMULAS[tag]
    names = fn.__code__.co_varnames[:fn.__code__.co_argcount]
    base = {n: (0.5 if n == "beta" else 0.3 if n == "epsilon" else 0.4 if n.startswith("lip_") else
                float(rng.uniform(0.01, 1))) for n in names}
    value = sum(fn(**base).values())
    for n in names:
        if n in ("beta", "epsilon") or n.startswith("lip_"):
            continue
        bumped = dict(base, **{n: base[n] + 0.05})
        assert sum(fn(**bumped).values()) >= value


def test_invalid_inputs():
    with pytest.raises(ModelError):
        value_continuity_discounted(-0.1, 0.5, d_value=0.1)
    with pytest.raises(ModelError):
        robust_discounted(4, 0.0, 0.5)
    with pytest.raises(ModelError):
        quantization_bounds(0.1, 1.0, 1.5, beta=0.9)
    with pytest.raises(ModelError):
        value_continuity_discounted(0.1, 1.0, d_value=0.1)


def test_holds_and_margin():
    rep = value_continuity_discounted(0.1, 0.5, d_value=0.2, measured=0.39)
    assert rep.holds and rep.margin == pytest.approx(0.01)
    assert not value_continuity_discounted(0.1, 0.5, d_value=0.2, measured=0.41).holds
    assert value_continuity_discounted(0.1, 0.5, d_value=0.2, measured=0.4 + NUMERIC_TOL / 2).holds


def random_pair(k):
    n = 3 + k % 6
    ref = random_mdp(n, 2 + k % 3, seed=k)
    return ref, perturb_model(ref, scale=0.05 + 0.3 * ((k * 7) % 10) / 10, seed=10_000 + k)


def test_discounted_bounds_dominate_random_pairs():
    for k in range(200):
        ref, approx = random_pair(k)
        beta = 0.5 + 0.45 * ((k * 3) % 10) / 10
        sol_ref = solve_discounted(ref, beta, method="policy_iteration")
        sol_app = solve_discounted(approx, beta, method="policy_iteration")
        dc = float(np.abs(ref.cost - approx.cost).max())
        d_ref = kernel_d_f(ref.kernel, approx.kernel, sol_ref.value)
        d_app = kernel_d_f(ref.kernel, approx.kernel, sol_app.value)
        gap = np.abs(sol_ref.value - sol_app.value).max()
        assert value_continuity_discounted(dc, beta, d_value=d_ref, measured=gap).holds
        loss = np.abs(policy_evaluation_discounted(ref, sol_app.policy, beta) - sol_ref.value).max()
        reports = robust_discounted_all(dc, beta, d_ref, d_app, measured=loss)
        assert all(r.holds for r in reports)
        assert sum(bool(r.notes.get("tightest")) for r in reports) == 1


def test_average_bounds_dominate_random_pairs():
    for k in range(100):
        ref = random_minorized_mdp(3 + k % 5, 2, 0.2 + 0.05 * (k % 5), seed=k)
        approx = perturb_model(ref, 0.1 + 0.02 * (k % 7), seed=500 + k)
        m_ref, m_app = find_minorizer(ref), find_minorizer(approx)
        eps = min(m_ref.epsilon, m_app.epsilon)
        sol_ref = solve_acoe_minorization(ref, eps, m_ref.weights, tol=1e-11)
        sol_app = solve_acoe_minorization(approx, eps, m_app.weights, tol=1e-11)
        dc = float(np.abs(ref.cost - approx.cost).max())
        h = sol_ref.relative_value
        d_h = kernel_d_f(ref.kernel, approx.kernel, h)
        assert value_continuity_average_minor(dc, d_h, measured=abs(sol_ref.gain - sol_app.gain)).holds
        gain, _ = policy_evaluation_average(ref, sol_app.policy, eps, m_ref.weights)
        d_rho = abs(float(h @ (m_ref.weights - m_app.weights)))
        assert robust_average_minor(dc, d_h, d_rho, eps, measured=gain - sol_ref.gain).holds


@pytest.mark.parametrize("seed", range(10))
def test_lipschitz_corollaries_on_grid(seed):
    rng = np.random.default_rng(seed)
    ref = GridInstance(n_states=41, n_actions=3, alpha=0.6, epsilon=0.2)
    approx = GridInstance(n_states=41, n_actions=3, alpha=0.6 + rng.uniform(-0.1, 0.1),
                          theta=0.4 + rng.uniform(-0.05, 0.05), epsilon=0.2)
    beta = 0.8
    dc = float(np.abs(ref.model.cost - approx.model.cost).max())
    dw1 = kernel_w1(ref.model.kernel, approx.model.kernel, ref.coords)
    lip_T = kernel_lipschitz_in_state(ref.model)
    lip_c = max(lipschitz_constant(ref.model.cost[:, u], ref.coords) for u in range(3))
    s_ref = solve_discounted(ref.model, beta, method="policy_iteration")
    s_app = solve_discounted(approx.model, beta, method="policy_iteration")
    gap = np.abs(s_ref.value - s_app.value).max()
    loss = np.abs(policy_evaluation_discounted(ref.model, s_app.policy, beta) - s_ref.value).max()
    common = dict(dc=dc, dw1=dw1, lip_cost=lip_c, lip_kernel=lip_T, beta=beta)
    assert lipschitz_corollaries("discounted", 1, measured=gap, **common).holds
    assert lipschitz_corollaries("discounted", 2, measured=loss, **common).holds
    lip_T2 = kernel_lipschitz_in_state(approx.model)
    assert lipschitz_corollaries("discounted", 3, measured=loss, lip_cost_approx=lip_c,
                                 lip_kernel_approx=lip_T2, **common).holds


def test_invariant_measure_examples():
    rng = np.random.default_rng(0)
    coords = np.linspace(0, 1, 5)
    T = rng.dirichlet(np.ones(5), size=5)
    T = 0.5 * T + 0.5 * T.mean(axis=0)
    rep = invariant_measure_perturbation(T, T, coords)
    assert rep.measured == pytest.approx(0.0, abs=1e-12) and rep.value == 0.0
    q, q2 = rng.dirichlet(np.ones(5), size=2)
    rep = invariant_measure_perturbation(np.tile(q, (5, 1)), np.tile(q2, (5, 1)), coords)
    assert rep.measured == pytest.approx(rep.value, abs=1e-9)
    assert rep.value == pytest.approx(float(row_w1(q, q2, coords)), abs=1e-12)


def test_invariant_measure_reducible_and_expanding():
    with pytest.raises(ModelError, match="more than one"):
        invariant_measure_perturbation(np.eye(3), np.eye(3), np.linspace(0, 1, 3))
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ModelError, match="contraction"):
        invariant_measure_perturbation(swap, swap, [0.0, 1.0])


def test_invariant_measure_random_contractive_pairs():
    rng = np.random.default_rng(1)
    coords = np.linspace(0, 1, 8)
    for _ in range(100):
        base = rng.dirichlet(np.ones(8))
        # neighbours are 1/7 apart, so rows within W1 distance 0.1 keep the constant below 0.7
        T = 0.1 * rng.dirichlet(np.ones(8), size=8) + 0.9 * base
        S = 0.8 * T + 0.2 * rng.dirichlet(np.ones(8), size=8)
        assert invariant_measure_perturbation(T, S, coords).holds


def test_joint_terms():
    rep = joint_model_noise(0.01, 0.02, 0.9, 2.0)
    assert rep.terms["rate"] == pytest.approx(2 * 0.9 * 0.01 / 0.1)
    assert rep.terms["drift"] == pytest.approx(2 * 0.9 * 2 * 2.0 * 0.02 / 0.1)
