"""Experiment runners: one function per experiment, each mapping (params, seed, size) to result rows.

Every runner is a pure function of its arguments, so rows can be computed in any order
or process and then sorted, which is what makes reruns byte-identical.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from .bounds import (
    BoundReport,
    invariant_measure_perturbation,
    joint_model_noise,
    noise_bounds,
    quantization_bounds,
    robust_average_minor,
    robust_discounted_all,
    value_continuity_discounted,
)
from .instances import GridInstance, lumpable_model, perturb_model, random_mdp, uniform_mixture
from .learn import learn_restart, learn_single_trajectory_many, learned_policy_loss
from .mdp import ExplorationPolicy, FiniteMDP, ModelError
from .metrics import DiscreteMeasure, kernel_d_f, lipschitz_constant
from .noise import (
    DisturbanceSystem,
    NoiseDataset,
    empirical_noise,
    fit_linear_r,
    kernel_from_noise,
    linear_sup_error,
    noise_policy_loss,
    residual_noise_measure,
)
from .quantize import build_quantized_model, uniform_partition
from .rng import make_rng
from .solve import policy_evaluation_average, policy_evaluation_discounted, solve_acoe_minorization, solve_discounted


@dataclass
class Row:
    """One measured quantity next to the bound it is checked against."""

    seed: int
    size: float
    loss: float
    report: BoundReport | None = None
    label: str = ""
    excess: float | None = None
    instance: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def bound(self):
        return None if self.report is None else self.report.value

    @property
    def slack(self):
        """bound + allowance - loss; negative means a violation."""
        return None if self.report is None else self.report.margin

    @property
    def violated(self):
        return self.report is not None and not self.report.holds


def model_hash(model: FiniteMDP) -> str:
    h = hashlib.sha256()
    for a in (model.coords, model.actions, model.kernel, model.cost):
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()[:16]


def _param_hash(params) -> str:
    return hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:16]


def _sup(a):
    return float(np.abs(a).max())


# perturbation experiments on small random models --------------------------------------------

def run_continuity(params, seed, scale):
    ref = random_mdp(params["n_states"], params["n_actions"], seed=seed)
    approx = perturb_model(ref, scale, seed=seed + 1_000_003)
    beta = params["beta"]
    j_ref = solve_discounted(ref, beta, method="policy_iteration").value
    j_app = solve_discounted(approx, beta, method="policy_iteration").value
    dc = _sup(ref.cost - approx.cost)
    rep = value_continuity_discounted(dc, beta, d_value=kernel_d_f(ref.kernel, approx.kernel, j_ref),
                                      measured=_sup(j_ref - j_app))
    return [Row(seed, scale, rep.measured, rep, instance=model_hash(ref),
                extra={"slack_ratio": rep.measured / rep.value if rep.value > 0 else 0.0})]


def run_robustness_discounted(params, seed, scale):
    ref = random_mdp(params["n_states"], params["n_actions"], seed=seed)
    approx = perturb_model(ref, scale, seed=seed + 1_000_003)
    beta = params["beta"]
    sol_ref = solve_discounted(ref, beta, method="policy_iteration")
    sol_app = solve_discounted(approx, beta, method="policy_iteration")
    loss = _sup(policy_evaluation_discounted(ref, sol_app.policy, beta) - sol_ref.value)
    reports = robust_discounted_all(_sup(ref.cost - approx.cost), beta,
                                    kernel_d_f(ref.kernel, approx.kernel, sol_ref.value),
                                    kernel_d_f(ref.kernel, approx.kernel, sol_app.value), measured=loss)
    inst = model_hash(ref)
    return [Row(seed, scale, loss, rep, label=f"variant-{k}", instance=inst,
                extra={"tightest": bool(rep.notes.get("tightest"))})
            for k, rep in enumerate(reports, start=1)]


def run_robustness_average(params, seed, scale):
    eps = params["epsilon"]
    n = params["n_states"]
    base = random_mdp(n, params["n_actions"], seed=seed)
    rho = np.full(n, 1.0 / n)
    tau = (1 - scale) * rho + scale * make_rng(seed + 2_000_003).dirichlet(np.ones(n))
    ref = uniform_mixture(base, eps, rho)
    approx = uniform_mixture(perturb_model(base, scale, seed=seed + 1_000_003), eps, tau)
    sol_ref = solve_acoe_minorization(ref, eps, rho, tol=1e-12, method="policy_iteration")
    sol_app = solve_acoe_minorization(approx, eps, tau, tol=1e-12, method="policy_iteration")
    gain, _ = policy_evaluation_average(ref, sol_app.policy, eps, rho)
    h = sol_ref.relative_value
    rep = robust_average_minor(_sup(ref.cost - approx.cost), kernel_d_f(ref.kernel, approx.kernel, h),
                               abs(float(h @ (rho - tau))), eps, measured=abs(gain - sol_ref.gain))
    return [Row(seed, scale, rep.measured, rep, instance=model_hash(ref))]


def run_invariant_measure(params, seed, scale):
    n = params["n_states"]
    rng = make_rng(seed)
    coords = np.linspace(0.0, 1.0, n)
    base = rng.dirichlet(np.ones(n))
    # rows stay close to a common law, which keeps the W1-Lipschitz constant below one
    T = params["spread"] * rng.dirichlet(np.ones(n), size=n) + (1 - params["spread"]) * base
    S = (1 - scale) * T + scale * rng.dirichlet(np.ones(n), size=n)
    rep = invariant_measure_perturbation(T, S, coords)
    inst = hashlib.sha256(T.tobytes()).hexdigest()[:16]
    return [Row(seed, scale, rep.measured, rep, instance=inst)]


# aggregation and learning -------------------------------------------------------------------

def _grid_instance(params) -> GridInstance:
    return GridInstance(n_states=params["n_states"], n_actions=params["n_actions"], alpha=params["alpha"],
                        epsilon=params.get("epsilon", 0.1))


def run_quantization(params, seed, n_bins):
    inst = _grid_instance(params)
    p = uniform_partition(inst.coords, int(n_bins))
    loss, _ = learned_policy_loss(inst.model, build_quantized_model(inst.model, p), p, beta=params["beta"])
    rep = quantization_bounds(p.delta, inst.lip_cost, inst.lip_kernel, beta=params["beta"], measured=loss)
    return [Row(seed, n_bins, loss, rep, instance=model_hash(inst.model), extra={"delta": p.delta})]


@functools.lru_cache(maxsize=8)
def _learning_env(n_states, n_bins, n_actions, alpha, epsilon, noise_halfwidth):
    """Fine env that is exactly lumpable over ``n_bins`` uniform bins, so the aggregation error is zero."""
    coarse = GridInstance(n_states=n_bins, n_actions=n_actions, alpha=alpha, epsilon=epsilon,
                          noise_halfwidth=noise_halfwidth)
    p = uniform_partition(np.linspace(0.0, 1.0, n_states), n_bins)
    env = lumpable_model(coarse.model, p.labels)
    return env, p


def _learning_rows(params, seed, size, est):
    env, p = _learning_env(params["n_states"], params["n_bins"], params["n_actions"], params["alpha"],
                           params["epsilon"], params["noise_halfwidth"])
    beta = params["beta"]
    loss, rec = learned_policy_loss(env, est, p, beta=beta)
    limit = _learning_limit(params)
    # the estimate spread back onto the fine states is the model whose optimal policy is played
    approx = lumpable_model(est.model, p.labels)
    j_app = solve_discounted(approx, beta, method="policy_iteration").value
    j_ref = rec["optimal_value"]
    reports = robust_discounted_all(_sup(env.cost - approx.cost), beta,
                                    kernel_d_f(env.kernel, approx.kernel, j_ref),
                                    kernel_d_f(env.kernel, approx.kernel, j_app), measured=loss)
    rep = next(r for r in reports if r.notes.get("tightest"))
    return [Row(seed, size, loss, rep, excess=abs(loss - limit), instance=model_hash(env),
                extra={"zero_visit_fraction": est.zero_visit_fraction})]


@functools.lru_cache(maxsize=8)
def _learning_limit_cached(key):
    params = json.loads(key)
    env, p = _learning_env(params["n_states"], params["n_bins"], params["n_actions"], params["alpha"],
                           params["epsilon"], params["noise_halfwidth"])
    loss, _ = learned_policy_loss(env, build_quantized_model(env, p), p, beta=params["beta"])
    return loss


def _learning_limit(params):
    """Loss of the exactly aggregated model, the limit the learned losses approach."""
    return _learning_limit_cached(json.dumps(params, sort_keys=True))


def run_restart_rate(params, seed, n0):
    env, p = _learning_env(params["n_states"], params["n_bins"], params["n_actions"], params["alpha"],
                           params["epsilon"], params["noise_halfwidth"])
    return _learning_rows(params, seed, n0, learn_restart(env, p, None, int(n0), seed))


def run_single_trajectory_rate(params, seeds, n_steps):
    """Rows for several seeds at once; the chains are simulated side by side."""
    env, p = _learning_env(params["n_states"], params["n_bins"], params["n_actions"], params["alpha"],
                           params["epsilon"], params["noise_halfwidth"])
    ests = learn_single_trajectory_many(env, p, ExplorationPolicy.uniform(env.n_actions), int(n_steps), seeds)
    return {seed: _learning_rows(params, seed, n_steps, est) for seed, est in zip(seeds, ests)}


# noise experiments --------------------------------------------------------------------------

def truncated_normal_atoms(sd, cutoff, n_atoms):
    """Quantiles of a centred normal truncated at +-cutoff sd: an equal-weight discretization."""
    return truncnorm.ppf((np.arange(n_atoms) + 0.5) / n_atoms, -cutoff, cutoff, scale=sd)


@dataclass(frozen=True)
class _NoiseSetup:
    system: DisturbanceSystem
    atoms: np.ndarray
    mu: DiscreteMeasure
    grid: np.ndarray
    actions: np.ndarray
    cost: np.ndarray
    lip_cost: float
    true_kernel: np.ndarray


@functools.lru_cache(maxsize=4)
def _noise_setup_cached(key) -> _NoiseSetup:
    params = json.loads(key)
    grid = np.linspace(0.0, 1.0, params["grid"])
    actions = np.asarray(params["actions"], dtype=float)
    system = DisturbanceSystem.linear(params["alpha"], [params["theta"]], 0.0, 1.0, offset=params["offset"])
    atoms = truncated_normal_atoms(params["noise_sd"], params["noise_cutoff"], params["noise_atoms"])
    mu = DiscreteMeasure.uniform(atoms)
    kappa = params["kappa"]
    centre = params["target"]
    cost = np.abs(grid[:, None] - centre) + kappa * actions[None, :] * (grid[:, None] - centre)
    lip_cost = 1.0 + kappa * float(np.abs(actions).max())
    true_kernel = kernel_from_noise(system, mu, grid, actions, "linear")
    return _NoiseSetup(system, atoms, mu, grid, actions, cost, lip_cost, true_kernel)


def _noise_setup(params) -> _NoiseSetup:
    return _noise_setup_cached(json.dumps(params, sort_keys=True))


def run_noise_rate(params, seed, n):
    """Policy from n+1 noise samples (drawn from the discretized true law) played under the true law."""
    s = _noise_setup(params)
    rng = make_rng(seed)
    nu = empirical_noise(s.atoms[rng.integers(0, s.atoms.size, int(n) + 1)])
    beta = params["beta"]
    loss, rec = noise_policy_loss(s.system, s.mu, nu, s.grid, s.actions, s.cost, beta=beta,
                                  projection="linear", true_kernel=s.true_kernel)
    # the mean-preserving projection adds no grid error, so the W1 form needs no slack
    rep = noise_bounds("w1", beta=beta, w1_noise=rec["noise_w1"], lip_cost=s.lip_cost, lip_fx=s.system.lip_x,
                       lip_fw=s.system.lip_w, measured=loss, slack=params.get("grid_slack", 0.0))
    disc = noise_bounds("discrepancy", beta=beta, d_value=rec["d_value_approx"], measured=loss)
    return [Row(seed, n, loss, rep, instance=_param_hash(params),
                extra={"noise_w1": rec["noise_w1"], "discrepancy_bound": disc.value,
                       "discrepancy_holds": bool(disc.holds)})]


def run_joint_model_noise(params, seed, n):
    """OLS drift plus residual noise, versus the truth; the loss is split into noise and drift terms."""
    grid = np.linspace(0.0, 1.0, params["grid"])
    actions = np.asarray(params["actions"], dtype=float)
    alpha, theta, offset = params["alpha"], params["theta"], params["offset"]
    beta = params["beta"]
    atoms = truncated_normal_atoms(params["noise_sd"], params["noise_cutoff"], params["noise_atoms"])
    # the offset is treated as part of the noise, so the true drift has no intercept
    truth = DisturbanceSystem.linear(alpha, [theta], 0.0, 1.0)
    mu = DiscreteMeasure.uniform(atoms + offset)
    rng = make_rng(seed)
    n = int(n)
    X = rng.random(n)
    U = actions[rng.integers(0, actions.size, n)]
    W = offset + atoms[rng.integers(0, atoms.size, n)]
    data = NoiseDataset(alpha * X + theta * U + W, X, U)
    fit = fit_linear_r(data)
    fitted = DisturbanceSystem.linear(float(fit.alpha[0, 0]), [float(fit.theta[0, 0])], 0.0, 1.0)
    noise_hat = residual_noise_measure(data, fit)
    cost = np.abs(grid[:, None] - params["target"]) + params["action_weight"] * actions[None, :] ** 2
    loss, rec = noise_policy_loss(truth, mu, (fitted, noise_hat), grid, actions, cost, beta=beta,
                                  projection="linear")
    r_error = linear_sup_error(fit, alpha, theta, ([0.0], [1.0]), ([actions.min()], [actions.max()]))
    j_hat = rec["value_approx"]
    hidden = empirical_noise(W)
    rate_term = kernel_d_f(kernel_from_noise(truth, mu, grid, actions, "linear"),
                           kernel_from_noise(truth, hidden, grid, actions, "linear"), j_hat)
    rep = joint_model_noise(rate_term, r_error, beta, lipschitz_constant(j_hat, grid), measured=loss)
    return [Row(seed, n, loss, rep, instance=_param_hash(params),
                extra={"r_error": r_error, "alpha_hat": float(fit.alpha[0, 0]),
                       "theta_hat": float(fit.theta[0, 0]), "intercept": float(fit.intercept[0])})]


@dataclass(frozen=True)
class ExperimentSpec:
    runner: object
    defaults: dict
    size_name: str
    rate_on: str | None = None  # column whose seed-mean is fitted against size
    monotone: bool = False  # loss must not increase along the schedule
    batched: bool = False  # runner takes a list of seeds and returns {seed: rows}


EXPERIMENTS = {
    "continuity": ExperimentSpec(run_continuity, {"n_states": 6, "n_actions": 3, "beta": 0.9}, "scale"),
    "robustness-discounted": ExperimentSpec(
        run_robustness_discounted, {"n_states": 6, "n_actions": 3, "beta": 0.9}, "scale"),
    "robustness-average": ExperimentSpec(
        run_robustness_average, {"n_states": 6, "n_actions": 3, "epsilon": 0.3}, "scale"),
    "quantization-rate": ExperimentSpec(
        run_quantization, {"n_states": 256, "n_actions": 9, "alpha": 0.8, "epsilon": 0.1, "beta": 0.9}, "M",
        monotone=True),
    "restart-rate": ExperimentSpec(
        run_restart_rate, {"n_states": 64, "n_bins": 8, "n_actions": 21, "alpha": 0.8, "epsilon": 0.1,
                           "noise_halfwidth": 0.2, "beta": 0.9}, "N0", rate_on="excess"),
    "single-trajectory-rate": ExperimentSpec(
        run_single_trajectory_rate, {"n_states": 64, "n_bins": 8, "n_actions": 21, "alpha": 0.8,
                                     "epsilon": 0.1, "noise_halfwidth": 0.2, "beta": 0.9}, "N",
        rate_on="excess", batched=True),
    "noise-empirical-rate": ExperimentSpec(
        run_noise_rate, {"grid": 1201, "actions": [-1.0, 1.0], "alpha": 0.0, "theta": 0.45, "offset": 0.503,
                         "noise_sd": 0.1, "noise_cutoff": 2.5, "noise_atoms": 2001, "kappa": 0.033,
                         "target": 0.5, "beta": 0.9, "grid_slack": 0.0}, "n", rate_on="loss"),
    "joint-model-noise": ExperimentSpec(
        run_joint_model_noise, {"grid": 201, "actions": [-1.0, 0.0, 1.0], "alpha": 0.5, "theta": 0.3,
                                "offset": 0.25, "noise_sd": 0.05, "noise_cutoff": 2.5, "noise_atoms": 201,
                                "target": 0.5, "action_weight": 0.1, "beta": 0.9}, "n", rate_on="r_error"),
    "invariant-measure": ExperimentSpec(
        run_invariant_measure, {"n_states": 8, "spread": 0.1}, "scale"),
}


def resolve_params(name, overrides):
    if name not in EXPERIMENTS:
        raise ModelError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    spec = EXPERIMENTS[name]
    unknown = set(overrides) - set(spec.defaults)
    if unknown:
        raise ModelError(f"unknown parameter(s) for {name}: {sorted(unknown)}")
    return {**spec.defaults, **overrides}


def run_cells(name, params, seeds, size):
    """Rows for every seed in ``seeds`` at one schedule point, as ``{seed: rows}``.

    Each seed's rows do not depend on which other seeds share the call.
    """
    spec = EXPERIMENTS[name]
    seeds = [int(s) for s in seeds]
    if spec.batched:
        return spec.runner(params, seeds, size)
    return {seed: spec.runner(params, seed, size) for seed in seeds}


def run_cell(name, params, seed, size):
    """All rows for one (seed, size) cell."""
    return run_cells(name, params, [seed], size)[int(seed)]
