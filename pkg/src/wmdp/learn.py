"""Estimating the aggregated model from data, and measuring what the learned policy costs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mdp import ExplorationPolicy, FiniteMDP, ModelError, _iter_chains
from .quantize import Partition, QuantizedModel, _state_weights, extend_policy
from .rng import BIT_GENERATOR, STREAM_VERSION, make_rng
from .solve import (
    find_minorizer,
    policy_evaluation_average,
    policy_evaluation_discounted,
    solve_acoe_minorization,
    solve_discounted,
)


@dataclass(frozen=True, eq=False)
class EstimatedModel:
    """Empirical kernel and cost on bin representatives, with the counts behind them."""

    kernel: np.ndarray
    cost: np.ndarray
    counts: np.ndarray
    n_samples: int
    seed: int
    algorithm: str
    partition: Partition
    actions: np.ndarray
    c_max: float
    samples_per_cell: int | None = None

    @property
    def model(self) -> FiniteMDP:
        p = self.partition
        return FiniteMDP(p.coords[p.representatives], self.actions, self.kernel, self.cost, self.c_max)

    @property
    def zero_visit_fraction(self):
        return float(np.mean(self.counts == 0))

    def to_dict(self):
        doc = self.model.to_dict()
        doc["provenance"] = {
            "algorithm": self.algorithm,
            "N": int(self.n_samples),
            "N0": self.samples_per_cell,
            "seed": int(self.seed),
            "partition": self.partition.digest(),
            "rng": f"{BIT_GENERATOR}/v{STREAM_VERSION}",
        }
        doc["counts"] = self.counts.tolist()
        return doc

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _finish(trans, cost_sum, counts):
    """Turn raw tallies into estimators, applying the zero-visit convention."""
    M = counts.shape[0]
    seen = counts > 0
    safe = np.where(seen, counts, 1)
    kernel = trans / safe[:, :, None]
    cost = np.where(seen, cost_sum / safe, 0.0)
    self_loop = np.broadcast_to(np.eye(M)[:, None, :], kernel.shape)
    kernel = np.where(seen[:, :, None], kernel, self_loop)
    return kernel, cost


def learn_single_trajectory_many(env: FiniteMDP, p: Partition, gamma, N: int, seeds,
                                 x0: int = 0) -> list[EstimatedModel]:
    """One independent N-step exploration run per seed, simulated side by side.

    Each result equals ``learn_single_trajectory(env, p, gamma, N, seed, x0)``.
    """
    if N < 1:
        raise ModelError("N must be at least 1")
    if p.n_fine != env.n_states:
        raise ModelError("partition and environment disagree on the number of states")
    if not isinstance(gamma, ExplorationPolicy):
        gamma = ExplorationPolicy(gamma)
    seeds = [int(s) for s in seeds]
    R, M, m = len(seeds), p.n_bins, env.n_actions
    trans = np.zeros((R, M, m, M))
    cost_sum = np.zeros((R, M, m))
    reps = np.arange(R)[:, None]
    for states, actions in _iter_chains(env, gamma, x0, N, seeds):
        x, y = states[:, :-1], states[:, 1:]
        bx, by = p.labels[x], p.labels[y]
        rr = np.broadcast_to(reps, bx.shape)
        np.add.at(trans, (rr, bx, actions, by), 1.0)
        np.add.at(cost_sum, (rr, bx, actions), env.cost[x, actions])
    out = []
    for r, seed in enumerate(seeds):
        counts = trans[r].sum(axis=2)
        kernel, cost = _finish(trans[r], cost_sum[r], counts)
        out.append(EstimatedModel(kernel, cost, counts.astype(int), N, seed, "single-trajectory", p,
                                  env.actions, env.c_max))
    return out


def learn_single_trajectory(env: FiniteMDP, p: Partition, gamma: ExplorationPolicy, N: int, seed: int,
                            x0: int = 0) -> EstimatedModel:
    """Tally bin-to-bin transitions along one N-step path explored with ``gamma``.

    Cells never visited get cost 0 and a self-loop row.
    """
    return learn_single_trajectory_many(env, p, gamma, N, [seed], x0)[0]


def learn_restart(env: FiniteMDP, p: Partition, pi, N0: int, seed: int) -> EstimatedModel:
    """N0 independent (X, Y) draws per (bin, action): X from pi restricted to the bin, Y ~ T(.|X, u)."""
    if N0 < 1:
        raise ModelError("N0 must be at least 1")
    if p.n_fine != env.n_states:
        raise ModelError("partition and environment disagree on the number of states")
    w = _state_weights(env.coords, pi)
    M, m = p.n_bins, env.n_actions
    bin_mass = np.bincount(p.labels, weights=w, minlength=M)
    if np.any(bin_mass <= 0):
        raise ModelError(f"bin {int(np.argmin(bin_mass))} has zero weighting mass")
    # only the bin of Y is recorded, so sample it from T(B_j | x, u) directly
    to_bins = np.cumsum(env.kernel @ p.membership(), axis=2)
    to_bins[..., -1] = 1.0
    rng = make_rng(seed)
    trans = np.zeros((M, m, M))
    cost_sum = np.zeros((M, m))
    for i in range(M):
        members = np.nonzero(p.labels == i)[0]
        cdf = np.cumsum(w[members] / bin_mass[i])
        cdf[-1] = 1.0
        for u in range(m):
            xs = members[np.minimum(np.searchsorted(cdf, rng.random(N0), side="right"), members.size - 1)]
            rows = to_bins[xs, u]
            ys = np.minimum((rows <= rng.random(N0)[:, None]).sum(axis=1), M - 1)
            trans[i, u] = np.bincount(ys, minlength=M)
            cost_sum[i, u] = env.cost[xs, u].sum()
    counts = np.full((M, m), N0)
    kernel, cost = _finish(trans, cost_sum, counts)
    return EstimatedModel(kernel, cost, counts, M * m * N0, seed, "restart", p, env.actions,
                          env.c_max, samples_per_cell=N0)


@dataclass(frozen=True)
class LearnabilityConstants:
    kappa_pi: float
    kappa_T: float
    support: np.ndarray = field(repr=False, compare=False)  # mask of positive aggregated-kernel entries


def compute_kappas(quantized: QuantizedModel, gamma=None, pi=None) -> LearnabilityConstants:
    """Smallest bin-action mass gamma_u * pi(B_i) and smallest positive aggregated-kernel entry."""
    p = quantized.partition
    w = quantized.weights if pi is None else _state_weights(p.coords, pi)
    m = quantized.model.n_actions
    if gamma is None:
        gamma = ExplorationPolicy.uniform(m)
    elif not isinstance(gamma, ExplorationPolicy):
        gamma = ExplorationPolicy(gamma)
    bin_mass = np.bincount(p.labels, weights=w, minlength=p.n_bins)
    kappa_pi = float(np.min(np.outer(bin_mass, gamma.probs)))
    K = quantized.model.kernel
    support = K > 0
    return LearnabilityConstants(kappa_pi, float(K[support].min()), support)


def bad_event_occurred(est, truth) -> bool:
    """True iff some estimated entry falls below half of the aggregated kernel's entry."""
    T_hat = est.kernel if isinstance(est, EstimatedModel) else np.asarray(est)
    T = truth.model.kernel if isinstance(truth, QuantizedModel) else np.asarray(truth)
    if T_hat.shape != T.shape:
        raise ModelError(f"shape mismatch {T_hat.shape} vs {T.shape}")
    return bool(np.any(T_hat < 0.5 * T))


def exploration_invariant(env: FiniteMDP, gamma) -> np.ndarray:
    """Stationary state distribution of the chain explored with a state-independent policy."""
    if not isinstance(gamma, ExplorationPolicy):
        gamma = ExplorationPolicy(gamma)
    P = np.einsum("u,xuy->xy", gamma.probs, env.kernel)
    vals, vecs = np.linalg.eig(P.T)
    k = int(np.argmin(np.abs(vals - 1.0)))
    v = np.abs(np.real(vecs[:, k]))
    return v / v.sum()


def _average_policy(model: FiniteMDP, tol):
    """Average-optimal policy of a finite model; falls back to a near-one discount if not minorized."""
    minor = find_minorizer(model)
    if minor is not None:
        return solve_acoe_minorization(model, minor.epsilon, minor, tol=tol,
                                       method="policy_iteration").policy, "minorized"
    return solve_discounted(model, 1 - 1e-9, method="policy_iteration").policy, "near-one-discount"


def learned_policy_loss(env: FiniteMDP, est, p: Partition, criterion: str = "discounted",
                        beta: float | None = None, tol: float = 1e-10):
    """Sup-norm loss on ``env`` of the extended optimal policy of an estimated or aggregated model.

    ``est`` is an :class:`EstimatedModel`, a :class:`QuantizedModel` or a bare
    :class:`FiniteMDP` on the representatives.  Returns ``(loss, record)``.
    """
    small = est.model if isinstance(est, (EstimatedModel, QuantizedModel)) else est
    if small.n_states != p.n_bins:
        raise ModelError("estimated model and partition disagree on the number of bins")
    record = {"criterion": criterion, "n_bins": p.n_bins, "delta": p.delta}
    if isinstance(est, EstimatedModel):
        record["zero_visit_fraction"] = est.zero_visit_fraction
        record["N"] = est.n_samples
    if criterion == "discounted":
        if beta is None:
            raise ModelError("discounted criterion needs beta")
        coarse = solve_discounted(small, beta, method="policy_iteration").policy
        policy = extend_policy(coarse, p)
        value = policy_evaluation_discounted(env, policy, beta)
        optimum = solve_discounted(env, beta, method="policy_iteration").value
        loss = float(np.abs(value - optimum).max())
        record.update(beta=beta, optimal_value=optimum, policy_value=value)
    elif criterion == "average":
        minor = find_minorizer(env)
        if minor is None:
            raise ModelError("average criterion needs a minorized environment")
        coarse, how = _average_policy(small, tol)
        policy = extend_policy(coarse, p)
        gain, _ = policy_evaluation_average(env, policy, minor.epsilon, minor)
        best = solve_acoe_minorization(env, minor.epsilon, minor, tol=tol, method="policy_iteration")
        loss = abs(gain - best.gain)
        record.update(epsilon=minor.epsilon, optimal_gain=best.gain, policy_gain=gain, solver=how)
    else:
        raise ModelError(f"unknown criterion {criterion!r}")
    record["policy"] = policy
    record["loss"] = loss
    return loss, record
