"""Finite MDP models, policies, trajectory simulation and Monte-Carlo cost oracles."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .rng import make_rng

ROW_SUM_TOL = 1e-12


class ModelError(ValueError):
    """Raised when a model, policy or argument violates a documented invariant."""


def _frozen(a, dtype=float, ndim=None):
    arr = np.array(a, dtype=dtype)
    if ndim == 2 and arr.ndim == 1:
        arr = arr[:, None]
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FiniteMDP:
    """Finite state/action model embedded in Euclidean space.

    ``kernel[x, u, y]`` is the probability of moving from state ``x`` to ``y``
    under action ``u``; ``cost[x, u]`` is the stage cost.  ``coords[x]`` places
    state ``x`` in R^d and fixes the state metric; ``actions[u]`` does the same
    for actions.
    """

    coords: np.ndarray
    actions: np.ndarray
    kernel: np.ndarray
    cost: np.ndarray
    c_max: float = None

    def __post_init__(self):
        object.__setattr__(self, "coords", _frozen(self.coords, ndim=2))
        object.__setattr__(self, "actions", _frozen(self.actions, ndim=2))
        object.__setattr__(self, "kernel", _frozen(self.kernel))
        object.__setattr__(self, "cost", _frozen(self.cost))
        if self.c_max is None:
            cmax = float(np.max(self.cost)) if self.cost.size else 0.0
            object.__setattr__(self, "c_max", max(cmax, 0.0))

    @property
    def n_states(self):
        return self.coords.shape[0]

    @property
    def n_actions(self):
        return self.actions.shape[0]

    @property
    def dim(self):
        return self.coords.shape[1]

    def with_kernel(self, kernel):
        return FiniteMDP(self.coords, self.actions, kernel, self.cost)

    def with_cost(self, cost):
        return FiniteMDP(self.coords, self.actions, self.kernel, cost)

    def policy_kernel(self, policy):
        """Transition matrix of the chain induced by a deterministic policy."""
        policy = check_policy(self, policy)
        return self.kernel[np.arange(self.n_states), policy]

    def policy_cost(self, policy):
        policy = check_policy(self, policy)
        return self.cost[np.arange(self.n_states), policy]

    def checked(self):
        problems = validate(self)
        if problems:
            raise ModelError("invalid model: " + "; ".join(problems[:10]))
        return self

    def to_dict(self):
        return {
            "coords": self.coords.tolist(),
            "actions": self.actions.tolist(),
            "kernel": self.kernel.tolist(),
            "cost": self.cost.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            model = cls(doc["coords"], doc["actions"], doc["kernel"], doc["cost"])
        except KeyError as exc:
            raise ModelError(f"model document lacks field {exc}") from None
        return model.checked()


def validate(model: FiniteMDP) -> list[str]:
    """Return every invariant violation of ``model``; empty iff the model is valid."""
    problems = []
    coords, kernel, cost = model.coords, model.kernel, model.cost
    if coords.ndim != 2 or coords.shape[0] < 1:
        problems.append("model needs at least one state with coordinates")
        return problems
    if not np.all(np.isfinite(coords)):
        problems.append("non-finite state coordinates")
    if not np.all(np.isfinite(model.actions)):
        problems.append("non-finite action coordinates")
    n, m = model.n_states, model.n_actions
    if kernel.shape != (n, m, n):
        problems.append(f"kernel shape {kernel.shape} != {(n, m, n)}")
        return problems
    if cost.shape != (n, m):
        problems.append(f"cost shape {cost.shape} != {(n, m)}")
        return problems
    for x, u in zip(*np.nonzero(~np.isfinite(kernel).all(axis=2))):
        problems.append(f"(state {x}, action {u}): non-finite kernel entry")
    for x, u in zip(*np.nonzero((kernel < 0).any(axis=2))):
        problems.append(f"(state {x}, action {u}): negative kernel entry")
    sums = kernel.sum(axis=2)
    for x, u in zip(*np.nonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)):
        problems.append(f"(state {x}, action {u}): row sum {sums[x, u]:.12g} ≠ 1")
    for x, u in zip(*np.nonzero(~np.isfinite(cost))):
        problems.append(f"(state {x}, action {u}): non-finite cost")
    for x, u in zip(*np.nonzero(cost < 0)):
        problems.append(f"(state {x}, action {u}): negative cost {cost[x, u]:.6g}")
    for x, u in zip(*np.nonzero(cost > model.c_max)):
        problems.append(f"(state {x}, action {u}): cost exceeds c_max {model.c_max:.6g}")
    return problems


def load_model(path) -> FiniteMDP:
    with open(path) as fh:
        return FiniteMDP.from_dict(json.load(fh))


def save_model(model: FiniteMDP, path, extra=None):
    doc = model.to_dict()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


@dataclass(frozen=True, eq=False)
class ExplorationPolicy:
    """State-independent randomized policy: action ``u`` is drawn with ``probs[u]``."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 1 or p.size == 0:
            raise ModelError("exploration probabilities must be a non-empty vector")
        if np.any(p <= 0):
            raise ModelError("exploration probabilities must be strictly positive")
        if abs(p.sum() - 1.0) > ROW_SUM_TOL:
            raise ModelError(f"exploration probabilities sum to {p.sum():.15g}")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_actions):
        return cls(np.full(n_actions, 1.0 / n_actions))


Policy = Union[np.ndarray, Sequence[int], ExplorationPolicy]


def check_policy(model, policy):
    """Coerce a deterministic policy to an int array, checking every entry."""
    pol = np.asarray(policy)
    if pol.shape != (model.n_states,):
        raise ModelError(f"policy needs one action per state, got shape {pol.shape}")
    if not np.issubdtype(pol.dtype, np.integer):
        if not np.all(pol == np.round(pol)):
            raise ModelError("policy entries must be action indices")
        pol = pol.astype(int)
    if pol.min() < 0 or pol.max() >= model.n_actions:
        raise ModelError("policy refers to an action index out of range")
    return pol


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One simulated path; step ``t`` is (states[t], actions[t], costs[t], next_states[t])."""

    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    seed: int

    def __len__(self):
        return len(self.states)

    def records(self):
        return list(zip(self.states.tolist(), self.actions.tolist(),
                        self.costs.tolist(), self.next_states.tolist()))


def _cumulative_kernel(model):
    cum = np.cumsum(model.kernel, axis=2)
    cum[..., -1] = 1.0
    return cum


CHUNK_STEPS = 1 << 16


def _iter_chains(model, policy, x0, horizon, seeds, chunk=CHUNK_STEPS):
    """Simulate one chain per seed, vectorized across chains, in blocks of ``chunk`` steps.

    Chain ``r`` consumes ``make_rng(seeds[r]).random((horizon, 2))`` (drawn block by
    block, which yields the same stream): column 0 picks the action (exploration
    policies only), column 1 the transition.  Each yielded block is
    ``(states, actions)`` with shapes (R, b + 1) and (R, b); consecutive blocks share
    their boundary state.
    """
    n = model.n_states
    if not 0 <= int(x0) < n:
        raise ModelError(f"initial state {x0} outside 0..{n - 1}")
    if horizon < 1:
        raise ModelError("horizon must be at least 1")
    gens = [make_rng(s) for s in seeds]
    reps = len(seeds)
    cum = _cumulative_kernel(model)
    if isinstance(policy, ExplorationPolicy):
        if policy.probs.size != model.n_actions:
            raise ModelError("exploration policy size does not match the action set")
        pcum = np.cumsum(policy.probs)
        pcum[-1] = 1.0
        pol = None
    else:
        pol = check_policy(model, policy)
    x = np.full(reps, int(x0))
    done = 0
    while done < horizon:
        b = min(chunk, horizon - done)
        draws = np.stack([g.random((b, 2)) for g in gens])
        if pol is None:
            acts = np.minimum(np.searchsorted(pcum, draws[:, :, 0], side="right"), model.n_actions - 1)
        states = np.empty((reps, b + 1), dtype=int)
        actions = np.empty((reps, b), dtype=int)
        states[:, 0] = x
        for t in range(b):
            a = acts[:, t] if pol is None else pol[x]
            actions[:, t] = a
            nxt = (cum[x, a] <= draws[:, t, 1:2]).sum(axis=1)
            x = np.minimum(nxt, n - 1)
            states[:, t + 1] = x
        yield states, actions
        done += b


def _run_chains(model, policy, x0, horizon, seeds):
    """All visited states (R, horizon + 1) and actions (R, horizon); see :func:`_iter_chains`."""
    blocks = list(_iter_chains(model, policy, x0, horizon, seeds))
    states = np.concatenate([blocks[0][0]] + [s[:, 1:] for s, _ in blocks[1:]], axis=1)
    actions = np.concatenate([a for _, a in blocks], axis=1)
    return states, actions


def simulate(model: FiniteMDP, policy: Policy, x0: int, horizon: int, seed: int) -> Trajectory:
    """Simulate ``horizon`` steps from ``x0``; a pure function of its arguments."""
    states, actions = _run_chains(model, policy, x0, horizon, [seed])
    s, a = states[0], actions[0]
    return Trajectory(
        states=s[:-1].copy(),
        actions=a.copy(),
        costs=model.cost[s[:-1], a],
        next_states=s[1:].copy(),
        seed=int(seed),
    )


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    stderr: float
    reps: int
    horizon: int
    truncation_bias: float = 0.0


def discounted_horizon(beta, c_max, budget=1e-6):
    """Smallest T with beta**T * c_max / (1 - beta) <= budget."""
    if c_max <= 0:
        return 1
    return max(1, math.ceil(math.log(budget * (1 - beta) / c_max) / math.log(beta)))


def mc_discounted_cost(model, policy, x0, beta, horizon=None, reps=100, seed=0,
                       truncation_budget=1e-6) -> MonteCarloEstimate:
    """Monte-Carlo estimate of the discounted cost from ``x0``.

    Rep ``r`` is the trajectory ``simulate(model, policy, x0, horizon, seed + r)``.
    The truncation bias ``beta**horizon * c_max / (1 - beta)`` is reported and must
    not exceed ``truncation_budget``.
    """
    if not 0 < beta < 1:
        raise ModelError("beta must lie in (0, 1)")
    if horizon is None:
        horizon = discounted_horizon(beta, model.c_max, truncation_budget)
    bias = beta ** horizon * model.c_max / (1 - beta)
    if bias > truncation_budget:
        raise ModelError(
            f"horizon {horizon} leaves truncation bias {bias:.3g} above budget {truncation_budget:.3g}")
    states, actions = _run_chains(model, policy, x0, horizon, [seed + r for r in range(reps)])
    costs = model.cost[states[:, :-1], actions]
    totals = costs @ (beta ** np.arange(horizon))
    stderr = float(totals.std(ddof=1) / math.sqrt(reps)) if reps > 1 else float("nan")
    return MonteCarloEstimate(float(totals.mean()), stderr, reps, horizon, bias)


def mc_average_cost(model, policy, x0, horizon=5000, reps=50, seed=0) -> MonteCarloEstimate:
    """Mean over reps of the time-averaged cost (1/T) * sum_t c(X_t, U_t)."""
    if horizon < 1000:
        raise ModelError("average-cost estimation needs a horizon of at least 1000")
    states, actions = _run_chains(model, policy, x0, horizon, [seed + r for r in range(reps)])
    averages = model.cost[states[:, :-1], actions].mean(axis=1)
    stderr = float(averages.std(ddof=1) / math.sqrt(reps)) if reps > 1 else float("nan")
    return MonteCarloEstimate(float(averages.mean()), stderr, reps, horizon)
