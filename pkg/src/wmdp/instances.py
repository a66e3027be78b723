"""Random and structured instance generators with known regularity constants."""

from __future__ import annotations

import numpy as np

from .mdp import FiniteMDP, ModelError
from .metrics import DiscreteMeasure
from .noise import DisturbanceSystem, kernel_from_noise
from .rng import make_rng


def random_mdp(n_states, n_actions, seed, sparsity=0.0, cost_scale=1.0) -> FiniteMDP:
    """Dirichlet kernel rows and uniform costs on states placed at i/(n-1)."""
    rng = make_rng(seed)
    kernel = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if sparsity > 0:
        mask = rng.random(kernel.shape) < sparsity
        mask[..., 0] = False
        kernel = np.where(mask, 0.0, kernel)
        kernel /= kernel.sum(axis=2, keepdims=True)
    cost = cost_scale * rng.random((n_states, n_actions))
    coords = np.linspace(0.0, 1.0, n_states) if n_states > 1 else np.zeros(1)
    return FiniteMDP(coords, np.arange(n_actions, dtype=float), kernel, cost)


def uniform_mixture(model: FiniteMDP, epsilon: float, rho=None) -> FiniteMDP:
    """(1 - epsilon) T + epsilon rho: minorized by (epsilon, rho) by construction."""
    if not 0 < epsilon <= 1:
        raise ModelError("epsilon must lie in (0, 1]")
    n = model.n_states
    rho = np.full(n, 1.0 / n) if rho is None else np.asarray(rho, dtype=float)
    return model.with_kernel((1 - epsilon) * model.kernel + epsilon * rho)


def random_minorized_mdp(n_states, n_actions, epsilon, seed) -> FiniteMDP:
    return uniform_mixture(random_mdp(n_states, n_actions, seed), epsilon)


def perturb_model(model: FiniteMDP, scale: float, seed: int, cost_scale=None) -> FiniteMDP:
    """Mix every kernel row toward a random row and jitter the cost, both by ``scale``."""
    rng = make_rng(seed)
    other = rng.dirichlet(np.ones(model.n_states), size=(model.n_states, model.n_actions))
    kernel = (1 - scale) * model.kernel + scale * other
    cs = scale if cost_scale is None else cost_scale
    cost = np.clip(model.cost + cs * rng.uniform(-1, 1, model.cost.shape), 0.0, None)
    return FiniteMDP(model.coords, model.actions, kernel, cost)


class GridInstance:
    """Grid model on [0, 1] from x' = clip(alpha x + theta u + w) mixed with a uniform jump.

    The state kernel is Lipschitz in W1 with constant at most (1 - epsilon) |alpha|
    (mean-preserving grid projection), and cost |x - target(u)| + weight u^2 is
    1-Lipschitz in the state.
    """

    def __init__(self, n_states=256, n_actions=5, alpha=0.5, theta=0.4, offset=0.3, epsilon=0.1,
                 noise_halfwidth=0.1, noise_atoms=21, action_weight=0.2, targets=None):
        self.coords = np.linspace(0.0, 1.0, n_states)
        self.actions = np.linspace(-1.0, 1.0, n_actions)
        self.alpha, self.theta, self.offset, self.epsilon = alpha, theta, offset, epsilon
        self.system = DisturbanceSystem.linear(alpha, [theta], 0.0, 1.0, offset=offset)
        self.noise = DiscreteMeasure.uniform(np.linspace(-noise_halfwidth, noise_halfwidth, noise_atoms))
        base = kernel_from_noise(self.system, self.noise, self.coords, self.actions, projection="linear")
        kernel = (1 - epsilon) * base + epsilon / n_states
        if targets is None:
            targets = 0.5 + 0.35 * self.actions
        self.targets = np.asarray(targets, dtype=float)
        cost = np.abs(self.coords[:, None] - self.targets[None, :]) + action_weight * self.actions[None, :] ** 2
        self.model = FiniteMDP(self.coords, self.actions, kernel, cost)
        self.lip_cost = 1.0
        self.lip_kernel = (1 - epsilon) * abs(alpha)


def lumpable_model(coarse: FiniteMDP, labels, seed=0, jitter=0.0) -> FiniteMDP:
    """Fine model whose rows and costs depend on the state only through its bin.

    Mass that the coarse kernel sends to bin j is spread uniformly over bin j's states,
    so aggregating the fine model over ``labels`` recovers ``coarse`` exactly.
    """
    labels = np.asarray(labels, dtype=int)
    M = coarse.n_states
    sizes = np.bincount(labels, minlength=M)
    spread = (labels[None, :] == np.arange(M)[:, None]) / sizes[:, None]  # (M, n)
    kernel = coarse.kernel[labels] @ spread
    cost = coarse.cost[labels]
    n = labels.size
    coords = np.linspace(0.0, 1.0, n)
    return FiniteMDP(coords, coarse.actions, kernel, cost)
