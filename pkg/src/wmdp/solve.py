"""Fixed-point solvers for the discounted and average cost optimality equations."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .mdp import FiniteMDP, ModelError
from .metrics import DiscreteMeasure

TIE_TOL = 1e-12
DIRECT_SOLVE_MAX_STATES = 2000


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap; ``residual`` is the last sup-norm residual."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class DiscountedSolution:
    value: np.ndarray
    policy: np.ndarray
    residual: float
    beta: float
    iterations: int = 0


@dataclass(frozen=True, eq=False)
class CanonicalTriplet:
    """Gain, relative value and greedy policy for the average cost problem.

    ``relative_value`` is the fixed point of the minorized Bellman operator built
    from (``epsilon``, ``minorizer``), so ``gain == epsilon * <relative_value, rho>``.
    """

    gain: float
    relative_value: np.ndarray
    policy: np.ndarray
    epsilon: float
    minorizer: DiscreteMeasure
    residual: float = 0.0
    iterations: int = 0


@dataclass(frozen=True, eq=False)
class VanishingDiscountResult:
    gain: float
    relative_value: np.ndarray
    betas: np.ndarray
    scaled_values: np.ndarray  # (1 - beta) * J*_beta averaged over states, one per beta
    anchor: int


def q_values(model: FiniteMDP, v, beta=1.0):
    """c(x, u) + beta * sum_y v(y) T(y | x, u)."""
    return model.cost + beta * (model.kernel @ np.asarray(v, dtype=float))


def greedy(q):
    """Row-wise argmin with lowest-index tie-breaking within TIE_TOL."""
    q = np.asarray(q)
    best = q.min(axis=1, keepdims=True)
    return np.argmax(q <= best + TIE_TOL, axis=1)


def bellman_apply(model: FiniteMDP, v, beta: float):
    """(Tv)(x) = min_u { c(x,u) + beta * sum_y v(y) T(y|x,u) }."""
    v = np.asarray(v, dtype=float)
    if v.shape != (model.n_states,) or not np.all(np.isfinite(v)):
        raise ModelError("v must be a finite vector with one entry per state")
    return q_values(model, v, beta).min(axis=1)


def _check_beta(beta):
    if not 0 < beta < 1:
        raise ModelError(f"discount factor {beta} outside (0, 1)")


def policy_evaluation_discounted(model: FiniteMDP, policy, beta: float):
    """Solve v = c_gamma + beta * T_gamma v for a deterministic stationary policy."""
    _check_beta(beta)
    P = model.policy_kernel(policy)
    c = model.policy_cost(policy)
    n = model.n_states
    if n <= DIRECT_SOLVE_MAX_STATES:
        return np.linalg.solve(np.eye(n) - beta * P, c)
    # (1 - beta) * tol contraction bound with tol = 1e-12 * c_max / (1 - beta)
    v = np.zeros(n)
    target = 1e-12 * max(model.c_max, 1.0)
    while True:
        nv = c + beta * (P @ v)
        if np.abs(nv - v).max() <= target:
            return nv
        v = nv


def _solve_discounted_pi(model, beta, max_iters):
    pol = greedy(model.cost)
    for it in range(1, max_iters + 1):
        v = policy_evaluation_discounted(model, pol, beta)
        q = q_values(model, v, beta)
        cur = q[np.arange(model.n_states), pol]
        best = q.min(axis=1)
        improve = cur > best + TIE_TOL * max(1.0, np.abs(best).max())
        if not improve.any():
            return v, it
        pol = np.where(improve, greedy(q), pol)
    raise ConvergenceError("policy iteration did not settle", float("nan"))


def solve_discounted(model: FiniteMDP, beta: float, tol: float = 1e-8, max_iters: int | None = None,
                     method: str = "value_iteration") -> DiscountedSolution:
    """Solve the discounted cost optimality equation.

    Value iteration starts from zero and stops once ``||Tv - v|| <= tol (1 - beta) / (2 beta)``,
    which guarantees ``||v - J*|| <= tol``.  ``method="policy_iteration"`` returns the
    exact value of the final policy instead, which is preferable for beta close to 1.
    """
    _check_beta(beta)
    if tol <= 0:
        raise ModelError("tol must be positive")
    stop = tol * (1 - beta) / (2 * beta)
    if method == "policy_iteration":
        v, iters = _solve_discounted_pi(model, beta, max_iters or 10_000)
    elif method == "value_iteration":
        if max_iters is None:
            scale = max(model.c_max / (1 - beta), 1.0)
            max_iters = 2 * math.ceil(math.log(stop / scale) / math.log(beta)) + 100
        v = np.zeros(model.n_states)
        res = float("inf")
        iters = 0
        while res > stop:
            if iters >= max_iters:
                raise ConvergenceError(f"value iteration exceeded {max_iters} iterations", res)
            nv = bellman_apply(model, v, beta)
            res = float(np.abs(nv - v).max())
            v = nv
            iters += 1
    else:
        raise ModelError(f"unknown method {method!r}")
    q = q_values(model, v, beta)
    residual = float(np.abs(q.min(axis=1) - v).max())
    return DiscountedSolution(v, greedy(q), residual, beta, iters)


@dataclass(frozen=True, eq=False)
class Minorizer:
    epsilon: float
    rho: DiscreteMeasure
    weights: np.ndarray  # rho as a weight per state


def find_minorizer(model: FiniteMDP) -> Minorizer | None:
    """Componentwise-minimal minorizer m(j) = min_{x,u} T(j|x,u); None when it vanishes."""
    m = model.kernel.min(axis=(0, 1))
    eps = float(m.sum())
    if eps <= 0:
        return None
    w = m / eps
    return Minorizer(min(eps, 1.0), DiscreteMeasure.on_states(model.coords, w), w)


def _rho_weights(model, rho):
    if isinstance(rho, Minorizer):
        return rho.weights
    if isinstance(rho, DiscreteMeasure):
        if rho.support.shape == model.coords.shape and np.array_equal(rho.support, model.coords):
            return rho.weights
        w = np.zeros(model.n_states)
        for pt, mass in zip(rho.support, rho.weights):
            hit = np.nonzero(np.all(model.coords == pt, axis=1))[0]
            if hit.size == 0:
                raise ModelError(f"minorizer atom {pt} is not a state of the model")
            w[hit[0]] += mass
        return w
    w = np.asarray(rho, dtype=float)
    if w.shape != (model.n_states,):
        raise ModelError("rho needs one weight per state")
    return w


def check_minorization(model, epsilon, rho, atol=1e-12):
    w = _rho_weights(model, rho)
    if epsilon <= 0 or epsilon > 1:
        raise ModelError(f"minorization constant {epsilon} outside (0, 1]")
    gap = model.kernel - epsilon * w
    if gap.min() < -atol:
        x, u, j = np.unravel_index(np.argmin(gap), gap.shape)
        raise ModelError(
            f"T({j}|{x},{u}) = {model.kernel[x, u, j]:.6g} < epsilon * rho = {epsilon * w[j]:.6g}")
    return w


def _acoe_vi(model, epsilon, w, tol, max_iters):
    stop = tol * epsilon / 2
    if max_iters is None:
        scale = max(model.c_max / epsilon, 1.0)
        max_iters = 2 * math.ceil(math.log(stop / scale) / math.log(max(1 - epsilon, 1e-300))) + 100 \
            if epsilon < 1 else 3
    v = np.zeros(model.n_states)
    res = float("inf")
    iters = 0
    while res > stop:
        if iters >= max_iters:
            raise ConvergenceError(f"ACOE iteration exceeded {max_iters} iterations", res)
        nv = q_values(model, v).min(axis=1) - epsilon * np.dot(w, v)
        res = float(np.abs(nv - v).max())
        v = nv
        iters += 1
    return v, iters


def _acoe_pi(model, epsilon, w, max_iters):
    pol = greedy(model.cost)
    for it in range(1, (max_iters or 10_000) + 1):
        _, h = policy_evaluation_average(model, pol, epsilon, w, _checked=True)
        q = q_values(model, h)
        cur = q[np.arange(model.n_states), pol]
        best = q.min(axis=1)
        improve = cur > best + TIE_TOL * max(1.0, np.abs(best).max())
        if not improve.any():
            return h, it
        pol = np.where(improve, greedy(q), pol)
    raise ConvergenceError("average-cost policy iteration did not settle", float("nan"))


def solve_acoe_minorization(model: FiniteMDP, epsilon: float, rho, tol: float = 1e-9,
                            max_iters: int | None = None, method: str = "value_iteration") -> CanonicalTriplet:
    """Canonical triplet from the minorized contraction.

    Iterates v <- min_u { c + sum_y v(y) (T(y|x,u) - epsilon rho(y)) }, whose modulus is
    1 - epsilon, until the residual is below ``tol * epsilon / 2``.  The minorization
    ``T >= epsilon * rho`` is verified first.
    """
    w = check_minorization(model, epsilon, rho)
    if method == "value_iteration":
        h, iters = _acoe_vi(model, epsilon, w, tol, max_iters)
    elif method == "policy_iteration":
        h, iters = _acoe_pi(model, epsilon, w, max_iters)
    else:
        raise ModelError(f"unknown method {method!r}")
    q = q_values(model, h)
    residual = float(np.abs(q.min(axis=1) - epsilon * np.dot(w, h) - h).max())
    gain = float(epsilon * np.dot(w, h))
    rho_measure = rho.rho if isinstance(rho, Minorizer) else DiscreteMeasure.on_states(model.coords, w)
    return CanonicalTriplet(gain, h, greedy(q), float(epsilon), rho_measure, residual, iters)


def policy_evaluation_average(model: FiniteMDP, policy, epsilon: float, rho, _checked=False):
    """Gain and bias of a stationary policy from the minorized consistency equation.

    Solves h = c_gamma + (T_gamma - 1 epsilon rho^T) h exactly; the gain is
    epsilon * <h, rho> and (gain, h) satisfy gain + h = c_gamma + T_gamma h.
    """
    w = _rho_weights(model, rho) if _checked else check_minorization(model, epsilon, rho)
    P = model.policy_kernel(policy)
    c = model.policy_cost(policy)
    n = model.n_states
    A = np.eye(n) - P + epsilon * np.outer(np.ones(n), w)
    h = np.linalg.solve(A, c)
    return float(epsilon * np.dot(w, h)), h


def average_cost_of_policy(model: FiniteMDP, policy):
    """Gain of a policy via the stationary law of its chain (unichain models only)."""
    P = model.policy_kernel(policy)
    c = model.policy_cost(policy)
    n = model.n_states
    A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    return float(np.dot(pi, c))


def default_betas(k_max=10):
    return 1.0 - 2.0 ** -np.arange(1, k_max + 1)


def vanishing_discount_gain(model: FiniteMDP, anchor: int = 0, betas=None, tol: float = 1e-3,
                            solver_tol: float = 1e-10) -> VanishingDiscountResult:
    """Gain and relative value from (1 - beta) J*_beta and J*_beta - J*_beta(anchor).

    The default schedule is beta_k = 1 - 2^-k for k = 1..10.  All scaled values are
    returned so the approach to the limit can be inspected; a warning is issued if the
    last two gain estimates differ by more than ``tol``.
    """
    betas = default_betas() if betas is None else np.asarray(betas, dtype=float)
    if betas.size == 0 or np.any(np.diff(betas) <= 0):
        raise ModelError("beta schedule must be nonempty and increasing")
    if not 0 <= anchor < model.n_states:
        raise ModelError(f"anchor state {anchor} out of range")
    scaled = []
    value = None
    for beta in betas:
        sol = solve_discounted(model, float(beta), tol=solver_tol, method="policy_iteration")
        value = sol.value
        scaled.append(float(np.mean((1 - beta) * value)))
    scaled = np.array(scaled)
    if scaled.size > 1 and abs(scaled[-1] - scaled[-2]) > tol:
        warnings.warn(f"vanishing-discount gain still moving: {scaled[-2]:.6g} -> {scaled[-1]:.6g}",
                      RuntimeWarning, stacklevel=2)
    h = value - value[anchor]
    return VanishingDiscountResult(float(scaled[-1]), h, betas, scaled, anchor)
