"""Noise-driven dynamics x' = f(x, u, w): kernels from noise laws, empirical noise, and OLS identification."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from .mdp import FiniteMDP, ModelError
from .metrics import DiscreteMeasure, kernel_d_f, kernel_w1, lipschitz_constant, w1
from .solve import (
    find_minorizer,
    policy_evaluation_average,
    policy_evaluation_discounted,
    solve_acoe_minorization,
    solve_discounted,
)

CLAMP_TOL = 1e-9


def _as_2d(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


@dataclass(frozen=True, eq=False)
class DisturbanceSystem:
    """Dynamics ``f(x, u, w)`` clamped to the box ``[lower, upper]``.

    ``rule`` maps arrays of states (k, d), actions (k, d_u) and noise points (k, d_w)
    to images (k, d).  The Lipschitz constants in the state, in (state, action) and in
    the noise are declared by the caller when known; clamping never increases them.
    """

    rule: Callable
    lower: np.ndarray
    upper: np.ndarray
    lip_x: float | None = None
    lip_xu: float | None = None
    lip_w: float | None = None

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ModelError("invalid state box")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def __call__(self, x, u, w):
        return np.clip(_as_2d(self.rule(_as_2d(x), _as_2d(u), _as_2d(w))), self.lower, self.upper)

    @classmethod
    def linear(cls, alpha, theta, lower=0.0, upper=1.0, offset=0.0):
        """x' = alpha * x + theta . u + offset + w on a one-dimensional state box."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        alpha = float(alpha)

        def rule(x, u, w):
            return alpha * x + (u @ theta)[:, None] + offset + w

        return cls(rule, lower, upper, lip_x=abs(alpha),
                   lip_xu=float(np.sqrt(alpha ** 2 + theta @ theta)), lip_w=1.0)

    def drift(self, x, u):
        """Noise-free image r(x, u), unclamped (only meaningful for additive rules)."""
        x, u = _as_2d(x), _as_2d(u)
        return _as_2d(self.rule(x, u, np.zeros_like(x)))


def _project_nearest(images, grid):
    """Index of the nearest grid state per image point (lowest index on ties)."""
    if grid.shape[1] == 1:
        g = grid[:, 0]
        order = np.argsort(g, kind="stable")
        gs = g[order]
        pos = np.clip(np.searchsorted(gs, images[:, 0]), 1, gs.size - 1) if gs.size > 1 else \
            np.zeros(images.shape[0], dtype=int)
        if gs.size == 1:
            return order[pos], np.ones(images.shape[0])
        left, right = gs[pos - 1], gs[pos]
        choose_left = (images[:, 0] - left) <= (right - images[:, 0])
        idx = np.where(choose_left, order[pos - 1], order[pos])
        # equal-coordinate duplicates or equidistant points resolve to the lower index
        dl = np.abs(images[:, 0] - g[order[pos - 1]])
        dr = np.abs(images[:, 0] - g[order[pos]])
        tie = dl == dr
        idx = np.where(tie, np.minimum(order[pos - 1], order[pos]), idx)
        return idx, np.ones(images.shape[0])
    return np.argmin(cdist(images, grid), axis=1), np.ones(images.shape[0])


def _project_linear(images, grid):
    """Split each image between its two neighbouring grid points so the mean is preserved."""
    if grid.shape[1] != 1:
        raise ModelError("linear projection is only defined on a one-dimensional grid")
    g = grid[:, 0]
    steps = np.diff(g)
    if np.any(steps <= 0):
        raise ModelError("linear projection needs strictly increasing grid coordinates")
    y = np.clip(images[:, 0], g[0], g[-1])
    if np.ptp(steps) <= 1e-12 * steps[0]:
        # evenly spaced grid: locate the bracket arithmetically
        lo = np.clip(((y - g[0]) / steps[0]).astype(int), 0, g.size - 2)
    else:
        lo = np.clip(np.searchsorted(g, y, side="right"), 1, g.size - 1) - 1
    hi = lo + 1
    frac = np.clip((y - g[lo]) / (g[hi] - g[lo]), 0.0, 1.0)
    return np.stack([lo, hi], axis=1), np.stack([1 - frac, frac], axis=1)


IMAGE_BLOCK = 1 << 22  # image points processed at once when building a kernel


def kernel_from_noise(sys: DisturbanceSystem, mu: DiscreteMeasure, grid, actions,
                      projection: str = "nearest") -> np.ndarray:
    """Kernel T_mu(.|x, u): the law of f(x, u, W), W ~ mu, carried onto the grid.

    ``projection="nearest"`` snaps each image to its closest grid state;
    ``"linear"`` (1-D grids) splits it between the two bracketing states, which keeps
    W1 distances between images intact.  Images outside the grid's bounding box by more
    than a small tolerance are rejected.
    """
    grid = _as_2d(grid)
    actions = _as_2d(actions)
    if projection not in ("nearest", "linear"):
        raise ModelError(f"unknown projection {projection!r}")
    mu = mu.merged() if len(mu) > 1 else mu
    n, m, k = grid.shape[0], actions.shape[0], len(mu)
    box_lo, box_hi = grid.min(axis=0), grid.max(axis=0)
    kernel = np.zeros((n, m, n))
    block = max(1, IMAGE_BLOCK // k)
    for u in range(m):
        for start in range(0, n, block):
            xs_grid = grid[start:start + block]
            b = xs_grid.shape[0]
            xs = np.repeat(xs_grid, k, axis=0)
            us = np.repeat(actions[u:u + 1], b * k, axis=0)
            ws = np.tile(mu.support, (b, 1))
            images = sys(xs, us, ws)
            if np.any(images < box_lo - CLAMP_TOL) or np.any(images > box_hi + CLAMP_TOL):
                raise ModelError("noise images leave the grid's bounding box")
            if projection == "nearest":
                idx, frac = _project_nearest(images, grid)
                idx, frac = idx[:, None], frac[:, None]
            else:
                idx, frac = _project_linear(images, grid)
            mass = frac * np.tile(mu.weights, b)[:, None]
            rows = np.repeat(np.arange(b), k)[:, None]
            flat = np.bincount((rows * n + idx).ravel(), weights=mass.ravel(), minlength=b * n)
            kernel[start:start + b, u, :] = flat.reshape(b, n)
    kernel /= kernel.sum(axis=2, keepdims=True)
    return kernel


def empirical_noise(samples) -> DiscreteMeasure:
    """Uniform measure on the given sample points."""
    pts = _as_2d(samples)
    if pts.shape[0] < 1:
        raise ModelError("need at least one sample")
    return DiscreteMeasure.uniform(pts)


@dataclass(frozen=True, eq=False)
class NoiseDataset:
    """Observations Y = r(X, U) + W; the noise itself is never stored."""

    Y: np.ndarray
    X: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        Y, X, U = _as_2d(self.Y), _as_2d(self.X), _as_2d(self.U)
        if not (Y.shape[0] == X.shape[0] == U.shape[0]) or Y.shape[0] < 1:
            raise ModelError("Y, X and U must have the same positive number of rows")
        if Y.shape[1] != X.shape[1]:
            raise ModelError("Y and X must share the state dimension")
        for name, arr in (("Y", Y), ("X", X), ("U", U)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.Y.shape[0]


def load_noise_dataset(csv_path, schema_path=None) -> NoiseDataset:
    """Read a dataset CSV whose columns are grouped into Y, X and U.

    Without a schema file the header must be exactly ``Y,X,U``.  The schema is a JSON
    object mapping each of "Y", "X", "U" to its list of column names.
    """
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in r] for r in reader if r], dtype=float)
    if schema_path is None:
        schema = {"Y": ["Y"], "X": ["X"], "U": ["U"]}
    else:
        schema = json.loads(Path(schema_path).read_text())
    cols = {}
    for group in ("Y", "X", "U"):
        names = schema.get(group)
        if not names:
            raise ModelError(f"schema lacks column group {group!r}")
        missing = [c for c in names if c not in header]
        if missing:
            raise ModelError(f"CSV lacks columns {missing}")
        cols[group] = rows[:, [header.index(c) for c in names]] if rows.size else np.zeros((0, len(names)))
    return NoiseDataset(cols["Y"], cols["X"], cols["U"])


@dataclass(frozen=True, eq=False)
class LinearFit:
    """Least-squares fit Y ~ intercept + alpha X + theta U.

    ``predict`` returns alpha x + theta u without the intercept; the intercept stays in
    the residuals and so is attributed to the noise mean.
    """

    alpha: np.ndarray  # (d, d)
    theta: np.ndarray  # (d, d_u)
    intercept: np.ndarray
    residuals: np.ndarray
    stderr: np.ndarray  # per coefficient row (1 + d + d_u, d), intercept first
    condition: float

    def predict(self, x, u):
        return _as_2d(x) @ self.alpha.T + _as_2d(u) @ self.theta.T


def fit_linear_r(data: NoiseDataset) -> LinearFit:
    n, d = data.X.shape
    design = np.hstack([np.ones((n, 1)), data.X, data.U])
    p = design.shape[1]
    if n < p or np.linalg.matrix_rank(design) < p:
        raise ModelError("singular design: (1, X, U) columns are linearly dependent")
    condition = float(np.linalg.cond(design))
    coef, *_ = np.linalg.lstsq(design, data.Y, rcond=None)
    alpha = coef[1:1 + d].T
    theta = coef[1 + d:].T
    fitted_r = data.X @ alpha.T + data.U @ theta.T
    residuals = data.Y - fitted_r
    dof = max(n - p, 1)
    sigma2 = ((data.Y - design @ coef) ** 2).sum(axis=0) / dof
    cov_diag = np.diag(np.linalg.inv(design.T @ design))
    stderr = np.sqrt(np.outer(cov_diag, sigma2))
    return LinearFit(alpha, theta, coef[0], residuals, stderr, condition)


def residual_noise_measure(data: NoiseDataset, r_hat) -> DiscreteMeasure:
    """Uniform measure on residuals Y_i - r_hat(X_i, U_i); ``r_hat`` is a LinearFit or a callable."""
    predict = r_hat.predict if isinstance(r_hat, LinearFit) else r_hat
    return DiscreteMeasure.uniform(data.Y - _as_2d(predict(data.X, data.U)))


def linear_sup_error(fit: LinearFit, alpha, theta, x_box, u_box) -> float:
    """sup over the box of |r_hat - r| for linear r; attained at a corner of the box."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    da, dt = fit.alpha - alpha, fit.theta - theta
    x_box = [np.atleast_1d(np.asarray(b, dtype=float)) for b in x_box]
    u_box = [np.atleast_1d(np.asarray(b, dtype=float)) for b in u_box]
    xs = np.array(list(itertools.product(*zip(*x_box))))
    us = np.array(list(itertools.product(*zip(*u_box))))
    worst = 0.0
    for x in xs:
        for u in us:
            worst = max(worst, float(np.linalg.norm(da @ x + dt @ u)))
    return worst


def interpolation_lipschitz(values, grid):
    """Lipschitz constant of the grid values (equal to that of their linear interpolant in 1-D)."""
    return lipschitz_constant(values, grid)


def noise_policy_loss(sys: DisturbanceSystem, mu: DiscreteMeasure, approx, grid, actions, cost,
                      criterion: str = "discounted", beta: float | None = None,
                      projection: str = "nearest", true_kernel=None):
    """Loss under T_mu of the policy that is optimal for an approximate noise model.

    ``approx`` is either a noise measure nu (same dynamics) or a pair
    ``(approx_system, approx_noise)`` such as a fitted drift with residual noise.
    Returns ``(loss, record)``; the record holds both kernels' solved value functions and
    the discrepancies that enter the noise bounds. Passing ``true_kernel`` (the output of
    ``kernel_from_noise(sys, mu, grid, actions, projection)``) skips rebuilding it when many
    approximations are compared against one true model.
    """
    grid = _as_2d(grid)
    actions = _as_2d(actions)
    cost = np.asarray(cost, dtype=float)
    T_mu = true_kernel if true_kernel is not None else kernel_from_noise(sys, mu, grid, actions, projection)
    if isinstance(approx, DiscreteMeasure):
        approx_sys, nu = sys, approx
    else:
        approx_sys, nu = approx
    T_nu = kernel_from_noise(approx_sys, nu, grid, actions, projection)
    true_model = FiniteMDP(grid, actions, T_mu, cost)
    approx_model = FiniteMDP(grid, actions, T_nu, cost)
    record = {"criterion": criterion, "projection": projection,
              "noise_w1": w1(mu, nu) if mu.dim == nu.dim else float("nan"),
              "kernel_w1": kernel_w1(T_mu, T_nu, grid)}
    if criterion == "discounted":
        if beta is None:
            raise ModelError("discounted criterion needs beta")
        J_mu = solve_discounted(true_model, beta, method="policy_iteration").value
        approx_sol = solve_discounted(approx_model, beta, method="policy_iteration")
        J_nu = approx_sol.value
        achieved = policy_evaluation_discounted(true_model, approx_sol.policy, beta)
        loss = float(np.abs(achieved - J_mu).max())
        record.update(beta=beta, value_true=J_mu, value_approx=J_nu,
                      d_value_true=kernel_d_f(T_mu, T_nu, J_mu),
                      d_value_approx=kernel_d_f(T_mu, T_nu, J_nu),
                      lip_value_true=lipschitz_constant(J_mu, grid) if grid.shape[0] > 1 else 0.0,
                      lip_value_approx=lipschitz_constant(J_nu, grid) if grid.shape[0] > 1 else 0.0,
                      policy=approx_sol.policy)
    elif criterion == "average":
        minor = find_minorizer(true_model)
        minor_nu = find_minorizer(approx_model)
        if minor is None or minor_nu is None:
            raise ModelError("average criterion needs minorized kernels")
        best = solve_acoe_minorization(true_model, minor.epsilon, minor, method="policy_iteration")
        approx_sol = solve_acoe_minorization(approx_model, minor_nu.epsilon, minor_nu,
                                             method="policy_iteration")
        gain, _ = policy_evaluation_average(true_model, approx_sol.policy, minor.epsilon, minor)
        loss = abs(gain - best.gain)
        record.update(gain_true=best.gain, gain_policy=gain,
                      d_bias_true=kernel_d_f(T_mu, T_nu, best.relative_value),
                      d_bias_approx=kernel_d_f(T_mu, T_nu, approx_sol.relative_value),
                      policy=approx_sol.policy)
    else:
        raise ModelError(f"unknown criterion {criterion!r}")
    record["loss"] = loss
    return loss, record
