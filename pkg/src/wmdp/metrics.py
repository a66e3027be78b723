"""Wasserstein-1 distances, f-discrepancies and Lipschitz constants on finite sets.

All distances use the Euclidean ground metric on the supplied coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.spatial.distance import cdist

from .mdp import ModelError

WEIGHT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Probability measure with finitely many atoms ``support[k]`` of mass ``weights[k]``."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        s = np.array(self.support, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        w = np.array(self.weights, dtype=float).ravel()
        if s.ndim != 2 or s.shape[0] < 1:
            raise ModelError("a measure needs at least one support point")
        if s.shape[0] != w.size:
            raise ModelError("support and weights differ in length")
        if not np.all(np.isfinite(s)):
            raise ModelError("support points must be finite")
        if np.any(w < 0):
            raise ModelError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ModelError(f"weights sum to {w.sum():.15g}, not 1")
        s.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self):
        return self.support.shape[1]

    def __len__(self):
        return self.weights.size

    @classmethod
    def dirac(cls, point):
        return cls(np.atleast_2d(np.asarray(point, dtype=float)), [1.0])

    @classmethod
    def uniform(cls, points):
        pts = np.asarray(points, dtype=float)
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    @classmethod
    def on_states(cls, coords, weights):
        """Measure carried by grid states; weights are renormalized against rounding."""
        w = np.asarray(weights, dtype=float)
        return cls(coords, w / w.sum())

    def merged(self):
        """Same measure with duplicate atoms combined and zero-mass atoms dropped."""
        keep = self.weights > 0
        pts, inv = np.unique(self.support[keep], axis=0, return_inverse=True)
        w = np.zeros(pts.shape[0])
        np.add.at(w, inv.ravel(), self.weights[keep])
        return DiscreteMeasure(pts, w / w.sum())

    def expect(self, f):
        """Integral of ``f`` (callable on an (k, d) array, or per-atom values)."""
        vals = f(self.support) if callable(f) else np.asarray(f, dtype=float)
        return float(np.dot(self.weights, vals))


def _check_dims(mu, nu):
    if mu.dim != nu.dim:
        raise ModelError(f"dimension mismatch: {mu.dim} vs {nu.dim}")


def w1_exact(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Optimal transport cost between two discrete measures, by exact linear programming."""
    _check_dims(mu, nu)
    mu, nu = mu.merged(), nu.merged()
    a, b = mu.weights, nu.weights
    cost = cdist(mu.support, nu.support)
    n, m = a.size, b.size
    if n == 1 or m == 1:
        return float(np.sum(cost * np.outer(a, b)))
    # plan variables P[i, j] flattened row-major; row and column marginals
    rows = np.kron(np.eye(n), np.ones((1, m)))
    cols = np.kron(np.ones((1, n)), np.eye(m))
    a_eq = np.vstack([rows, cols[:-1]])
    b_eq = np.concatenate([a, b[:-1]])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(max(res.fun, 0.0))


def w1_1d(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """W1 on the line as the integral of |F_mu - F_nu| between sorted atoms."""
    _check_dims(mu, nu)
    if mu.dim != 1:
        raise ModelError("w1_1d needs one-dimensional measures")
    pts = np.concatenate([mu.support[:, 0], nu.support[:, 0]])
    mass = np.concatenate([mu.weights, -nu.weights])
    order = np.argsort(pts, kind="stable")
    pts, mass = pts[order], mass[order]
    return float(np.sum(np.abs(np.cumsum(mass)[:-1]) * np.diff(pts)))


def w1(mu, nu):
    """W1 by the sorting formula on the line and the transport LP otherwise."""
    if mu.dim == 1 and nu.dim == 1:
        return w1_1d(mu, nu)
    return w1_exact(mu, nu)


def d_f(mu: DiscreteMeasure, nu: DiscreteMeasure, f) -> float:
    """|∫ f dmu - ∫ f dnu| for a callable ``f`` evaluated on support points."""
    return abs(mu.expect(f) - nu.expect(f))


def _check_kernels(T, S):
    T = np.asarray(T, dtype=float)
    S = np.asarray(S, dtype=float)
    if T.shape != S.shape or T.ndim != 3:
        raise ModelError(f"kernel shapes differ: {T.shape} vs {S.shape}")
    return T, S


def row_w1(P, Q, coords):
    """W1 between matching rows of two stacks of distributions over the same states.

    ``P`` and ``Q`` have shape (..., n) and live on ``coords`` (n, d).
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape or P.shape[-1] != coords.shape[0]:
        raise ModelError(f"row shapes {P.shape}, {Q.shape} do not match {coords.shape[0]} states")
    lead = P.shape[:-1]
    P2 = P.reshape(-1, P.shape[-1])
    Q2 = Q.reshape(-1, Q.shape[-1])
    if coords.shape[1] == 1:
        order = np.argsort(coords[:, 0], kind="stable")
        gaps = np.diff(coords[order, 0])
        diff = np.cumsum(P2[:, order] - Q2[:, order], axis=1)[:, :-1]
        out = np.abs(diff) @ gaps
    else:
        out = np.array([
            w1_exact(DiscreteMeasure.on_states(coords, p), DiscreteMeasure.on_states(coords, q))
            if np.abs(p - q).max() > 0 else 0.0
            for p, q in zip(P2, Q2)
        ])
    return out.reshape(lead)


def kernel_w1(T, S, coords) -> float:
    """sup over (state, action) of W1 between the next-state laws of two kernels."""
    T, S = _check_kernels(T, S)
    if T.shape[2] != np.asarray(coords).shape[0]:
        raise ModelError("kernel and coordinates disagree on the number of states")
    return float(row_w1(T, S, coords).max())


def kernel_d_f(T, S, f) -> float:
    """sup over (state, action) of |∫ f dT(.|x,u) - ∫ f dS(.|x,u)|; ``f`` holds per-state values."""
    T, S = _check_kernels(T, S)
    f = np.asarray(f, dtype=float)
    if f.shape != (T.shape[2],):
        raise ModelError("f needs one value per state")
    return float(np.abs((T - S) @ f).max())


def _pairwise(coords):
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    return cdist(coords, coords)


def lipschitz_constant(f, coords) -> float:
    """max over state pairs of |f(x) - f(y)| / d(x, y)."""
    f = np.asarray(f, dtype=float)
    dist = _pairwise(coords)
    if dist.shape[0] != f.size:
        raise ModelError("f needs one value per coordinate")
    if dist.shape[0] < 2:
        raise ModelError("a Lipschitz constant needs at least two points")
    diff = np.abs(f[:, None] - f[None, :])
    off = ~np.eye(f.size, dtype=bool)
    dup = off & (dist == 0)
    if np.any(diff[dup] > 0):
        raise ModelError("duplicate coordinates carry different values: infinite Lipschitz constant")
    ok = off & (dist > 0)
    if not ok.any():
        raise ModelError("a Lipschitz constant needs two distinct coordinates")
    return float(np.max(diff[ok] / dist[ok]))


def kernel_lipschitz_in_state(model) -> float:
    """max over actions and state pairs of W1(T(.|x,u), T(.|y,u)) / d(x, y)."""
    coords = model.coords
    dist = _pairwise(coords)
    n = model.n_states
    if n < 2:
        raise ModelError("need at least two states")
    off = ~np.eye(n, dtype=bool)
    best = 0.0
    for u in range(model.n_actions):
        rows = model.kernel[:, u, :]
        if coords.shape[1] == 1:
            order = np.argsort(coords[:, 0], kind="stable")
            gaps = np.diff(coords[order, 0])
            cdf = np.cumsum(rows[:, order], axis=1)[:, :-1]
            wd = np.empty((n, n))
            for i in range(n):
                wd[i] = np.abs(cdf - cdf[i]) @ gaps
        else:
            wd = np.zeros((n, n))
            for i in range(n):
                for j in range(i + 1, n):
                    wd[i, j] = wd[j, i] = row_w1(rows[i], rows[j], coords)
        dup = off & (dist == 0)
        if np.any(wd[dup] > 1e-12):
            raise ModelError("duplicate coordinates with different transition laws")
        ok = off & (dist > 0)
        best = max(best, float(np.max(wd[ok] / dist[ok])))
    return best


def lipschitz_in_state(values, coords) -> float:
    """Largest Lipschitz constant in the state of a (states, actions) table, taken over actions."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return lipschitz_constant(values, coords)
    return max(lipschitz_constant(values[:, u], coords) for u in range(values.shape[1]))
