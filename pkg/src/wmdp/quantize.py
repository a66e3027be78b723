"""State aggregation: partitions, the aggregated finite model and its extensions back to fine states."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .mdp import FiniteMDP, ModelError
from .metrics import DiscreteMeasure


def _bin_diameter(points):
    if points.shape[0] < 2:
        return 0.0
    if points.shape[1] == 1:
        return float(points.max() - points.min())
    return float(cdist(points, points).max())


@dataclass(frozen=True, eq=False)
class Partition:
    """Assignment of fine states to bins with one representative fine state per bin.

    ``labels[x]`` is the bin of fine state ``x``; ``representatives[i]`` is the index of
    the fine state standing in for bin ``i``; ``delta`` is the largest bin diameter.
    """

    coords: np.ndarray
    labels: np.ndarray
    representatives: np.ndarray
    delta: float = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        labels = np.array(self.labels, dtype=int)
        reps = np.array(self.representatives, dtype=int)
        if labels.shape != (coords.shape[0],):
            raise ModelError("need one bin label per fine state")
        n_bins = reps.size
        if n_bins == 0 or labels.min() < 0 or labels.max() >= n_bins:
            raise ModelError("bin labels out of range")
        counts = np.bincount(labels, minlength=n_bins)
        if np.any(counts == 0):
            raise ModelError(f"bin {int(np.argmin(counts))} holds no fine state")
        if np.any(labels[reps] != np.arange(n_bins)):
            bad = int(np.nonzero(labels[reps] != np.arange(n_bins))[0][0])
            raise ModelError(f"representative of bin {bad} lies outside the bin")
        delta = max(_bin_diameter(coords[labels == i]) for i in range(n_bins))
        for name, arr in (("coords", coords), ("labels", labels), ("representatives", reps)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "delta", delta)

    @property
    def n_bins(self):
        return self.representatives.size

    @property
    def n_fine(self):
        return self.labels.size

    def membership(self):
        """(n_fine, n_bins) 0/1 matrix."""
        A = np.zeros((self.n_fine, self.n_bins))
        A[np.arange(self.n_fine), self.labels] = 1.0
        return A

    def to_dict(self):
        return {"labels": self.labels.tolist(), "representatives": self.representatives.tolist(),
                "delta": self.delta}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc, coords):
        return cls(coords, doc["labels"], doc["representatives"])

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def identity_partition(coords) -> Partition:
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    return Partition(coords, np.arange(n), np.arange(n))


def uniform_partition(coords, bins_per_axis: int) -> Partition:
    """Equal axis-aligned cells of side 1/bins_per_axis over the unit cube.

    Cell ``k`` along an axis is [k/m, (k+1)/m), with the last cell closed on the right.
    The representative is the fine state closest to the cell centre (lowest index on ties).
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    m = int(bins_per_axis)
    if m < 1:
        raise ModelError("bins_per_axis must be positive")
    if np.any(coords < 0) or np.any(coords > 1):
        raise ModelError("fine coordinates must lie in the unit cube")
    d = coords.shape[1]
    cell = np.minimum(np.floor(coords * m).astype(int), m - 1)
    flat = np.ravel_multi_index(tuple(cell.T), (m,) * d)
    n_cells = m ** d
    counts = np.bincount(flat, minlength=n_cells)
    if np.any(counts == 0):
        empty = int(np.argmin(counts))
        idx = np.unravel_index(empty, (m,) * d)
        raise ModelError(f"bin {empty} (cell {tuple(int(i) for i in idx)}) contains no fine state")
    centres = (np.stack(np.unravel_index(np.arange(n_cells), (m,) * d), axis=1) + 0.5) / m
    reps = np.empty(n_cells, dtype=int)
    for b in range(n_cells):
        members = np.nonzero(flat == b)[0]
        dist = np.linalg.norm(coords[members] - centres[b], axis=1)
        reps[b] = members[np.argmin(dist)]
    return Partition(coords, flat, reps)


def _state_weights(coords, pi):
    n = coords.shape[0]
    if pi is None:
        return np.full(n, 1.0 / n)
    if isinstance(pi, DiscreteMeasure):
        if pi.support.shape != coords.shape or not np.array_equal(pi.support, coords):
            raise ModelError("weighting measure must live on the fine states")
        return pi.weights
    w = np.asarray(pi, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
        raise ModelError("weighting vector must be a probability vector over fine states")
    return w


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    model: FiniteMDP
    partition: Partition
    weights: np.ndarray  # weighting measure over fine states


def _bin_average_matrix(p: Partition, w):
    """(n_fine, n_bins) matrix whose column i is pi restricted to bin i, normalized."""
    W = p.membership() * w[:, None]
    mass = W.sum(axis=0)
    if np.any(mass <= 0):
        raise ModelError(f"bin {int(np.argmin(mass))} has zero weighting mass")
    return W / mass


def build_quantized_model(fine: FiniteMDP, p: Partition, pi=None) -> QuantizedModel:
    """Finite model on the representatives with pi-averaged cost and bin-to-bin kernel."""
    if p.n_fine != fine.n_states:
        raise ModelError("partition and model disagree on the number of states")
    w = _state_weights(fine.coords, pi)
    avg = _bin_average_matrix(p, w)
    cost = avg.T @ fine.cost
    to_bins = fine.kernel @ p.membership()  # T(B_j | x, u)
    kernel = np.einsum("xi,xuj->iuj", avg, to_bins)
    kernel /= kernel.sum(axis=2, keepdims=True)
    model = FiniteMDP(fine.coords[p.representatives], fine.actions, kernel, cost)
    return QuantizedModel(model, p, w)


def extend_values(values, p: Partition):
    """Piecewise-constant extension: fine state x in bin i receives values[i]."""
    values = np.asarray(values)
    if values.shape[0] != p.n_bins:
        raise ModelError("need one value per bin")
    return values[p.labels]


def extend_policy(policy, p: Partition):
    return extend_values(np.asarray(policy, dtype=int), p)


def extend_kernel_averaged(fine: FiniteMDP, p: Partition, pi=None):
    """Kernel on fine states whose rows in bin i are the pi-average of the fine rows of bin i."""
    avg = _bin_average_matrix(p, _state_weights(fine.coords, pi))
    per_bin = np.einsum("xi,xuy->iuy", avg, fine.kernel)
    return per_bin[p.labels]


def extend_kernel_on_reps(S, p: Partition):
    """Fine kernel whose row at x in bin i puts mass S(y_j | y_i, u) on representative y_j."""
    S = np.asarray(S, dtype=float)
    M = p.n_bins
    if S.ndim != 3 or S.shape[0] != M or S.shape[2] != M:
        raise ModelError(f"kernel on representatives must have shape ({M}, m, {M})")
    out = np.zeros((p.n_fine, S.shape[1], p.n_fine))
    out[:, :, p.representatives] = S[p.labels]
    return out


def quantize_minorizer(rho, p: Partition) -> DiscreteMeasure:
    """Push a measure on fine states onto the representatives: tau(y_j) = rho(B_j)."""
    w = _state_weights(p.coords, rho)
    tau = np.bincount(p.labels, weights=w, minlength=p.n_bins)
    return DiscreteMeasure.on_states(p.coords[p.representatives], tau)
