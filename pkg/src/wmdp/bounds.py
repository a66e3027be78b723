"""Closed-form perturbation bounds, each returned with its inputs and term breakdown.

A :class:`BoundReport` stores the inputs it was computed from, so ``recompute()``
re-derives the value from the registered formula and ``holds`` compares it to a
measured quantity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import FiniteMDP, ModelError
from .metrics import DiscreteMeasure, kernel_lipschitz_in_state, row_w1, w1_1d, w1_exact

NUMERIC_TOL = 1e-10  # absolute + relative allowance for floating point in ``holds``


def _frac(a, b):
    if b <= 0:
        raise ModelError("bound is vacuous: a denominator is not positive")
    return a / b


def _check_beta(beta):
    if not 0 < beta < 1:
        raise ModelError(f"discount factor {beta} outside (0, 1)")


def _terms_value_continuity_discounted(dc, beta, d_value):
    return {"cost": dc / (1 - beta), "kernel": beta * d_value / (1 - beta)}


def _terms_robust_discounted_1(dc, beta, d_value_ref):
    return {"cost": 2 * dc / (1 - beta) ** 2, "kernel": 2 * beta * d_value_ref / (1 - beta) ** 2}


def _terms_robust_discounted_2(dc, beta, d_value_ref, d_value_approx):
    return {"cost": 2 * dc / (1 - beta), "kernel": beta * (d_value_ref + d_value_approx) / (1 - beta)}


def _terms_robust_discounted_3(dc, beta, d_value_approx):
    return {"cost": 2 * dc / (1 - beta), "kernel": 2 * beta * d_value_approx / (1 - beta)}


def _terms_value_continuity_average(dc, d_bias):
    return {"cost": dc, "kernel": d_bias}


def _terms_robust_average(dc, d_bias, d_bias_minorizers, epsilon):
    return {"cost": (2 + epsilon) / epsilon * dc,
            "kernel": (2 + epsilon) / epsilon * d_bias,
            "minorizer": (2 + epsilon) * d_bias_minorizers}


def _lip_value(lip_cost, lip_kernel, beta):
    return _frac(lip_cost, 1 - beta * lip_kernel)


def _terms_cor_discounted_value(dc, dw1, beta, lip_cost, lip_kernel):
    return {"cost": dc / (1 - beta),
            "kernel": beta * _lip_value(lip_cost, lip_kernel, beta) * dw1 / (1 - beta)}


def _terms_cor_discounted_policy(dc, dw1, beta, lip_cost, lip_kernel):
    return {"cost": 2 * dc / (1 - beta) ** 2,
            "kernel": 2 * beta * _lip_value(lip_cost, lip_kernel, beta) * dw1 / (1 - beta) ** 2}


def _terms_cor_discounted_policy_both(dc, dw1, beta, lip_cost, lip_kernel, lip_cost_approx, lip_kernel_approx):
    both = _lip_value(lip_cost, lip_kernel, beta) + _lip_value(lip_cost_approx, lip_kernel_approx, beta)
    return {"cost": 2 * dc / (1 - beta), "kernel": beta * both * dw1 / (1 - beta)}


def _terms_cor_average_value(dc, dw1, lip_cost, lip_kernel):
    return {"cost": dc, "kernel": _lip_value(lip_cost, lip_kernel, 1.0) * dw1}


def _terms_cor_average_policy(dc, dw1, dw1_minorizers, epsilon, lip_cost, lip_kernel):
    L = _lip_value(lip_cost, lip_kernel, 1.0)
    k = (2 + epsilon) / epsilon
    return {"cost": k * dc, "kernel": k * L * dw1, "minorizer": k * epsilon * L * dw1_minorizers}


def _terms_cor_vanishing_value(dc, dw1, lip_cost, lip_kernel):
    return _terms_cor_average_value(dc, dw1, lip_cost, lip_kernel)


def _terms_cor_vanishing_policy(dc, dw1, lip_cost, lip_kernel, lip_cost_approx, lip_kernel_approx):
    both = _lip_value(lip_cost, lip_kernel, 1.0) + _lip_value(lip_cost_approx, lip_kernel_approx, 1.0)
    return {"cost": 2 * dc, "kernel": both * dw1}


def _terms_quantization_discounted(delta, beta, lip_cost, lip_kernel):
    return {"quantization": 2 * lip_cost * delta / ((1 - beta) ** 2 * (1 - beta * lip_kernel))}


def _terms_quantization_average(delta, epsilon, lip_cost, lip_kernel):
    return {"quantization": (1 + 2 / epsilon) * _lip_value(lip_cost, lip_kernel, 1.0) * delta}


def _terms_noise_discrepancy(d_value, beta):
    return {"noise": 2 * beta * d_value / (1 - beta)}


def _terms_noise_w1_discounted(w1_noise, beta, lip_cost, lip_fx, lip_fw):
    return {"noise": 2 * beta * lip_cost * lip_fw * w1_noise / ((1 - beta) * (1 - beta * lip_fx))}


def _terms_noise_w1_average(w1_noise, lip_cost, lip_fx, lip_fw):
    return {"noise": 2 * lip_cost * lip_fw * _frac(w1_noise, 1 - lip_fx)}


def _terms_noise_average_discrepancy(d_bias_true, d_bias_approx):
    return {"true": d_bias_true, "approx": d_bias_approx}


def _terms_joint(rate_term, r_error, beta, lip_value):
    return {"rate": 2 * beta * rate_term / (1 - beta),
            "drift": 2 * beta * 2 * lip_value * r_error / (1 - beta)}


def _terms_invariant(sup_row_w1, lip_kernel):
    return {"kernel": _frac(sup_row_w1, 1 - lip_kernel)}


FORMULAS = {
    "value-continuity-discounted": _terms_value_continuity_discounted,
    "robust-discounted-1": _terms_robust_discounted_1,
    "robust-discounted-2": _terms_robust_discounted_2,
    "robust-discounted-3": _terms_robust_discounted_3,
    "value-continuity-average": _terms_value_continuity_average,
    "robust-average": _terms_robust_average,
    "lipschitz-discounted-value": _terms_cor_discounted_value,
    "lipschitz-discounted-policy": _terms_cor_discounted_policy,
    "lipschitz-discounted-policy-both": _terms_cor_discounted_policy_both,
    "lipschitz-average-value": _terms_cor_average_value,
    "lipschitz-average-policy": _terms_cor_average_policy,
    "lipschitz-vanishing-value": _terms_cor_vanishing_value,
    "lipschitz-vanishing-policy": _terms_cor_vanishing_policy,
    "quantization-discounted": _terms_quantization_discounted,
    "quantization-average": _terms_quantization_average,
    "noise-discrepancy-discounted": _terms_noise_discrepancy,
    "noise-w1-discounted": _terms_noise_w1_discounted,
    "noise-w1-average": _terms_noise_w1_average,
    "noise-discrepancy-average": _terms_noise_average_discrepancy,
    "joint-model-noise": _terms_joint,
    "invariant-measure": _terms_invariant,
}


@dataclass
class BoundReport:
    """A bound value with the inputs it came from and the per-term split."""

    tag: str
    inputs: dict
    value: float
    terms: dict
    measured: float | None = None
    slack: float = 0.0
    notes: dict = field(default_factory=dict)

    def recompute(self) -> float:
        return float(sum(FORMULAS[self.tag](**self.inputs).values()))

    @property
    def holds(self) -> bool:
        if self.measured is None:
            raise ModelError("no measured quantity attached")
        allowance = NUMERIC_TOL * (1 + abs(self.value))
        return self.measured <= self.value + self.slack + allowance

    @property
    def margin(self):
        """bound + slack - measured; nonnegative when the bound holds."""
        return self.value + self.slack - self.measured

    def with_measured(self, measured, slack=None):
        self.measured = float(measured)
        if slack is not None:
            self.slack = float(slack)
        return self

    def to_dict(self):
        return {"tag": self.tag, "inputs": self.inputs, "value": self.value, "terms": self.terms,
                "measured": self.measured, "slack": self.slack, "notes": self.notes}


def _report(tag, measured=None, slack=0.0, notes=None, **inputs):
    inputs = {k: float(v) for k, v in inputs.items()}
    for k, v in inputs.items():
        if not math.isfinite(v):
            raise ModelError(f"input {k} is not finite")
        if k != "beta" and k != "epsilon" and v < 0:
            raise ModelError(f"input {k} must be nonnegative")
    if "beta" in inputs:
        _check_beta(inputs["beta"])
    if "epsilon" in inputs and not 0 < inputs["epsilon"] <= 1:
        raise ModelError("epsilon must lie in (0, 1]")
    terms = FORMULAS[tag](**inputs)
    value = float(sum(terms.values()))
    if value < 0 or not math.isfinite(value):
        raise ModelError(f"bound {tag} evaluated to {value}")
    rep = BoundReport(tag, inputs, value, terms, None, float(slack), dict(notes or {}))
    if measured is not None:
        rep.measured = float(measured)
    return rep


def value_continuity_discounted(dc, beta, d_value=None, lip_value=None, dw1=None, measured=None):
    """Gap between optimal discounted values of two models.

    Pass either the discrepancy ``d_value`` of the kernels against the reference optimal
    value, or a Lipschitz constant of that value together with the kernel W1 distance.
    """
    if d_value is None:
        if lip_value is None or dw1 is None:
            raise ModelError("need d_value or (lip_value, dw1)")
        d_value = lip_value * dw1
    return _report("value-continuity-discounted", measured, dc=dc, beta=beta, d_value=d_value)


def robust_discounted(variant, dc, beta, d_value_ref=0.0, d_value_approx=0.0, measured=None):
    """Loss of the approximate model's optimal policy; ``variant`` picks one of three forms.

    Variant 1 uses only the reference value, variant 3 only the approximate model's
    value, variant 2 both.
    """
    if variant == 1:
        return _report("robust-discounted-1", measured, dc=dc, beta=beta, d_value_ref=d_value_ref)
    if variant == 2:
        return _report("robust-discounted-2", measured, dc=dc, beta=beta, d_value_ref=d_value_ref,
                       d_value_approx=d_value_approx)
    if variant == 3:
        return _report("robust-discounted-3", measured, dc=dc, beta=beta, d_value_approx=d_value_approx)
    raise ModelError(f"unknown variant {variant}")


def robust_discounted_all(dc, beta, d_value_ref, d_value_approx, measured=None):
    """All three forms; the tightest one is flagged in its notes."""
    reports = [robust_discounted(v, dc, beta, d_value_ref, d_value_approx, measured) for v in (1, 2, 3)]
    best = min(range(3), key=lambda i: reports[i].value)
    reports[best].notes["tightest"] = True
    return reports


def value_continuity_average_minor(dc, d_bias, measured=None):
    return _report("value-continuity-average", measured, dc=dc, d_bias=d_bias)


def robust_average_minor(dc, d_bias, d_bias_minorizers, epsilon, measured=None):
    return _report("robust-average", measured, dc=dc, d_bias=d_bias,
                   d_bias_minorizers=d_bias_minorizers, epsilon=epsilon)


def lipschitz_corollaries(which, line, *, dc, dw1, lip_cost, lip_kernel, beta=None,
                          lip_cost_approx=None, lip_kernel_approx=None, epsilon=None,
                          dw1_minorizers=0.0, measured=None):
    """Bounds with value/bias Lipschitz constants expressed through cost and kernel constants.

    ``which`` is "discounted" (lines 1-3), "average-minorized" (lines 1-2) or
    "vanishing-discount" (lines 1-2).
    """
    if which == "discounted":
        if beta is None:
            raise ModelError("the discounted family needs beta")
        if beta * lip_kernel >= 1:
            raise ModelError("need beta * ||T||_Lip < 1")
        if line == 1:
            return _report("lipschitz-discounted-value", measured, dc=dc, dw1=dw1, beta=beta,
                           lip_cost=lip_cost, lip_kernel=lip_kernel)
        if line == 2:
            return _report("lipschitz-discounted-policy", measured, dc=dc, dw1=dw1, beta=beta,
                           lip_cost=lip_cost, lip_kernel=lip_kernel)
        if line == 3:
            return _report("lipschitz-discounted-policy-both", measured, dc=dc, dw1=dw1, beta=beta,
                           lip_cost=lip_cost, lip_kernel=lip_kernel, lip_cost_approx=lip_cost_approx,
                           lip_kernel_approx=lip_kernel_approx)
    elif which in ("average-minorized", "vanishing-discount"):
        if lip_kernel >= 1:
            raise ModelError("need ||T||_Lip < 1")
        if line == 1:
            tag = "lipschitz-average-value" if which == "average-minorized" else "lipschitz-vanishing-value"
            return _report(tag, measured, dc=dc, dw1=dw1, lip_cost=lip_cost, lip_kernel=lip_kernel)
        if line == 2 and which == "average-minorized":
            return _report("lipschitz-average-policy", measured, dc=dc, dw1=dw1,
                           dw1_minorizers=dw1_minorizers, epsilon=epsilon, lip_cost=lip_cost,
                           lip_kernel=lip_kernel)
        if line == 2:
            return _report("lipschitz-vanishing-policy", measured, dc=dc, dw1=dw1, lip_cost=lip_cost,
                           lip_kernel=lip_kernel, lip_cost_approx=lip_cost_approx,
                           lip_kernel_approx=lip_kernel_approx)
    else:
        raise ModelError(f"unknown Lipschitz bound family {which!r}")
    raise ModelError(f"no line {line} for {which}")


def quantization_bounds(delta, lip_cost, lip_kernel, beta=None, epsilon=None, measured=None):
    """Loss of the extended aggregated-model policy, discounted (beta given) or average (epsilon given)."""
    if beta is not None:
        if beta * lip_kernel >= 1:
            raise ModelError("need beta * ||T||_Lip < 1")
        return _report("quantization-discounted", measured, delta=delta, beta=beta,
                       lip_cost=lip_cost, lip_kernel=lip_kernel)
    if epsilon is None:
        raise ModelError("give beta for the discounted bound or epsilon for the average one")
    if lip_kernel >= 1:
        raise ModelError("need ||T||_Lip < 1")
    return _report("quantization-average", measured, delta=delta, epsilon=epsilon,
                   lip_cost=lip_cost, lip_kernel=lip_kernel)


def noise_bounds(which, *, beta=None, d_value=None, w1_noise=None, lip_cost=None, lip_fx=None,
                 lip_fw=None, d_bias_true=None, d_bias_approx=None, measured=None, slack=0.0):
    """Noise-law perturbation bounds.

    ``which`` is "discrepancy" (discounted, through a value-composed discrepancy),
    "w1" (discounted, through W1 of the noise laws), "w1-average" or
    "discrepancy-average".
    """
    if which == "discrepancy":
        return _report("noise-discrepancy-discounted", measured, slack, d_value=d_value, beta=beta)
    if which == "w1":
        if beta * lip_fx >= 1:
            raise ModelError("need beta * ||f||_Lip(X) < 1")
        return _report("noise-w1-discounted", measured, slack, w1_noise=w1_noise, beta=beta,
                       lip_cost=lip_cost, lip_fx=lip_fx, lip_fw=lip_fw)
    if which == "w1-average":
        return _report("noise-w1-average", measured, slack, w1_noise=w1_noise, lip_cost=lip_cost,
                       lip_fx=lip_fx, lip_fw=lip_fw)
    if which == "discrepancy-average":
        return _report("noise-discrepancy-average", measured, slack, d_bias_true=d_bias_true,
                       d_bias_approx=d_bias_approx)
    raise ModelError(f"unknown noise bound {which!r}")


def joint_model_noise(rate_term, r_error, beta, lip_value, measured=None):
    """Loss split into a pure-noise discrepancy term and a drift-error term.

    ``rate_term`` is the value-composed discrepancy between the true noise law and the
    empirical law of the true (hidden) noises; ``lip_value`` bounds the Lipschitz constant
    of the value function used in that discrepancy.
    """
    return _report("joint-model-noise", measured, rate_term=rate_term, r_error=r_error,
                   beta=beta, lip_value=lip_value)


def _stationary(P):
    n = P.shape[0]
    A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    rank = np.linalg.matrix_rank(P.T - np.eye(n), tol=1e-10)
    if rank < n - 1:
        raise ModelError("chain has more than one invariant measure")
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def invariant_measure_perturbation(T, S, coords) -> BoundReport:
    """W1 between invariant laws of two control-free kernels versus the row-wise bound.

    ``T`` and ``S`` are (n, n) transition matrices on ``coords``.
    """
    T = np.asarray(T, dtype=float)
    S = np.asarray(S, dtype=float)
    if T.ndim == 3:
        T = T[:, 0, :]
    if S.ndim == 3:
        S = S[:, 0, :]
    if T.shape != S.shape or T.shape[0] != T.shape[1]:
        raise ModelError("need two square transition matrices of the same size")
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    rho_T, rho_S = _stationary(T), _stationary(S)
    mu = DiscreteMeasure.on_states(coords, rho_T)
    nu = DiscreteMeasure.on_states(coords, rho_S)
    lhs = w1_1d(mu, nu) if coords.shape[1] == 1 else w1_exact(mu, nu)
    sup_row = float(row_w1(T, S, coords).max())
    lip = kernel_lipschitz_in_state(FiniteMDP(coords, [[0.0]], T[:, None, :], np.zeros((T.shape[0], 1))))
    if lip >= 1:
        raise ModelError(f"kernel is not a contraction in W1 (Lipschitz constant {lip:.4g})")
    rep = _report("invariant-measure", lhs, sup_row_w1=sup_row, lip_kernel=lip)
    rep.notes["invariant_T"] = rho_T.tolist()
    rep.notes["invariant_S"] = rho_S.tolist()
    return rep


__all__ = [
    "BoundReport", "FORMULAS", "value_continuity_discounted", "robust_discounted",
    "robust_discounted_all", "value_continuity_average_minor", "robust_average_minor",
    "lipschitz_corollaries", "quantization_bounds", "noise_bounds", "joint_model_noise",
    "invariant_measure_perturbation",
]
