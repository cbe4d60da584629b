"""Probabilistic data association.

Marginal association probabilities for the dual object-oriented /
measurement-oriented representation: an exact enumeration oracle for small
problems and an iterative message-passing solver for the general case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateProblem, DimensionMismatch, TooLarge

ENUM_LIMIT = 8
_TINY = 1e-300


@dataclass
class AssociationProblem:
    """Nonnegative association weights.

    pair_weights: (I, J+1) table; column 0 is the weight of object i being
    associated with no measurement, column j>=1 the weight of pairing with
    measurement j-1.
    unassoc_weights: (J,) weight of measurement j not being claimed by any
    tracked object (clutter mass normalized to 1 plus the new-object mass).
    """

    pair_weights: np.ndarray
    unassoc_weights: np.ndarray

    def __post_init__(self):
        self.pair_weights = np.asarray(self.pair_weights, dtype=float)
        self.unassoc_weights = np.asarray(self.unassoc_weights, dtype=float)

    @property
    def n_objects(self) -> int:
        return self.pair_weights.shape[0]

    @property
    def n_measurements(self) -> int:
        return len(self.unassoc_weights)


@dataclass
class AssociationMarginals:
    """Normalized marginal association probabilities.

    po_assoc: (I, J+1); row i sums to 1, column 0 = P(object i unassociated).
    meas_assoc: (J, I+1); row j sums to 1, column 0 = P(measurement j unclaimed).
    """

    po_assoc: np.ndarray
    meas_assoc: np.ndarray
    iterations: int
    converged: bool


def consistency(a: np.ndarray, b: np.ndarray) -> bool:
    """True iff the object-oriented and measurement-oriented vectors agree.

    a[i] = j (1-based) claims measurement j for object i; b[j] = i (1-based)
    claims object i for measurement j; 0 means unassociated on both sides.
    """
    a = np.asarray(a, dtype=int)
    b = np.asarray(b, dtype=int)
    n_obj, n_meas = len(a), len(b)
    if np.any(a < 0) or np.any(a > n_meas):
        raise DimensionMismatch("object-oriented entries out of range")
    if np.any(b < 0) or np.any(b > n_obj):
        raise DimensionMismatch("measurement-oriented entries out of range")
    for i in range(n_obj):
        if a[i] != 0 and b[a[i] - 1] != i + 1:
            return False
    for j in range(n_meas):
        if b[j] != 0 and a[b[j] - 1] != j + 1:
            return False
    return True


def enumerate_marginals(problem: AssociationProblem) -> AssociationMarginals:
    """Exact marginals by summing over every consistent association event.

    Only one measurement-oriented vector is consistent with a given valid
    object-oriented vector, so it suffices to enumerate one-to-one object
    assignments and weight the untaken measurements by their unassociated mass.
    """
    n_obj = problem.n_objects
    n_meas = problem.n_measurements
    if n_obj > ENUM_LIMIT or n_meas > ENUM_LIMIT:
        raise TooLarge(f"enumeration bound is {ENUM_LIMIT}, got I={n_obj}, J={n_meas}")
    beta = problem.pair_weights
    xi = problem.unassoc_weights

    po_acc = np.zeros((n_obj, n_meas + 1))
    meas_acc = np.zeros((n_meas, n_obj + 1))
    assignment = np.zeros(n_obj, dtype=int)
    taken = np.zeros(n_meas, dtype=bool)
    total = 0.0

    def recurse(i: int, weight: float):
        nonlocal total
        if weight == 0.0:
            return
        if i == n_obj:
            event = weight
            for j in range(n_meas):
                if not taken[j]:
                    event *= xi[j]
            if event == 0.0:
                return
            total += event
            for k in range(n_obj):
                po_acc[k, assignment[k]] += event
            for j in range(n_meas):
                owner = 0
                for k in range(n_obj):
                    if assignment[k] == j + 1:
                        owner = k + 1
                        break
                meas_acc[j, owner] += event
            return
        assignment[i] = 0
        recurse(i + 1, weight * beta[i, 0])
        for j in range(n_meas):
            if not taken[j]:
                taken[j] = True
                assignment[i] = j + 1
                recurse(i + 1, weight * beta[i, j + 1])
                assignment[i] = 0
                taken[j] = False

    recurse(0, 1.0)
    if total <= 0.0:
        raise DegenerateProblem("total joint association mass is zero")
    return AssociationMarginals(po_acc / total, meas_acc / total, iterations=0, converged=True)


def bp_marginals(
    problem: AssociationProblem,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> AssociationMarginals:
    """Marginal association probabilities via synchronous message passing.

    Object-to-measurement messages mu and measurement-to-object messages nu are
    iterated until the largest message change drops below tol. Exact on
    tree-structured problems (I == 1 or J == 1); non-convergence is reported
    through the flag, never as an error.
    """
    if tol <= 0.0 or max_iter < 1:
        raise ValueError("tol must be > 0 and max_iter >= 1")
    beta = problem.pair_weights
    xi = problem.unassoc_weights
    n_obj = problem.n_objects
    n_meas = problem.n_measurements

    if n_obj == 0 or n_meas == 0:
        po = np.zeros((n_obj, n_meas + 1))
        po[:, 0] = 1.0
        meas = np.zeros((n_meas, n_obj + 1))
        meas[:, 0] = 1.0
        return AssociationMarginals(po, meas, iterations=0, converged=True)

    pair = beta[:, 1:]
    nu = np.ones((n_obj, n_meas))
    mu = np.zeros_like(nu)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        prod = pair * nu
        row_total = beta[:, :1] + prod.sum(axis=1, keepdims=True)
        mu_new = pair / np.maximum(row_total - prod, _TINY)
        col_total = xi + mu_new.sum(axis=0)
        nu_new = 1.0 / np.maximum(col_total - mu_new, _TINY)
        delta = max(
            float(np.max(np.abs(mu_new - mu))), float(np.max(np.abs(nu_new - nu)))
        )
        mu, nu = mu_new, nu_new
        if delta < tol:
            converged = True
            break

    weighted = pair * nu
    po_norm = beta[:, :1] + weighted.sum(axis=1, keepdims=True)
    po = np.empty((n_obj, n_meas + 1))
    po[:, :1] = beta[:, :1] / np.maximum(po_norm, _TINY)
    po[:, 1:] = weighted / np.maximum(po_norm, _TINY)

    meas_norm = xi + mu.sum(axis=0)
    meas = np.empty((n_meas, n_obj + 1))
    meas[:, 0] = xi / np.maximum(meas_norm, _TINY)
    meas[:, 1:] = (mu / np.maximum(meas_norm, _TINY)[None, :]).T
    return AssociationMarginals(po, meas, iterations=iterations, converged=converged)
