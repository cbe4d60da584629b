import itertools

import numpy as np
import pytest

from bptrack.association import (
    AssociationProblem,
    bp_marginals,
    consistency,
    enumerate_marginals,
)
from bptrack.errors import DegenerateProblem, DimensionMismatch, TooLarge
from bptrack.numerics import Rng


def marginals_by_b_enumeration(problem):
    """Independent oracle: enumerate measurement-oriented vectors instead."""
    beta = problem.pair_weights
    xi = problem.unassoc_weights
    n_obj, n_meas = beta.shape[0], len(xi)
    po = np.zeros((n_obj, n_meas + 1))
    meas = np.zeros((n_meas, n_obj + 1))
    total = 0.0
    for b in itertools.product(range(n_obj + 1), repeat=n_meas):
        owners = [o for o in b if o > 0]
        if len(set(owners)) != len(owners):
            continue  # an object may claim at most one measurement
        a = [0] * n_obj
        for j, owner in enumerate(b):
            if owner > 0:
                a[owner - 1] = j + 1
        weight = 1.0
        for i in range(n_obj):
            weight *= beta[i, a[i]]
        for j in range(n_meas):
            if b[j] == 0:
                weight *= xi[j]
        total += weight
        for i in range(n_obj):
            po[i, a[i]] += weight
        for j in range(n_meas):
            meas[j, b[j]] += weight
    return po / total, meas / total


def random_problem(rng, n_obj, n_meas):
    beta = rng.uniform(0.1, 2.0, (n_obj, n_meas + 1))
    xi = rng.uniform(0.5, 3.0, n_meas)
    return AssociationProblem(beta, xi)


def random_geometric_problem(rng, n_obj, n_meas, p_d=0.9, sigma=0.7):
    """Likelihood-ratio-structured tables from random object/measurement geometry."""
    obj = rng.uniform(0.0, 10.0, (n_obj, 2))
    meas = np.empty((n_meas, 2))
    for j in range(n_meas):
        if j < n_obj and rng.random() < 0.8:
            meas[j] = obj[j] + sigma * rng.standard_normal(2)
        else:
            meas[j] = rng.uniform(0.0, 10.0, 2)
    clutter_intensity = 0.05
    beta = np.empty((n_obj, n_meas + 1))
    beta[:, 0] = 1.0 - p_d
    for i in range(n_obj):
        d2 = np.sum((meas - obj[i]) ** 2, axis=1)
        like = np.exp(-0.5 * d2 / sigma**2) / (2 * np.pi * sigma**2)
        beta[i, 1:] = p_d * like / clutter_intensity
    xi = 1.0 + rng.uniform(0.0, 0.5, n_meas)
    return AssociationProblem(beta, xi)


class TestConsistency:
    def test_mutual(self):
        assert consistency([1], [1])

    def test_violation(self):
        assert not consistency([1], [0])

    def test_all_unassociated(self):
        assert consistency([0, 0], [0])

    def test_out_of_range(self):
        with pytest.raises(DimensionMismatch):
            consistency([2], [0])

    def test_matches_pairwise_definition(self):
        # brute-force cross-check of the factorized pairwise rule
        rng = Rng(5)
        for _ in range(50):
            n_obj, n_meas = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            a = [int(rng.integers(0, n_meas + 1)) for _ in range(n_obj)]
            b = [int(rng.integers(0, n_obj + 1)) for _ in range(n_meas)]
            expected = all(
                not ((a[i] == j + 1) != (b[j] == i + 1))
                for i in range(n_obj)
                for j in range(n_meas)
            )
            assert consistency(a, b) == expected


class TestEnumeration:
    def test_single_pair_split(self):
        problem = AssociationProblem([[0.5, 0.5]], [1.0])
        marg = enumerate_marginals(problem)
        assert marg.po_assoc[0, 1] == pytest.approx(0.5)
        assert marg.meas_assoc[0, 0] == pytest.approx(0.5)

    def test_impossible_association(self):
        problem = AssociationProblem([[0.7, 0.0, 0.0]], [1.0, 1.0])
        marg = enumerate_marginals(problem)
        assert marg.po_assoc[0, 0] == pytest.approx(1.0)

    def test_against_independent_enumeration(self):
        rng = Rng(17)
        for _ in range(20):
            problem = random_problem(rng, 2, 2)
            marg = enumerate_marginals(problem)
            po, meas = marginals_by_b_enumeration(problem)
            assert np.allclose(marg.po_assoc, po, atol=1e-12)
            assert np.allclose(marg.meas_assoc, meas, atol=1e-12)

    def test_too_large(self):
        with pytest.raises(TooLarge):
            enumerate_marginals(random_problem(Rng(0), 9, 2))

    def test_degenerate(self):
        with pytest.raises(DegenerateProblem):
            enumerate_marginals(AssociationProblem([[0.0, 0.0]], [0.0]))


class TestBpMarginals:
    def test_tree_exact_single_object(self):
        rng = Rng(23)
        for _ in range(30):
            n_meas = int(rng.integers(1, 6))
            problem = random_problem(rng, 1, n_meas)
            bp = bp_marginals(problem, tol=1e-12)
            exact = enumerate_marginals(problem)
            assert np.allclose(bp.po_assoc, exact.po_assoc, atol=1e-9)
            assert np.allclose(bp.meas_assoc, exact.meas_assoc, atol=1e-9)

    def test_tree_exact_single_measurement(self):
        rng = Rng(29)
        for _ in range(30):
            n_obj = int(rng.integers(1, 6))
            problem = random_problem(rng, n_obj, 1)
            bp = bp_marginals(problem, tol=1e-12)
            exact = enumerate_marginals(problem)
            assert np.allclose(bp.po_assoc, exact.po_assoc, atol=1e-9)
            assert np.allclose(bp.meas_assoc, exact.meas_assoc, atol=1e-9)

    def test_rows_normalized(self):
        rng = Rng(31)
        for _ in range(10):
            problem = random_problem(rng, 4, 4)
            marg = bp_marginals(problem)
            assert np.allclose(marg.po_assoc.sum(axis=1), 1.0, atol=1e-9)
            assert np.allclose(marg.meas_assoc.sum(axis=1), 1.0, atol=1e-9)

    def test_argmax_matches_enumeration(self):
        rng = Rng(37)
        hits = 0
        for _ in range(100):
            problem = random_geometric_problem(rng, 4, 4)
            bp = bp_marginals(problem, tol=1e-8)
            exact = enumerate_marginals(problem)
            if np.array_equal(np.argmax(bp.po_assoc, axis=1),
                              np.argmax(exact.po_assoc, axis=1)):
                hits += 1
        assert hits >= 95

    def test_scale_invariance(self):
        rng = Rng(41)
        problem = random_problem(rng, 3, 3)
        scaled = AssociationProblem(problem.pair_weights.copy(),
                                    problem.unassoc_weights.copy())
        scaled.pair_weights[1] *= 7.5
        a = bp_marginals(problem, tol=1e-10)
        b = bp_marginals(scaled, tol=1e-10)
        assert np.allclose(a.po_assoc, b.po_assoc, atol=1e-9)
        assert np.allclose(a.meas_assoc, b.meas_assoc, atol=1e-9)

    def test_messages_finite_positive_inputs(self):
        rng = Rng(43)
        for _ in range(20):
            problem = random_problem(rng, 5, 5)
            marg = bp_marginals(problem)
            assert np.all(np.isfinite(marg.po_assoc))
            assert np.all(np.isfinite(marg.meas_assoc))
            assert np.all(marg.po_assoc >= 0)

    def test_zero_row_short_circuit(self):
        problem = AssociationProblem([[0.4, 0.0, 0.0], [0.1, 1.0, 2.0]], [1.0, 1.0])
        marg = bp_marginals(problem)
        assert marg.po_assoc[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_empty_shapes(self):
        marg = bp_marginals(AssociationProblem(np.zeros((0, 3)), np.ones(2)))
        assert marg.po_assoc.shape == (0, 3)
        assert np.allclose(marg.meas_assoc[:, 0], 1.0)

    def test_convergence_flag_and_iterations(self):
        problem = random_problem(Rng(47), 4, 4)
        marg = bp_marginals(problem, max_iter=200, tol=1e-6)
        assert marg.converged
        assert 1 <= marg.iterations < 200
