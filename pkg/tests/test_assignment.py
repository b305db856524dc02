import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from llplearn.assignment import (
    BruteForceCapExceeded,
    TransportInstance,
    assignment_objective,
    brute_force_assignment,
    solve_assignment,
)


def random_instance(rng, max_classes=4, max_size=8, integer_costs=True):
    num_classes = int(rng.integers(2, max_classes + 1))
    m = int(rng.integers(2, max_size + 1))
    cuts = np.sort(rng.integers(0, m + 1, size=num_classes - 1))
    counts = np.diff(np.concatenate([[0], cuts, [m]]))
    if integer_costs:
        costs = rng.integers(0, 101, size=(num_classes, m)).astype(float)
    else:
        costs = rng.normal(size=(num_classes, m)) * 10
    return TransportInstance(costs, counts)


class TestTransportInstance:
    def test_rejects_count_mismatch(self):
        with pytest.raises(ValueError):
            TransportInstance(np.zeros((2, 3)), np.array([1, 1]))

    def test_rejects_nan_costs(self):
        costs = np.zeros((2, 2))
        costs[0, 0] = np.nan
        with pytest.raises(ValueError):
            TransportInstance(costs, np.array([1, 1]))

    def test_rejects_negative_counts(self):
        with pytest.raises(ValueError):
            TransportInstance(np.zeros((2, 2)), np.array([3, -1]))


class TestSolveAssignment:
    def test_counts_force_single_class(self):
        costs = np.array([[3.0, -1.0], [0.0, 0.0]])
        Y = solve_assignment(TransportInstance(costs, np.array([2, 0])))
        assert Y.column_labels.tolist() == [0, 0]
        assert assignment_objective(Y, costs) == pytest.approx(2.0)

    def test_zero_cost_perfect_matching(self):
        costs = np.array([[0.0, 1.0], [1.0, 0.0]])
        Y = solve_assignment(TransportInstance(costs, np.array([1, 1])))
        assert Y.column_labels.tolist() == [0, 1]
        assert assignment_objective(Y, costs) == 0.0

    def test_matches_brute_force_on_seeded_instance(self):
        rng = np.random.default_rng(12345)
        costs = rng.normal(size=(3, 4))
        inst = TransportInstance(costs, np.array([2, 1, 1]))
        assert assignment_objective(solve_assignment(inst), costs) == pytest.approx(
            assignment_objective(brute_force_assignment(inst), costs), abs=1e-12)

    def test_single_class_instance(self):
        inst = TransportInstance(np.array([[5.0, 7.0, 1.0]]), np.array([3]))
        assert solve_assignment(inst).column_labels.tolist() == [0, 0, 0]

    def test_planted_zero_pattern_is_recovered(self):
        # costs 0 on one feasible pattern and 1 elsewhere select that pattern
        rng = np.random.default_rng(7)
        for trial in range(20):
            num_classes = int(rng.integers(2, 5))
            m = int(rng.integers(2, 9))
            planted = rng.integers(0, num_classes, size=m)
            counts = np.bincount(planted, minlength=num_classes)
            costs = np.ones((num_classes, m))
            costs[planted, np.arange(m)] = 0.0
            Y = solve_assignment(TransportInstance(costs, counts))
            assert Y.column_labels.tolist() == planted.tolist()

    def test_deterministic_under_repeated_calls(self):
        rng = np.random.default_rng(3)
        costs = rng.normal(size=(3, 6))
        inst = TransportInstance(costs, np.array([2, 2, 2]))
        first = solve_assignment(inst)
        for _ in range(5):
            assert solve_assignment(inst) == first


class TestOracleEquivalence:
    def test_integer_costs_exact(self):
        rng = np.random.default_rng(42)
        for _ in range(300):
            inst = random_instance(rng, integer_costs=True)
            a = assignment_objective(solve_assignment(inst), inst.costs)
            b = assignment_objective(brute_force_assignment(inst), inst.costs)
            assert a == b

    def test_real_costs_within_tolerance(self):
        rng = np.random.default_rng(43)
        for _ in range(300):
            inst = random_instance(rng, integer_costs=False)
            a = assignment_objective(solve_assignment(inst), inst.costs)
            b = assignment_objective(brute_force_assignment(inst), inst.costs)
            assert a == pytest.approx(b, abs=1e-9)

    def test_matches_scipy_on_expanded_matrix(self):
        # independent third route: duplicate each class row by its count and
        # run the Hungarian algorithm on the square matrix
        rng = np.random.default_rng(44)
        for _ in range(25):
            num_classes = int(rng.integers(2, 6))
            m = int(rng.integers(5, 40))
            cuts = np.sort(rng.integers(0, m + 1, size=num_classes - 1))
            counts = np.diff(np.concatenate([[0], cuts, [m]]))
            costs = rng.normal(size=(num_classes, m)) * 3
            inst = TransportInstance(costs, counts)
            mine = assignment_objective(solve_assignment(inst), costs)
            expanded = np.repeat(costs, counts, axis=0).T
            rows, cols = linear_sum_assignment(expanded)
            assert mine == pytest.approx(expanded[rows, cols].sum(), abs=1e-8)

    def test_feasibility_of_every_output(self):
        rng = np.random.default_rng(45)
        for _ in range(200):
            inst = random_instance(rng, integer_costs=False)
            Y = solve_assignment(inst)
            assert (Y.row_sums() == inst.class_counts).all()
            assert (Y.entries.sum(axis=0) == 1).all()

    def test_uniform_cost_shift_preserves_optimal_set(self):
        rng = np.random.default_rng(46)
        for _ in range(50):
            inst = random_instance(rng, integer_costs=False)
            shift = float(rng.normal()) * 5
            shifted = TransportInstance(inst.costs + shift, inst.class_counts)
            base_obj = assignment_objective(solve_assignment(inst), inst.costs)
            shifted_obj = assignment_objective(solve_assignment(shifted), shifted.costs)
            assert shifted_obj - base_obj == pytest.approx(shift * inst.bag_size, abs=1e-8)


class TestBruteForce:
    def test_all_one_class(self):
        inst = TransportInstance(np.zeros((3, 4)), np.array([4, 0, 0]))
        Y = brute_force_assignment(inst)
        assert Y.column_labels.tolist() == [0, 0, 0, 0]

    def test_degenerate_tie_objective(self):
        inst = TransportInstance(np.full((2, 3), 2.5), np.array([2, 1]))
        Y = brute_force_assignment(inst)
        assert assignment_objective(Y, inst.costs) == pytest.approx(7.5)
        assert (Y.row_sums() == inst.class_counts).all()

    def test_cap_is_enforced(self):
        inst = TransportInstance(np.zeros((2, 12)), np.array([6, 6]))
        with pytest.raises(BruteForceCapExceeded):
            brute_force_assignment(inst)

    def test_candidate_count_matches_multinomial(self):
        from math import comb
        inst = TransportInstance(np.zeros((3, 4)), np.array([2, 1, 1]))
        from llplearn.assignment import _feasible_label_arrays
        cands = _feasible_label_arrays(inst.class_counts)
        assert len(cands) == comb(4, 2) * comb(2, 1)  # 4!/(2!1!1!) = 12
        assert len({tuple(c) for c in cands.tolist()}) == len(cands)
