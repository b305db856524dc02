"""Exact minimum-cost assignment of instances to classes under count constraints.

The decision problem: given a real cost for assigning each of ``m`` instances
to each of ``C`` classes, pick one class per instance so that class ``c``
receives exactly ``k_c`` instances and the summed cost is minimal.  This is a
transportation problem (unit supplies, class demands ``k_c``), whose
constraint matrix is totally unimodular, so an integral optimum always
exists.  We solve it combinatorially with successive shortest paths over a
condensed class graph rather than handing it to an LP solver: integrality is
then structural, and ties between optima are broken by a fixed scan order so
identical inputs always yield identical assignments.

``brute_force_assignment`` is the verification oracle: it enumerates every
feasible assignment and is intentionally independent of the solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import PseudoLabelMatrix

# Reduced costs are differences of sums of input costs; anything more negative
# than this is an invariant violation rather than float noise.
_REDUCED_COST_EPS = 1e-12


class BruteForceCapExceeded(ValueError):
    """The instance is too large for exhaustive enumeration."""


@dataclass(frozen=True)
class TransportInstance:
    """Costs plus per-class row budgets for one assignment problem."""

    costs: np.ndarray           # (num_classes, bag_size), finite reals
    class_counts: np.ndarray    # (num_classes,), sums to bag_size

    def __post_init__(self):
        costs = np.asarray(self.costs, dtype=np.float64)
        counts = np.asarray(self.class_counts, dtype=np.int64)
        if costs.ndim != 2 or costs.shape[0] < 1 or costs.shape[1] < 1:
            raise ValueError(f"costs must be a 2-D matrix, got shape {costs.shape}")
        if not np.isfinite(costs).all():
            raise ValueError("costs must be finite (no NaN or infinity)")
        if counts.shape != (costs.shape[0],):
            raise ValueError("class_counts length must equal the number of cost rows")
        if np.any(counts < 0):
            raise ValueError("class_counts must be nonnegative")
        if counts.sum() != costs.shape[1]:
            raise ValueError(
                f"class_counts sum to {int(counts.sum())} but there are "
                f"{costs.shape[1]} instances"
            )
        costs.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "class_counts", counts)

    @property
    def num_classes(self) -> int:
        return self.costs.shape[0]

    @property
    def bag_size(self) -> int:
        return self.costs.shape[1]


def assignment_objective(Y: PseudoLabelMatrix, costs: np.ndarray) -> float:
    """Total cost of an assignment: sum of the selected cells."""
    costs = np.asarray(costs, dtype=np.float64)
    labels = Y.column_labels
    return float(costs[labels, np.arange(labels.size)].sum())


def solve_assignment(inst: TransportInstance) -> PseudoLabelMatrix:
    """Return a feasible assignment minimizing the total cost, exactly.

    Successive shortest paths: start from the per-instance cheapest class
    (dual-feasible but over/under capacity), then repeatedly move one
    instance along a shortest reassignment path from an over-full class to
    an under-full one, maintaining class potentials so every path search is
    over nonnegative reduced costs.  Each move reduces the total capacity
    violation by one, so at most ``bag_size`` iterations are needed.
    """
    labels = _successive_shortest_paths(inst.costs, inst.class_counts)
    return PseudoLabelMatrix.from_labels(labels, inst.num_classes)


def _successive_shortest_paths(costs: np.ndarray, counts: np.ndarray) -> np.ndarray:
    num_classes, m = costs.shape
    if num_classes == 1:
        return np.zeros(m, dtype=np.int64)

    potentials = np.zeros(num_classes)
    labels = np.argmin(costs, axis=0)           # ties: lowest class index
    load = np.bincount(labels, minlength=num_classes)

    for _ in range(m + 1):
        excess = load > counts
        if not excess.any():
            break
        deficit = load < counts

        # Condensed move graph: edge c -> c2 reassigns the cheapest mover
        # currently in c over to c2, measured in reduced costs.
        reduced = costs - potentials[:, np.newaxis]
        move_cost = np.full((num_classes, num_classes), np.inf)
        mover = np.full((num_classes, num_classes), -1, dtype=np.int64)
        for c in range(num_classes):
            members = np.flatnonzero(labels == c)
            if members.size == 0:
                continue
            deltas = reduced[:, members] - reduced[c, members][np.newaxis, :]
            best = np.argmin(deltas, axis=1)
            move_cost[c] = deltas[np.arange(num_classes), best]
            mover[c] = members[best]
        finite = np.isfinite(move_cost)
        tol = _REDUCED_COST_EPS * max(1.0, float(np.abs(costs).max())) * m
        if finite.any() and move_cost[finite].min() < -tol:
            raise AssertionError("reduced-cost invariant violated in assignment solver")
        np.clip(move_cost, 0.0, None, out=move_cost)
        np.fill_diagonal(move_cost, np.inf)

        # Dijkstra from all over-full classes at distance 0 (the node count
        # is the class count, so a linear scan beats a heap).
        dist = np.where(excess, 0.0, np.inf)
        parent = np.full(num_classes, -1, dtype=np.int64)
        settled = np.zeros(num_classes, dtype=bool)
        for _ in range(num_classes):
            unsettled = np.flatnonzero(~settled & np.isfinite(dist))
            if unsettled.size == 0:
                break
            c = unsettled[np.argmin(dist[unsettled])]
            settled[c] = True
            better = dist[c] + move_cost[c] < dist
            better &= ~settled
            dist[better] = dist[c] + move_cost[c][better]
            parent[better] = c

        targets = np.flatnonzero(deficit & np.isfinite(dist))
        if targets.size == 0:
            raise AssertionError("assignment solver could not reach an under-full class")
        target = targets[np.argmin(dist[targets])]

        # Walk the shortest-path tree back to a source, reassigning movers.
        path = [int(target)]
        while parent[path[-1]] >= 0:
            path.append(int(parent[path[-1]]))
            if len(path) > num_classes:
                raise AssertionError("assignment solver path reconstruction looped")
        path.reverse()                            # source ... target
        for c_from, c_to in zip(path[:-1], path[1:]):
            labels[mover[c_from, c_to]] = c_to
        load[path[0]] -= 1
        load[target] += 1
        potentials += np.minimum(dist, dist[target])
    else:
        raise AssertionError("assignment solver failed to terminate")

    return labels


def _feasible_label_arrays(counts: np.ndarray) -> np.ndarray:
    """All distinct per-instance label vectors with the given class counts."""
    counts = np.asarray(counts, dtype=np.int64)
    m = int(counts.sum())
    out: list[list[int]] = []
    prefix: list[int] = []
    remaining = counts.copy()

    def extend():
        if len(prefix) == m:
            out.append(prefix.copy())
            return
        for c in range(counts.size):
            if remaining[c] > 0:
                remaining[c] -= 1
                prefix.append(c)
                extend()
                prefix.pop()
                remaining[c] += 1

    extend()
    return np.asarray(out, dtype=np.int64)


def brute_force_assignment(inst: TransportInstance,
                           max_instances: int = 10) -> PseudoLabelMatrix:
    """Exhaustively enumerate feasible assignments and return a minimizer.

    Refuses instances with more than ``max_instances`` columns instead of
    silently approximating; this is a verification oracle, not a solver.
    """
    if inst.bag_size > max_instances:
        raise BruteForceCapExceeded(
            f"brute force capped at {max_instances} instances, got {inst.bag_size}"
        )
    candidates = _feasible_label_arrays(inst.class_counts)
    objectives = inst.costs[candidates, np.arange(inst.bag_size)].sum(axis=1)
    best = candidates[int(np.argmin(objectives))]
    return PseudoLabelMatrix.from_labels(best, inst.num_classes)
