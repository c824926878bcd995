"""Linear assignment with forbidden pairs, on top of scipy's Hungarian solver."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def min_cost_assignment(cost: np.ndarray, allowed: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment over allowed pairs.

    Forbidden pairs are priced above the sum of all allowed costs, so the
    solver first maximizes the number of allowed pairs and then minimizes
    their total cost. Pairs landing on forbidden cells are dropped.
    """
    cost = np.asarray(cost, dtype=float)
    allowed = np.asarray(allowed, dtype=bool)
    if cost.size == 0 or not allowed.any():
        return []
    big = float(np.abs(cost[allowed]).sum()) + 1.0
    padded = np.where(allowed, cost, big)
    rows, cols = linear_sum_assignment(padded)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if allowed[i, j]]


def max_vote_assignment(votes: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one assignment maximizing total votes; zero-vote pairs are never chosen."""
    votes = np.asarray(votes, dtype=float)
    if votes.size == 0 or not (votes > 0).any():
        return []
    rows, cols = linear_sum_assignment(-votes)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if votes[i, j] > 0]
