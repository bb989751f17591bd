"""
Minimum-cost assignment of every row of an m x n cost matrix (m <= n).

The matrix is padded to n x n with zero-cost dummy rows and solved with the
shortest augmenting path Hungarian method, which also yields optimal dual
potentials. Every optimal assignment only uses edges with zero reduced cost
under those potentials, so when some real row has more than one such edge
the lexicographically smallest optimal assignment is recovered greedily on
that tight-edge graph.
"""

import numpy as np

from core.exceptions import CapacityError, DomainError


def _solve_square(cost):
    n = cost.shape[0]
    inf = float("inf")
    u = [0.0] * (n + 1)     # row potentials
    v = [0.0] * (n + 1)     # column potentials
    p = [0] * (n + 1)       # p[j] = row assigned to column j
    way = [0] * (n + 1)
    rows = cost.tolist()

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    col_of_row = [-1] * n
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row, np.array(u[1:]), np.array(v[1:])


def _has_perfect_matching(adjacency, rows, blocked):
    """Kuhn's augmenting paths over ``rows`` avoiding ``blocked`` columns."""
    owner = {}

    def augment(r, seen):
        for c in adjacency[r]:
            if c in blocked or c in seen:
                continue
            seen.add(c)
            if c not in owner or augment(owner[c], seen):
                owner[c] = r
                return True
        return False

    return all(augment(r, set()) for r in rows)


def _lexicographic(tight, m, n):
    adjacency = [list(np.flatnonzero(tight[r])) for r in range(n)]
    chosen = []
    blocked = set()
    for r in range(m):
        for c in adjacency[r]:
            if c in blocked:
                continue
            if _has_perfect_matching(adjacency, range(r + 1, n), blocked | {c}):
                chosen.append(int(c))
                blocked.add(c)
                break
    return chosen


def hungarian(cost):
    """
    Return ``[(row, col), ...]`` assigning every row to a distinct column
    at minimal total cost; ties resolve to the lexicographically smallest
    assignment.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DomainError(f"hungarian expects a matrix, got shape {cost.shape}")
    m, n = cost.shape
    if m > n:
        raise CapacityError(f"cannot assign {m} rows to {n} columns")
    if m == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise DomainError("hungarian needs finite costs")

    square = np.zeros((n, n))
    square[:m] = cost
    col_of_row, u, v = _solve_square(square)

    tol = 1e-9 * max(1.0, float(np.max(np.abs(cost))))
    tight = np.abs(square - u[:, None] - v[None, :]) <= tol
    if all(tight[r].sum() == 1 for r in range(m)):
        return [(r, col_of_row[r]) for r in range(m)]
    chosen = _lexicographic(tight, m, n)
    if len(chosen) != m:
        # tolerance too tight to rebuild a full matching; keep the solver's optimum
        return [(r, col_of_row[r]) for r in range(m)]
    return list(enumerate(chosen))


def assignment_cost(cost, assignment):
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[r, c] for r, c in assignment))
