"""Data-utility measures between an original and an anonymized log.

* relative log similarity: ``1 - EMD`` between the two variant
  distributions, with normalized Levenshtein distance as ground metric;
* absolute log difference: minimum total number of Levenshtein operations
  that turns one variant multiset into the other, solved as a min-cost flow
  with supplies and demands set to the absolute frequencies.

Both reduce to a balanced transportation problem, solved exactly over the
integers by successive shortest paths with node potentials.
"""

from __future__ import annotations

import math
from fractions import Fraction
from functools import reduce
from typing import Sequence

import numpy as np

from travag.errors import EmptyLogError
from travag.eventlog import SimpleEventLog

_INT64_SAFE = 2**62


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance between two activity sequences."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        current = [i]
        for j, y in enumerate(b, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (x != y)))
        previous = current
    return previous[-1]


def normalized_levenshtein(a: Sequence, b: Sequence) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return levenshtein(a, b) / longest


def _distance_matrix(rows: Sequence[Sequence], cols: Sequence[Sequence]) -> np.ndarray:
    out = np.empty((len(rows), len(cols)), dtype=np.int64)
    for i, a in enumerate(rows):
        for j, b in enumerate(cols):
            out[i, j] = levenshtein(a, b)
    return out


def solve_transportation(supplies, demands, costs) -> tuple[np.ndarray, int]:
    """Exact min-cost plan for a balanced transportation problem.

    Args:
        supplies: non-negative integer supply per source.
        demands: non-negative integer demand per sink; same total as supplies.
        costs: non-negative integer matrix, sources x sinks.

    Returns:
        ``(plan, total_cost)`` with an integer plan of the same shape as
        ``costs``. ``total_cost`` is an exact Python int.
    """
    supplies = [int(s) for s in supplies]
    demands = [int(d) for d in demands]
    cost_list = [[int(c) for c in row] for row in np.asarray(costs, dtype=object).reshape(len(supplies), len(demands))]
    if any(s < 0 for s in supplies) or any(d < 0 for d in demands):
        raise ValueError("supplies and demands must be non-negative")
    if sum(supplies) != sum(demands):
        raise ValueError(f"unbalanced problem: supply {sum(supplies)} != demand {sum(demands)}")
    if any(c < 0 for row in cost_list for c in row):
        raise ValueError("costs must be non-negative")

    plan = np.zeros((len(supplies), len(demands)), dtype=np.int64)
    src = [i for i, s in enumerate(supplies) if s > 0]
    dst = [j for j, d in enumerate(demands) if d > 0]
    if not src:
        return plan, 0
    sub_costs = [[cost_list[i][j] for j in dst] for i in src]
    sub_plan = _ssp([supplies[i] for i in src], [demands[j] for j in dst], sub_costs)
    total = 0
    for a, i in enumerate(src):
        for b, j in enumerate(dst):
            f = int(sub_plan[a][b])
            if f:
                plan[i, j] = f
                total += f * cost_list[i][j]
    return plan, total


def _ssp(supplies: list[int], demands: list[int], cost_list: list[list[int]]):
    """Successive shortest paths on the dense bipartite residual graph."""
    n1, n2 = len(supplies), len(demands)
    max_cost = max(max(row) for row in cost_list)
    total = sum(supplies)
    inf = 8 * (n1 + n2 + 1) * (max_cost + 1) + 1
    if inf < _INT64_SAFE and max(total, 1) * (max_cost + 1) < _INT64_SAFE:
        dtype = np.int64
    else:
        dtype = object  # exact Python ints when int64 could overflow
    cost = np.array(cost_list, dtype=dtype)
    zero = np.zeros((), dtype=dtype)[()]
    flow = np.zeros((n1, n2), dtype=dtype)
    excess = np.array(supplies, dtype=dtype)
    deficit = np.array(demands, dtype=dtype)
    pot_s = np.zeros(n1, dtype=dtype)
    pot_d = np.zeros(n2, dtype=dtype)
    INF = dtype(inf) if dtype is np.int64 else inf

    while (excess > 0).any():
        dist_s = np.where(excess > 0, zero, INF).astype(dtype)
        dist_d = np.full(n2, INF, dtype=dtype)
        parent_s = np.full(n1, -1)
        parent_d = np.full(n2, -1)
        done_s = np.zeros(n1, dtype=bool)
        done_d = np.zeros(n2, dtype=bool)
        for _ in range(n1 + n2):
            open_s = np.where(done_s, INF, dist_s)
            open_d = np.where(done_d, INF, dist_d)
            i = int(np.argmin(open_s))
            j = int(np.argmin(open_d))
            if open_s[i] >= INF and open_d[j] >= INF:
                break
            if open_s[i] <= open_d[j]:
                done_s[i] = True
                cand = dist_s[i] + cost[i, :] + pot_s[i] - pot_d
                better = (~done_d) & (cand < dist_d)
                dist_d = np.where(better, cand, dist_d)
                parent_d[better] = i
            else:
                done_d[j] = True
                cand = dist_d[j] - cost[:, j] + pot_d[j] - pot_s
                better = (~done_s) & (flow[:, j] > 0) & (cand < dist_s)
                dist_s = np.where(better, cand, dist_s)
                parent_s[better] = j

        open_targets = np.where(deficit > 0, dist_d, INF)
        target = int(np.argmin(open_targets))
        reach = dist_d[target]
        if reach >= INF:
            raise RuntimeError("transportation solver found no augmenting path")

        # walk back to a source, collecting forward and backward edges
        forward_edges, backward_edges = [], []
        j = target
        while True:
            i = int(parent_d[j])
            forward_edges.append((i, j))
            if parent_s[i] == -1:
                source = i
                break
            j = int(parent_s[i])
            backward_edges.append((i, j))
        amount = min(excess[source], deficit[target])
        for i, j in backward_edges:
            amount = min(amount, flow[i, j])
        for i, j in forward_edges:
            flow[i, j] += amount
        for i, j in backward_edges:
            flow[i, j] -= amount
        excess[source] -= amount
        deficit[target] -= amount

        pot_s = pot_s + np.where(dist_s < reach, dist_s, reach)
        pot_d = pot_d + np.where(dist_d < reach, dist_d, reach)

    reduced = cost + pot_s[:, None] - pot_d[None, :]
    if (reduced < 0).any() or (reduced[flow > 0] != 0).any():
        raise RuntimeError("transportation solver failed its optimality certificate")
    return flow.tolist()


def _lcm(values) -> int:
    return reduce(lambda x, y: x * y // math.gcd(x, y), values, 1)


def _require_nonempty(*logs: SimpleEventLog) -> None:
    for log in logs:
        if log.is_empty():
            raise EmptyLogError("utility metrics need non-empty logs")


def earth_movers_distance(log1: SimpleEventLog, log2: SimpleEventLog) -> Fraction:
    """Exact EMD between the variant distributions (normalized Levenshtein ground)."""
    _require_nonempty(log1, log2)
    rows, cols = sorted(log1), sorted(log2)
    m1, m2 = log1.num_cases, log2.num_cases
    scale = _lcm([m1, m2])
    supplies = [log1.frequency(v) * (scale // m1) for v in rows]
    demands = [log2.frequency(v) * (scale // m2) for v in cols]

    lev = _distance_matrix(rows, cols)
    longest = np.array([[max(len(a), len(b)) for b in cols] for a in rows], dtype=np.int64)
    denom = _lcm(sorted({int(x) for x in longest.ravel()}))
    costs = [
        [int(lev[i, j]) * (denom // int(longest[i, j])) for j in range(len(cols))] for i in range(len(rows))
    ]
    _, total = solve_transportation(supplies, demands, costs)
    return Fraction(total, scale * denom)


def relative_log_similarity(log1: SimpleEventLog, log2: SimpleEventLog) -> float:
    """``1 - EMD`` in [0, 1]; 1 means identical variant distributions."""
    return float(1 - earth_movers_distance(log1, log2))


def absolute_log_difference(log1: SimpleEventLog, log2: SimpleEventLog) -> int:
    """Minimum number of Levenshtein operations between the two multisets.

    When the logs differ in size, the surplus is matched against a virtual
    empty variant, i.e. whole traces are inserted or deleted at a cost of
    their length.
    """
    _require_nonempty(log1, log2)
    rows, cols = sorted(log1), sorted(log2)
    supplies = [log1.frequency(v) for v in rows]
    demands = [log2.frequency(v) for v in cols]
    gap = log1.num_cases - log2.num_cases
    if gap > 0:
        cols = cols + [()]
        demands.append(gap)
    elif gap < 0:
        rows = rows + [()]
        supplies.append(-gap)
    costs = _distance_matrix(rows, cols)
    _, total = solve_transportation(supplies, demands, costs)
    return int(total)
