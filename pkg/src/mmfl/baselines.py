"""Classical reference solvers and the MTZ integer-programming model."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .instance import GtspInstance, Tour, cycle_length, make_tour
from .rng import SplitMix64

TIE_EPS = 1e-12


class BudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchBudget:
    max_tours: int = 10_000_000
    restarts: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.max_tours < 1 or self.restarts < 0:
            raise ValueError("budget values must be positive")


# --------------------------------------------------------------------- exact


def enumeration_count(instance: GtspInstance) -> int:
    """Tours visited by ``exact_solve``: selections times canonical orders."""
    others = [c for c in range(instance.m) if c != instance.depot_cluster]
    orders = math.factorial(len(others))
    if len(others) >= 3:
        orders //= 2
    return math.prod(len(instance.clusters[c]) for c in others) * orders


def _better(cost: float, seq: tuple, best_cost: float, best_seq: tuple | None) -> bool:
    if best_seq is None or cost < best_cost - TIE_EPS:
        return True
    return abs(cost - best_cost) <= TIE_EPS and seq < best_seq


def exact_solve(instance: GtspInstance, budget: SearchBudget = SearchBudget()) -> Tour:
    """Globally optimal tour.

    Enumerates cluster orders with the depot cluster first and one of each
    mirror pair; for each order the node choice is a layered shortest path.
    Among optima (within 1e-12) the lexicographically smallest sequence wins.
    """
    count = enumeration_count(instance)
    if count > budget.max_tours:
        raise BudgetError(f"exact_solve would enumerate {count} tours (budget {budget.max_tours})")
    d = instance.distances
    depot = instance.depot
    others = [c for c in range(instance.m) if c != instance.depot_cluster]
    layers_of = instance.clusters
    best_cost, best_seq = math.inf, None
    for order in itertools.permutations(others):
        if len(order) >= 3 and order[0] > order[-1]:
            continue
        layers = [np.array(layers_of[c]) for c in order]
        # cost-to-go from every node of layer l back to the depot
        ctg = [None] * len(layers)
        ctg[-1] = d[layers[-1], depot]
        for l in range(len(layers) - 2, -1, -1):
            ctg[l] = (d[np.ix_(layers[l], layers[l + 1])] + ctg[l + 1][None, :]).min(axis=1)
        seq = [depot]
        prev = depot
        for l, nodes in enumerate(layers):
            vals = d[prev, nodes] + ctg[l]
            j = int(np.flatnonzero(vals == vals.min())[0])
            prev = int(nodes[j])
            seq.append(prev)
        for cand in (tuple(seq), (depot,) + tuple(reversed(seq[1:]))):
            cost = cycle_length(instance, cand)
            if _better(cost, cand, best_cost, best_seq):
                best_cost, best_seq = cost, cand
    return Tour(best_seq, best_cost)


# ------------------------------------------------------------- constructions


def nearest_neighbor_solve(instance: GtspInstance) -> Tour:
    d = instance.distances
    cluster = instance.cluster_of
    visited = np.zeros(instance.m, dtype=bool)
    visited[instance.depot_cluster] = True
    seq = [instance.depot]
    while len(seq) < instance.m:
        cand = d[seq[-1]].copy()
        cand[visited[cluster]] = np.inf
        nxt = int(np.argmin(cand))
        seq.append(nxt)
        visited[cluster[nxt]] = True
    return make_tour(instance, seq)


def randomized_nearest_neighbor(instance: GtspInstance, rng: SplitMix64, width: int = 3) -> list[int]:
    """Nearest-neighbour walk choosing uniformly among the ``width`` closest eligible nodes."""
    d = instance.distances
    cluster = instance.cluster_of
    visited = np.zeros(instance.m, dtype=bool)
    visited[instance.depot_cluster] = True
    seq = [instance.depot]
    while len(seq) < instance.m:
        cand = d[seq[-1]].copy()
        cand[visited[cluster]] = np.inf
        order = np.argsort(cand, kind="stable")
        pool = [int(v) for v in order[:width] if np.isfinite(cand[v])]
        nxt = pool[rng.randbelow(len(pool))]
        seq.append(nxt)
        visited[cluster[nxt]] = True
    return seq


def random_tour(instance: GtspInstance, seed: int = 0) -> Tour:
    rng = SplitMix64(seed)
    others = [c for c in range(instance.m) if c != instance.depot_cluster]
    rng.shuffle(others)
    seq = [instance.depot] + [rng.choice(instance.clusters[c]) for c in others]
    return make_tour(instance, seq)


# -------------------------------------------------------------- local search


def descent(instance: GtspInstance, nodes: Sequence[int], trace: list[float] | None = None) -> list[int]:
    """Alternate 2-opt over the visit order and per-cluster node replacement
    until neither finds an improvement. The depot stays at position 0."""
    d = instance.distances
    seq = list(nodes)
    m = len(seq)
    if trace is not None:
        trace.append(cycle_length(instance, seq))
    improved = True
    while improved:
        improved = False
        for i in range(1, m - 1):
            for j in range(i + 1, m):
                if i == 1 and j == m - 1:
                    continue
                a, b, c, e = seq[i - 1], seq[i], seq[j], seq[(j + 1) % m]
                delta = d[a, c] + d[b, e] - d[a, b] - d[c, e]
                if delta < -TIE_EPS:
                    seq[i:j + 1] = seq[i:j + 1][::-1]
                    improved = True
                    if trace is not None:
                        trace.append(cycle_length(instance, seq))
        for p in range(1, m):
            prev, cur, nxt = seq[p - 1], seq[p], seq[(p + 1) % m]
            members = instance.clusters[instance.cluster_of[cur]]
            costs = d[prev, list(members)] + d[list(members), nxt]
            j = int(np.argmin(costs))
            if costs[j] < d[prev, cur] + d[cur, nxt] - TIE_EPS:
                seq[p] = members[j]
                improved = True
                if trace is not None:
                    trace.append(cycle_length(instance, seq))
    return seq


def local_search(instance: GtspInstance, initial: Tour, budget: SearchBudget = SearchBudget()) -> Tour:
    """Descent from ``initial`` plus ``budget.restarts`` randomized
    nearest-neighbour restarts; never returns anything worse than ``initial``."""
    best = make_tour(instance, descent(instance, initial.nodes))
    if initial.cost < best.cost:
        best = initial
    rng = SplitMix64(budget.seed)
    for _ in range(budget.restarts):
        cand = make_tour(instance, descent(instance, randomized_nearest_neighbor(instance, rng)))
        if cand.cost < best.cost - TIE_EPS:
            best = cand
    return best


# ---------------------------------------------------------------------- ILP


def _fmt(c: float) -> str:
    return "%.12g" % c


def _terms(coefs: dict[str, float]) -> list[str]:
    out = []
    for var, c in coefs.items():
        mag = var if abs(c) == 1 else f"{_fmt(abs(c))} {var}"
        if not out:
            out.append(f"- {mag}" if c < 0 else mag)
        else:
            out.append(f"{'-' if c < 0 else '+'} {mag}")
    return out


def _wrap(head: str, terms: list[str], tail: str = "", per_line: int = 8) -> list[str]:
    chunks = [" ".join(terms[k:k + per_line]) for k in range(0, len(terms), per_line)]
    lines = [f" {head}: {chunks[0]}"] + [f"   {c}" for c in chunks[1:]]
    if tail:
        lines[-1] += f" {tail}"
    return lines


def ilp_rows(instance: GtspInstance) -> list[tuple[str, int, dict, str, float]]:
    """Constraint rows ``(name, equation, {var: coef}, sense, rhs)``.

    Equation numbers: 2 assignment, 3 in-degree, 4 out-degree, 5 position
    bounds (two rows per node), 6 MTZ ordering for arcs not entering the depot.
    """
    n, m = instance.n, instance.m
    rows = []
    for p, members in enumerate(instance.clusters):
        rows.append((f"assign_{p}", 2, {f"y_{i}": 1.0 for i in members}, "=", 1))
    for i in range(n):
        coefs = {f"x_{j}_{i}": 1.0 for j in range(n) if j != i}
        coefs[f"y_{i}"] = -1.0
        rows.append((f"in_{i}", 3, coefs, "=", 0))
    for i in range(n):
        coefs = {f"x_{i}_{j}": 1.0 for j in range(n) if j != i}
        coefs[f"y_{i}"] = -1.0
        rows.append((f"out_{i}", 4, coefs, "=", 0))
    for i in range(n):
        rows.append((f"ulo_{i}", 5, {f"u_{i}": 1.0, f"y_{i}": -1.0}, ">=", 0))
        rows.append((f"uhi_{i}", 5, {f"u_{i}": 1.0, f"y_{i}": -float(m)}, "<=", 0))
    for i in range(n):
        for j in range(n):
            if i == j or j == instance.depot:
                continue
            rows.append((f"mtz_{i}_{j}", 6, {f"u_{i}": 1.0, f"u_{j}": -1.0, f"x_{i}_{j}": float(m), f"y_{j}": float(m)}, "<=", 2 * m - 1))
    return rows


def export_ilp(instance: GtspInstance, sink=None) -> str:
    """Write the model in CPLEX LP text format; returns the text."""
    n = instance.n
    d = instance.distances
    lines = [
        f"\\ GTSP MTZ model: n={n} m={instance.m} depot={instance.depot} family={instance.family} seed={instance.seed}",
        "Minimize",
    ]
    obj = {f"x_{i}_{j}": float(d[i, j]) for i in range(n) for j in range(n) if i != j}
    lines += _wrap("obj", _terms(obj))
    lines.append("Subject To")
    for name, _, coefs, sense, rhs in ilp_rows(instance):
        lines += _wrap(name, _terms(coefs), f"{sense} {_fmt(rhs)}")
    lines.append("Bounds")
    lines += [f" u_{i} >= 0" for i in range(n)]
    lines.append("Binaries")
    xs = [f"x_{i}_{j}" for i in range(n) for j in range(n) if i != j] + [f"y_{i}" for i in range(n)]
    lines += [" " + " ".join(xs[k:k + 10]) for k in range(0, len(xs), 10)]
    lines.append("End")
    text = "\n".join(lines) + "\n"
    if sink is not None:
        if hasattr(sink, "write"):
            sink.write(text)
        else:
            Path(sink).write_text(text)
    return text


@dataclass
class Assignment:
    x: dict[tuple[int, int], float]
    y: list[float]
    u: list[float]
    domain_errors: list[str] = field(default_factory=list)


@dataclass
class IlpReport:
    results: list[tuple[str, int, bool]]
    domain_errors: list[str]

    @property
    def ok(self) -> bool:
        return not self.domain_errors and all(r[2] for r in self.results)

    @property
    def failures(self) -> list[str]:
        return self.domain_errors + [r[0] for r in self.results if not r[2]]

    def failed_equations(self) -> set[int]:
        out = {r[1] for r in self.results if not r[2]}
        if self.domain_errors:
            out.add(7)
        return out

    def passed(self, equation: int) -> bool:
        return equation not in self.failed_equations()


def induced_assignment(instance: GtspInstance, nodes: Sequence[int]) -> Assignment:
    """Arcs along the closed walk, ``y`` on its nodes, ``u`` = 1-based position."""
    n = instance.n
    errors = []
    seq = [int(v) for v in nodes]
    bad = [v for v in seq if not 0 <= v < n]
    if bad:
        errors.append(f"nodes out of range: {bad}")
        seq = [v for v in seq if 0 <= v < n]
    x: dict[tuple[int, int], float] = {}
    for k in range(len(seq)):
        a, b = seq[k], seq[(k + 1) % len(seq)]
        if a == b:
            errors.append(f"self-loop at node {a}")
            continue
        x[(a, b)] = x.get((a, b), 0.0) + 1.0
    y = [0.0] * n
    u = [0.0] * n
    for pos, v in enumerate(seq, start=1):
        y[v] = 1.0
        u[v] = float(pos)
    return Assignment(x, y, u, errors)


def check_assignment(instance: GtspInstance, a: Assignment, tol: float = 1e-9) -> IlpReport:
    values = {f"y_{i}": a.y[i] for i in range(instance.n)}
    values.update({f"u_{i}": a.u[i] for i in range(instance.n)})
    values.update({f"x_{i}_{j}": v for (i, j), v in a.x.items()})
    domain = list(a.domain_errors)
    domain += [f"x_{i}_{j}={v} not binary" for (i, j), v in a.x.items() if v not in (0.0, 1.0)]
    domain += [f"y_{i}={v} not binary" for i, v in enumerate(a.y) if v not in (0.0, 1.0)]
    domain += [f"u_{i}={v} negative" for i, v in enumerate(a.u) if v < 0]
    results = []
    for name, eq, coefs, sense, rhs in ilp_rows(instance):
        lhs = sum(c * values.get(var, 0.0) for var, c in coefs.items())
        if sense == "=":
            ok = abs(lhs - rhs) <= tol
        elif sense == "<=":
            ok = lhs <= rhs + tol
        else:
            ok = lhs >= rhs - tol
        results.append((name, eq, ok))
    return IlpReport(results, domain)


def check_ilp_constraints(instance: GtspInstance, tour: Tour | Sequence[int]) -> IlpReport:
    nodes = tour.nodes if isinstance(tour, Tour) else tour
    return check_assignment(instance, induced_assignment(instance, nodes))
