"""GTSP instances, tours, seeded generators and the on-disk text formats."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import SplitMix64, derive_seed


class SpecError(ValueError):
    """A generator specification violates one of its consistency rules."""


class GenerationError(RuntimeError):
    pass


class InstanceFormatError(ValueError):
    """Malformed or invalid instance/dataset/tour document."""


class InfeasibleTourError(ValueError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("infeasible tour: " + "; ".join(self.violations))


class Family(str, enum.Enum):
    SCALE = "scale"
    RANDOM = "random"
    PROXIMITY = "proximity"
    DENSITY = "density"
    HYBRID = "hybrid"
    UNIFORM = "uniform"
    SMALL = "small"
    LARGE = "large"
    MIXED = "mixed"


@dataclass(frozen=True, eq=False)
class GtspInstance:
    coords: np.ndarray  # (n, 2) float64
    cluster_of: np.ndarray  # (n,) int64
    m: int
    depot: int = 0
    family: str = "random"
    seed: int = 0

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64).reshape(-1, 2)
        cluster = np.array(self.cluster_of, dtype=np.int64).reshape(-1)
        coords.setflags(write=False)
        cluster.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "cluster_of", cluster)
        problems = instance_violations(coords, cluster, self.m, self.depot)
        if problems:
            raise InstanceFormatError("invalid instance: " + "; ".join(problems))

    @property
    def n(self) -> int:
        return len(self.cluster_of)

    @cached_property
    def distances(self) -> np.ndarray:
        return distance_matrix(self)

    @cached_property
    def clusters(self) -> tuple[tuple[int, ...], ...]:
        """Node indices of every cluster, ascending."""
        members: list[list[int]] = [[] for _ in range(self.m)]
        for i, c in enumerate(self.cluster_of.tolist()):
            members[c].append(i)
        return tuple(tuple(ms) for ms in members)

    @property
    def depot_cluster(self) -> int:
        return int(self.cluster_of[self.depot])

    def __eq__(self, other):
        if not isinstance(other, GtspInstance):
            return NotImplemented
        return (
            self.m == other.m
            and self.depot == other.depot
            and self.family == other.family
            and self.seed == other.seed
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.cluster_of, other.cluster_of)
        )

    __hash__ = None  # type: ignore[assignment]


def instance_violations(coords: np.ndarray, cluster: np.ndarray, m: int, depot: int) -> list[str]:
    out = []
    n = len(cluster)
    if len(coords) != n:
        out.append(f"coords has {len(coords)} rows but cluster has {n} entries")
    if n < 2:
        out.append(f"n must be >= 2, got {n}")
    if m < 2:
        out.append(f"m must be >= 2, got {m}")
    if n and (cluster.min() < 0 or cluster.max() >= m):
        bad = [int(c) for c in cluster if c < 0 or c >= m]
        out.append(f"cluster index out of range [0, {m}): {bad[:5]}")
    else:
        present = set(cluster.tolist())
        missing = [c for c in range(m) if c not in present]
        if missing:
            out.append(f"empty clusters: {missing[:10]}")
    if coords.size and (not np.all(np.isfinite(coords)) or coords.min() < 0.0 or coords.max() > 1.0):
        out.append("coordinates must lie in [0, 1]")
    if not 0 <= depot < max(n, 1):
        out.append(f"depot {depot} out of range [0, {n})")
    return out


def distance_matrix(instance: GtspInstance) -> np.ndarray:
    xy = instance.coords
    diff = xy[:, None, :] - xy[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    d.setflags(write=False)
    return d


# --------------------------------------------------------------------- tours


@dataclass(frozen=True)
class Tour:
    nodes: tuple[int, ...]
    cost: float


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_tour(instance: GtspInstance, nodes: Iterable[int]) -> ValidationReport:
    nodes = [int(v) for v in (nodes.nodes if isinstance(nodes, Tour) else nodes)]
    out = []
    if len(nodes) != instance.m:
        out.append(f"length {len(nodes)} != m={instance.m}")
    bad = [v for v in nodes if not 0 <= v < instance.n]
    if bad:
        out.append(f"nodes out of range [0, {instance.n}): {bad}")
    if nodes and nodes[0] != instance.depot:
        out.append(f"tour starts at {nodes[0]}, not depot {instance.depot}")
    counts = [0] * instance.m
    for v in nodes:
        if 0 <= v < instance.n:
            counts[instance.cluster_of[v]] += 1
    dup = [c for c, k in enumerate(counts) if k > 1]
    missing = [c for c, k in enumerate(counts) if k == 0]
    if dup:
        out.append(f"clusters visited more than once: {dup}")
    if missing:
        out.append(f"clusters not visited: {missing}")
    return ValidationReport(tuple(out))


def cycle_length(instance: GtspInstance, nodes: Sequence[int]) -> float:
    """Closed-walk length over ``nodes`` without any feasibility check."""
    d = instance.distances
    total = 0.0
    k = len(nodes)
    for i in range(k):
        total += d[nodes[i], nodes[(i + 1) % k]]
    return float(total)


def tour_cost(instance: GtspInstance, tour: Tour | Sequence[int]) -> float:
    nodes = tour.nodes if isinstance(tour, Tour) else tuple(int(v) for v in tour)
    report = validate_tour(instance, nodes)
    if not report.ok:
        raise InfeasibleTourError(report.violations)
    return cycle_length(instance, nodes)


def make_tour(instance: GtspInstance, nodes: Sequence[int]) -> Tour:
    nodes = tuple(int(v) for v in nodes)
    return Tour(nodes, tour_cost(instance, nodes))


# ---------------------------------------------------------------- generators

# (cluster-count range, cluster-size range) at n = 100
SIZE_PROFILES: dict[Family, tuple[tuple[int, int], tuple[int, int]]] = {
    Family.SMALL: ((40, 40), (2, 3)),
    Family.LARGE: ((10, 12), (8, 10)),
    Family.MIXED: ((15, 20), (1, 15)),
}

PROXIMITY_ATTEMPTS = 100
PROFILE_ATTEMPTS = 10_000
DENSITY_SIGMA = 0.05

# substream tags under an instance seed
_COORDS, _ASSIGN, _CENTROIDS, _PROFILE = 0, 1, 2, 3


@dataclass(frozen=True)
class GeneratorSpec:
    """What to generate. ``m`` may be None for the size-profile families."""

    n: int
    m: int | None
    family: Family | str = Family.RANDOM
    seed: int = 0
    count_range: tuple[int, int] | None = None
    size_range: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        errors = self.errors()
        if errors:
            raise SpecError("; ".join(errors))

    def profile(self) -> tuple[tuple[int, int], tuple[int, int]] | None:
        if self.family not in SIZE_PROFILES:
            return None
        counts, sizes = SIZE_PROFILES[self.family]
        return (self.count_range or counts, self.size_range or sizes)

    def errors(self) -> list[str]:
        out = []
        n, m = self.n, self.m
        if n < 2:
            out.append(f"n must be >= 2 (got {n})")
        prof = self.profile()
        if prof is None:
            if m is None:
                out.append(f"family {self.family.value} requires m")
            elif m < 2:
                out.append(f"m must be >= 2 (got {m})")
            elif m > n:
                out.append(f"m must be <= n (got m={m}, n={n})")
            elif self.family is Family.UNIFORM and n % m:
                out.append(f"uniform family requires m to divide n (n={n}, m={m})")
        else:
            (clo, chi), (slo, shi) = prof
            if not (2 <= clo <= chi and 1 <= slo <= shi):
                out.append(f"bad profile ranges counts={prof[0]} sizes={prof[1]}")
            if m is not None:
                if not clo <= m <= chi:
                    out.append(f"family {self.family.value} needs m in [{clo}, {chi}] (got {m})")
                else:
                    clo = chi = m
            if not clo * slo <= n <= chi * shi:
                out.append(
                    f"family {self.family.value}: n={n} unreachable with counts "
                    f"[{clo}, {chi}] and sizes [{slo}, {shi}]"
                )
        return out

    def with_seed(self, seed: int) -> "GeneratorSpec":
        return GeneratorSpec(self.n, self.m, self.family, seed, self.count_range, self.size_range)


def generate_instance(spec: GeneratorSpec) -> GtspInstance:
    seed = spec.seed
    n = spec.n
    coord_rng = SplitMix64(derive_seed(seed, _COORDS))
    assign_rng = SplitMix64(derive_seed(seed, _ASSIGN))
    family = spec.family

    if family is Family.DENSITY:
        m = spec.m
        cluster = _random_assignment(n, list(range(m)), assign_rng, range(n))
        crng = SplitMix64(derive_seed(seed, _CENTROIDS, 0))
        centers = [(crng.uniform(0.1, 0.9), crng.uniform(0.1, 0.9)) for _ in range(m)]
        coords = []
        for i in range(n):
            cx, cy = centers[cluster[i]]
            x = min(1.0, max(0.0, cx + DENSITY_SIGMA * coord_rng.normal()))
            y = min(1.0, max(0.0, cy + DENSITY_SIGMA * coord_rng.normal()))
            coords.append((x, y))
        return GtspInstance(coords, cluster, m, 0, family.value, seed)

    coords = [(coord_rng.random(), coord_rng.random()) for _ in range(n)]

    if family in (Family.RANDOM, Family.SCALE):
        m = spec.m
        cluster = _random_assignment(n, list(range(m)), assign_rng, range(n))
    elif family is Family.PROXIMITY:
        m = spec.m
        cluster = [0] * n
        labels = _proximity_assignment(coords, range(n), m, seed, _CENTROIDS)
        for i, c in labels.items():
            cluster[i] = c
    elif family is Family.HYBRID:
        m = spec.m
        near = math.ceil(m / 2)
        order = list(range(n))
        assign_rng.shuffle(order)
        share = min(max(near, round(n * near / m)), n - (m - near))
        cluster = [0] * n
        for i, c in _proximity_assignment(coords, order[:share], near, seed, _CENTROIDS).items():
            cluster[i] = c
        rest = _random_assignment(n, list(range(near, m)), assign_rng, sorted(order[share:]))
        for i in order[share:]:
            cluster[i] = rest[i]
    elif family is Family.UNIFORM:
        m = spec.m
        cluster = [c for c in range(m) for _ in range(n // m)]
        assign_rng.shuffle(cluster)
    else:
        sizes = _profile_sizes(spec, SplitMix64(derive_seed(seed, _PROFILE)))
        m = len(sizes)
        cluster = [c for c, s in enumerate(sizes) for _ in range(s)]
        assign_rng.shuffle(cluster)
    return GtspInstance(coords, cluster, m, 0, family.value, seed)


def _random_assignment(n: int, labels: list[int], rng: SplitMix64, nodes: Iterable[int]) -> list[int]:
    """One distinct node per label first, remaining nodes uniformly.

    Returns a length-``n`` list; entries for nodes outside ``nodes`` are -1.
    """
    nodes = list(nodes)
    out = [-1] * n
    pool = list(nodes)
    for c in labels:
        j = rng.randbelow(len(pool))
        out[pool[j]] = c
        pool[j] = pool[-1]
        pool.pop()
    for i in nodes:
        if out[i] < 0:
            out[i] = labels[rng.randbelow(len(labels))]
    return out


def _proximity_assignment(coords, nodes, k: int, seed: int, tag: int) -> dict[int, int]:
    nodes = list(nodes)
    for attempt in range(PROXIMITY_ATTEMPTS):
        rng = SplitMix64(derive_seed(seed, tag, attempt))
        centroids = [(rng.random(), rng.random()) for _ in range(k)]
        labels = {i: nearest_centroid(coords[i], centroids) for i in nodes}
        if len(set(labels.values())) == k:
            return labels
    raise GenerationError(
        f"proximity assignment left a cluster empty after {PROXIMITY_ATTEMPTS} centroid draws "
        f"(nodes={len(nodes)}, clusters={k}, seed={seed})"
    )


def nearest_centroid(point, centroids) -> int:
    """Index of the closest centroid; ties go to the lowest index."""
    best, best_d = 0, math.inf
    for c, (cx, cy) in enumerate(centroids):
        d = (point[0] - cx) ** 2 + (point[1] - cy) ** 2
        if d < best_d:
            best, best_d = c, d
    return best


def _profile_sizes(spec: GeneratorSpec, rng: SplitMix64) -> list[int]:
    (clo, chi), (slo, shi) = spec.profile()
    if spec.m is not None:
        clo = chi = spec.m
    for _ in range(PROFILE_ATTEMPTS):
        count = rng.randint(clo, chi)
        sizes = [rng.randint(slo, shi) for _ in range(count - 1)]
        last = spec.n - sum(sizes)
        if slo <= last <= shi:
            return sizes + [last]
    # Far from n=100 the adjusted last size rarely lands in range; draw each
    # size from the interval that keeps the remainder reachable instead.
    for count in range(clo, chi + 1):
        if count * slo <= spec.n <= count * shi:
            break
    else:
        raise GenerationError(f"could not draw cluster sizes for {spec}")
    sizes, left = [], spec.n
    for i in range(count - 1, -1, -1):
        lo, hi = max(slo, left - i * shi), min(shi, left - i * slo)
        sizes.append(rng.randint(lo, hi))
        left -= sizes[-1]
    return sizes


def generate_dataset(spec: GeneratorSpec, count: int) -> list[GtspInstance]:
    """``count`` instances with seeds ``spec.seed + 0 .. count - 1``."""
    return [generate_instance(spec.with_seed(spec.seed + i)) for i in range(count)]


# ------------------------------------------------------------------- formats

INSTANCE_FIELDS = ("n", "m", "depot", "family", "seed", "cluster", "coords")


def _num(x: float) -> str:
    return "%.17g" % x


def dumps_instance(instance: GtspInstance) -> str:
    rows = ",\n".join(f"    [{_num(x)}, {_num(y)}]" for x, y in instance.coords.tolist())
    return (
        "{\n"
        f'  "n": {instance.n},\n'
        f'  "m": {instance.m},\n'
        f'  "depot": {instance.depot},\n'
        f'  "family": {json.dumps(instance.family)},\n'
        f'  "seed": {instance.seed},\n'
        f'  "cluster": [{", ".join(str(c) for c in instance.cluster_of.tolist())}],\n'
        f'  "coords": [\n{rows}\n  ]\n'
        "}"
    )


def dumps_dataset(instances: Iterable[GtspInstance]) -> str:
    return "[\n" + ",\n".join(dumps_instance(x) for x in instances) + "\n]\n"


def _parse(text: str, source: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise InstanceFormatError(f"{source}: line {e.lineno} column {e.colno}: {e.msg}") from e


def instance_from_doc(doc, where: str = "instance") -> GtspInstance:
    if not isinstance(doc, dict):
        raise InstanceFormatError(f"{where}: expected an object, got {type(doc).__name__}")
    for key in ("n", "m", "cluster", "coords"):
        if key not in doc:
            raise InstanceFormatError(f"{where}: missing field {key!r}")

    def integer(key, value):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InstanceFormatError(f"{where}.{key}: expected integer, got {value!r}")
        return value

    n = integer("n", doc["n"])
    m = integer("m", doc["m"])
    depot = integer("depot", doc.get("depot", 0))
    seed = integer("seed", doc.get("seed", 0))
    family = doc.get("family", "random")
    if not isinstance(family, str):
        raise InstanceFormatError(f"{where}.family: expected string, got {family!r}")
    cluster = doc["cluster"]
    coords = doc["coords"]
    if not isinstance(cluster, list) or len(cluster) != n:
        raise InstanceFormatError(f"{where}.cluster: expected list of {n} integers")
    for i, c in enumerate(cluster):
        integer(f"cluster[{i}]", c)
    if not isinstance(coords, list) or len(coords) != n:
        raise InstanceFormatError(f"{where}.coords: expected list of {n} [x, y] pairs")
    for i, p in enumerate(coords):
        if (
            not isinstance(p, list)
            or len(p) != 2
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p)
        ):
            raise InstanceFormatError(f"{where}.coords[{i}]: expected [x, y] numbers, got {p!r}")
    try:
        return GtspInstance(
            np.array(coords, dtype=np.float64).reshape(n, 2),
            np.array(cluster, dtype=np.int64),
            m,
            depot,
            family,
            seed,
        )
    except InstanceFormatError as e:
        raise InstanceFormatError(f"{where}: {e}") from e


def loads_instance(text: str, source: str = "<string>") -> GtspInstance:
    return instance_from_doc(_parse(text, source), source)


def loads_dataset(text: str, source: str = "<string>") -> list[GtspInstance]:
    doc = _parse(text, source)
    if isinstance(doc, dict):
        return [instance_from_doc(doc, source)]
    if not isinstance(doc, list):
        raise InstanceFormatError(f"{source}: expected an array of instances")
    return [instance_from_doc(d, f"{source}[{i}]") for i, d in enumerate(doc)]


def write_instance(instance: GtspInstance, path) -> None:
    Path(path).write_text(dumps_instance(instance) + "\n")


def read_instance(path) -> GtspInstance:
    items = read_dataset(path)
    if len(items) != 1:
        raise InstanceFormatError(f"{path}: expected one instance, found {len(items)}")
    return items[0]


def write_dataset(instances: Iterable[GtspInstance], path) -> None:
    Path(path).write_text(dumps_dataset(instances))


def read_dataset(path) -> list[GtspInstance]:
    return loads_dataset(Path(path).read_text(), str(path))


def dumps_tour(instance: GtspInstance, tour: Tour) -> str:
    return (
        "{"
        f'"instance_seed": {instance.seed}, "family": {json.dumps(instance.family)}, '
        f'"nodes": [{", ".join(str(v) for v in tour.nodes)}], "cost": {_num(tour.cost)}'
        "}"
    )


def loads_tour(text: str, instance: GtspInstance | None = None) -> Tour:
    doc = _parse(text, "tour")
    if not isinstance(doc, dict) or "nodes" not in doc or "cost" not in doc:
        raise InstanceFormatError("tour: expected object with 'nodes' and 'cost'")
    nodes = tuple(int(v) for v in doc["nodes"])
    if instance is not None:
        return make_tour(instance, nodes)
    return Tour(nodes, float(doc["cost"]))
