"""Predictor-guided specialization: aging (regularized) evolution over
configs maximizing predicted accuracy under a latency constraint, plus an
exhaustive oracle for small spaces.

Search touches only the twin functions — it never runs the supernet.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .space import (
    ArchConfig,
    ArchSpace,
    canonical_arch,
    count_subnetworks,
    enumerate_archs,
    random_arch,
)


class InfeasibleConstraintError(Exception):
    """No config satisfying the latency constraint was found; carries the
    minimum predicted latency seen while trying."""

    def __init__(self, constraint_ms: float, min_latency_ms: float):
        self.constraint_ms = constraint_ms
        self.min_latency_ms = min_latency_ms
        super().__init__(
            f"no feasible config under {constraint_ms} ms; minimum predicted "
            f"latency found was {min_latency_ms:.6g} ms")


@dataclass(frozen=True)
class SearchParams:
    population: int = 100
    sample_size: int = 10
    cycles: int = 2000
    mutation_prob: float = 0.1
    constraint_ms: float = math.inf
    seed: int = 0
    feasibility_retries: int = 50

    def __post_init__(self):
        if not 2 <= self.sample_size <= self.population:
            raise ValueError("need 2 <= sample_size <= population")
        if self.cycles < self.population:
            raise ValueError("cycles must be >= population")
        if not 0.0 < self.mutation_prob <= 1.0:
            raise ValueError("mutation probability must be in (0, 1]")


@dataclass
class SearchResult:
    best_arch: ArchConfig
    predicted_accuracy: float
    predicted_latency: float
    history: list[tuple[int, float]] = field(default_factory=list)
    feasible: bool = True

    def to_dict(self) -> dict:
        return {"best_arch": self.best_arch.to_dict(),
                "predicted_accuracy": self.predicted_accuracy,
                "predicted_latency": self.predicted_latency,
                "feasible": self.feasible,
                "history": [[c, a] for c, a in self.history]}


def _arch_key(arch: ArchConfig) -> tuple:
    return (arch.depths, arch.kernels, arch.widths, arch.resolution)


def mutate(arch: ArchConfig, space: ArchSpace, p: float,
           rng: np.random.Generator) -> ArchConfig:
    """Each gene (per-unit depth, per-slot kernel/width, resolution) is
    independently resampled uniformly from its choice set with probability
    p.  Placeholder slots are re-canonicalized afterwards."""
    depths, kernels, widths = [], [], []
    for u in range(space.n_units):
        d = arch.depths[u]
        if rng.random() < p:
            d = int(rng.choice(space.depth_choices[u]))
        ks = list(arch.kernels[u])
        ws = list(arch.widths[u])
        for l in range(space.max_depth(u)):
            if rng.random() < p:
                ks[l] = int(rng.choice(space.kernel_choices))
            if rng.random() < p:
                ws[l] = int(rng.choice(space.width_ratio_choices))
        depths.append(d)
        kernels.append(tuple(ks))
        widths.append(tuple(ws))
    r = arch.resolution
    if rng.random() < p:
        r = int(rng.choice(space.resolution_choices))
    return canonical_arch(space, ArchConfig(tuple(depths), tuple(kernels),
                                            tuple(widths), r))


def _better(acc_a, lat_a, key_a, acc_b, lat_b, key_b) -> bool:
    """Deterministic ordering: higher accuracy, then lower latency, then
    lexicographically smaller config."""
    if acc_a != acc_b:
        return acc_a > acc_b
    if lat_a != lat_b:
        return lat_a < lat_b
    return key_a < key_b


def evolve(space: ArchSpace, acc_pred, lat_pred,
           params: SearchParams) -> SearchResult:
    """Aging evolution: tournament-select the best of S random members,
    mutate it, drop the oldest member.  Only feasible configs ever enter
    the population; infeasible children are re-mutated up to the retry
    budget (falling back to a copy of the parent)."""
    rng = np.random.default_rng(params.seed)
    min_lat = math.inf
    population: deque = deque()

    def feasible(arch):
        nonlocal min_lat
        lat = lat_pred(arch)
        min_lat = min(min_lat, lat)
        return lat <= params.constraint_ms, lat

    for _ in range(params.population):
        member = None
        for _ in range(params.feasibility_retries):
            cand = random_arch(space, rng)
            ok, lat = feasible(cand)
            if ok:
                member = (cand, acc_pred(cand), lat)
                break
        if member is None:
            raise InfeasibleConstraintError(params.constraint_ms, min_lat)
        population.append(member)

    best = population[0]
    for m in population:
        if _better(m[1], m[2], _arch_key(m[0]), best[1], best[2], _arch_key(best[0])):
            best = m
    history = [(0, best[1])]

    for cycle in range(1, params.cycles + 1):
        idx = rng.permutation(len(population))[:params.sample_size]
        parent = None
        for i in idx:
            m = population[int(i)]
            if parent is None or _better(m[1], m[2], _arch_key(m[0]),
                                         parent[1], parent[2], _arch_key(parent[0])):
                parent = m
        child = None
        for _ in range(params.feasibility_retries):
            cand = mutate(parent[0], space, params.mutation_prob, rng)
            ok, lat = feasible(cand)
            if ok:
                child = (cand, acc_pred(cand), lat)
                break
        if child is None:
            child = parent  # parent is feasible by construction
        population.append(child)
        population.popleft()
        if _better(child[1], child[2], _arch_key(child[0]),
                   best[1], best[2], _arch_key(best[0])):
            best = child
        history.append((cycle, best[1]))

    return SearchResult(best[0], float(best[1]), float(best[2]), history, True)


def exhaustive_search(space: ArchSpace, acc_pred, lat_pred,
                      constraint_ms: float = math.inf,
                      limit: int = 10 ** 6) -> SearchResult:
    """Enumerate every config x resolution and return the feasible argmax of
    predicted accuracy (ties: lower latency, then lexicographic config)."""
    n = count_subnetworks(space) * len(space.resolution_choices)
    if n > limit:
        raise ValueError(f"space has {n} configs, exceeds oracle limit {limit}")
    best = None
    min_lat = math.inf
    for arch in enumerate_archs(space, include_resolutions=True, limit=limit):
        lat = lat_pred(arch)
        min_lat = min(min_lat, lat)
        if lat > constraint_ms:
            continue
        acc = acc_pred(arch)
        if best is None or _better(acc, lat, _arch_key(arch),
                                   best[1], best[2], _arch_key(best[0])):
            best = (arch, acc, lat)
    if best is None:
        raise InfeasibleConstraintError(constraint_ms, min_lat)
    return SearchResult(best[0], float(best[1]), float(best[2]),
                        [(0, float(best[1]))], True)
