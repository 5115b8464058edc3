"""Object-query generation schemes and their embedding-sharing structure.

Three ways to build the decoder's input queries from learnable embedding
tables: independent per-query embeddings ("naive"), an instance table plus a
point table combined pairwise ("hierarchical"), and an instance table plus a
once-used per-query point table ("hybrid"). Queries are laid out
instance-major: query j belongs to instance j // points_per_instance.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import sqrt

import numpy as np

from .numcore import Array

NAIVE = "naive"
HIERARCHICAL = "hierarchical"
HYBRID = "hybrid"
SCHEMES = (NAIVE, HIERARCHICAL, HYBRID)

Provenance = tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class QueryConfig:
    num_instances: int
    points_per_instance: int
    embed_dim: int

    def __post_init__(self):
        if self.num_instances < 1:
            raise ValueError(f"num_instances must be >= 1, got {self.num_instances}")
        if self.points_per_instance < 2:
            raise ValueError(
                f"points_per_instance must be >= 2, got {self.points_per_instance}"
            )
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")

    @property
    def total_queries(self) -> int:
        return self.num_instances * self.points_per_instance


@dataclass
class QuerySet:
    """Query vectors plus the record of which embeddings built each one."""

    queries: Array  # (num_instances * points_per_instance, embed_dim)
    instance_of: np.ndarray  # query index -> instance index
    provenance: tuple[Provenance, ...]


def instance_layout(cfg: QueryConfig) -> np.ndarray:
    return np.arange(cfg.total_queries) // cfg.points_per_instance


def _init_table(rng: np.random.Generator, n: int, d: int) -> Array:
    bound = 1.0 / sqrt(d)
    return rng.uniform(-bound, bound, size=(n, d))


def build_provenance(scheme: str, cfg: QueryConfig) -> tuple[Provenance, ...]:
    n_p = cfg.points_per_instance
    if scheme == NAIVE:
        return tuple((("query", j),) for j in range(cfg.total_queries))
    if scheme == HIERARCHICAL:
        return tuple(
            (("instance", j // n_p), ("point", j % n_p))
            for j in range(cfg.total_queries)
        )
    if scheme == HYBRID:
        return tuple(
            (("instance", j // n_p), ("point", j)) for j in range(cfg.total_queries)
        )
    raise ValueError(f"unknown query scheme {scheme!r}; valid: {SCHEMES}")


def init_tables(scheme: str, cfg: QueryConfig, rng: np.random.Generator):
    """Fresh embedding tables for a scheme."""
    d = cfg.embed_dim
    if scheme == NAIVE:
        return {"query": _init_table(rng, cfg.total_queries, d)}
    if scheme == HIERARCHICAL:
        return {
            "instance": _init_table(rng, cfg.num_instances, d),
            "point": _init_table(rng, cfg.points_per_instance, d),
        }
    if scheme == HYBRID:
        return {
            "instance": _init_table(rng, cfg.num_instances, d),
            "point": _init_table(rng, cfg.total_queries, d),
        }
    raise ValueError(f"unknown query scheme {scheme!r}; valid: {SCHEMES}")


def assemble(scheme: str, cfg: QueryConfig, tables: dict[str, Array]):
    """Build the query matrix from embedding tables, differentiably.

    Returns (queries, backward) where backward(dq) gives per-table gradients.
    """
    n_i, n_p = cfg.num_instances, cfg.points_per_instance
    if scheme == NAIVE:
        q = tables["query"].copy()

        def backward(dq: Array):
            return {"query": dq.copy()}

    elif scheme == HIERARCHICAL:
        q = np.repeat(tables["instance"], n_p, axis=0) + np.tile(
            tables["point"], (n_i, 1)
        )

        def backward(dq: Array):
            blocks = dq.reshape(n_i, n_p, -1)
            return {"instance": blocks.sum(axis=1), "point": blocks.sum(axis=0)}

    elif scheme == HYBRID:
        q = np.repeat(tables["instance"], n_p, axis=0) + tables["point"]

        def backward(dq: Array):
            return {
                "instance": dq.reshape(n_i, n_p, -1).sum(axis=1),
                "point": dq.copy(),
            }

    else:
        raise ValueError(f"unknown query scheme {scheme!r}; valid: {SCHEMES}")
    return q, backward


def _generate(scheme: str, cfg: QueryConfig, rng: np.random.Generator):
    tables = init_tables(scheme, cfg, rng)
    q, _ = assemble(scheme, cfg, tables)
    qs = QuerySet(
        queries=q,
        instance_of=instance_layout(cfg),
        provenance=build_provenance(scheme, cfg),
    )
    return qs, tables


def gen_naive(cfg: QueryConfig, rng: np.random.Generator):
    """One independent embedding per query; no sharing anywhere."""
    return _generate(NAIVE, cfg, rng)


def gen_hierarchical(cfg: QueryConfig, rng: np.random.Generator):
    """Pairwise sums: query (i, j) = instance_embedding[i] + point_embedding[j].

    Every instance embedding is reused points_per_instance times and every
    point embedding is reused num_instances times (across instances).
    """
    return _generate(HIERARCHICAL, cfg, rng)


def gen_hybrid(cfg: QueryConfig, rng: np.random.Generator):
    """Per-query point embeddings plus a shared per-instance embedding.

    Point embeddings are used exactly once, so no embedding couples two
    different instances.
    """
    return _generate(HYBRID, cfg, rng)


GENERATORS = {NAIVE: gen_naive, HIERARCHICAL: gen_hierarchical, HYBRID: gen_hybrid}


@dataclass
class SharingReport:
    """Which query pairs share at least one embedding, split by locality."""

    intra_pairs: tuple[tuple[int, int], ...]
    inter_pairs: tuple[tuple[int, int], ...]

    @property
    def num_intra(self) -> int:
        return len(self.intra_pairs)

    @property
    def num_inter(self) -> int:
        return len(self.inter_pairs)

    @property
    def num_shared(self) -> int:
        return self.num_intra + self.num_inter


def sharing_signature(qs: QuerySet) -> SharingReport:
    """Classify every query pair by whether it shares an embedding and
    whether the two queries belong to the same instance."""
    prov_sets = [set(p) for p in qs.provenance]
    intra: list[tuple[int, int]] = []
    inter: list[tuple[int, int]] = []
    for a, b in combinations(range(len(prov_sets)), 2):
        if prov_sets[a] & prov_sets[b]:
            if qs.instance_of[a] == qs.instance_of[b]:
                intra.append((a, b))
            else:
                inter.append((a, b))
    return SharingReport(intra_pairs=tuple(intra), inter_pairs=tuple(inter))


def usage_counts(qs: QuerySet) -> dict[str, dict[int, int]]:
    """How many queries each embedding participates in, per table."""
    counts: dict[str, dict[int, int]] = {}
    for prov in qs.provenance:
        for kind, idx in prov:
            counts.setdefault(kind, {}).setdefault(idx, 0)
            counts[kind][idx] += 1
    return counts
