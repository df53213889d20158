"""Agent orderings (chain, binary tree, star, custom DAG) and their round costs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

KINDS = ("chain", "binary_tree", "star", "custom")
_ALIASES = {"tree": "binary_tree"}


def canonical_kind(kind: str) -> str:
    kind = _ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise ValueError(f"unknown topology kind {kind!r}")
    return kind


@dataclass(frozen=True)
class Topology:
    """Agents ``0..K-1`` with successor sets and level assignment.

    ``succ[a]`` holds the agents one level below ``a`` that continue from
    ``a``'s parameters; ``levels[l]`` lists the agents of level ``l`` in
    ascending order.
    """

    kind: str
    num_agents: int
    succ: tuple[tuple[int, ...], ...]
    level_of: tuple[int, ...]

    @property
    def levels(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(max(self.level_of) + 1)]
        for a, lev in enumerate(self.level_of):
            out[lev].append(a)
        return out

    @property
    def pred(self) -> tuple[tuple[int, ...], ...]:
        p: list[list[int]] = [[] for _ in range(self.num_agents)]
        for a, children in enumerate(self.succ):
            for c in children:
                p[c].append(a)
        return tuple(tuple(sorted(x)) for x in p)

    @property
    def roots(self) -> list[int]:
        return [a for a, ps in enumerate(self.pred) if not ps]

    @property
    def leaves(self) -> list[int]:
        return [a for a, s in enumerate(self.succ) if not s]


def build(kind: str, num_agents: int) -> Topology:
    kind = canonical_kind(kind)
    K = num_agents
    if K < 1:
        raise ValueError("need at least one agent")
    if kind == "chain":
        succ = tuple((a + 1,) if a + 1 < K else () for a in range(K))
        return Topology(kind, K, succ, tuple(range(K)))
    if kind == "star":
        return Topology(kind, K, tuple(() for _ in range(K)), tuple(0 for _ in range(K)))
    if kind == "binary_tree":
        if K < 2:
            raise ValueError("a binary tree needs at least 2 agents")
        succ = tuple(tuple(c for c in (2 * a + 1, 2 * a + 2) if c < K) for a in range(K))
        return Topology(kind, K, succ, tuple(int(math.floor(math.log2(a + 1))) for a in range(K)))
    raise ValueError("custom topologies are built with from_edges / load_edge_list")


def from_edges(edges, num_agents: int | None = None) -> Topology:
    """Custom DAG from ``(parent, child)`` pairs; levels are longest-path depths."""
    edges = [(int(p), int(c)) for p, c in edges]
    nodes = {x for e in edges for x in e}
    K = num_agents if num_agents is not None else (max(nodes) + 1 if nodes else 0)
    if K < 1:
        raise ValueError("empty topology")
    if nodes and (min(nodes) < 0 or max(nodes) >= K):
        raise ValueError(f"agent ids must lie in [0, {K})")
    children: list[set[int]] = [set() for _ in range(K)]
    indeg = [0] * K
    for p, c in edges:
        if p == c:
            raise ValueError(f"self loop on agent {p}")
        if c not in children[p]:
            children[p].add(c)
            indeg[c] += 1
    level = [0] * K
    ready = sorted(a for a in range(K) if indeg[a] == 0)
    seen = 0
    while ready:
        a = ready.pop(0)
        seen += 1
        for c in sorted(children[a]):
            level[c] = max(level[c], level[a] + 1)
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
        ready.sort()
    if seen != K:
        raise ValueError("edge list contains a cycle")
    succ = tuple(tuple(sorted(c for c in children[a] if level[c] == level[a] + 1)) for a in range(K))
    return Topology("custom", K, succ, tuple(level))


def load_edge_list(path, num_agents: int | None = None) -> Topology:
    """Read ``parent child`` pairs, one per line; ``#`` starts a comment."""
    edges = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'parent child'")
        edges.append((int(parts[0]), int(parts[1])))
    return from_edges(edges, num_agents)


def acrs_per_round(topology: Topology) -> int:
    """Parallel exchanges per round: K on a chain, ceil(log2 K) on a tree, 1 on a star."""
    K = topology.num_agents
    if topology.kind == "chain":
        return K
    if topology.kind == "binary_tree":
        return math.ceil(math.log2(K))
    if topology.kind == "star":
        return 1
    return max(topology.level_of) + 1


@dataclass(frozen=True)
class BandwidthModel:
    """Bytes moved per round, as transfers per round times bytes per transfer.

    ``num_examples`` and ``batch_size`` are only needed for the FedAvg
    reference, which exchanges models once per local minibatch.
    """

    transfer_bytes: float = 10.2e6
    num_examples: int | None = None
    batch_size: int = 64

    def transfers_per_round(self, kind: str, num_agents: int) -> int:
        K = num_agents
        if kind == "fedavg":
            if self.num_examples is None:
                raise ValueError("fedavg bandwidth needs num_examples")
            return math.ceil(self.num_examples / (K * self.batch_size)) * 2 * K
        kind = canonical_kind(kind)
        if kind == "chain":
            return K
        if kind == "binary_tree":
            # K-1 tree edges plus all leaves but one reporting for aggregation
            return K + math.ceil(K / 2) - 2 if K >= 2 else 1
        if kind == "star":
            return 2 * K
        raise ValueError("custom topologies are costed with transfers_for")

    def transfers_for(self, topology: Topology) -> int:
        """Transfers for any topology; custom DAGs count SCC hand-offs to roots, edges and leaf reports."""
        if topology.kind != "custom":
            return self.transfers_per_round(topology.kind, topology.num_agents)
        edges = sum(len(s) for s in topology.succ)
        return len(topology.roots) + edges + len(topology.leaves)


def bandwidth_per_round(model: BandwidthModel, kind: str, num_agents: int) -> float:
    if model.transfer_bytes <= 0:
        raise ValueError("transfer_bytes must be positive")
    return model.transfers_per_round(kind, num_agents) * model.transfer_bytes
