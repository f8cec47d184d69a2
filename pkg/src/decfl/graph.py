"""Static communication topologies for the simulator.

Graphs are undirected with strictly positive edge weights. Generation
iterates candidate edges in lexicographic order with one RNG draw each,
so a (generator, params, seed) triple pins the exact graph on every
platform.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

from .rng import make_rng


@dataclass(frozen=True)
class Topology:
    """Undirected weighted graph. Immutable after construction."""

    node_count: int
    edges: frozenset[tuple[int, int]]  # unordered pairs stored as (i, j), i < j
    weights: dict[tuple[int, int], float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop ({i},{i}) not allowed")
            if not (0 <= i < j < self.node_count):
                raise ValueError(f"edge ({i},{j}) out of range")
        for pair, w in self.weights.items():
            if pair not in self.edges:
                raise ValueError(f"weight for non-edge {pair}")
            if w <= 0:
                raise ValueError(f"non-positive weight {w} on edge {pair}")

    def weight(self, i: int, j: int) -> float:
        pair = (min(i, j), max(i, j))
        if pair not in self.edges:
            raise KeyError(f"no edge {pair}")
        return self.weights.get(pair, 1.0)

    def neighbors(self, i: int) -> list[int]:
        """Neighbors of node i, ascending. Never contains i."""
        if not 0 <= i < self.node_count:
            raise IndexError(f"node {i} out of range [0, {self.node_count})")
        out = []
        for a, b in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))

    def is_connected(self) -> bool:
        """BFS from node 0; a single-node graph counts as connected."""
        if self.node_count == 1:
            return True
        adj: list[list[int]] = [[] for _ in range(self.node_count)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        seen = [False] * self.node_count
        seen[0] = True
        queue = deque([0])
        count = 1
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    count += 1
                    queue.append(v)
        return count == self.node_count

    def to_json(self) -> str:
        doc = {
            "n": self.node_count,
            "edges": [[i, j, self.weights.get((i, j), 1.0)] for i, j in sorted(self.edges)],
            "seed": self.seed,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Topology":
        doc = json.loads(text)
        edges = frozenset((int(i), int(j)) for i, j, _ in doc["edges"])
        weights = {(int(i), int(j)): float(w) for i, j, w in doc["edges"] if w != 1.0}
        return cls(node_count=int(doc["n"]), edges=edges, weights=weights, seed=int(doc["seed"]))


def gen_erdos_renyi(n: int, p: float, seed: int) -> Topology:
    """Erdos-Renyi G(n, p): each unordered pair included with probability p.

    One RNG draw per candidate pair, pairs visited in lexicographic
    order, so the sampled graph is a pure function of (n, p, seed).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    rng = make_rng(seed)
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.add((i, j))
    return Topology(node_count=n, edges=frozenset(edges), seed=seed)


def gen_barabasi_albert(n: int, m: int, seed: int) -> Topology:
    """Preferential-attachment graph: (m+1)-clique seed, then each new
    node attaches to m distinct existing nodes with probability
    proportional to current degree.
    """
    if not 1 <= m < n:
        raise ValueError("need 1 <= m < n")
    rng = make_rng(seed)
    edges = set()
    degree = [0] * n
    for i in range(m + 1):
        for j in range(i + 1, m + 1):
            edges.add((i, j))
            degree[i] += 1
            degree[j] += 1
    for new in range(m + 1, n):
        targets: set[int] = set()
        while len(targets) < m:
            # degree-proportional draw over existing nodes, rejecting repeats
            total = sum(degree[:new])
            r = rng.random() * total
            acc = 0.0
            for cand in range(new):
                acc += degree[cand]
                if r < acc:
                    targets.add(cand)
                    break
        for t in sorted(targets):
            edges.add((t, new))
            degree[t] += 1
            degree[new] += 1
    return Topology(node_count=n, edges=frozenset(edges), seed=seed)
