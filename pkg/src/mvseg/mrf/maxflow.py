"""s-t maximum flow / minimum cut on graphs with real capacities.

Dinic's augmenting-path algorithm: breadth-first level graph, then one
augmenting path at a time along current-arc pointers. Each augmentation
subtracts the exact bottleneck, so at least one arc is saturated to exactly
zero and float residuals never go negative. Arc order is the insertion order,
so results are deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ..errors import InputError

__all__ = ["FlowGraph", "max_flow", "cut_capacity"]


@dataclass(frozen=True)
class FlowGraph:
    """Edges ``(tail[e], head[e])`` with forward and backward capacities.

    Every edge is stored as a pair of opposite arcs, the second being the
    reverse of the first.
    """

    n_nodes: int
    source: int
    sink: int
    tail: np.ndarray
    head: np.ndarray
    cap: np.ndarray
    rev_cap: np.ndarray

    def __post_init__(self):
        tail = np.asarray(self.tail, dtype=np.int64)
        head = np.asarray(self.head, dtype=np.int64)
        cap = np.asarray(self.cap, dtype=np.float64)
        rev = np.asarray(self.rev_cap, dtype=np.float64)
        if not (tail.shape == head.shape == cap.shape == rev.shape):
            raise InputError("edge arrays must have equal length")
        if self.source == self.sink:
            raise InputError("source and sink must differ")
        for arr in (tail, head):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n_nodes):
                raise InputError("edge endpoint out of range")
        if np.any(cap < 0) or np.any(rev < 0) or not (np.all(np.isfinite(cap)) and np.all(np.isfinite(rev))):
            raise InputError("capacities must be finite and non-negative")
        for name, arr in (("tail", tail), ("head", head), ("cap", cap), ("rev_cap", rev)):
            object.__setattr__(self, name, arr)

    @classmethod
    def from_edges(cls, n_nodes, source, sink, edges):
        """``edges`` is an iterable of ``(u, v, cap_uv[, cap_vu])``."""
        rows = [tuple(e) + (0.0,) * (4 - len(e)) for e in edges]
        if not rows:
            z = np.zeros(0)
            return cls(n_nodes, source, sink, z.astype(np.int64), z.astype(np.int64), z, z)
        u, v, c, r = zip(*rows)
        return cls(n_nodes, source, sink, np.array(u), np.array(v), np.array(c, float), np.array(r, float))


def _csr(g: FlowGraph):
    m = g.tail.size
    tails = np.empty(2 * m, np.int64)
    heads = np.empty(2 * m, np.int64)
    caps = np.empty(2 * m, np.float64)
    tails[0::2], tails[1::2] = g.tail, g.head
    heads[0::2], heads[1::2] = g.head, g.tail
    caps[0::2], caps[1::2] = g.cap, g.rev_cap
    rev = np.arange(2 * m) ^ 1
    order = np.argsort(tails, kind="stable")
    pos = np.empty_like(order)
    pos[order] = np.arange(order.size)
    start = np.zeros(g.n_nodes + 1, np.int64)
    np.cumsum(np.bincount(tails, minlength=g.n_nodes), out=start[1:])
    return start, tails[order], heads[order], caps[order].copy(), pos[rev[order]]


@numba.njit(cache=True, nogil=True)
def _bfs(n, s, start, heads, res, level, queue):
    level[:] = -1
    level[s] = 0
    qh, qt = 0, 1
    queue[0] = s
    while qh < qt:
        u = queue[qh]
        qh += 1
        for a in range(start[u], start[u + 1]):
            v = heads[a]
            if res[a] > 0.0 and level[v] < 0:
                level[v] = level[u] + 1
                queue[qt] = v
                qt += 1


@numba.njit(cache=True, nogil=True)
def _dinic(n, s, t, start, tails, heads, res, rev):
    level = np.empty(n, np.int64)
    queue = np.empty(n, np.int64)
    cur = np.empty(n, np.int64)
    path = np.empty(n, np.int64)
    flow = 0.0
    while True:
        _bfs(n, s, start, heads, res, level, queue)
        if level[t] < 0:
            break
        for u in range(n):
            cur[u] = start[u]
        while True:
            depth = 0
            u = s
            found = False
            while True:
                if u == t:
                    found = True
                    break
                advanced = False
                while cur[u] < start[u + 1]:
                    a = cur[u]
                    v = heads[a]
                    if res[a] > 0.0 and level[v] == level[u] + 1:
                        path[depth] = a
                        depth += 1
                        u = v
                        advanced = True
                        break
                    cur[u] += 1
                if not advanced:
                    if depth == 0:
                        break
                    # dead end: retreat and skip the arc that led here
                    level[u] = -1
                    depth -= 1
                    u = tails[path[depth]]
                    cur[u] += 1
            if not found:
                break
            f = res[path[0]]
            for d in range(1, depth):
                if res[path[d]] < f:
                    f = res[path[d]]
            for d in range(depth):
                a = path[d]
                res[a] -= f
                res[rev[a]] += f
            flow += f
    return flow


def max_flow(g: FlowGraph) -> tuple[float, np.ndarray]:
    """Return the maximum flow value and a Boolean "source side" flag per node.

    The cut is the set of nodes reachable from the source in the final
    residual graph; nodes cut off from both terminals land on the sink side.
    """
    start, tails, heads, res, rev = _csr(g)
    flow = _dinic(g.n_nodes, g.source, g.sink, start, tails, heads, res, rev)
    level = np.empty(g.n_nodes, np.int64)
    queue = np.empty(g.n_nodes, np.int64)
    _bfs(g.n_nodes, g.source, start, heads, res, level, queue)
    return float(flow), level >= 0


def cut_capacity(g: FlowGraph, source_side: np.ndarray) -> float:
    """Total capacity of arcs leaving the source side."""
    s = np.asarray(source_side, bool)
    fwd = s[g.tail] & ~s[g.head]
    bwd = s[g.head] & ~s[g.tail]
    return float(g.cap[fwd].sum() + g.rev_cap[bwd].sum())
