"""Finite connected pieces of the d-regular tree.

A ``SubTree`` stores ``gamma`` as a parent-index array with vertex 0 the
distinguished vertex ``x`` and ``parent[v] < v``.  Its closure (``gamma``
plus the outer boundary) is laid out the same way: the ``|gamma|`` inner
vertices come first, then the boundary vertices, each hanging off the inner
vertex that owns it.  Every edge of the closure is then ``(parent[v], v)``
and points away from ``x``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SubTree:
    d: int
    parent: tuple[int, ...]
    closure_parent: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        par = self.parent
        if not par or par[0] != -1:
            raise ValueError("parent[0] must be -1 (vertex 0 is the distinguished vertex)")
        n = len(par)
        kids = [0] * n
        for v in range(1, n):
            p = par[v]
            if not 0 <= p < v:
                raise ValueError(f"parent[{v}]={p} must satisfy 0 <= parent < {v}")
            kids[p] += 1
        full = list(par)
        for v in range(n):
            room = (self.d + 1 if v == 0 else self.d) - kids[v]
            if room < 0:
                raise ValueError(f"vertex {v} has {kids[v]} children, more than the tree allows")
            full.extend([v] * room)
        object.__setattr__(self, "closure_parent", tuple(full))

    @property
    def size(self) -> int:
        """``|gamma|``."""
        return len(self.parent)

    @property
    def closure_size(self) -> int:
        return len(self.closure_parent)

    @property
    def vertices(self) -> list[int]:
        return list(range(self.size))

    @property
    def boundary(self) -> list[int]:
        return list(range(self.size, self.closure_size))

    @property
    def directed_edges(self) -> list[tuple[int, int]]:
        """All edges touching gamma, oriented away from vertex 0."""
        cp = self.closure_parent
        return [(cp[v], v) for v in range(1, len(cp))]

    @property
    def n_edges(self) -> int:
        return self.closure_size - 1

    def to_parent_array(self) -> list[int]:
        return list(self.parent)

    @classmethod
    def from_parent_array(cls, parents, d: int) -> "SubTree":
        return cls(int(d), tuple(int(p) for p in parents))

    def reroot(self, new_root: int) -> "SubTree":
        """Same vertex set of gamma, distinguished vertex moved to ``new_root``."""
        n = self.size
        adj = [[] for _ in range(n)]
        for v in range(1, n):
            adj[self.parent[v]].append(v)
            adj[v].append(self.parent[v])
        new_id = {new_root: 0}
        new_par = [-1]
        queue = deque([new_root])
        while queue:
            v = queue.popleft()
            for w in adj[v]:
                if w not in new_id:
                    new_id[w] = len(new_par)
                    new_par.append(new_id[v])
                    queue.append(w)
        return SubTree(self.d, tuple(new_par))


def grow_random(d: int, size: int, rng: np.random.Generator) -> SubTree:
    """Grow gamma by attaching a uniformly chosen boundary vertex at each step."""
    parent = [-1]
    free = [0] * (d + 1)  # one entry per open slot, holding its owner
    while len(parent) < size:
        k = int(rng.integers(len(free)))
        owner = free[k]
        free[k] = free[-1]
        free.pop()
        v = len(parent)
        parent.append(owner)
        free.extend([v] * d)
    return SubTree(d, tuple(parent))


def bfs_subtree(d: int, size: int) -> SubTree:
    """The ball-like subtree obtained by filling slots in breadth-first order."""
    parent = [-1]
    queue = deque([0] * (d + 1))
    while len(parent) < size:
        owner = queue.popleft()
        v = len(parent)
        parent.append(owner)
        queue.extend([v] * d)
    return SubTree(d, tuple(parent))


def path_subtree(d: int, size: int) -> SubTree:
    """A straight path of ``size`` vertices starting at x."""
    return SubTree(d, tuple([-1] + list(range(size - 1))))
