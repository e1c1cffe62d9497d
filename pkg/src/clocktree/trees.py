"""Finite rooted pieces of the d-regular tree, stored level by level.

Level 0 is the root.  ``parents[k]`` maps every vertex of level ``k`` to its
parent's position in level ``k - 1``; siblings are contiguous.  The root has
``d + 1`` children and every other non-leaf vertex has ``d``.  Leaves are
the vertices whose spins are observed when computing posteriors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LayeredTree:
    d: int
    parents: tuple[np.ndarray, ...]
    spine_length: int = 0
    offsets: np.ndarray = field(init=False, repr=False)
    has_children: tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self):
        sizes = [len(p) for p in self.parents]
        object.__setattr__(self, "offsets", np.concatenate([[0], np.cumsum(sizes)]))
        flags = []
        for k, size in enumerate(sizes):
            f = np.zeros(size, dtype=bool)
            if k + 1 < len(self.parents):
                f[np.unique(self.parents[k + 1])] = True
            flags.append(f)
        object.__setattr__(self, "has_children", tuple(flags))

    @property
    def depth(self) -> int:
        return len(self.parents) - 1

    @property
    def level_sizes(self) -> list[int]:
        return [len(p) for p in self.parents]

    @property
    def n_vertices(self) -> int:
        return int(self.offsets[-1])

    def global_id(self, level: int, pos):
        return self.offsets[level] + np.asarray(pos)

    def edges(self) -> np.ndarray:
        """All edges as (parent_id, child_id) rows in global numbering."""
        rows = []
        for k in range(1, len(self.parents)):
            child = self.offsets[k] + np.arange(len(self.parents[k]))
            rows.append(np.stack([self.offsets[k - 1] + self.parents[k], child], axis=1))
        return np.concatenate(rows) if rows else np.zeros((0, 2), dtype=int)

    def leaves(self, level: int) -> np.ndarray:
        return ~self.has_children[level]

    def truncate(self, depth: int) -> "LayeredTree":
        return LayeredTree(self.d, self.parents[: depth + 1], min(self.spine_length, depth))


def caterpillar(d: int, spine_length: int, hang: int) -> LayeredTree:
    """A spine of ``spine_length`` edges with full ``hang``-deep subtrees around it.

    Position 0 of levels ``0..spine_length`` is the spine.  A vertex carries
    children when its level exceeds that of its deepest spine ancestor by
    less than ``hang``.  With ``spine_length = 0`` this is the complete
    truncated tree of depth ``hang``.
    """
    if hang < 1:
        raise ValueError("hang must be >= 1")
    parents = [np.array([-1])]
    anchor = np.array([0])  # level of the deepest spine ancestor, per vertex
    for level in range(1, spine_length + hang + 1):
        prev = level - 1
        branching = (prev - anchor) < hang
        idx = np.flatnonzero(branching)
        if idx.size == 0:
            break
        fan = np.full(idx.size, d)
        if prev == 0:
            fan[:] = d + 1
        par = np.repeat(idx, fan)
        anc = anchor[par].copy()
        if level <= spine_length:
            anc[0] = level  # position 0 continues the spine
        parents.append(par)
        anchor = anc
    return LayeredTree(d, tuple(parents), spine_length)


def truncated_tree(d: int, depth: int) -> LayeredTree:
    return caterpillar(d, 0, depth)


def truncated_size(d: int, depth: int) -> int:
    return 1 + (d + 1) * (d**depth - 1) // (d - 1)


def thinned_spacings(n: int, kappa: int = 4) -> list[int]:
    """``r_i = ceil(i / kappa)`` for the ``n^2 - 1`` gaps of an ``n^2``-point branch."""
    return [math.ceil(i / kappa) for i in range(1, n * n)]


def branch_levels(spacings) -> list[int]:
    """Levels of the branch points, starting at the root."""
    return [0] + list(np.cumsum(spacings).astype(int))
