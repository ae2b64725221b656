"""Human3.6M-style 17-joint skeleton and normalized graph adjacency.

Joint table (index: name, limb degree of freedom)::

     0 pelvis      0        9 neck/nose   0
     1 r_hip       1       10 head        0
     2 r_knee      2       11 l_shoulder  1
     3 r_ankle     3       12 l_elbow     2
     4 l_hip       1       13 l_wrist     3
     5 l_knee      2       14 r_shoulder  1
     6 l_ankle     3       15 r_elbow     2
     7 spine       0       16 r_wrist     3
     8 thorax      0

Limbs are listed proximal to distal in the fixed order
(right leg, left leg, left arm, right arm).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

H36M_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
H36M_EDGES = (
    (0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6),
    (0, 7), (7, 8), (8, 9), (9, 10),
    (8, 11), (11, 12), (12, 13), (8, 14), (14, 15), (15, 16),
)
H36M_LIMBS = ((1, 2, 3), (4, 5, 6), (11, 12, 13), (14, 15, 16))
H36M_FLIP_PAIRS = ((1, 4), (2, 5), (3, 6), (11, 14), (12, 15), (13, 16))


@dataclass(frozen=True)
class SkeletonTopology:
    names: tuple
    edges: tuple
    ldof: tuple
    limbs: tuple
    flip_pairs: tuple

    @property
    def num_joints(self) -> int:
        return len(self.names)

    J = num_joints

    def parents(self) -> list[int]:
        """Parent index per joint (root is -1), from a BFS over ``edges`` rooted at 0."""
        adj = {i: [] for i in range(self.num_joints)}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        parent = [-2] * self.num_joints
        parent[0] = -1
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if parent[v] == -2:
                    parent[v] = u
                    queue.append(v)
        return parent

    def flip_permutation(self) -> np.ndarray:
        perm = np.arange(self.num_joints)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm

    def joints_with_ldof(self, levels) -> list[int]:
        levels = set(levels)
        return [j for j, d in enumerate(self.ldof) if d in levels]

    def adjacency(self) -> np.ndarray:
        return normalized_adjacency(self.edges, self.num_joints)

    def validate(self) -> None:
        n = self.num_joints
        if len(self.edges) != n - 1:
            raise ContractError("skeleton must be a tree with J-1 edges")
        if any(p == -2 for p in self.parents()):
            raise ContractError("skeleton is not connected")
        edge_set = {frozenset(e) for e in self.edges}
        for limb in self.limbs:
            for a, b in zip(limb, limb[1:]):
                if frozenset((a, b)) not in edge_set:
                    raise ContractError(f"limb {limb} is not a path")
            if [self.ldof[j] for j in limb] != list(range(1, len(limb) + 1)):
                raise ContractError(f"limb {limb} ldof must increase 1..{len(limb)}")
        perm = self.flip_permutation()
        if not np.array_equal(perm[perm], np.arange(n)):
            raise ContractError("flip_pairs is not an involution")

    def to_json(self) -> str:
        return json.dumps({
            "names": list(self.names),
            "edges": [list(e) for e in self.edges],
            "ldof": list(self.ldof),
            "limbs": [list(l) for l in self.limbs],
            "flip_pairs": [list(p) for p in self.flip_pairs],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SkeletonTopology":
        d = json.loads(text)
        topo = cls(
            names=tuple(d["names"]),
            edges=tuple(tuple(e) for e in d["edges"]),
            ldof=tuple(d["ldof"]),
            limbs=tuple(tuple(l) for l in d["limbs"]),
            flip_pairs=tuple(tuple(p) for p in d["flip_pairs"]),
        )
        topo.validate()
        return topo


def build_h36m17() -> SkeletonTopology:
    ldof = [0] * len(H36M_NAMES)
    for limb in H36M_LIMBS:
        for depth, j in enumerate(limb, start=1):
            ldof[j] = depth
    topo = SkeletonTopology(
        names=H36M_NAMES,
        edges=H36M_EDGES,
        ldof=tuple(ldof),
        limbs=H36M_LIMBS,
        flip_pairs=H36M_FLIP_PAIRS,
    )
    topo.validate()
    return topo


def normalized_adjacency(edges, n: int) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` for an undirected graph on ``n`` nodes."""
    a = np.eye(n)
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise ContractError(f"edge ({i}, {j}) out of range for {n} nodes")
        a[i, j] = a[j, i] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return d[:, None] * a * d[None, :]


def temporal_path_adjacency(n: int) -> np.ndarray:
    if n < 1:
        raise ContractError("path graph needs at least one node")
    return normalized_adjacency([(i, i + 1) for i in range(n - 1)], n)
