"""Max-Mahalanobis center sets.

The centers are ``L`` vectors of equal norm ``c_mm`` in ``R^d`` whose pairwise
inner products all equal ``-c_mm**2 / (L - 1)``, i.e. the vertices of a regular
simplex. They are built by a coordinate-by-coordinate recurrence that only
needs ``L <= d + 1``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class CenterSet:
    """An ``L x d`` matrix of class centers.

    ``kind`` is ``"mm"`` for a flat Max-Mahalanobis set (all rows of norm
    ``c_mm``) and ``"hm"`` for hierarchical sets, where ``c_mm`` is the
    top-level scale and row norms differ.
    """

    centers: np.ndarray
    c_mm: float
    kind: str = "mm"

    def __post_init__(self):
        c = np.array(self.centers, dtype=np.float64)
        if c.ndim != 2:
            raise ValueError(f"centers must be 2-D, got shape {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centers.shape[1]

    def validate(self, norm_rtol: float = 1e-6, inner_atol: float = 1e-5) -> None:
        """Raise ``ValueError`` if the flat-set invariants do not hold."""
        L, d = self.centers.shape
        if L > d + 1:
            raise ValueError(f"L={L} exceeds d+1={d + 1}")
        norms = np.linalg.norm(self.centers, axis=1)
        if np.any(np.abs(norms - self.c_mm) > norm_rtol * self.c_mm):
            raise ValueError(f"center norms {norms} differ from c_mm={self.c_mm}")
        gram = self.centers @ self.centers.T
        off = gram[~np.eye(L, dtype=bool)]
        if off.size and off.max() - off.min() > inner_atol:
            raise ValueError("pairwise inner products are not equal")

    def to_dict(self) -> dict:
        return {
            "c_mm": float(self.c_mm),
            "L": self.num_classes,
            "d": self.feature_dim,
            "kind": self.kind,
            "centers": self.centers.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CenterSet":
        cs = cls(np.asarray(doc["centers"], dtype=np.float64), float(doc["c_mm"]),
                 doc.get("kind", "mm"))
        if cs.centers.shape != (doc["L"], doc["d"]):
            raise ValueError(
                f"centers shape {cs.centers.shape} disagrees with L={doc['L']}, d={doc['d']}")
        return cs

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CenterSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_mm_centers(c_mm: float, d: int, L: int) -> CenterSet:
    """Build ``L`` Max-Mahalanobis centers of norm ``c_mm`` in ``R^d``.

    Row 0 starts as ``e_1``. Every later row ``i`` fills coordinates
    ``j < i`` so that its inner product with row ``j`` equals ``-1/(L-1)``,
    then takes the remaining unit-norm mass on coordinate ``i``. All rows are
    finally scaled by ``c_mm``.

    >>> generate_mm_centers(1.0, 2, 2).centers.tolist()
    [[1.0, 0.0], [-1.0, 0.0]]
    """
    if L < 2:
        raise ValueError(f"need at least 2 classes, got L={L}")
    if d < 1:
        raise ValueError(f"feature dimension must be positive, got d={d}")
    if L > d + 1:
        raise ValueError(f"L={L} classes need L <= d+1, but d={d}")
    if not c_mm > 0:
        raise ValueError(f"c_mm must be positive, got {c_mm}")

    mu = np.zeros((L, d))
    mu[0, 0] = 1.0
    for i in range(1, L):
        for j in range(i):
            mu[i, j] = -(1.0 + (mu[i] @ mu[j]) * (L - 1)) / (mu[j, j] * (L - 1))
        rest = 1.0 - mu[i] @ mu[i]
        if rest < 0:
            if rest < -1e-9:
                warnings.warn(f"negative residual {rest:.3e} clamped at row {i}",
                              RuntimeWarning, stacklevel=2)
            rest = 0.0
        if i < d:
            mu[i, i] = np.sqrt(rest)
        elif rest > 1e-9:
            # i == d only happens when L == d + 1; the residual must vanish there
            raise ArithmeticError(f"row {i} has residual {rest:.3e} but no free coordinate")
    return CenterSet(c_mm * mu, float(c_mm))


def center_dispersion(cs: CenterSet) -> dict:
    """Largest pairwise inner product and the angle of that pair."""
    c = cs.centers
    L = c.shape[0]
    gram = c @ c.T
    mask = ~np.eye(L, dtype=bool)
    i, j = np.unravel_index(np.argmax(np.where(mask, gram, -np.inf)), gram.shape)
    norms = np.linalg.norm(c, axis=1)
    cos = np.clip(gram[i, j] / (norms[i] * norms[j]), -1.0, 1.0)
    return {"max_inner": float(gram[i, j]), "min_angle": float(np.arccos(cos))}


@dataclass
class TreeNode:
    label: Optional[int] = None
    children: list = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class ClassTree:
    """A class hierarchy with one center scale per depth.

    ``scales[s - 1]`` is the scale of the center sets placed around nodes at
    depth ``s - 1`` (the root has depth 0). Leaves carry labels ``0..L-1``.
    """

    root: TreeNode
    scales: Sequence[float]

    def __post_init__(self):
        self.scales = [float(s) for s in self.scales]
        if any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")
        if any(b >= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must strictly decrease with depth")
        labels = []
        depth = self._check(self.root, 0, labels)
        if depth > len(self.scales):
            raise ValueError(f"tree depth {depth} needs {depth} scales, got {len(self.scales)}")
        if sorted(labels) != list(range(len(labels))):
            raise ValueError(f"leaf labels must be 0..L-1 without repeats, got {sorted(labels)}")

    def _check(self, node: TreeNode, depth: int, labels: list) -> int:
        if node.is_leaf:
            if node.label is None:
                raise ValueError("every leaf needs a label")
            labels.append(int(node.label))
            return depth
        if len(node.children) < 2:
            raise ValueError("internal nodes need at least 2 children")
        return max(self._check(ch, depth + 1, labels) for ch in node.children)

    @property
    def num_classes(self) -> int:
        count = 0
        stack = [self.root]
        while stack:
            n = stack.pop()
            count += n.is_leaf
            stack.extend(n.children)
        return count

    @classmethod
    def flat(cls, L: int, scale: float) -> "ClassTree":
        return cls(TreeNode(children=[TreeNode(label=i) for i in range(L)]), [scale])

    @classmethod
    def two_level(cls, n_super: int, n_sub: int, scales: Sequence[float]) -> "ClassTree":
        """Superclass ``i`` holds labels ``i*n_sub .. (i+1)*n_sub - 1``."""
        root = TreeNode(children=[
            TreeNode(children=[TreeNode(label=i * n_sub + j) for j in range(n_sub)])
            for i in range(n_super)
        ])
        return cls(root, scales)


def generate_hm_centers(tree: ClassTree, d: int) -> CenterSet:
    """Hierarchical centers: each child set is a shifted MM set around its parent.

    The same depth-``s`` offset set is reused for every parent at that depth.
    """
    out = np.zeros((tree.num_classes, d))
    cache = {}

    def visit(node: TreeNode, center: np.ndarray, depth: int):
        if node.is_leaf:
            out[node.label] = center
            return
        n = len(node.children)
        if n > d + 1:
            raise ValueError(f"a node with {n} children needs d >= {n - 1}, got d={d}")
        key = (depth, n)
        if key not in cache:
            cache[key] = generate_mm_centers(tree.scales[depth], d, n).centers
        for child, offset in zip(node.children, cache[key]):
            visit(child, center + offset, depth + 1)

    visit(tree.root, np.zeros(d), 0)
    return CenterSet(out, tree.scales[0], kind="hm")
