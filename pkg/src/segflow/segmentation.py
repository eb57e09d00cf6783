"""Graph-based oversegmentation of a depth raster and the segment adjacency."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError
from .geometry import CameraIntrinsics, backproject_depth

logger = logging.getLogger(__name__)

DISCARDED = -1


@dataclass
class Segmentation:
    """Per-pixel segment ids; ``DISCARDED`` marks invalid or too-small regions."""

    labels: np.ndarray  # (H, W) int32

    @property
    def n_segments(self) -> int:
        return int(self.labels.max()) + 1 if (self.labels >= 0).any() else 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def pixels(self, k: int) -> np.ndarray:
        """Flat raster indices of segment ``k`` (the set Omega_k)."""
        return np.flatnonzero(self.labels.ravel() == k)

    def segment_pixels(self) -> list[np.ndarray]:
        return [self.pixels(k) for k in range(self.n_segments)]

    def kept_pixels(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat indices of every kept pixel in raster order, and their segment ids."""
        flat = self.labels.ravel()
        idx = np.flatnonzero(flat >= 0)
        return idx, flat[idx].astype(np.int64)


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n
        self.size = [1] * n

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        if self.rank[a] < self.rank[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        if self.rank[a] == self.rank[b]:
            self.rank[a] += 1
        return a


def _grid_edges(depth: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, w = depth.shape
    idx = np.arange(h * w).reshape(h, w)
    src, dst = [], []
    # right, down, down-right, up-right: each undirected 8-neighbour edge once
    for (sa, sb) in (
        ((slice(None), slice(0, w - 1)), (slice(None), slice(1, w))),
        ((slice(0, h - 1), slice(None)), (slice(1, h), slice(None))),
        ((slice(0, h - 1), slice(0, w - 1)), (slice(1, h), slice(1, w))),
        ((slice(1, h), slice(0, w - 1)), (slice(0, h - 1), slice(1, w))),
    ):
        a, b = idx[sa].ravel(), idx[sb].ravel()
        both = valid.ravel()[a] & valid.ravel()[b]
        src.append(a[both])
        dst.append(b[both])
    a = np.concatenate(src)
    b = np.concatenate(dst)
    flat = depth.ravel()
    weight = np.abs(flat[a] - flat[b])
    return a, b, weight


def felzenszwalb_depth(
    depth: np.ndarray,
    threshold: float = 0.5,
    min_size: int = 2000,
    valid: np.ndarray | None = None,
) -> Segmentation:
    """Felzenszwalb-Huttenlocher segmentation of a depth raster.

    The graph is the 8-connected grid over valid pixels with edge weight
    ``|z_p - z_q|``. Two components merge when the connecting edge is no
    heavier than ``min(Int(C_i) + threshold / |C_i|)``. Components smaller
    than ``min_size`` are discarded rather than merged into neighbours.

    Args:
        depth: (H, W) depth in meters, 0 = invalid.
        threshold: the scale constant ``k`` of the merge predicate.
        min_size: minimum pixel count of a kept segment.
        valid: optional explicit validity mask (defaults to ``depth > 0``).

    Returns:
        Segmentation with dense labels numbered in raster order of first
        appearance.
    """
    depth = np.asarray(depth, dtype=float)
    if valid is None:
        valid = depth > 0
    if not valid.any():
        raise EmptyInputError("depth raster has no valid pixels")
    h, w = depth.shape

    a, b, weight = _grid_edges(depth, valid)
    order = np.argsort(weight, kind="stable")
    ds = _DisjointSet(h * w)
    internal = [0.0] * (h * w)
    for e in order.tolist():
        ra, rb = ds.find(int(a[e])), ds.find(int(b[e]))
        if ra == rb:
            continue
        we = float(weight[e])
        if we <= internal[ra] + threshold / ds.size[ra] and we <= internal[rb] + threshold / ds.size[rb]:
            r = ds.union(ra, rb)
            internal[r] = we

    flat_valid = valid.ravel()
    roots = np.array([ds.find(i) if flat_valid[i] else -1 for i in range(h * w)])
    labels = np.full(h * w, DISCARDED, dtype=np.int32)
    sizes = np.bincount(roots[roots >= 0], minlength=h * w)
    next_label = 0
    mapping: dict[int, int] = {}
    for i in np.flatnonzero(roots >= 0).tolist():
        r = int(roots[i])
        if sizes[r] < min_size:
            continue
        if r not in mapping:
            mapping[r] = next_label
            next_label += 1
        labels[i] = mapping[r]
    seg = Segmentation(labels.reshape(h, w))
    logger.debug("segmentation: %d segments kept, %d pixels discarded", seg.n_segments, int((labels < 0).sum()))
    return seg


def segment_centroids(seg: Segmentation, depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Mean back-projected point of each segment, (K, 3).

    A segment without any valid-depth pixel gets a NaN row and a warning;
    ``build_adjacency`` leaves such segments unconnected.
    """
    depth = np.asarray(depth, dtype=float)
    P = backproject_depth(depth, K).reshape(-1, 3)
    zvalid = depth.ravel() > 0
    out = np.full((seg.n_segments, 3), np.nan)
    for k in range(seg.n_segments):
        pix = seg.pixels(k)
        pix = pix[zvalid[pix]]
        if pix.size == 0:
            logger.warning("segment %d has no valid depth; excluded from adjacency", k)
            continue
        out[k] = P[pix].mean(axis=0)
    return out


@dataclass
class SegmentAdjacency:
    """Symmetric segment-pair structure; pair ``e`` owns lifting weight ``e``."""

    n_segments: int
    pairs: np.ndarray  # (S, 2) int, j < h, lexicographic

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def matrix(self) -> np.ndarray:
        M = np.zeros((self.n_segments, self.n_segments), dtype=bool)
        if self.n_pairs:
            M[self.pairs[:, 0], self.pairs[:, 1]] = True
            M[self.pairs[:, 1], self.pairs[:, 0]] = True
        return M

    def weight_index(self, j: int, h: int) -> int:
        j, h = min(j, h), max(j, h)
        hit = np.flatnonzero((self.pairs[:, 0] == j) & (self.pairs[:, 1] == h))
        if hit.size == 0:
            raise KeyError((j, h))
        return int(hit[0])


def build_adjacency(centroids: np.ndarray, n_psi: int = 4) -> SegmentAdjacency:
    """Connect each segment to its ``n_psi`` nearest centroids, then symmetrize.

    Ties in distance go to the lower segment id.
    """
    if n_psi < 1:
        raise ValueError("n_psi must be >= 1")
    C = np.asarray(centroids, dtype=float).reshape(-1, 3)
    n = len(C)
    usable = np.all(np.isfinite(C), axis=1)
    chosen = set()
    for k in range(n):
        if not usable[k]:
            continue
        others = [j for j in range(n) if j != k and usable[j]]
        if not others:
            continue
        d = np.linalg.norm(C[others] - C[k], axis=1)
        order = np.lexsort((np.array(others), d))
        for i in order[:n_psi]:
            j = others[i]
            chosen.add((min(j, k), max(j, k)))
    pairs = np.array(sorted(chosen), dtype=np.int64).reshape(-1, 2)
    return SegmentAdjacency(n, pairs)
