import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.segmentation import felzenszwalb

from segflow.errors import EmptyInputError
from segflow.geometry import CameraIntrinsics
from segflow.segmentation import (
    DISCARDED,
    Segmentation,
    build_adjacency,
    felzenszwalb_depth,
    segment_centroids,
)


def first_appearance(labels: np.ndarray) -> np.ndarray:
    _, first, inv = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return remap[inv].reshape(labels.shape)


def reference_fh(depth, threshold):
    # skimage divides its scale by 255 internally
    return first_appearance(felzenszwalb(depth, scale=threshold * 255.0, sigma=0, min_size=1, channel_axis=None))


def step_image():
    d = np.ones((10, 10))
    d[:, 5:] = 2.0
    return d


def test_step_image_matches_reference_implementation():
    seg = felzenszwalb_depth(step_image(), threshold=0.5, min_size=1)
    assert seg.n_segments == 2
    assert np.array_equal(seg.labels, reference_fh(step_image(), 0.5))
    assert (seg.labels[:, :5] == 0).all() and (seg.labels[:, 5:] == 1).all()


def test_uniform_depth_single_segment():
    assert felzenszwalb_depth(np.full((8, 9), 1.7), 0.5, 1).n_segments == 1


def test_min_size_discards_small_components():
    seg = felzenszwalb_depth(step_image(), 0.5, 60)
    assert seg.n_segments == 0
    assert (seg.labels == DISCARDED).all()


def test_no_valid_pixels():
    with pytest.raises(EmptyInputError):
        felzenszwalb_depth(np.zeros((4, 4)), 0.5, 1)


def test_invalid_pixels_are_discarded():
    d = np.full((6, 6), 1.0)
    d[2, 3] = 0.0
    seg = felzenszwalb_depth(d, 0.5, 1)
    assert seg.labels[2, 3] == DISCARDED
    assert seg.n_segments == 1


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 3.0))
def test_random_rasters_match_reference_implementation(seed, threshold):
    # continuous random depths have no weight ties, so edge order is unambiguous
    rng = np.random.default_rng(seed)
    d = rng.uniform(1.0, 3.0, size=(rng.integers(3, 14), rng.integers(3, 14)))
    assert np.array_equal(felzenszwalb_depth(d, threshold, 1).labels, reference_fh(d, threshold))


depth_rasters = arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 12)), elements=st.sampled_from([0.0, 0.5, 1.0, 1.25, 2.0, 4.0]))


@settings(max_examples=150, deadline=None)
@given(depth_rasters, st.sampled_from([0.25, 0.5, 1.0, 8.0]), st.floats(0.5, 100.0))
def test_depth_offset_invariance(depth, offset, threshold):
    # dyadic values keep |z_p - z_q| exact under the offset
    if not (depth > 0).any():
        return
    shifted = np.where(depth > 0, depth + offset, 0.0)
    a = felzenszwalb_depth(depth, threshold, 2)
    b = felzenszwalb_depth(shifted, threshold, 2)
    assert np.array_equal(a.labels, b.labels)


@settings(max_examples=100, deadline=None)
@given(depth_rasters, st.integers(1, 6))
def test_labels_partition_valid_pixels(depth, min_size):
    if not (depth > 0).any():
        return
    seg = felzenszwalb_depth(depth, 0.5, min_size)
    assert (seg.labels[depth <= 0] == DISCARDED).all()
    kept = seg.labels >= 0
    counts = np.bincount(seg.labels[kept], minlength=seg.n_segments)
    assert (counts >= min_size).all()
    assert set(np.unique(seg.labels[kept]).tolist()) == set(range(seg.n_segments))
    pix = seg.segment_pixels()
    assert sum(len(p) for p in pix) == kept.sum()


def test_centroid_examples():
    K = CameraIntrinsics(10.0, 10.0, 2.0, 2.0, 5, 5)
    seg = Segmentation(np.zeros((5, 5), dtype=np.int32))
    assert np.allclose(segment_centroids(seg, np.full((5, 5), 2.0), K), [[0, 0, 2]])

    labels = np.full((5, 5), -1, dtype=np.int32)
    labels[2, 2] = 0
    depth = np.zeros((5, 5))
    depth[2, 2] = 3.0
    assert np.allclose(segment_centroids(Segmentation(labels), depth, K), [[0, 0, 3]])

    labels = np.full((5, 5), -1, dtype=np.int32)
    labels[2, 1] = labels[2, 3] = 0
    depth = np.zeros((5, 5))
    depth[2, 1] = depth[2, 3] = 2.0
    # pixels 1 and 3 back-project to x = -0.2 and +0.2 at z = 2
    assert np.allclose(segment_centroids(Segmentation(labels), depth, K), [[0, 0, 2]])


def test_adjacency_collinear_example():
    C = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    adj = build_adjacency(C, n_psi=1)
    # brute force: each row's nearest neighbour, symmetrized
    brute = set()
    for k in range(3):
        d = [(np.linalg.norm(C[j] - C[k]), j) for j in range(3) if j != k]
        j = min(d)[1]
        brute.add((min(j, k), max(j, k)))
    assert {tuple(p) for p in adj.pairs.tolist()} == brute == {(0, 1), (1, 2)}


def test_adjacency_trivial_sizes():
    assert build_adjacency(np.zeros((1, 3)), 4).n_pairs == 0
    for n_psi in (1, 3, 7):
        adj = build_adjacency(np.array([[0, 0, 1.0], [5, 1, 2.0]]), n_psi)
        assert adj.pairs.tolist() == [[0, 1]]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 15), st.integers(1, 5), st.integers(0, 10_000))
def test_adjacency_invariants(n, n_psi, seed):
    C = np.random.default_rng(seed).normal(size=(n, 3))
    adj = build_adjacency(C, n_psi)
    M = adj.matrix()
    assert np.array_equal(M, M.T)
    assert not M.diagonal().any()
    assert adj.n_pairs <= n * n_psi
    if n >= 2:
        assert M.any(axis=1).all()
    for e, (j, h) in enumerate(adj.pairs.tolist()):
        assert j < h and adj.weight_index(h, j) == e
