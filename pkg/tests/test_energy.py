import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import plane_frames, random_state, toy_window
from segflow.energy import (
    CorrespondenceMap,
    EnergyModel,
    EnergyParams,
    concat_residuals,
    count_residuals,
    data_residuals,
    evaluate_energy,
    huber,
    lifted_reg_residuals,
    picp_block,
    robust_residual,
    term_weights,
    weight_opt_residuals,
)
from segflow.errors import InvalidWindowError, NonFiniteResidualError
from segflow.geometry import SegmentPose, compose_poses
from segflow.pipeline import WindowProblem, poses_by_pair, update_correspondences
from segflow.segmentation import SegmentAdjacency, Segmentation

# ---------------------------------------------------------------------------
# Huber


def test_huber_examples():
    assert huber(0.5, 1.0) == 0.125
    assert huber(1.0, 1.0) == 0.5
    assert huber(2.0, 1.0) == 1.0 * (2.0 - 0.5)


@settings(max_examples=300, deadline=None)
@given(st.floats(-10, 10), st.floats(1e-3, 5))
def test_huber_even_monotone_continuous(a, eps):
    assert huber(a, eps) == huber(-a, eps)
    assert huber(abs(a) * 1.1 + 1e-9, eps) >= huber(a, eps)
    lo, hi = huber(eps * (1 - 1e-9), eps), huber(eps * (1 + 1e-9), eps)
    assert abs(hi - lo) < 1e-8 * max(1.0, eps * eps)


@settings(max_examples=300, deadline=None)
@given(st.floats(-10, 10), st.floats(1e-3, 5))
def test_robust_residual_squares_to_huber(a, eps):
    rt, d = robust_residual(np.array([a]), eps)
    assert rt[0] ** 2 == pytest.approx(huber(a, eps), rel=1e-12, abs=1e-300)
    h = 1e-6 * max(1.0, abs(a))
    if abs(abs(a) - eps) > 2 * h:
        fd = (robust_residual(np.array([a + h]), eps)[0][0] - robust_residual(np.array([a - h]), eps)[0][0]) / (2 * h)
        assert d[0] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_robust_residual_derivative_continuous_at_knee():
    eps = 0.3
    _, d = robust_residual(np.array([eps, eps * (1 + 1e-12)]), eps)
    assert d[0] == pytest.approx(d[1], rel=1e-9)


# ---------------------------------------------------------------------------
# data and pICP terms


def test_data_identical_frames_zero(small_camera):
    frames = plane_frames(small_camera, lambda x, y, t: 2.0 + 0 * x, lambda x, y, t: 0.5 + 0.1 * np.sin(x + y), 2, 1.0)
    seg = Segmentation(np.zeros(small_camera.shape, dtype=np.int32))
    r = data_residuals(frames[0], frames[1], seg, np.zeros(6), small_camera)
    assert np.all(r == 0)


def test_data_brightness_offset(small_camera):
    c = 0.05
    frames = plane_frames(small_camera, lambda x, y, t: 2.0 + 0 * x, lambda x, y, t: 0.4 + 0.1 * np.sin(x + y) + c * t, 2, 1.0)
    seg = Segmentation(np.zeros(small_camera.shape, dtype=np.int32))
    r = data_residuals(frames[0], frames[1], seg, np.zeros(6), small_camera)
    assert np.allclose(r, -c, atol=1e-12)


def test_data_true_translation_zero_residual(small_camera):
    K = small_camera
    z, shift = 2.0, 2.0

    def tex(x):
        return 0.5 + 0.2 * np.sin(0.3 * x) * np.cos(0.2 * x + 0.1)

    frames = plane_frames(K, lambda x, y, t: z + 0 * x, lambda x, y, t: tex(x - shift * t) + 0.01 * y, 2, 0.0)
    seg = Segmentation(np.zeros(K.shape, dtype=np.int32))
    pose = np.array([0, 0, 0, shift * z / K.fx, 0, 0])
    r = data_residuals(frames[0], frames[1], seg, pose, K)
    assert np.abs(r).max() < 1e-6
    # residuals are produced (not silently dropped) wherever the warp stays inside
    assert np.count_nonzero(data_residuals(frames[0], frames[1], seg, np.zeros(6), K)) > 0


def _plane_points(n=20):
    rng = np.random.default_rng(0)
    P = np.c_[rng.uniform(-1, 1, (n, 2)), np.full(n, 2.0)]
    return P, np.tile([0.0, 0.0, -1.0], (n, 1))


def test_picp_in_plane_motion_zero():
    P, n = _plane_points()
    pose = np.array([[0, 0, 0, 0.3, 0, 0]])
    corr = P + [0.3, 0, 0]
    r, _ = picp_block(pose, np.zeros(len(P), dtype=int), P, n, corr, np.ones(len(P), dtype=bool))
    assert np.allclose(r, 0)
    # identity pose, self-correspondence
    r, _ = picp_block(np.zeros((1, 6)), np.zeros(len(P), dtype=int), P, n, P, np.ones(len(P), dtype=bool))
    assert np.all(r == 0)


def test_picp_motion_along_normal():
    P, n = _plane_points()
    pose = np.array([[0, 0, 0, 0, 0, 0.2]])
    r, _ = picp_block(pose, np.zeros(len(P), dtype=int), P, n, P, np.ones(len(P), dtype=bool))
    assert np.allclose(np.abs(r), 0.2, atol=1e-15)


# ---------------------------------------------------------------------------
# regularizers


def test_lifted_reg_examples():
    adj = SegmentAdjacency(2, np.array([[0, 1]]))
    T = np.array([[0, 0, 0, 0, 0, 0], [0, 0, 0, 1.0, 0, 0]])
    assert np.array_equal(lifted_reg_residuals(T, np.array([1.0]), adj), [[0, 0, 0, -1, 0, 0]])
    assert np.all(lifted_reg_residuals(T, np.array([0.0]), adj) == 0)
    same = np.tile([0.1, 0.2, 0.3, 1, 2, 3], (2, 1))
    assert np.all(lifted_reg_residuals(same, np.array([0.7]), adj) == 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_lifted_reg_scales_with_pose_differences(seed, s):
    rng = np.random.default_rng(seed)
    adj = SegmentAdjacency(4, np.array([[0, 1], [0, 2], [1, 3], [2, 3]]))
    T = rng.normal(size=(4, 6))
    w = rng.normal(size=4)
    base = lifted_reg_residuals(T, w, adj)
    assert np.allclose(lifted_reg_residuals(s * T, w, adj), s * base, atol=1e-12)


def test_weight_opt_examples():
    assert np.all(weight_opt_residuals(np.ones(3)) == 0)
    assert np.all(weight_opt_residuals(-np.ones(3)) == 0)
    assert weight_opt_residuals(np.array([0.0]))[0] == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8))
def test_weight_opt_sign_invariant(w):
    w = np.array(w)
    assert np.array_equal(weight_opt_residuals(w), weight_opt_residuals(-w))


def _window(chain_steps, target, K=1):
    """Pose dict for N = len(chain_steps) + 1 with ``target`` as T^{0,m} for every m >= 2."""
    N = len(chain_steps) + 1
    d = {}
    for l in range(N):
        for m in range(l + 1, N):
            d[(l, m)] = np.tile(np.asarray(chain_steps[l], dtype=float), (K, 1)) if m == l + 1 else np.zeros((K, 6))
    for m in range(2, N):
        d[(0, m)] = np.tile(np.asarray(target[m], dtype=float), (K, 1))
    return d


def test_concat_examples():
    assert concat_residuals({(0, 1): np.zeros((3, 6))}, 2).shape == (0, 6)
    assert np.all(concat_residuals(_window([np.zeros(6)] * 2, {2: np.zeros(6)}), 3) == 0)
    t = [0, 0, 0, 1, 0, 0]
    assert np.allclose(concat_residuals(_window([t, t], {2: [0, 0, 0, 2, 0, 0]}), 3), 0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 5))
def test_concat_vanishes_on_consistent_chains(seed, N):
    rng = np.random.default_rng(seed)
    steps = [np.r_[rng.normal(scale=0.3, size=3), rng.normal(size=3)] for _ in range(N - 1)]
    target = {}
    T = SegmentPose.from_vector(steps[0])
    for m in range(2, N):
        T = compose_poses(SegmentPose.from_vector(steps[m - 1]), T)
        target[m] = T.as_vector()
    assert np.allclose(concat_residuals(_window(steps, target), N), 0, atol=1e-10)


# ---------------------------------------------------------------------------
# residual accounting and normalization


def test_count_residuals_examples():
    lay = count_residuals(2, 100, 80, 12, 5)
    assert lay.M == 1 * 180 + 2 * 12 + 0 == 204
    # n_c = K (N - 2), and 0 at N = 2
    assert count_residuals(3, 10, 10, 3, 4).n_c == 4
    for K in (1, 3, 9):
        assert count_residuals(2, 10, 10, 3, K).n_c == 0
    with pytest.raises(InvalidWindowError):
        count_residuals(1, 10, 10, 3, 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(0, 50), st.integers(0, 50), st.integers(0, 20), st.integers(1, 10))
def test_layout_ranges_disjoint_and_covering(N, nC, nD, S, K):
    lay = count_residuals(N, nC, nD, S, K)
    covered = np.zeros(lay.n_scalars, dtype=int)
    for slices in lay.term_slices().values():
        for sl in slices:
            covered[sl] += 1
    assert np.all(covered == 1)


def test_term_weights_examples():
    lay = count_residuals(2, 100, 50, 0, 3)
    w = term_weights(EnergyParams(alpha=1.0), lay)
    assert w["data"] == 0.01
    assert w["lifted_reg"] == 0.0 and w["weight_opt"] == 0.0 and w["concat"] == 0.0


def test_energy_linear_in_term_weights():
    frames, K, seg, adj, cfg = toy_window()
    rng = np.random.default_rng(1)
    p1 = EnergyParams(alpha=0.7, beta=1.3, gamma=0.2, eta=0.05, lambda_c=0.4)
    p2 = EnergyParams(alpha=1.4, beta=2.6, gamma=0.4, eta=0.1, lambda_c=0.8)
    m1 = EnergyModel(frames, K, seg, adj, p1)
    m2 = EnergyModel(frames, K, seg, adj, p2)
    st_ = random_state(m1, rng)
    corr = update_correspondences(frames, seg, poses_by_pair(st_, m1.pairs), K, m1.pairs)
    assert evaluate_energy(st_.x, m2, corr) == pytest.approx(2 * evaluate_energy(st_.x, m1, corr), rel=1e-12)


# ---------------------------------------------------------------------------
# full energy against a naive double-loop oracle


def _bilinear(img, valid, u, v):
    h, w = img.shape
    if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
        return None
    x0 = min(int(math.floor(u)), w - 2)
    y0 = min(int(math.floor(v)), h - 2)
    if not (valid[y0, x0] and valid[y0, x0 + 1] and valid[y0 + 1, x0] and valid[y0 + 1, x0 + 1]):
        return None
    a, b = u - x0, v - y0
    return (1 - a) * (1 - b) * img[y0, x0] + a * (1 - b) * img[y0, x0 + 1] + (1 - a) * b * img[y0 + 1, x0] + a * b * img[y0 + 1, x0 + 1]


def _naive_energy(frames, K, seg, adj, params, pairs, x, corr):
    def rho(a, eps):
        return 0.5 * a * a if abs(a) <= eps else eps * (abs(a) - 0.5 * eps)

    n_seg = seg.n_segments
    N = len(frames)
    pix = [(int(i) // K.width, int(i) % K.width) for i in np.flatnonzero(seg.labels.ravel() >= 0)]
    ids = [int(seg.labels[y, x_]) for y, x_ in pix]
    n = len(pix)
    S = adj.n_pairs
    poses = x[: n_seg * len(pairs) * 6].reshape(len(pairs), n_seg, 6)
    w = x[n_seg * len(pairs) * 6 :]
    sc_data = params.alpha / n
    sc_icp = params.beta / n
    sc_reg = params.gamma / S if S else 0.0
    sc_w = params.eta / S if S else 0.0
    sc_c = params.lambda_c / (n_seg * (N - 2)) if N > 2 else 0.0
    total = 0.0
    for z, (l, m) in enumerate(pairs):
        for i in range(n):
            T = poses[z, ids[i]]
            P = corr.src_points[z, i]
            X = Rotation.from_rotvec(T[:3]).apply(P) + T[3:]
            if corr.src_valid[z, i] and corr.visible[z, i] and P[2] > 0:
                su = int(np.rint(K.fx * P[0] / P[2] + K.cx))
                sv = int(np.rint(K.fy * P[1] / P[2] + K.cy))
                src_in = 0 <= su < K.width and 0 <= sv < K.height and frames[l].depth[sv, su] > 0
                if src_in and X[2] > 1e-9:
                    val = _bilinear(frames[m].smoothed, frames[m].depth > 0, K.fx * X[0] / X[2] + K.cx, K.fy * X[1] / X[2] + K.cy)
                    if val is not None:
                        total += sc_data * rho(corr.src_intensity[z, i] - val, params.huber_data)
            if corr.src_valid[z, i] and corr.src_normal_valid[z, i] and corr.corr_valid[z, i]:
                r = float(np.dot(X - corr.corr_points[z, i], corr.src_normals[z, i]))
                total += sc_icp * rho(r, params.huber_icp)
        for e in range(S):
            j, h = adj.pairs[e]
            total += sc_reg * w[e] ** 4 * float(np.sum((poses[z, j] - poses[z, h]) ** 2))
    for e in range(S):
        total += sc_w * (1 - w[e] ** 2) ** 2
    idx = {p: z for z, p in enumerate(pairs)}
    for m in range(2, N):
        for k in range(n_seg):
            R = Rotation.identity()
            t = np.zeros(3)
            for i in range(m):
                step = poses[idx[(i, i + 1)], k]
                Ri = Rotation.from_rotvec(step[:3])
                R = Ri * R
                t = Ri.apply(t) + step[3:]
            r = poses[idx[(0, m)], k] - np.r_[R.as_rotvec(), t]
            total += sc_c * float(r @ r)
    return total


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_energy_matches_naive_oracle(seed):
    # full-valid depth keeps every sample mask trivial so the oracle needs no erosion
    frames, K, seg, adj, cfg = toy_window(n_frames=3, height=16, width=16, border=3)
    params = EnergyParams(alpha=1.0, beta=2.0, gamma=0.5, eta=0.1, lambda_c=0.7, huber_data=0.05, huber_icp=0.002)
    model = EnergyModel(frames, K, seg, adj, params)
    rng = np.random.default_rng(seed)
    st_ = random_state(model, rng, rot=0.02, trans=0.01)
    corr = update_correspondences(frames, seg, poses_by_pair(st_, model.pairs), K, model.pairs)
    E = evaluate_energy(st_.x, model, corr)
    ref = _naive_energy(frames, K, seg, adj, params, model.pairs, st_.x, corr)
    assert E > 0
    assert E == pytest.approx(ref, rel=1e-10)
    terms = model.term_energies(st_.x, corr)
    assert all(v > 0 for v in terms.values()), terms
    assert sum(terms.values()) == pytest.approx(E, rel=1e-12)


def test_energy_zero_on_identical_frames():
    frames, K, seg, adj, cfg = toy_window(n_frames=3)
    frames = [frames[0]] * 3
    prob = WindowProblem(frames, K, seg, adj, cfg)
    x = prob.model.new_state().x
    # back-projection followed by projection reproduces pixel centres only to rounding
    assert prob.energy(x) < 1e-25


def test_energy_invariant_under_residual_reordering():
    frames, K, seg, adj, cfg = toy_window(n_frames=3)
    prob = WindowProblem(frames, K, seg, adj, cfg)
    x = random_state(prob.model, np.random.default_rng(5)).x
    F = prob.residuals(x)
    perm = np.random.default_rng(0).permutation(len(F))
    assert float(F[perm] @ F[perm]) == pytest.approx(prob.energy(x), rel=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_energy_non_negative(seed):
    frames, K, seg, adj, cfg = toy_window(n_frames=3)
    prob = WindowProblem(frames, K, seg, adj, cfg)
    x = random_state(prob.model, np.random.default_rng(seed), rot=0.1, trans=0.05).x
    assert prob.energy(x) >= 0.0


def test_non_finite_residual_is_named():
    frames, K, seg, adj, cfg = toy_window(n_frames=2)
    model = EnergyModel(frames, K, seg, adj, cfg.energy)
    F = np.zeros(model.layout.n_scalars)
    F[model.layout.icp[0].start + 3] = np.nan
    with pytest.raises(NonFiniteResidualError) as err:
        model.check_finite(F)
    assert err.value.term == "picp" and err.value.index == model.layout.icp[0].start + 3


def test_weight_opt_derivative():
    frames, K, seg, adj, cfg = toy_window(n_frames=2)
    model = EnergyModel(frames, K, seg, adj, cfg.energy)
    st_ = model.new_state()
    st_.weights[:] = 0.5
    corr = update_correspondences(frames, seg, poses_by_pair(st_, model.pairs), K, model.pairs)
    _, blocks = model.evaluate(st_.x, corr, jacobian=True)
    (blk,) = [b for b in blocks if b.term == "weight_opt"]
    scale = np.sqrt(model.scales["weight_opt"])
    assert np.allclose(blk.vals / scale, -1.0)


def test_correspondence_map_defaults_visible():
    z3, ones = np.zeros((1, 2, 3)), np.ones((1, 2), dtype=bool)
    m = CorrespondenceMap(z3, np.zeros((1, 2)), z3, ones, ones, z3, ones)
    assert m.visible.all() and m.n_pairs == 1
