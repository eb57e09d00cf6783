"""Multiframe orchestration: segment, initialize, associate, solve, extract flow."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .energy import CorrespondenceMap, EnergyModel, EnergyParams, window_pairs
from .errors import InvalidWindowError
from .frames import RgbdFrame, preprocess  # noqa: F401  (re-exported)
from .geometry import (
    CameraIntrinsics,
    NormalMap,
    SegmentPose,
    backproject_depth,
    compose_poses,
    compute_normals,
    project_points,
    rotations_from_axis_angles,
    transform_points,
)
from .segmentation import (
    SegmentAdjacency,
    Segmentation,
    build_adjacency,
    felzenszwalb_depth,
    segment_centroids,
)
from .solver import JacobianOracle, LeastSquaresProblem, LMResult, ProblemState, SolverOptions, lm_minimize

logger = logging.getLogger(__name__)


@dataclass
class SegmentationParams:
    threshold: float = 0.5
    min_size: int = 2000
    n_psi: int = 4


@dataclass
class PipelineConfig:
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    energy: EnergyParams = field(default_factory=EnergyParams)
    solver: SolverOptions = field(default_factory=SolverOptions)
    window: int = 2
    reference: int = 0
    dist_thresh: float = 0.1
    angle_thresh_deg: float = 45.0
    group_tol: float = 0.01
    joint_solve: bool = True

    def __post_init__(self):
        if self.window < 2:
            raise InvalidWindowError(f"window must be >= 2, got {self.window}")
        if not 0 <= self.reference < self.window:
            raise InvalidWindowError(f"reference {self.reference} outside window of {self.window}")


def enumerate_pairs(n_frames: int) -> list[tuple[int, int]]:
    """Lexicographic (l, m), l < m, over a window of ``n_frames`` frames."""
    return window_pairs(n_frames)


def is_adjacent(pair: tuple[int, int]) -> bool:
    return abs(pair[1] - pair[0]) == 1


# ---------------------------------------------------------------------------
# pose arrays: (K, 6) stacks of per-segment (axis-angle, translation)


def compose_pose_arrays(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    return np.array(
        [compose_poses(SegmentPose.from_vector(o), SegmentPose.from_vector(i)).as_vector() for o, i in zip(outer, inner)]
    ).reshape(-1, 6)


def invert_pose_array(poses: np.ndarray) -> np.ndarray:
    return np.array([SegmentPose.from_vector(p).inverse().as_vector() for p in poses]).reshape(-1, 6)


def poses_by_pair(state: ProblemState, pairs) -> dict:
    return {p: state.poses(z).copy() for z, p in enumerate(pairs)}


def pose_from_reference(pair_poses: dict, frame: int, reference: int, n_segments: int, fixed: dict | None = None) -> np.ndarray:
    """Per-segment pose mapping reference-frame points into ``frame``."""
    if frame == reference:
        return np.zeros((n_segments, 6))
    if fixed and frame in fixed:
        return fixed[frame]
    if (reference, frame) in pair_poses:
        return pair_poses[(reference, frame)]
    if (frame, reference) in pair_poses:
        return invert_pose_array(pair_poses[(frame, reference)])
    raise KeyError(f"no pose from reference {reference} to frame {frame}")


# ---------------------------------------------------------------------------
# projective association


def _nearest_lookup(points: np.ndarray, K: CameraIntrinsics, depth: np.ndarray):
    z = points[:, 2]
    front = z > 1e-9
    uv = project_points(np.where(front[:, None], points, [0.0, 0.0, 1.0]), K)
    q = np.rint(uv).astype(np.int64)
    h, w = depth.shape
    inside = front & (q[:, 0] >= 0) & (q[:, 0] < w) & (q[:, 1] >= 0) & (q[:, 1] < h)
    qx = np.clip(q[:, 0], 0, w - 1)
    qy = np.clip(q[:, 1], 0, h - 1)
    flat = qy * w + qx
    ok = inside & (depth.ravel()[flat] > 0)
    return flat, ok


def update_correspondences(
    frames: list[RgbdFrame],
    seg: Segmentation,
    pair_poses: dict,
    K: CameraIntrinsics,
    pairs: list[tuple[int, int]] | None = None,
    reference: int = 0,
    normals: list[NormalMap] | None = None,
    dist_thresh: float = 0.1,
    angle_thresh_deg: float = 45.0,
    fixed_source: dict | None = None,
) -> CorrespondenceMap:
    """Projective data association for every frame pair.

    For pair (l, m), each kept reference point is first carried into frame
    l with the current reference-to-l segment pose and snapped to the
    nearest frame-l pixel (this is its source sample; for l = reference it
    is the point itself). The source point is then transformed by the
    (l, m) segment pose and projected into frame m; the nearest valid pixel
    there is the candidate. Candidates farther than ``dist_thresh`` in 3D or
    whose normal deviates more than ``angle_thresh_deg`` from the rotated
    source normal are rejected. A source point lying more than
    ``dist_thresh`` behind the surface seen at its frame-m pixel is marked
    occluded, which removes its brightness residual.
    """
    pairs = list(pairs) if pairs is not None else list(pair_poses)
    if normals is None:
        normals = [compute_normals(f.depth, K) for f in frames]
    pix, ids = seg.kept_pixels()
    n = len(pix)
    nseg = seg.n_segments
    ref = frames[reference]
    P_ref = backproject_depth(ref.depth, K).reshape(-1, 3)[pix]
    cos_gate = np.cos(np.deg2rad(angle_thresh_deg))
    clouds = {}

    def cloud(f):
        if f not in clouds:
            clouds[f] = backproject_depth(frames[f].depth, K).reshape(-1, 3)
        return clouds[f]

    P = len(pairs)
    out = CorrespondenceMap(
        src_points=np.zeros((P, n, 3)),
        src_intensity=np.zeros((P, n)),
        src_normals=np.zeros((P, n, 3)),
        src_valid=np.zeros((P, n), dtype=bool),
        src_normal_valid=np.zeros((P, n), dtype=bool),
        corr_points=np.zeros((P, n, 3)),
        corr_valid=np.zeros((P, n), dtype=bool),
        visible=np.zeros((P, n), dtype=bool),
    )
    for z, (l, m) in enumerate(pairs):
        src = frames[l]
        nl = normals[l]
        if l == reference:
            flat = pix
            ok = np.ones(n, dtype=bool)
            pts = P_ref
        else:
            T = pose_from_reference(pair_poses, l, reference, nseg, fixed_source)
            X = transform_points(T[ids], P_ref)
            flat, ok = _nearest_lookup(X, K, src.depth)
            pts = cloud(l)[flat]
            ok &= np.linalg.norm(pts - X, axis=1) <= dist_thresh
        out.src_points[z] = np.where(ok[:, None], pts, 0.0)
        out.src_intensity[z] = np.where(ok, src.smoothed.ravel()[flat], 0.0)
        nvalid = ok & nl.valid.ravel()[flat]
        out.src_normals[z] = np.where(nvalid[:, None], nl.normals.reshape(-1, 3)[flat], 0.0)
        out.src_valid[z] = ok
        out.src_normal_valid[z] = nvalid

        Tlm = pair_poses[(l, m)]
        Y = transform_points(Tlm[ids], out.src_points[z])
        tflat, tok = _nearest_lookup(Y, K, frames[m].depth)
        cand = cloud(m)[tflat]
        # occluded when frame m sees a surface well in front of the warped point
        out.visible[z] = ok & ~(tok & (Y[:, 2] > cand[:, 2] + dist_thresh))
        tok &= ok & (np.linalg.norm(cand - Y, axis=1) <= dist_thresh)
        nm = normals[m]
        tok &= nm.valid.ravel()[tflat]
        R = rotations_from_axis_angles(Tlm[:, :3])
        n_rot = np.einsum("nij,nj->ni", R[ids], out.src_normals[z])
        cosang = np.einsum("ni,ni->n", n_rot, np.nan_to_num(nm.normals.reshape(-1, 3)[tflat]))
        tok &= ~nvalid | (cosang >= cos_gate)
        out.corr_points[z] = np.where(tok[:, None], cand, 0.0)
        out.corr_valid[z] = tok
    return out


# ---------------------------------------------------------------------------
# the least-squares problem with correspondence refresh


class WindowProblem(LeastSquaresProblem):
    """Energy over a set of frame pairs; correspondences refresh after accepted steps."""

    def __init__(
        self,
        frames: list[RgbdFrame],
        K: CameraIntrinsics,
        seg: Segmentation,
        adj: SegmentAdjacency,
        config: PipelineConfig,
        pairs: list[tuple[int, int]] | None = None,
        fixed_source: dict | None = None,
        normals: list[NormalMap] | None = None,
    ):
        self.frames = frames
        self.K = K
        self.seg = seg
        self.config = config
        self.model = EnergyModel(frames, K, seg, adj, config.energy, pairs=pairs, reference=config.reference)
        self.pairs = self.model.pairs
        self.fixed_source = fixed_source or {}
        self.normals = normals if normals is not None else [compute_normals(f.depth, K) for f in frames]
        self.corr: CorrespondenceMap | None = None
        self.n_refresh = 0

    def refresh(self, x: np.ndarray) -> None:
        st = self.model.state(x)
        self.corr = update_correspondences(
            self.frames, self.seg, poses_by_pair(st, self.pairs), self.K,
            pairs=self.pairs, reference=self.config.reference, normals=self.normals,
            dist_thresh=self.config.dist_thresh, angle_thresh_deg=self.config.angle_thresh_deg,
            fixed_source=self.fixed_source,
        )
        self.n_refresh += 1

    def residuals(self, x):
        if self.corr is None:
            self.refresh(x)
        F = self.model.evaluate(x, self.corr)
        self.model.check_finite(F)
        return F

    def linearize(self, x):
        if self.corr is None:
            self.refresh(x)
        F, blocks = self.model.evaluate(x, self.corr, jacobian=True)
        self.model.check_finite(F)
        return F, JacobianOracle.from_blocks(blocks, self.model.shape)

    def on_accept(self, x):
        self.refresh(x)
        return True

    def energy(self, x) -> float:
        F = self.residuals(x)
        return float(F @ F)


# ---------------------------------------------------------------------------
# stages


def segment_reference(frames: list[RgbdFrame], K: CameraIntrinsics, config: PipelineConfig):
    ref = frames[config.reference]
    p = config.segmentation
    seg = felzenszwalb_depth(ref.depth, p.threshold, p.min_size)
    if seg.n_segments == 0:
        from .errors import EmptyInputError

        raise EmptyInputError(f"no segment reaches min_size={p.min_size}")
    adj = build_adjacency(segment_centroids(seg, ref.depth, K), p.n_psi)
    logger.info("reference segmentation: K=%d segments, %d adjacency pairs", seg.n_segments, adj.n_pairs)
    return seg, adj


def _two_frame_solve(frames, K, seg, adj, config, src, dst, fixed, normals):
    prob = WindowProblem(frames, K, seg, adj, config, pairs=[(src, dst)], fixed_source=fixed, normals=normals)
    x0 = prob.model.new_state().x
    res = lm_minimize(prob, x0, config.solver)
    return prob.model.state(res.x).poses(0).copy(), res


def initialize(
    frames: list[RgbdFrame],
    seg: Segmentation,
    adj: SegmentAdjacency,
    config: PipelineConfig,
    K: CameraIntrinsics,
    normals: list[NormalMap] | None = None,
) -> ProblemState:
    """Initial window state from independent two-frame solves of adjacent pairs.

    Adjacent pairs are solved outward from the reference frame starting at
    identity poses, so each solve can carry the reference segmentation into
    its source frame. Non-adjacent pairs get the composition of the adjacent
    chain. All lifting weights start at 1.
    """
    N = len(frames)
    ref = config.reference
    nseg = seg.n_segments
    normals = normals if normals is not None else [compute_normals(f.depth, K) for f in frames]
    adjacent: dict[tuple[int, int], np.ndarray] = {}
    from_ref = {ref: np.zeros((nseg, 6))}
    for i in range(ref, N - 1):
        T, _ = _two_frame_solve(frames, K, seg, adj, config, i, i + 1, {i: from_ref[i]}, normals)
        adjacent[(i, i + 1)] = T
        from_ref[i + 1] = compose_pose_arrays(T, from_ref[i])
    for i in range(ref - 1, -1, -1):
        T, _ = _two_frame_solve(frames, K, seg, adj, config, i + 1, i, {i + 1: from_ref[i + 1]}, normals)
        adjacent[(i, i + 1)] = invert_pose_array(T)
        from_ref[i] = compose_pose_arrays(T, from_ref[i + 1])

    pairs = enumerate_pairs(N)
    state = ProblemState(nseg, len(pairs), adj.n_pairs)
    for z, (l, m) in enumerate(pairs):
        T = adjacent[(l, l + 1)]
        for i in range(l + 1, m):
            T = compose_pose_arrays(adjacent[(i, i + 1)], T)
        state.poses(z)[:] = T
    state.weights[:] = 1.0
    return state


@dataclass
class WindowSolution:
    state: ProblemState
    pairs: list
    result: LMResult
    problem: WindowProblem

    @property
    def trace(self):
        return self.result.trace

    @property
    def weights(self) -> np.ndarray:
        return self.state.weights


def solve_window(
    frames: list[RgbdFrame],
    seg: Segmentation,
    adj: SegmentAdjacency,
    config: PipelineConfig,
    K: CameraIntrinsics,
    x0: ProblemState,
    normals: list[NormalMap] | None = None,
) -> WindowSolution:
    """Joint LM minimization of the multiframe energy from an initialized state."""
    prob = WindowProblem(frames, K, seg, adj, config, normals=normals)
    res = lm_minimize(prob, x0.x, config.solver)
    state = prob.model.state(res.x.copy())
    logger.info(
        "window solve: %d iterations, energy %.6e -> %.6e", len(res.trace) - 1, res.trace[0].energy, res.energy
    )
    return WindowSolution(state, prob.pairs, res, prob)


@dataclass
class FlowField:
    """Per-reference-pixel 3D displacement into each target frame."""

    targets: list  # target frame indices
    displacement: np.ndarray  # (F, H, W, 3) meters, NaN where invalid
    flow2d: np.ndarray  # (F, H, W, 2) pixels, NaN where invalid
    valid: np.ndarray  # (H, W) bool
    reference: int = 0

    def for_frame(self, target: int) -> tuple[np.ndarray, np.ndarray]:
        i = self.targets.index(target)
        return self.displacement[i], self.flow2d[i]


def extract_flow(
    poses_from_ref: dict,
    seg: Segmentation,
    ref: RgbdFrame,
    K: CameraIntrinsics,
    reference: int = 0,
) -> FlowField:
    """Rigid per-segment flow: rho = g(T_k, P) - P and its image-plane projection.

    ``poses_from_ref`` maps target frame index -> (K, 6) poses from the
    reference frame.
    """
    h, w = ref.shape
    pix, ids = seg.kept_pixels()
    P = backproject_depth(ref.depth, K).reshape(-1, 3)[pix]
    xs = (pix % w).astype(float)
    ys = (pix // w).astype(float)
    targets = sorted(poses_from_ref)
    disp = np.full((len(targets), h * w, 3), np.nan)
    flow = np.full((len(targets), h * w, 2), np.nan)
    valid = np.zeros(h * w, dtype=bool)
    valid[pix] = True
    for i, t in enumerate(targets):
        T = np.asarray(poses_from_ref[t], dtype=float).reshape(-1, 6)
        X = transform_points(T[ids], P)
        disp[i, pix] = X - P
        front = X[:, 2] > 0
        uv = project_points(np.where(front[:, None], X, [0.0, 0.0, 1.0]), K)
        f2 = np.stack([uv[:, 0] - xs, uv[:, 1] - ys], axis=1)
        flow[i, pix] = np.where(front[:, None], f2, np.nan)
    return FlowField(targets, disp.reshape(len(targets), h, w, 3), flow.reshape(len(targets), h, w, 2), valid.reshape(h, w), reference)


def group_motions(poses: np.ndarray, tol: float, scene_scale: float = 1.0) -> np.ndarray:
    """Single-linkage clusters of segment poses under ``|da| + |dt| / scene_scale``.

    Labels are numbered by first appearance in segment order.
    """
    poses = np.asarray(poses, dtype=float).reshape(-1, 6)
    n = len(poses)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    da = np.linalg.norm(poses[:, None, :3] - poses[None, :, :3], axis=-1)
    dt = np.linalg.norm(poses[:, None, 3:] - poses[None, :, 3:], axis=-1)
    d = da + dt / scene_scale
    _, raw = connected_components(csr_matrix(d <= tol), directed=False)
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return remap[np.unique(raw, return_inverse=True)[1]]


def scene_scale(ref: RgbdFrame) -> float:
    d = ref.depth[ref.depth > 0]
    return float(np.median(d)) if d.size else 1.0


@dataclass
class SceneFlowResult:
    segmentation: Segmentation
    adjacency: SegmentAdjacency
    pairs: list
    state: ProblemState
    initial_state: ProblemState
    flow: FlowField
    motion_labels: np.ndarray
    trace: list
    poses_from_ref: dict

    @property
    def weights(self) -> np.ndarray:
        return self.state.weights


def estimate_scene_flow(frames: list[RgbdFrame], K: CameraIntrinsics, config: PipelineConfig | None = None) -> SceneFlowResult:
    """Run the whole pipeline on one temporal window of preprocessed frames."""
    config = config or PipelineConfig(window=len(frames))
    if len(frames) != config.window:
        raise InvalidWindowError(f"config.window={config.window} but {len(frames)} frames were given")
    seg, adj = segment_reference(frames, K, config)
    normals = [compute_normals(f.depth, K) for f in frames]
    x0 = initialize(frames, seg, adj, config, K, normals)
    pairs = enumerate_pairs(len(frames))
    if config.joint_solve:
        sol = solve_window(frames, seg, adj, config, K, x0, normals)
        state, trace = sol.state, sol.trace
    else:
        state, trace = x0.copy(), []
    pp = poses_by_pair(state, pairs)
    ref = config.reference
    from_ref = {
        t: pose_from_reference(pp, t, ref, seg.n_segments) for t in range(len(frames)) if t != ref
    }
    flow = extract_flow(from_ref, seg, frames[ref], K, ref)
    last = max(from_ref)
    labels = group_motions(from_ref[last], config.group_tol, scene_scale(frames[ref]))
    return SceneFlowResult(seg, adj, pairs, state, x0, flow, labels, trace, from_ref)
