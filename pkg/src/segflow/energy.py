"""Residual blocks of the piecewise-rigid scene flow energy.

The energy over a window of N frames is a sum of squares of scaled residuals:

* data: brightness constancy of each reference point warped by its segment pose,
* pICP: point-to-plane distance to the projectively associated point,
* lifted regularizer: ``w^2 (T_j - T_h)`` for every adjacent segment pair,
* weight optimizer: ``1 - w^2`` once per adjacency pair (weights are shared
  by all frame pairs),
* concatenation: ``T^{1,m} - T^{m-1,m} ... T^{1,2}`` for each segment and
  each frame m >= 3 of the window.

The two data terms go through a Huber loss, realized inside the
least-squares framework as ``r -> sign(r) sqrt(huber(r))``.
Every term is normalized by its residual count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy import ndimage

from .errors import InvalidWindowError, NonFiniteResidualError
from .frames import RgbdFrame
from .geometry import (
    CameraIntrinsics,
    axis_angle_from_rotation,
    backproject_depth,
    left_jacobian_inverses,
    left_jacobians,
    rotations_from_axis_angles,
    skew,
)
from .segmentation import SegmentAdjacency, Segmentation
from .solver import JacobianBlock

SQRT_HALF = np.sqrt(0.5)


@dataclass
class EnergyParams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.03
    eta: float = 3e-6
    lambda_c: float = 1.0
    huber_data: float = 0.1
    huber_icp: float = 0.02
    gaussian_sigma: float = 1.0
    edge_margin: int = 2  # data samples keep this many pixels away from invalid depth

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "eta", "lambda_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"energy weight {name} must be >= 0")
        if not (self.huber_data > 0 and self.huber_icp > 0):
            raise ValueError("Huber thresholds must be > 0")
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")
        if self.edge_margin < 0:
            raise ValueError("edge_margin must be >= 0")


def sample_mask(valid: np.ndarray, margin: int) -> np.ndarray:
    """Valid pixels at least ``margin`` 8-neighbour steps away from any invalid one."""
    valid = np.asarray(valid, dtype=bool)
    if margin <= 0:
        return valid.copy()
    return ndimage.binary_erosion(valid, structure=np.ones((3, 3), dtype=bool), iterations=margin, border_value=1)


# ---------------------------------------------------------------------------
# robust loss


def huber(a, eps: float):
    """a^2 / 2 for |a| <= eps, eps (|a| - eps / 2) beyond."""
    a = np.asarray(a, dtype=float)
    abs_a = np.abs(a)
    out = np.where(abs_a <= eps, 0.5 * a * a, eps * (abs_a - 0.5 * eps))
    return out if out.ndim else float(out)


def robust_residual(r: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Map ``r`` to ``sign(r) sqrt(huber(r))`` and return its derivative as well."""
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    quad = a <= eps
    rho = np.where(quad, 0.5 * r * r, eps * (a - 0.5 * eps))
    rt = np.sign(r) * np.sqrt(rho)
    d = np.where(quad, SQRT_HALF, eps / (2.0 * np.sqrt(np.where(quad, 1.0, rho))))
    return rt, d


# ---------------------------------------------------------------------------
# raster sampling


def bilinear_sample(img: np.ndarray, valid: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear lookup with the exact derivative of the interpolant.

    A sample is usable only when it lies inside the raster and all four
    surrounding pixels are valid.

    Returns:
        (values, d/du, d/dv, ok)
    """
    h, w = img.shape
    ok = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(np.where(ok, u, 0.0), 0, w - 1)
    vc = np.clip(np.where(ok, v, 0.0), 0, h - 1)
    x0 = np.minimum(np.floor(uc).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(vc).astype(np.int64), h - 2)
    fx = uc - x0
    fy = vc - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    val = (1 - fx) * (1 - fy) * i00 + fx * (1 - fy) * i01 + (1 - fx) * fy * i10 + fx * fy * i11
    du = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
    dv = (1 - fx) * (i10 - i00) + fx * (i11 - i01)
    ok &= valid[y0, x0] & valid[y0, x0 + 1] & valid[y0 + 1, x0] & valid[y0 + 1, x0 + 1]
    return val, du, dv, ok


# ---------------------------------------------------------------------------
# associations


@dataclass
class CorrespondenceMap:
    """Per frame pair and per reference point: the source sample and its match.

    For pair (l, m) the source sample of a reference point is its measured
    counterpart in frame l (the point itself when l is the reference frame);
    ``corr_points`` holds the projectively associated point in frame m.
    ``visible`` is False where the warped source point was found occluded in
    frame m at the last association; such points contribute no brightness
    residual. Arrays are (P, n, ...) for P pairs and n kept reference pixels.
    """

    src_points: np.ndarray
    src_intensity: np.ndarray
    src_normals: np.ndarray
    src_valid: np.ndarray
    src_normal_valid: np.ndarray
    corr_points: np.ndarray
    corr_valid: np.ndarray
    visible: np.ndarray | None = None

    def __post_init__(self):
        if self.visible is None:
            self.visible = np.ones(self.src_valid.shape, dtype=bool)

    @property
    def n_pairs(self) -> int:
        return self.src_points.shape[0]


# ---------------------------------------------------------------------------
# per-term raw residuals (unscaled, unrobustified) with block derivatives


def _warp(poses: np.ndarray, seg_ids: np.ndarray, points: np.ndarray):
    R = rotations_from_axis_angles(poses[:, :3])
    RP = np.einsum("nij,nj->ni", R[seg_ids], points)
    return RP + poses[seg_ids, 3:], RP


def _rot_rows(g: np.ndarray, RP: np.ndarray, Jl: np.ndarray, seg_ids: np.ndarray) -> np.ndarray:
    # d/d(alpha) of g . (R(alpha) P) = (RP x g)^T J_l(alpha)
    return np.einsum("ni,nij->nj", np.cross(RP, g), Jl[seg_ids])


def data_block(poses, seg_ids, src_points, src_intensity, src_valid, cur_img, cur_valid, K: CameraIntrinsics):
    """Brightness residuals ``I_src - I_cur(pi(g(T_k, P)))`` and their (n, 6) derivatives."""
    X, RP = _warp(poses, seg_ids, src_points)
    z = X[:, 2]
    front = src_valid & (z > 1e-9)
    zs = np.where(front, z, 1.0)
    u = K.fx * X[:, 0] / zs + K.cx
    v = K.fy * X[:, 1] / zs + K.cy
    val, du, dv, ok = bilinear_sample(cur_img, cur_valid, u, v)
    ok &= front
    r = np.where(ok, src_intensity - val, 0.0)
    # dr/dX = -(grad I) . d(pi)/dX
    gx = -du * K.fx / zs
    gy = -dv * K.fy / zs
    g = np.stack([gx, gy, -(gx * X[:, 0] + gy * X[:, 1]) / zs], axis=1)
    Jl = left_jacobians(poses[:, :3])
    jac = np.concatenate([_rot_rows(g, RP, Jl, seg_ids), g], axis=1)
    jac[~ok] = 0.0
    return r, jac, ok


def picp_block(poses, seg_ids, src_points, normals, corr_points, valid):
    """Point-to-plane residuals ``(g(T_k, P) - p_corr) . n`` and (n, 6) derivatives."""
    X, RP = _warp(poses, seg_ids, src_points)
    n = np.where(valid[:, None], normals, 0.0)
    r = np.where(valid, np.einsum("ni,ni->n", X - np.where(valid[:, None], corr_points, 0.0), n), 0.0)
    Jl = left_jacobians(poses[:, :3])
    jac = np.concatenate([_rot_rows(n, RP, Jl, seg_ids), n], axis=1)
    jac[~valid] = 0.0
    return r, jac


def lifted_reg_residuals(poses: np.ndarray, weights: np.ndarray, adj: SegmentAdjacency) -> np.ndarray:
    """(S, 6) residuals ``w_jh^2 (T_j - T_h)``, one row per adjacency pair."""
    poses = np.asarray(poses, dtype=float).reshape(-1, 6)
    weights = np.asarray(weights, dtype=float)
    if adj.n_pairs == 0:
        return np.zeros((0, 6))
    j, h = adj.pairs[:, 0], adj.pairs[:, 1]
    return (weights**2)[:, None] * (poses[j] - poses[h])


def weight_opt_residuals(weights) -> np.ndarray:
    """``1 - w^2`` per lifting weight."""
    return 1.0 - np.asarray(weights, dtype=float) ** 2


def window_pairs(n_frames: int) -> list[tuple[int, int]]:
    """All (l, m) with l < m, lexicographic."""
    if n_frames < 2:
        raise InvalidWindowError(f"window needs at least 2 frames, got {n_frames}")
    return [(l, m) for l in range(n_frames) for m in range(l + 1, n_frames)]


def concat_targets(n_frames: int) -> list[int]:
    """Frames m whose pose from the window's first frame is tied to the adjacent chain."""
    return list(range(2, n_frames))


def _compose_chain(chain: np.ndarray):
    """Compose (L, 6) poses applied in order; returns R, t and the per-link factors."""
    Rs = rotations_from_axis_angles(chain[:, :3])
    L = len(chain)
    R = np.eye(3)
    t = np.zeros(3)
    before_t = []
    for i in range(L):
        before_t.append(t.copy())
        R = Rs[i] @ R
        t = Rs[i] @ t + chain[i, 3:]
    after = [np.eye(3)] * L
    A = np.eye(3)
    for i in range(L - 1, -1, -1):
        after[i] = A
        A = A @ Rs[i]
    return R, t, Rs, before_t, after


def concat_block(target: np.ndarray, chain: np.ndarray):
    """Residual ``target - log(chain composition)`` (6,) and derivatives.

    Returns the residual, d/d(target) (6, 6) and a list of d/d(chain[i]) (6, 6).
    """
    R, t, Rs, before_t, after = _compose_chain(chain)
    phi = axis_angle_from_rotation(R)
    r = target - np.concatenate([phi, t])
    Jinv = left_jacobian_inverses(phi)[0]
    Jl = left_jacobians(chain[:, :3])
    d_chain = []
    for i in range(len(chain)):
        A = after[i]
        d = np.zeros((6, 6))
        d[:3, :3] = -Jinv @ A @ Jl[i]
        d[3:, :3] = A @ skew(Rs[i] @ before_t[i]) @ Jl[i]
        d[3:, 3:] = -A
        d_chain.append(d)
    return r, np.eye(6), d_chain


def concat_residuals(window_poses: dict, n_frames: int) -> np.ndarray:
    """Pose concatenation residuals for every segment and every target frame.

    Args:
        window_poses: mapping (l, m) -> (K, 6) pose array, containing at least
            the adjacent pairs and the pairs (0, m) for m >= 2.
        n_frames: window size N.

    Returns:
        (K * (N - 2), 6) array ordered by target frame, then segment.
    """
    targets = concat_targets(n_frames)
    if not targets:
        return np.zeros((0, 6))
    K = np.asarray(window_poses[(0, 1)]).shape[0]
    out = []
    for m in targets:
        chain_pairs = [(i, i + 1) for i in range(m)]
        for k in range(K):
            chain = np.stack([np.asarray(window_poses[p])[k] for p in chain_pairs])
            r, _, _ = concat_block(np.asarray(window_poses[(0, m)])[k], chain)
            out.append(r)
    return np.array(out)


# ---------------------------------------------------------------------------
# residual layout and term normalization


@dataclass
class ResidualLayout:
    n_frames: int
    n_pairs: int
    n_C: int
    n_D: int
    sum_psi: int
    n_segments: int
    n_c: int
    pairs: list = field(default_factory=list)
    # scalar ranges into F, filled in __post_init__
    data: list = field(default_factory=list)
    icp: list = field(default_factory=list)
    reg: list = field(default_factory=list)
    weight: slice = None
    concat: slice = None
    n_scalars: int = 0

    def __post_init__(self):
        pos = 0
        self.data, self.icp, self.reg = [], [], []
        for _ in range(self.n_pairs):
            self.data.append(slice(pos, pos + self.n_C))
            pos += self.n_C
            self.icp.append(slice(pos, pos + self.n_D))
            pos += self.n_D
            self.reg.append(slice(pos, pos + 6 * self.sum_psi))
            pos += 6 * self.sum_psi
        self.weight = slice(pos, pos + self.sum_psi)
        pos += self.sum_psi
        self.concat = slice(pos, pos + 6 * self.n_c)
        pos += 6 * self.n_c
        self.n_scalars = pos

    @property
    def n_pp(self) -> int:
        return self.sum_psi

    @property
    def M(self) -> int:
        """Residual count in blocks (a 6-vector residual counts once)."""
        return self.n_pairs * (self.n_C + self.n_D) + (self.n_pairs + 1) * self.sum_psi + self.n_c

    def term_slices(self) -> dict[str, list[slice]]:
        return {
            "data": self.data,
            "picp": self.icp,
            "lifted_reg": self.reg,
            "weight_opt": [self.weight],
            "concat": [self.concat],
        }


def count_residuals(n_frames: int, n_C: int, n_D: int, sum_psi: int, n_segments: int) -> ResidualLayout:
    """Residual bookkeeping: C(N,2)(n_C + n_D) + (C(N,2) + 1) sum_psi + K (N - 2) blocks."""
    pairs = window_pairs(n_frames)
    return ResidualLayout(
        n_frames=n_frames,
        n_pairs=comb(n_frames, 2),
        n_C=n_C,
        n_D=n_D,
        sum_psi=sum_psi,
        n_segments=n_segments,
        n_c=n_segments * (n_frames - 2),
        pairs=pairs,
    )


def term_weights(params: EnergyParams, layout: ResidualLayout) -> dict[str, float]:
    """User weight divided by the term's per-pair residual count (0 for empty terms)."""

    def ratio(w, n):
        return w / n if n > 0 else 0.0

    return {
        "data": ratio(params.alpha, layout.n_C),
        "picp": ratio(params.beta, layout.n_D),
        "lifted_reg": ratio(params.gamma, layout.sum_psi),
        "weight_opt": ratio(params.eta, layout.sum_psi),
        "concat": ratio(params.lambda_c, layout.n_c),
    }


# ---------------------------------------------------------------------------
# the full stacked residual function


class EnergyModel:
    """Static context of one energy: frames, segmentation, adjacency and pair set.

    ``pairs`` lists (source frame, target frame); the unknown vector holds K
    poses for each pair in that order followed by one weight per adjacency
    pair. With ``n_frames >= 3`` the pairs must be the full lexicographic
    window and the concatenation term is active.
    """

    def __init__(
        self,
        frames: list[RgbdFrame],
        K: CameraIntrinsics,
        seg: Segmentation,
        adj: SegmentAdjacency,
        params: EnergyParams,
        pairs: list[tuple[int, int]] | None = None,
        reference: int = 0,
    ):
        self.frames = frames
        self.K = K
        self.seg = seg
        self.adj = adj
        self.params = params
        self.reference = reference
        self.pairs = list(pairs) if pairs is not None else window_pairs(len(frames))
        self.n_segments = seg.n_segments
        self.pix, self.seg_ids = seg.kept_pixels()
        self.n_points = len(self.pix)
        ref = frames[reference]
        self.ref_points = backproject_depth(ref.depth, K).reshape(-1, 3)[self.pix]

        if len(self.pairs) == 1:
            n_frames = 2
        else:
            n_frames = len(frames)
            if self.pairs != window_pairs(n_frames):
                raise InvalidWindowError("multi-pair energies need the full lexicographic pair set")
        self.n_frames = n_frames
        self.layout = count_residuals(n_frames, self.n_points, self.n_points, adj.n_pairs, self.n_segments)
        self.scales = term_weights(params, self.layout)
        self.pair_index = {p: i for i, p in enumerate(self.pairs)}
        self.masks = [sample_mask(f.valid, params.edge_margin) for f in frames]

    def _source_ok(self, frame: int, points: np.ndarray) -> np.ndarray:
        """Whether each source point sits on a pixel of ``frame`` inside its sample mask."""
        z = points[:, 2]
        front = z > 0
        u = np.rint(self.K.fx * points[:, 0] / np.where(front, z, 1.0) + self.K.cx).astype(np.int64)
        v = np.rint(self.K.fy * points[:, 1] / np.where(front, z, 1.0) + self.K.cy).astype(np.int64)
        h, w = self.masks[frame].shape
        inside = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        return inside & self.masks[frame][np.clip(v, 0, h - 1), np.clip(u, 0, w - 1)]

    # -- parameter layout ------------------------------------------------

    def new_state(self):
        from .solver import ProblemState

        return ProblemState(self.n_segments, len(self.pairs), self.adj.n_pairs)

    def state(self, x: np.ndarray):
        from .solver import ProblemState

        return ProblemState(self.n_segments, len(self.pairs), self.adj.n_pairs, x)

    @property
    def dim(self) -> int:
        return self.n_segments * len(self.pairs) * 6 + self.adj.n_pairs

    @property
    def shape(self) -> tuple[int, int]:
        return (self.layout.n_scalars, self.dim)

    def _pose_cols(self, pair: int, seg_ids: np.ndarray) -> np.ndarray:
        base = (pair * self.n_segments + np.asarray(seg_ids)) * 6
        return base[..., None] + np.arange(6)

    def _weight_col(self, e) -> np.ndarray:
        return self.n_segments * len(self.pairs) * 6 + np.asarray(e)

    # -- evaluation --------------------------------------------------------

    def evaluate(self, x: np.ndarray, corr: CorrespondenceMap, jacobian: bool = False):
        """Stacked scaled residual vector ``F(x)`` (and Jacobian blocks if asked)."""
        st = self.state(x)
        lay = self.layout
        F = np.zeros(lay.n_scalars)
        blocks: list[JacobianBlock] = []
        p = self.params
        sq = {k: np.sqrt(v) for k, v in self.scales.items()}
        ids = self.seg_ids
        S = self.adj.n_pairs
        w = st.weights

        for z, (l, m) in enumerate(self.pairs):
            poses = st.poses(z)
            cur = self.frames[m]
            cols = self._pose_cols(z, ids)

            src_ok = corr.src_valid[z] & corr.visible[z] & self._source_ok(l, corr.src_points[z])
            r, jac, _ = data_block(
                poses, ids, corr.src_points[z], corr.src_intensity[z], src_ok,
                cur.smoothed, self.masks[m], self.K,
            )
            rt, d = robust_residual(r, p.huber_data)
            F[lay.data[z]] = sq["data"] * rt
            if jacobian:
                rows = np.arange(lay.data[z].start, lay.data[z].stop)
                blocks.append(JacobianBlock("data", rows, cols, (sq["data"] * d)[:, None] * jac))

            valid = corr.src_valid[z] & corr.src_normal_valid[z] & corr.corr_valid[z]
            r, jac = picp_block(poses, ids, corr.src_points[z], corr.src_normals[z], corr.corr_points[z], valid)
            rt, d = robust_residual(r, p.huber_icp)
            F[lay.icp[z]] = sq["picp"] * rt
            if jacobian:
                rows = np.arange(lay.icp[z].start, lay.icp[z].stop)
                blocks.append(JacobianBlock("picp", rows, cols, (sq["picp"] * d)[:, None] * jac))

            if S:
                j, h = self.adj.pairs[:, 0], self.adj.pairs[:, 1]
                diff = poses[j] - poses[h]
                w2 = w**2
                F[lay.reg[z]] = (sq["lifted_reg"] * w2[:, None] * diff).ravel()
                if jacobian:
                    rows = np.arange(lay.reg[z].start, lay.reg[z].stop)
                    e = np.repeat(np.arange(S), 6)
                    comp = np.tile(np.arange(6), S)
                    cj = self._pose_cols(z, j).reshape(-1)
                    ch = self._pose_cols(z, h).reshape(-1)
                    c = np.stack([cj, ch, self._weight_col(e)], axis=1)
                    vals = np.stack(
                        [
                            sq["lifted_reg"] * w2[e],
                            -sq["lifted_reg"] * w2[e],
                            sq["lifted_reg"] * 2.0 * w[e] * diff[e, comp],
                        ],
                        axis=1,
                    )
                    blocks.append(JacobianBlock("lifted_reg", rows, c, vals))

        if S:
            F[lay.weight] = sq["weight_opt"] * weight_opt_residuals(w)
            if jacobian:
                rows = np.arange(lay.weight.start, lay.weight.stop)
                blocks.append(
                    JacobianBlock("weight_opt", rows, self._weight_col(np.arange(S))[:, None], (-2.0 * sq["weight_opt"] * w)[:, None])
                )

        if lay.n_c:
            self._concat(st, F, blocks, sq["concat"], jacobian)

        return (F, blocks) if jacobian else F

    def _concat(self, st, F, blocks, s, jacobian):
        lay = self.layout
        pos = lay.concat.start
        rows_all, cols_all, vals_all = [], [], []
        for m in concat_targets(self.n_frames):
            zt = self.pair_index[(0, m)]
            chain_z = [self.pair_index[(i, i + 1)] for i in range(m)]
            for k in range(self.n_segments):
                chain = np.stack([st.poses(zc)[k] for zc in chain_z])
                r, d_t, d_chain = concat_block(st.poses(zt)[k], chain)
                F[pos : pos + 6] = s * r
                if jacobian:
                    cols = [self._pose_cols(zt, k)] + [self._pose_cols(zc, k) for zc in chain_z]
                    mats = [d_t] + d_chain
                    rows_all.append(np.arange(pos, pos + 6))
                    cols_all.append(np.tile(np.concatenate(cols), (6, 1)))
                    vals_all.append(s * np.concatenate(mats, axis=1))
                pos += 6
        if jacobian and rows_all:
            # chain lengths differ per target: emit one block per length
            by_width: dict[int, list] = {}
            for r, c, v in zip(rows_all, cols_all, vals_all):
                by_width.setdefault(c.shape[1], []).append((r, c, v))
            for items in by_width.values():
                blocks.append(
                    JacobianBlock(
                        "concat",
                        np.concatenate([i[0] for i in items]),
                        np.concatenate([i[1] for i in items]),
                        np.concatenate([i[2] for i in items]),
                    )
                )

    def check_finite(self, F: np.ndarray) -> None:
        if np.all(np.isfinite(F)):
            return
        for term, slices in self.layout.term_slices().items():
            for sl in slices:
                part = F[sl]
                bad = np.flatnonzero(~np.isfinite(part))
                if bad.size:
                    raise NonFiniteResidualError(term, int(sl.start + bad[0]), float(part[bad[0]]))

    def term_energies(self, x: np.ndarray, corr: CorrespondenceMap) -> dict[str, float]:
        F = self.evaluate(x, corr)
        return {t: float(sum(F[sl] @ F[sl] for sl in sls)) for t, sls in self.layout.term_slices().items()}


def evaluate_energy(x, model: EnergyModel, corr: CorrespondenceMap) -> float:
    """``||F(x)||^2`` with all term scalings applied."""
    x = x.x if hasattr(x, "x") else np.asarray(x, dtype=float)
    F = model.evaluate(x, corr)
    model.check_finite(F)
    return float(F @ F)


# ---------------------------------------------------------------------------
# two-frame conveniences (reference frame as source, identity source pose)


def reference_correspondences(ref: RgbdFrame, seg: Segmentation, K: CameraIntrinsics, normals=None) -> CorrespondenceMap:
    """Single-pair map whose source samples are the reference points themselves; no matches."""
    pix, _ = seg.kept_pixels()
    P = backproject_depth(ref.depth, K).reshape(-1, 3)[pix]
    n = len(pix)
    if normals is None:
        nrm = np.full((n, 3), np.nan)
        nvalid = np.zeros(n, dtype=bool)
    else:
        nrm = normals.normals.reshape(-1, 3)[pix]
        nvalid = normals.valid.ravel()[pix]
    return CorrespondenceMap(
        src_points=P[None],
        src_intensity=ref.smoothed.ravel()[pix][None],
        src_normals=nrm[None],
        src_valid=np.ones((1, n), dtype=bool),
        src_normal_valid=nvalid[None],
        corr_points=np.zeros((1, n, 3)),
        corr_valid=np.zeros((1, n), dtype=bool),
    )


def data_residuals(ref: RgbdFrame, cur: RgbdFrame, seg: Segmentation, poses, K: CameraIntrinsics, params=None) -> np.ndarray:
    """Raw brightness residuals, one per kept reference pixel (0 where the warp is unusable)."""
    pix, ids = seg.kept_pixels()
    P = backproject_depth(ref.depth, K).reshape(-1, 3)[pix]
    r, _, _ = data_block(
        np.asarray(poses, dtype=float).reshape(-1, 6), ids, P, ref.smoothed.ravel()[pix],
        np.ones(len(pix), dtype=bool), cur.smoothed, cur.valid, K,
    )
    return r


def picp_residuals(ref: RgbdFrame, corr: CorrespondenceMap, normals, seg: Segmentation, poses, K: CameraIntrinsics, pair: int = 0) -> np.ndarray:
    """Raw point-to-plane residuals for reference points with a match and a valid normal."""
    pix, ids = seg.kept_pixels()
    P = backproject_depth(ref.depth, K).reshape(-1, 3)[pix]
    nrm = normals.normals.reshape(-1, 3)[pix]
    valid = normals.valid.ravel()[pix] & corr.corr_valid[pair]
    r, _ = picp_block(np.asarray(poses, dtype=float).reshape(-1, 6), ids, P, nrm, corr.corr_points[pair], valid)
    return r
