"""Synthetic textured rigid-body RGB-D sequences with exact ground-truth flow."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import SceneError
from .frames import RgbdFrame, preprocess
from .geometry import CameraIntrinsics, SegmentPose, compose_poses, rotation_from_axis_angle
from .pipeline import FlowField, extract_flow
from .segmentation import Segmentation

logger = logging.getLogger(__name__)

DESK_CAMERA = CameraIntrinsics(fx=120.0, fy=120.0, cx=63.5, cy=47.5, width=128, height=96)


@dataclass(frozen=True)
class Texture:
    """Band-limited body-fixed texture: ``0.5 + sum a_i sin(k_i . X + phi_i)``."""

    seed: int
    n_waves: int = 3
    k_min: float = 15.0  # rad/m
    k_max: float = 40.0
    amplitude: float = 0.12

    def waves(self):
        rng = np.random.default_rng(self.seed)
        d = rng.normal(size=(self.n_waves, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        k = d * rng.uniform(self.k_min, self.k_max, size=(self.n_waves, 1))
        phase = rng.uniform(0, 2 * np.pi, size=self.n_waves)
        return k, phase

    def __call__(self, X: np.ndarray) -> np.ndarray:
        k, phase = self.waves()
        return 0.5 + self.amplitude * np.sin(X @ k.T + phase).sum(axis=-1)


@dataclass(frozen=True)
class Plane:
    """Rectangle centered at ``center`` spanned by unit axes ``u``, ``v`` with half extents."""

    center: tuple
    u: tuple
    v: tuple
    half_u: float
    half_v: float
    texture: Texture

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Ray parameter of the hit for rays ``o + s d`` (inf where missed)."""
        c, u, v = (np.asarray(a, dtype=float) for a in (self.center, self.u, self.v))
        n = np.cross(u, v)
        den = d @ n
        safe = np.abs(den) > 1e-12
        s = np.where(safe, ((c - o) @ n) / np.where(safe, den, 1.0), np.inf)
        X = o + s[:, None] * d
        lu = (X - c) @ u
        lv = (X - c) @ v
        hit = safe & (s > 0) & (np.abs(lu) <= self.half_u) & (np.abs(lv) <= self.half_v)
        return np.where(hit, s, np.inf)


@dataclass(frozen=True)
class Box:
    """Oriented box: ``rotation`` is an axis-angle, ``half`` the half side lengths."""

    center: tuple
    half: tuple
    texture: Texture
    rotation: tuple = (0.0, 0.0, 0.0)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        R = rotation_from_axis_angle(self.rotation)
        ol = (o - np.asarray(self.center, dtype=float)) @ R
        dl = d @ R
        half = np.asarray(self.half, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dl
            t1 = (-half - ol) * inv
            t2 = (half - ol) * inv
        lo = np.nanmax(np.minimum(t1, t2), axis=1)
        hi = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (lo <= hi) & (lo > 0)
        return np.where(hit, lo, np.inf)


@dataclass
class Body:
    """Rigid body: surfaces in frame-0 camera coordinates and its per-step motion.

    ``steps[t]`` moves the body from frame t to frame t + 1; a single pose
    is repeated for every step.
    """

    surfaces: list
    steps: list | SegmentPose = field(default_factory=SegmentPose.identity)

    def step(self, t: int) -> SegmentPose:
        if isinstance(self.steps, SegmentPose):
            return self.steps
        return self.steps[t]

    def pose(self, t: int) -> SegmentPose:
        """Pose carrying frame-0 body points to frame ``t``."""
        T = SegmentPose.identity()
        for i in range(t):
            T = compose_poses(self.step(i), T)
        return T


@dataclass
class SceneSpec:
    name: str
    bodies: list
    n_frames: int = 2
    camera: CameraIntrinsics = DESK_CAMERA
    intensity_noise: float = 0.0
    depth_noise: float = 0.0
    seed: int = 0
    separation: float = 0.1  # minimum depth step at surface boundaries, meters
    min_size: int = 50  # segmentation min_size suited to the raster size

    def __post_init__(self):
        if self.n_frames < 2:
            raise SceneError(f"{self.name}: n_frames must be >= 2")
        if not self.bodies:
            raise SceneError(f"{self.name}: no bodies")
        for b in self.bodies:
            if not isinstance(b.steps, SegmentPose) and len(b.steps) < self.n_frames - 1:
                raise SceneError(f"{self.name}: body has {len(b.steps)} steps for {self.n_frames} frames")

    def with_noise(self, intensity: float, depth: float, seed: int | None = None) -> SceneSpec:
        return SceneSpec(
            self.name, self.bodies, self.n_frames, self.camera, intensity, depth,
            self.seed if seed is None else seed, self.separation, self.min_size,
        )


@dataclass
class RenderedScene:
    """Output of ``render_sequence``; iterates as ``(frames, flow, labels)``."""

    spec: SceneSpec
    frames: list  # preprocessed RgbdFrame list
    flow: FlowField  # ground truth from frame 0 to every later frame
    labels: np.ndarray  # (H, W) body id per pixel of frame 0, -1 = background
    surface_ids: np.ndarray  # (H, W) surface id per pixel of frame 0, -1 = background
    intensity: list  # noisy unsmoothed luminance rasters
    depth: list  # noisy depth rasters, 0 = invalid
    body_poses: list  # body_poses[b][t]: SegmentPose from frame 0 to frame t

    def __iter__(self):
        return iter((self.frames, self.flow, self.labels))

    def segmentation(self) -> Segmentation:
        """Ground-truth segmentation with one segment per surface."""
        return Segmentation(self.surface_ids.astype(np.int32))

    def surface_poses(self, t: int) -> np.ndarray:
        """(n_surfaces, 6) true pose from frame 0 to frame ``t`` per surface id."""
        rows = [self.body_poses[b][t].as_vector() for b, body in enumerate(self.spec.bodies) for _ in body.surfaces]
        return np.array(rows).reshape(-1, 6)

    def true_motion_labels(self) -> np.ndarray:
        """Body id of every surface id."""
        return np.array([b for b, body in enumerate(self.spec.bodies) for _ in body.surfaces], dtype=np.int64)


def _camera_rays(K: CameraIntrinsics) -> np.ndarray:
    v, u = np.mgrid[0 : K.height, 0 : K.width].astype(float)
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)


def _raycast(spec: SceneSpec, poses: list, rays: np.ndarray):
    """Z-buffer over every surface of every body; returns depth, frame-0 points, ids."""
    n = len(rays)
    best = np.full(n, np.inf)
    X0 = np.zeros((n, 3))
    surf = np.full(n, -1, dtype=np.int64)
    body_of = np.full(n, -1, dtype=np.int64)
    sid = 0
    for b, body in enumerate(spec.bodies):
        R = poses[b].rotation
        t = poses[b].translation
        o = np.broadcast_to(-(R.T @ t), (n, 3))
        d = rays @ R
        for s in body.surfaces:
            hit = s.intersect(o, d)
            closer = hit < best
            best[closer] = hit[closer]
            X0[closer] = o[closer] + hit[closer, None] * d[closer]
            surf[closer] = sid
            body_of[closer] = b
            sid += 1
    valid = np.isfinite(best)
    depth = np.where(valid, best, 0.0)  # ray z-component is 1
    return depth, X0, surf, body_of


def _textures(spec: SceneSpec) -> list:
    return [s.texture for body in spec.bodies for s in body.surfaces]


def _check_steps(spec: SceneSpec, depth: np.ndarray, surf: np.ndarray, frame: int) -> None:
    for a, b in (
        ((slice(None), slice(0, -1)), (slice(None), slice(1, None))),
        ((slice(0, -1), slice(None)), (slice(1, None), slice(None))),
    ):
        sa, sb = surf[a], surf[b]
        border = (sa >= 0) & (sb >= 0) & (sa != sb)
        step = np.abs(depth[a] - depth[b])[border]
        if step.size and step.min() < spec.separation:
            raise SceneError(
                f"{spec.name}: frame {frame} has a {step.min():.4f} m step at a surface boundary "
                f"(< separation {spec.separation} m)"
            )


def render_sequence(spec: SceneSpec, sigma: float = 1.0) -> RenderedScene:
    """Rasterize every frame, record ground truth, then add seeded noise.

    Args:
        spec: the scene.
        sigma: Gaussian smoothing applied to the intensity of the returned frames.
    """
    K = spec.camera
    h, w = K.height, K.width
    rays = _camera_rays(K)
    textures = _textures(spec)
    body_poses = [[body.pose(t) for t in range(spec.n_frames)] for body in spec.bodies]
    rng = np.random.default_rng(spec.seed)

    intensities, depths = [], []
    ref = None
    for t in range(spec.n_frames):
        depth, X0, surf, body_of = _raycast(spec, [bp[t] for bp in body_poses], rays)
        if t == 0:
            ref = (depth, X0, surf, body_of)
            present = set(np.unique(body_of[body_of >= 0]).tolist())
            missing = sorted(set(range(len(spec.bodies))) - present)
            if missing:
                raise SceneError(f"{spec.name}: bodies {missing} are not visible in the first frame")
        _check_steps(spec, depth.reshape(h, w), surf.reshape(h, w), t)
        inten = np.zeros(h * w)
        for i, tex in enumerate(textures):
            m = surf == i
            if m.any():
                inten[m] = tex(X0[m])
        intensities.append(inten.reshape(h, w))
        depths.append(depth.reshape(h, w))

    depth0, X0, surf0, body0 = ref
    surface_body = np.array([b for b, body in enumerate(spec.bodies) for _ in body.surfaces], dtype=np.int64)
    from_ref = {}
    for t in range(1, spec.n_frames):
        from_ref[t] = np.array([body_poses[b][t].as_vector() for b in surface_body]).reshape(-1, 6)
    gt_seg = Segmentation(surf0.reshape(h, w).astype(np.int32))
    ref_frame = RgbdFrame(intensities[0], intensities[0], depths[0], 0)
    flow = extract_flow(from_ref, gt_seg, ref_frame, K)

    noisy_i, noisy_d = [], []
    for inten, depth in zip(intensities, depths):
        valid = depth > 0
        if spec.intensity_noise > 0:
            inten = inten + np.where(valid, rng.normal(0.0, spec.intensity_noise, inten.shape), 0.0)
        if spec.depth_noise > 0:
            depth = np.where(valid, np.maximum(depth + rng.normal(0.0, spec.depth_noise, depth.shape), 1e-3), 0.0)
        noisy_i.append(inten)
        noisy_d.append(depth)
    frames = preprocess(list(zip(noisy_i, noisy_d)), sigma)
    logger.debug("rendered %s: %d frames, %d valid reference pixels", spec.name, spec.n_frames, int((depth0 > 0).sum()))
    return RenderedScene(
        spec, frames, flow, body0.reshape(h, w), surf0.reshape(h, w), noisy_i, noisy_d, body_poses
    )


# ---------------------------------------------------------------------------
# catalog


def _about_pivot(axis_angle, pivot) -> SegmentPose:
    """Rotation about an axis through ``pivot``."""
    R = rotation_from_axis_angle(axis_angle)
    p = np.asarray(pivot, dtype=float)
    return SegmentPose(axis_angle, p - R @ p)


def _tilted(center, yaw, pitch, half_u, half_v, seed) -> Plane:
    Ry = rotation_from_axis_angle([0.0, yaw, 0.0])
    Rx = rotation_from_axis_angle([pitch, 0.0, 0.0])
    R = Ry @ Rx
    return Plane(tuple(center), tuple(R[:, 0]), tuple(R[:, 1]), half_u, half_v, Texture(seed))


def _rigid_translate() -> SceneSpec:
    plane = _tilted((0.0, 0.0, 1.5), 0.15, -0.1, 0.45, 0.33, 11)
    return SceneSpec("rigid-translate", [Body([plane], SegmentPose((0, 0, 0), (0.02, 0.0, 0.0)))], n_frames=4)


def _rigid_rotate() -> SceneSpec:
    plane = _tilted((0.0, 0.0, 1.5), -0.1, 0.12, 0.4, 0.3, 12)
    step = SegmentPose((0.0, 0.0, np.deg2rad(2.0)), (0.0, 0.0, 0.0))
    return SceneSpec("rigid-rotate", [Body([plane], step)], n_frames=3)


def _two_body() -> SceneSpec:
    # each body is two stepped patches stacked vertically, bodies side by side
    left = Body(
        [_tilted((-0.38, -0.17, 1.35), 0.15, 0.1, 0.3, 0.14, 21), _tilted((-0.38, 0.17, 1.55), 0.15, -0.1, 0.3, 0.14, 22)],
        SegmentPose((0.0, 0.0, 0.0), (0.02, 0.0, 0.0)),
    )
    right = Body(
        [_tilted((0.38, -0.17, 1.7), -0.15, 0.1, 0.3, 0.14, 23), _tilted((0.38, 0.17, 1.5), -0.15, -0.1, 0.3, 0.14, 24)],
        SegmentPose((0.0, 0.0, 0.0), (-0.015, 0.01, 0.01)),
    )
    return SceneSpec("two-body", [left, right], n_frames=2)


def _articulated() -> SceneSpec:
    theta = np.deg2rad(1.5)
    boxes = [
        Box((-0.45, 0.05, 1.35), (0.14, 0.2, 0.1), Texture(41), (0.0, 0.3, 0.0)),
        Box((-0.02, 0.0, 1.7), (0.14, 0.2, 0.1), Texture(42), (0.0, 0.2, 0.0)),
        Box((0.42, -0.05, 2.05), (0.14, 0.2, 0.1), Texture(43), (0.0, 0.1, 0.0)),
    ]
    pivots = [(-0.6, 0.05, 1.4), (-0.2, 0.0, 1.6), (0.25, -0.05, 1.95)]
    bodies = []
    chain = SegmentPose.identity()
    for box, pivot in zip(boxes, pivots):
        chain = compose_poses(chain, _about_pivot((0.0, theta, 0.0), pivot))
        bodies.append(Body([box], chain))
    return SceneSpec("articulated", bodies, n_frames=3)


def _static_camera_motion() -> SceneSpec:
    surfaces = [
        _tilted((0.0, 0.0, 2.6), 0.0, 0.0, 1.6, 1.2, 51),
        _tilted((-0.35, -0.05, 1.6), 0.2, 0.0, 0.25, 0.22, 52),
        _tilted((0.4, 0.15, 1.9), -0.25, 0.1, 0.22, 0.18, 53),
        Box((0.05, -0.12, 1.25), (0.12, 0.1, 0.08), Texture(54), (0.1, 0.4, 0.0)),
    ]
    step = SegmentPose((0.0, np.deg2rad(1.0), 0.0), (0.01, -0.005, 0.02))
    return SceneSpec("static-camera-motion", [Body(surfaces, step)], n_frames=2)


CATALOG = {
    "S1": _rigid_translate,
    "S2": _rigid_rotate,
    "S3": _two_body,
    "S4": _articulated,
    "S5": _static_camera_motion,
}


def standard_scenes() -> dict[str, SceneSpec]:
    """The fixed catalog keyed S1..S5; ``SceneSpec.name`` holds the descriptive name."""
    return {key: make() for key, make in CATALOG.items()}


def scene_by_name(name: str) -> SceneSpec:
    scenes = standard_scenes()
    if name in scenes:
        return scenes[name]
    for spec in scenes.values():
        if spec.name == name:
            return spec
    raise SceneError(f"unknown scene {name!r}; choose from {sorted(scenes)} or their names")
