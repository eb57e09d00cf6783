"""Dataset ingestion, flow files, Middlebury visualization and end-point error."""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, FormatError, PairingError, UndefinedMeanError
from .frames import RgbdFrame, preprocess
from .geometry import CameraIntrinsics

logger = logging.getLogger(__name__)

FLO_MAGIC = b"PIEH"
SF3D_MAGIC = b"SF3D"
UNKNOWN_FLOW = 1e10  # written for invalid pixels
UNKNOWN_THRESH = 1e9  # anything larger reads back as invalid


# ---------------------------------------------------------------------------
# intrinsics


@dataclass(frozen=True)
class IntrinsicsFile:
    camera: CameraIntrinsics
    depth_scale: float = 5000.0

    def __post_init__(self):
        if not self.depth_scale > 0:
            raise FormatError(f"depth_scale must be > 0, got {self.depth_scale}")


_INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "depth_scale")


def read_intrinsics(path) -> IntrinsicsFile:
    """Parse ``key = value`` (or ``key: value``) lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"(\w+)\s*[=:]\s*(\S+)", line)
        if not m:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = m.group(1), m.group(2)
        if key not in _INTRINSIC_KEYS:
            raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = float(val)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: {key} is not a number: {val!r}") from None
    missing = [k for k in _INTRINSIC_KEYS if k not in values and k != "depth_scale"]
    if missing:
        raise FormatError(f"{path}: missing keys {missing}")
    for k in ("width", "height"):
        if values[k] != int(values[k]):
            raise FormatError(f"{path}: {k} must be an integer")
    try:
        cam = CameraIntrinsics(
            values["fx"], values["fy"], values["cx"], values["cy"], int(values["width"]), int(values["height"])
        )
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    return IntrinsicsFile(cam, values.get("depth_scale", 5000.0))


def write_intrinsics(path, intr: IntrinsicsFile) -> None:
    K = intr.camera
    lines = [
        f"fx = {K.fx!r}",
        f"fy = {K.fy!r}",
        f"cx = {K.cx!r}",
        f"cy = {K.cy!r}",
        f"width = {K.width}",
        f"height = {K.height}",
        f"depth_scale = {intr.depth_scale!r}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# RGB-D sequences


_FRAME_RE = re.compile(r"(color|depth)(\d+)\.png$")


def _index_files(directory: Path) -> dict[int, dict[str, Path]]:
    found: dict[int, dict[str, Path]] = {}
    for p in sorted(directory.iterdir()):
        m = _FRAME_RE.fullmatch(p.name)
        if m:
            found.setdefault(int(m.group(2)), {})[m.group(1)] = p
    return found


def list_frames(directory) -> list[int]:
    """Sorted frame indices of a sequence directory; every index must be complete."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    found = _index_files(directory)
    for idx, kinds in sorted(found.items()):
        for need in ("color", "depth"):
            if need not in kinds:
                other = next(iter(kinds.values())).name
                raise PairingError(f"frame {idx}: {other} has no {need} counterpart in {directory}")
    if not found:
        raise DataError(f"no colorNNNN.png / depthNNNN.png files in {directory}")
    return sorted(found)


def read_depth_png(path, depth_scale: float) -> np.ndarray:
    raw = np.asarray(Image.open(path))
    if raw.ndim != 2:
        raise FormatError(f"{path}: depth must be single-channel")
    return raw.astype(float) / depth_scale


def write_depth_png(path, depth: np.ndarray, depth_scale: float) -> None:
    raw = np.rint(np.where(np.isfinite(depth) & (depth > 0), depth, 0.0) * depth_scale)
    if raw.max(initial=0) > 65535:
        raise DataError(f"depth {depth.max():.3f} m exceeds the 16-bit range at depth_scale {depth_scale}")
    Image.fromarray(raw.astype(np.uint16)).save(path)


def read_color_png(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode in ("I;16", "I;16B", "I;16L"):
        return np.asarray(img).astype(np.uint16)
    if img.mode == "I":
        return np.asarray(img).astype(np.int64).clip(0, 65535).astype(np.uint16)
    if img.mode not in ("L", "RGB", "RGBA"):
        img = img.convert("RGB")
    return np.asarray(img)


def write_gray16_png(path, lum: np.ndarray) -> None:
    """Luminance in [0, 1] as a 16-bit grayscale PNG."""
    Image.fromarray(np.rint(np.clip(lum, 0.0, 1.0) * 65535).astype(np.uint16)).save(path)


def load_raw_sequence(directory, intr: IntrinsicsFile, start: int = 0, count: int | None = None):
    """``[(color, depth_m), ...]`` for the selected frames of a sequence directory."""
    directory = Path(directory)
    indices = list_frames(directory)
    sel = indices[start : None if count is None else start + count]
    if count is not None and len(sel) < count:
        raise DataError(f"{directory}: need {count} frames from position {start}, found {len(sel)}")
    out = []
    shape = intr.camera.shape
    for idx in sel:
        color = read_color_png(directory / f"color{idx:04d}.png")
        depth = read_depth_png(directory / f"depth{idx:04d}.png", intr.depth_scale)
        if depth.shape != shape or color.shape[:2] != shape:
            raise DataError(
                f"frame {idx}: color {color.shape[:2]} / depth {depth.shape} do not match intrinsics {shape}"
            )
        out.append((color, depth))
    return out, sel


def load_sequence(directory, intrinsics, sigma: float = 1.0, start: int = 0, count: int | None = None) -> list[RgbdFrame]:
    """Load paired ``colorNNNN.png`` / ``depthNNNN.png`` frames in index order.

    Args:
        directory: sequence directory.
        intrinsics: ``IntrinsicsFile`` or a path to one.
        sigma: intensity smoothing applied by ``preprocess``.
        start, count: select a contiguous run of frames (by sorted position).
    """
    intr = intrinsics if isinstance(intrinsics, IntrinsicsFile) else read_intrinsics(intrinsics)
    raw, indices = load_raw_sequence(directory, intr, start, count)
    frames = preprocess(raw, sigma)
    for f, idx in zip(frames, indices):
        f.index = idx
    return frames


def write_sequence(directory, intensities, depths, intr: IntrinsicsFile, first_index: int = 1) -> list[int]:
    """Write luminance/depth rasters as ``colorNNNN.png`` (16-bit gray) / ``depthNNNN.png``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    idx = []
    for i, (lum, depth) in enumerate(zip(intensities, depths)):
        n = first_index + i
        write_gray16_png(directory / f"color{n:04d}.png", lum)
        write_depth_png(directory / f"depth{n:04d}.png", depth, intr.depth_scale)
        idx.append(n)
    write_intrinsics(directory / "intrinsics.txt", intr)
    return idx


# ---------------------------------------------------------------------------
# labels


def write_label_png(path, labels: np.ndarray) -> None:
    """Segment ids as 16-bit PNG storing ``label + 1`` (0 = discarded)."""
    labels = np.asarray(labels)
    if labels.max(initial=-1) >= 65535:
        raise DataError("too many labels for a 16-bit image")
    Image.fromarray((labels.astype(np.int64) + 1).clip(0).astype(np.uint16)).save(path)


def read_label_png(path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.int32) - 1


# ---------------------------------------------------------------------------
# 2D flow (.flo)


def write_flow_2d(path, flow: np.ndarray) -> None:
    """Standard ``.flo``: magic, int32 width, int32 height, float32 (u, v) rows.

    Non-finite vectors are written as the unknown-flow marker.
    """
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DataError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    data = flow.astype("<f4")
    bad = ~np.all(np.isfinite(data), axis=2)
    if bad.any():
        data = data.copy()
        data[bad] = UNKNOWN_FLOW
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(data.tobytes())


def read_flow_2d(path) -> np.ndarray:
    """(H, W, 2) float32 exactly as stored (unknown vectors keep their marker values)."""
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: not a .flo file (bad magic)")
    w, h = struct.unpack("<ii", buf[4:12])
    if w < 0 or h < 0:
        raise FormatError(f"{path}: negative dimensions {w}x{h}")
    need = 12 + w * h * 8
    if len(buf) != need:
        raise FormatError(f"{path}: payload is {len(buf) - 12} bytes, header implies {need - 12}")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


def flow_valid(flow: np.ndarray) -> np.ndarray:
    """Known vectors: finite and not above the unknown-flow threshold."""
    flow = np.asarray(flow)
    with np.errstate(invalid="ignore"):
        return np.all(np.isfinite(flow), axis=-1) & np.all(np.abs(flow) <= UNKNOWN_THRESH, axis=-1)


# ---------------------------------------------------------------------------
# 3D flow (SF3D)


def write_flow_3d(path, displacement: np.ndarray, valid: np.ndarray) -> None:
    """``SF3D`` container: magic, int32 width, height, n_frames, then per frame
    row-major float32 (dx, dy, dz) followed by a uint8 validity plane."""
    disp = np.asarray(displacement)
    if disp.ndim == 3:
        disp = disp[None]
    n, h, w, c = disp.shape
    if c != 3:
        raise DataError(f"displacement must be (F, H, W, 3), got {disp.shape}")
    valid = np.asarray(valid, dtype=bool)
    if valid.shape == (h, w):
        valid = np.broadcast_to(valid, (n, h, w))
    if valid.shape != (n, h, w):
        raise DataError(f"validity {valid.shape} does not match displacement {disp.shape}")
    with open(path, "wb") as fh:
        fh.write(SF3D_MAGIC)
        fh.write(struct.pack("<iii", w, h, n))
        for i in range(n):
            d = np.where(valid[i][..., None], disp[i], 0.0).astype("<f4")
            fh.write(d.tobytes())
            fh.write(valid[i].astype(np.uint8).tobytes())


def read_flow_3d(path) -> tuple[np.ndarray, np.ndarray]:
    """``(displacement (F, H, W, 3) float32, valid (F, H, W) bool)``."""
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != SF3D_MAGIC:
        raise FormatError(f"{path}: not an SF3D file (bad magic)")
    w, h, n = struct.unpack("<iii", buf[4:16])
    if min(w, h, n) < 0:
        raise FormatError(f"{path}: negative header field")
    per = w * h * 12 + w * h
    if len(buf) != 16 + n * per:
        raise FormatError(f"{path}: payload is {len(buf) - 16} bytes, header implies {n * per}")
    disp = np.empty((n, h, w, 3), dtype=np.float32)
    valid = np.empty((n, h, w), dtype=bool)
    pos = 16
    for i in range(n):
        disp[i] = np.frombuffer(buf, dtype="<f4", count=w * h * 3, offset=pos).reshape(h, w, 3)
        pos += w * h * 12
        v = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
        if np.any(v > 1):
            raise FormatError(f"{path}: validity plane {i} holds values other than 0/1")
        valid[i] = v.astype(bool)
        pos += w * h
    return disp, valid


# ---------------------------------------------------------------------------
# Middlebury color coding


def make_colorwheel() -> np.ndarray:
    """(55, 3) color wheel of the Middlebury flow benchmark code, values in [0, 255]."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0
    wheel[col : col + RY, 0] = 255
    wheel[col : col + RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col : col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col : col + YG, 1] = 255
    col += YG
    wheel[col : col + GC, 1] = 255
    wheel[col : col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col : col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col : col + CB, 2] = 255
    col += CB
    wheel[col : col + BM, 2] = 255
    wheel[col : col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col : col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col : col + MR, 0] = 255
    return wheel


def colorize_flow(flow: np.ndarray, max_flow: float | None = None, valid: np.ndarray | None = None) -> np.ndarray:
    """Middlebury color code of a (H, W, 2) flow as (H, W, 3) uint8.

    Hue follows the flow direction over the 55-bin wheel and saturation the
    magnitude divided by ``max_flow`` (default: the largest valid magnitude).
    Zero flow is white, invalid pixels black, and magnitudes beyond the
    normalizer are darkened.
    """
    flow = np.asarray(flow, dtype=float)
    ok = flow_valid(flow)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    u = np.where(ok, flow[..., 0], 0.0)
    v = np.where(ok, flow[..., 1], 0.0)
    mag = np.hypot(u, v)
    if max_flow is None:
        max_flow = float(mag[ok].max()) if ok.any() else 0.0
    if max_flow <= 0:
        max_flow = 1.0
    rad = mag / max_flow
    wheel = make_colorwheel()
    ncols = len(wheel)
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.zeros(flow.shape[:2] + (3,), dtype=np.uint8)
    for c in range(3):
        col = ((1 - f) * wheel[k0, c] + f * wheel[k1, c]) / 255.0
        inside = rad <= 1
        col = np.where(inside, 1 - rad * (1 - col), col * 0.75)
        img[..., c] = np.where(ok, np.floor(255 * col), 0).astype(np.uint8)
    return img


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img)).save(path)


# ---------------------------------------------------------------------------
# evaluation


def compute_epe(flow: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean and per-pixel end-point error over pixels valid in both fields.

    Returns:
        ``(mean, epe_map)`` with NaN in the map outside the joint validity.
    """
    flow = np.asarray(flow, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if flow.shape != gt.shape or flow.ndim != 3 or flow.shape[2] != 2:
        raise DataError(f"flow {flow.shape} and ground truth {gt.shape} must both be (H, W, 2)")
    ok = flow_valid(flow) & flow_valid(gt)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    if not ok.any():
        raise UndefinedMeanError("no pixel is valid in both flow fields")
    epe = np.full(flow.shape[:2], np.nan)
    d = np.where(ok[..., None], flow - gt, 0.0)
    epe[ok] = np.hypot(d[..., 0], d[..., 1])[ok]
    return float(epe[ok].mean()), epe
