"""Synthetic training pairs, augmentation, flow/image file IO and flow rendering.

Synthetic pairs are built from seeded procedural value-noise textures: a
moving background plus a few moving elliptical patches, each displaced by its
own affine map.  The ground-truth flow is computed analytically from those
maps (foreground occludes background), so warping image B backwards by the
flow reconstructs image A on non-occluded pixels up to interpolation error.

File formats: Middlebury ``.flo`` (magic float 202021.25, int32 width/height,
row-major interleaved little-endian float32 u,v) and binary 8-bit P6 PPM.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "FileFormatError", "SamplePair", "MotionSpec", "AffineMotion", "AugmentPolicy",
    "generate_synthetic_pair", "augment_pair", "make_translation_dataset",
    "read_flo", "write_flo", "read_image", "write_image", "flow_to_color",
    "write_manifest", "read_manifest", "load_manifest_pairs",
    "translation_matrix", "rotation_about", "sample_texture",
]

FLO_MAGIC = 202021.25


class FileFormatError(ValueError):
    """A data file failed format validation."""


# ---------------------------------------------------------------------------
# sample containers

@dataclass
class SamplePair:
    """Two images in [0,1], the flow from A to B, and optional masks."""

    image_a: np.ndarray            # (3, H, W)
    image_b: np.ndarray            # (3, H, W)
    flow: np.ndarray               # (2, H, W), pixels
    valid: np.ndarray | None = None      # (H, W) in {0, 1}
    occluded: np.ndarray | None = None   # (H, W) diagnostic, 1 = occluded

    def __post_init__(self):
        if self.image_a.shape != self.image_b.shape or self.image_a.shape[0] != 3:
            raise ValueError("SamplePair: images must share a (3, H, W) shape")
        if self.flow.shape != (2,) + self.image_a.shape[1:]:
            raise ValueError(f"SamplePair: flow shape {self.flow.shape} does not match images")
        if not np.isfinite(self.flow).all():
            raise ValueError("SamplePair: flow contains non-finite values")
        if self.valid is not None and not np.isin(self.valid, (0, 1)).all():
            raise ValueError("SamplePair: valid mask must be 0/1")

    @property
    def size(self) -> tuple[int, int]:
        return self.image_a.shape[1:]


@dataclass(frozen=True)
class AffineMotion:
    """One moving layer: p_B = linear @ p_A + shift (pixel coordinates x, y)."""

    matrix: np.ndarray  # (2, 3): [linear | shift]

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError("AffineMotion: matrix must be 2x3")
        if abs(np.linalg.det(m[:, :2])) <= 1e-3:
            raise ValueError("AffineMotion: linear part is (near) singular")
        object.__setattr__(self, "matrix", m)

    def apply(self, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m = self.matrix
        return m[0, 0] * xs + m[0, 1] * ys + m[0, 2], m[1, 0] * xs + m[1, 1] * ys + m[1, 2]

    def inverse(self) -> "AffineMotion":
        lin = np.linalg.inv(self.matrix[:, :2])
        shift = -lin @ self.matrix[:, 2]
        return AffineMotion(np.column_stack([lin, shift]))


def translation_matrix(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]])


def rotation_about(center_xy: tuple[float, float], degrees: float,
                   scale: float = 1.0) -> np.ndarray:
    """Affine 2x3 rotating (and optionally scaling) about a fixed point."""
    cx, cy = center_xy
    th = np.deg2rad(degrees)
    lin = scale * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shift = np.array([cx, cy]) - lin @ np.array([cx, cy])
    return np.column_stack([lin, shift])


@dataclass(frozen=True)
class MotionSpec:
    """Bounds for the random motions of a synthetic pair.

    ``fixed_affine`` short-circuits the sampling: every layer moves by that
    one map, which keeps the ground truth a closed-form function of the map.
    """

    max_shift: float = 6.0
    max_rotate_deg: float = 0.0
    max_scale_delta: float = 0.0
    shape_count: tuple[int, int] = (1, 3)
    background_shift: float = 2.0
    fixed_affine: np.ndarray | None = None

    @staticmethod
    def identity() -> "MotionSpec":
        return MotionSpec(fixed_affine=translation_matrix(0.0, 0.0))

    @staticmethod
    def translation(tx: float, ty: float) -> "MotionSpec":
        return MotionSpec(fixed_affine=translation_matrix(tx, ty))


# ---------------------------------------------------------------------------
# procedural textures: seeded lattice value noise, continuous everywhere

def _lattice_hash(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    h = ix.astype(np.uint32) * np.uint32(0x9E3779B1)
    h ^= iy.astype(np.uint32) * np.uint32(0x85EBCA77)
    h ^= np.uint32((salt * 0xC2B2AE3D) & 0xFFFFFFFF)
    h ^= h >> np.uint32(15)
    h = h * np.uint32(0x2C1B3C6D)
    h ^= h >> np.uint32(12)
    h = h * np.uint32(0x297A2D39)
    h ^= h >> np.uint32(15)
    return h.astype(np.float64) / 4294967296.0


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def sample_texture(xs: np.ndarray, ys: np.ndarray, salt: int,
                   octaves: int = 3, base_period: float = 24.0) -> np.ndarray:
    """Seeded value-noise octaves in [0, 1]; valid at any real coordinate."""
    total = np.zeros(np.broadcast(xs, ys).shape, dtype=np.float64)
    amp, norm = 1.0, 0.0
    for octave in range(octaves):
        freq = (2.0 ** octave) / base_period
        gx, gy = xs * freq, ys * freq
        x0 = np.floor(gx).astype(np.int64)
        y0 = np.floor(gy).astype(np.int64)
        tx = _smoothstep(gx - x0)
        ty = _smoothstep(gy - y0)
        s = salt * 1013 + octave
        v00 = _lattice_hash(x0, y0, s)
        v01 = _lattice_hash(x0 + 1, y0, s)
        v10 = _lattice_hash(x0, y0 + 1, s)
        v11 = _lattice_hash(x0 + 1, y0 + 1, s)
        total += amp * ((1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11))
        norm += amp
        amp *= 0.5
    return total / norm


def _texture_rgb(xs: np.ndarray, ys: np.ndarray, salt: int) -> np.ndarray:
    return np.stack([sample_texture(xs, ys, salt * 4 + ch) for ch in range(3)])


class _Ellipse:
    """Soft-edged elliptical mask, evaluated continuously in A coordinates."""

    def __init__(self, cx, cy, rx, ry, angle_rad, edge_px=1.5):
        self.cx, self.cy, self.rx, self.ry = cx, cy, rx, ry
        self.cos, self.sin = np.cos(angle_rad), np.sin(angle_rad)
        self.soft = edge_px / min(rx, ry)

    def __call__(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        dx, dy = xs - self.cx, ys - self.cy
        lx = (self.cos * dx + self.sin * dy) / self.rx
        ly = (-self.sin * dx + self.cos * dy) / self.ry
        rr = np.sqrt(lx * lx + ly * ly)
        return np.clip((1.0 - rr) / self.soft, 0.0, 1.0)


def generate_synthetic_pair(seed, size: int, motion: MotionSpec = MotionSpec()) -> SamplePair:
    """Render a textured pair with analytic ground-truth flow.

    Deterministic per (seed, size, motion).  A foreground layer's flow wins
    wherever its mask covers a pixel; background flow is kept under occluders
    and a separate ``occluded`` mask flags pixels whose target is covered or
    out of frame.
    """
    if size < 32:
        raise ValueError("generate_synthetic_pair: size must be >= 32")
    limit = size / 2.0
    if motion.max_shift > limit or motion.background_shift > limit:
        raise ValueError(
            f"generate_synthetic_pair: motion exceeds frame (shift bound {limit})")
    if motion.fixed_affine is not None:
        fixed = AffineMotion(np.asarray(motion.fixed_affine, dtype=np.float64))
        if np.abs(fixed.matrix[:, 2]).max() > limit:
            raise ValueError("generate_synthetic_pair: motion exceeds frame")
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")

    def sample_affine(center) -> AffineMotion:
        if motion.fixed_affine is not None:
            return fixed
        s = 1.0 + rng.uniform(-motion.max_scale_delta, motion.max_scale_delta)
        deg = rng.uniform(-motion.max_rotate_deg, motion.max_rotate_deg)
        tx, ty = rng.uniform(-motion.max_shift, motion.max_shift, size=2)
        m = rotation_about(center, deg, scale=s)
        m[:, 2] += (tx, ty)
        return AffineMotion(m)

    # background layer
    if motion.fixed_affine is not None:
        bg_motion = fixed
    else:
        bx, by = rng.uniform(-motion.background_shift, motion.background_shift, size=2)
        bg_motion = AffineMotion(translation_matrix(bx, by))
    bg_salt = int(rng.integers(2 ** 31))

    # foreground layers (later entries render on top)
    n_shapes = int(rng.integers(motion.shape_count[0], motion.shape_count[1] + 1))
    shapes = []
    for _ in range(n_shapes):
        cx, cy = rng.uniform(0.25 * size, 0.75 * size, size=2)
        rx, ry = rng.uniform(0.10 * size, 0.22 * size, size=2)
        angle = rng.uniform(0.0, np.pi)
        salt = int(rng.integers(2 ** 31))
        shapes.append((_Ellipse(cx, cy, rx, ry, angle), sample_affine((cx, cy)), salt))

    # layer ownership and analytic flow in frame A
    owner = np.zeros((size, size), dtype=np.int64)  # 0 = background
    for idx, (mask_fn, _, _) in enumerate(shapes, start=1):
        owner = np.where(mask_fn(xs, ys) >= 0.5, idx, owner)
    motions = [bg_motion] + [m for _, m, _ in shapes]
    flow = np.zeros((2, size, size), dtype=np.float64)
    target_x = np.zeros_like(xs)
    target_y = np.zeros_like(ys)
    for idx, m in enumerate(motions):
        bx_, by_ = m.apply(xs, ys)
        sel = owner == idx
        flow[0][sel] = (bx_ - xs)[sel]
        flow[1][sel] = (by_ - ys)[sel]
        target_x[sel] = bx_[sel]
        target_y[sel] = by_[sel]

    # frame A: blend textures by mask
    image_a = _texture_rgb(xs, ys, bg_salt)
    for mask_fn, _, salt in shapes:
        alpha = mask_fn(xs, ys)[None]
        image_a = alpha * _texture_rgb(xs, ys, salt) + (1.0 - alpha) * image_a

    # frame B: every layer sampled through its inverse map
    inv_bg = bg_motion.inverse()
    sx, sy = inv_bg.apply(xs, ys)
    image_b = _texture_rgb(sx, sy, bg_salt)
    for mask_fn, m, salt in shapes:
        sx, sy = m.inverse().apply(xs, ys)
        alpha = mask_fn(sx, sy)[None]
        image_b = alpha * _texture_rgb(sx, sy, salt) + (1.0 - alpha) * image_b

    # occlusion diagnostic: which layer is visible in B at each A-pixel's target
    visible = np.zeros((size, size), dtype=np.int64)
    for idx, (mask_fn, m, _) in enumerate(shapes, start=1):
        sx, sy = m.inverse().apply(target_x, target_y)
        visible = np.where(mask_fn(sx, sy) >= 0.5, idx, visible)
    out_of_frame = ((target_x < 0) | (target_x > size - 1) |
                    (target_y < 0) | (target_y > size - 1))
    occluded = ((visible != owner) | out_of_frame).astype(np.float64)

    return SamplePair(image_a=image_a, image_b=image_b,
                      flow=flow.astype(np.float32),
                      valid=np.ones((size, size), dtype=np.float64),
                      occluded=occluded)


def make_translation_dataset(count: int, size: int, max_shift: float,
                             seed: int = 0) -> list[SamplePair]:
    """Pairs whose layers all share one random global translation per pair."""
    pairs = []
    for i in range(count):
        rng = np.random.default_rng((seed, i))
        tx, ty = rng.uniform(-max_shift, max_shift, size=2)
        pairs.append(generate_synthetic_pair(
            (seed, i, 1), size, MotionSpec.translation(tx, ty)))
    return pairs


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentPolicy:
    """Ranges for the random online transforms applied during training."""

    scale_range: tuple[float, float] = (0.9, 1.1)
    max_rotate_deg: float = 10.0
    max_translate_frac: float = 0.05
    noise_sigma_range: tuple[float, float] = (0.0, 0.04)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    color_range: tuple[float, float] = (0.9, 1.1)
    gamma_range: tuple[float, float] = (0.8, 1.2)
    max_brightness: float = 0.1

    @staticmethod
    def identity() -> "AugmentPolicy":
        return AugmentPolicy(scale_range=(1.0, 1.0), max_rotate_deg=0.0,
                             max_translate_frac=0.0, noise_sigma_range=(0.0, 0.0),
                             contrast_range=(1.0, 1.0), color_range=(1.0, 1.0),
                             gamma_range=(1.0, 1.0), max_brightness=0.0)


def _sample_bilinear(planes: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup of (C, H, W) planes at real coordinates; zero outside."""
    _, h, w = planes.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx, fy = xs - x0, ys - y0
    out = np.zeros((planes.shape[0],) + xs.shape, dtype=planes.dtype)
    for yi, xi, wgt in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
                        (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx)):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc, xc = np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)
        out += np.where(valid[None], planes[:, yc, xc], 0.0) * wgt[None]
    return out


def augment_pair(pair: SamplePair, seed, policy: AugmentPolicy) -> SamplePair:
    """Random geometric + photometric transforms, deterministic per seed.

    The geometric transform is applied identically to both frames and folded
    into the flow (vectors are resampled and multiplied by the linear part);
    photometric transforms are drawn independently per image.  Pixels whose
    source sample leaves the frame are marked invalid.
    """
    rng = np.random.default_rng(seed)
    h, w = pair.size
    s = float(rng.uniform(*policy.scale_range))
    if s <= 0:
        raise ValueError("augment_pair: degenerate scale <= 0")
    deg = float(rng.uniform(-policy.max_rotate_deg, policy.max_rotate_deg))
    t = rng.uniform(-policy.max_translate_frac, policy.max_translate_frac, size=2) * (w, h)

    image_a, image_b = pair.image_a, pair.image_b
    flow = pair.flow.astype(np.float64)
    valid = pair.valid if pair.valid is not None else np.ones((h, w))
    occluded = pair.occluded

    if s != 1.0 or deg != 0.0 or t[0] != 0.0 or t[1] != 0.0:
        center = ((w - 1) / 2.0, (h - 1) / 2.0)
        m = rotation_about(center, deg, scale=s)
        m[:, 2] += t
        fwd = AffineMotion(m)
        inv = fwd.inverse()
        ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        sx, sy = inv.apply(xs, ys)
        in_frame = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
        image_a = _sample_bilinear(image_a, sx, sy)
        image_b = _sample_bilinear(image_b, sx, sy)
        moved = _sample_bilinear(flow, sx, sy)
        lin = fwd.matrix[:, :2]
        flow = np.stack([lin[0, 0] * moved[0] + lin[0, 1] * moved[1],
                         lin[1, 0] * moved[0] + lin[1, 1] * moved[1]])
        valid = ((_sample_bilinear(valid[None], sx, sy)[0] >= 0.999) & in_frame).astype(np.float64)
        if occluded is not None:
            occluded = (_sample_bilinear(occluded[None], sx, sy)[0] >= 0.5).astype(np.float64)

    def photometric(img: np.ndarray) -> np.ndarray:
        out = img.copy()
        sigma = float(rng.uniform(*policy.noise_sigma_range))
        if sigma > 0:
            out = out + rng.normal(0.0, sigma, size=out.shape)
        contrast = float(rng.uniform(*policy.contrast_range))
        if contrast != 1.0:
            out = 0.5 + (out - 0.5) * contrast
        color = rng.uniform(*policy.color_range, size=3)
        if np.any(color != 1.0):
            out = out * color[:, None, None]
        gamma = float(rng.uniform(*policy.gamma_range))
        if gamma != 1.0:
            out = np.clip(out, 0.0, None) ** gamma
        bright = float(rng.uniform(-policy.max_brightness, policy.max_brightness))
        if bright != 0.0:
            out = out + bright
        return np.clip(out, 0.0, 1.0)

    return SamplePair(image_a=photometric(image_a), image_b=photometric(image_b),
                      flow=flow.astype(np.float32), valid=valid, occluded=occluded)


# ---------------------------------------------------------------------------
# .flo files

def read_flo(path) -> np.ndarray:
    """Read a Middlebury flow file into a (2, H, W) float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or np.frombuffer(raw, "<f4", count=1)[0] != np.float32(FLO_MAGIC):
        raise FileFormatError(f"{path}: not a flow file")
    w, h = (int(x) for x in np.frombuffer(raw, "<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise FileFormatError(f"{path}: not a flow file (bad dimensions {w}x{h})")
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise FileFormatError(
            f"{path}: corrupt flow file: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, "<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return np.ascontiguousarray(data.transpose(2, 0, 1)).astype(np.float32)


def write_flo(path, flow: np.ndarray) -> None:
    """Write a (2, H, W) flow as a Middlebury file; round-trips bit-exactly."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"write_flo: expected (2, H, W) flow, got {flow.shape}")
    if not np.isfinite(flow).all():
        raise ValueError("write_flo: flow contains non-finite values")
    _, h, w = flow.shape
    header = np.array([FLO_MAGIC], dtype="<f4").tobytes() + np.array([w, h], dtype="<i4").tobytes()
    body = np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


# ---------------------------------------------------------------------------
# P6 PPM images

def read_image(path) -> np.ndarray:
    """Read a binary 8-bit P6 PPM into a (3, H, W) array in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise FileFormatError(f"{path}: malformed PPM at byte 0: expected magic 'P6'")
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise FileFormatError(f"{path}: malformed PPM at byte {pos}: expected an integer")
        values.append((int(raw[start:pos]), start))
    (w, _), (h, _), (maxval, mv_pos) = values
    if w <= 0 or h <= 0:
        raise FileFormatError(f"{path}: malformed PPM at byte {values[0][1]}: bad dimensions")
    if maxval != 255:
        raise FileFormatError(f"{path}: malformed PPM at byte {mv_pos}: only maxval 255 supported")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FileFormatError(f"{path}: malformed PPM at byte {pos}: expected whitespace "
                              f"before pixel data")
    pos += 1
    body = raw[pos:]
    if len(body) != 3 * w * h:
        raise FileFormatError(
            f"{path}: corrupt PPM payload: expected {3 * w * h} bytes, found {len(body)}")
    arr = np.frombuffer(body, np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def write_image(path, image: np.ndarray) -> None:
    """Write a (3, H, W) array in [0, 1] as binary P6 PPM (values * 255, rounded)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_image: expected (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    bytes8 = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() +
                           bytes8.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# flow rendering

def flow_to_color(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Direction-as-hue, magnitude-as-saturation rendering of a flow field.

    Hue follows atan2(v, u) around the colour circle; saturation is
    min(1, |flow| / max_magnitude) with the 99th-percentile magnitude as the
    default normaliser; value is 1, so zero flow renders white.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow_to_color: expected (2, H, W) flow, got {flow.shape}")
    if not np.isfinite(flow).all():
        raise ValueError("flow_to_color: flow contains non-finite values")
    u, v = flow
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(np.percentile(mag, 99.0))
    hue = (np.arctan2(v, u) / (2.0 * np.pi)) % 1.0
    sat = np.clip(mag / max(max_magnitude, 1e-12), 0.0, 1.0)
    val = np.ones_like(sat)
    i = np.floor(hue * 6.0).astype(np.int64) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p = val * (1.0 - sat)
    q = val * (1.0 - f * sat)
    t = val * (1.0 - (1.0 - f) * sat)
    r = np.choose(i, [val, q, p, p, t, val])
    g = np.choose(i, [t, val, val, q, p, p])
    b = np.choose(i, [p, p, t, val, val, q])
    return np.stack([r, g, b])


# ---------------------------------------------------------------------------
# dataset manifests: one tab-separated (imageA, imageB, flo) triple per line

def write_manifest(path, triples) -> None:
    lines = []
    for a, b, f in triples:
        lines.append(f"{a}\t{b}\t{f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[tuple[str, str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FileFormatError(
                f"{path}:{lineno}: expected 3 tab-separated paths, found {len(parts)}")
        out.append((parts[0], parts[1], parts[2]))
    return out


def load_manifest_pairs(path) -> list[SamplePair]:
    """Load every (imageA, imageB, flow) triple; paths resolve relative to the manifest."""
    base = Path(path).parent
    pairs = []
    for a, b, f in read_manifest(path):
        pairs.append(SamplePair(
            image_a=read_image(base / a),
            image_b=read_image(base / b),
            flow=read_flo(base / f)))
    return pairs
