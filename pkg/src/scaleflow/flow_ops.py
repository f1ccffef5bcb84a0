"""Flow-specific differentiable operators: correlation, warping and losses.

Flow fields are ``(batch, 2, H, W)`` tensors with channel 0 the horizontal
displacement u (positive right) and channel 1 the vertical displacement v
(positive down), in pixels at the field's own resolution.

Correlation volumes are ``(batch, (2d+1)^2, H, W)`` tensors; channel c encodes
the displacement (dy, dx) = (c // (2d+1) - d, c % (2d+1) - d), so the centre
channel d*(2d+1)+d holds the zero-displacement similarity.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, mul, record_op, scale, sub, sum_all

__all__ = [
    "correlation", "bilinear_warp", "upsample_bilinear",
    "channel_norm", "l2_normalize_channels",
    "epe_loss", "reconstruction_loss", "total_loss",
    "displacement_of_channel", "channel_of_displacement",
]

LOSS_EPS = 1e-8


def displacement_of_channel(c: int, d: int) -> tuple[int, int]:
    """(dy, dx) encoded by channel ``c`` of a correlation volume with radius d."""
    side = 2 * d + 1
    return c // side - d, c % side - d


def channel_of_displacement(dy: int, dx: int, d: int) -> int:
    return (dy + d) * (2 * d + 1) + (dx + d)


def _shift(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[..., y, x] = arr[..., y+dy, x+dx], zero where out of bounds."""
    out = np.zeros_like(arr)
    h, w = arr.shape[-2:]
    y0, y1 = max(0, -dy), min(h, h - dy)
    x0, x1 = max(0, -dx), min(w, w - dx)
    if y0 < y1 and x0 < x1:
        out[..., y0:y1, x0:x1] = arr[..., y0 + dy:y1 + dy, x0 + dx:x1 + dx]
    return out


def _boxsum(arr: np.ndarray, k: int) -> np.ndarray:
    """Sum over the (2k+1)^2 window centred at each pixel, zero padded."""
    out = np.zeros_like(arr)
    for oy in range(-k, k + 1):
        for ox in range(-k, k + 1):
            out += _shift(arr, oy, ox)
    return out


def correlation(feat_a: Tensor, feat_b: Tensor, max_displacement: int,
                patch_radius: int = 0) -> Tensor:
    """Patch-similarity volume between two feature maps.

    output[b, c(dy,dx), i, j] is the dot product between the (2k+1)^2 patch of
    feature vectors around (i, j) in A and the patch around (i+dy, j+dx) in B,
    normalised by channels * (2k+1)^2.  Samples falling outside either map
    contribute zero.  Differentiable with respect to both inputs.
    """
    if feat_a.data.shape != feat_b.data.shape:
        raise ValueError(
            f"correlation: feature shapes differ, {feat_a.data.shape} vs {feat_b.data.shape}")
    d, k = int(max_displacement), int(patch_radius)
    if d < 0 or k < 0:
        raise ValueError("correlation: max_displacement and patch_radius must be >= 0")
    a, bdat = feat_a.data, feat_b.data
    b, c, h, w = a.shape
    side = 2 * d + 1
    norm = 1.0 / (c * (2 * k + 1) ** 2)
    out = np.empty((b, side * side, h, w), dtype=a.dtype)
    for ci in range(side * side):
        dy, dx = displacement_of_channel(ci, d)
        prod = (a * _shift(bdat, dy, dx)).sum(axis=1)
        out[:, ci] = (_boxsum(prod, k) if k else prod) * norm

    def backward(g):
        ga = np.zeros_like(a)
        gb = np.zeros_like(bdat)
        for ci in range(side * side):
            dy, dx = displacement_of_channel(ci, d)
            gc = g[:, ci] * norm
            if k:
                gc = _boxsum(gc, k)
            ga += gc[:, None] * _shift(bdat, dy, dx)
            gb += _shift(a * gc[:, None], -dy, -dx)
        return (ga, gb)

    return record_op(out, (feat_a, feat_b), backward)


def bilinear_warp(image: Tensor, flow: Tensor) -> Tensor:
    """Sample ``image`` at (x + u, y + v) with bilinear tent weights.

    output(y, x) = sum_{m,n} image(m, n) * max(0, 1-|y+v-m|) * max(0, 1-|x+u-n|);
    samples outside the image contribute zero.  Differentiable with respect to
    the image and the flow.
    """
    img, fl = image.data, flow.data
    if img.ndim != 4 or fl.ndim != 4 or fl.shape[1] != 2:
        raise ValueError("bilinear_warp: image must be (B,C,H,W) and flow (B,2,H,W)")
    b, c, h, w = img.shape
    if fl.shape[0] != b or fl.shape[2:] != (h, w):
        raise ValueError(f"bilinear_warp: flow shape {fl.shape} does not match image {img.shape}")
    if not np.isfinite(fl).all():
        raise ValueError("bilinear_warp: flow contains non-finite values")
    dt = img.dtype
    grid_y, grid_x = np.meshgrid(np.arange(h, dtype=dt), np.arange(w, dtype=dt), indexing="ij")
    xs = grid_x[None] + fl[:, 0]
    ys = grid_y[None] + fl[:, 1]
    x0f = np.floor(xs)
    y0f = np.floor(ys)
    fx = (xs - x0f).astype(dt)
    fy = (ys - y0f).astype(dt)
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    bi = np.arange(b)[:, None, None]

    corners = []
    for yi, xi, wgt in (
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx),
        (y0 + 1, x0, fy * (1.0 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        vals = img[bi, :, yc, xc].transpose(0, 3, 1, 2)  # gather gives (B,H,W,C)
        vals = np.where(valid[:, None], vals, dt.type(0))
        corners.append((yc, xc, valid, wgt, vals))

    out = np.zeros_like(img)
    for _, _, _, wgt, vals in corners:
        out += wgt[:, None] * vals

    def backward(g):
        gimg = np.zeros_like(img)
        bi4 = np.arange(b)[:, None, None, None]
        ci4 = np.arange(c)[None, :, None, None]
        for yc, xc, valid, wgt, _ in corners:
            contrib = g * (wgt * valid)[:, None]
            np.add.at(gimg, (bi4, ci4, yc[:, None], xc[:, None]), contrib)
        (_, _, _, _, v00), (_, _, _, _, v01), (_, _, _, _, v10), (_, _, _, _, v11) = corners
        dxs = (1.0 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
        dys = (1.0 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
        gu = (g * dxs).sum(axis=1)
        gv = (g * dys).sum(axis=1)
        return (gimg, np.stack([gu, gv], axis=1))

    return record_op(out, (image, flow), backward)


def upsample_bilinear(x: Tensor, factor: int, value_scale: float = 1.0) -> Tensor:
    """Bilinear upsampling by an integer factor (half-pixel centres, clamped edges).

    ``value_scale`` multiplies the interpolated values; pass the factor itself
    when upsampling a flow field so displacements stay in output pixels.
    """
    if factor < 1:
        raise ValueError("upsample_bilinear: factor must be >= 1")
    b, c, h, w = x.data.shape
    oh, ow = h * factor, w * factor
    dt = x.data.dtype

    def axis_coords(n_out, n_in):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        frac = (src - i0).astype(dt)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, frac

    y0, y1, fy = axis_coords(oh, h)
    x0, x1, fx = axis_coords(ow, w)
    vs = dt.type(value_scale)

    top = x.data[:, :, y0, :]
    bot = x.data[:, :, y1, :]
    rows = top * (1.0 - fy)[None, None, :, None] + bot * fy[None, None, :, None]
    out = (rows[:, :, :, x0] * (1.0 - fx) + rows[:, :, :, x1] * fx) * vs

    def backward(g):
        g = g * vs
        gcolsT = np.zeros((w, b, c, oh), dtype=g.dtype)
        np.add.at(gcolsT, x0, (g * (1.0 - fx)).transpose(3, 0, 1, 2))
        np.add.at(gcolsT, x1, (g * fx).transpose(3, 0, 1, 2))
        grows = gcolsT.transpose(1, 2, 3, 0)  # (b, c, oh, w)
        gxT = np.zeros((h, b, c, w), dtype=g.dtype)
        np.add.at(gxT, y0, (grows * (1.0 - fy)[None, None, :, None]).transpose(2, 0, 1, 3))
        np.add.at(gxT, y1, (grows * fy[None, None, :, None]).transpose(2, 0, 1, 3))
        return (gxT.transpose(1, 2, 0, 3),)

    return record_op(np.ascontiguousarray(out), (x,), backward)


def channel_norm(x: Tensor, eps: float = LOSS_EPS) -> Tensor:
    """Per-pixel Euclidean norm over channels, eps-regularised inside the root."""
    s = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)

    def backward(g):
        return (g * x.data / s,)

    return record_op(s.astype(x.data.dtype), (x,), backward)


def l2_normalize_channels(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each pixel's channel vector to (nearly) unit Euclidean length."""
    r = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
    y = x.data / r

    def backward(g):
        dot = (g * x.data).sum(axis=1, keepdims=True)
        return (g / r - x.data * dot / (r * r * r),)

    return record_op(y, (x,), backward)


def epe_loss(pred: Tensor, gt: Tensor, mask: Tensor | None = None,
             eps: float = LOSS_EPS) -> Tensor:
    """Endpoint error summed over pixels: sum of sqrt((du)^2 + (dv)^2 + eps).

    This is the training loss form (a sum, not a mean); the eps keeps the
    gradient bounded at zero residual.
    """
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"epe_loss: shapes differ, {pred.data.shape} vs {gt.data.shape}")
    if pred.data.shape[1] != 2:
        raise ValueError("epe_loss: flow fields need exactly 2 channels")
    per_pixel = channel_norm(sub(pred, gt), eps)
    if mask is not None:
        if mask.data.shape != per_pixel.data.shape:
            raise ValueError(
                f"epe_loss: mask shape {mask.data.shape} does not match {per_pixel.data.shape}")
        per_pixel = mul(per_pixel, mask)
    return sum_all(per_pixel)


def reconstruction_loss(feat_a: Tensor, feat_b: Tensor, flow: Tensor,
                        eps: float = LOSS_EPS) -> Tensor:
    """Brightness-constancy loss on feature maps.

    Warps ``feat_b`` by ``flow`` and sums, over pixels, the per-pixel channel
    norm of (feat_a - warped).  The flow must live at the feature resolution.
    """
    if feat_a.data.shape != feat_b.data.shape:
        raise ValueError(
            f"reconstruction_loss: feature shapes differ, {feat_a.data.shape} vs {feat_b.data.shape}")
    if flow.data.shape[2:] != feat_a.data.shape[2:] or flow.data.shape[0] != feat_a.data.shape[0]:
        raise ValueError(
            f"reconstruction_loss: flow at {flow.data.shape} does not match features "
            f"at {feat_a.data.shape} (resolution mismatch)")
    warped = bilinear_warp(feat_b, flow)
    return sum_all(channel_norm(sub(feat_a, warped), eps))


def total_loss(pred: Tensor, gt: Tensor, feat_a: Tensor, feat_b: Tensor,
               balance: float = 0.005, mask: Tensor | None = None,
               eps: float = LOSS_EPS) -> Tensor:
    """Supervised endpoint loss plus ``balance`` times the reconstruction loss.

    balance == 0 returns the supervised term alone (no warp is evaluated).
    """
    if balance < 0:
        raise ValueError("total_loss: balance must be >= 0")
    supervised = epe_loss(pred, gt, mask, eps)
    if balance == 0.0:
        return supervised
    rec = reconstruction_loss(feat_a, feat_b, pred, eps)
    return add(supervised, scale(rec, balance))
