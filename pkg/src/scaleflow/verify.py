"""Finite-difference verification suites for every differentiable operator.

Each entry builds a small scalar-valued function around one operator and
compares reverse-mode gradients against central differences at float64.
Random inputs are seeded and chosen to stay away from the few genuine kinks
(integer warp coordinates, tied pool maxima), so the comparison is meaningful.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, gradient_check
from .flow_ops import (bilinear_warp, channel_norm, correlation, epe_loss,
                       l2_normalize_channels, reconstruction_loss, total_loss,
                       upsample_bilinear)
from .model import ModelConfig, forward, init_model_params, spatial_conv_gru

__all__ = ["gradient_suite", "suite_thresholds", "END_TO_END_KEY",
           "OP_TOLERANCE", "END_TO_END_TOLERANCE"]

END_TO_END_KEY = "end_to_end_total_loss"
OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


def suite_thresholds() -> dict[str, float]:
    """Pass/fail threshold per suite entry."""
    names = [
        "conv2d", "transposed_conv2d", "maxpool", "sigmoid", "tanh", "leaky_relu",
        "correlation", "bilinear_warp_image", "bilinear_warp_flow",
        "epe_loss", "reconstruction_loss", "channel_norm", "l2_normalize",
        "upsample_bilinear", "gru_cell",
    ]
    out = {name: OP_TOLERANCE for name in names}
    out[END_TO_END_KEY] = END_TO_END_TOLERANCE
    return out


def _fractional_flow(rng, shape, lo=0.15, hi=0.85):
    """Flow values whose fractional parts stay away from 0/1 (warp kinks)."""
    mag = rng.uniform(lo, hi, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return (mag * sign).astype(np.float64)


def gradient_suite(seed: int = 0) -> dict[str, float]:
    """Max relative finite-difference error per operator, at float64."""
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}

    def rnd(*shape):
        return rng.uniform(-1.0, 1.0, size=shape)

    with T.precision(np.float64):
        # conv2d: input, weight and bias gradients on a strided, padded case
        w = Tensor(rnd(4, 3, 3, 3))
        bias = Tensor(rnd(4))
        x = Tensor(rnd(2, 3, 6, 6))
        errors["conv2d"] = max(
            gradient_check(lambda t: T.sum_all(T.conv2d(t, w, bias, stride=2, padding=1)), x),
            gradient_check(lambda t: T.sum_all(T.conv2d(x, t, bias, stride=2, padding=1)), w),
            gradient_check(lambda t: T.sum_all(T.conv2d(x, w, t, stride=2, padding=1)), bias),
        )

        y = Tensor(rnd(1, 4, 3, 3))
        errors["transposed_conv2d"] = max(
            gradient_check(lambda t: T.sum_all(T.transposed_conv2d(t, w, stride=2, padding=1)), y),
            gradient_check(lambda t: T.sum_all(T.transposed_conv2d(y, t, stride=2, padding=1)), w),
        )

        # distinct values avoid ties; a weighting makes each argmax choice matter
        xp = Tensor(rng.permutation(36).reshape(1, 1, 6, 6) / 7.0)
        wsum = Tensor(rnd(1, 1, 3, 3))
        errors["maxpool"] = gradient_check(
            lambda t: T.sum_all(T.mul(T.maxpool(t, 2, 2), wsum)), xp)

        xa = Tensor(rnd(1, 2, 4, 4) + 0.05)  # keep leaky inputs off the kink at zero
        for kind in ("sigmoid", "tanh", "leaky_relu"):
            errors[kind] = gradient_check(
                lambda t, k=kind: T.sum_all(T.activation(t, k)), xa)

        fa = Tensor(rnd(1, 3, 6, 6))
        fb = Tensor(rnd(1, 3, 6, 6))
        wcorr = Tensor(rnd(1, 25, 6, 6))
        errors["correlation"] = max(
            gradient_check(lambda t: T.sum_all(T.mul(correlation(t, fb, 2, 0), wcorr)), fa),
            gradient_check(lambda t: T.sum_all(T.mul(correlation(fa, t, 2, 1), wcorr)), fb),
        )

        img = Tensor(rnd(1, 2, 5, 5))
        flow5 = Tensor(_fractional_flow(rng, (1, 2, 5, 5)))
        wwarp = Tensor(rnd(1, 2, 5, 5))
        errors["bilinear_warp_image"] = gradient_check(
            lambda t: T.sum_all(T.mul(bilinear_warp(t, flow5), wwarp)), img)
        errors["bilinear_warp_flow"] = gradient_check(
            lambda t: T.sum_all(T.mul(bilinear_warp(img, t), wwarp)), flow5)

        pred = Tensor(rnd(1, 2, 5, 5))
        gt = Tensor(rnd(1, 2, 5, 5))
        maskt = Tensor((rng.uniform(0, 1, (1, 1, 5, 5)) > 0.3).astype(np.float64))
        errors["epe_loss"] = gradient_check(lambda t: epe_loss(t, gt, maskt), pred)

        flow6 = Tensor(_fractional_flow(rng, (1, 2, 6, 6)))
        errors["reconstruction_loss"] = max(
            gradient_check(lambda t: reconstruction_loss(t, fb, flow6), fa),
            gradient_check(lambda t: reconstruction_loss(fa, fb, t), flow6),
        )

        errors["channel_norm"] = gradient_check(
            lambda t: T.sum_all(channel_norm(t)), Tensor(rnd(1, 3, 4, 4) + 0.3))
        wnorm = Tensor(rnd(1, 3, 4, 4))
        errors["l2_normalize"] = gradient_check(
            lambda t: T.sum_all(T.mul(l2_normalize_channels(t), wnorm)),
            Tensor(rnd(1, 3, 4, 4) + 0.3))
        wup = Tensor(rnd(1, 2, 8, 8))
        errors["upsample_bilinear"] = gradient_check(
            lambda t: T.sum_all(T.mul(upsample_bilinear(t, 2, 2.0), wup)),
            Tensor(rnd(1, 2, 4, 4)))

        # one full recurrent cell: gradient w.r.t. the second scale's input map
        cfg = ModelConfig.micro()
        cell_params = init_model_params(cfg, seed=seed, dtype=np.float64)
        q1 = Tensor(rnd(1, cfg.encoder_channels, 2, 2))
        q2 = Tensor(rnd(1, cfg.encoder_channels, 4, 4))
        wcell = Tensor(rnd(1, cfg.hidden_channels, 4, 4))

        def gru_cell(t):
            hs = spatial_conv_gru([q1, t], cell_params, cfg)
            return T.sum_all(T.mul(hs[-1], wcell))

        errors["gru_cell"] = gradient_check(gru_cell, q2)

        # end to end: combined loss w.r.t. a recurrent-unit weight (sampled coords)
        e2e_params = init_model_params(cfg, seed=seed + 1, dtype=np.float64)
        ia = Tensor(rng.uniform(-1, 1, (1, 3, 16, 16)))
        ib = Tensor(rng.uniform(-1, 1, (1, 3, 16, 16)))
        gt_low = Tensor(_fractional_flow(rng, (1, 2, 4, 4)))
        target = "gru.uz.w"

        def end_to_end(t):
            e2e_params._tensors[target] = t
            out = forward(ia, ib, e2e_params, cfg)
            return total_loss(out.flow_lowres, gt_low, out.features_a, out.features_b,
                              balance=0.005)

        errors[END_TO_END_KEY] = gradient_check(
            end_to_end, Tensor(e2e_params[target].data.copy()), max_coords=40, seed=seed)

    return errors
