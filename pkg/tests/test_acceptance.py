"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The learning demonstration (criterion 8) trains the small preset twice for
2000 iterations and dominates the suite's runtime (about 10-15 minutes on one
core); everything else finishes in seconds.
"""

import time

import numpy as np
import pytest

import scaleflow.tensor as T
from scaleflow.tensor import Tensor, conv2d, transposed_conv2d
from scaleflow.flow_ops import (bilinear_warp, channel_of_displacement,
                                correlation, epe_loss)
from scaleflow.model import (ModelConfig, build_pyramid, correlation_pyramid,
                             extract_shared_features, init_model_params,
                             spatial_conv_gru, to_model_input)
from scaleflow.data import (FileFormatError, MotionSpec, generate_synthetic_pair,
                            make_translation_dataset, read_flo, read_image,
                            write_flo, write_image)
from scaleflow.evaluator import (BOUNDARY_BINS, endpoint_error,
                                 epe_by_boundary_distance, epe_by_velocity,
                                 flow_boundary_mask, mean_epe)
from scaleflow.trainer import (LrSchedule, TrainConfig, lr_at, train,
                               validation_split, zero_flow_baseline)
from scaleflow.verify import (END_TO_END_KEY, END_TO_END_TOLERANCE, OP_TOLERANCE,
                              gradient_suite, suite_thresholds)


def _report(num: int, name: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {num:02d} [{status}] {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {num}: {name} {detail}"


def test_01_correlation_oracle():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((1, 8, 16, 16))
    b = rng.standard_normal((1, 8, 16, 16))
    t0 = time.time()
    got = correlation(Tensor(a), Tensor(b), 3, 0).data
    elapsed = time.time() - t0
    d, side = 3, 7
    want = np.zeros_like(got)
    for ci in range(side * side):
        dy, dx = ci // side - d, ci % side - d
        for i in range(16):
            for j in range(16):
                bi, bj = i + dy, j + dx
                if 0 <= bi < 16 and 0 <= bj < 16:
                    want[0, ci, i, j] = (a[0, :, i, j] @ b[0, :, bi, bj]) / 8.0
    max_abs = float(np.abs(got - want).max())
    _report(1, "correlation matches nested-loop oracle", max_abs < 1e-6 and elapsed < 1.0,
            f"max abs err {max_abs:.2e}, {elapsed * 1000:.0f} ms")


def test_02_gradient_suite():
    t0 = time.time()
    errors = gradient_suite(seed=0)
    elapsed = time.time() - t0
    thresholds = suite_thresholds()
    ok = all(errors[k] < thresholds[k] for k in errors) and elapsed < 60.0
    worst_op = max((v for k, v in errors.items() if k != END_TO_END_KEY), default=0.0)
    _report(2, "finite-difference gradient suite", ok,
            f"worst op {worst_op:.2e} < {OP_TOLERANCE:g}, end-to-end "
            f"{errors[END_TO_END_KEY]:.2e} < {END_TO_END_TOLERANCE:g}, {elapsed:.1f} s")


def test_03_warp_identities():
    rng = np.random.default_rng(1)
    img = rng.standard_normal((1, 3, 12, 12)).astype(np.float32)
    zero = bilinear_warp(Tensor(img), Tensor(np.zeros((1, 2, 12, 12), np.float32))).data
    bit_exact = np.array_equal(zero, img)
    flow = np.zeros((1, 2, 12, 12))
    flow[0, 0], flow[0, 1] = 3.0, -2.0
    shifted = bilinear_warp(Tensor(img.astype(np.float64)), Tensor(flow)).data
    want = np.zeros_like(shifted)
    want[0, :, 2:, :-3] = img[0, :, :-2, 3:]  # sample at (y-2, x+3)
    interior = np.array_equal(shifted[0, :, 2:, :-3], img[0, :, :-2, 3:])
    zero_outside = np.array_equal(shifted, want)
    _report(3, "warp identities (zero flow bit-exact, integer shift exact)",
            bit_exact and interior and zero_outside)


def test_04_conv_adjointness():
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        k = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 4))
        padding = int(rng.integers(0, k))
        h = int(rng.integers(k + 2, k + 9))
        x = Tensor(rng.standard_normal((2, c_in, h, h)))
        w = Tensor(rng.standard_normal((c_out, c_in, k, k)))
        cx = conv2d(x, w, None, stride, padding)
        y = Tensor(rng.standard_normal(cx.data.shape))
        lhs = float((cx.data * y.data).sum())
        rhs = float((x.data * transposed_conv2d(y, w, stride, padding).data).sum())
        worst = max(worst, abs(lhs - rhs))
    _report(4, "conv/transposed-conv adjoint identity on 5 shape triples",
            worst < 1e-6, f"worst |<Cx,y>-<x,C'y>| = {worst:.2e}")


def test_05_gru_algebra():
    cfg = ModelConfig.tiny()
    rng = np.random.default_rng(2)
    sizes = [2 ** (i + 1) for i in range(cfg.num_scales)]
    qs = [Tensor(rng.standard_normal((1, cfg.encoder_channels, s, s)).astype(np.float32))
          for s in sizes]

    zero_params = init_model_params(cfg, seed=0)
    for name, t in zero_params.items():
        if name.startswith("gru."):
            t.data[:] = 0.0
    all_zero = all(np.array_equal(h.data, np.zeros_like(h.data))
                   for h in spatial_conv_gru(qs, zero_params, cfg))

    sat_params = init_model_params(cfg, seed=1)
    sat_params["gru.wz.b"].data[:] = 1e3
    hs = spatial_conv_gru(qs, sat_params, cfg)
    pad = cfg.other_kernel // 2
    h_up = Tensor(np.zeros_like(hs[0].data))
    saturated_ok = True
    between_ok = True
    for q, h in zip(qs, hs):
        r = T.activation(T.add(conv2d(q, sat_params["gru.wr.w"], sat_params["gru.wr.b"], 1, pad),
                               conv2d(h_up, sat_params["gru.ur.w"], sat_params["gru.ur.b"], 1, pad)),
                         "sigmoid")
        cand = T.activation(T.add(conv2d(q, sat_params["gru.wc.w"], sat_params["gru.wc.b"], 1, pad),
                                  conv2d(T.mul(r, h_up), sat_params["gru.uc.w"],
                                         sat_params["gru.uc.b"], 1, pad)), "tanh")
        saturated_ok &= bool(np.abs(h.data - cand.data).max() < 1e-6)
        lo = np.minimum(h_up.data, cand.data) - 1e-6
        hi = np.maximum(h_up.data, cand.data) + 1e-6
        between_ok &= bool(((h.data >= lo) & (h.data <= hi)).all())
        h_up = transposed_conv2d(h, sat_params["gru.up.w"], stride=2, padding=1)
    _report(5, "recurrent-cell algebra (zero collapse, gate saturation, convexity)",
            all_zero and saturated_ok and between_ok)


def test_06_epe_closed_forms():
    rng = np.random.default_rng(3)
    gt = rng.standard_normal((2, 64, 64))
    pred = gt + np.array([3.0, 4.0]).reshape(2, 1, 1)
    mean_ok = abs(mean_epe(pred, gt) - 5.0) < 1e-6
    loss = epe_loss(Tensor(pred[None]), Tensor(gt[None])).item()
    sum_ok = abs(loss - 5.0 * 64 * 64) < 1e-2
    _report(6, "endpoint-error closed forms (mean 5.0, summed 5*H*W)",
            mean_ok and sum_ok, f"mean {mean_epe(pred, gt):.8f}, sum {loss:.4f}")


def test_07_self_correlation_argmax():
    cfg = ModelConfig.tiny()
    params = init_model_params(cfg, seed=0)
    pair = generate_synthetic_pair(9, 64, MotionSpec.identity())
    img = Tensor(to_model_input(pair.image_a)[None].astype(np.float32))
    top, _ = extract_shared_features(img, params, cfg)
    pyr = build_pyramid(top, params, cfg)
    vols = correlation_pyramid(pyr, pyr, cfg)
    ok = True
    for vol, d in zip(vols, cfg.max_displacements):
        center = channel_of_displacement(0, 0, d)
        interior = vol.data[0].argmax(axis=0)[1:-1, 1:-1]
        ok &= bool((interior == center).all())
    _report(7, "self-correlation argmax at zero displacement on every scale", ok)


@pytest.fixture(scope="module")
def desk_scale_runs():
    pairs = make_translation_dataset(200, 64, 8.0, seed=11)
    cfg = ModelConfig.tiny()
    common = dict(batch_size=8, max_iters=2000, seed=0, fixed_lr=1e-4,
                  eval_every=500, checkpoint_every=0, val_fraction=0.05)
    t0 = time.time()
    plain = train(pairs, cfg, TrainConfig(**common))
    plain_minutes = (time.time() - t0) / 60.0
    curriculum = train(pairs, cfg, TrainConfig(**common, phase2_start=1000,
                                               lambda_rec=0.005))
    _, val_idx = validation_split(len(pairs), seed=0)
    baseline = zero_flow_baseline([pairs[i] for i in val_idx])
    return plain, curriculum, baseline, plain_minutes


def test_08_desk_scale_learning(desk_scale_runs):
    plain, curriculum, baseline, minutes = desk_scale_runs
    learned = plain.final_val_epe <= 0.5 * baseline
    fast_enough = minutes < 30.0
    finite = all(np.isfinite(h[2]) for h in curriculum.history)
    within = abs(curriculum.final_val_epe - plain.final_val_epe) <= 0.25 * plain.final_val_epe
    _report(8, "desk-scale learning demonstration",
            learned and fast_enough and finite and within,
            f"EPE {plain.final_val_epe:.3f} vs baseline {baseline:.3f} "
            f"(target {0.5 * baseline:.3f}) in {minutes:.1f} min; "
            f"curriculum EPE {curriculum.final_val_epe:.3f}")


def test_09_format_fidelity(tmp_path):
    rng = np.random.default_rng(4)
    flow = rng.standard_normal((2, 16, 16)).astype(np.float32)
    write_flo(tmp_path / "f.flo", flow)
    flo_ok = np.array_equal(read_flo(tmp_path / "f.flo"), flow)

    img = rng.uniform(0, 1, (3, 8, 8))
    write_image(tmp_path / "i.ppm", img)
    back = read_image(tmp_path / "i.ppm")
    write_image(tmp_path / "j.ppm", back)
    ppm_ok = (tmp_path / "i.ppm").read_bytes() == (tmp_path / "j.ppm").read_bytes()

    (tmp_path / "bad.flo").write_bytes(np.float32(1.0).tobytes() + b"\0" * 16)
    try:
        read_flo(tmp_path / "bad.flo")
        flo_rejected = False
    except FileFormatError as exc:
        flo_rejected = "not a flow file" in str(exc)
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n\0\0\0")
    try:
        read_image(tmp_path / "bad.ppm")
        ppm_rejected = False
    except FileFormatError as exc:
        ppm_rejected = "malformed PPM" in str(exc)
    _report(9, "flow/PPM round-trips bit-exact and corrupt magics rejected",
            flo_ok and ppm_ok and flo_rejected and ppm_rejected)


def test_10_evaluator_partition():
    rng = np.random.default_rng(5)
    gt = np.zeros((2, 32, 32))
    gt[0, 6:20, 4:18] = 30.0
    gt[1, 24:30, 20:30] = -15.0
    pred = gt + rng.uniform(-2, 2, gt.shape)
    mask = rng.uniform(0, 1, (32, 32)) > 0.2

    vel = epe_by_velocity(pred, gt, mask)
    counts_ok = sum(b.count for b in vel) == int(mask.sum())
    weighted = sum(b.epe * b.count for b in vel if b.count) / sum(b.count for b in vel)
    mean_ok = abs(mean_epe(pred, gt, mask) - weighted) < 1e-9

    boundary = flow_boundary_mask(gt)
    pts = np.argwhere(boundary)
    dist = np.zeros((32, 32))
    for i in range(32):
        for j in range(32):
            dist[i, j] = np.sqrt(((pts - (i, j)) ** 2).sum(axis=1).min())
    err = endpoint_error(pred, gt)
    bins, has_b = epe_by_boundary_distance(pred, gt, mask)
    oracle_ok = has_b
    for stat, (_, lo, hi) in zip(bins, BOUNDARY_BINS):
        sel = mask & (dist >= lo) & (dist < hi)
        oracle_ok &= stat.count == int(sel.sum())
        if stat.count:
            oracle_ok &= abs(stat.epe - err[sel].mean()) < 1e-9
    _report(10, "evaluator partition and brute-force boundary-distance oracle",
            counts_ok and mean_ok and oracle_ok)


def test_11_schedule_quoted_values():
    s = LrSchedule()  # full-length schedule
    checks = [
        (0, 1e-6), (9_999, 1e-6),          # warmup through 10k
        (10_000, 1e-4), (310_000, 1e-4), (409_999, 1e-4),  # plateau through 410k
        (410_000, 5e-5), (509_999, 5e-5),  # first halving
        (510_000, 2.5e-5), (610_000, 1.25e-5),
    ]
    ok = all(lr_at(it, s) == want for it, want in checks)
    _report(11, "learning-rate schedule reproduces the quoted breakpoints exactly", ok)
