"""Network pipeline: shapes, Siamese sharing, recurrent-cell algebra,
self-correlation argmax, scale causality and end-to-end differentiability."""

import numpy as np
import pytest

import scaleflow.tensor as T
from scaleflow.tensor import Tape, Tensor, gradient_check
from scaleflow.flow_ops import (channel_of_displacement, total_loss)
from scaleflow.model import (ModelConfig, ModelParams, build_pyramid,
                             correlation_pyramid, encode_correlations,
                             extract_shared_features, forward, init_model_params,
                             predict_flow, project_hidden, read_model_config,
                             spatial_conv_gru, to_model_input, write_model_config)
from scaleflow.data import MotionSpec, generate_synthetic_pair


@pytest.fixture(scope="module")
def tiny():
    return ModelConfig.tiny()


@pytest.fixture(scope="module")
def tiny_params(tiny):
    return init_model_params(tiny, seed=0)


def _image_batch(rng, n=1, size=64):
    return Tensor(rng.uniform(-1, 1, (n, 3, size, size)).astype(np.float32))


class TestConfig:
    def test_defaults_match_contract(self):
        cfg = ModelConfig()
        assert cfg.num_scales == 4
        assert cfg.max_displacements == (5, 5, 10, 10)
        assert cfg.first_kernel == 7 and cfg.second_kernel == 5
        assert cfg.other_kernel == 3 and cfg.up_kernel == 4
        assert cfg.prediction_stride == 4

    def test_displacement_count_enforced(self):
        with pytest.raises(ValueError, match="max_displacements"):
            ModelConfig(num_scales=3)

    def test_round_trip_config_file(self, tmp_path, tiny):
        path = tmp_path / "model.cfg"
        write_model_config(tiny, path)
        assert read_model_config(path) == tiny

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "model.cfg"
        path.write_text("bogus = 3\n")
        with pytest.raises(ValueError, match="unknown config key"):
            read_model_config(path)


class TestParams:
    def test_duplicate_name_rejected(self):
        p = ModelParams()
        p.add("w", np.zeros(2, dtype=np.float32))
        with pytest.raises(ValueError, match="duplicate"):
            p.add("w", np.zeros(2, dtype=np.float32))

    def test_checkpoint_round_trip_bit_exact(self, tmp_path, tiny, tiny_params):
        path = tmp_path / "model.ckpt"
        tiny_params.save(path)
        loaded = ModelParams.load(path)
        assert loaded.names() == tiny_params.names()
        for name, t in tiny_params.items():
            assert np.array_equal(loaded[name].data, t.data)


class TestFeatureExtractor:
    def test_shape_trace(self, tiny, tiny_params):
        rng = np.random.default_rng(0)
        top, second = extract_shared_features(_image_batch(rng), tiny_params, tiny)
        assert top.data.shape == (1, tiny.feat_channels, 16, 16)
        assert second.data.shape == (1, tiny.feat_channels, 16, 16)

    def test_siamese_pure_function(self, tiny, tiny_params):
        rng = np.random.default_rng(1)
        img = _image_batch(rng)
        t1, s1 = extract_shared_features(img, tiny_params, tiny)
        t2, s2 = extract_shared_features(img, tiny_params, tiny)
        assert np.array_equal(t1.data, t2.data)
        assert np.array_equal(s1.data, s2.data)

    def test_zero_image_zero_activations(self, tiny):
        params = init_model_params(tiny, seed=0)
        for name, t in params.items():
            if name.startswith("feat."):
                t.data[:] = 0.0
        top, second = extract_shared_features(
            Tensor(np.zeros((1, 3, 64, 64), np.float32)), params, tiny)
        assert np.array_equal(second.data, np.zeros_like(second.data))
        assert np.array_equal(top.data, np.zeros_like(top.data))

    def test_divisibility_error_names_multiple(self, tiny, tiny_params):
        img = Tensor(np.zeros((1, 3, 60, 64), np.float32))
        with pytest.raises(ValueError, match="multiples of 32"):
            extract_shared_features(img, tiny_params, tiny)


class TestPyramid:
    def test_sizes_double_coarse_to_fine(self, tiny, tiny_params):
        rng = np.random.default_rng(2)
        top, _ = extract_shared_features(_image_batch(rng), tiny_params, tiny)
        pyr = build_pyramid(top, tiny_params, tiny)
        sizes = [f.data.shape[2:] for f in pyr]
        assert sizes == [(2, 2), (4, 4), (8, 8), (16, 16)]
        assert all(f.data.shape[1] == tiny.pyramid_channels for f in pyr)

    def test_strictly_increasing_sizes(self, tiny, tiny_params):
        rng = np.random.default_rng(3)
        top, _ = extract_shared_features(_image_batch(rng), tiny_params, tiny)
        pyr = build_pyramid(top, tiny_params, tiny)
        for coarse, fine in zip(pyr, pyr[1:]):
            assert coarse.data.shape[2] < fine.data.shape[2]
            assert coarse.data.shape[3] < fine.data.shape[3]

    def test_deterministic(self, tiny, tiny_params):
        rng = np.random.default_rng(4)
        img = _image_batch(rng)
        top, _ = extract_shared_features(img, tiny_params, tiny)
        p1 = build_pyramid(top, tiny_params, tiny)
        p2 = build_pyramid(top, tiny_params, tiny)
        for a, b in zip(p1, p2):
            assert np.array_equal(a.data, b.data)


class TestCorrelationPyramid:
    def test_channel_counts_from_displacements(self):
        cfg = ModelConfig()  # d = (5, 5, 10, 10) -> (121, 121, 441, 441)
        params = init_model_params(cfg, seed=0)
        img = Tensor(np.random.default_rng(5).uniform(-1, 1, (1, 3, 64, 64)).astype(np.float32))
        top, _ = extract_shared_features(img, params, cfg)
        pyr = build_pyramid(top, params, cfg)
        vols = correlation_pyramid(pyr, pyr, cfg)
        assert [v.data.shape[1] for v in vols] == [121, 121, 441, 441]

    def test_self_correlation_zero_displacement_argmax(self, tiny, tiny_params):
        pair = generate_synthetic_pair(9, 64, MotionSpec.identity())
        img = Tensor(to_model_input(pair.image_a)[None].astype(np.float32))
        top, _ = extract_shared_features(img, tiny_params, tiny)
        pyr = build_pyramid(top, tiny_params, tiny)
        vols = correlation_pyramid(pyr, pyr, tiny)
        for vol, d in zip(vols, tiny.max_displacements):
            center = channel_of_displacement(0, 0, d)
            interior = vol.data[0].argmax(axis=0)[1:-1, 1:-1]
            assert (interior == center).all()

    def test_batch_dimension(self, tiny, tiny_params):
        rng = np.random.default_rng(6)
        img = _image_batch(rng, n=2)
        top, _ = extract_shared_features(img, tiny_params, tiny)
        pyr = build_pyramid(top, tiny_params, tiny)
        vols = correlation_pyramid(pyr, pyr, tiny)
        assert all(v.data.shape[0] == 2 for v in vols)


class TestEncoder:
    def test_spatial_sizes_preserved(self, tiny, tiny_params):
        rng = np.random.default_rng(7)
        img = _image_batch(rng)
        top, _ = extract_shared_features(img, tiny_params, tiny)
        pyr = build_pyramid(top, tiny_params, tiny)
        vols = correlation_pyramid(pyr, pyr, tiny)
        qs = encode_correlations(vols, tiny_params, tiny)
        for q, v in zip(qs, vols):
            assert q.data.shape[2:] == v.data.shape[2:]
            assert q.data.shape[1] == tiny.encoder_channels

    def test_zero_weights_zero_output(self, tiny):
        params = init_model_params(tiny, seed=0)
        for name, t in params.items():
            if name.startswith("corr_enc."):
                t.data[:] = 0.0
        vols = [Tensor(np.random.default_rng(8).standard_normal(
            (1, (2 * d + 1) ** 2, 4, 4)).astype(np.float32))
            for d in tiny.max_displacements]
        qs = encode_correlations(vols, params, tiny)
        for q in qs:
            assert np.array_equal(q.data, np.zeros_like(q.data))

    def test_gradient_reaches_both_pyramids(self, tiny, tiny_params):
        rng = np.random.default_rng(9)
        ia = Tensor(rng.uniform(-1, 1, (1, 3, 64, 64)).astype(np.float32), requires_grad=True)
        ib = Tensor(rng.uniform(-1, 1, (1, 3, 64, 64)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            top_a, _ = extract_shared_features(ia, tiny_params, tiny)
            top_b, _ = extract_shared_features(ib, tiny_params, tiny)
            vols = correlation_pyramid(build_pyramid(top_a, tiny_params, tiny),
                                       build_pyramid(top_b, tiny_params, tiny), tiny)
            qs = encode_correlations(vols, tiny_params, tiny)
            loss = T.sum_all(qs[-1])
        tape.backward(loss)
        assert ia.grad is not None and np.abs(ia.grad).sum() > 0
        assert ib.grad is not None and np.abs(ib.grad).sum() > 0


def _random_qs(cfg, rng, batch=1, dtype=np.float32):
    sizes = [2 ** (i + 1) for i in range(cfg.num_scales)]
    return [Tensor(rng.standard_normal((batch, cfg.encoder_channels, s, s)).astype(dtype))
            for s in sizes]


class TestSpatialConvGru:
    def test_all_zero_weights_zero_hidden(self, tiny):
        params = init_model_params(tiny, seed=0)
        for name, t in params.items():
            if name.startswith("gru."):
                t.data[:] = 0.0
        qs = _random_qs(tiny, np.random.default_rng(10))
        hs = spatial_conv_gru(qs, params, tiny)
        for h in hs:
            assert np.array_equal(h.data, np.zeros_like(h.data))

    def test_saturated_update_gate_selects_candidate(self, tiny):
        params = init_model_params(tiny, seed=1)
        params["gru.wz.b"].data[:] = 1e3  # update gate pinned to 1
        rng = np.random.default_rng(11)
        qs = _random_qs(tiny, rng)
        hs = spatial_conv_gru(qs, params, tiny)
        # recompute the candidates the cell should reduce to
        from scaleflow.tensor import activation, add, conv2d, mul
        h_up = Tensor(np.zeros_like(hs[0].data))
        pad = tiny.other_kernel // 2
        for q, h in zip(qs, hs):
            r = activation(add(conv2d(q, params["gru.wr.w"], params["gru.wr.b"], 1, pad),
                               conv2d(h_up, params["gru.ur.w"], params["gru.ur.b"], 1, pad)),
                           "sigmoid")
            cand = activation(add(conv2d(q, params["gru.wc.w"], params["gru.wc.b"], 1, pad),
                                  conv2d(mul(r, h_up), params["gru.uc.w"], params["gru.uc.b"],
                                         1, pad)), "tanh")
            np.testing.assert_allclose(h.data, cand.data, atol=1e-6)
            from scaleflow.tensor import transposed_conv2d
            h_up = transposed_conv2d(h, params["gru.up.w"], stride=2, padding=1)

    def test_hidden_between_previous_and_candidate(self, tiny, tiny_params):
        rng = np.random.default_rng(12)
        qs = _random_qs(tiny, rng)
        hs = spatial_conv_gru(qs, tiny_params, tiny)
        # per-element h lies in the closed interval spanned by h_up and candidate;
        # verify via the gate identity h = (1-z) h_up + z c with z in (0,1)
        from scaleflow.tensor import transposed_conv2d
        h_up = np.zeros_like(hs[0].data)
        for q, h in zip(qs, hs):
            lo = np.minimum(h_up, _candidate(q, Tensor(h_up), tiny_params, tiny))
            hi = np.maximum(h_up, _candidate(q, Tensor(h_up), tiny_params, tiny))
            assert (h.data >= lo - 1e-6).all() and (h.data <= hi + 1e-6).all()
            h_up = transposed_conv2d(h, tiny_params["gru.up.w"], stride=2, padding=1).data

    def test_upsampled_hidden_matches_next_scale(self, tiny, tiny_params):
        rng = np.random.default_rng(13)
        qs = _random_qs(tiny, rng)
        hs = spatial_conv_gru(qs, tiny_params, tiny)
        for i, h in enumerate(hs[:-1]):
            assert h.data.shape[2] * 2 == hs[i + 1].data.shape[2]

    def test_scale_causality(self, tiny, tiny_params):
        # zeroing one scale's input changes that and finer scales only
        rng = np.random.default_rng(14)
        qs = _random_qs(tiny, rng)
        base = [h.data.copy() for h in spatial_conv_gru(qs, tiny_params, tiny)]
        k = 2
        qs_mod = list(qs)
        qs_mod[k] = Tensor(np.zeros_like(qs[k].data))
        mod = [h.data for h in spatial_conv_gru(qs_mod, tiny_params, tiny)]
        for i in range(len(base)):
            if i < k:
                assert np.array_equal(base[i], mod[i])
            else:
                assert not np.array_equal(base[i], mod[i])

    def test_spatial_mismatch_rejected(self, tiny, tiny_params):
        rng = np.random.default_rng(15)
        qs = _random_qs(tiny, rng)
        qs[1] = Tensor(rng.standard_normal((1, tiny.encoder_channels, 5, 5)).astype(np.float32))
        with pytest.raises(ValueError, match="does not match"):
            spatial_conv_gru(qs, tiny_params, tiny)


def _candidate(q, h_up, params, cfg):
    from scaleflow.tensor import activation, add, conv2d, mul
    pad = cfg.other_kernel // 2
    r = activation(add(conv2d(q, params["gru.wr.w"], params["gru.wr.b"], 1, pad),
                       conv2d(h_up, params["gru.ur.w"], params["gru.ur.b"], 1, pad)), "sigmoid")
    return activation(add(conv2d(q, params["gru.wc.w"], params["gru.wc.b"], 1, pad),
                          conv2d(mul(r, h_up), params["gru.uc.w"], params["gru.uc.b"], 1, pad)),
                      "tanh").data


class TestProjectionAndHead:
    def test_projected_sizes_agree(self, tiny, tiny_params):
        rng = np.random.default_rng(16)
        qs = _random_qs(tiny, rng)
        hs = spatial_conv_gru(qs, tiny_params, tiny)
        ps = project_hidden(hs, tiny_params, tiny)
        finest = qs[-1].data.shape[2:]
        assert all(p.data.shape[2:] == finest for p in ps)

    def test_zero_hidden_zero_projection(self, tiny, tiny_params):
        hs = [Tensor(np.zeros((1, tiny.hidden_channels, 2 ** (i + 1), 2 ** (i + 1)), np.float32))
              for i in range(tiny.num_scales)]
        ps = project_hidden(hs, tiny_params, tiny)
        for p in ps:
            assert np.array_equal(p.data, np.zeros_like(p.data))

    def test_coarsest_needs_num_scales_minus_one_doublings(self, tiny):
        assert f"gru.proj.l1.s{tiny.num_scales - 2}.w" in init_model_params(tiny, 0)
        assert f"gru.proj.l1.s{tiny.num_scales - 1}.w" not in init_model_params(tiny, 0)

    def test_zero_projections_and_zero_head_bias_zero_flow(self, tiny):
        params = init_model_params(tiny, seed=3)
        rng = np.random.default_rng(17)
        second = Tensor(np.zeros((1, tiny.feat_channels, 16, 16), np.float32))
        ps = [Tensor(np.zeros((1, tiny.hidden_channels, 16, 16), np.float32))
              for _ in range(tiny.num_scales)]
        full, low = predict_flow(ps, second, params, tiny)
        assert np.array_equal(low.data, np.zeros_like(low.data))
        assert np.array_equal(full.data, np.zeros_like(full.data))

    def test_constant_lowres_flow_rescaled(self, tiny, tiny_params):
        from scaleflow.flow_ops import upsample_bilinear
        low = Tensor(np.ones((1, 2, 4, 4), np.float32))
        full = upsample_bilinear(low, 4, value_scale=4.0)
        np.testing.assert_allclose(full.data, np.full((1, 2, 16, 16), 4.0), atol=1e-6)


class TestForward:
    def test_output_contract(self, tiny, tiny_params):
        rng = np.random.default_rng(18)
        ia, ib = _image_batch(rng, 2), _image_batch(rng, 2)
        out = forward(ia, ib, tiny_params, tiny)
        assert out.flow.data.shape == (2, 2, 64, 64)
        assert out.flow_lowres.data.shape == (2, 2, 16, 16)
        assert np.isfinite(out.flow.data).all()

    def test_pure_function(self, tiny, tiny_params):
        rng = np.random.default_rng(19)
        ia, ib = _image_batch(rng), _image_batch(rng)
        o1 = forward(ia, ib, tiny_params, tiny)
        o2 = forward(ia, ib, tiny_params, tiny)
        assert np.array_equal(o1.flow.data, o2.flow.data)

    def test_siamese_registry_identity(self, tiny, tiny_params):
        # both branches read the very same tensors out of the registry
        assert tiny_params["feat.conv1.w"] is tiny_params["feat.conv1.w"]
        names = tiny_params.names()
        assert len(names) == len(set(names))

    def test_every_parameter_receives_finite_gradient(self, tiny, tiny_params):
        rng = np.random.default_rng(20)
        ia, ib = _image_batch(rng), _image_batch(rng)
        gt = Tensor(rng.uniform(0.2, 0.8, (1, 2, 16, 16)).astype(np.float32))
        with Tape() as tape:
            out = forward(ia, ib, tiny_params, tiny)
            loss = total_loss(out.flow_lowres, gt, out.features_a, out.features_b, 0.005)
        tape.backward(loss)
        for name, t in tiny_params.items():
            assert t.grad is not None, f"{name} missing gradient"
            assert np.isfinite(t.grad).all(), f"{name} has non-finite gradient"
        tiny_params.zero_grad()

    def test_end_to_end_gradient_matches_finite_differences(self):
        cfg = ModelConfig.micro()
        rng = np.random.default_rng(21)
        params = init_model_params(cfg, seed=5, dtype=np.float64)
        ia = Tensor(rng.uniform(-1, 1, (1, 3, 16, 16)))
        ib = Tensor(rng.uniform(-1, 1, (1, 3, 16, 16)))
        gt = Tensor(rng.uniform(0.2, 0.8, (1, 2, 4, 4)))
        name = "gru.uz.w"

        def f(t):
            params._tensors[name] = t
            out = forward(ia, ib, params, cfg)
            return total_loss(out.flow_lowres, gt, out.features_a, out.features_b, 0.005)

        err = gradient_check(f, Tensor(params[name].data.copy()), max_coords=24, seed=0)
        assert err < 1e-3
