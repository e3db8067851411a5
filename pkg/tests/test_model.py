"""Encoder, head, and decoder behavior."""

import numpy as np
import pytest
import torch

from conftest import toy_encoder_spec
from mscfusion.errors import ConfigurationError
from mscfusion.model import (
    EncoderSpec,
    GlobalProjectionHead,
    LocalProjectionHead,
    ModalityModel,
    ModelConfig,
    VolumeEncoder,
    build_model,
    default_encoder_spec,
    model_config_for_objective,
    receptive_field,
)


class TestEncoderSpec:
    def test_local_layer_bounds_rejected(self):
        for bad_l in (1, 4):
            spec = EncoderSpec(
                input_side=16, channels=(8, 16, 32, 64), local_layer=bad_l
            )
            with pytest.raises(ConfigurationError):
                spec.validate()

    def test_side_divisibility(self):
        spec = EncoderSpec(input_side=24, channels=(8, 16, 32, 64), local_layer=2)
        with pytest.raises(ConfigurationError):
            spec.validate()

    def test_default_ladder_reproduces_reference_local_map(self):
        spec = default_encoder_spec(64)
        assert spec.local_channels == 128
        assert spec.local_side == 8

    def test_receptive_field_interior(self):
        # exported layer sees less than the whole input, more than a voxel
        for side in (16, 32, 64):
            spec = default_encoder_spec(side)
            rf = receptive_field(spec, spec.local_layer)
            assert 1 < rf < side
        rfs = [receptive_field(default_encoder_spec(32), l) for l in (1, 2, 3)]
        assert rfs == sorted(rfs)


class TestBuildModel:
    def test_same_seed_bitwise_identical(self):
        config = ModelConfig(
            encoder=toy_encoder_spec(),
            local_head=True,
            global_head_hidden=1,
            decoder=True,
            n_classes=3,
        )
        m1 = build_model(config, seed=123)
        m2 = build_model(config, seed=123)
        for (k1, v1), (k2, v2) in zip(
            m1.state_dict().items(), m2.state_dict().items()
        ):
            assert k1 == k2
            assert torch.equal(v1, v2), k1

    def test_modalities_not_shared(self):
        config = ModelConfig(encoder=toy_encoder_spec())
        model = build_model(config, seed=0)
        w1 = model["m1"].encoder.stages[0][0].weight
        w2 = model["m2"].encoder.stages[0][0].weight
        assert not torch.equal(w1, w2)

    def test_head_attachment_follows_terms(self):
        enc = toy_encoder_spec()
        cc_only = model_config_for_objective(enc, ("CC",), global_head_hidden=1)
        assert cc_only.local_head and cc_only.global_head_hidden is None
        sup = model_config_for_objective(
            enc, ("CE",), global_head_hidden=1, n_classes=2
        )
        assert not sup.local_head
        assert sup.global_head_hidden is None
        assert sup.n_classes == 2
        rr_xx = model_config_for_objective(enc, ("RR", "XX"), global_head_hidden=2)
        assert rr_xx.local_head and rr_xx.global_head_hidden == 2
        ae = model_config_for_objective(enc, ("AE",), global_head_hidden=1)
        assert ae.decoder and ae.global_head_hidden is None


class TestForward:
    def test_reference_geometry_side64(self):
        # full-scale ladder: local map is 128 channels at 8^3 locations
        spec = default_encoder_spec(64)
        enc = VolumeEncoder(spec)
        out = enc(torch.zeros(1, 1, 64, 64, 64))
        assert tuple(out.locals.shape) == (1, 128, 8, 8, 8)
        assert tuple(out.z.shape) == (1, 64)

    def test_side32_local_side(self):
        spec = default_encoder_spec(32)
        spec = EncoderSpec(
            input_side=32, channels=spec.channels, local_layer=3, repr_dim=64
        )
        enc = VolumeEncoder(spec)
        out = enc(torch.zeros(2, 1, 32, 32, 32))
        assert out.locals.shape[-1] == 4

    def test_zero_input_zero_bias_gives_zero_z(self, toy_spec):
        model = build_model(ModelConfig(encoder=toy_spec), seed=1)
        out = model["m1"].encode(torch.zeros(2, 1, 8, 8, 8))
        assert torch.equal(out.z, torch.zeros(2, 8))

    def test_deterministic_forward(self, toy_spec):
        model = build_model(ModelConfig(encoder=toy_spec), seed=2)
        x = torch.randn(3, 1, 8, 8, 8)
        a = model["m1"].encode(x).z
        b = model["m1"].encode(x).z
        assert torch.equal(a, b)

    def test_bad_batch_shape(self, toy_spec):
        model = build_model(ModelConfig(encoder=toy_spec), seed=3)
        with pytest.raises(ConfigurationError):
            model["m1"].encode(torch.zeros(2, 1, 16, 16, 16))

    def test_locals_flat_layout(self, toy_spec):
        model = build_model(ModelConfig(encoder=toy_spec), seed=4)
        out = model["m1"].encode(torch.randn(2, 1, 8, 8, 8))
        flat = out.locals_flat
        assert flat.shape == (2, out.locals.shape[-1] ** 3, out.locals.shape[1])
        assert torch.equal(flat[0, 0], out.locals[0, :, 0, 0, 0])


class TestLocalHead:
    def test_identity_path_before_training(self):
        torch.manual_seed(0)
        head = LocalProjectionHead(in_channels=12, out_dim=8)
        gen = torch.Generator().manual_seed(5)
        from mscfusion.model import _init_parameters

        _init_parameters(head, gen)
        x = torch.randn(2, 12, 3, 3, 3, dtype=torch.float64)
        head = head.double()
        # hand-built reference: path A conv->relu->conv plus leading-channel
        # slice through the identity kernel
        w1 = head.path_a[0].weight.detach()
        w2 = head.path_a[2].weight.detach()
        a = torch.einsum("oc, bcxyz -> boxyz", w1[:, :, 0, 0, 0], x).clamp(min=0)
        a = torch.einsum("oc, bcxyz -> boxyz", w2[:, :, 0, 0, 0], a)
        expected = a + x[:, :8]
        got = head(x)
        assert torch.allclose(got, expected, atol=1e-12)

    def test_shapes(self):
        head = LocalProjectionHead(in_channels=128, out_dim=64)
        out = head(torch.randn(1, 128, 2, 2, 2))
        assert tuple(out.shape) == (1, 64, 2, 2, 2)

    def test_channel_mismatch(self):
        head = LocalProjectionHead(in_channels=16, out_dim=8)
        with pytest.raises(ConfigurationError):
            head(torch.randn(1, 8, 2, 2, 2))


class TestGlobalHead:
    def test_identity_weights_identity_map(self):
        head = GlobalProjectionHead(dim=8, n_hidden=0)
        with torch.no_grad():
            head.net[0].weight.copy_(torch.eye(8))
            head.net[0].bias.zero_()
        z = torch.randn(4, 8)
        assert torch.allclose(head(z), z)

    def test_random_head_matches_layerwise_oracle(self):
        torch.manual_seed(7)
        head = GlobalProjectionHead(dim=8, n_hidden=2).double()
        z = torch.randn(3, 8, dtype=torch.float64)
        x = z
        for layer in head.net:
            if isinstance(layer, torch.nn.Linear):
                x = x @ layer.weight.T + layer.bias
            else:
                x = x.clamp(min=0)
        assert torch.allclose(head(z), x, atol=1e-12)

    def test_hidden_count_bounds(self):
        with pytest.raises(ConfigurationError):
            GlobalProjectionHead(dim=8, n_hidden=4)


class TestDecoder:
    def test_output_shape_and_range(self, toy_model):
        z = torch.randn(2, 8, dtype=torch.float64)
        vol = toy_model["m1"].decoder(z)
        assert tuple(vol.shape) == (2, 1, 8, 8, 8)
        assert (vol > 0).all() and (vol < 1).all()

    def test_reconstruction_gradient_wrt_z_nonzero(self, toy_model):
        z = torch.randn(2, 8, dtype=torch.float64, requires_grad=True)
        x = torch.rand(2, 1, 8, 8, 8, dtype=torch.float64)
        loss = ((toy_model["m1"].decoder(z) - x) ** 2).sum()
        loss.backward()
        assert z.grad is not None
        assert z.grad.abs().max() > 0


class TestGradientFlow:
    def test_jvp_matches_central_differences(self, toy_spec):
        model = build_model(ModelConfig(encoder=toy_spec), seed=11).double()
        part = model["m1"]
        rng = np.random.default_rng(0)
        x = torch.tensor(
            rng.uniform(0.1, 0.9, size=(1, 1, 8, 8, 8)), dtype=torch.float64
        )
        v = torch.tensor(rng.normal(size=x.shape), dtype=torch.float64)
        v /= v.norm()

        xg = x.clone().requires_grad_(True)
        z = part.encode(xg).z
        w = torch.tensor(rng.normal(size=(8,)), dtype=torch.float64)
        (z[0] * w).sum().backward()
        jvp = float((xg.grad * v).sum())

        h = 1e-6
        with torch.no_grad():
            zp = part.encode(x + h * v).z
            zm = part.encode(x - h * v).z
        fd = float(((zp[0] - zm[0]) * w).sum() / (2 * h))
        assert jvp == pytest.approx(fd, rel=1e-4)
