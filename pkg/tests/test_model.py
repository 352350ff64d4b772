import numpy as np
import pytest

from dnet.errors import CheckpointError, ConfigError, ShapeError
from dnet.convops import ConvKernel, conv2d, same_pads
from dnet.model import (
    BLOCK_WIDTHS,
    DNet,
    DNetConfig,
    ResidualBottleneck,
    _Builder,
    build_encoder,
    encoder_concat,
    encoder_layer_specs,
    load_checkpoint,
    save_checkpoint,
)
from dnet.tensor import Tensor, backward, recording, tensor, using_dtype
from dnet.losses import LossConfig, total_loss

from conftest import conv2d_naive, fd_grad_entries, max_rel_err

TINY = dict(channels_scale=0.125)


def make_builder(seed=0):
    return _Builder(np.random.default_rng(seed))


class TestConfig:
    def test_defaults_valid(self):
        cfg = DNetConfig()
        assert cfg.dilations == (1, 2, 4)
        assert cfg.msif_rates == (3, 6, 12)

    def test_dilations_must_increase_or_be_ones(self):
        DNetConfig(dilations=(1, 1, 1))
        DNetConfig(dilations=(1, 2, 3))
        with pytest.raises(ConfigError):
            DNetConfig(dilations=(2, 2, 2))
        with pytest.raises(ConfigError):
            DNetConfig(dilations=(1, 3, 2))
        with pytest.raises(ConfigError):
            DNetConfig(dilations=(0, 1, 2))

    def test_msif_rates_same_rule(self):
        DNetConfig(msif_rates=(1, 1, 1))
        with pytest.raises(ConfigError):
            DNetConfig(msif_rates=(3, 3, 3))

    def test_scale_must_be_storable(self):
        DNetConfig(channels_scale=0.125)
        with pytest.raises(ConfigError):
            DNetConfig(channels_scale=1e-9)

    def test_width_floor_is_one(self):
        cfg = DNetConfig(channels_scale=0.001)
        assert cfg.width(64) == 1


class TestResidualBottleneck:
    def test_zero_weights_identity_shortcut_gives_relu(self, rng):
        builder = make_builder()
        block = ResidualBottleneck(builder, "b", cin=4, widths=(2, 2, 4))
        assert block.project is None
        for name, p in builder.params.items():
            p.data = np.zeros_like(p.data)
        v = tensor(rng.normal(size=(1, 3, 3, 4)))
        out = block(v)
        assert np.array_equal(out.data, np.maximum(v.data, 0.0))

    def test_scalar_hand_chain(self):
        builder = make_builder()
        block = ResidualBottleneck(builder, "b", cin=1, widths=(1, 1, 1))
        p = builder.params
        p["b.reduce.w"].data = np.full((1, 1, 1, 1), 3.0, np.float32)
        p["b.reduce.b"].data = np.full((1, 1, 1, 1), 1.0, np.float32)
        p["b.spatial.w"].data = np.ones((3, 3, 1, 1), np.float32)
        p["b.spatial.b"].data = np.zeros((1, 1, 1, 1), np.float32)
        p["b.restore.w"].data = np.full((1, 1, 1, 1), 0.5, np.float32)
        p["b.restore.b"].data = np.zeros((1, 1, 1, 1), np.float32)
        v = tensor([2.0], shape=(1, 1, 1, 1))
        # reduce: 2*3+1=7, relu 7; spatial (center tap only on 1x1): 7; restore: 3.5
        # shortcut identity: relu(2 + 3.5) = 5.5
        assert block(v).item() == pytest.approx(5.5)

    def test_projection_present_when_channels_change(self):
        builder = make_builder()
        block = ResidualBottleneck(builder, "b", cin=4, widths=(2, 2, 8))
        assert block.project is not None

    def test_block3_output_channels_full_scale(self, rng):
        builder = make_builder()
        block = ResidualBottleneck(builder, "b3", cin=128, widths=BLOCK_WIDTHS[3])
        v = tensor(rng.normal(size=(1, 2, 2, 128)))
        assert block(v).shape[3] == 256

    def test_channel_mismatch_rejected(self, rng):
        builder = make_builder()
        block = ResidualBottleneck(builder, "b", cin=4, widths=(2, 2, 4))
        with pytest.raises(ShapeError):
            block(tensor(rng.normal(size=(1, 2, 2, 3))))


class TestEncoder:
    def test_shape_contract_full_scale(self, rng):
        enc = build_encoder(DNetConfig(), seed=0)
        x = tensor(rng.uniform(size=(1, 64, 64, 3)))
        feats = enc(x)
        assert feats.b3.shape == (1, 4, 4, 256)
        assert feats.b4.shape == (1, 4, 4, 512)
        assert feats.b5.shape == (1, 4, 4, 256)
        assert feats.skip2.shape[1:3] == (32, 32)
        assert feats.skip4.shape[1:3] == (16, 16)
        assert feats.skip8.shape[1:3] == (8, 8)

    def test_indivisible_input_rejected(self, rng):
        enc = build_encoder(DNetConfig(**TINY), seed=0)
        with pytest.raises(ShapeError):
            enc(tensor(rng.uniform(size=(1, 60, 64, 3))))

    def test_plain_triple_has_no_dilation(self):
        cfg = DNetConfig(dilations=(1, 1, 1), msif_rates=(1, 1, 1), **TINY)
        model = DNet(cfg, seed=0)
        kernels = _collect_kernels(model)
        assert kernels, "expected to find convolution kernels"
        assert all(k.dilation == 1 for k in kernels)

    def test_every_conv_passes_d1_oracle_on_plain_triple(self, rng):
        # With all rates 1, spot-check actual network kernels against the
        # naive direct-loop oracle, bit for bit.
        cfg = DNetConfig(dilations=(1, 1, 1), msif_rates=(1, 1, 1), **TINY)
        model = DNet(cfg, seed=0)
        kernels = [k for k in _collect_kernels(model) if k.weight.shape[3] > 1]
        for kern in kernels[:: max(1, len(kernels) // 6)]:
            kh, kw, cin, cout = kern.weight.shape
            x = tensor(rng.normal(size=(1, 8, 8, cin)))
            got = conv2d(x, kern).data
            bias = kern.bias.data if kern.bias is not None else None
            want = conv2d_naive(
                x.data, kern.weight.data, bias, kern.stride, kern.dilation, kern.padding
            )
            assert np.array_equal(got, want)


def _collect_kernels(model) -> list[ConvKernel]:
    kernels = []
    enc = model.encoder
    for unit in (enc.root1, enc.root2, enc.root3):
        kernels.append(unit.kernel)
    for stage in enc.blocks:
        for block in stage:
            kernels.append(block.reduce.kernel)
            kernels.append(block.spatial.kernel)
            kernels.append(block.restore.kernel)
            if block.project is not None:
                kernels.append(block.project.kernel)
    if model.msif is not None:
        kernels.append(model.msif.point.kernel)
        for dw, pw, _bn in model.msif.sep_branches:
            kernels.extend([dw, pw])
        kernels.append(model.msif.gap_conv.kernel)
        kernels.append(model.msif.fuse.kernel)
    dec = model.decoder
    kernels.extend(
        [
            dec.up1, dec.fuse1.kernel, dec.up2, dec.fuse2.kernel,
            dec.up3, dec.fuse3.kernel, dec.up4,
            dec.refine1.kernel, dec.refine2.kernel, dec.head,
        ]
    )
    return kernels


class TestEncoderConcat:
    def test_channel_sum(self, rng):
        parts = [tensor(rng.normal(size=(1, 4, 4, c))) for c in (256, 512, 256)]
        assert encoder_concat(*parts).shape == (1, 4, 4, 1024)

    def test_constant_layout(self):
        b3 = tensor(np.full((1, 2, 2, 256), 1.0))
        b4 = tensor(np.full((1, 2, 2, 512), 2.0))
        b5 = tensor(np.full((1, 2, 2, 256), 3.0))
        g = encoder_concat(b3, b4, b5)
        assert np.all(g.data[..., :256] == 1.0)
        assert np.all(g.data[..., 256:768] == 2.0)
        assert np.all(g.data[..., 768:] == 3.0)

    def test_spatial_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            encoder_concat(
                tensor(rng.normal(size=(1, 4, 4, 2))),
                tensor(rng.normal(size=(1, 2, 2, 2))),
                tensor(rng.normal(size=(1, 4, 4, 2))),
            )


class TestMSIF:
    def test_output_width_full_scale(self, rng):
        model = DNet(DNetConfig(), seed=0)
        g = tensor(rng.normal(size=(1, 4, 4, 1024)))
        u = model.msif(g)
        assert u.shape == (1, 4, 4, 256)

    def test_branch_count_and_fused_input_width(self):
        model = DNet(DNetConfig(), seed=0)
        assert len(model.msif.sep_branches) == 3
        assert model.msif.fuse.kernel.in_channels == 5 * 256  # M = 1280 channels

    def test_constant_input_gap_branch(self, rng):
        model = DNet(DNetConfig(**TINY), seed=0)
        cin = model.msif.point.kernel.in_channels
        g = tensor(np.full((1, 4, 4, cin), 0.75))
        branches = model.msif.branch_outputs(g)
        from dnet.convops import global_avg_pool

        # spatial mean of a constant map is that constant, per channel
        pooled = global_avg_pool(g)
        assert np.allclose(pooled.data, 0.75)
        # pointwise and gap branches see no borders: spatially constant
        for branch in (branches[0], branches[-1]):
            flat = branch.data.reshape(branch.shape[0], -1, branch.shape[3])
            assert np.allclose(flat, flat[:, :1, :], atol=1e-6)

    def test_disabled_module_raises(self, rng):
        model = DNet(DNetConfig(msif_enabled=False, **TINY), seed=0)
        assert model.msif is None
        enabled = DNet(DNetConfig(**TINY), seed=0)
        enabled.msif.enabled = False
        with pytest.raises(ConfigError):
            enabled.msif(tensor(rng.normal(size=(1, 4, 4, enabled.msif.point.kernel.in_channels))))

    def test_separable_branches_cheaper_than_standard(self):
        model = DNet(DNetConfig(), seed=0)
        separable = 0
        standard = 0
        for dw, pw, _bn in model.msif.sep_branches:
            kh, kw, cin, _ = dw.weight.shape
            cout = pw.weight.shape[3]
            separable += kh * kw * cin + cin * cout
            standard += kh * kw * cin * cout
        assert separable < standard


class TestDecoder:
    def test_full_pipeline_shapes(self, rng):
        model = DNet(DNetConfig(**TINY), seed=0)
        x = tensor(rng.uniform(size=(1, 64, 64, 3)))
        logits = model.logits(x)
        assert logits.shape == (1, 64, 64, 1)

    def test_zero_weights_constant_logits(self, rng):
        model = DNet(DNetConfig(**TINY), seed=0)
        for p in model.parameters().values():
            p.data = np.zeros_like(p.data)
        x = tensor(rng.uniform(size=(1, 32, 32, 3)))
        logits = model.logits(x)
        assert np.all(logits.data == 0.0)  # everything collapses to the head bias

    def test_permuted_skips_rejected(self, rng):
        model = DNet(DNetConfig(**TINY), seed=0)
        x = tensor(rng.uniform(size=(1, 64, 64, 3)))
        feats = model.encoder(x)
        g = encoder_concat(feats.b3, feats.b4, feats.b5)
        u = model.msif(g)
        with pytest.raises(ShapeError):
            model.decoder(u, (feats.skip4, feats.skip8, feats.skip2))

    def test_wrong_skip_count_rejected(self, rng):
        model = DNet(DNetConfig(**TINY), seed=0)
        x = tensor(rng.uniform(size=(1, 64, 64, 3)))
        feats = model.encoder(x)
        g = encoder_concat(feats.b3, feats.b4, feats.b5)
        u = model.msif(g)
        with pytest.raises(ShapeError):
            model.decoder(u, (feats.skip8, feats.skip4))


class TestDNetForward:
    def test_probability_range_and_shape(self, rng):
        model = DNet(DNetConfig(**TINY), seed=0)
        p = model(tensor(rng.uniform(size=(1, 64, 64, 3))))
        assert p.shape == (1, 64, 64, 1)
        assert p.data.min() > 0.0 and p.data.max() < 1.0

    def test_non_square_input(self, rng):
        model = DNet(DNetConfig(**TINY), seed=0)
        assert model(tensor(rng.uniform(size=(1, 32, 48, 3)))).shape == (1, 32, 48, 1)

    def test_deterministic_forward(self, rng):
        model = DNet(DNetConfig(**TINY), seed=0)
        x = tensor(rng.uniform(size=(2, 32, 32, 3)))
        assert np.array_equal(model(x).data, model(x).data)

    def test_bad_input_size_rejected(self, rng):
        model = DNet(DNetConfig(**TINY), seed=0)
        with pytest.raises(ShapeError):
            model(tensor(rng.uniform(size=(1, 30, 30, 3))))

    def test_msif_disabled_end_to_end(self, rng):
        model = DNet(DNetConfig(msif_enabled=False, **TINY), seed=0)
        p = model(tensor(rng.uniform(size=(1, 32, 32, 3))))
        assert p.shape == (1, 32, 32, 1)

    def test_batchnorm_variant_runs(self, rng):
        model = DNet(DNetConfig(batchnorm=True, **TINY), seed=0)
        p = model(tensor(rng.uniform(size=(2, 32, 32, 3))))
        assert np.isfinite(p.data).all()


class TestEndToEndGradients:
    def test_sampled_parameters_match_finite_differences(self, rng):
        with using_dtype(np.float64):
            cfg = DNetConfig(**TINY)
            model = DNet(cfg, seed=3)
            x = tensor(rng.uniform(0.2, 0.8, size=(1, 16, 16, 3)))
            target = tensor((rng.uniform(size=(1, 16, 16, 1)) > 0.7).astype(np.float64))
            loss_cfg = LossConfig(lam=1e-3)
            reg = model.kernel_parameters()

            def loss_fn():
                return total_loss(model(x), target, reg, loss_cfg).item()

            with recording() as g:
                grads = backward(total_loss(model(x), target, reg, loss_cfg), g)

            picks = [
                "root.conv1.w", "block2.unit1.spatial.w", "block4.unit2.spatial.w",
                "block5.unit3.restore.w", "msif.branch2.dw.w", "msif.fuse.w",
                "decoder.up2.w", "decoder.head.b",
            ]
            for name in picks:
                p = model.parameters()[name]
                entries = rng.choice(p.data.size, size=min(4, p.data.size), replace=False)
                # eps below the typical distance to relu/argmax kinks
                fd = fd_grad_entries(loss_fn, p, entries, eps=1e-5)
                analytic = grads[p].reshape(-1)[entries]
                assert max_rel_err(analytic, fd) < 1e-3, name


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        model = DNet(DNetConfig(dilations=(1, 2, 3), msif_rates=(3, 6, 8), **TINY), seed=7)
        first = tmp_path / "a.dnet"
        second = tmp_path / "b.dnet"
        save_checkpoint(model, first)
        reloaded = load_checkpoint(first)
        save_checkpoint(reloaded, second)
        assert first.read_bytes() == second.read_bytes()
        assert reloaded.cfg == model.cfg
        for name, p in model.parameters().items():
            assert np.array_equal(p.data, reloaded.parameters()[name].data)

    def test_forward_identical_after_reload(self, tmp_path, rng):
        model = DNet(DNetConfig(**TINY), seed=1)
        path = tmp_path / "m.dnet"
        save_checkpoint(model, path)
        reloaded = load_checkpoint(path)
        x = tensor(rng.uniform(size=(1, 32, 32, 3)))
        assert np.array_equal(model(x).data, reloaded(x).data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.dnet"
        path.write_bytes(b"NOTDN" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        model = DNet(DNetConfig(**TINY), seed=0)
        path = tmp_path / "m.dnet"
        save_checkpoint(model, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestEncoderLayerSpecs:
    def test_deepest_path_length(self):
        layers = encoder_layer_specs(DNetConfig())
        # 4 root layers + 5 stages * 3 units * 3 convs
        assert len(layers) == 4 + 45

    def test_dilations_land_on_late_spatial_convs(self):
        layers = encoder_layer_specs(DNetConfig(dilations=(1, 2, 4)))
        spatial_rates = [
            l.r for l in layers if l.name.endswith(".spatial") and "block4" in l.name
        ]
        assert spatial_rates == [1, 2, 4]
