"""Assembly of the dilated multi-scale segmentation network.

The encoder is a residual backbone with a total downsampling factor of 16:
a strided root block, then five stages of three bottleneck units each. The
3x3 convolutions inside the last two stages are dilated with a per-unit
rate triple (d1, d2, d3) so the receptive field grows without further
striding; the outputs of stages 3, 4 and 5 (all at 1/16 resolution) are
channel-concatenated into a single feature map. A multi-scale fusion module
pools that map through five parallel branches (a 1x1 convolution, three
dilated depthwise-separable 3x3 convolutions, and a global-average branch
that is upsampled back), concatenates them, and fuses to a fixed width. The
decoder doubles resolution four times with transposed convolutions,
concatenating an encoder skip feature after each of the first three
doublings, and ends in two 3x3 refinement convolutions and a 1x1 head whose
sigmoid gives the per-pixel vessel probability.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .tensor import (
    Tensor,
    concat_channels,
    default_dtype,
    elementwise_add,
    relu,
    sigmoid,
)
from .convops import (
    ConvKernel,
    batch_norm,
    bilinear_upsample,
    conv2d,
    depthwise_separable_conv,
    global_avg_pool,
    max_pool,
    same_pads,
    transposed_conv,
)
from .receptive import LayerSpec

__all__ = [
    "DNetConfig",
    "ResidualBottleneck",
    "Encoder",
    "EncoderFeatures",
    "MSIF",
    "Decoder",
    "DNet",
    "build_encoder",
    "encoder_concat",
    "encoder_layer_specs",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

DOWNSAMPLE_FACTOR = 16

# Backbone channel plan: root convs, then (reduce, spatial, restore) per
# stage. Stages 1 and 2 intentionally share one width plan and stage 5
# narrows below stage 4.
ROOT_WIDTHS = (32, 32, 64)
BLOCK_WIDTHS = {
    1: (64, 64, 128),
    2: (64, 64, 128),
    3: (128, 128, 256),
    4: (256, 256, 512),
    5: (128, 128, 256),
}
BLOCK_ENTRY_STRIDE = {1: 1, 2: 2, 3: 2, 4: 1, 5: 1}
MSIF_WIDTH = 256
DECODER_WIDTHS = (128, 64, 64, 32)


def _is_valid_triple(t: tuple[int, int, int]) -> bool:
    return all(v >= 1 for v in t) and (
        t == (1, 1, 1) or (t[0] < t[1] < t[2])
    )


@dataclass(frozen=True)
class DNetConfig:
    """Architecture knobs.

    ``dilations`` is the per-unit rate triple of the last two encoder
    stages; it must be strictly increasing, except for the all-ones baseline
    used in ablations. The same rule applies to ``msif_rates``.
    ``channels_scale`` scales every width in the plan (minimum 1 channel),
    which is how desk-scale models are built.
    """

    dilations: tuple[int, int, int] = (1, 2, 4)
    msif_rates: tuple[int, int, int] = (3, 6, 12)
    msif_enabled: bool = True
    in_channels: int = 3
    channels_scale: float = 1.0
    batchnorm: bool = False

    def __post_init__(self) -> None:
        if not _is_valid_triple(tuple(self.dilations)):
            raise ConfigError(
                f"dilations must be strictly increasing or (1,1,1), got {self.dilations}"
            )
        if not _is_valid_triple(tuple(self.msif_rates)):
            raise ConfigError(
                f"msif_rates must be strictly increasing or (1,1,1), got {self.msif_rates}"
            )
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if not (0.0 < self.channels_scale <= 64.0):
            raise ConfigError(f"channels_scale out of range: {self.channels_scale}")
        scale_micro = round(self.channels_scale * 1_000_000)
        if abs(self.channels_scale - scale_micro / 1_000_000) > 1e-12:
            raise ConfigError(
                "channels_scale must be a multiple of 1e-6 so checkpoints can store it"
            )

    def width(self, channels: int) -> int:
        return max(1, int(round(channels * self.channels_scale)))


class _Builder:
    """Seeded parameter factory with an ordered name registry.

    Initialization is fan-in-scaled uniform (bound sqrt(6 / fan_in)) for
    weights and zero for biases, keeping activations bounded without
    normalization layers.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}
        self.kernel_weights: list[Tensor] = []

    def _register(self, name: str, t: Tensor) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.params[name] = t
        return t

    def _weight(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = np.sqrt(6.0 / fan_in)
        data = self.rng.uniform(-bound, bound, size=shape).astype(default_dtype())
        t = Tensor(data, requires_grad=True)
        self._register(name, t)
        self.kernel_weights.append(t)
        return t

    def _bias(self, name: str, cout: int) -> Tensor:
        t = Tensor(np.zeros((1, 1, 1, cout), dtype=default_dtype()), requires_grad=True)
        return self._register(name, t)

    def conv(
        self,
        name: str,
        k: int,
        cin: int,
        cout: int,
        stride: int = 1,
        dilation: int = 1,
        bias: bool = True,
    ) -> ConvKernel:
        w = self._weight(f"{name}.w", (k, k, cin, cout), fan_in=k * k * cin)
        b = self._bias(f"{name}.b", cout) if bias else None
        return ConvKernel(w, b, stride, dilation, same_pads(k, dilation, stride))

    def depthwise(self, name: str, k: int, c: int, dilation: int) -> ConvKernel:
        w = self._weight(f"{name}.w", (k, k, c, 1), fan_in=k * k)
        b = self._bias(f"{name}.b", c)
        return ConvKernel(w, b, 1, dilation, same_pads(k, dilation, 1))

    def tconv(self, name: str, k: int, cin: int, cout: int, stride: int) -> ConvKernel:
        w = self._weight(f"{name}.w", (k, k, cin, cout), fan_in=k * k * cin)
        b = self._bias(f"{name}.b", cout)
        return ConvKernel(w, b, stride, 1, (0, 0, 0, 0))

    def bn(self, name: str, c: int) -> tuple[Tensor, Tensor]:
        gamma = Tensor(np.ones((1, 1, 1, c), dtype=default_dtype()), requires_grad=True)
        beta = Tensor(np.zeros((1, 1, 1, c), dtype=default_dtype()), requires_grad=True)
        self._register(f"{name}.gamma", gamma)
        self._register(f"{name}.beta", beta)
        return gamma, beta


class _ConvUnit:
    """Convolution with optional batch norm and optional ReLU."""

    def __init__(self, builder: _Builder, name: str, kernel: ConvKernel,
                 use_bn: bool, activate: bool):
        self.kernel = kernel
        self.activate = activate
        self.bn = builder.bn(f"{name}.bn", kernel.out_channels) if use_bn else None

    def __call__(self, x: Tensor) -> Tensor:
        h = conv2d(x, self.kernel)
        if self.bn is not None:
            h = batch_norm(h, *self.bn)
        return relu(h) if self.activate else h


class ResidualBottleneck:
    """1x1 reduce -> 3x3 spatial -> 1x1 restore with an additive shortcut.

    The spatial convolution carries the unit's stride and dilation. The
    shortcut is the identity unless channels or resolution change, in which
    case a 1x1 projection (with the unit's stride) aligns it. ReLU follows
    the first two convolutions and the post-addition sum.
    """

    def __init__(
        self,
        builder: _Builder,
        name: str,
        cin: int,
        widths: tuple[int, int, int],
        stride: int = 1,
        dilation: int = 1,
        use_bn: bool = False,
    ):
        c_reduce, c_spatial, c_out = widths
        self.reduce = _ConvUnit(
            builder, f"{name}.reduce",
            builder.conv(f"{name}.reduce", 1, cin, c_reduce), use_bn, True,
        )
        self.spatial = _ConvUnit(
            builder, f"{name}.spatial",
            builder.conv(f"{name}.spatial", 3, c_reduce, c_spatial, stride, dilation),
            use_bn, True,
        )
        self.restore = _ConvUnit(
            builder, f"{name}.restore",
            builder.conv(f"{name}.restore", 1, c_spatial, c_out), use_bn, False,
        )
        if cin != c_out or stride != 1:
            self.project = _ConvUnit(
                builder, f"{name}.project",
                builder.conv(f"{name}.project", 1, cin, c_out, stride), use_bn, False,
            )
        else:
            self.project = None
        self.out_channels = c_out

    def forward(self, v: Tensor) -> Tensor:
        h = self.restore(self.spatial(self.reduce(v)))
        shortcut = self.project(v) if self.project is not None else v
        return relu(elementwise_add(shortcut, h))

    __call__ = forward


@dataclass
class EncoderFeatures:
    """Deep stage outputs (all at 1/16) plus the decoder skip sources."""

    b3: Tensor
    b4: Tensor
    b5: Tensor
    skip2: Tensor  # root output before pooling, 1/2 resolution
    skip4: Tensor  # pooled root output, 1/4 resolution
    skip8: Tensor  # stage-2 output, 1/8 resolution


class Encoder:
    """Root block plus five residual stages, total downsampling 16."""

    def __init__(self, builder: _Builder, cfg: DNetConfig):
        bn = cfg.batchnorm
        w = cfg.width
        c1, c2, c3 = (w(c) for c in ROOT_WIDTHS)
        self.root1 = _ConvUnit(builder, "root.conv1",
                               builder.conv("root.conv1", 3, cfg.in_channels, c1, 2), bn, True)
        self.root2 = _ConvUnit(builder, "root.conv2",
                               builder.conv("root.conv2", 3, c1, c2), bn, True)
        self.root3 = _ConvUnit(builder, "root.conv3",
                               builder.conv("root.conv3", 3, c2, c3), bn, True)

        self.blocks: list[list[ResidualBottleneck]] = []
        cin = c3
        for stage in range(1, 6):
            widths = tuple(w(c) for c in BLOCK_WIDTHS[stage])
            units = []
            for unit in range(3):
                stride = BLOCK_ENTRY_STRIDE[stage] if unit == 0 else 1
                dilation = cfg.dilations[unit] if stage in (4, 5) else 1
                block = ResidualBottleneck(
                    builder, f"block{stage}.unit{unit + 1}", cin, widths,
                    stride=stride, dilation=dilation, use_bn=bn,
                )
                units.append(block)
                cin = block.out_channels
            self.blocks.append(units)
        self.out_channels = {
            stage: self.blocks[stage - 1][-1].out_channels for stage in range(1, 6)
        }

    def forward(self, x: Tensor) -> EncoderFeatures:
        n, h, w, c = x.shape
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ShapeError(
                f"encoder input spatial dims must be divisible by {DOWNSAMPLE_FACTOR}, "
                f"got {h}x{w}"
            )
        h1 = self.root3(self.root2(self.root1(x)))  # 1/2
        pooled = max_pool(h1, 3, 2, same_pads(3, 1, 2))  # 1/4
        stage_out = pooled
        outputs = {}
        for stage, units in enumerate(self.blocks, start=1):
            for unit in units:
                stage_out = unit(stage_out)
            outputs[stage] = stage_out
        return EncoderFeatures(
            b3=outputs[3], b4=outputs[4], b5=outputs[5],
            skip2=h1, skip4=pooled, skip8=outputs[2],
        )

    __call__ = forward


def build_encoder(cfg: DNetConfig, seed: int = 0) -> Encoder:
    """Standalone encoder with its own parameter store (mainly for tests)."""
    builder = _Builder(np.random.default_rng(seed))
    enc = Encoder(builder, cfg)
    enc.params = builder.params  # type: ignore[attr-defined]
    return enc


def encoder_concat(b3: Tensor, b4: Tensor, b5: Tensor) -> Tensor:
    """Concatenate the three deep stage outputs, in stage order."""
    return concat_channels((b3, b4, b5))


class MSIF:
    """Multi-scale fusion: five parallel branches concatenated and fused.

    Branches: a 1x1 convolution keeping the current scale, three dilated
    depthwise-separable 3x3 convolutions at the configured rates, and a
    global-average branch (spatial mean, 1x1 convolution, bilinear upsample
    back to the input size). Every branch emits the same width; the stacked
    result is fused by a 1x1 convolution to that width again.
    """

    def __init__(self, builder: _Builder, cfg: DNetConfig, cin: int):
        width = cfg.width(MSIF_WIDTH)
        bn = cfg.batchnorm
        self.enabled = cfg.msif_enabled
        self.rates = cfg.msif_rates
        self.point = _ConvUnit(builder, "msif.point",
                               builder.conv("msif.point", 1, cin, width), bn, True)
        self.sep_branches = []
        for i, rate in enumerate(cfg.msif_rates, start=1):
            dw = builder.depthwise(f"msif.branch{i}.dw", 3, cin, rate)
            pw = builder.conv(f"msif.branch{i}.pw", 1, cin, width)
            pw_bn = builder.bn(f"msif.branch{i}.bn", width) if bn else None
            self.sep_branches.append((dw, pw, pw_bn))
        self.gap_conv = _ConvUnit(builder, "msif.gap",
                                  builder.conv("msif.gap", 1, cin, width), bn, True)
        self.fuse = _ConvUnit(builder, "msif.fuse",
                              builder.conv("msif.fuse", 1, 5 * width, width), bn, True)
        self.out_channels = width

    def branch_outputs(self, g: Tensor) -> list[Tensor]:
        outs = [self.point(g)]
        for dw, pw, pw_bn in self.sep_branches:
            h = depthwise_separable_conv(g, dw, pw)
            if pw_bn is not None:
                h = batch_norm(h, *pw_bn)
            outs.append(relu(h))
        pooled = self.gap_conv(global_avg_pool(g))
        outs.append(bilinear_upsample(pooled, g.shape[1], g.shape[2]))
        return outs

    def forward(self, g: Tensor) -> Tensor:
        if not self.enabled:
            raise ConfigError(
                "msif_forward called while the module is disabled; "
                "the caller must route around it"
            )
        return self.fuse(concat_channels(self.branch_outputs(g)))

    __call__ = forward


class Decoder:
    """Four transposed-conv doublings back to input resolution.

    The first three doublings each concatenate the matching encoder skip and
    fuse with a 3x3 convolution; the last is followed by two 3x3 refinement
    convolutions and a 1x1 head producing single-channel logits.
    """

    def __init__(self, builder: _Builder, cfg: DNetConfig, cin: int,
                 skip_channels: tuple[int, int, int]):
        bn = cfg.batchnorm
        w1, w2, w3, w4 = (cfg.width(c) for c in DECODER_WIDTHS)
        s8, s4, s2 = skip_channels
        self.up1 = builder.tconv("decoder.up1", 2, cin, w1, 2)
        self.fuse1 = _ConvUnit(builder, "decoder.fuse1",
                               builder.conv("decoder.fuse1", 3, w1 + s8, w1), bn, True)
        self.up2 = builder.tconv("decoder.up2", 2, w1, w2, 2)
        self.fuse2 = _ConvUnit(builder, "decoder.fuse2",
                               builder.conv("decoder.fuse2", 3, w2 + s4, w2), bn, True)
        self.up3 = builder.tconv("decoder.up3", 2, w2, w3, 2)
        self.fuse3 = _ConvUnit(builder, "decoder.fuse3",
                               builder.conv("decoder.fuse3", 3, w3 + s2, w3), bn, True)
        self.up4 = builder.tconv("decoder.up4", 2, w3, w4, 2)
        self.refine1 = _ConvUnit(builder, "decoder.refine1",
                                 builder.conv("decoder.refine1", 3, w4, w4), bn, True)
        self.refine2 = _ConvUnit(builder, "decoder.refine2",
                                 builder.conv("decoder.refine2", 3, w4, w4), bn, True)
        self.head = builder.conv("decoder.head", 1, w4, 1)

    @staticmethod
    def _check_skip(stage: str, h: Tensor, skip: Tensor) -> None:
        if skip.shape[:3] != h.shape[:3]:
            raise ShapeError(
                f"decoder {stage}: skip resolution mismatch, feature {h.shape} "
                f"vs skip {skip.shape}"
            )

    def forward(self, u: Tensor, skips) -> Tensor:
        skips = tuple(skips)
        if len(skips) != 3:
            raise ShapeError(f"decoder expects 3 skips (1/8, 1/4, 1/2), got {len(skips)}")
        s8, s4, s2 = skips
        h = relu(transposed_conv(u, self.up1))
        self._check_skip("stage1", h, s8)
        h = self.fuse1(concat_channels((h, s8)))
        h = relu(transposed_conv(h, self.up2))
        self._check_skip("stage2", h, s4)
        h = self.fuse2(concat_channels((h, s4)))
        h = relu(transposed_conv(h, self.up3))
        self._check_skip("stage3", h, s2)
        h = self.fuse3(concat_channels((h, s2)))
        h = relu(transposed_conv(h, self.up4))
        h = self.refine2(self.refine1(h))
        return conv2d(h, self.head)

    __call__ = forward


class DNet:
    """End-to-end segmentation model: encoder, optional fusion, decoder."""

    def __init__(self, cfg: DNetConfig, seed: int = 0):
        self.cfg = cfg
        builder = _Builder(np.random.default_rng(seed))
        self.encoder = Encoder(builder, cfg)
        concat_width = sum(self.encoder.out_channels[s] for s in (3, 4, 5))
        if cfg.msif_enabled:
            self.msif: MSIF | None = MSIF(builder, cfg, concat_width)
            decoder_in = self.msif.out_channels
        else:
            self.msif = None
            decoder_in = concat_width
        skip_channels = (
            self.encoder.out_channels[2],          # 1/8
            self.encoder.blocks[0][0].reduce.kernel.in_channels,  # 1/4 (pooled root)
            self.encoder.root3.kernel.out_channels,  # 1/2 (pre-pool root)
        )
        self.decoder = Decoder(builder, cfg, decoder_in, skip_channels)
        self._params = builder.params
        self._kernel_weights = builder.kernel_weights

    def logits(self, image: Tensor) -> Tensor:
        feats = self.encoder(image)
        g = encoder_concat(feats.b3, feats.b4, feats.b5)
        u = self.msif(g) if self.msif is not None else g
        return self.decoder(u, (feats.skip8, feats.skip4, feats.skip2))

    def forward(self, image: Tensor) -> Tensor:
        """Per-pixel vessel probability map, same spatial size as the input."""
        return sigmoid(self.logits(image))

    __call__ = forward

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def kernel_parameters(self) -> list[Tensor]:
        """Convolution weights only (no biases); the L2-regularized set."""
        return list(self._kernel_weights)


def encoder_layer_specs(cfg: DNetConfig) -> list[LayerSpec]:
    """The deepest serial path through the encoder, for RF analysis."""
    layers = [
        LayerSpec("conv", 3, 2, 1, "root.conv1"),
        LayerSpec("conv", 3, 1, 1, "root.conv2"),
        LayerSpec("conv", 3, 1, 1, "root.conv3"),
        LayerSpec("pool", 3, 2, 1, "root.pool"),
    ]
    for stage in range(1, 6):
        for unit in range(3):
            stride = BLOCK_ENTRY_STRIDE[stage] if unit == 0 else 1
            dilation = cfg.dilations[unit] if stage in (4, 5) else 1
            base = f"block{stage}.unit{unit + 1}"
            layers.append(LayerSpec("conv", 1, 1, 1, f"{base}.reduce"))
            layers.append(LayerSpec("conv", 3, stride, dilation, f"{base}.spatial"))
            layers.append(LayerSpec("conv", 1, 1, 1, f"{base}.restore"))
    return layers


CHECKPOINT_MAGIC = b"DNET1"
_HEADER = struct.Struct("<11I")  # d1 d2 d3 msif r1 r2 r3 in_ch scale_micro bn n_params


def save_checkpoint(model: DNet, path) -> None:
    """Flat binary container: magic, config header, then named tensors.

    Each tensor is stored as (name length, name bytes, 4 dims, little-endian
    32-bit floats); save -> load -> save reproduces the file byte for byte.
    """
    cfg = model.cfg
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            _HEADER.pack(
                *cfg.dilations,
                1 if cfg.msif_enabled else 0,
                *cfg.msif_rates,
                cfg.in_channels,
                round(cfg.channels_scale * 1_000_000),
                1 if cfg.batchnorm else 0,
                len(params),
            )
        )
        for name, t in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<4I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointError("checkpoint truncated")
    return data


def load_checkpoint(path) -> DNet:
    """Rebuild a model from a checkpoint; parameter sets must match exactly."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
        (d1, d2, d3, msif, r1, r2, r3, in_ch, scale_micro, bn, n_params) = _HEADER.unpack(
            _read_exact(fh, _HEADER.size)
        )
        cfg = DNetConfig(
            dilations=(d1, d2, d3),
            msif_rates=(r1, r2, r3),
            msif_enabled=bool(msif),
            in_channels=in_ch,
            channels_scale=scale_micro / 1_000_000,
            batchnorm=bool(bn),
        )
        model = DNet(cfg, seed=0)
        params = model.parameters()
        seen = set()
        for _ in range(n_params):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            dims = struct.unpack("<4I", _read_exact(fh, 16))
            count = int(np.prod(dims))
            raw = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(dims)
            target = params.get(name)
            if target is None:
                raise CheckpointError(f"unknown parameter {name!r} in checkpoint")
            if target.shape != dims:
                raise CheckpointError(
                    f"parameter {name!r} has shape {dims} but model expects {target.shape}"
                )
            target.data = raw.astype(default_dtype())
            seen.add(name)
        if len(seen) != len(params):
            missing = sorted(set(params) - seen)
            raise CheckpointError(f"checkpoint missing parameters: {missing[:5]} ...")
        if fh.read(1):
            raise CheckpointError("trailing data after checkpoint payload")
    return model
