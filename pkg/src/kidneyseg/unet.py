"""Valid-convolution 3-D U-Net and the two-resolution cascade.

Every stage is two 3^3 valid convolutions with ReLU; encoder stages are
joined by 2^3 max pooling, decoder stages by 2^3 stride-2 transposed
convolutions with center-crop skip concatenation, and the head is a 1^3
convolution followed by channel softmax. With two 3^3 convolutions per
stage the total spatial margin is

    margin(levels) = 8 * (2^(levels-1) - 1) + 4 * 2^(levels-1)

so a 4-level net eats 88 voxels (108 in -> 20 out) and a 2-level net
eats 16 (36 in -> 20 out).

The cascade runs a coarse-grid net (1 input channel, 2 classes) and a
fine-grid net (2 input channels, 3 classes). The bridge takes the
coarse foreground probability, nearest-upsamples it by the grid ratio,
zero-pads or center-crops it to the fine input size, multiplies it into
the raw fine patch, and feeds (raw, masked) to the fine net. The soft
probability keeps the whole cascade differentiable.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    concat_cropped,
    conv3d_valid,
    crop_center,
    elementwise_mul,
    maxpool2,
    pad_spatial,
    relu,
    select_channels,
    softmax_channels,
    spatial_dropout,
    transposed_conv2,
    upsample_nearest,
)
from .errors import AlignmentError, ShapeError


def margin(levels):
    """Total valid-convolution shrinkage per axis for a given depth."""
    if levels < 1:
        raise ShapeError(f"levels must be >= 1, got {levels}")
    return 8 * (2 ** (levels - 1) - 1) + 4 * 2 ** (levels - 1)


def validate_shape(levels, shape):
    """Walk the encoder/decoder size arithmetic; return the output shape.

    Raises ShapeError naming the first level whose geometry fails
    (too small to convolve, or odd-sized before a pooling).
    """
    sizes = list(shape)
    skips = []
    for level in range(levels - 1):
        sizes = [s - 4 for s in sizes]
        if min(sizes) < 1:
            raise ShapeError(f"level {level}: size {tuple(shape)} exhausted by convolutions")
        if any(s % 2 for s in sizes):
            raise ShapeError(f"level {level}: odd size {tuple(sizes)} cannot be pooled")
        skips.append(sizes)
        sizes = [s // 2 for s in sizes]
    sizes = [s - 4 for s in sizes]
    if min(sizes) < 1:
        raise ShapeError(f"level {levels - 1}: bottom stage has no voxels left")
    for level in reversed(range(levels - 1)):
        sizes = [2 * s for s in sizes]
        if any(up > sk for up, sk in zip(sizes, skips[level])):
            raise ShapeError(f"level {level}: upsampled size exceeds the skip path")
        sizes = [s - 4 for s in sizes]
        if min(sizes) < 1:
            raise ShapeError(f"level {level}: decoder stage has no voxels left")
    return tuple(sizes)


@dataclass(frozen=True)
class UNetConfig:
    base_filters: int
    levels: int
    in_channels: int
    out_classes: int
    input_size: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        for name in ("base_filters", "levels", "in_channels", "out_classes", "input_size"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ShapeError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        validate_shape(self.levels, (self.input_size,) * 3)

    @property
    def output_size(self):
        return self.input_size - margin(self.levels)


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class _Conv:
    """One parameterized convolution layer (weights + zero biases)."""

    def __init__(self, rng, c_in, c_out, k, name):
        fan = k**3
        self.w = Tensor(
            _glorot(rng, (c_out, c_in, k, k, k), c_in * fan, c_out * fan),
            requires_grad=True,
            name=name + ".w",
        )
        self.b = Tensor(np.zeros(c_out), requires_grad=True, name=name + ".b")


class _UpConv:
    """Transposed-convolution layer, kernel (c_in, c_out, 2, 2, 2)."""

    def __init__(self, rng, c_in, c_out, name):
        self.w = Tensor(
            _glorot(rng, (c_in, c_out, 2, 2, 2), c_in * 8, c_out * 8),
            requires_grad=True,
            name=name + ".w",
        )
        self.b = Tensor(np.zeros(c_out), requires_grad=True, name=name + ".b")


class _Stage:
    """Two 3^3 convolutions with ReLU, then optional spatial dropout."""

    def __init__(self, rng, c_in, c_out, name):
        self.conv1 = _Conv(rng, c_in, c_out, 3, name + ".conv1")
        self.conv2 = _Conv(rng, c_out, c_out, 3, name + ".conv2")

    def apply(self, tape, h, dropout_rate, training, rng):
        h = relu(tape, conv3d_valid(tape, h, self.conv1.w, self.conv1.b))
        h = relu(tape, conv3d_valid(tape, h, self.conv2.w, self.conv2.b))
        if training and dropout_rate > 0.0:
            h = spatial_dropout(tape, h, dropout_rate, rng, training=True)
        return h


class UNet:
    """The network: parameter container plus a pure forward function."""

    def __init__(self, cfg: UNetConfig, rng):
        self.cfg = cfg
        f = [cfg.base_filters * 2**i for i in range(cfg.levels)]
        self.enc = []
        c_in = cfg.in_channels
        for i in range(cfg.levels - 1):
            self.enc.append(_Stage(rng, c_in, f[i], f"enc{i}"))
            c_in = f[i]
        self.bottom = _Stage(rng, c_in, f[-1], "bottom")
        self.dec = []  # execution order: deepest first
        c_in = f[-1]
        for i in reversed(range(cfg.levels - 1)):
            up = _UpConv(rng, c_in, f[i], f"dec{i}.up")
            stage = _Stage(rng, 2 * f[i], f[i], f"dec{i}")
            self.dec.append((up, stage))
            c_in = f[i]
        self.out = _Conv(rng, c_in, cfg.out_classes, 1, "out")

    def parameterized_layers(self):
        """(w, b) pairs in execution order; the head comes last."""
        layers = []
        for stage in self.enc + [self.bottom]:
            layers += [(stage.conv1.w, stage.conv1.b), (stage.conv2.w, stage.conv2.b)]
        for up, stage in self.dec:
            layers.append((up.w, up.b))
            layers += [(stage.conv1.w, stage.conv1.b), (stage.conv2.w, stage.conv2.b)]
        layers.append((self.out.w, self.out.b))
        return layers

    def parameters(self):
        return [t for pair in self.parameterized_layers() for t in pair]

    def forward(self, tape, x, training=False, rng=None):
        """Input (in_channels, D, H, W) -> per-class probabilities."""
        if x.shape[0] != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} input channels, got {x.shape[0]}")
        validate_shape(self.cfg.levels, x.shape[1:])
        dr = self.cfg.dropout_rate
        h = x
        skips = []
        for stage in self.enc:
            h = stage.apply(tape, h, dr, training, rng)
            skips.append(h)
            h = maxpool2(tape, h)
        h = self.bottom.apply(tape, h, dr, training, rng)
        for (up, stage), skip in zip(self.dec, reversed(skips)):
            h = transposed_conv2(tape, h, up.w, up.b)
            h = concat_cropped(tape, skip, h)
            h = stage.apply(tape, h, dr, training, rng)
        logits = conv3d_valid(tape, h, self.out.w, self.out.b)
        return softmax_channels(tape, logits)


def build_unet(cfg: UNetConfig, rng) -> UNet:
    return UNet(cfg, rng)


# --------------------------------------------------------------- cascade


class CascadeModel:
    """Coarse-to-fine pair of U-Nets joined by the masking bridge."""

    def __init__(self, lowres_cfg: UNetConfig, highres_cfg: UNetConfig, ratio, rng):
        if highres_cfg.in_channels != 2:
            raise ShapeError("the fine net takes 2 channels (raw patch, masked patch)")
        if int(ratio) < 1:
            raise ShapeError(f"resolution ratio must be >= 1, got {ratio}")
        self.ratio = int(ratio)
        bridge = lowres_cfg.output_size * self.ratio
        if (bridge - highres_cfg.input_size) % 2:
            raise ShapeError(
                f"bridge size {bridge} and fine input {highres_cfg.input_size} "
                "differ by an odd margin"
            )
        self.lowres = UNet(lowres_cfg, rng)
        self.highres = UNet(highres_cfg, rng)
        self._frozen = False

    def parameters(self):
        return self.lowres.parameters() + self.highres.parameters()

    def named_parameters(self):
        return [("lowres." + p.name, p) for p in self.lowres.parameters()] + [
            ("highres." + p.name, p) for p in self.highres.parameters()
        ]

    def bridge_mask(self, tape, low_probs, target_size):
        """Foreground probability -> upsample -> pad or crop to size."""
        fg = select_channels(tape, low_probs, 1, 2)
        up = upsample_nearest(tape, fg, self.ratio)
        size = up.shape[1]
        if size < target_size:
            return pad_spatial(tape, up, (target_size - size) // 2)
        if size > target_size:
            return crop_center(tape, up, (target_size,) * 3)
        return up

    def forward(self, tape, low_patch, high_patch, training=False, rng=None,
                mask_override=None, centers=None):
        """Run both nets; returns (low_probs, high_probs).

        `centers` is an optional (low_center_mm, high_center_mm) pair
        recorded by the sampler; mismatched centers mean the patches do
        not share a physical footprint. `mask_override` replaces the
        bridge mask (diagnostics only).
        """
        if centers is not None:
            low_c, high_c = centers
            if not np.allclose(low_c, high_c, atol=1e-6):
                raise AlignmentError(f"patch centers differ: {low_c} vs {high_c}")
        if low_patch.shape != (1,) + (self.lowres.cfg.input_size,) * 3:
            raise AlignmentError(f"coarse patch has shape {low_patch.shape}")
        if high_patch.shape != (1,) + (self.highres.cfg.input_size,) * 3:
            raise AlignmentError(f"fine patch has shape {high_patch.shape}")

        low_probs = self.lowres.forward(tape, low_patch, training, rng)
        if mask_override is None:
            mask = self.bridge_mask(tape, low_probs, self.highres.cfg.input_size)
        else:
            mask = mask_override if isinstance(mask_override, Tensor) else Tensor(mask_override)
        masked = elementwise_mul(tape, high_patch, mask)
        pair = concat_cropped(tape, high_patch, masked)  # (raw, masked)
        high_probs = self.highres.forward(tape, pair, training, rng)
        return low_probs, high_probs


def cascade_forward(model, tape, low_patch, high_patch, training=False, rng=None, **kw):
    return model.forward(tape, low_patch, high_patch, training, rng, **kw)


def freeze_lowres(model: CascadeModel) -> CascadeModel:
    """Freeze every coarse-net parameter except the last three layers.

    "Layer" means a parameterized layer; the survivors are the decoder's
    final two convolutions and the 1^3 output head. Idempotent.
    """
    layers = model.lowres.parameterized_layers()
    for w, b in layers[:-3]:
        w.requires_grad = False
        b.requires_grad = False
    for w, b in layers[-3:]:
        w.requires_grad = True
        b.requires_grad = True
    model._frozen = True
    return model
