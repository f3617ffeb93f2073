"""Video-chunk encoder and voxel-to-frame decoder.

The encoder runs temporal (3D) convolutions until the 32-frame axis is
collapsed to one, then 2D convolutions and a fully connected head emitting
one value per voxel. The decoder maps a voxel vector to a low-resolution
feature map and upsamples it to a full RGB frame squashed by a sigmoid.

Reference dimensions follow the layer vocabulary of the original model
figure; the channel counts are not published and are defaults only.
"""

from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

PARAMS_VERSION = 1
# float32 sigmoid rounds to exactly 1.0 above ~16.6; keep outputs strictly inside (0, 1)
LOGIT_LIMIT = 15.0


@dataclass(frozen=True)
class EncoderSpec:
    n_voxels: int
    height: int = 112
    width: int = 112
    n_frames: int = 32
    # (out channels, temporal kernel, spatial kernel, temporal stride)
    temporal_conv_blocks: tuple = ((16, 5, 3, 4), (32, 3, 3, 2), (64, 3, 3, 4))
    # (out channels, kernel, stride, pooling kind "max" | "avg")
    spatial_conv_blocks: tuple = ((128, 3, 1, "avg"), (128, 3, 1, "avg"))
    fc_hidden: tuple = (1024,)
    dropout_rate: float = 0.25
    use_batch_norm: bool = True

    @property
    def fc_widths(self) -> tuple:
        return tuple(self.fc_hidden) + (self.n_voxels,)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        d = dict(d)
        for k in ("temporal_conv_blocks", "spatial_conv_blocks"):
            if k in d:
                d[k] = tuple(tuple(b) for b in d[k])
        if "fc_hidden" in d:
            d["fc_hidden"] = tuple(d["fc_hidden"])
        return cls(**d)


@dataclass(frozen=True)
class DecoderSpec:
    n_voxels: int
    height: int = 112
    width: int = 112
    # fully connected entry: V -> channels x h0 x w0
    entry_channels: int = 256
    entry_height: int = 7
    entry_width: int = 7
    # (scale factor, out channels, kernel)
    upsample_blocks: tuple = ((2, 128, 3), (2, 64, 3), (2, 32, 3), (2, 32, 3))
    output_kernel: int = 3
    use_batch_norm: bool = True

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderSpec":
        d = dict(d)
        if "upsample_blocks" in d:
            d["upsample_blocks"] = tuple(tuple(b) for b in d["upsample_blocks"])
        return cls(**d)


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def encoder_shapes(spec: EncoderSpec) -> list:
    """(channels, frames, height, width) after every conv block, plus the flat width."""
    c, t, h, w = 3, spec.n_frames, spec.height, spec.width
    shapes = []
    for out_ch, kt, ks, st in spec.temporal_conv_blocks:
        t = _conv_out(t, kt, st, kt // 2)
        h = _conv_out(h, ks, 1, ks // 2) // 2
        w = _conv_out(w, ks, 1, ks // 2) // 2
        c = out_ch
        shapes.append((c, t, h, w))
    if t != 1:
        raise ValueError(f"temporal extent must collapse to 1 before 2D blocks, got {t}")
    for out_ch, k, s, _ in spec.spatial_conv_blocks:
        h = _conv_out(h, k, s, k // 2) // 2
        w = _conv_out(w, k, s, k // 2) // 2
        c = out_ch
        shapes.append((c, 1, h, w))
    if h < 1 or w < 1:
        raise ValueError(f"spatial extent vanished for {spec.height}x{spec.width} input")
    return shapes


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        shapes = encoder_shapes(spec)
        layers = []
        in_ch = 3
        for out_ch, kt, ks, st in spec.temporal_conv_blocks:
            layers.append(nn.Conv3d(in_ch, out_ch, (kt, ks, ks), stride=(st, 1, 1),
                                    padding=(kt // 2, ks // 2, ks // 2)))
            layers.append(nn.ReLU())
            if spec.use_batch_norm:
                layers.append(nn.BatchNorm3d(out_ch))
            layers.append(nn.MaxPool3d((1, 2, 2)))
            in_ch = out_ch
        self.temporal = nn.Sequential(*layers)

        layers = []
        for out_ch, k, s, pool in spec.spatial_conv_blocks:
            layers.append(nn.Conv2d(in_ch, out_ch, k, stride=s, padding=k // 2))
            layers.append(nn.ReLU())
            if spec.use_batch_norm:
                layers.append(nn.BatchNorm2d(out_ch))
            if pool == "max":
                layers.append(nn.MaxPool2d(2))
            elif pool == "avg":
                layers.append(nn.AvgPool2d(2))
            else:
                raise ValueError(f"unknown pooling kind {pool!r}")
            in_ch = out_ch
        self.spatial = nn.Sequential(*layers)

        c, _, h, w = shapes[-1]
        widths = (c * h * w,) + spec.fc_widths
        head = []
        for i in range(len(widths) - 1):
            head.append(nn.Linear(widths[i], widths[i + 1]))
            if i < len(widths) - 2:
                head.append(nn.ReLU())
                head.append(nn.Dropout(spec.dropout_rate))
        self.head = nn.Sequential(*head)

    def forward(self, x):
        s = self.spec
        if x.dim() != 5 or tuple(x.shape[1:]) != (s.n_frames, 3, s.height, s.width):
            raise ValueError(f"expected [B, {s.n_frames}, 3, {s.height}, {s.width}], "
                             f"got {tuple(x.shape)}")
        x = x.permute(0, 2, 1, 3, 4)  # -> [B, 3, T, H, W]
        x = self.temporal(x)
        x = x.squeeze(2)
        x = self.spatial(x)
        return self.head(x.flatten(1))


class Decoder(nn.Module):
    def __init__(self, spec: DecoderSpec):
        super().__init__()
        self.spec = spec
        scale = math.prod(b[0] for b in spec.upsample_blocks) if spec.upsample_blocks else 1
        if (spec.entry_height * scale, spec.entry_width * scale) != (spec.height, spec.width):
            raise ValueError("decoder upsampling does not reach the target frame size")
        self.entry = nn.Linear(spec.n_voxels,
                               spec.entry_channels * spec.entry_height * spec.entry_width)
        layers = []
        in_ch = spec.entry_channels
        for factor, out_ch, k in spec.upsample_blocks:
            layers.append(nn.Upsample(scale_factor=factor, mode="nearest"))
            layers.append(nn.Conv2d(in_ch, out_ch, k, padding=k // 2))
            layers.append(nn.ReLU())
            if spec.use_batch_norm:
                layers.append(nn.BatchNorm2d(out_ch))
            in_ch = out_ch
        self.body = nn.Sequential(*layers)
        k = spec.output_kernel
        self.out = nn.Conv2d(in_ch, 3, k, padding=k // 2)

    def logits(self, v):
        s = self.spec
        if v.dim() != 2 or v.shape[1] != s.n_voxels:
            raise ValueError(f"expected [B, {s.n_voxels}], got {tuple(v.shape)}")
        x = F.relu(self.entry(v))
        x = x.view(-1, s.entry_channels, s.entry_height, s.entry_width)
        return self.out(self.body(x))

    def forward(self, v):
        return torch.sigmoid(self.logits(v).clamp(-LOGIT_LIMIT, LOGIT_LIMIT))


# ---------------------------------------------------------------------------
# functional surface


def encoder_forward(encoder: Encoder, chunk_batch, train_mode: bool = False):
    """[B, 32, 3, H, W] -> predicted voxels [B, V]."""
    encoder.train(train_mode)
    return encoder(chunk_batch)


def decoder_forward(decoder: Decoder, voxels, train_mode: bool = False):
    """[B, V] -> reconstructed frames [B, 3, H, W] in (0, 1)."""
    decoder.train(train_mode)
    return decoder(voxels)


def end_to_end_forward(encoder: Encoder, decoder: Decoder, chunk_batch, train_mode: bool = False):
    """Decoder applied to the encoder's prediction; returns ``(v_hat, f_hat)``."""
    v_hat = encoder_forward(encoder, chunk_batch, train_mode)
    f_hat = decoder_forward(decoder, v_hat, train_mode)
    return v_hat, f_hat


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Seeded fan-in scaled uniform init (He bound sqrt(6 / fan_in)); zero biases.

    Normalization layers start at unit scale, zero shift and fresh running
    statistics. Parameters are visited in registration order, so the result
    depends only on the spec and the seed.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                m.weight.copy_((torch.rand(m.weight.shape, generator=gen) * 2 - 1) * bound)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.modules.batchnorm._BatchNorm):
                m.reset_parameters()
    return module


def build_encoder(spec: EncoderSpec, seed: int = 0) -> Encoder:
    return init_params(Encoder(spec), seed)


def build_decoder(spec: DecoderSpec, seed: int = 0) -> Decoder:
    return init_params(Decoder(spec), seed)


def model_params(module: nn.Module, prefix: str = "") -> "OrderedDict[str, torch.Tensor]":
    """Flat ordered name -> tensor table (weights, biases, normalization statistics)."""
    return OrderedDict((prefix + k, v.detach().clone()) for k, v in module.state_dict().items())


def n_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# preset sizes


def desk_encoder_spec(n_voxels: int, size: int = 32) -> EncoderSpec:
    """Small encoder for CPU-scale synthetic runs (32x32 frames)."""
    return EncoderSpec(
        n_voxels=n_voxels, height=size, width=size,
        temporal_conv_blocks=((8, 5, 3, 4), (16, 3, 3, 2), (16, 3, 3, 4)),
        spatial_conv_blocks=((32, 3, 1, "avg"), (32, 3, 1, "avg")),
        fc_hidden=(256,), dropout_rate=0.25,
    )


def desk_decoder_spec(n_voxels: int, size: int = 32) -> DecoderSpec:
    return DecoderSpec(
        n_voxels=n_voxels, height=size, width=size,
        entry_channels=16, entry_height=size // 4, entry_width=size // 4,
        upsample_blocks=((2, 16, 3), (2, 16, 3)),
    )


def tiny_encoder_spec(n_voxels: int = 128, size: int = 32) -> EncoderSpec:
    """Under 5e3 parameters; used for finite-difference gradient checks."""
    return EncoderSpec(
        n_voxels=n_voxels, height=size, width=size,
        temporal_conv_blocks=((2, 5, 3, 4), (4, 3, 3, 2), (4, 3, 3, 4)),
        spatial_conv_blocks=((4, 3, 1, "max"), (4, 3, 1, "avg")),
        fc_hidden=(16,), dropout_rate=0.0,
    )


def tiny_decoder_spec(n_voxels: int = 128, size: int = 32) -> DecoderSpec:
    return DecoderSpec(
        n_voxels=n_voxels, height=size, width=size,
        entry_channels=1, entry_height=size // 8, entry_width=size // 8,
        upsample_blocks=((2, 4, 3), (2, 4, 3), (2, 3, 3)),
    )
