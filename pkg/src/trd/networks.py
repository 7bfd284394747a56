"""Frozen teacher encoder and trainable student decoder.

Both networks speak in feature pyramids: lists of three ``(N, C_i, h_i, w_i)``
tensors at strides 4, 8 and 16 of the input. The decoder consumes a bottleneck
embedding at stride 32 and emits the pyramid shallowest level first.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .exceptions import ConfigError, DimensionError, WeightLoadError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneProfile:
    name: str
    channel_counts: tuple[int, int, int]
    embedding_channels: int
    input_size: int
    weight_source: str  # "pretrained-file" | "seeded-random"
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    seed: int = 0
    weights_path: str | None = None

    def __post_init__(self):
        c = self.channel_counts
        if len(c) != 3 or not c[0] < c[1] < c[2]:
            raise ConfigError(f"channel_counts must be 3 strictly increasing ints, got {c}")
        if self.input_size % 32:
            raise ConfigError("input_size must be a multiple of 32")
        if self.weight_source not in ("pretrained-file", "seeded-random"):
            raise ConfigError(f"unknown weight_source {self.weight_source!r}")

    def level_shapes(self) -> list[tuple[int, int, int]]:
        """Per-level ``(C, h, w)`` of every pyramid produced for this profile."""
        return [(c, self.input_size // 2 ** (i + 2), self.input_size // 2 ** (i + 2))
                for i, c in enumerate(self.channel_counts)]

    def embedding_shape(self) -> tuple[int, int, int]:
        s = self.input_size // 32
        return (self.embedding_channels, s, s)


def get_profile(name: str, seed: int = 0, weights_path: str | None = None) -> BackboneProfile:
    if name == "toy":
        return BackboneProfile("toy", (16, 32, 64), 64, 64, "seeded-random", (0.5,) * 3, (0.5,) * 3, seed=seed)
    if name == "full":
        return BackboneProfile("full", (256, 512, 1024), 2048, 256, "pretrained-file",
                               IMAGENET_MEAN, IMAGENET_STD, seed=seed, weights_path=weights_path)
    raise ConfigError(f"unknown backbone profile {name!r}")


def conv3x3(cin: int, cout: int, stride: int = 1, bias: bool = False) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=bias)


def conv1x1(cin: int, cout: int, stride: int = 1, bias: bool = False) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 1, stride=stride, bias=bias)


def deconv2x2(cin: int, cout: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(cin, cout, 2, stride=2, bias=False)


def check_pyramid(pyr, shapes, what: str = "pyramid") -> None:
    """Raise DimensionError unless ``pyr`` has 3 levels with per-sample ``shapes``."""
    if len(pyr) != 3:
        raise DimensionError(f"{what}: expected 3 levels, got {len(pyr)}")
    for i, (f, s) in enumerate(zip(pyr, shapes)):
        if f.dim() != 4 or tuple(f.shape[1:]) != tuple(s):
            raise DimensionError(f"{what}: level {i + 1} has shape {tuple(f.shape)}, expected (N, {', '.join(map(str, s))})")


def check_same_shapes(a, b, what: str) -> None:
    if len(a) != len(b) or any(x.shape != y.shape for x, y in zip(a, b)):
        raise DimensionError(f"{what}: shapes differ: {[tuple(x.shape) for x in a]} vs {[tuple(y.shape) for y in b]}")


class _ToyStage(nn.Module):
    """Bias-free strided residual stage; scaled sum keeps activations O(1)."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride=2)
        self.conv2 = conv3x3(cout, cout)
        self.shortcut = conv1x1(cin, cout, stride=2)
        self.relu = nn.ReLU()

    def forward(self, x: Tensor) -> Tensor:
        out = self.conv2(self.relu(self.conv1(x)))
        return self.relu((out + self.shortcut(x)) * 0.5 ** 0.5)


class TeacherEncoder(nn.Module):
    """Frozen 3-stage encoder shared by both modality branches.

    Takes images in ``[0, 1]`` and applies the profile's per-channel
    normalization itself. Parameters never require gradients and the module
    stays in eval mode regardless of ``train()`` calls.
    """

    def __init__(self, profile: BackboneProfile, stem: nn.Module, stages: list[nn.Module]):
        super().__init__()
        self.profile = profile
        self.stem = stem
        self.stages = nn.ModuleList(stages)
        self.register_buffer("mean", torch.tensor(profile.mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(profile.std).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True):
        return self

    def forward(self, img: Tensor) -> list[Tensor]:
        s = self.profile.input_size
        if img.dim() != 4 or tuple(img.shape[1:]) != (3, s, s):
            raise DimensionError(f"encoder expects (N, 3, {s}, {s}) input, got {tuple(img.shape)}")
        with torch.no_grad():
            x = self.stem((img - self.mean) / self.std)
            feats = []
            for stage in self.stages:
                x = stage(x)
                feats.append(x)
        return feats


def _toy_teacher(profile: BackboneProfile) -> TeacherEncoder:
    c1, c2, c3 = profile.channel_counts
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(profile.seed)
        stem = nn.Sequential(conv3x3(3, c1 // 2, stride=2), nn.ReLU())
        stages = [_ToyStage(c1 // 2, c1), _ToyStage(c1, c2), _ToyStage(c2, c3)]
        for m in [stem, *stages]:
            for layer in m.modules():
                if isinstance(layer, nn.Conv2d):
                    nn.init.kaiming_normal_(layer.weight, nonlinearity="relu")
    return TeacherEncoder(profile, stem, stages)


def _full_teacher(profile: BackboneProfile) -> TeacherEncoder:
    from torchvision.models import wide_resnet50_2

    path = profile.weights_path
    if not path or not os.path.isfile(path):
        raise WeightLoadError(f"pretrained weight file not found: {path!r} (set backbone.weights_path)")
    net = wide_resnet50_2(weights=None)
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise WeightLoadError(f"cannot read weight file {path}: {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    try:
        net.load_state_dict(state, strict=True)
    except (RuntimeError, TypeError, AttributeError) as exc:
        raise WeightLoadError(f"weight file {path} does not match WideResNet-50-2: {exc}") from exc
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    return TeacherEncoder(profile, stem, [net.layer1, net.layer2, net.layer3])


def build_teacher(profile: BackboneProfile) -> TeacherEncoder:
    """Build the frozen encoder for ``profile``."""
    if profile.name == "toy":
        return _toy_teacher(profile)
    if profile.name == "full":
        return _full_teacher(profile)
    raise ConfigError(f"unknown backbone profile {profile.name!r}")


def encode(enc: TeacherEncoder, img: Tensor) -> list[Tensor]:
    """Encode a single ``(3, H, W)`` image or a batch into a feature pyramid."""
    if img.dim() == 3:
        return [f[0] for f in enc(img.unsqueeze(0))]
    return enc(img)


class UpBlock(nn.Module):
    """Residual block that doubles spatial size with transposed convolutions."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.up = deconv2x2(cin, cout)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv = conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential(deconv2x2(cin, cout), nn.BatchNorm2d(cout))
        self.relu = nn.ReLU()

    def forward(self, x: Tensor) -> Tensor:
        out = self.relu(self.bn1(self.up(x)))
        out = self.bn2(self.conv(out))
        return self.relu(out + self.shortcut(x))


class StudentDecoder(nn.Module):
    """Mirror of the encoder: upsampling residual blocks, deepest level first."""

    def __init__(self, profile: BackboneProfile):
        super().__init__()
        self.profile = profile
        c1, c2, c3 = profile.channel_counts
        self.up3 = UpBlock(profile.embedding_channels, c3)
        self.up2 = UpBlock(c3, c2)
        self.up1 = UpBlock(c2, c1)

    def forward(self, emb: Tensor) -> list[Tensor]:
        expected = self.profile.embedding_shape()
        if emb.dim() != 4 or tuple(emb.shape[1:]) != expected:
            raise DimensionError(f"decoder expects (N, {', '.join(map(str, expected))}) embedding, got {tuple(emb.shape)}")
        f3 = self.up3(emb)
        f2 = self.up2(f3)
        f1 = self.up1(f2)
        return [f1, f2, f3]


def build_student(profile: BackboneProfile, seed: int | None = None) -> StudentDecoder:
    """Build a trainable decoder; ``seed`` makes the initialization reproducible."""
    if profile.name not in ("toy", "full"):
        raise ConfigError(f"unknown backbone profile {profile.name!r}")
    if seed is None:
        return StudentDecoder(profile)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return StudentDecoder(profile)


def decode(dec: StudentDecoder, emb: Tensor) -> list[Tensor]:
    if emb.dim() == 3:
        return [f[0] for f in dec(emb.unsqueeze(0))]
    return dec(emb)
