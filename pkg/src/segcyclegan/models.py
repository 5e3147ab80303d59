"""Generator, PatchGAN discriminator and SegNet segmenter.

All three networks are plain ``nn.Module`` subclasses built from small
dataclass specs so that an architecture can be described in JSON next to a
checkpoint and rebuilt from it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from .dataset import ImageSample, RANGE_NORMALIZED


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class GeneratorSpec:
    in_channels: int = 3
    out_channels: int = 3
    base_channels: int = 64
    residual_blocks: int = 9
    norm: str = "instance"  # instance | none

    kind = "generator"


@dataclass
class DiscriminatorSpec:
    in_channels: int = 3
    channels: Sequence[int] = (64, 128, 256, 512)
    strides: Sequence[int] = (2, 2, 2, 1, 1)
    negative_slope: float = 0.2
    norm: str = "instance"

    kind = "discriminator"


@dataclass
class SegmenterSpec:
    in_channels: int = 3
    num_classes: int = 2
    widths: Sequence[int] = (64, 128, 256, 512, 512)
    # convolutions per encoder stage; VGG16 layout gives 13
    stage_depths: Sequence[int] = (2, 2, 3, 3, 3)

    kind = "segmenter"


SPEC_TYPES = {"generator": GeneratorSpec, "discriminator": DiscriminatorSpec, "segmenter": SegmenterSpec}


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)


class ResidualBlock(nn.Module):
    def __init__(self, dim: int, norm: str = "instance"):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            _norm(norm, dim),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            _norm(norm, dim),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """ResNet translator: 3 down-sampling convs, residual blocks, 2 deconvs, conv + tanh.

    The first down-sampling layer is the stride-1 7x7 stem, the other two
    halve the resolution, so the output has the input's spatial shape.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        c, n = spec.base_channels, spec.norm
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(spec.in_channels, c, 7),
            _norm(n, c),
            nn.ReLU(True),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            _norm(n, 2 * c),
            nn.ReLU(True),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            _norm(n, 4 * c),
            nn.ReLU(True),
        ]
        layers += [ResidualBlock(4 * c, n) for _ in range(spec.residual_blocks)]
        layers += [
            nn.ConvTranspose2d(4 * c, 2 * c, 3, stride=2, padding=1, output_padding=1),
            _norm(n, 2 * c),
            nn.ReLU(True),
            nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1),
            _norm(n, c),
            nn.ReLU(True),
            nn.ReflectionPad2d(3),
            nn.Conv2d(c, spec.out_channels, 7),
            nn.Tanh(),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"generator input dims must be divisible by 4, got {tuple(x.shape[-2:])}")
        return self.model(x)


class Discriminator(nn.Module):
    """PatchGAN: five 4x4 convolutions with LeakyReLU, emitting a map of patch scores."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        if len(spec.strides) != len(spec.channels) + 1:
            raise ValueError("need one stride per conv layer (channels + final 1-channel layer)")
        self.spec = spec
        ladder = [spec.in_channels, *spec.channels, 1]
        layers: list[nn.Module] = []
        for i, stride in enumerate(spec.strides):
            layers.append(nn.Conv2d(ladder[i], ladder[i + 1], 4, stride=stride, padding=1))
            if i == len(spec.strides) - 1:
                break
            if i > 0:
                layers.append(_norm(spec.norm, ladder[i + 1]))
            layers.append(nn.LeakyReLU(spec.negative_slope, True))
        self.model = nn.Sequential(*layers)

    def output_size(self, size: int) -> int:
        for s in self.spec.strides:
            size = (size + 2 - 4) // s + 1
        return size

    def forward(self, x):
        h, w = x.shape[-2:]
        if min(self.output_size(h), self.output_size(w)) < 1:
            raise ShapeError(f"input {h}x{w} too small for the discriminator stride ladder")
        return self.model(x)


def _conv_bn_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(True))


class SegNet(nn.Module):
    """Encoder/decoder segmenter; the decoder unpools with the encoder's max indices."""

    def __init__(self, spec: SegmenterSpec):
        super().__init__()
        if len(spec.widths) != len(spec.stage_depths):
            raise ValueError("widths and stage_depths must have equal length")
        self.spec = spec
        self.encoders = nn.ModuleList()
        cin = spec.in_channels
        for width, depth in zip(spec.widths, spec.stage_depths):
            convs = [_conv_bn_relu(cin, width)] + [_conv_bn_relu(width, width) for _ in range(depth - 1)]
            self.encoders.append(nn.Sequential(*convs))
            cin = width
        # decoder stage k mirrors encoder stage k and ends at the width feeding that stage
        self.decoders = nn.ModuleList()
        outs = [spec.widths[0], *spec.widths[:-1]]
        for width, depth, out in zip(spec.widths, spec.stage_depths, outs):
            convs = [_conv_bn_relu(width, width) for _ in range(depth - 1)] + [_conv_bn_relu(width, out)]
            self.decoders.append(nn.Sequential(*convs))
        self.classifier = nn.Conv2d(spec.widths[0], spec.num_classes, 1)
        self.pool = nn.MaxPool2d(2, 2, return_indices=True)
        self.unpool = nn.MaxUnpool2d(2, 2)

    @property
    def divisor(self) -> int:
        return 2 ** len(self.spec.widths)

    def conv_counts(self) -> tuple[int, int]:
        count = lambda blocks: sum(isinstance(m, nn.Conv2d) for m in blocks.modules())
        return count(self.encoders), count(self.decoders)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise ShapeError(f"segmenter input dims must be divisible by {self.divisor}, got {h}x{w}")
        indices, sizes = [], []
        for enc in self.encoders:
            x = enc(x)
            sizes.append(x.shape)
            x, idx = self.pool(x)
            indices.append(idx)
        for dec, idx, size in zip(reversed(self.decoders), reversed(indices), reversed(sizes)):
            x = self.unpool(x, idx, output_size=size)
            x = dec(x)
        return self.classifier(x)


_BUILDERS = {"generator": Generator, "discriminator": Discriminator, "segmenter": SegNet}


def _build(spec, seed: int) -> nn.Module:
    gen = torch.Generator().manual_seed(seed)
    # fork_rng keeps the caller's global stream untouched
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
        net = _BUILDERS[spec.kind](spec)
        init_weights(net)
    return net


def build_generator(spec: GeneratorSpec | None = None, seed: int = 0) -> Generator:
    spec = spec or GeneratorSpec()
    if spec.base_channels < 1:
        raise ValueError("base_channels must be >= 1")
    return _build(spec, seed)


def build_discriminator(spec: DiscriminatorSpec | None = None, seed: int = 0) -> Discriminator:
    return _build(spec or DiscriminatorSpec(), seed)


def build_segmenter(spec: SegmenterSpec | None = None, seed: int = 0) -> SegNet:
    return _build(spec or SegmenterSpec(), seed)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
        p.grad = None
    return module


def is_frozen(module: nn.Module) -> bool:
    return not module.training and not any(p.requires_grad for p in module.parameters())


def forward(graph: nn.Module, batch: Sequence[ImageSample] | ImageSample) -> torch.Tensor:
    """Run ``graph`` on ImageSamples, enforcing the normalized value range."""
    samples = [batch] if isinstance(batch, ImageSample) else list(batch)
    for s in samples:
        if s.range_tag != RANGE_NORMALIZED:
            raise ContractError(f"{s.source_id}: expected {RANGE_NORMALIZED} input, got {s.range_tag}")
    param = next(graph.parameters())
    x = torch.stack([torch.as_tensor(s.pixels) for s in samples]).to(param.dtype)
    return graph(x)


# --- checkpoint descriptors -------------------------------------------------

def describe(module: nn.Module) -> dict:
    spec = module.spec
    d = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}
    return {"kind": spec.kind, "spec": d}


def spec_from_descriptor(desc: dict):
    try:
        cls = SPEC_TYPES[desc["kind"]]
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in desc["spec"].items()})
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"bad architecture descriptor: {exc}") from exc


def save_graph(module: nn.Module, path: str | Path) -> None:
    """Write ``<path>.pt`` (state dict) and ``<path>.json`` (architecture)."""
    path = Path(path)
    torch.save(module.state_dict(), path.with_suffix(".pt"))
    path.with_suffix(".json").write_text(json.dumps(describe(module), indent=2))


def load_graph(path: str | Path, expect_kind: str | None = None) -> nn.Module:
    path = Path(path)
    try:
        desc = json.loads(path.with_suffix(".json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing architecture descriptor for {path}") from exc
    if expect_kind and desc.get("kind") != expect_kind:
        raise CheckpointError(f"{path}: expected a {expect_kind}, descriptor says {desc.get('kind')}")
    net = _BUILDERS[desc["kind"]](spec_from_descriptor(desc))
    state = torch.load(path.with_suffix(".pt"), map_location="cpu")
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match descriptor: {exc}") from exc
    return net
