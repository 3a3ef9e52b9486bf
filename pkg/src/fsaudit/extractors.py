"""Convolutional embedding extractors.

All extractors map (N, 3, H, W) images to (N, width, h, w) feature maps;
``embed`` global-average-pools those maps to (N, width) vectors. Only
``simple_cnn`` follows a published layout closely; the other tags are compact
stand-ins that keep each family's characteristic block.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigurationError

EXTRACTORS = ("simple_cnn", "mobilenet", "resnet18", "resnet50", "googlenet")


def conv_block(cin: int, cout: int, batch_norm: bool = True, pool: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, 3, padding=1)]
    if batch_norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU())
    if pool:
        layers.append(nn.MaxPool2d(2, ceil_mode=True))
    return nn.Sequential(*layers)


class Extractor(nn.Module):
    tag = "base"

    def __init__(self, width: int):
        super().__init__()
        self.width = width

    @property
    def embedding_dim(self) -> int:
        return self.width

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        # channels-last is several times faster for CPU pooling and convolution
        return self(x.contiguous(memory_format=torch.channels_last))

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_map(x).mean(dim=(2, 3))


class SimpleCNN(Extractor):
    tag = "simple_cnn"

    def __init__(self, width: int = 64, batch_norm: bool = True, blocks: int = 4):
        super().__init__(width)
        chans = [3] + [width] * blocks
        self.features = nn.Sequential(*[conv_block(a, b, batch_norm) for a, b in zip(chans[:-1], chans[1:])])

    def forward(self, x):
        return self.features(x)


class _DepthwiseSeparable(nn.Sequential):
    def __init__(self, cin, cout, stride):
        super().__init__(
            nn.Conv2d(cin, cin, 3, stride=stride, padding=1, groups=cin, bias=False),
            nn.BatchNorm2d(cin),
            nn.ReLU6(),
            nn.Conv2d(cin, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU6(),
        )


class MobileNetLike(Extractor):
    tag = "mobilenet"

    def __init__(self, width: int = 64):
        super().__init__(width)
        half = max(width // 2, 8)
        self.features = nn.Sequential(
            nn.Conv2d(3, half, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(half),
            nn.ReLU6(),
            _DepthwiseSeparable(half, width, 2),
            _DepthwiseSeparable(width, width, 2),
            _DepthwiseSeparable(width, width, 2),
        )

    def forward(self, x):
        return self.features(x)


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.skip = nn.Identity()
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        return torch.relu(self.body(x) + self.skip(x))


class _Bottleneck(nn.Module):
    def __init__(self, cin, cout, stride, reduction=4):
        super().__init__()
        mid = max(cout // reduction, 8)
        self.body = nn.Sequential(
            nn.Conv2d(cin, mid, 1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(),
            nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(),
            nn.Conv2d(mid, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.skip = nn.Identity()
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        return torch.relu(self.body(x) + self.skip(x))


class _ResNetLike(Extractor):
    block = _BasicBlock

    def __init__(self, width: int = 64, blocks_per_stage: tuple[int, ...] = (1, 1, 1)):
        super().__init__(width)
        stem = max(width // 2, 8)
        layers: list[nn.Module] = [
            nn.Conv2d(3, stem, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(stem),
            nn.ReLU(),
        ]
        cin = stem
        for n in blocks_per_stage:
            for i in range(n):
                layers.append(self.block(cin, width, 2 if i == 0 else 1))
                cin = width
        self.features = nn.Sequential(*layers)

    def forward(self, x):
        return self.features(x)


class ResNet18Like(_ResNetLike):
    tag = "resnet18"
    block = _BasicBlock

    def __init__(self, width: int = 64):
        super().__init__(width, (2, 2, 2))


class ResNet50Like(_ResNetLike):
    tag = "resnet50"
    block = _Bottleneck

    def __init__(self, width: int = 64):
        super().__init__(width, (2, 3, 2))


class _Inception(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        b = cout // 4
        self.b1 = nn.Conv2d(cin, b, 1)
        self.b3 = nn.Sequential(nn.Conv2d(cin, b, 1), nn.ReLU(), nn.Conv2d(b, b, 3, padding=1))
        self.b5 = nn.Sequential(nn.Conv2d(cin, b, 1), nn.ReLU(), nn.Conv2d(b, b, 5, padding=2))
        self.bp = nn.Sequential(nn.MaxPool2d(3, stride=1, padding=1), nn.Conv2d(cin, cout - 3 * b, 1))
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        y = torch.cat([self.b1(x), self.b3(x), self.b5(x), self.bp(x)], dim=1)
        return torch.relu(self.bn(y))


class GoogLeNetLike(Extractor):
    tag = "googlenet"

    def __init__(self, width: int = 64):
        super().__init__(width)
        self.features = nn.Sequential(
            conv_block(3, width),
            _Inception(width, width),
            nn.MaxPool2d(2, ceil_mode=True),
            _Inception(width, width),
            nn.MaxPool2d(2, ceil_mode=True),
            _Inception(width, width),
            nn.MaxPool2d(2, ceil_mode=True),
        )

    def forward(self, x):
        return self.features(x)


def build_extractor(tag: str, width: int = 64, batch_norm: bool = True) -> Extractor:
    if tag == "simple_cnn":
        return SimpleCNN(width, batch_norm=batch_norm)
    classes = {"mobilenet": MobileNetLike, "resnet18": ResNet18Like, "resnet50": ResNet50Like, "googlenet": GoogLeNetLike}
    if tag not in classes:
        raise ConfigurationError(f"unknown extractor tag {tag!r}; expected one of {EXTRACTORS}")
    return classes[tag](width)
