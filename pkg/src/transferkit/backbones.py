"""Registry of convolutional backbones usable for transfer learning.

Each backbone is exposed as a flat ``nn.Sequential`` of named layers
(``block1_conv1``, ``block1_pool``, ...) so that freeze policies and feature
extraction can address layers by name. ``cblockN`` names the N-th
convolutional stage, i.e. the conv layers between two pooling boundaries.

Pretrained weights are fetched lazily and cached under
``$TRANSFERKIT_CACHE_DIR`` (default ``~/.cache/transferkit``).
"""

from __future__ import annotations

import os
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch
from filelock import FileLock
from torch import nn

from .errors import BackboneError

CACHE_ENV = "TRANSFERKIT_CACHE_DIR"
WEIGHTS_FORMAT_VERSION = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class BackboneHandle:
    name: str
    pretrained: str
    input_size: tuple[int, int]
    preprocess: Callable[[torch.Tensor], torch.Tensor]
    module: nn.Sequential
    layers: list[tuple[str, int]]
    block_map: dict[str, frozenset[str]]

    @property
    def layer_names(self) -> list[str]:
        return [name for name, _ in self.layers]

    @property
    def out_channels(self) -> int:
        convs = [m for m in self.module.modules() if isinstance(m, nn.Conv2d)]
        return convs[-1].out_channels

    def output_shape(self, image_size: tuple[int, int]) -> tuple[int, int, int]:
        """(channels, height, width) of the feature map for one input image."""
        with torch.no_grad():
            out = self.module(torch.zeros(1, 3, *image_size))
        return tuple(out.shape[1:])


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "transferkit"))


def _imagenet_preprocess(batch: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(IMAGENET_MEAN, dtype=batch.dtype) * 255.0
    std = torch.tensor(IMAGENET_STD, dtype=batch.dtype) * 255.0
    return (batch - mean) / std


def _unit_scale(batch: torch.Tensor) -> torch.Tensor:
    return batch / 255.0


def _regroup_vgg(features: nn.Sequential) -> nn.Sequential:
    """Merge torchvision's conv/relu pairs into Keras-style named layers."""
    named = OrderedDict()
    block, conv = 1, 0
    modules = list(features)
    i = 0
    while i < len(modules):
        m = modules[i]
        if isinstance(m, nn.Conv2d):
            conv += 1
            act = modules[i + 1]
            named[f"block{block}_conv{conv}"] = nn.Sequential(m, act)
            i += 2
        elif isinstance(m, nn.MaxPool2d):
            named[f"block{block}_pool"] = m
            block, conv = block + 1, 0
            i += 1
        else:
            raise BackboneError(f"unexpected module {m!r} in VGG features")
    return nn.Sequential(named)


def _block_map(module: nn.Sequential) -> dict[str, frozenset[str]]:
    blocks: dict[str, set[str]] = {}
    for name, layer in module.named_children():
        if any(isinstance(m, nn.Conv2d) for m in layer.modules()):
            number = name.split("_")[0].removeprefix("block")
            blocks.setdefault(f"cblock{number}", set()).add(name)
    return {k: frozenset(v) for k, v in blocks.items()}


def _param_count(layer: nn.Module) -> int:
    return sum(p.numel() for p in layer.parameters())


def _fetch_torchvision_state(name: str, arch_fn, weights_enum) -> dict:
    """Return cached VGG feature weights, downloading once under a file lock."""
    root = cache_dir()
    root.mkdir(parents=True, exist_ok=True)
    target = root / f"{name}-imagenet-v{WEIGHTS_FORMAT_VERSION}.pt"
    with FileLock(str(target) + ".lock"):
        if not target.exists():
            try:
                state = weights_enum.get_state_dict(progress=False)
            except Exception as exc:
                raise BackboneError(f"could not fetch imagenet weights for {name}: {exc}") from exc
            features = {k.removeprefix("features."): v for k, v in state.items() if k.startswith("features.")}
            tmp = target.with_suffix(".tmp")
            torch.save(features, tmp)
            os.replace(tmp, target)
        return torch.load(target, map_location="cpu", weights_only=True)


def _vgg(name: str, pretrained: str) -> BackboneHandle:
    from torchvision import models

    arch_fn, weights_enum = {
        "VGG16": (models.vgg16, models.VGG16_Weights.IMAGENET1K_V1),
        "VGG19": (models.vgg19, models.VGG19_Weights.IMAGENET1K_V1),
    }[name]
    features = arch_fn(weights=None).features
    if pretrained == "imagenet":
        features.load_state_dict(_fetch_torchvision_state(name, arch_fn, weights_enum))
    elif pretrained != "none":
        raise BackboneError(f"weight source {pretrained!r} is not available for {name}; use 'imagenet' or 'none'")
    module = _regroup_vgg(features)
    return BackboneHandle(
        name=name,
        pretrained=pretrained,
        input_size=(224, 224),
        preprocess=_imagenet_preprocess,
        module=module,
        layers=[(n, _param_count(m)) for n, m in module.named_children()],
        block_map=_block_map(module),
    )


def _tinynet(name: str, pretrained: str) -> BackboneHandle:
    """Two conv blocks, 9468 parameters, 32x32 input; ships without pretrained weights."""
    if pretrained != "none":
        raise BackboneError(f"weight source {pretrained!r} is not available for TinyNet; only 'none'")

    def conv(cin, cout):
        return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU())

    module = nn.Sequential(
        OrderedDict(
            [
                ("block1_conv1", conv(3, 12)),
                ("block1_conv2", conv(12, 12)),
                ("block1_pool", nn.MaxPool2d(2)),
                ("block2_conv1", conv(12, 24)),
                ("block2_conv2", conv(24, 24)),
                ("block2_pool", nn.MaxPool2d(2)),
            ]
        )
    )
    return BackboneHandle(
        name=name,
        pretrained=pretrained,
        input_size=(32, 32),
        preprocess=_unit_scale,
        module=module,
        layers=[(n, _param_count(m)) for n, m in module.named_children()],
        block_map=_block_map(module),
    )


_REGISTRY: dict[str, Callable[[str, str], BackboneHandle]] = {
    "TinyNet": _tinynet,
    "VGG16": _vgg,
    "VGG19": _vgg,
}


def register_backbone(name: str, factory: Callable[[str, str], BackboneHandle]) -> None:
    _REGISTRY[name] = factory


def list_backbones() -> list[str]:
    return sorted(_REGISTRY)


def get_backbone(name: str, pretrained: str = "imagenet") -> BackboneHandle:
    """Build a fresh feature extractor for ``name``.

    Randomly initialised layers draw from torch's global RNG, so seed it first
    for reproducible weights.

    Raises:
        BackboneError: unknown name or unavailable weight source.
    """
    factory = _REGISTRY.get(name)
    if factory is None:
        raise BackboneError(f"unknown backbone {name!r}; registered: {', '.join(list_backbones())}")
    return factory(name, pretrained)


def resolve_blocks(handle: BackboneHandle, block_names) -> set[str]:
    """Union of the layer names in the given ``cblockN`` blocks."""
    layers: set[str] = set()
    for block in block_names:
        if block not in handle.block_map:
            valid = ", ".join(sorted(handle.block_map))
            raise BackboneError(f"unknown block {block!r} for {handle.name}; valid blocks: {valid}")
        layers |= handle.block_map[block]
    return layers
