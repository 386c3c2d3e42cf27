"""Backbone + bridge + dense head assembly and trainability policies."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import torch
from torch import nn

from .backbones import BackboneHandle, resolve_blocks
from .config import ModelConfig
from .data import TaskSpec
from .errors import AssemblyError, BackboneError, FreezePolicyError

BRIDGE_LAYER_NAMES = {"Flatten": "flatten", "GlobalAveragePooling": "global_average_pooling"}
OUTPUT_LAYER = "predictions"
OUTPUT_ACTIVATION_LAYER = "predictions_activation"

# std correction for a normal truncated at two standard deviations
_TRUNC_STD = 0.87962566103423978


@dataclass(frozen=True)
class HeadSpec:
    dense_layers: tuple[int, ...] = ()
    activation: str = "elu"
    initializer: str = "he_normal"
    batch_norm: bool = False
    regularization: str = "None"
    l2_strength: float = 0.0
    dropout_rate: float = 0.0
    bridge: str = "Flatten"

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "HeadSpec":
        return cls(
            dense_layers=tuple(cfg.dense_layers),
            activation=cfg.dense_activations,
            initializer=cfg.initializer,
            batch_norm=cfg.batch_norm,
            regularization=cfg.regularization,
            l2_strength=cfg.l2_strength,
            dropout_rate=cfg.dropout_rate,
            bridge=cfg.before_dense,
        )

    @property
    def uses_dropout(self) -> bool:
        return "Dropout" in self.regularization

    @property
    def uses_l2(self) -> bool:
        return "L2" in self.regularization


@dataclass(frozen=True)
class LayerDesc:
    """One head layer. ``kind`` is dense, batch_norm, activation or dropout."""

    kind: str
    name: str
    units: int | None = None
    activation: str | None = None
    rate: float | None = None
    initializer: str | None = None
    l2: float = 0.0


@dataclass(frozen=True)
class HeadDescription:
    task: TaskSpec
    spec: HeadSpec
    layers: tuple[LayerDesc, ...]

    @property
    def dense_widths(self) -> list[int]:
        return [layer.units for layer in self.layers if layer.kind == "dense"]


def build_head(task: TaskSpec, spec: HeadSpec) -> HeadDescription:
    """Lay out Dense -> [BatchNorm] -> activation -> [Dropout] per hidden width, then the output layer."""
    l2 = spec.l2_strength if spec.uses_l2 else 0.0
    layers = []
    for i, width in enumerate(spec.dense_layers, start=1):
        layers.append(LayerDesc("dense", f"dense_{i}", units=width, initializer=spec.initializer, l2=l2))
        if spec.batch_norm:
            layers.append(LayerDesc("batch_norm", f"batch_norm_{i}"))
        layers.append(LayerDesc("activation", f"activation_{i}", activation=spec.activation))
        if spec.uses_dropout:
            layers.append(LayerDesc("dropout", f"dropout_{i}", rate=spec.dropout_rate))
    layers.append(
        LayerDesc("dense", OUTPUT_LAYER, units=task.output_units, initializer="glorot_uniform", l2=l2)
    )
    layers.append(LayerDesc("activation", OUTPUT_ACTIVATION_LAYER, activation=task.output_activation))
    return HeadDescription(task, spec, tuple(layers))


def make_activation(name: str) -> nn.Module:
    factories = {
        "elu": nn.ELU,
        "relu": nn.ReLU,
        "selu": nn.SELU,
        "gelu": nn.GELU,
        "tanh": nn.Tanh,
        "sigmoid": nn.Sigmoid,
        "swish": nn.SiLU,
        "leaky_relu": lambda: nn.LeakyReLU(0.3),
        "linear": nn.Identity,
        "softmax": lambda: nn.Softmax(dim=1),
    }
    if name not in factories:
        raise AssemblyError(f"unknown activation {name!r}")
    return factories[name]()


def initialize_dense(layer: nn.Linear, name: str) -> None:
    fan_out, fan_in = layer.weight.shape
    w = layer.weight
    with torch.no_grad():
        if name in ("he_normal", "lecun_normal", "glorot_normal"):
            var = {"he_normal": 2 / fan_in, "lecun_normal": 1 / fan_in, "glorot_normal": 2 / (fan_in + fan_out)}[name]
            std = math.sqrt(var) / _TRUNC_STD
            nn.init.trunc_normal_(w, std=std, a=-2 * std, b=2 * std)
        elif name in ("he_uniform", "lecun_uniform", "glorot_uniform"):
            limit = {
                "he_uniform": math.sqrt(6 / fan_in),
                "lecun_uniform": math.sqrt(3 / fan_in),
                "glorot_uniform": math.sqrt(6 / (fan_in + fan_out)),
            }[name]
            nn.init.uniform_(w, -limit, limit)
        else:
            raise AssemblyError(f"unknown initializer {name!r}")
        nn.init.zeros_(layer.bias)


class ToChannelsFirst(nn.Module):
    def forward(self, x):
        return x.permute(0, 3, 1, 2)


class FlattenChannelsLast(nn.Module):
    """Flatten an NCHW map in NHWC row-major order."""

    def forward(self, x):
        return x.permute(0, 2, 3, 1).flatten(1)


class GlobalAveragePool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3))


class TransferNetwork(nn.Module):
    """Takes (batch, height, width, 3) images and returns class probabilities."""

    def __init__(self, layers: "OrderedDict[str, nn.Module]", l2: dict[str, float]):
        super().__init__()
        self.to_channels_first = ToChannelsFirst()
        self.layers = nn.Sequential(layers)
        self.l2 = l2

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        x = self.to_channels_first(x)
        for name, layer in self.layers.named_children():
            if name == OUTPUT_ACTIVATION_LAYER:
                break
            x = layer(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(self.to_channels_first(x))

    def l2_penalty(self) -> torch.Tensor:
        """Sum of ``strength * ||kernel||^2`` over L2-regularised dense kernels."""
        total = torch.zeros(())
        for name, strength in self.l2.items():
            if strength:
                total = total + strength * self.layers.get_submodule(name).weight.pow(2).sum()
        return total


@dataclass
class BuiltModel:
    network: TransferNetwork
    task: TaskSpec
    backbone: BackboneHandle
    head: HeadDescription
    bridge: str
    image_size: tuple[int, int]
    mask: dict[str, bool] = field(default_factory=dict)
    policy: tuple[tuple[str, ...], str | None] = ((), None)

    @property
    def layer_names(self) -> list[str]:
        return [name for name, _ in self.network.layers.named_children()]

    @property
    def bridge_layer(self) -> str:
        return BRIDGE_LAYER_NAMES[self.bridge]

    @property
    def backbone_layers(self) -> list[str]:
        return self.backbone.layer_names

    @property
    def head_layers(self) -> list[str]:
        return [layer.name for layer in self.head.layers]

    def layer(self, name: str) -> nn.Module:
        return self.network.layers.get_submodule(name)

    def layer_param_counts(self) -> dict[str, int]:
        """Parameter count of every parameterised layer."""
        counts = {}
        for name, layer in self.network.layers.named_children():
            n = sum(p.numel() for p in layer.parameters())
            if n:
                counts[name] = n
        return counts

    def set_mask(self, mask: dict[str, bool]) -> None:
        for name, trainable in mask.items():
            for p in self.layer(name).parameters():
                p.requires_grad_(trainable)
        self.mask = dict(mask)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.network.parameters() if p.requires_grad]

    def train_mode(self) -> None:
        """Training mode for trainable layers; frozen layers stay in inference mode."""
        self.network.train()
        for name, trainable in self.mask.items():
            if not trainable:
                self.layer(name).eval()

    def predict_proba(self, images: torch.Tensor) -> torch.Tensor:
        self.network.eval()
        with torch.no_grad():
            return self.network(images)

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.network.state_dict().items()}

    def load_state_dict(self, state) -> None:
        self.network.load_state_dict(state)


def assemble(
    backbone: BackboneHandle,
    head: HeadDescription,
    bridge: str,
    image_size: tuple[int, int] | None = None,
) -> BuiltModel:
    """Compose the full network; every layer starts trainable.

    Raises:
        AssemblyError: unknown bridge or a backbone that does not emit a 4-D map.
    """
    if bridge not in BRIDGE_LAYER_NAMES:
        raise AssemblyError(f"unknown bridge {bridge!r}; expected one of {sorted(BRIDGE_LAYER_NAMES)}")
    image_size = tuple(image_size or backbone.input_size)
    try:
        shape = backbone.output_shape(image_size)
    except RuntimeError as exc:
        raise AssemblyError(f"{backbone.name} cannot process {image_size} inputs: {exc}") from exc
    if len(shape) != 3:
        raise AssemblyError(f"{backbone.name} must emit a 4-D feature map, got per-sample shape {shape}")
    channels, h, w = shape
    width = channels * h * w if bridge == "Flatten" else channels

    layers: OrderedDict[str, nn.Module] = OrderedDict(backbone.module.named_children())
    layers[BRIDGE_LAYER_NAMES[bridge]] = FlattenChannelsLast() if bridge == "Flatten" else GlobalAveragePool()
    l2 = {}
    for desc in head.layers:
        if desc.kind == "dense":
            dense = nn.Linear(width, desc.units)
            initialize_dense(dense, desc.initializer)
            layers[desc.name] = dense
            l2[desc.name] = desc.l2
            width = desc.units
        elif desc.kind == "batch_norm":
            layers[desc.name] = nn.BatchNorm1d(width, eps=1e-3, momentum=0.01)
        elif desc.kind == "activation":
            layers[desc.name] = make_activation(desc.activation)
        elif desc.kind == "dropout":
            layers[desc.name] = nn.Dropout(desc.rate)
        else:
            raise AssemblyError(f"unknown head layer kind {desc.kind!r}")
    model = BuiltModel(
        network=TransferNetwork(layers, l2),
        task=head.task,
        backbone=backbone,
        head=head,
        bridge=bridge,
        image_size=image_size,
    )
    model.set_mask({name: True for name in model.layer_param_counts()})
    return model


def freeze_mask(model: BuiltModel, unfreeze_blocks=(), freeze_up_to: str | None = None) -> dict[str, bool]:
    """Trainability per parameterised layer for the given policy.

    Backbone layers are frozen unless they belong to ``unfreeze_blocks``. With
    ``freeze_up_to``, backbone layers at or after that layer are trainable too,
    while those before it stay frozen unless unfrozen by block. Head layers are
    always trainable.
    """
    try:
        unfrozen = resolve_blocks(model.backbone, unfreeze_blocks)
    except BackboneError as exc:
        raise FreezePolicyError(str(exc)) from exc
    order = model.layer_names
    cut = None
    if freeze_up_to is not None:
        if freeze_up_to not in order:
            raise FreezePolicyError(f"freeze_up_to names unknown layer {freeze_up_to!r}")
        cut = order.index(freeze_up_to)
    backbone = set(model.backbone_layers)
    mask = {}
    for name in model.layer_param_counts():
        if name not in backbone:
            mask[name] = True
        elif name in unfrozen:
            mask[name] = True
        else:
            mask[name] = cut is not None and order.index(name) >= cut
    return mask


def apply_freeze_policy(model: BuiltModel, unfreeze_blocks=(), freeze_up_to: str | None = None) -> BuiltModel:
    """Set ``requires_grad`` per :func:`freeze_mask` and remember the policy."""
    mask = freeze_mask(model, unfreeze_blocks, freeze_up_to)
    model.set_mask(mask)
    model.policy = (tuple(unfreeze_blocks), freeze_up_to)
    return model


def parameter_counts(model: BuiltModel) -> tuple[int, int]:
    """(trainable, frozen) parameter totals derived from the mask."""
    counts = model.layer_param_counts()
    trainable = sum(n for name, n in counts.items() if model.mask.get(name, False))
    return trainable, sum(counts.values()) - trainable


def summary(model: BuiltModel) -> str:
    """Plain-text table of layer name, output shape, parameters and trainability."""
    rows = []
    x = torch.zeros(1, *model.image_size, 3)
    counts = model.layer_param_counts()
    model.network.eval()
    with torch.no_grad():
        x = model.network.to_channels_first(x)
        for name, layer in model.network.layers.named_children():
            x = layer(x)
            shape = "(None, " + ", ".join(str(d) for d in _channels_last(x.shape[1:])) + ")"
            n = counts.get(name, 0)
            flag = "-" if not n else ("yes" if model.mask.get(name) else "no")
            rows.append((name, shape, str(n), flag))
    header = ("Layer", "Output shape", "Params", "Trainable")
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(4)]
    line = "  ".join("{:<%d}" % w for w in widths)
    trainable, frozen = parameter_counts(model)
    out = [f"Model: {model.backbone.name} transfer ({model.task.mode}, {model.task.num_classes} classes)"]
    out.append(line.format(*header))
    out.append("-" * (sum(widths) + 6))
    out.extend(line.format(*r) for r in rows)
    out.append("-" * (sum(widths) + 6))
    out.append(f"Total params: {trainable + frozen}")
    out.append(f"Trainable params: {trainable}")
    out.append(f"Non-trainable params: {frozen}")
    return "\n".join(out)


def _channels_last(shape) -> tuple[int, ...]:
    if len(shape) == 3:
        c, h, w = shape
        return (h, w, c)
    return tuple(shape)


def build_from_config(cfg, task: TaskSpec, pretrained: str | None = None) -> BuiltModel:
    """Backbone, head and freeze policy exactly as ``cfg.model`` describes.

    ``pretrained`` overrides the weight source, e.g. ``"none"`` when the
    weights are about to be replaced by a saved state dict.
    """
    from .backbones import get_backbone

    m = cfg.model
    backbone = get_backbone(m.transfer_arch, m.pre_trained if pretrained is None else pretrained)
    head = build_head(task, HeadSpec.from_config(m))
    model = assemble(backbone, head, m.before_dense, m.image_size)
    return apply_freeze_policy(model, m.unfreeze_block, m.freeze_up_to)
