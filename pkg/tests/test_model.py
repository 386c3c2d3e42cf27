import pytest
import torch

from transferkit.backbones import get_backbone
from transferkit.data import infer_task
from transferkit.errors import AssemblyError, FreezePolicyError
from transferkit.model import (
    HeadSpec,
    apply_freeze_policy,
    assemble,
    build_head,
    freeze_mask,
    parameter_counts,
    summary,
)

TRI = infer_task(["a", "b", "c"])
BIN = infer_task(["neg", "pos"])


def kinds(head):
    return [(layer.kind, layer.units or layer.activation or layer.rate) for layer in head.layers]


def test_head_widths_and_output():
    head = build_head(TRI, HeadSpec(dense_layers=(144, 89, 55), regularization="None"))
    assert head.dense_widths == [144, 89, 55, 3]
    assert head.layers[-1].activation == "softmax"


def test_empty_head_binary():
    head = build_head(BIN, HeadSpec(dense_layers=()))
    assert kinds(head) == [("dense", 1), ("activation", "sigmoid")]


def test_dropout_l2_pattern():
    spec = HeadSpec(dense_layers=(610, 377, 233, 144, 89, 55), regularization="Dropout+L2", l2_strength=0.001, dropout_rate=0.35)
    head = build_head(TRI, spec)
    layers = list(head.layers)
    hidden = [i for i, layer in enumerate(layers) if layer.kind == "dense" and layer.name != "predictions"]
    for i in hidden:
        assert layers[i].l2 == 0.001
        assert [layers[i + 1].kind, layers[i + 2].kind] == ["activation", "dropout"]
        assert layers[i + 2].rate == 0.35
    assert layers[-2].kind == "dense" and layers[-1].kind == "activation"


@pytest.mark.parametrize(
    "mode, bn, expected",
    [
        ("None", False, ["dense", "activation"]),
        ("Dropout", False, ["dense", "activation", "dropout"]),
        ("L2", True, ["dense", "batch_norm", "activation"]),
        ("Dropout+L2", True, ["dense", "batch_norm", "activation", "dropout"]),
    ],
)
def test_head_pattern_per_mode(mode, bn, expected):
    head = build_head(TRI, HeadSpec(dense_layers=(4, 5), regularization=mode, batch_norm=bn, l2_strength=0.1))
    kinds_only = [layer.kind for layer in head.layers]
    assert kinds_only == expected * 2 + ["dense", "activation"]
    assert all((layer.l2 > 0) == ("L2" in mode) for layer in head.layers if layer.kind == "dense")


def test_forward_softmax_rows(tiny_model):
    model = tiny_model(TRI, dense=(8,))
    torch.manual_seed(1)
    x = torch.rand(4, 32, 32, 3)
    out = model.predict_proba(x)
    assert out.shape == (4, 3)
    assert torch.allclose(out.sum(dim=1), torch.ones(4), atol=1e-6)


def test_forward_softmax_random_inputs(tiny_model):
    model = tiny_model(TRI, dense=(8, 4), batch_norm=True, regularization="Dropout")
    for seed in range(5):
        torch.manual_seed(seed)
        out = model.predict_proba(torch.randn(6, 32, 32, 3) * 50)
        assert torch.allclose(out.sum(dim=1), torch.ones(6), atol=1e-6)


def test_forward_binary(tiny_model):
    out = tiny_model(BIN).predict_proba(torch.rand(5, 32, 32, 3))
    assert out.shape == (5, 1)
    assert torch.all((out > 0) & (out < 1))


def test_gap_width(tiny_model):
    model = tiny_model(TRI, dense=(8,), bridge="GlobalAveragePooling")
    assert model.layer("dense_1").in_features == 24
    flat = tiny_model(TRI, dense=(8,), bridge="Flatten")
    assert flat.layer("dense_1").in_features == 24 * 8 * 8


def test_bad_bridge():
    head = build_head(TRI, HeadSpec())
    with pytest.raises(AssemblyError):
        assemble(get_backbone("TinyNet", "none"), head, "Reshape")


def trainable_backbone(model):
    return {n for n in model.backbone_layers if model.mask.get(n)}


def test_freeze_cblock2(tiny_model):
    model = apply_freeze_policy(tiny_model(TRI), ["cblock2"])
    assert trainable_backbone(model) == {"block2_conv1", "block2_conv2"}
    assert all(model.mask[n] for n in ("dense_1", "predictions"))
    assert all(not p.requires_grad for p in model.layer("block1_conv1").parameters())


def test_freeze_nothing_unfrozen(tiny_model):
    model = apply_freeze_policy(tiny_model(TRI), [])
    assert trainable_backbone(model) == set()
    trainable, frozen = parameter_counts(model)
    head_params = sum(n for name, n in model.layer_param_counts().items() if name in model.head_layers)
    assert trainable == head_params
    assert frozen == 9468


def test_vgg16_cblock5_policy():
    torch.manual_seed(0)
    handle = get_backbone("VGG16", "none")
    model = assemble(handle, build_head(TRI, HeadSpec(dense_layers=(8,))), "GlobalAveragePooling", (32, 32))
    apply_freeze_policy(model, ["cblock5"])
    assert trainable_backbone(model) == {"block5_conv1", "block5_conv2", "block5_conv3"}


def test_vgg19_three_block_policy():
    handle = get_backbone("VGG19", "none")
    model = assemble(handle, build_head(TRI, HeadSpec(dense_layers=(8,))), "Flatten", (32, 32))
    apply_freeze_policy(model, ["cblock1", "cblock2", "cblock5"], "flatten")
    expected = handle.block_map["cblock1"] | handle.block_map["cblock2"] | handle.block_map["cblock5"]
    assert trainable_backbone(model) == expected


def test_freeze_up_to_backbone_layer(tiny_model):
    model = apply_freeze_policy(tiny_model(TRI), ["cblock1"], "block2_conv2")
    assert trainable_backbone(model) == {"block1_conv1", "block1_conv2", "block2_conv2"}


def test_freeze_errors(tiny_model):
    model = tiny_model(TRI)
    with pytest.raises(FreezePolicyError, match="cblock7"):
        apply_freeze_policy(model, ["cblock7"])
    with pytest.raises(FreezePolicyError, match="nowhere"):
        apply_freeze_policy(model, [], "nowhere")


def test_freeze_idempotent(tiny_model):
    model = tiny_model(TRI)
    apply_freeze_policy(model, ["cblock2"], "flatten")
    first = dict(model.mask)
    apply_freeze_policy(model, ["cblock2"], "flatten")
    assert model.mask == first == freeze_mask(model, ["cblock2"], "flatten")


def test_mask_covers_parameterised_layers(tiny_model):
    model = apply_freeze_policy(tiny_model(TRI, dense=(8, 4), batch_norm=True), ["cblock1"])
    assert set(model.mask) == set(model.layer_param_counts())
    for name, layer in model.network.layers.named_children():
        for p in layer.parameters():
            assert p.requires_grad == model.mask[name]


@pytest.mark.parametrize("blocks", [[], ["cblock1"], ["cblock2"], ["cblock1", "cblock2"]])
def test_parameter_partition(tiny_model, blocks):
    model = apply_freeze_policy(tiny_model(TRI, dense=(8,)), blocks)
    trainable, frozen = parameter_counts(model)
    total = sum(p.numel() for p in model.network.parameters())
    assert trainable + frozen == total
    per_layer = sum(
        p.numel() for name, layer in model.network.layers.named_children() if model.mask.get(name) for p in layer.parameters()
    )
    assert trainable == per_layer


def test_block2_trainable_count(tiny_model):
    model = apply_freeze_policy(tiny_model(TRI, dense=(8,)), ["cblock2"])
    head = (24 * 8 * 8 * 8 + 8) + (8 * 3 + 3)
    block2 = (12 * 24 * 9 + 24) + (24 * 24 * 9 + 24)
    assert parameter_counts(model)[0] == head + block2


def test_summary_text(tiny_model):
    text = summary(apply_freeze_policy(tiny_model(TRI), ["cblock2"]))
    assert "block2_conv2" in text and "(None, 8, 8, 24)" in text
    assert "Trainable params:" in text
