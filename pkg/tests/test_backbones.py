import numpy as np
import pytest
import torch
import torchvision
from stzoo.archspec import Backbone, Layout, VideoTensor
from stzoo.backbones import LayerKind, LayerNode, build_backbone, build_network_2d, forward_2d, to_volumetric
from stzoo.errors import ShapeError, WeightsError
from stzoo.weights import apply_weights, from_torchvision, load_weight_file, save_weight_file, state_to_arrays


def count(module):
    return sum(p.numel() for p in module.parameters())


@pytest.mark.parametrize(
    "backbone,insertions",
    [(Backbone.RESNET18, 8), (Backbone.RESNET50, 16), (Backbone.INCEPTION_V1, 9), (Backbone.TINYNET, 4)],
)
def test_graph_topology(backbone, insertions):
    graph = build_backbone(backbone)
    assert len(graph.insertion_points) == insertions
    assert len(graph.pooling_positions) == 5
    assert all(max(graph.nodes[i].stride) > 1 for i in graph.pooling_positions)
    assert [node.name for node in graph.nodes] == [name for name, _ in graph.network.named_children()]


@pytest.mark.parametrize(
    "backbone,reference",
    [
        (Backbone.RESNET18, torchvision.models.resnet18),
        (Backbone.RESNET50, torchvision.models.resnet50),
        (Backbone.INCEPTION_V1, lambda weights: torchvision.models.googlenet(weights=weights, aux_logits=False)),
    ],
)
def test_volumetric_conversion_keeps_parameter_counts(backbone, reference):
    graph = build_backbone(backbone)
    net = reference(weights=None)
    assert count(graph.network) + count(net.fc) == count(net)


def test_tinynet_parameters():
    graph = build_backbone(Backbone.TINYNET)
    # conv3x3 with bias plus batch norm affine, widths 8, 16, 32, 64, 64
    assert count(graph.network) == 240 + 1200 + 4704 + 18624 + 37056
    assert graph.feature_channels == 64


def test_no_2d_layers_remain():
    graph = build_backbone(Backbone.INCEPTION_V1)
    flat = [type(module) for module in graph.network.modules()]
    assert torch.nn.Conv2d not in flat
    assert torch.nn.BatchNorm2d not in flat
    assert torch.nn.MaxPool2d not in flat


def test_tinynet_forward_2d_shapes():
    graph = build_backbone(Backbone.TINYNET)
    graph.network.eval()
    frames = torch.randn(8, 3, 64, 64)
    features = forward_2d(graph, VideoTensor(frames))
    assert features.shape == (8, 64, 2, 2)
    assert graph.output_extent((64, 64)) == (2, 2)


def test_forward_2d_is_per_frame():
    graph = build_backbone(Backbone.TINYNET)
    graph.network.eval()
    frame = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        repeated = forward_2d(graph, VideoTensor(frame.repeat(8, 1, 1, 1)))
        assert torch.allclose(repeated, repeated[:1].expand_as(repeated))
        frames = torch.randn(6, 3, 64, 64)
        order = torch.randperm(6)
        permuted = forward_2d(graph, VideoTensor(frames[order]))
        assert torch.allclose(permuted, forward_2d(graph, VideoTensor(frames))[order], atol=1e-6)


def test_forward_2d_rejects_bad_inputs():
    graph = build_backbone(Backbone.TINYNET)
    with pytest.raises(ShapeError):
        forward_2d(graph, VideoTensor(torch.zeros(3, 8, 64, 64), Layout.VOLUMETRIC_3D))
    with pytest.raises(ShapeError):
        forward_2d(graph, VideoTensor(torch.zeros(8, 3, 16, 16)))


@pytest.mark.parametrize("backbone", [Backbone.RESNET18, Backbone.INCEPTION_V1])
def test_output_extent_matches_network(backbone):
    graph = build_backbone(backbone)
    graph.network.eval()
    with torch.no_grad():
        features = graph.network(torch.zeros(1, 3, 1, 224, 224))
    assert tuple(features.shape[-2:]) == graph.output_extent((224, 224)) == (7, 7)


def test_ceil_mode_extent():
    node = LayerNode("pool", LayerKind.MAXPOOL, "stage2", 64, 64, (3, 3), (2, 2), (0, 0), ceil_mode=True)
    assert node.output_extent((112, 112)) == (56, 56)
    assert node.output_extent((7, 7)) == (3, 3)
    assert node.output_extent((8, 8)) == (4, 4)


def test_to_volumetric_matches_2d():
    conv = torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3, padding=1), torch.nn.BatchNorm2d(4), torch.nn.MaxPool2d(2))
    conv.eval()
    frames = torch.randn(5, 3, 8, 8)
    with torch.no_grad():
        expected = conv(frames)
        volumetric = to_volumetric(conv).eval()
        actual = volumetric(frames.unsqueeze(2)).squeeze(2)
    assert torch.allclose(actual, expected, atol=1e-6)


def test_weight_files(tmp_path, monkeypatch):
    source = build_backbone(Backbone.TINYNET)
    modules, _, _ = build_network_2d(Backbone.TINYNET)
    network = torch.nn.Sequential(modules)
    path = save_weight_file(network, tmp_path / "tinynet")
    assert path.name == "tinynet.npz"
    monkeypatch.setenv("STZOO_WEIGHTS", str(tmp_path))
    loaded = build_backbone(Backbone.TINYNET, pretrained=True)
    arrays = load_weight_file(path)
    weight = loaded.network.conv1[0].weight.detach().numpy()
    assert np.array_equal(weight[:, :, 0], arrays["conv1.0.weight"])
    assert not torch.equal(source.network.conv1[0].weight, loaded.network.conv1[0].weight)


def test_weight_files_must_match_exactly(tmp_path):
    network = torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3))
    arrays = state_to_arrays(network.state_dict())
    arrays["0.weight"] = arrays["0.weight"][:2]
    with pytest.raises(WeightsError, match="shape"):
        apply_weights(network, arrays)
    with pytest.raises(WeightsError, match="missing"):
        apply_weights(network, {})
    with pytest.raises(WeightsError):
        load_weight_file(tmp_path / "absent.npz")
    with pytest.raises(WeightsError):
        build_backbone(Backbone.RESNET18, pretrained=True, weights_dir=tmp_path)


def test_from_torchvision_renames_resnet_keys():
    modules, _, _ = build_network_2d(Backbone.RESNET18)
    network = torch.nn.Sequential(modules)
    arrays = from_torchvision(torchvision.models.resnet18(weights=None).state_dict())
    assert "stem.0.weight" in arrays and "layer2_1.conv2.weight" in arrays
    assert not any(name.startswith("fc.") for name in arrays)
    apply_weights(network, arrays)
