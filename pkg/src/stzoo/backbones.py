import logging
import os
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import torch
import torchvision
from torch import nn

from stzoo.archspec import Backbone, Layout
from stzoo.errors import ShapeError, SpecError, WeightsError
from stzoo.weights import apply_weights, load_weight_file

LOG = logging.getLogger(__name__)

TINYNET_CHANNELS = (8, 16, 32, 64, 64)
DOWNSAMPLING = 32
WEIGHTS_ENV = "STZOO_WEIGHTS"
WEIGHT_FILES = {
    Backbone.INCEPTION_V1: "inceptionv1.npz",
    Backbone.RESNET18: "resnet18.npz",
    Backbone.RESNET50: "resnet50.npz",
    Backbone.TINYNET: "tinynet.npz",
}


class LayerKind(str, Enum):
    CONV2D = "conv2d"
    MAXPOOL = "maxpool"
    AVGPOOL = "avgpool"
    RESIDUAL_BLOCK = "residual_block"
    INCEPTION_MODULE = "inception_module"
    FC = "fc"


@dataclass(frozen=True)
class LayerNode:
    name: str
    kind: LayerKind
    stage: str
    in_channels: int
    out_channels: int
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    ceil_mode: bool = False

    def output_extent(self, extent):
        out = []
        for size, k, s, p in zip(extent, self.kernel, self.stride, self.padding):
            span = size + 2 * p - k
            n = -(-span // s) + 1 if self.ceil_mode else span // s + 1
            # a ceil-mode window has to start inside the padded input
            if self.ceil_mode and (n - 1) * s >= size + p:
                n -= 1
            out.append(n)
        return tuple(out)


@dataclass(frozen=True, eq=False)
class BackboneGraph:
    name: Backbone
    nodes: tuple
    network: nn.Sequential
    pooling_positions: tuple
    insertion_points: tuple
    feature_channels: int

    @property
    def stages(self):
        return tuple(node.stage for node in self.nodes)

    def node_index(self, name):
        return [node.name for node in self.nodes].index(name)

    def output_extent(self, extent):
        for node in self.nodes:
            extent = node.output_extent(extent)
        return extent


def _pair(value):
    return tuple(value) if isinstance(value, (tuple, list)) else (value, value)


def _volumetric_layer(layer):
    if isinstance(layer, nn.Conv2d):
        conv = nn.Conv3d(
            layer.in_channels,
            layer.out_channels,
            kernel_size=(1, *layer.kernel_size),
            stride=(1, *layer.stride),
            padding=(0, *layer.padding),
            dilation=(1, *layer.dilation),
            groups=layer.groups,
            bias=layer.bias is not None,
        )
        with torch.no_grad():
            conv.weight.copy_(layer.weight.unsqueeze(2))
            if layer.bias is not None:
                conv.bias.copy_(layer.bias)
        return conv
    if isinstance(layer, nn.BatchNorm2d):
        norm = nn.BatchNorm3d(layer.num_features, eps=layer.eps, momentum=layer.momentum, affine=layer.affine)
        norm.load_state_dict(layer.state_dict())
        return norm
    if isinstance(layer, nn.MaxPool2d):
        kernel, stride, padding = _pair(layer.kernel_size), _pair(layer.stride), _pair(layer.padding)
        return nn.MaxPool3d((1, *kernel), (1, *stride), (0, *padding), ceil_mode=layer.ceil_mode)
    return to_volumetric(layer)


def to_volumetric(module):
    """Swap every 2D layer of ``module`` in place for its unit-time 3D equivalent."""
    for name, child in module.named_children():
        setattr(module, name, _volumetric_layer(child))
    return module


def _resnet(backbone):
    factory = torchvision.models.resnet18 if backbone is Backbone.RESNET18 else torchvision.models.resnet50
    net = factory(weights=None)
    modules = OrderedDict(stem=nn.Sequential(net.conv1, net.bn1, net.relu), maxpool=net.maxpool)
    nodes = [
        LayerNode("stem", LayerKind.CONV2D, "stage1", 3, 64, (7, 7), (2, 2), (3, 3)),
        LayerNode("maxpool", LayerKind.MAXPOOL, "stage2", 64, 64, (3, 3), (2, 2), (1, 1)),
    ]
    for layer_index, layer in enumerate((net.layer1, net.layer2, net.layer3, net.layer4), start=1):
        for block_index, block in enumerate(layer):
            name = f"layer{layer_index}_{block_index}"
            last_conv = block.conv3 if hasattr(block, "conv3") else block.conv2
            modules[name] = block
            nodes.append(
                LayerNode(
                    name,
                    LayerKind.RESIDUAL_BLOCK,
                    f"stage{layer_index + 1}",
                    block.conv1.in_channels,
                    last_conv.out_channels,
                    (3, 3),
                    (block.stride, block.stride),
                    (1, 1),
                )
            )
    return modules, nodes, net.fc.in_features


def _inception_v1():
    net = torchvision.models.googlenet(weights=None, aux_logits=False, init_weights=True)
    layout = [
        ("conv1", LayerKind.CONV2D, "stage1"),
        ("maxpool1", LayerKind.MAXPOOL, "stage2"),
        ("conv2", LayerKind.CONV2D, "stage2"),
        ("conv3", LayerKind.CONV2D, "stage2"),
        ("maxpool2", LayerKind.MAXPOOL, "stage3"),
        ("inception3a", LayerKind.INCEPTION_MODULE, "stage3"),
        ("inception3b", LayerKind.INCEPTION_MODULE, "stage3"),
        ("maxpool3", LayerKind.MAXPOOL, "stage4"),
        ("inception4a", LayerKind.INCEPTION_MODULE, "stage4"),
        ("inception4b", LayerKind.INCEPTION_MODULE, "stage4"),
        ("inception4c", LayerKind.INCEPTION_MODULE, "stage4"),
        ("inception4d", LayerKind.INCEPTION_MODULE, "stage4"),
        ("inception4e", LayerKind.INCEPTION_MODULE, "stage4"),
        ("maxpool4", LayerKind.MAXPOOL, "stage5"),
        ("inception5a", LayerKind.INCEPTION_MODULE, "stage5"),
        ("inception5b", LayerKind.INCEPTION_MODULE, "stage5"),
    ]
    modules, nodes, channels = OrderedDict(), [], 3
    for name, kind, stage in layout:
        module = getattr(net, name)
        modules[name] = module
        if kind is LayerKind.CONV2D:
            conv = module.conv
            out = conv.out_channels
            node = LayerNode(name, kind, stage, channels, out, conv.kernel_size, conv.stride, conv.padding)
        elif kind is LayerKind.MAXPOOL:
            out = channels
            geometry = _pair(module.kernel_size), _pair(module.stride), _pair(module.padding)
            node = LayerNode(name, kind, stage, channels, out, *geometry, ceil_mode=module.ceil_mode)
        else:
            branches = (module.branch1, module.branch2, module.branch3, module.branch4)
            out = sum(_branch_out_channels(branch) for branch in branches)
            node = LayerNode(name, kind, stage, channels, out)
        nodes.append(node)
        channels = out
    return modules, nodes, net.fc.in_features


def _branch_out_channels(branch):
    convs = [m for m in branch.modules() if isinstance(m, nn.Conv2d)]
    return convs[-1].out_channels


def _tinynet():
    modules, nodes, channels = OrderedDict(), [], 3
    for index, width in enumerate(TINYNET_CHANNELS, start=1):
        stage = f"stage{index}"
        modules[f"conv{index}"] = nn.Sequential(
            nn.Conv2d(channels, width, kernel_size=3, padding=1), nn.BatchNorm2d(width), nn.ReLU(inplace=True)
        )
        modules[f"pool{index}"] = nn.MaxPool2d(kernel_size=2, stride=2)
        nodes.append(LayerNode(f"conv{index}", LayerKind.CONV2D, stage, channels, width, (3, 3), (1, 1), (1, 1)))
        nodes.append(LayerNode(f"pool{index}", LayerKind.MAXPOOL, stage, width, width, (2, 2), (2, 2), (0, 0)))
        channels = width
    return modules, nodes, channels


def weights_path(name, weights_dir=None):
    directory = weights_dir or os.environ.get(WEIGHTS_ENV)
    if not directory:
        raise WeightsError(f"no weight directory for {name.value}: pass weights_dir or set {WEIGHTS_ENV}")
    return Path(directory) / WEIGHT_FILES[name]


def build_network_2d(name):
    """Build the plain 2D network of a backbone as (modules, nodes, feature_channels)."""
    try:
        name = Backbone(name)
    except ValueError:
        raise SpecError(f"unknown backbone '{name}'") from None
    if name.is_resnet:
        return _resnet(name)
    if name is Backbone.INCEPTION_V1:
        return _inception_v1()
    return _tinynet()


def build_backbone(name, pretrained=False, weights_dir=None):
    modules, nodes, feature_channels = build_network_2d(name)
    name = Backbone(name)
    network = nn.Sequential(modules)
    if pretrained:
        path = weights_path(name, weights_dir)
        LOG.info("loading %s weights from %s", name.value, path)
        apply_weights(network, load_weight_file(path))
    to_volumetric(network)
    pooling_positions = tuple(i for i, node in enumerate(nodes) if max(node.stride) > 1)
    insertion_kinds = (LayerKind.RESIDUAL_BLOCK, LayerKind.INCEPTION_MODULE)
    if name is Backbone.TINYNET:
        insertion_points = tuple(i for i, node in enumerate(nodes) if node.kind is LayerKind.CONV2D)[1:]
    else:
        insertion_points = tuple(i for i, node in enumerate(nodes) if node.kind in insertion_kinds)
    return BackboneGraph(name, tuple(nodes), network, pooling_positions, insertion_points, feature_channels)


def forward_2d(graph, clip):
    if clip.layout is not Layout.BATCHED_2D:
        raise ShapeError(f"forward_2d expects a {Layout.BATCHED_2D.value} clip, got {clip.layout.value}")
    if min(clip.height, clip.width) < DOWNSAMPLING:
        raise ShapeError(f"spatial dims {clip.height}x{clip.width} too small, need at least {DOWNSAMPLING}")
    # frames ride the batch axis with a unit time axis
    features = graph.network(clip.values.unsqueeze(2))
    return features.squeeze(2)
