import copy
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import torch
from torch import nn

from stzoo.archspec import ArchSpec, Family, Init, Layout
from stzoo.backbones import LayerKind, build_backbone
from stzoo.errors import CheckpointError, ShapeError
from stzoo.temporal import (
    NLN_RECIPE,
    FactorizedConv,
    NonLocalBlock,
    TemporalAggregation,
    TemporalConv,
    TemporalKind,
    TemporalMaxPool,
    TemporalModuleSpec,
    TemporalShift,
    build_nln_block,
    build_temporal_module,
    inflate_conv,
    nln_blocks_for_stage,
    place_modules,
)

LOG = logging.getLogger(__name__)

BLOCK_MODULE_KINDS = {Family.TAM: TemporalKind.TAM, Family.TSM: TemporalKind.TSM, Family.CONV1D: TemporalKind.CONV1D}
TEMPORAL_POOL_SITES = 3
AUDITED_KINDS = (TemporalKind.TAM.value, TemporalKind.TSM.value, TemporalKind.CONV1D.value, TemporalKind.NLN.value)


class Consensus(str, Enum):
    AVERAGE_LOGITS = "AverageLogits"
    NONE = "None"


class AssembledModel(nn.Module):
    def __init__(self, arch, backbone, feature_channels, nodes=(), dropout=0.0):
        super().__init__()
        self.arch = arch
        self.nodes = tuple(nodes)
        self.backbone = backbone
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(feature_channels, arch.num_classes)

    @property
    def input_layout(self):
        return self.arch.input_layout

    @property
    def consensus(self):
        return Consensus.NONE if self.arch.family.is_volumetric else Consensus.AVERAGE_LOGITS

    def _volumetric(self, x):
        if x.dim() != 5:
            raise ShapeError(f"expected a batch of clips with 5 dims, got shape {tuple(x.shape)}")
        # batched frames (N, F, C, H, W) run as (N, C, F, H, W)
        return x.transpose(1, 2) if self.input_layout is Layout.BATCHED_2D else x

    def _frame_logits(self, features):
        pooled = features.mean(dim=(3, 4)).transpose(1, 2)
        return self.fc(self.dropout(pooled))

    def frame_logits(self, x):
        if self.consensus is not Consensus.AVERAGE_LOGITS:
            raise ShapeError(f"{self.arch.family.value} pools over time before classifying")
        return self._frame_logits(self.backbone(self._volumetric(x)))

    def forward(self, x):
        features = self.backbone(self._volumetric(x))
        if self.consensus is Consensus.AVERAGE_LOGITS:
            return self._frame_logits(features).mean(dim=1)
        return self.fc(self.dropout(features.mean(dim=(2, 3, 4))))


@dataclass(frozen=True)
class StructuralAudit:
    temporal_modules: dict
    temporal_pools: int
    pool_sites: tuple
    inflated_convs: int
    factorized_convs: int

    @property
    def total_temporal_modules(self):
        return sum(self.temporal_modules.values())

    def as_rows(self):
        rows = [(f"{kind} modules", count) for kind, count in self.temporal_modules.items()]
        rows += [
            ("temporal pools", self.temporal_pools),
            ("pool sites", ",".join(self.pool_sites) or "-"),
            ("inflated convs", self.inflated_convs),
            ("factorized convs", self.factorized_convs),
        ]
        return rows


def _eligible_convs(network):
    found = []
    for parent in network.modules():
        for name, child in parent.named_children():
            if type(child) is nn.Conv3d and child.kernel_size[0] == 1 and max(child.kernel_size[1:]) > 1:
                found.append((parent, name, child))
    return found


def _inflate_all(network, factorized=False):
    for index, (parent, name, conv) in enumerate(_eligible_convs(network)):
        if factorized and index > 0:
            setattr(parent, name, FactorizedConv.from_conv(conv))
        else:
            setattr(parent, name, inflate_conv(conv))


def _attach_block_module(network, node, module):
    target = getattr(network, node.name)
    if node.kind is LayerKind.RESIDUAL_BLOCK:
        target.conv1 = nn.Sequential(module, target.conv1)
    elif node.kind is LayerKind.INCEPTION_MODULE:
        setattr(network, node.name, nn.Sequential(target, module))
    else:
        setattr(network, node.name, nn.Sequential(module, target))


def _insert_block_modules(graph, spec):
    kind = BLOCK_MODULE_KINDS[spec.family]
    for index in place_modules(graph.insertion_points, spec.placement):
        node = graph.nodes[index]
        channels = node.out_channels if node.kind is LayerKind.INCEPTION_MODULE else node.in_channels
        module = build_temporal_module(TemporalModuleSpec(kind, channels=channels))
        _attach_block_module(graph.network, node, module)


def _insert_nln_blocks(graph):
    for stage, requested in NLN_RECIPE.items():
        blocks = [node for node in graph.nodes if node.stage == stage and node.kind is LayerKind.RESIDUAL_BLOCK]
        for index in nln_blocks_for_stage(len(blocks), requested):
            node = blocks[index]
            block = getattr(graph.network, node.name)
            setattr(graph.network, node.name, nn.Sequential(block, build_nln_block(node.out_channels)))


def _insert_temporal_pools(graph):
    for position in graph.pooling_positions[-TEMPORAL_POOL_SITES:]:
        node = graph.nodes[position]
        target = getattr(graph.network, node.name)
        if node.kind is LayerKind.MAXPOOL:
            setattr(graph.network, node.name, nn.Sequential(target, TemporalMaxPool()))
        else:
            setattr(graph.network, node.name, nn.Sequential(TemporalMaxPool(), target))


def assemble(
    spec, init=Init.SCRATCH, *, weights_dir=None, checkpoint=None, dropout=0.0, force_spec=False, allow_partial=False
):
    spec.check()
    init = Init(init)
    if init is Init.FROM_CHECKPOINT:
        if checkpoint is None:
            raise CheckpointError("FromCheckpoint init needs a checkpoint path")
        return load_checkpoint(checkpoint, spec, force_spec=force_spec, allow_partial=allow_partial)
    graph = build_backbone(spec.backbone, pretrained=init is Init.IMAGENET, weights_dir=weights_dir)
    if spec.family is Family.I3D:
        _inflate_all(graph.network)
    elif spec.family is Family.S3D:
        _inflate_all(graph.network, factorized=True)
    elif spec.family.has_block_modules:
        _insert_block_modules(graph, spec)
    elif spec.family is Family.TSN_NLN:
        _insert_nln_blocks(graph)
    if spec.temporal_pool:
        _insert_temporal_pools(graph)
    LOG.debug("assembled %s (%s init)", spec.name, init.value)
    return AssembledModel(spec, graph.network, graph.feature_channels, graph.nodes, dropout)


def audit(model):
    counts = dict.fromkeys(AUDITED_KINDS, 0)
    pools = inflated = factorized = temporal_convs = 0
    for module in model.backbone.modules():
        if isinstance(module, TemporalAggregation):
            counts[TemporalKind.TAM.value] += 1
        elif isinstance(module, TemporalShift):
            counts[TemporalKind.TSM.value] += 1
        elif isinstance(module, TemporalConv):
            temporal_convs += 1
        elif isinstance(module, FactorizedConv):
            factorized += 1
        elif isinstance(module, NonLocalBlock):
            counts[TemporalKind.NLN.value] += 1
        elif isinstance(module, TemporalMaxPool):
            pools += 1
        elif type(module) is nn.Conv3d and module.kernel_size[0] > 1:
            inflated += 1
    # factorized convs own one temporal conv each
    counts[TemporalKind.CONV1D.value] = temporal_convs - factorized
    sites = tuple(
        name
        for name, node in model.backbone.named_children()
        if any(isinstance(module, TemporalMaxPool) for module in node.modules())
    )
    return StructuralAudit(counts, pools, sites, inflated, factorized)


def retarget_frames(model, new_k):
    arch = replace(model.arch, frames=new_k).check()
    retargeted = copy.deepcopy(model)
    retargeted.arch = arch
    return retargeted


def forward(model, clip):
    if clip.layout is not model.input_layout:
        expected = model.input_layout.value
        raise ShapeError(f"{model.arch.family.value} expects {expected} clips, got {clip.layout.value}")
    if clip.frames != model.arch.frames:
        raise ShapeError(f"clip has {clip.frames} frames, model expects {model.arch.frames}")
    return model(clip.values.unsqueeze(0))[0]


def save_checkpoint(model, path, **meta):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "arch": model.arch.to_dict(),
        "dropout": float(model.dropout.p),
        "state_dict": model.state_dict(),
        "meta": meta,
    }
    torch.save(payload, path)
    return path


def read_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    return ArchSpec.from_dict(payload["arch"]), payload


def spec_diff(held, requested):
    """``field: held -> requested`` for every ``to_dict`` field where the two specs differ."""
    held, requested = held.to_dict(), requested.to_dict()
    return [f"{name}: {held[name]} -> {requested[name]}" for name in held if held[name] != requested[name]]


def load_checkpoint(path, spec=None, *, force_spec=False, allow_partial=False):
    embedded, payload = read_checkpoint(path)
    if spec is not None and spec != embedded and not force_spec:
        raise CheckpointError(
            f"checkpoint {path} holds {embedded.name}, requested {spec.name}, differing in "
            f"{', '.join(spec_diff(embedded, spec))}; pass force_spec to override"
        )
    model = assemble(spec or embedded, Init.SCRATCH, dropout=payload.get("dropout", 0.0))
    state = payload["state_dict"]
    if allow_partial:
        slots = model.state_dict()
        state = {name: value for name, value in state.items() if name in slots and slots[name].shape == value.shape}
        LOG.warning("partial load of %s: %d of %d slots filled", path, len(state), len(slots))
    try:
        model.load_state_dict(state, strict=not allow_partial)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not match {model.arch.name}: {exc}") from None
    return model
