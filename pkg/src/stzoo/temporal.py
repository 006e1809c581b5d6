import math
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn

from stzoo.archspec import Placement
from stzoo.errors import ShapeError, SpecError

TEMPORAL_KERNEL = 3
TSM_SHIFT_FRACTION = 1 / 8
POOL_KERNEL, POOL_STRIDE, POOL_PADDING = 3, 2, 1
NLN_RECIPE = {"stage2": 3, "stage3": 2}


class TemporalKind(str, Enum):
    INFLATE_3D = "Inflate3D"
    FACTORIZED_ST = "FactorizedST"
    TAM = "TAM"
    TSM = "TSM"
    CONV1D = "Conv1D"
    NLN = "NLN"
    TEMPORAL_MAX_POOL = "TemporalMaxPool"


@dataclass(frozen=True)
class TemporalModuleSpec:
    kind: TemporalKind
    channels: int = 0
    temporal_kernel: int = TEMPORAL_KERNEL
    shift_fraction: float = TSM_SHIFT_FRACTION
    pool_stride: int = POOL_STRIDE

    def violations(self):
        found = []
        fixed_kernel = (TemporalKind.INFLATE_3D, TemporalKind.FACTORIZED_ST, TemporalKind.CONV1D)
        if self.kind in fixed_kernel and self.temporal_kernel != TEMPORAL_KERNEL:
            found.append(f"temporal_kernel of {self.kind.value} must be {TEMPORAL_KERNEL}")
        if self.kind is TemporalKind.TEMPORAL_MAX_POOL and self.temporal_kernel != POOL_KERNEL:
            found.append(f"temporal max pool kernel must be {POOL_KERNEL}")
        if self.kind is TemporalKind.TSM and not 0 < self.shift_fraction <= 0.5:
            found.append("shift_fraction must lie in (0, 0.5]")
        return found


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)

    def params(self, bias=False):
        weights = self.in_channels * self.out_channels * math.prod(self.kernel)
        return weights + (self.out_channels if bias else 0)


def inflate(weight, temporal_kernel):
    """Copy a 2D kernel ``[C_out, C_in, kh, kw]`` along a new time axis, without rescaling."""
    if temporal_kernel < 1:
        raise SpecError("temporal_kernel must be >= 1")
    if weight.dim() == 5:
        weight = weight[:, :, weight.shape[2] // 2]
    return weight.unsqueeze(2).repeat(1, 1, temporal_kernel, 1, 1)


def inflate_conv(conv, temporal_kernel=TEMPORAL_KERNEL):
    inflated = nn.Conv3d(
        conv.in_channels,
        conv.out_channels,
        kernel_size=(temporal_kernel, *conv.kernel_size[1:]),
        stride=conv.stride,
        padding=(temporal_kernel // 2, *conv.padding[1:]),
        dilation=conv.dilation,
        groups=conv.groups,
        bias=conv.bias is not None,
    )
    with torch.no_grad():
        inflated.weight.copy_(inflate(conv.weight, temporal_kernel))
        if conv.bias is not None:
            inflated.bias.copy_(conv.bias)
    return inflated


def factorize(spec, first=False):
    if first:
        raise SpecError("the first convolution of the network is not factorized")
    kt, kh, kw = spec.kernel
    spatial = ConvSpec(spec.in_channels, spec.out_channels, (1, kh, kw), (1, *spec.stride[1:]), (0, *spec.padding[1:]))
    temporal = ConvSpec(spec.out_channels, spec.out_channels, (kt, 1, 1), (spec.stride[0], 1, 1), (kt // 2, 0, 0))
    return spatial, temporal


class TemporalAggregation(nn.Conv3d):
    """Depthwise 3-tap temporal convolution, initialized to the identity."""

    def __init__(self, channels, temporal_kernel=TEMPORAL_KERNEL):
        super().__init__(
            channels,
            channels,
            kernel_size=(temporal_kernel, 1, 1),
            padding=(temporal_kernel // 2, 0, 0),
            groups=channels,
            bias=False,
        )
        nn.init.dirac_(self.weight, groups=channels)

    @property
    def temporal_weights(self):
        return self.weight.view(self.out_channels, -1)


def apply_tam(features, weights):
    """Aggregate each channel of ``(N, C, T, H, W)`` features over a zero-padded length-3 temporal window."""
    channels = features.shape[1]
    if weights.shape[0] != channels:
        raise ShapeError(f"{weights.shape[0]} temporal weight rows for {channels} channels")
    taps = weights.shape[1]
    kernel = weights.reshape(channels, 1, taps, 1, 1).to(features.dtype)
    return F.conv3d(features, kernel, padding=(taps // 2, 0, 0), groups=channels)


def apply_tsm(features, shift_fraction=TSM_SHIFT_FRACTION):
    fold = math.floor(shift_fraction * features.shape[1])
    if fold == 0:
        return features
    shifted = torch.zeros_like(features)
    shifted[:, :fold, 1:] = features[:, :fold, :-1]
    shifted[:, fold : 2 * fold, :-1] = features[:, fold : 2 * fold, 1:]
    shifted[:, 2 * fold :] = features[:, 2 * fold :]
    return shifted


class TemporalShift(nn.Module):
    def __init__(self, shift_fraction=TSM_SHIFT_FRACTION):
        super().__init__()
        self.shift_fraction = shift_fraction

    def forward(self, x):
        return apply_tsm(x, self.shift_fraction)

    def extra_repr(self):
        return f"shift_fraction={self.shift_fraction}"


class TemporalConv(nn.Conv3d):
    """Full 3-tap temporal convolution over channels, initialized to the identity."""

    def __init__(self, channels, temporal_kernel=TEMPORAL_KERNEL, stride=1):
        super().__init__(
            channels,
            channels,
            kernel_size=(temporal_kernel, 1, 1),
            stride=(stride, 1, 1),
            padding=(temporal_kernel // 2, 0, 0),
            bias=False,
        )
        nn.init.dirac_(self.weight)


class FactorizedConv(nn.Sequential):
    def __init__(self, spatial, temporal):
        super().__init__()
        self.spatial = spatial
        self.temporal = temporal

    @classmethod
    def from_conv(cls, conv, temporal_kernel=TEMPORAL_KERNEL):
        """Split a unit-time conv into itself plus an identity temporal conv on its output channels."""
        spec = ConvSpec(conv.in_channels, conv.out_channels, (temporal_kernel, *conv.kernel_size[1:]))
        _, temporal = factorize(spec)
        return cls(conv, TemporalConv(temporal.in_channels, temporal.kernel[0]))


def temporal_max_pool(features, kernel=POOL_KERNEL, stride=POOL_STRIDE, pad=POOL_PADDING):
    return F.max_pool3d(features, kernel_size=(kernel, 1, 1), stride=(stride, 1, 1), padding=(pad, 0, 0))


class TemporalMaxPool(nn.MaxPool3d):
    def __init__(self, kernel=POOL_KERNEL, stride=POOL_STRIDE, pad=POOL_PADDING):
        super().__init__(kernel_size=(kernel, 1, 1), stride=(stride, 1, 1), padding=(pad, 0, 0))


class NonLocalBlock(nn.Module):
    """Embedded-Gaussian non-local block over all (time x space) positions, added residually."""

    def __init__(self, channels, inter_channels=None):
        super().__init__()
        inter_channels = inter_channels or max(channels // 2, 1)
        self.theta = nn.Conv3d(channels, inter_channels, kernel_size=1)
        self.phi = nn.Conv3d(channels, inter_channels, kernel_size=1)
        self.g = nn.Conv3d(channels, inter_channels, kernel_size=1)
        self.project = nn.Conv3d(inter_channels, channels, kernel_size=1)
        self.norm = nn.BatchNorm3d(channels)
        nn.init.zeros_(self.norm.weight)
        nn.init.zeros_(self.norm.bias)

    @property
    def inter_channels(self):
        return self.theta.out_channels

    def forward(self, x):
        n, _, t, h, w = x.shape
        theta = self.theta(x).flatten(2)
        phi = self.phi(x).flatten(2)
        g = self.g(x).flatten(2)
        attention = torch.softmax(theta.transpose(1, 2) @ phi, dim=-1)
        y = (g @ attention.transpose(1, 2)).view(n, -1, t, h, w)
        return x + self.norm(self.project(y))


def build_nln_block(channels):
    return NonLocalBlock(channels)


def nln_blocks_for_stage(num_blocks, requested):
    """Indices of the blocks of one stage that get a non-local block appended."""
    if requested >= num_blocks:
        return list(range(num_blocks))
    return sorted(range(num_blocks - 1, -1, -2))[-requested:]


def place_modules(insertion_points, placement):
    points = list(insertion_points)
    half = math.ceil(len(points) / 2)
    placement = Placement(placement)
    if placement is Placement.ALL:
        return points
    if placement is Placement.BOTTOM_HALF:
        return points[:half]
    if placement is Placement.TOP_HALF:
        return points[len(points) - half :]
    return points[::2]


def build_temporal_module(spec):
    found = spec.violations()
    if found:
        raise SpecError("; ".join(found))
    if spec.kind is TemporalKind.TAM:
        return TemporalAggregation(spec.channels, spec.temporal_kernel)
    if spec.kind is TemporalKind.TSM:
        return TemporalShift(spec.shift_fraction)
    if spec.kind is TemporalKind.CONV1D:
        return TemporalConv(spec.channels, spec.temporal_kernel)
    if spec.kind is TemporalKind.NLN:
        return build_nln_block(spec.channels)
    if spec.kind is TemporalKind.TEMPORAL_MAX_POOL:
        return TemporalMaxPool(spec.temporal_kernel, spec.pool_stride)
    raise SpecError(f"{spec.kind.value} rewrites existing convolutions and has no standalone module")
