import logging
import math
import time
from dataclasses import asdict, dataclass

import torch
from torch import nn

from stzoo.archspec import Layout
from stzoo.errors import ProfilingError, ShapeError
from stzoo.temporal import NonLocalBlock

LOG = logging.getLogger(__name__)

COST_COLUMNS = ["name", "flops", "params", "throughput", "max_batch"]


@dataclass(frozen=True)
class CostReport:
    name: str
    flops: int
    params: int
    throughput: float | None = None
    max_batch: int | None = None

    def as_row(self):
        return asdict(self)


def _conv_macs(module, output):
    kernel = math.prod(module.kernel_size)
    return output.numel() * (module.in_channels // module.groups) * kernel


def _linear_macs(module, output):
    return output.numel() * module.in_features


def _non_local_macs(module, x):
    positions = math.prod(x.shape[2:])
    # affinity and weighted sum are both inter x P x P per sample
    return 2 * x.shape[0] * module.inter_channels * positions * positions


def count_module_flops(module, *inputs):
    """
    Multiply-accumulate count of one forward of ``module``.

    Convolutions, linear layers and the two attention products of non-local blocks are counted;
    pooling, normalization and activations are free.
    """
    total = 0

    def hook(layer, args, output):
        nonlocal total
        if isinstance(layer, (nn.Conv1d, nn.Conv2d, nn.Conv3d)):
            total += _conv_macs(layer, output)
        elif isinstance(layer, nn.Linear):
            total += _linear_macs(layer, output)
        elif isinstance(layer, NonLocalBlock):
            total += _non_local_macs(layer, args[0])

    handles = [layer.register_forward_hook(hook) for layer in module.modules()]
    try:
        with torch.no_grad():
            module(*inputs)
    finally:
        for handle in handles:
            handle.remove()
    return total


def clip_input(model, input_size, frames=None, batch=1):
    height, width = (input_size, input_size) if isinstance(input_size, int) else input_size
    frames = frames or model.arch.frames
    device = next(model.parameters(), torch.empty(0)).device
    if model.input_layout is Layout.BATCHED_2D:
        return torch.zeros(batch, frames, 3, height, width, device=device)
    return torch.zeros(batch, 3, frames, height, width, device=device)


def count_flops(model, input_size=224, frames=None):
    """1-clip MACs of an assembled model at ``input_size`` (int or ``(H, W)``) and ``frames``."""
    was_training = model.training
    model.eval()
    try:
        return count_module_flops(model, clip_input(model, input_size, frames))
    except RuntimeError as exc:
        raise ShapeError(f"{model.arch.name} cannot run on {input_size} inputs: {exc}") from None
    finally:
        model.train(was_training)


def count_params(model):
    return sum(parameter.numel() for parameter in model.parameters())


def _is_out_of_memory(exc):
    return isinstance(exc, torch.cuda.OutOfMemoryError) or "out of memory" in str(exc).lower()


def _runs(model, input_size, batch, device):
    try:
        with torch.no_grad():
            model(clip_input(model, input_size, batch=batch).to(device))
        return True
    except RuntimeError as exc:
        if not _is_out_of_memory(exc):
            raise
        if device.type == "cuda":
            torch.cuda.empty_cache()
        return False


def find_max_batch(model, input_size, device, limit=256):
    """Largest batch below ``limit`` whose forward completes, by doubling then bisection."""
    if not _runs(model, input_size, 1, device):
        raise ProfilingError(f"{model.arch.name} does not fit a single clip on {device}")
    good, bad = 1, None
    while good < limit:
        candidate = min(good * 2, limit)
        if not _runs(model, input_size, candidate, device):
            bad = candidate
            break
        good = candidate
    while bad is not None and bad - good > 1:
        middle = (good + bad) // 2
        if _runs(model, input_size, middle, device):
            good = middle
        else:
            bad = middle
    return good


def _synchronize(device):
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def measure_throughput(model, input_size=224, device="cpu", max_batch_limit=256, warmup=3, iterations=10):
    """Clips per second at the largest batch that fits, and that batch size."""
    device = torch.device(device)
    model = model.to(device).eval()
    max_batch = find_max_batch(model, input_size, device, max_batch_limit)
    batch = clip_input(model, input_size, batch=max_batch).to(device)
    with torch.no_grad():
        for _ in range(warmup):
            model(batch)
        _synchronize(device)
        start = time.perf_counter()
        for _ in range(iterations):
            model(batch)
        _synchronize(device)
        elapsed = time.perf_counter() - start
    throughput = iterations * max_batch / elapsed
    LOG.debug("%s: %.1f clips/s at batch %d", model.arch.name, throughput, max_batch)
    return throughput, max_batch


def profile(model, input_size=224, device=None, throughput=False, **options):
    flops = count_flops(model, input_size)
    params = count_params(model)
    if not throughput:
        return CostReport(model.arch.name, flops, params)
    speed, max_batch = measure_throughput(model, input_size, device or "cpu", **options)
    return CostReport(model.arch.name, flops, params, speed, max_batch)
