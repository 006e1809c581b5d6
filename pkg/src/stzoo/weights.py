import re
from pathlib import Path

import numpy as np
import torch

from stzoo.errors import WeightsError

SKIPPED_SUFFIXES = ("num_batches_tracked",)
_RESNET_RENAMES = [
    (re.compile(r"^conv1\."), "stem.0."),
    (re.compile(r"^bn1\."), "stem.1."),
    (re.compile(r"^layer(\d)\.(\d+)\."), r"layer\1_\2."),
]


def load_weight_file(path):
    """
    Read a weight file into a name -> array mapping.

    Args:
        path (str or Path): the ``.npz`` archive to read.

    Returns:
        arrays (dict): node path -> numpy.ndarray, in file order.
    """
    path = Path(path)
    if not path.is_file():
        raise WeightsError(f"missing weight file {path}")
    with np.load(path, allow_pickle=False) as archive:
        return {name: archive[name] for name in archive.files}


def save_weight_file(arrays, path):
    """
    Write a name -> array mapping as an uncompressed ``.npz`` archive.

    Args:
        arrays (dict or torch.nn.Module): the arrays, or a module whose state dict is written.
        path (str or Path): destination file; ``.npz`` is appended when missing.

    Returns:
        path (Path): the written file.
    """
    if isinstance(arrays, torch.nn.Module):
        arrays = state_to_arrays(arrays.state_dict())
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)
    return path


def state_to_arrays(state_dict):
    return {
        name: tensor.detach().cpu().numpy()
        for name, tensor in state_dict.items()
        if not name.endswith(SKIPPED_SUFFIXES)
    }


def apply_weights(module, arrays):
    """
    Copy named arrays into the matching parameters and buffers of ``module``.

    Every slot of the module must be present with the exact shape; arrays without a slot are an error too.

    Args:
        module (torch.nn.Module): the 2D network to fill.
        arrays (dict): node path -> numpy.ndarray.
    """
    state = {name: value for name, value in module.state_dict().items() if not name.endswith(SKIPPED_SUFFIXES)}
    missing = sorted(set(state) - set(arrays))
    unexpected = sorted(set(arrays) - set(state))
    if missing or unexpected:
        raise WeightsError(
            f"weight names do not match the network (missing {missing[:5]}, unexpected {unexpected[:5]})"
        )
    with torch.no_grad():
        for name, slot in state.items():
            array = arrays[name]
            if tuple(array.shape) != tuple(slot.shape):
                raise WeightsError(f"{name}: shape {tuple(array.shape)} does not match slot {tuple(slot.shape)}")
            slot.copy_(torch.from_numpy(np.asarray(array)).to(slot.dtype))


def from_torchvision(state_dict, resnet=True):
    """
    Rename a torchvision classification state dict to backbone node paths, dropping the classifier.

    Args:
        state_dict (dict): torchvision ``model.state_dict()``.
        resnet (bool): apply the ResNet stem/stage renames; GoogLeNet names already match.

    Returns:
        arrays (dict): node path -> numpy.ndarray, ready for ``save_weight_file``.
    """
    arrays = {}
    for name, tensor in state_dict.items():
        if name.startswith(("fc.", "aux1.", "aux2.")) or name.endswith(SKIPPED_SUFFIXES):
            continue
        if resnet:
            for pattern, target in _RESNET_RENAMES:
                name = pattern.sub(target, name)
        arrays[name] = tensor.detach().cpu().numpy()
    return arrays
