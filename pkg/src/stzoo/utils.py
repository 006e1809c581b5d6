import random

import numpy as np
import torch


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def topk_accuracy(scores, labels, k=1):
    """Percentage of rows whose label is among the ``k`` highest scores (``k`` capped at the class count)."""
    scores = torch.as_tensor(np.asarray(scores) if not torch.is_tensor(scores) else scores)
    labels = torch.as_tensor(np.asarray(labels) if not torch.is_tensor(labels) else labels)
    if len(labels) == 0:
        return 0.0
    k = min(k, scores.shape[1])
    top = scores.topk(k, dim=1).indices
    hits = (top == labels.view(-1, 1)).any(dim=1)
    return 100.0 * hits.double().mean().item()


def central_difference_gradient(f, x, eps=1e-6):
    """Gradient of the scalar function ``f`` at the tensor ``x`` by central differences, one element at a time."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, flat_grad = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + eps
            upper = float(f(x))
            flat[i] = original - eps
            lower = float(f(x))
            flat[i] = original
            flat_grad[i] = (upper - lower) / (2 * eps)
    return grad


def autograd_gradient(f, x):
    x = x.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(x), x)
    return grad


def relative_error(actual, expected):
    scale = torch.linalg.vector_norm(expected).clamp_min(1e-12)
    return (torch.linalg.vector_norm(actual - expected) / scale).item()
