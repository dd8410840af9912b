"""Small shared helpers for torch modules: seeded init and flat parameter views."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn


def seeded_init(module: nn.Module, generator: torch.Generator) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every parameter, drawn from ``generator``.

    Biases use the fan-in of their layer's weight; parameters are visited in
    registration order, so the result depends only on the generator state.
    """
    with torch.no_grad():
        for mod in module.modules():
            own = [p for _, p in mod.named_parameters(recurse=False)]
            matrices = [p for p in own if p.dim() > 1]
            layer_fan_in = matrices[0][0].numel() if matrices else None
            for p in own:
                fan_in = p[0].numel() if p.dim() > 1 else (layer_fan_in or p.numel())
                bound = 1.0 / math.sqrt(fan_in)
                u = torch.rand(p.shape, generator=generator, dtype=torch.float64)
                p.copy_((u * 2 - 1) * bound)


def get_flat(module: nn.Module) -> np.ndarray:
    return torch.nn.utils.parameters_to_vector(module.parameters()).detach().cpu().numpy().copy()


def set_flat(module: nn.Module, flat: np.ndarray) -> None:
    params = list(module.parameters())
    n = sum(p.numel() for p in params)
    flat = np.asarray(flat).reshape(-1)
    if flat.size != n:
        raise ValueError(f"parameter vector has {flat.size} entries, network has {n}")
    ref = params[0]
    torch.nn.utils.vector_to_parameters(torch.as_tensor(flat, dtype=ref.dtype).clone(), params)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def zero_(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module
