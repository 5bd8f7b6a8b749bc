"""Deterministic parameter initialization.

Each parameter tensor is drawn from a generator seeded by (seed, parameter
name), so a module shared by two model variants gets bit-identical weights
regardless of which other modules exist around it. Weights use truncated
normal (std 0.02), biases zeros, normalization layers identity.
"""

import torch
from torch import nn

from .seeding import generator_for

_NORM_TYPES = (nn.LayerNorm, nn.BatchNorm1d, nn.BatchNorm2d)


def init_parameters(model: nn.Module, seed: int) -> None:
    norm_params = set()
    for mod_name, mod in model.named_modules():
        if isinstance(mod, _NORM_TYPES):
            for p_name, _ in mod.named_parameters(recurse=False):
                norm_params.add(f"{mod_name}.{p_name}" if mod_name else p_name)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name in norm_params:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                nn.init.trunc_normal_(param, std=0.02, generator=generator_for(seed, "init", name))


def freeze_module(module: nn.Module) -> None:
    """Exclude a module from training: no gradients, no BN statistic updates."""
    for p in module.parameters():
        p.requires_grad_(False)
    for m in module.modules():
        if isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            m.track_running_stats = False
