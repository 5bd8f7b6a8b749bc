"""Per-layer projector and predictor MLP banks.

Projectors are 3-layer MLPs (hidden width differs between intermediate
layers and the last layer), predictors 2-layer. BatchNorm sits on every
hidden layer; output layers get BatchNorm for every framework except byol.
Layers directly followed by BatchNorm carry no bias.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, UnsupportedFrameworkError
from .losses import FRAMEWORKS


@dataclass
class HeadConfig:
    out_dim: int = 256
    hidden_last_projector: int = 4096
    hidden_intermediate_projector: int = 2048
    hidden_predictor: int = 4096
    framework: str = "mocov3"
    shared_predictor: bool = False

    def validate(self):
        for name in ("out_dim", "hidden_last_projector", "hidden_intermediate_projector",
                     "hidden_predictor"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"heads.{name} must be a positive integer")
        if self.framework not in FRAMEWORKS:
            raise ConfigurationError(f"framework must be one of {FRAMEWORKS}, got {self.framework!r}")

    @property
    def bn_on_output(self) -> bool:
        return self.framework != "byol"

    @property
    def has_predictors(self) -> bool:
        return self.framework in ("byol", "mocov3")


def _hidden_block(in_dim: int, out_dim: int):
    return [nn.Linear(in_dim, out_dim, bias=False), nn.BatchNorm1d(out_dim), nn.ReLU(inplace=True)]


def _output_block(in_dim: int, out_dim: int, bn_on_output: bool):
    if bn_on_output:
        return [nn.Linear(in_dim, out_dim, bias=False), nn.BatchNorm1d(out_dim)]
    return [nn.Linear(in_dim, out_dim, bias=True)]


def make_projector(in_dim: int, hidden: int, out_dim: int, bn_on_output: bool) -> nn.Sequential:
    return nn.Sequential(
        *_hidden_block(in_dim, hidden),
        *_hidden_block(hidden, hidden),
        *_output_block(hidden, out_dim, bn_on_output),
    )


def make_predictor(dim: int, hidden: int, bn_on_output: bool) -> nn.Sequential:
    return nn.Sequential(
        *_hidden_block(dim, hidden),
        *_output_block(hidden, dim, bn_on_output),
    )


class HeadBank(nn.Module):
    """Projectors (and predictors, framework permitting) for a set of tapped layers.

    Layers are 1-based. A student bank taps 1..L when self-distillation is
    on, only L otherwise; a teacher bank taps only L and never holds
    predictors.
    """

    def __init__(self, in_dim: int, num_layers: int, config: HeadConfig,
                 layers=None, with_predictors: bool = True):
        super().__init__()
        config.validate()
        self.config = config
        self.num_layers = num_layers
        self.layers = tuple(layers) if layers is not None else tuple(range(1, num_layers + 1))
        for l in self.layers:
            if not 1 <= l <= num_layers:
                raise ConfigurationError(f"tapped layer {l} outside 1..{num_layers}")

        self.projectors = nn.ModuleDict()
        for l in self.layers:
            hidden = config.hidden_last_projector if l == num_layers else config.hidden_intermediate_projector
            self.projectors[str(l)] = make_projector(in_dim, hidden, config.out_dim, config.bn_on_output)

        self.predictors = None
        self.shared_predictor_module = None
        if with_predictors and config.has_predictors:
            if config.shared_predictor:
                self.shared_predictor_module = make_predictor(
                    config.out_dim, config.hidden_predictor, config.bn_on_output)
            else:
                self.predictors = nn.ModuleDict({
                    str(l): make_predictor(config.out_dim, config.hidden_predictor, config.bn_on_output)
                    for l in self.layers
                })

    def projector_module(self, layer: int) -> nn.Module:
        key = str(layer)
        if key not in self.projectors:
            raise IndexError(f"no projector for layer {layer}; bank taps {list(self.layers)}")
        return self.projectors[key]

    def project(self, layer: int, features: torch.Tensor) -> torch.Tensor:
        return self.projector_module(layer)(features)

    def predict(self, layer: int, projected: torch.Tensor) -> torch.Tensor:
        if not self.config.has_predictors:
            raise UnsupportedFrameworkError(
                f"framework {self.config.framework!r} has no predictors")
        if self.shared_predictor_module is not None:
            if not 1 <= layer <= self.num_layers:
                raise IndexError(f"layer {layer} outside 1..{self.num_layers}")
            return self.shared_predictor_module(projected)
        key = str(layer)
        if self.predictors is None or key not in self.predictors:
            raise IndexError(f"no predictor for layer {layer}; bank taps {list(self.layers)}")
        return self.predictors[key](projected)
