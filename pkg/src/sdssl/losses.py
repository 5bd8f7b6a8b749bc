"""Training objectives.

Three framework-level objectives (cosine for byol, temperature-scaled
contrastive for simclr and mocov3) plus the two self-distillation terms:
the intermediate-layer distillation loss (mean over layers 1..L-1 of the
framework loss against the detached final target) and the predictor-only
loss (sum over all L layers, computed from detached projections so only
predictor weights receive gradient).
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericFailure, UnsupportedFrameworkError

FRAMEWORKS = ("simclr", "byol", "mocov3")
CROSS_VIEW = "cross_view"
SAME_VIEW = "same_view"
DISTILL_VIEWS = (CROSS_VIEW, SAME_VIEW)


@dataclass
class LossConfig:
    framework: str = "mocov3"
    temperature: float = 0.2
    beta: float = 1.0
    distill_view: str = CROSS_VIEW

    def validate(self):
        if self.framework not in FRAMEWORKS:
            raise ConfigurationError(f"framework must be one of {FRAMEWORKS}, got {self.framework!r}")
        if self.framework != "byol" and self.temperature <= 0:
            raise ConfigurationError(f"loss.temperature must be > 0, got {self.temperature}")
        if self.beta < 0:
            raise ConfigurationError(f"loss.beta must be >= 0, got {self.beta}")
        if self.distill_view not in DISTILL_VIEWS:
            raise ConfigurationError(
                f"distill_view must be one of {DISTILL_VIEWS}, got {self.distill_view!r}"
            )

    @property
    def contrastive(self) -> bool:
        return self.framework != "byol"

    @property
    def has_predictors(self) -> bool:
        return self.framework in ("byol", "mocov3")


@dataclass
class LossBundle:
    """Per-step loss decomposition. ``total = ssl + alpha*isd + beta_eff*pred``."""

    ssl: float
    isd: float
    pred: float
    total: float
    per_layer_isd: list = field(default_factory=list)
    per_layer_pred: list = field(default_factory=list)


def byol_loss(q: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``2 - 2 cos(q_n, z_n)``; range [0, 4]."""
    for name, t in (("q", q), ("z", z)):
        norms = t.norm(dim=1)
        zero = (norms == 0).nonzero()
        if zero.numel():
            row = int(zero[0])
            raise NumericFailure(f"zero-norm row {row} in {name}", row=row)
    cos = F.cosine_similarity(q, z, dim=1)
    return (2.0 - 2.0 * cos).mean()


def infonce_loss(q: torch.Tensor, z: torch.Tensor, temperature: float, positive_map) -> torch.Tensor:
    """Temperature-scaled contrastive loss with in-batch negatives.

    Rows of ``q`` and ``z`` are l2-normalized before the similarity, the
    positive candidate of anchor ``i`` is ``z[positive_map[i]]``, every other
    row of ``z`` is a negative, and the mean cross-entropy is scaled by
    ``2 * temperature``.
    """
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    positive_map = torch.as_tensor(positive_map, dtype=torch.long, device=q.device)
    if positive_map.numel() != q.shape[0]:
        raise ConfigurationError(
            f"positive_map has {positive_map.numel()} entries for {q.shape[0]} anchors"
        )
    if positive_map.numel() and int(positive_map.max()) >= z.shape[0]:
        raise IndexError(f"positive_map refers to row {int(positive_map.max())} of {z.shape[0]}")
    logits = F.normalize(q, dim=1) @ F.normalize(z, dim=1).t() / temperature
    return 2.0 * temperature * F.cross_entropy(logits, positive_map)


def ntxent_loss(h1: torch.Tensor, h2: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetrized simclr loss: anchors and candidates are both views' rows, self excluded.

    Returned value follows the same convention as the symmetrized
    contrastive terms elsewhere: the sum over both view directions of a
    ``2 * temperature``-scaled mean cross-entropy.
    """
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    n = h1.shape[0]
    reps = F.normalize(torch.cat([h1, h2], dim=0), dim=1)
    logits = reps @ reps.t() / temperature
    logits = logits.masked_fill(torch.eye(2 * n, dtype=torch.bool, device=logits.device), float("-inf"))
    targets = torch.cat([torch.arange(n) + n, torch.arange(n)]).to(logits.device)
    return 2.0 * temperature * 2.0 * F.cross_entropy(logits, targets)


def pairwise_ssl_loss(q: torch.Tensor, z: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """Framework loss between aligned rows of q and candidates z (one direction)."""
    if config.framework == "byol":
        return byol_loss(q, z)
    return infonce_loss(q, z, config.temperature, torch.arange(q.shape[0]))


def isd_loss(q_stack: torch.Tensor, z_last: torch.Tensor, config: LossConfig):
    """Intermediate distillation: mean over layers 1..L-1 of the framework loss
    against the detached final-layer target.

    Returns (scalar loss, per-layer tensor of length L-1).
    """
    if q_stack.ndim != 3 or q_stack.shape[0] < 1:
        raise ConfigurationError(
            "intermediate distillation needs at least 2 encoder layers (got stack "
            f"shape {tuple(q_stack.shape)})"
        )
    z = z_last.detach()
    per_layer = torch.stack([pairwise_ssl_loss(q_l, z, config) for q_l in q_stack])
    return per_layer.mean(), per_layer


def pred_loss(h_stack: torch.Tensor, z_last: torch.Tensor, bank, config: LossConfig):
    """Predictor-only loss: sum over all L layers of the framework loss between
    the predictor output on the detached projection and the detached target.

    Both inputs are detached, so gradient reaches predictor weights only.
    Returns (scalar loss, per-layer tensor of length L).
    """
    if config.framework == "simclr":
        raise UnsupportedFrameworkError("simclr has no predictors; predictor loss is undefined")
    z = z_last.detach()
    per_layer = []
    for layer, h_l in enumerate(h_stack, start=1):
        q = bank.predict(layer, h_l.detach())
        per_layer.append(pairwise_ssl_loss(q, z, config))
    per_layer = torch.stack(per_layer)
    return per_layer.sum(), per_layer


def weighted_total(ssl, isd, pred, alpha: float, beta: float, framework: str):
    """Combine components; works on tensors (for backward) and floats (for logging)."""
    if framework == "simclr":
        return ssl + alpha * isd
    return ssl + alpha * isd + beta * pred


def total_loss(ssl, isd, pred, alpha, beta, framework,
               per_layer_isd=(), per_layer_pred=()) -> LossBundle:
    """Assemble the logged LossBundle from scalar components.

    ``pred`` is ignored for simclr (no predictors). Non-finite components
    raise, naming the offending component.
    """
    if framework not in FRAMEWORKS:
        raise ConfigurationError(f"framework must be one of {FRAMEWORKS}, got {framework!r}")
    parts = {"ssl": float(ssl), "isd": float(isd), "pred": float(pred)}
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NumericFailure(f"non-finite loss component {name}: {value}", component=name)
    if framework == "simclr":
        parts["pred"] = 0.0
    total = weighted_total(parts["ssl"], parts["isd"], parts["pred"], alpha, beta, framework)
    return LossBundle(
        ssl=parts["ssl"],
        isd=parts["isd"],
        pred=parts["pred"],
        total=total,
        per_layer_isd=[float(v) for v in per_layer_isd],
        per_layer_pred=[float(v) for v in per_layer_pred],
    )


def distillation_targets(mode: str, student_last, teacher_last):
    """Select per-view distillation targets.

    ``student_last`` and ``teacher_last`` are (view1, view2) pairs of the
    student's final projections and the teacher's final projections.
    cross_view: view A's intermediate layers match the other view's teacher
    output. same_view: they match view A's own student output, detached.
    Returns (target_for_view1_anchors, target_for_view2_anchors).
    """
    h1, h2 = student_last
    z1, z2 = teacher_last
    if mode == CROSS_VIEW:
        return z2.detach(), z1.detach()
    if mode == SAME_VIEW:
        return h1.detach(), h2.detach()
    raise ConfigurationError(f"distill_view must be one of {DISTILL_VIEWS}, got {mode!r}")
