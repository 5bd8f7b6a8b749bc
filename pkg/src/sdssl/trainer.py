"""Training engine: the self-distilled step, EMA teacher, runs, checkpoints.

One step follows the two-view recipe: student forward on both views taps
every block, projections feed three terms (final-layer framework loss,
intermediate distillation against the opposite view's detached target,
predictor-only loss from detached projections), each symmetrized over the
two view directions; then one optimizer step on the student and an EMA
update of the teacher encoder plus final projector.

Gradient-flow contract: teacher parameters never receive gradient; the
predictor-only term sends gradient to predictor weights only; predictors
also receive gradient through the distillation and final-layer terms.
"""

import copy
import csv
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from . import losses as L
from .config import ExperimentConfig, from_mapping, to_mapping, validate_config
from .data import (ViewPair, dataset_stats, epoch_iterator, load_dataset,
                   make_view_batch, normalize_pixels)
from .encoder import ViTEncoder
from .errors import (CheckpointFormatError, ConfigurationError, NumericFailure,
                     TreeMismatchError)
from .heads import HeadBank
from .initialization import freeze_module, init_parameters
from .schedules import ScheduleState, alpha_at, ema_momentum_at, lr_at

CHECKPOINT_MAGIC = "sdssl-checkpoint"
CHECKPOINT_FORMAT_VERSION = 1
METRICS_COLUMNS = ("step", "loss_total", "loss_ssl", "loss_isd", "loss_pred",
                   "alpha", "lr", "ema_m", "ms_per_step")


@dataclass
class StepRecord:
    step: int
    losses: L.LossBundle
    alpha: float
    lr: float
    ema_momentum: float
    ms_per_step: float = 0.0


class StudentModel(nn.Module):
    def __init__(self, encoder: ViTEncoder, heads: HeadBank):
        super().__init__()
        self.encoder = encoder
        self.heads = heads


class EmaPair(nn.Module):
    """The subtree tracked by the teacher: encoder plus final projector."""

    def __init__(self, encoder: nn.Module, projector: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.projector = projector


def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """Elementwise ``t <- m*t + (1-m)*s`` over matching parameter trees."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigurationError(f"ema momentum must be in [0, 1], got {momentum}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        missing = sorted(t_params.keys() ^ s_params.keys())
        raise TreeMismatchError(f"parameter trees differ at: {', '.join(missing)}")
    with torch.no_grad():
        for name, t in t_params.items():
            s = s_params[name]
            if t.shape != s.shape:
                raise TreeMismatchError(f"shape mismatch at {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
            t.mul_(momentum).add_(s, alpha=1.0 - momentum)


class Trainer:
    """Owns student/teacher parameters, the optimizer, and the step counter."""

    def __init__(self, config: ExperimentConfig, total_steps: int, mean=None, std=None):
        validate_config(config)
        self.config = config
        self.framework = config.framework
        seed = config.seed

        num_layers = config.encoder.num_layers
        tapped = None if config.sdssl_enabled else [num_layers]
        encoder = ViTEncoder(config.encoder, seed=seed)
        heads = HeadBank(config.encoder.embed_dim, num_layers, config.heads, layers=tapped)
        self.student = StudentModel(encoder, heads)
        init_parameters(self.student, seed)

        self.teacher = None
        if config.loss.has_predictors:
            teacher = EmaPair(copy.deepcopy(encoder),
                              copy.deepcopy(heads.projector_module(num_layers)))
            freeze_module(teacher)
            self.teacher = teacher
        # same subtree on the student side, shared references, for EMA pairing
        self.student_ema_view = EmaPair(encoder, heads.projector_module(num_layers))

        self.optimizer = torch.optim.AdamW(
            [p for p in self.student.parameters() if p.requires_grad],
            lr=config.schedule.base_lr, betas=(0.9, 0.999),
            weight_decay=config.schedule.weight_decay,
        )

        total = int(total_steps)
        warmup = min(int(round(config.schedule.warmup_fraction * total)), max(total - 1, 0))
        self.schedule = ScheduleState(
            step=0, total_steps=total, warmup_steps=warmup,
            alpha_max=config.schedule.alpha_max, base_lr=config.schedule.base_lr,
            anneal_alpha=config.schedule.anneal_alpha,
            ema_base=config.schedule.ema_base, ema_final=config.schedule.ema_final,
        )
        self.step = 0
        self.last_record = None

        if mean is None or std is None:
            mean, std = dataset_stats(config.data.dataset)
        self.pixel_mean, self.pixel_std = mean, std

    @property
    def encoder(self) -> ViTEncoder:
        return self.student.encoder

    @property
    def heads(self) -> HeadBank:
        return self.student.heads

    def _teacher_targets(self, x1, x2):
        with torch.no_grad():
            z1 = self.teacher.projector(self.teacher.encoder.forward_all_layers(x1)[-1])
            z2 = self.teacher.projector(self.teacher.encoder.forward_all_layers(x2)[-1])
        return z1, z2

    def compute_losses(self, views: ViewPair):
        """Pure loss assembly for one view pair (no optimizer or EMA side effects).

        Returns (ssl, isd, pred) tensors plus the per-layer breakdown lists,
        every term already symmetrized over the two view directions.
        """
        if not torch.equal(views.view1.source_indices, views.view2.source_indices):
            raise ConfigurationError("the two views of a pair must share source indices")
        cfg = self.config
        self.student.train()
        x1 = normalize_pixels(views.view1.pixels, self.pixel_mean, self.pixel_std)
        x2 = normalize_pixels(views.view2.pixels, self.pixel_mean, self.pixel_std)
        feats1 = self.encoder.forward_all_layers(x1)
        feats2 = self.encoder.forward_all_layers(x2)
        num_layers = self.encoder.num_layers
        h1 = {l: self.heads.project(l, feats1[l - 1]) for l in self.heads.layers}
        h2 = {l: self.heads.project(l, feats2[l - 1]) for l in self.heads.layers}

        if self.framework == "simclr":
            z1, z2 = h1[num_layers], h2[num_layers]
            ssl = L.ntxent_loss(h1[num_layers], h2[num_layers], cfg.loss.temperature)
        else:
            z1, z2 = self._teacher_targets(x1, x2)
            q1 = self.heads.predict(num_layers, h1[num_layers])
            q2 = self.heads.predict(num_layers, h2[num_layers])
            ssl = L.pairwise_ssl_loss(q1, z2, cfg.loss) + L.pairwise_ssl_loss(q2, z1, cfg.loss)

        zero = ssl.new_zeros(())
        isd, pred = zero, zero
        per_layer_isd, per_layer_pred = [], []
        if cfg.sdssl_enabled:
            target1, target2 = L.distillation_targets(
                cfg.distill_view, (h1[num_layers], h2[num_layers]), (z1, z2))
            inter = range(1, num_layers)
            if cfg.loss.has_predictors:
                q_stack1 = torch.stack([self.heads.predict(l, h1[l]) for l in inter])
                q_stack2 = torch.stack([self.heads.predict(l, h2[l]) for l in inter])
            else:
                q_stack1 = torch.stack([h1[l] for l in inter])
                q_stack2 = torch.stack([h2[l] for l in inter])
            isd1, pl1 = L.isd_loss(q_stack1, target1, cfg.loss)
            isd2, pl2 = L.isd_loss(q_stack2, target2, cfg.loss)
            isd = isd1 + isd2
            per_layer_isd = (pl1 + pl2).detach().tolist()
            if cfg.loss.has_predictors:
                h_stack1 = torch.stack([h1[l] for l in range(1, num_layers + 1)])
                h_stack2 = torch.stack([h2[l] for l in range(1, num_layers + 1)])
                pred1, pp1 = L.pred_loss(h_stack1, z2, self.heads, cfg.loss)
                pred2, pp2 = L.pred_loss(h_stack2, z1, self.heads, cfg.loss)
                pred = pred1 + pred2
                per_layer_pred = (pp1 + pp2).detach().tolist()
        return ssl, isd, pred, per_layer_isd, per_layer_pred

    def train_step(self, views: ViewPair) -> StepRecord:
        t0 = time.perf_counter()
        cfg = self.config
        state = self.schedule.at(self.step)
        alpha, lr, momentum = alpha_at(state), lr_at(state), ema_momentum_at(state)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        ssl, isd, pred, per_layer_isd, per_layer_pred = self.compute_losses(views)
        total = L.weighted_total(ssl, isd, pred, alpha, cfg.loss.beta, self.framework)
        try:
            bundle = L.total_loss(float(ssl.detach()), float(isd.detach()), float(pred.detach()),
                                  alpha, cfg.loss.beta,
                                  self.framework, per_layer_isd, per_layer_pred)
        except NumericFailure as exc:
            exc.record = self.last_record
            raise
        if not math.isfinite(bundle.total):
            raise NumericFailure(f"non-finite total loss {bundle.total} at step {self.step}",
                                 component="total", record=self.last_record)

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        if self.teacher is not None:
            ema_update(self.teacher, self.student_ema_view, momentum)

        record = StepRecord(step=self.step, losses=bundle, alpha=alpha, lr=lr,
                            ema_momentum=momentum,
                            ms_per_step=(time.perf_counter() - t0) * 1000.0)
        self.step += 1
        self.last_record = record
        return record


def save_checkpoint(trainer: Trainer, path) -> Path:
    """Atomic write of the versioned parameter container."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_MAGIC,
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "framework": trainer.framework,
        "step": trainer.step,
        "total_steps": trainer.schedule.total_steps,
        "config": to_mapping(trainer.config),
        "student": trainer.student.state_dict(),
        "teacher": trainer.teacher.state_dict() if trainer.teacher is not None else {},
        "optimizer": trainer.optimizer.state_dict(),
    }
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Trainer:
    """Rebuild a Trainer from a checkpoint; corrupted or foreign files raise."""
    path = Path(path)
    try:
        payload = torch.load(path, weights_only=True, map_location="cpu")
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointFormatError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path} is not a recognized checkpoint (bad header)")
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path} has format version {version}, this build reads {CHECKPOINT_FORMAT_VERSION}")
    config = from_mapping(payload["config"])
    trainer = Trainer(config, total_steps=payload["total_steps"])
    trainer.student.load_state_dict(payload["student"])
    if trainer.teacher is not None:
        trainer.teacher.load_state_dict(payload["teacher"])
    trainer.optimizer.load_state_dict(payload["optimizer"])
    trainer.step = int(payload["step"])
    return trainer


def load_training_dataset(config: ExperimentConfig):
    return load_dataset(
        config.data.dataset, "train", config.data.cache_dir,
        subset_size=config.data.subset_size, seed=config.seed,
        **({"num_samples": config.data.synthetic_samples,
            "num_classes": config.data.synthetic_classes,
            "image_size": config.encoder.image_size}
           if config.data.dataset == "synthetic" else {}),
    )


def run(config: ExperimentConfig, resume=None, log=print) -> Path:
    """Full training run: emits resolved config, metrics CSV, checkpoints.

    Deterministic given the seed: batch order is a pure function of
    (seed, epoch) and augmentations of (seed, step, sample index, view).
    """
    from .config import save_resolved

    validate_config(config)
    run_dir = Path(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_training_dataset(config)
    batch_size = config.data.batch_size
    steps_per_epoch = len(dataset) // batch_size
    if steps_per_epoch < 1:
        raise ConfigurationError(
            f"dataset of {len(dataset)} samples yields no full batch of {batch_size}")
    total_steps = config.schedule.epochs * steps_per_epoch

    if resume is not None:
        trainer = load_checkpoint(resume)

        def training_identity(cfg):
            mapping = to_mapping(cfg)
            mapping.pop("output_dir", None)  # a resumed run may write elsewhere
            mapping.pop("checkpoint_every_epochs", None)
            return mapping

        if training_identity(trainer.config) != training_identity(config):
            raise CheckpointFormatError(
                f"checkpoint {resume} was produced by a different configuration")
        if trainer.schedule.total_steps != total_steps:
            raise CheckpointFormatError(
                f"checkpoint expects {trainer.schedule.total_steps} total steps, config gives {total_steps}")
    else:
        trainer = Trainer(config, total_steps)

    save_resolved(config, run_dir / "config.resolved.yaml")
    (run_dir / "VERSION").write_text(f"{CHECKPOINT_MAGIC} format {CHECKPOINT_FORMAT_VERSION}\n")

    metrics_path = run_dir / "metrics.csv"
    new_file = not metrics_path.exists()
    start_epoch = trainer.step // steps_per_epoch
    offset = trainer.step % steps_per_epoch
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(METRICS_COLUMNS)
        for epoch in range(start_epoch, config.schedule.epochs):
            for batch_idx, indices in enumerate(
                    epoch_iterator(len(dataset), batch_size, config.seed, epoch)):
                if epoch == start_epoch and batch_idx < offset:
                    continue
                views = make_view_batch(dataset, indices, config.data.recipe,
                                        config.encoder.image_size, config.seed, trainer.step)
                record = trainer.train_step(views)
                b = record.losses
                writer.writerow([record.step, repr(b.total), repr(b.ssl), repr(b.isd),
                                 repr(b.pred), repr(record.alpha), repr(record.lr),
                                 repr(record.ema_momentum), f"{record.ms_per_step:.3f}"])
            fh.flush()
            if (config.checkpoint_every_epochs
                    and (epoch + 1) % config.checkpoint_every_epochs == 0
                    and epoch + 1 < config.schedule.epochs):
                save_checkpoint(trainer, run_dir / f"checkpoint_step{trainer.step:08d}.pt")
            if log is not None and trainer.last_record is not None:
                log(f"epoch {epoch + 1}/{config.schedule.epochs} step {trainer.step} "
                    f"loss {trainer.last_record.losses.total:.4f}")
    return save_checkpoint(trainer, run_dir / "checkpoint.pt")
