"""Frozen-feature evaluation and representation-geometry metrics.

Weighted k-NN and a linear probe over per-layer feature banks, multi-exit
evaluation across every block, and the hypersphere metrics: positive
alignment (mean pair distance^gamma), uniformity (log mean Gaussian kernel
over distinct pairs), negative alignment (mean distance^gamma over distinct
sample pairs), and their difference D = negative - positive alignment.
"""

import json
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .data import dataset_stats, eval_transform, make_view_pair, normalize_pixels
from .errors import ConfigurationError, NumericFailure
from .initialization import init_parameters
from .seeding import derive_seed, generator_for


@dataclass
class FeatureBank:
    """Frozen features for one layer and split."""

    features: torch.Tensor
    labels: torch.Tensor
    layer: int = -1
    split: str = ""
    normalized: bool = True

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {tuple(self.features.shape)}")
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if len(self) and int(self.labels.min()) < 0:
            raise ValueError("labels must be non-negative class indices")
        if not torch.isfinite(self.features).all():
            raise NumericFailure(f"non-finite features in bank layer={self.layer} split={self.split}")

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


@dataclass
class MetricConfig:
    gamma: float = 2.0
    t: float = 2.0
    pair_sampling: str = "all_pairs"
    subsample_pairs: int = 100000
    seed: int = 0

    def validate(self):
        if self.gamma <= 0:
            raise ConfigurationError(f"gamma must be > 0, got {self.gamma}")
        if self.t <= 0:
            raise ConfigurationError(f"t must be > 0, got {self.t}")
        if self.pair_sampling not in ("all_pairs", "subsample"):
            raise ConfigurationError(f"pair_sampling must be 'all_pairs' or 'subsample'")


@dataclass
class MetricsReport:
    """Per-layer rows of L_ali, L_uni, L_ali_n and D = L_ali_n - L_ali."""

    rows: list = field(default_factory=list)

    def column(self, name):
        return [row[name] for row in self.rows]

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.rows, fh, indent=2)

    def write_csv(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "L_ali", "L_uni", "L_ali_n", "D"])
            for row in self.rows:
                writer.writerow([row["layer"], row["L_ali"], row["L_uni"], row["L_ali_n"], row["D"]])

    def write_csv_long(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "metric", "value"])
            for row in self.rows:
                for metric in ("L_ali", "L_uni", "L_ali_n", "D"):
                    writer.writerow([row["layer"], metric, row[metric]])


def extract_layer_banks(encoder, dataset, indices=None, batch_size: int = 256,
                        split: str = "", normalize: bool = True):
    """Per-layer FeatureBanks from deterministic (augmentation-free) views."""
    if indices is None:
        indices = range(len(dataset))
    indices = list(indices)
    if not indices:
        raise ValueError(f"no samples to extract for split {split!r}")
    mean, std = dataset_stats(dataset.handle.name)
    size = encoder.config.image_size
    encoder.eval()
    chunks = []
    labels = torch.tensor([dataset.label(i) for i in indices], dtype=torch.long)
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            batch = torch.stack([eval_transform(dataset.image(i), size)
                                 for i in indices[start:start + batch_size]])
            chunks.append(encoder.forward_all_layers(normalize_pixels(batch, mean, std)))
    stack = torch.cat(chunks, dim=1)
    banks = []
    for layer_idx in range(stack.shape[0]):
        feats = stack[layer_idx]
        if normalize:
            feats = F.normalize(feats, dim=1)
        banks.append(FeatureBank(feats, labels, layer=layer_idx + 1, split=split,
                                 normalized=normalize))
    return banks


def knn_classify(train: FeatureBank, test: FeatureBank, k: int = 20,
                 temperature: float = 0.07) -> float:
    """Weighted k-NN top-1 accuracy: cosine similarity, exp(sim/T) vote weights."""
    if len(train) == 0 or len(test) == 0:
        raise ValueError("feature banks must be non-empty")
    if k > len(train):
        raise ValueError(f"k={k} exceeds train bank size {len(train)}")
    train_feats = F.normalize(train.features, dim=1)
    num_classes = max(train.num_classes, test.num_classes)
    correct = 0
    for start in range(0, len(test), 512):
        feats = F.normalize(test.features[start:start + 512], dim=1)
        sims = feats @ train_feats.t()
        top_sims, top_idx = sims.topk(k, dim=1)
        weights = (top_sims / temperature).exp()
        votes = torch.zeros(feats.shape[0], num_classes)
        votes.scatter_add_(1, train.labels[top_idx], weights)
        pred = votes.argmax(dim=1)
        correct += int((pred == test.labels[start:start + 512]).sum())
    return correct / len(test)


@dataclass
class ProbeConfig:
    epochs: int = 50
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 256
    seed: int = 0


def linear_probe(train: FeatureBank, test: FeatureBank, config: ProbeConfig = None) -> float:
    """Single linear layer on frozen features: softmax cross-entropy, SGD with
    momentum and cosine-decayed learning rate; returns test top-1 accuracy."""
    config = config or ProbeConfig()
    dim = train.features.shape[1]
    num_classes = max(train.num_classes, test.num_classes)
    probe = torch.nn.Linear(dim, num_classes)
    init_parameters(probe, derive_seed(config.seed, "probe-init"))
    opt = torch.optim.SGD(probe.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    n = len(train)
    for epoch in range(config.epochs):
        lr = config.lr * (1.0 + math.cos(math.pi * epoch / config.epochs)) / 2.0
        for group in opt.param_groups:
            group["lr"] = lr
        order = torch.randperm(n, generator=generator_for(config.seed, "probe-epoch", epoch))
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = F.cross_entropy(probe(train.features[idx]), train.labels[idx])
            if not torch.isfinite(loss):
                raise NumericFailure(f"linear probe diverged at epoch {epoch}", component="probe")
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = probe(test.features).argmax(dim=1)
    return float((pred == test.labels).float().mean())


def multi_exit_eval(encoder, train_dataset, test_dataset, kind: str = "knn",
                    train_indices=None, test_indices=None, k: int = 20,
                    knn_temperature: float = 0.07, probe: ProbeConfig = None):
    """Evaluate every layer's frozen features independently; returns L accuracies."""
    if kind not in ("knn", "linear"):
        raise ConfigurationError(f"eval kind must be 'knn' or 'linear', got {kind!r}")
    train_banks = extract_layer_banks(encoder, train_dataset, train_indices, split="train")
    test_banks = extract_layer_banks(encoder, test_dataset, test_indices, split="test")
    accuracies = []
    for train_bank, test_bank in zip(train_banks, test_banks):
        if kind == "knn":
            accuracies.append(knn_classify(train_bank, test_bank, k=k, temperature=knn_temperature))
        else:
            accuracies.append(linear_probe(train_bank, test_bank, probe))
    return accuracies


def alignment(x: torch.Tensor, y: torch.Tensor, gamma: float = 2.0) -> float:
    """Mean of ||x_i - y_i||_2^gamma over aligned positive pairs."""
    if gamma <= 0:
        raise ConfigurationError(f"gamma must be > 0, got {gamma}")
    if x.shape != y.shape:
        raise ValueError(f"pair tensors disagree: {tuple(x.shape)} vs {tuple(y.shape)}")
    diff = (x.double() - y.double()).norm(dim=1)
    return float((diff ** gamma).mean())


def _off_diagonal(matrix: torch.Tensor) -> torch.Tensor:
    m = matrix.shape[0]
    mask = ~torch.eye(m, dtype=torch.bool)
    return matrix[mask]


def uniformity(features: torch.Tensor, t: float = 2.0) -> float:
    """log of the mean Gaussian kernel exp(-t ||x-y||^2) over ordered pairs i != j."""
    if t <= 0:
        raise ConfigurationError(f"t must be > 0, got {t}")
    if features.shape[0] < 2:
        raise ValueError(f"uniformity needs at least 2 samples, got {features.shape[0]}")
    f = features.double()
    sq = torch.cdist(f, f) ** 2
    return float(_off_diagonal((-t * sq).exp()).mean().log())


def negative_alignment(features: torch.Tensor, gamma: float = 2.0,
                       pair_sampling: str = "all_pairs", max_pairs: int = 100000,
                       seed: int = 0) -> float:
    """Mean of ||x - y||_2^gamma over distinct sample pairs (i != j)."""
    if gamma <= 0:
        raise ConfigurationError(f"gamma must be > 0, got {gamma}")
    m = features.shape[0]
    if m < 2:
        raise ValueError(f"negative alignment needs at least 2 samples, got {m}")
    f = features.double()
    if pair_sampling == "all_pairs":
        dist = torch.cdist(f, f)
        return float((_off_diagonal(dist) ** gamma).mean())
    if pair_sampling != "subsample":
        raise ConfigurationError(f"pair_sampling must be 'all_pairs' or 'subsample'")
    gen = generator_for(seed, "neg-pairs")
    a = torch.randint(m, (max_pairs,), generator=gen)
    b = torch.randint(m - 1, (max_pairs,), generator=gen)
    b = b + (b >= a).long()  # skip self-pairs
    dist = (f[a] - f[b]).norm(dim=1)
    return float((dist ** gamma).mean())


def layer_geometry(view1_feats: torch.Tensor, view2_feats: torch.Tensor,
                   config: MetricConfig) -> dict:
    """All geometry metrics for one layer from normalized paired view features."""
    config.validate()
    ali = alignment(view1_feats, view2_feats, config.gamma)
    uni = uniformity(view1_feats, config.t)
    n_ali = negative_alignment(view1_feats, config.gamma, config.pair_sampling,
                               config.subsample_pairs, config.seed)
    return {"L_ali": ali, "L_uni": uni, "L_ali_n": n_ali, "D": n_ali - ali}


def representation_metrics(encoder, dataset, recipe, indices=None,
                           config: MetricConfig = None, seed: int = 0,
                           batch_size: int = 256) -> MetricsReport:
    """Per-layer geometry report over seeded augmentation pairs of the dataset.

    One fixed view pair per image realizes the positive-pair distribution;
    the first view's features stand in for the data distribution in the
    uniformity and negative-alignment terms.
    """
    config = config or MetricConfig()
    config.validate()
    if indices is None:
        indices = range(len(dataset))
    indices = list(indices)
    mean, std = dataset_stats(dataset.handle.name)
    size = encoder.config.image_size
    pair_seed = derive_seed(seed, "metrics-views")
    encoder.eval()
    stacks = [[], []]
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            v1, v2 = [], []
            for i in chunk:
                a, b = make_view_pair(dataset.image(i), recipe, size, pair_seed, 0, i)
                v1.append(a)
                v2.append(b)
            for slot, views in enumerate((v1, v2)):
                batch = normalize_pixels(torch.stack(views), mean, std)
                stacks[slot].append(encoder.forward_all_layers(batch))
    per_view = [torch.cat(s, dim=1) for s in stacks]
    report = MetricsReport()
    for layer_idx in range(per_view[0].shape[0]):
        f1 = F.normalize(per_view[0][layer_idx], dim=1)
        f2 = F.normalize(per_view[1][layer_idx], dim=1)
        row = {"layer": layer_idx + 1}
        row.update(layer_geometry(f1, f2, config))
        report.rows.append(row)
    return report
