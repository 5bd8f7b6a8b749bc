"""Dataset ingestion and the seeded two-view augmentation pipeline.

Every random draw is keyed by (seed, step, sample index, view id), so a
view pair, a batch order, or a whole epoch is reproducible from the config
alone regardless of prefetching or process restarts.
"""

import hashlib
import json
import math
import pickle
import tarfile
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .errors import ConfigurationError, DataError
from .seeding import generator_for

CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"
CIFAR10_MD5 = "c58f30108f718f92721af3b95e74349a"

# per-channel stats used to normalize pixels right before the encoder
DATASET_STATS = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "synthetic": ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
}


@dataclass
class ImageBatch:
    """A batch of decoded views: pixels in [0, 1], NCHW, plus source sample ids."""

    pixels: torch.Tensor
    source_indices: torch.Tensor

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[0] < 1:
            raise ConfigurationError(f"pixels must be a non-empty NCHW tensor, got {tuple(self.pixels.shape)}")
        if self.pixels.shape[0] != self.source_indices.shape[0]:
            raise ConfigurationError("pixels and source_indices disagree on batch size")


@dataclass
class ViewPair:
    view1: ImageBatch
    view2: ImageBatch


@dataclass
class AugmentationRecipe:
    """Two-view recipe; blur/solarize probabilities are per view (asymmetric)."""

    crop_scale: tuple = (0.2, 1.0)
    crop_ratio: tuple = (0.75, 4.0 / 3.0)
    hflip_p: float = 0.5
    jitter_p: float = 0.8
    jitter_brightness: float = 0.4
    jitter_contrast: float = 0.4
    jitter_saturation: float = 0.2
    jitter_hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: tuple = (1.0, 0.1)
    blur_sigma: tuple = (0.1, 2.0)
    solarize_p: tuple = (0.0, 0.2)
    solarize_threshold: float = 0.5

    def validate(self):
        probs = [self.hflip_p, self.jitter_p, self.grayscale_p, *self.blur_p, *self.solarize_p]
        for p in probs:
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"augmentation probability {p} outside [0, 1]")
        if not 0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0:
            raise ConfigurationError(f"crop_scale {self.crop_scale} must satisfy 0 < lo <= hi <= 1")


def identity_recipe() -> AugmentationRecipe:
    """All probabilities zero and a full-image crop: views equal the source."""
    return AugmentationRecipe(
        crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), hflip_p=0.0, jitter_p=0.0,
        grayscale_p=0.0, blur_p=(0.0, 0.0), solarize_p=(0.0, 0.0),
    )


def _rand(gen) -> float:
    return torch.rand((), generator=gen).item()


def _uniform(gen, lo, hi) -> float:
    return lo + (hi - lo) * _rand(gen)


def _crop_params(gen, height, width, scale, ratio):
    """Sample a random-resized-crop box (torchvision's rejection scheme)."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * _uniform(gen, scale[0], scale[1])
        aspect = math.exp(_uniform(gen, *log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(_rand(gen) * (height - h + 1))
            left = int(_rand(gen) * (width - w + 1))
            return top, left, h, w
    # fallback: the largest centered box with a valid aspect
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        w, h = int(round(height * ratio[1])), height
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def _augment_one(image: torch.Tensor, recipe: AugmentationRecipe, out_size: int,
                 gen: torch.Generator, view_id: int) -> torch.Tensor:
    c, h, w = image.shape
    top, left, ch, cw = _crop_params(gen, h, w, recipe.crop_scale, recipe.crop_ratio)
    if (top, left, ch, cw) == (0, 0, h, w) and h == out_size and w == out_size:
        out = image.clone()
    else:
        out = TF.resized_crop(image, top, left, ch, cw, [out_size, out_size], antialias=True)
    if _rand(gen) < recipe.hflip_p:
        out = TF.hflip(out)
    if _rand(gen) < recipe.jitter_p:
        out = TF.adjust_brightness(out, _uniform(gen, 1 - recipe.jitter_brightness, 1 + recipe.jitter_brightness))
        out = TF.adjust_contrast(out, _uniform(gen, 1 - recipe.jitter_contrast, 1 + recipe.jitter_contrast))
        out = TF.adjust_saturation(out, _uniform(gen, 1 - recipe.jitter_saturation, 1 + recipe.jitter_saturation))
        out = TF.adjust_hue(out, _uniform(gen, -recipe.jitter_hue, recipe.jitter_hue))
    if _rand(gen) < recipe.grayscale_p:
        out = TF.rgb_to_grayscale(out, num_output_channels=c)
    if _rand(gen) < recipe.blur_p[view_id - 1]:
        k = max(3, int(0.1 * out_size))
        k += 1 - k % 2
        sigma = _uniform(gen, *recipe.blur_sigma)
        out = TF.gaussian_blur(out, [k, k], [sigma, sigma])
    if _rand(gen) < recipe.solarize_p[view_id - 1]:
        out = TF.solarize(out, recipe.solarize_threshold)
    return out.clamp(0.0, 1.0)


def make_view_pair(sample: torch.Tensor, recipe: AugmentationRecipe, out_size: int,
                   seed: int, step: int, index: int):
    """Two independently augmented views, fully determined by (seed, step, index, view id)."""
    recipe.validate()
    views = []
    for view_id in (1, 2):
        gen = generator_for(seed, "view", step, index, view_id)
        views.append(_augment_one(sample, recipe, out_size, gen, view_id))
    return views[0], views[1]


def make_view_batch(dataset, indices, recipe: AugmentationRecipe, out_size: int,
                    seed: int, step: int) -> ViewPair:
    v1, v2 = [], []
    for idx in indices.tolist():
        a, b = make_view_pair(dataset.image(idx), recipe, out_size, seed, step, idx)
        v1.append(a)
        v2.append(b)
    indices = torch.as_tensor(indices, dtype=torch.long)
    return ViewPair(
        view1=ImageBatch(torch.stack(v1), indices),
        view2=ImageBatch(torch.stack(v2), indices.clone()),
    )


def eval_transform(sample: torch.Tensor, out_size: int) -> torch.Tensor:
    """Deterministic evaluation view: resize shorter side then center crop."""
    c, h, w = sample.shape
    if h == out_size and w == out_size:
        return sample.clone()
    scale = out_size / min(h, w)
    rh, rw = int(round(h * scale)), int(round(w * scale))
    out = TF.resize(sample, [rh, rw], antialias=True)
    return TF.center_crop(out, [out_size, out_size]).clamp(0.0, 1.0)


def epoch_iterator(num_samples: int, batch_size: int, seed: int, epoch: int):
    """Seeded permutation of sample indices in batches; the last partial batch is dropped."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    order = torch.randperm(num_samples, generator=generator_for(seed, "epoch", epoch))
    full = (num_samples // batch_size) * batch_size
    for start in range(0, full, batch_size):
        yield order[start:start + batch_size]


def normalize_pixels(pixels: torch.Tensor, mean, std) -> torch.Tensor:
    mean = torch.as_tensor(mean, dtype=pixels.dtype).view(1, -1, 1, 1)
    std = torch.as_tensor(std, dtype=pixels.dtype).view(1, -1, 1, 1)
    return (pixels - mean) / std


@dataclass
class DatasetHandle:
    name: str
    split: str
    num_samples: int
    num_classes: int
    cache_path: str
    checksum: str


class ArrayDataset:
    """In-memory image dataset: uint8 NHWC images plus integer labels."""

    def __init__(self, handle: DatasetHandle, images: np.ndarray, labels: np.ndarray):
        self.handle = handle
        self.images = images
        self.labels = labels

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self):
        return self.handle.num_classes

    def image(self, index: int) -> torch.Tensor:
        """Decoded sample: float CHW in [0, 1]."""
        try:
            arr = self.images[index]
        except IndexError as exc:
            raise DataError(f"sample {index} outside dataset {self.handle.name}/{self.handle.split}") from exc
        return torch.from_numpy(arr).permute(2, 0, 1).float() / 255.0

    def label(self, index: int) -> int:
        return int(self.labels[index])

    def subset(self, indices) -> "ArrayDataset":
        indices = np.asarray(indices)
        handle = DatasetHandle(
            name=self.handle.name, split=self.handle.split, num_samples=len(indices),
            num_classes=self.handle.num_classes, cache_path=self.handle.cache_path,
            checksum=self.handle.checksum,
        )
        return ArrayDataset(handle, self.images[indices], self.labels[indices])


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch_cifar10(cache_dir, url: str = CIFAR10_URL, md5: str = CIFAR10_MD5,
                  force: bool = False) -> dict:
    """Download, verify, and decode the 10-class 32x32 image set into shards.

    Cache layout under ``cache_dir/cifar10``: ``raw/`` holds the archive,
    ``train.npz`` / ``test.npz`` the decoded shards, ``manifest.json`` their
    sha256 checksums.
    """
    root = Path(cache_dir) / "cifar10"
    raw_dir = root / "raw"
    manifest_path = root / "manifest.json"
    if manifest_path.exists() and not force:
        return json.loads(manifest_path.read_text())

    raw_dir.mkdir(parents=True, exist_ok=True)
    archive = raw_dir / Path(url).name
    if force or not archive.exists() or _md5(archive) != md5:
        try:
            with urllib.request.urlopen(url) as resp, open(archive, "wb") as out:
                while True:
                    chunk = resp.read(1 << 20)
                    if not chunk:
                        break
                    out.write(chunk)
        except (urllib.error.URLError, OSError) as exc:
            raise DataError(f"download of {url} to {archive} failed: {exc}") from exc
    got = _md5(archive)
    if got != md5:
        raise DataError(f"checksum mismatch for {archive}: expected {md5}, got {got}")

    def decode(members):
        images, labels = [], []
        with tarfile.open(archive, "r:gz") as tar:
            for member in members:
                try:
                    payload = tar.extractfile(member).read()
                except (KeyError, AttributeError) as exc:
                    raise DataError(f"archive {archive} is missing member {member}") from exc
                entry = pickle.loads(payload, encoding="bytes")
                data = entry[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
                images.append(data)
                labels.extend(entry[b"labels"])
        return np.concatenate(images).astype(np.uint8), np.asarray(labels, dtype=np.int64)

    prefix = "cifar-10-batches-py"
    train = decode([f"{prefix}/data_batch_{i}" for i in range(1, 6)])
    test = decode([f"{prefix}/test_batch"])
    manifest = {"files": {}}
    for split, (images, labels) in (("train", train), ("test", test)):
        shard = root / f"{split}.npz"
        np.savez_compressed(shard, images=images, labels=labels)
        manifest["files"][shard.name] = _sha256(shard)
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest


def cifar10_available(cache_dir) -> bool:
    return (Path(cache_dir) / "cifar10" / "manifest.json").exists()


def _load_cifar10(split: str, cache_dir) -> ArrayDataset:
    root = Path(cache_dir) / "cifar10"
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(
            f"cifar10 cache not found at {root}; run `sdssl dataset-fetch --dataset cifar10` first"
        )
    manifest = json.loads(manifest_path.read_text())
    shard = root / f"{split}.npz"
    expected = manifest["files"].get(shard.name)
    if expected is None:
        raise DataError(f"manifest {manifest_path} has no entry for {shard.name}")
    got = _sha256(shard)
    if got != expected:
        raise DataError(f"checksum mismatch for {shard}: expected {expected}, got {got}")
    with np.load(shard) as payload:
        images, labels = payload["images"], payload["labels"]
    handle = DatasetHandle("cifar10", split, len(images), 10, str(shard), expected)
    return ArrayDataset(handle, images, labels)


def synthetic_dataset(split: str, num_samples: int = 256, num_classes: int = 4,
                      image_size: int = 16, seed: int = 0) -> ArrayDataset:
    """Deterministic class-template images for smoke tests and oracle runs.

    Each class owns a smooth random template; samples are the template plus
    mild noise, so nearby augmentations stay class-separable.
    """
    gen = generator_for(seed, "synthetic", "templates")
    low = torch.rand(num_classes, 3, 4, 4, generator=gen)
    templates = torch.nn.functional.interpolate(low, size=(image_size, image_size),
                                                mode="bilinear", align_corners=False)
    sample_gen = generator_for(seed, "synthetic", split)
    labels = torch.arange(num_samples) % num_classes
    noise = 0.08 * torch.randn(num_samples, 3, image_size, image_size, generator=sample_gen)
    images = (templates[labels] + noise).clamp(0.0, 1.0)
    images_u8 = (images * 255).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
    handle = DatasetHandle("synthetic", split, num_samples, num_classes, "", "")
    return ArrayDataset(handle, images_u8, labels.numpy().astype(np.int64))


def load_dataset(name: str, split: str, cache_dir, subset_size=None, seed: int = 0,
                 **synthetic_kwargs) -> ArrayDataset:
    if name == "cifar10":
        ds = _load_cifar10(split, cache_dir)
    elif name == "synthetic":
        ds = synthetic_dataset(split, seed=seed, **synthetic_kwargs)
    else:
        raise ConfigurationError(f"unknown dataset {name!r} (available: cifar10, synthetic)")
    if subset_size is not None and subset_size < len(ds):
        order = torch.randperm(len(ds), generator=generator_for(seed, "subset", name, split))
        ds = ds.subset(order[:subset_size].numpy())
    return ds


def dataset_stats(name: str):
    try:
        return DATASET_STATS[name]
    except KeyError:
        raise ConfigurationError(f"no pixel stats registered for dataset {name!r}")
