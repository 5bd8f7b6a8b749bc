import math

import pytest
import torch

from sdssl.config import from_mapping


@pytest.hookimpl(tryfirst=True, hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    setattr(item, "rep_" + report.when, report)


def deep_merge(base: dict, extra: dict) -> dict:
    import copy
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


TINY_MAPPING = {
    "framework": "mocov3",
    "sdssl_enabled": True,
    "seed": 0,
    "output_dir": "runs/test",
    "encoder": {"num_layers": 2, "embed_dim": 16, "num_heads": 2, "patch_size": 4,
                "image_size": 8},
    "heads": {"out_dim": 8, "hidden_last_projector": 16,
              "hidden_intermediate_projector": 12, "hidden_predictor": 16},
    "loss": {"temperature": 0.2, "beta": 1.0},
    "schedule": {"epochs": 1, "base_lr": 1e-3, "warmup_fraction": 0.1,
                 "alpha_max": 0.5, "weight_decay": 0.01},
    "data": {"dataset": "synthetic", "batch_size": 8, "synthetic_samples": 32,
             "synthetic_classes": 4,
             "recipe": {"blur_p": [0.5, 0.1]}},
    "eval": {"knn_k": 3, "probe_epochs": 5, "train_bank_size": 32,
             "test_bank_size": 16, "metric_sample_size": 16},
}


def tiny_config(framework="mocov3", **overrides):
    mapping = deep_merge(TINY_MAPPING, {"framework": framework, **overrides})
    return from_mapping(mapping)


@pytest.fixture
def tmp_run_dir(tmp_path):
    return tmp_path / "run"


# ---------------------------------------------------------------------------
# independent scalar oracles (pure python, no torch in the computation path)
# ---------------------------------------------------------------------------

def infonce_oracle(q_rows, z_rows, tau, positive_map):
    """Hand-computed softmax cross-entropy over normalized rows, scaled by 2*tau."""

    def normalize(row):
        norm = math.sqrt(sum(x * x for x in row))
        return [x / norm for x in row]

    qs = [normalize(r) for r in q_rows]
    zs = [normalize(r) for r in z_rows]
    total = 0.0
    for i, q in enumerate(qs):
        logits = [sum(a * b for a, b in zip(q, z)) / tau for z in zs]
        peak = max(logits)
        denom = sum(math.exp(l - peak) for l in logits)
        total += -(logits[positive_map[i]] - peak - math.log(denom))
    return 2.0 * tau * total / len(qs)


def byol_oracle(q_rows, z_rows):
    total = 0.0
    for q, z in zip(q_rows, z_rows):
        dot = sum(a * b for a, b in zip(q, z))
        nq = math.sqrt(sum(a * a for a in q))
        nz = math.sqrt(sum(b * b for b in z))
        total += 2.0 - 2.0 * dot / (nq * nz)
    return total / len(q_rows)


def alignment_oracle(x_rows, y_rows, gamma):
    total = 0.0
    for x, y in zip(x_rows, y_rows):
        dist = math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y)))
        total += dist ** gamma
    return total / len(x_rows)


def uniformity_oracle(rows, t):
    total, count = 0.0, 0
    for i, x in enumerate(rows):
        for j, y in enumerate(rows):
            if i == j:
                continue
            sq = sum((a - b) ** 2 for a, b in zip(x, y))
            total += math.exp(-t * sq)
            count += 1
    return math.log(total / count)


def negative_alignment_oracle(rows, gamma):
    total, count = 0.0, 0
    for i, x in enumerate(rows):
        for j, y in enumerate(rows):
            if i == j:
                continue
            dist = math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y)))
            total += dist ** gamma
            count += 1
    return total / count


def central_difference(loss_fn, param, flat_index, eps=1e-5):
    """Two-sided finite difference of a scalar loss w.r.t. one weight entry."""
    flat = param.data.view(-1)
    original = flat[flat_index].item()
    try:
        with torch.no_grad():
            flat[flat_index] = original + eps
        plus = float(loss_fn().detach())
        with torch.no_grad():
            flat[flat_index] = original - eps
        minus = float(loss_fn().detach())
    finally:
        with torch.no_grad():
            flat[flat_index] = original
    return (plus - minus) / (2.0 * eps)
