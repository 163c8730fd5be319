"""Benchmark models on a labelled image subset and compare variants."""
from __future__ import annotations

import hashlib
import logging
import os
import re
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DatasetUnavailable, IncompatibleInput, MismatchedRuns
from .fixtures import SYNTHETIC_DATASETS, SyntheticDataset
from .quantization import estimate_model_bytes
from .zoo import CACHE_ENV, ModelHandle, count_parameters, model_logits, synchronize

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 1000
DEFAULT_SEED = 42
MB = 2 ** 20

# registry id -> (hub path, config name, split, image column, label column)
HUB_DATASETS = {
    "imagenette": ("frgfm/imagenette", "320px", "validation", "image", "label"),
    "cifar10": ("uoft-cs/cifar10", None, "test", "img", "label"),
    "cifar100": ("uoft-cs/cifar100", None, "test", "img", "fine_label"),
    "imagenet-1k-val-subset": ("ILSVRC/imagenet-1k", None, "validation", "image", "label"),
}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff"}


# ---------------------------------------------------------------- labels

_WS = re.compile(r"\s+")


def normalize_label(text: str) -> str:
    return _WS.sub(" ", str(text).lower().replace(",", " ")).strip()


def match_label(predicted: str, truth: str) -> bool:
    """Bidirectional case-insensitive substring match.

    Deliberately loose: "catamaran" matches "cat".  ``exact_match`` is the
    strict companion metric.
    """
    p, t = normalize_label(predicted), normalize_label(truth)
    if not p or not t:
        return False
    return t in p or p in t


def exact_match(predicted: str, truth: str) -> bool:
    return normalize_label(predicted) == normalize_label(truth)


# ---------------------------------------------------------------- datasets


class HubDataset:
    def __init__(self, dataset_id: str, cache_dir: str | None = None):
        try:
            import datasets
        except ImportError as exc:
            raise DatasetUnavailable("the 'datasets' package is not installed") from exc
        path, name, split, self.image_col, label_col = HUB_DATASETS[dataset_id]
        try:
            ds = datasets.load_dataset(path, name, split=split, cache_dir=cache_dir)
        except Exception as exc:
            raise DatasetUnavailable(f"{dataset_id}: {exc}") from exc
        self.dataset_id = dataset_id
        self.ds = ds
        self.label_col = label_col
        self.labels = ds.features[label_col].names

    def __len__(self) -> int:
        return len(self.ds)

    def __getitem__(self, i: int):
        row = self.ds[int(i)]
        return row[self.image_col].convert("RGB"), self.labels[row[self.label_col]]


class FolderDataset:
    """``root/<class name>/<image>`` layout."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.dataset_id = str(root)
        self.items = []
        for cls_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            for f in sorted(cls_dir.iterdir()):
                if f.suffix.lower() in IMAGE_SUFFIXES:
                    self.items.append((f, cls_dir.name.replace("_", " ")))
        if not self.items:
            raise DatasetUnavailable(f"no class-labelled images under {root}")

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int):
        from PIL import Image

        path, label = self.items[int(i)]
        with Image.open(path) as im:
            return im.convert("RGB"), label


def load_dataset(dataset_id: str, cache_dir: str | None = None):
    if dataset_id in SYNTHETIC_DATASETS:
        return SyntheticDataset(dataset_id)
    if dataset_id in HUB_DATASETS:
        return HubDataset(dataset_id, cache_dir or os.environ.get(CACHE_ENV))
    if os.path.isdir(dataset_id):
        return FolderDataset(dataset_id)
    raise DatasetUnavailable(f"unknown dataset {dataset_id!r}")


def subset_indices(dataset_size: int, n_samples: int, seed: int) -> list[int]:
    """Seeded sample without replacement; depends only on its arguments."""
    if not 1 <= n_samples <= dataset_size:
        raise ValueError(f"n_samples must be in [1, {dataset_size}], got {n_samples}")
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(dataset_size, size=n_samples, replace=False)]


# ---------------------------------------------------------------- clocks


class TickClock:
    """Deterministic stand-in clock: every reading advances by ``tick`` seconds."""

    def __init__(self, tick: float = 1e-3):
        self.tick = tick
        self.n = 0

    def __call__(self) -> float:
        self.n += 1
        return self.n * self.tick


def make_clock(kind: str = "monotonic"):
    if kind == "monotonic":
        return time.perf_counter
    if kind == "ticks":
        return TickClock()
    raise ValueError(f"unknown clock {kind!r}")


# ---------------------------------------------------------------- reports


@dataclass
class EvaluationReport:
    model_ref: str
    dataset_id: str
    n_samples: int
    accuracy: float
    mean_latency_s: float
    latency_samples_s: list[float]
    memory_bytes: int
    param_count: int
    seed: int
    timestamp: str
    correct: int = 0
    exact_accuracy: float = 0.0
    subset_digest: str = ""
    clock: str = "monotonic"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(**d)


@dataclass
class ComparisonReport:
    delta_acc_points: float
    mem_reduction_pct: float
    param_reduction_pct: float
    speedup: float
    acc_before: float = 0.0
    acc_after: float = 0.0
    latency_before_s: float = 0.0
    latency_after_s: float = 0.0
    memory_before: int = 0
    memory_after: int = 0
    params_before: int = 0
    params_after: int = 0
    method: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.speedup > 0:
            raise ValueError("speedup must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonReport":
        return cls(**d)


def measure_memory(handle) -> int:
    """Bytes of all parameters and buffers (same accounting as compression)."""
    return estimate_model_bytes(handle)


def _pct_reduction(before: float, after: float) -> float:
    return 100.0 * (1.0 - after / before) if before else 0.0


def compare(original: EvaluationReport, optimized: EvaluationReport, method: str = "") -> ComparisonReport:
    for key in ("dataset_id", "n_samples", "seed"):
        if getattr(original, key) != getattr(optimized, key):
            raise MismatchedRuns(f"{key} differs: {getattr(original, key)!r} vs {getattr(optimized, key)!r}")
    if original.subset_digest and optimized.subset_digest and original.subset_digest != optimized.subset_digest:
        raise MismatchedRuns("evaluation subsets differ")
    return ComparisonReport(
        delta_acc_points=100.0 * (optimized.accuracy - original.accuracy),
        mem_reduction_pct=_pct_reduction(original.memory_bytes, optimized.memory_bytes),
        param_reduction_pct=_pct_reduction(original.param_count, optimized.param_count),
        speedup=original.mean_latency_s / optimized.mean_latency_s,
        acc_before=original.accuracy, acc_after=optimized.accuracy,
        latency_before_s=original.mean_latency_s, latency_after_s=optimized.mean_latency_s,
        memory_before=original.memory_bytes, memory_after=optimized.memory_bytes,
        params_before=original.param_count, params_after=optimized.param_count,
        method=method,
    )


# ---------------------------------------------------------------- evaluate


def _predict_label(handle: ModelHandle, logits: torch.Tensor) -> str:
    idx = int(logits.argmax(dim=-1).reshape(-1)[0])
    return handle.id2label.get(idx, str(idx))


def evaluate(handle: ModelHandle, dataset, n_samples: int = DEFAULT_SAMPLES, seed: int = DEFAULT_SEED,
             clock: str = "monotonic", model_ref: str | None = None) -> EvaluationReport:
    """Top-1 accuracy and per-sample latency on a seeded subset of ``dataset``."""
    ds = load_dataset(dataset) if isinstance(dataset, str) else dataset
    dataset_id = getattr(ds, "dataset_id", str(dataset))
    if n_samples > len(ds):
        raise ConfigError(f"{dataset_id} has {len(ds)} samples, {n_samples} requested")
    indices = subset_indices(len(ds), n_samples, seed)
    model = handle.module_tree.eval()
    device = next((p.device for p in model.parameters()), torch.device("cpu"))
    tick = make_clock(clock)

    inputs, truths = [], []
    for i in indices:
        image, label = ds[i]
        try:
            x = handle.preprocessor(image, return_tensors="pt")["pixel_values"].to(device)
        except Exception as exc:
            raise IncompatibleInput(f"preprocessor rejected sample {i}: {exc}") from exc
        inputs.append(x)
        truths.append(label)

    latencies, correct, exact = [], 0, 0
    with torch.no_grad():
        try:
            model(inputs[0])  # warmup, not timed
        except RuntimeError as exc:
            raise IncompatibleInput(f"model rejected preprocessed input: {exc}") from exc
        for x, truth in zip(inputs, truths):
            synchronize(device)
            t0 = tick()
            out = model(x)
            synchronize(device)
            latencies.append(tick() - t0)
            pred = _predict_label(handle, model_logits(out))
            correct += match_label(pred, truth)
            exact += exact_match(pred, truth)

    digest = hashlib.sha256(",".join(map(str, indices)).encode()).hexdigest()[:16]
    return EvaluationReport(
        model_ref=model_ref or handle.model_id,
        dataset_id=dataset_id,
        n_samples=n_samples,
        accuracy=correct / n_samples,
        mean_latency_s=sum(latencies) / len(latencies),
        latency_samples_s=latencies,
        memory_bytes=measure_memory(handle),
        param_count=count_parameters(model),
        seed=seed,
        timestamp=datetime.now(timezone.utc).isoformat(),
        correct=correct,
        exact_accuracy=exact / n_samples,
        subset_digest=digest,
        clock=clock,
    )
