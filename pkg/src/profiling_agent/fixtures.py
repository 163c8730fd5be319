"""Small in-repo models, preprocessors and datasets used for offline runs.

Every fixture is built under a fixed seed, so structural tests, profiling and
the end-to-end pipeline run without network access or pretrained downloads.
Module names follow the dotted layout of the Hugging Face vision models they
stand in for, so the same layer regexes apply to both.
"""
from __future__ import annotations

import time
from importlib import resources
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.profiler import record_function

IMAGE_SIZE = 32


class TensorPreprocessor:
    """Minimal stand-in for an image processor.

    Accepts a PIL image, an HWC uint8 array or a CHW float tensor and returns
    ``{"pixel_values": tensor}`` with a leading batch dimension.
    """

    def __init__(self, height: int, width: int, channels: int = 3,
                 mean: float = 0.0, std: float = 1.0):
        self.size = {"height": height, "width": width}
        self.num_channels = channels
        self.mean = mean
        self.std = std

    def __call__(self, image, return_tensors: str = "pt") -> dict:
        if isinstance(image, torch.Tensor):
            x = image.detach().float()
        else:
            arr = np.asarray(image)
            if arr.ndim == 2:
                arr = arr[:, :, None]
            x = torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1)
        if x.ndim == 3:
            x = x.unsqueeze(0)
        if x.shape[1] != self.num_channels:
            if x.shape[1] == 1:
                x = x.expand(-1, self.num_channels, -1, -1)
            else:
                x = x[:, : self.num_channels]
        h, w = self.size["height"], self.size["width"]
        if tuple(x.shape[-2:]) != (h, w):
            x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        return {"pixel_values": (x - self.mean) / self.std}


class FixtureConfig:
    """Carries the metadata a registry config would (labels, image size)."""

    def __init__(self, labels: list[str], image_size: int, num_channels: int = 3, **extra):
        self.id2label = dict(enumerate(labels))
        self.label2id = {v: k for k, v in self.id2label.items()}
        self.image_size = image_size
        self.num_channels = num_channels
        for k, v in extra.items():
            setattr(self, k, v)

    def to_dict(self) -> dict:
        return {k: v for k, v in vars(self).items() if k != "label2id"}


# ---------------------------------------------------------------- models


class TinyCNN(nn.Module):
    """conv(3->8) -> conv(8->4) -> linear(4->2)."""

    def __init__(self, num_labels: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, 3, padding=1)
        self.conv2 = nn.Conv2d(8, 4, 3, padding=1)
        self.fc = nn.Linear(4, num_labels)

    def forward(self, pixel_values):
        x = F.relu(self.conv1(pixel_values))
        x = F.relu(self.conv2(x))
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


class ConvLayer(nn.Module):
    def __init__(self, cin, cout, stride=1, activation=True):
        super().__init__()
        self.convolution = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.normalization = nn.BatchNorm2d(cout)
        self.activation = nn.ReLU() if activation else nn.Identity()

    def forward(self, x):
        return self.activation(self.normalization(self.convolution(x)))


class ResidualStage(nn.Module):
    def __init__(self, channels, hidden):
        super().__init__()
        self.layer = nn.Sequential(
            ConvLayer(channels, hidden),
            ConvLayer(hidden, channels, activation=False),
        )

    def forward(self, x):
        return F.relu(x + self.layer(x))


class TinyEncoder(nn.Module):
    def __init__(self):
        super().__init__()
        self.stages0 = ResidualStage(8, 12)
        self.transition = ConvLayer(8, 16, stride=2)
        self.stages1 = ResidualStage(16, 20)

    def forward(self, x):
        return self.stages1(self.transition(self.stages0(x)))


class TinyResNet(nn.Module):
    """ResNet-style fixture whose stage convolutions are named
    ``encoder.stages<k>.layer.<n>.convolution``."""

    def __init__(self, num_labels: int = 10):
        super().__init__()
        self.embedder = ConvLayer(3, 8)
        self.encoder = TinyEncoder()
        self.classifier = nn.Linear(16, num_labels)

    def forward(self, pixel_values):
        x = self.encoder(self.embedder(pixel_values))
        return self.classifier(x.mean(dim=(2, 3)))


class TwoBranchNet(nn.Module):
    """Two convolutional branches summed into one tensor."""

    def __init__(self, num_labels: int = 2):
        super().__init__()
        self.stem = nn.Conv2d(3, 8, 3, padding=1)
        self.branch_a = nn.Sequential(nn.Conv2d(8, 6, 3, padding=1), nn.ReLU(), nn.Conv2d(6, 8, 3, padding=1))
        self.branch_b = nn.Conv2d(8, 8, 1)
        self.head = nn.Linear(8, num_labels)

    def forward(self, pixel_values):
        x = F.relu(self.stem(pixel_values))
        x = F.relu(self.branch_a(x) + self.branch_b(x))
        return self.head(F.adaptive_avg_pool2d(x, 1).flatten(1))


class SelfAttention(nn.Module):
    """Multi-head self attention with separate q/k/v projections.

    With ``fused_output=False`` the output projection lives outside this
    module (a sibling ``attention_output.dense``), as in older ViT layouts.
    """

    def __init__(self, hidden, num_heads, fused_output=True):
        super().__init__()
        self.num_attention_heads = num_heads
        self.head_dim = hidden // num_heads
        self.q_proj = nn.Linear(hidden, hidden)
        self.k_proj = nn.Linear(hidden, hidden)
        self.v_proj = nn.Linear(hidden, hidden)
        self.o_proj = nn.Linear(hidden, hidden) if fused_output else None

    def forward(self, hidden_states):
        b, n, _ = hidden_states.shape
        shape = (b, n, -1, self.head_dim)
        q = self.q_proj(hidden_states).view(shape).transpose(1, 2)
        k = self.k_proj(hidden_states).view(shape).transpose(1, 2)
        v = self.v_proj(hidden_states).view(shape).transpose(1, 2)
        scores = torch.matmul(q, k.transpose(-1, -2)) * self.head_dim ** -0.5
        context = torch.matmul(scores.softmax(dim=-1), v)
        context = context.transpose(1, 2).reshape(b, n, -1)
        if self.o_proj is not None:
            context = self.o_proj(context)
        return context, scores


class AttentionOutput(nn.Module):
    def __init__(self, hidden):
        super().__init__()
        self.dense = nn.Linear(hidden, hidden)

    def forward(self, x):
        return self.dense(x)


class MLP(nn.Module):
    def __init__(self, hidden, intermediate):
        super().__init__()
        self.fc1 = nn.Linear(hidden, intermediate)
        self.fc2 = nn.Linear(intermediate, hidden)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, hidden, num_heads, intermediate, fused_output=True):
        super().__init__()
        self.layernorm_before = nn.LayerNorm(hidden)
        self.attention = SelfAttention(hidden, num_heads, fused_output)
        self.attention_output = None if fused_output else AttentionOutput(hidden)
        self.layernorm_after = nn.LayerNorm(hidden)
        self.mlp = MLP(hidden, intermediate)

    def forward(self, x):
        h, _ = self.attention(self.layernorm_before(x))
        if self.attention_output is not None:
            h = self.attention_output(h)
        x = x + h
        return x + self.mlp(self.layernorm_after(x))


class PatchEmbeddings(nn.Module):
    def __init__(self, channels, hidden, patch):
        super().__init__()
        self.projection = nn.Conv2d(channels, hidden, patch, stride=patch)

    def forward(self, pixel_values):
        return self.projection(pixel_values).flatten(2).transpose(1, 2)


class Embeddings(nn.Module):
    def __init__(self, channels, hidden, patch, image_size):
        super().__init__()
        n_patches = (image_size // patch) ** 2
        self.cls_token = nn.Parameter(torch.randn(1, 1, hidden) * 0.02)
        self.position_embeddings = nn.Parameter(torch.randn(1, n_patches + 1, hidden) * 0.02)
        self.patch_embeddings = PatchEmbeddings(channels, hidden, patch)

    def forward(self, pixel_values):
        x = self.patch_embeddings(pixel_values)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat((cls, x), dim=1) + self.position_embeddings


class Encoder(nn.Module):
    def __init__(self, depth, hidden, num_heads, intermediate, fused_output=True):
        super().__init__()
        self.layer = nn.ModuleList(
            EncoderLayer(hidden, num_heads, intermediate, fused_output) for _ in range(depth)
        )

    def forward(self, x):
        for blk in self.layer:
            x = blk(x)
        return x


class TinyViT(nn.Module):
    """ViT-style fixture: 2 blocks, 4 heads, hidden 32 by default."""

    def __init__(self, num_labels=10, image_size=IMAGE_SIZE, patch=8, hidden=32,
                 depth=2, num_heads=4, intermediate=64, fused_output=True):
        super().__init__()
        self.embeddings = Embeddings(3, hidden, patch, image_size)
        self.encoder = Encoder(depth, hidden, num_heads, intermediate, fused_output)
        self.layernorm = nn.LayerNorm(hidden)
        self.classifier = nn.Linear(hidden, num_labels)

    def forward(self, pixel_values):
        x = self.layernorm(self.encoder(self.embeddings(pixel_values)))
        return self.classifier(x[:, 0])


class TinyMLP(nn.Module):
    """All-linear fixture (every parameter sits in an nn.Linear)."""

    def __init__(self, in_features=3 * 8 * 8, hidden=256, num_labels=10):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, num_labels)

    def forward(self, pixel_values):
        x = pixel_values.flatten(1)
        return self.fc3(F.relu(self.fc2(F.relu(self.fc1(x)))))


class SleepyConv2d(nn.Conv2d):
    """Conv2d that blocks for ``delay_s`` inside a named profiler range."""

    delay_s = 0.010

    def forward(self, x):
        with record_function("sleepy_conv"):
            time.sleep(self.delay_s)
        return super().forward(x)


class SleepyCNN(nn.Module):
    def __init__(self, num_labels: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, 3, padding=1)
        self.slow = SleepyConv2d(8, 8, 3, padding=1)
        self.fc = nn.Linear(8, num_labels)

    def forward(self, pixel_values):
        x = F.relu(self.slow(F.relu(self.conv1(pixel_values))))
        return self.fc(F.adaptive_avg_pool2d(x, 1).flatten(1))


# ---------------------------------------------------------------- registry

TWO_CLASS_LABELS = ["red", "blue"]
TEN_CLASS_LABELS = [f"class_{i}" for i in range(10)]
TRAINED_CNN_WEIGHTS = "tiny_cnn_2class.pt"


def _seeded(build: Callable[[], nn.Module], seed: int) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def _load_trained(model: nn.Module, filename: str) -> nn.Module:
    path = resources.files("profiling_agent") / "data" / filename
    if path.is_file():
        with path.open("rb") as fh:
            model.load_state_dict(torch.load(fh, map_location="cpu", weights_only=True))
    return model


def _tiny_cnn():
    return _load_trained(_seeded(TinyCNN, 0), TRAINED_CNN_WEIGHTS)


# id -> (builder, labels, image size, family, extra config attributes)
FIXTURES: dict[str, tuple] = {
    "tiny-test-cnn": (_tiny_cnn, TWO_CLASS_LABELS, IMAGE_SIZE, "convolutional", {}),
    "tiny-resnet": (lambda: _seeded(TinyResNet, 1), TEN_CLASS_LABELS, IMAGE_SIZE, "convolutional", {}),
    "tiny-two-branch": (lambda: _seeded(TwoBranchNet, 2), TWO_CLASS_LABELS, IMAGE_SIZE, "convolutional", {}),
    "tiny-vit": (lambda: _seeded(TinyViT, 3), TEN_CLASS_LABELS, IMAGE_SIZE, "transformer",
                 {"num_attention_heads": 4, "num_hidden_layers": 2, "hidden_size": 32}),
    "tiny-vit-split-output": (lambda: _seeded(lambda: TinyViT(fused_output=False), 3), TEN_CLASS_LABELS,
                              IMAGE_SIZE, "transformer",
                              {"num_attention_heads": 4, "num_hidden_layers": 2, "hidden_size": 32}),
    "tiny-mlp": (lambda: _seeded(TinyMLP, 4), TEN_CLASS_LABELS, 8, "hybrid", {}),
    "tiny-sleepy-cnn": (lambda: _seeded(SleepyCNN, 5), TWO_CLASS_LABELS, IMAGE_SIZE, "convolutional", {}),
}


def build_fixture(model_id: str):
    """Return ``(model, preprocessor, config, family)`` for a fixture id."""
    build, labels, size, family, extra = FIXTURES[model_id]
    model = build()
    model.config = FixtureConfig(labels, size, **extra)
    return model, TensorPreprocessor(size, size), model.config, family


# ---------------------------------------------------------------- datasets


class SyntheticDataset:
    """Deterministic labelled tensors; images are CHW floats.

    ``synthetic-2class``: "red" images carry a positive offset on channel 0,
    "blue" images on channel 2.  ``synthetic-10class`` assigns class k a
    positive offset on a k-dependent spatial quadrant and channel.
    """

    def __init__(self, name: str, size: int = 256, image_size: int = IMAGE_SIZE, seed: int = 1234):
        self.dataset_id = name
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn(size, 3, image_size, image_size, generator=gen) * 0.3
        if name == "synthetic-2class":
            self.labels = TWO_CLASS_LABELS
            targets = torch.arange(size) % 2
            noise[targets == 0, 0] += 1.0
            noise[targets == 1, 2] += 1.0
        elif name == "synthetic-10class":
            self.labels = TEN_CLASS_LABELS
            targets = torch.arange(size) % 10
            half = image_size // 2
            for k in range(10):
                ch, quad = k % 3, k % 4
                r, c = divmod(quad, 2)
                noise[targets == k, ch, r * half:(r + 1) * half, c * half:(c + 1) * half] += 1.0 + 0.1 * k
        else:
            raise KeyError(name)
        self.images = noise
        self.targets = targets

    def __len__(self) -> int:
        return len(self.targets)

    def __getitem__(self, i: int):
        return self.images[i], self.labels[int(self.targets[i])]


SYNTHETIC_DATASETS = ("synthetic-2class", "synthetic-10class")
