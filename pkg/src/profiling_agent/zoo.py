"""Model acquisition, input-shape resolution and a uniform layer view."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn

from . import fixtures
from .errors import (BackendUnavailable, DeviceUnavailable, SchemaViolation, Timeout,
                     UnknownModel, UnresolvableShape)
from .llm import JsonSchemaSpec
from .qlinear import DynamicQuantLinear

logger = logging.getLogger(__name__)

CACHE_ENV = "PROFILING_AGENT_CACHE"

FAMILY_BY_MODEL_TYPE = {
    "vit": "transformer", "deit": "transformer", "swin": "transformer", "beit": "transformer",
    "resnet": "convolutional", "convnext": "convolutional", "regnet": "convolutional",
    "efficientnet": "convolutional", "mobilenet_v2": "convolutional",
}

# Architectures that can be instantiated offline with random weights.
_OFFLINE_CONFIGS = {
    "google/vit-base-patch16-224": ("ViTConfig", {}),
    "facebook/deit-base-patch16-224": ("ViTConfig", {}),
    "microsoft/resnet-101": ("ResNetConfig", {
        "depths": [3, 4, 23, 3], "layer_type": "bottleneck",
        "hidden_sizes": [256, 512, 1024, 2048], "embedding_size": 64}),
    "microsoft/swin-base-patch4-window7-224": ("SwinConfig", {
        "embed_dim": 128, "depths": [2, 2, 18, 2], "num_heads": [4, 8, 16, 32]}),
}

HEAD_COUNT_ATTRS = ("num_attention_heads", "num_heads", "n_heads")
QKV_NAMES = (("q_proj", "k_proj", "v_proj"), ("query", "key", "value"), ("q", "k", "v"))
INNER_OUT_PROJ_NAMES = ("o_proj", "out_proj", "proj")
NORM_TYPES = (nn.modules.batchnorm._BatchNorm, nn.LayerNorm, nn.GroupNorm,
              nn.modules.instancenorm._InstanceNorm)
LINEAR_TYPES = (nn.Linear, DynamicQuantLinear)


@dataclass(frozen=True)
class InputSpec:
    channels: int
    height: int
    width: int
    sequence_length: int | None = None

    def __post_init__(self):
        for name in ("channels", "height", "width"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValueError(f"InputSpec.{name} must be a positive int, got {v!r}")
        if self.sequence_length is not None and (
                isinstance(self.sequence_length, bool) or not isinstance(self.sequence_length, int)
                or self.sequence_length < 1):
            raise ValueError(f"InputSpec.sequence_length must be null or positive, got {self.sequence_length!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InputSpec":
        return cls(int(d["channels"]), int(d["height"]), int(d["width"]),
                   None if d.get("sequence_length") is None else int(d["sequence_length"]))

    def shape(self, batch: int = 1) -> tuple[int, ...]:
        return (batch, self.channels, self.height, self.width)


def probe_input(spec: InputSpec, batch: int = 1, seed: int = 0, device="cpu") -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(spec.shape(batch), generator=gen).to(device)


@dataclass
class ModelHandle:
    model_id: str
    family: str
    device: str
    module_tree: nn.Module
    preprocessor: Any
    config: Any = None
    weights: str = "pretrained"

    def __post_init__(self):
        if self.module_tree is None or self.preprocessor is None:
            raise ValueError("ModelHandle requires a module tree and a preprocessor")

    @property
    def model(self) -> nn.Module:
        return self.module_tree

    @property
    def id2label(self) -> dict[int, str]:
        mapping = getattr(self.config, "id2label", None) or {}
        return {int(k): v for k, v in mapping.items()}

    def with_model(self, model: nn.Module) -> "ModelHandle":
        return ModelHandle(self.model_id, self.family, self.device, model,
                           self.preprocessor, self.config, self.weights)


@dataclass(frozen=True)
class LayerDescriptor:
    qualified_name: str
    kind: str  # conv2d | linear | attention | norm | other
    out_channels: int
    in_channels: int
    param_count: int
    has_bias: bool
    num_heads: int | None = None
    kernel_size: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None
    padding: tuple[int, int] | None = None
    dilation: tuple[int, int] | None = None
    groups: int | None = None
    head_dim: int | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None or k == "num_heads"}


# ---------------------------------------------------------------- devices


def resolve_device(device: str) -> torch.device:
    if device in ("cpu", None):
        return torch.device("cpu")
    if device in ("accelerator", "cuda", "gpu"):
        if torch.cuda.is_available():
            return torch.device("cuda")
        raise DeviceUnavailable("no CUDA accelerator available")
    raise DeviceUnavailable(f"unknown device {device!r}")


def synchronize(device: torch.device | str) -> None:
    if torch.device(device).type == "cuda":
        torch.cuda.synchronize()


# ---------------------------------------------------------------- acquisition


def _hf_family(config) -> str:
    return FAMILY_BY_MODEL_TYPE.get(getattr(config, "model_type", ""), "hybrid")


def _acquire_hub(model_id: str, weights: str, cache_dir: str | None):
    try:
        import transformers
    except ImportError as exc:
        raise UnknownModel(f"{model_id}: transformers is not installed") from exc
    if weights == "random":
        if model_id not in _OFFLINE_CONFIGS:
            try:
                config = transformers.AutoConfig.from_pretrained(model_id, cache_dir=cache_dir)
            except Exception as exc:
                raise UnknownModel(f"{model_id}: {exc}") from exc
        else:
            cls_name, kwargs = _OFFLINE_CONFIGS[model_id]
            config = getattr(transformers, cls_name)(num_labels=1000, **kwargs)
        model = transformers.AutoModelForImageClassification.from_config(config)
        size = getattr(config, "image_size", 224)
        size = size[0] if isinstance(size, (list, tuple)) else size
        proc = fixtures.TensorPreprocessor(size, size, getattr(config, "num_channels", 3), 0.5, 0.5)
        return model, proc, config
    try:
        model = transformers.AutoModelForImageClassification.from_pretrained(model_id, cache_dir=cache_dir)
        proc = transformers.AutoImageProcessor.from_pretrained(model_id, cache_dir=cache_dir)
    except Exception as exc:
        raise UnknownModel(f"{model_id}: {exc}") from exc
    return model, proc, model.config


def acquire_model(model_id: str, device: str = "cpu", weights: str = "pretrained",
                  cache_dir: str | None = None) -> ModelHandle:
    """Load a model and its paired preprocessor onto ``device``.

    In-repo fixture ids resolve locally.  Anything else goes through the
    Hugging Face registry; ``weights="random"`` builds the architecture from
    its config without downloading weights.
    """
    dev = resolve_device(device)
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    if model_id in fixtures.FIXTURES:
        model, proc, config, family = fixtures.build_fixture(model_id)
        weights = "fixture"
    else:
        model, proc, config = _acquire_hub(model_id, weights, cache_dir)
        family = _hf_family(config)
    model.to(dev).eval()
    return ModelHandle(model_id, family, "cpu" if dev.type == "cpu" else "accelerator",
                       model, proc, config, weights)


# ---------------------------------------------------------------- layers


def head_count(module: nn.Module) -> int | None:
    for attr in HEAD_COUNT_ATTRS:
        v = getattr(module, attr, None)
        if isinstance(v, int) and not isinstance(v, bool):
            return v
    return None


def qkv_children(module: nn.Module) -> tuple[str, str, str] | None:
    for names in QKV_NAMES:
        if all(isinstance(getattr(module, n, None), LINEAR_TYPES) for n in names):
            return names
    return None


def is_attention_core(module: nn.Module) -> bool:
    return head_count(module) is not None and qkv_children(module) is not None


def inner_out_proj(module: nn.Module) -> str | None:
    for n in INNER_OUT_PROJ_NAMES:
        if isinstance(getattr(module, n, None), LINEAR_TYPES):
            return n
    return None


def attention_head_dim(module: nn.Module) -> int:
    q = getattr(module, qkv_children(module)[0])
    return q.out_features // head_count(module)


def _direct_param_count(module: nn.Module) -> int:
    if isinstance(module, DynamicQuantLinear):
        return module.logical_param_count()
    return sum(p.numel() for p in module.parameters(recurse=False))


def count_parameters(model: nn.Module) -> int:
    """Parameter count where quantized weights still count as parameters."""
    return sum(_direct_param_count(m) for m in model.modules())


def _pair(v) -> tuple[int, int]:
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v)


def describe(name: str, module: nn.Module) -> LayerDescriptor | None:
    params = _direct_param_count(module)
    if isinstance(module, nn.Conv2d):
        return LayerDescriptor(name, "conv2d", module.out_channels, module.in_channels, params,
                               module.bias is not None, kernel_size=_pair(module.kernel_size),
                               stride=_pair(module.stride), padding=_pair(module.padding),
                               dilation=_pair(module.dilation), groups=module.groups)
    if isinstance(module, LINEAR_TYPES):
        return LayerDescriptor(name, "linear", module.out_features, module.in_features, params,
                               module.bias is not None)
    if is_attention_core(module):
        q = getattr(module, qkv_children(module)[0])
        return LayerDescriptor(name, "attention", q.out_features, q.in_features, params,
                               q.bias is not None, num_heads=head_count(module),
                               head_dim=attention_head_dim(module))
    if isinstance(module, NORM_TYPES):
        width = getattr(module, "num_features", None) or getattr(module, "num_channels", None)
        if width is None:
            width = module.normalized_shape[-1]
        return LayerDescriptor(name, "norm", width, width, params,
                               getattr(module, "bias", None) is not None)
    if params:
        if isinstance(module, nn.Embedding):
            return LayerDescriptor(name, "other", module.embedding_dim, module.num_embeddings, params, False)
        return LayerDescriptor(name, "other", 0, 0, params, False)
    return None


def enumerate_layers(handle: ModelHandle | nn.Module) -> list[LayerDescriptor]:
    """Parameterized modules (plus attention blocks) in depth-first definition order."""
    model = handle.module_tree if isinstance(handle, ModelHandle) else handle
    out = []
    for name, module in model.named_modules():
        d = describe(name, module)
        if d is not None:
            out.append(d)
    return out


# ---------------------------------------------------------------- input shapes

INPUT_SHAPE_SCHEMA = JsonSchemaSpec(
    required_keys=[("channels", "integer"), ("height", "integer"), ("width", "integer"),
                   ("sequence_length", ("integer", "null"))],
    bounds={"channels": (1, None), "height": (1, None), "width": (1, None)},
)


def input_shape_prompt(model_id: str) -> str:
    return (f"Provide the expected input dimensions for '{model_id}' in JSON format. "
            "Fields should be: channels, height, width, sequence_length (use null if not applicable).")


def _size_pair(size) -> tuple[int, int] | None:
    if size is None:
        return None
    if isinstance(size, bool):
        return None
    if isinstance(size, int):
        return (size, size)
    if isinstance(size, (list, tuple)) and len(size) == 2:
        return (int(size[0]), int(size[1]))
    if isinstance(size, dict):
        if "height" in size and "width" in size:
            return (int(size["height"]), int(size["width"]))
        if "shortest_edge" in size:
            return (int(size["shortest_edge"]),) * 2
    return None


def model_metadata(handle: ModelHandle) -> dict:
    """Shape hints declared by the model config and its preprocessor."""
    meta: dict = {}
    cfg = handle.config
    if cfg is not None:
        pair = _size_pair(getattr(cfg, "image_size", None))
        if pair:
            meta["image_size"] = list(pair)
        if getattr(cfg, "num_channels", None):
            meta["channels"] = int(cfg.num_channels)
    proc = handle.preprocessor
    pair = _size_pair(getattr(proc, "crop_size", None)) or _size_pair(getattr(proc, "size", None))
    if pair:
        meta["preprocessor_size"] = list(pair)
    if "channels" not in meta and getattr(proc, "num_channels", None):
        meta["channels"] = int(proc.num_channels)
    return meta


def _from_metadata(metadata: dict) -> InputSpec:
    channels = metadata.get("channels", metadata.get("num_channels"))
    pair = _size_pair(metadata.get("image_size")) or _size_pair(metadata.get("preprocessor_size"))
    if channels is None or pair is None:
        raise UnresolvableShape(f"metadata lacks channels/image size: {sorted(metadata)}")
    return InputSpec(int(channels), pair[0], pair[1], None)


def default_input_spec(handle: ModelHandle) -> InputSpec:
    """Input shape from the model's own declared metadata, no LLM involved."""
    return _from_metadata(model_metadata(handle))


def resolve_input_spec(model_id: str, metadata: dict, llm=None,
                       out_path: str | os.PathLike | None = None) -> InputSpec:
    """Ask the LLM for the model's input shape; fall back to declared metadata.

    When the LLM answer disagrees with the preprocessor's declared size the
    preprocessor wins, since it is what actually produces the tensors.
    """
    spec = None
    llm_error: Exception | None = None
    if llm is not None:
        try:
            payload, _ = llm.complete_json(input_shape_prompt(model_id), INPUT_SHAPE_SCHEMA)
            spec = InputSpec.from_dict(payload)
        except (SchemaViolation, BackendUnavailable, Timeout, ValueError) as exc:
            llm_error = exc
            logger.warning("input shape LLM query failed (%s); using metadata", exc)
    if spec is not None:
        pre = _size_pair(metadata.get("preprocessor_size"))
        if pre and (spec.height, spec.width) != pre:
            logger.warning("LLM shape %sx%s conflicts with preprocessor %s; using preprocessor",
                           spec.height, spec.width, pre)
            spec = InputSpec(spec.channels, pre[0], pre[1], spec.sequence_length)
    else:
        try:
            spec = _from_metadata(metadata)
        except UnresolvableShape as exc:
            raise UnresolvableShape(f"{model_id}: LLM failed ({llm_error}) and {exc}") from (llm_error or exc)
    if out_path is not None:
        from .store import write_json_atomic

        write_json_atomic(out_path, spec.to_dict())
    return spec


def load_input_spec(path: str | os.PathLike) -> InputSpec:
    return InputSpec.from_dict(json.loads(Path(path).read_text()))


def model_logits(output) -> torch.Tensor:
    if isinstance(output, torch.Tensor):
        return output
    logits = getattr(output, "logits", None)
    if logits is not None:
        return logits
    if isinstance(output, (tuple, list)):
        return output[0]
    raise TypeError(f"cannot find logits in {type(output).__name__}")


def parameter_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().view(-1).view(torch.uint8).numpy().tobytes()
                 if t.numel() else b"")
    return h.hexdigest()
