"""Dynamic post-training quantization of linear layers and byte accounting."""
from __future__ import annotations

import copy
import logging

import torch
import torch.nn as nn

from .errors import NoEligibleLayers, UnsupportedDtype
from .plan import QUANT_DTYPES, CompressionPlan, QuantizationDirective
from .qlinear import DynamicQuantLinear
from .zoo import ModelHandle

logger = logging.getLogger(__name__)

SCHEME_ATTR = "quantization_scheme"
SCHEMES = {"qint8": "int8 weights, symmetric per-output-channel scale; dynamic per-tensor activations",
           "float16": "float16 weights, dequantized at call time"}


def _model(handle) -> nn.Module:
    return handle.module_tree if isinstance(handle, ModelHandle) else handle


def select_linear_layers(model: nn.Module, directives: list[QuantizationDirective]) -> dict[str, str]:
    """Map each selected ``nn.Linear`` name to its dtype; the last matching directive wins."""
    chosen: dict[str, str] = {}
    names = [n for n, m in model.named_modules() if isinstance(m, nn.Linear)]
    for d in directives:
        if d.dtype not in QUANT_DTYPES:
            raise UnsupportedDtype(f"dtype {d.dtype!r} is not supported")
        for n in names:
            if d.matches(n):
                chosen[n] = d.dtype
    return chosen


def quantize_layers(model: nn.Module, selection: dict[str, str]) -> nn.Module:
    """Swap the selected linear layers for dynamic-quantized ones, in place."""
    device = next((p.device for p in model.parameters()), torch.device("cpu"))
    if device.type != "cpu" and "qint8" in selection.values():
        raise UnsupportedDtype(f"qint8 dynamic kernels need a CPU model, got {device}")
    scheme = dict(getattr(model, SCHEME_ATTR, {}) or {})
    for name, dtype in selection.items():
        parent_name, _, child = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        setattr(parent, child, DynamicQuantLinear.from_float(getattr(parent, child), dtype))
        scheme[name] = {"dtype": dtype, "scheme": SCHEMES[dtype]}
    setattr(model, SCHEME_ATTR, scheme)
    return model


def apply_quantization_plan(handle: ModelHandle, plan: CompressionPlan) -> ModelHandle:
    """Quantize a deep copy of the model according to ``plan``'s directives."""
    if not plan.quantization:
        raise NoEligibleLayers("plan has no quantization directives")
    model = copy.deepcopy(_model(handle))
    selection = select_linear_layers(model, plan.quantization)
    if not selection:
        raise NoEligibleLayers("no linear layer matches the quantization selectors")
    quantize_layers(model, selection)
    logger.info("quantized %d linear layers", len(selection))
    return handle.with_model(model)


def quantized_layers(handle) -> dict[str, dict]:
    return dict(getattr(_model(handle), SCHEME_ATTR, {}) or {})


def _tensor_bytes(t: torch.Tensor) -> int:
    return t.numel() * t.element_size()


def estimate_model_bytes(handle, plan: CompressionPlan | None = None) -> int:
    """Bytes of all parameters and buffers.

    With a plan, the selected linear layers are costed as if quantized:
    1 byte per qint8 weight plus a 4-byte scale per output channel, 2 bytes
    per float16 weight; biases stay float32.
    """
    model = _model(handle)
    selection = select_linear_layers(model, plan.quantization) if plan is not None else {}
    total = 0
    for name, mod in model.named_modules():
        dtype = selection.get(name)
        if dtype is None:
            total += sum(_tensor_bytes(p) for p in mod.parameters(recurse=False))
            total += sum(_tensor_bytes(b) for b in mod.buffers(recurse=False))
            continue
        w = mod.weight
        if dtype == "qint8":
            total += w.numel() + 4 * mod.out_features
        else:
            total += 2 * w.numel()
        if mod.bias is not None:
            total += 4 * mod.bias.numel()
    return total
