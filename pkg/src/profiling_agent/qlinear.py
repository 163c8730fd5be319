"""Dynamically quantized drop-in replacement for ``nn.Linear``.

qint8: weights are stored as int8 with one symmetric float32 scale per output
channel; activations are quantized on every call from their observed min/max.
float16: weights are stored in half precision and upcast at call time.

Weights live in buffers, so ``state_dict`` and byte accounting see exactly
what is stored.  The int8 path runs through the runtime's packed dynamic
linear kernel when one is available and otherwise through an equivalent
dequantize/requantize reference computation.
"""
from __future__ import annotations

import warnings

import torch
import torch.nn as nn
import torch.nn.functional as F

SUPPORTED_DTYPES = ("qint8", "float16")
QMAX = 127


def _kernel_available() -> bool:
    return hasattr(torch.ops, "quantized") and hasattr(torch.ops.quantized, "linear_dynamic")


def quantize_activation(x: torch.Tensor, reduce_range: bool) -> torch.Tensor:
    """Per-tensor asymmetric uint8 fake-quantization from observed min/max."""
    qmax = 127 if reduce_range else 255
    lo = torch.clamp(x.min(), max=0.0)
    hi = torch.clamp(x.max(), min=0.0)
    scale = (hi - lo) / qmax
    if scale == 0:
        return x
    zero_point = torch.clamp(torch.round(-lo / scale), 0, qmax)
    q = torch.clamp(torch.round(x / scale) + zero_point, 0, qmax)
    return (q - zero_point) * scale


class DynamicQuantLinear(nn.Module):
    def __init__(self, in_features: int, out_features: int, dtype: str = "qint8",
                 bias: bool = True, reduce_range: bool = True):
        super().__init__()
        if dtype not in SUPPORTED_DTYPES:
            raise ValueError(dtype)
        self.in_features = in_features
        self.out_features = out_features
        self.dtype_name = dtype
        self.reduce_range = reduce_range
        if dtype == "qint8":
            self.register_buffer("weight_int8", torch.zeros(out_features, in_features, dtype=torch.int8))
            self.register_buffer("weight_scale", torch.ones(out_features))
        else:
            self.register_buffer("weight_fp16", torch.zeros(out_features, in_features, dtype=torch.float16))
        self.register_buffer("bias", torch.zeros(out_features) if bias else None)
        self._packed = None

    @classmethod
    def from_float(cls, linear: nn.Linear, dtype: str = "qint8") -> "DynamicQuantLinear":
        mod = cls(linear.in_features, linear.out_features, dtype, bias=linear.bias is not None)
        w = linear.weight.detach().float().cpu()
        if dtype == "qint8":
            scale = w.abs().amax(dim=1) / QMAX
            scale = torch.where(scale > 0, scale, torch.ones_like(scale))
            q = torch.clamp(torch.round(w / scale[:, None]), -QMAX, QMAX).to(torch.int8)
            mod.weight_int8.copy_(q)
            mod.weight_scale.copy_(scale)
        else:
            mod.weight_fp16.copy_(w.half())
        if linear.bias is not None:
            mod.bias.copy_(linear.bias.detach().float().cpu())
        return mod.to(linear.weight.device)

    def dequantized_weight(self) -> torch.Tensor:
        if self.dtype_name == "qint8":
            return self.weight_int8.float() * self.weight_scale[:, None]
        return self.weight_fp16.float()

    def logical_param_count(self) -> int:
        n = self.in_features * self.out_features
        return n + (self.out_features if self.bias is not None else 0)

    def _packed_params(self):
        if self._packed is None:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                wq = torch._make_per_channel_quantized_tensor(
                    self.weight_int8, self.weight_scale.double(),
                    torch.zeros(self.out_features, dtype=torch.long), 0)
                self._packed = torch.ops.quantized.linear_prepack(wq, self.bias)
        return self._packed

    def reference_forward(self, x: torch.Tensor) -> torch.Tensor:
        xq = quantize_activation(x.float(), self.reduce_range)
        return F.linear(xq, self.dequantized_weight(), self.bias).to(x.dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.dtype_name == "float16":
            return F.linear(x, self.weight_fp16.to(x.dtype), None if self.bias is None else self.bias.to(x.dtype))
        if x.device.type == "cpu" and _kernel_available():
            try:
                shape = x.shape
                out = torch.ops.quantized.linear_dynamic(
                    x.reshape(-1, shape[-1]).float().contiguous(), self._packed_params(), self.reduce_range)
                return out.reshape(*shape[:-1], self.out_features).to(x.dtype)
            except RuntimeError:
                self._packed = None
        return self.reference_forward(x)

    def _apply(self, fn, recurse=True):
        self._packed = None
        return super()._apply(fn, recurse)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_packed"] = None
        return state

    def extra_repr(self) -> str:
        return f"in_features={self.in_features}, out_features={self.out_features}, dtype={self.dtype_name}"
