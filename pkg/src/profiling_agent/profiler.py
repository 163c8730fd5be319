"""Static (MACs, params) and dynamic (per-op, per-layer latency) profiling.

Conventions: one multiply-accumulate counts as 1 MAC; attention blocks are
charged for their score and context matmuls (the q/k/v/out projections are
counted on their own linear layers); norms and activations cost 0 MACs.
Latency is reported in microseconds.
"""
from __future__ import annotations

import json
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import torch
import torch.nn as nn
from torch.profiler import ProfilerActivity, profile

from .errors import CorruptReport, DeviceUnavailable, ForwardShapeError, OutOfMemory, ShapeMismatch
from .zoo import (InputSpec, LayerDescriptor, ModelHandle, enumerate_layers, probe_input,
                  resolve_device, synchronize)

DEFAULT_WARMUP = 5
DEFAULT_REPEATS = 30


@dataclass
class StaticLayerProfile:
    qualified_name: str
    mac_count: int
    param_count: int
    kind: str = "other"
    input_shape: list[int] | None = None

    def __post_init__(self):
        if self.mac_count < 0 or self.param_count < 0:
            raise ValueError("MAC and parameter counts must be non-negative")


@dataclass
class DynamicOpProfile:
    op_name: str
    device: str
    self_time_us: float  # mean self time per forward pass
    memory_bytes: int
    input_shapes: list[list[int]]
    calls: int
    total_self_time_us: float = 0.0
    memory_attributed: bool = True

    def __post_init__(self):
        if self.calls < 1 or not math.isfinite(self.self_time_us):
            raise ValueError(f"invalid op profile for {self.op_name}")


@dataclass
class ProfilingReport:
    model_id: str
    input_spec: InputSpec
    static: list[StaticLayerProfile]
    total_macs: int
    total_params: int
    family: str = "hybrid"
    dynamic_cpu: list[DynamicOpProfile] = field(default_factory=list)
    dynamic_accel: list[DynamicOpProfile] = field(default_factory=list)
    layer_latency: dict[str, float] = field(default_factory=dict)
    environment: dict = field(default_factory=dict)

    def check_totals(self) -> None:
        if self.total_macs != sum(s.mac_count for s in self.static):
            raise CorruptReport("total_macs does not match per-layer sum")
        if self.total_params != sum(s.param_count for s in self.static):
            raise CorruptReport("total_params does not match per-layer sum")


# ---------------------------------------------------------------- MACs


def _conv_out(size: int, k: int, s: int, p, d: int) -> int:
    if p == "same":
        return size
    if p == "valid":
        p = 0
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def count_macs(layer: LayerDescriptor, input_shape) -> int:
    """MACs for one call of ``layer`` on an input of ``input_shape``."""
    shape = tuple(int(s) for s in input_shape)
    if layer.kind == "conv2d":
        if len(shape) < 3:
            raise ShapeMismatch(f"{layer.qualified_name}: conv input needs (C, H, W), got {shape}")
        lead = math.prod(shape[:-3])
        c, h, w = shape[-3:]
        if c != layer.in_channels:
            raise ShapeMismatch(f"{layer.qualified_name}: expected {layer.in_channels} channels, got {c}")
        kh, kw = layer.kernel_size or (1, 1)
        sh, sw = layer.stride or (1, 1)
        ph, pw = layer.padding or (0, 0)
        dh, dw = layer.dilation or (1, 1)
        groups = layer.groups or 1
        h_out = max(0, _conv_out(h, kh, sh, ph, dh))
        w_out = max(0, _conv_out(w, kw, sw, pw, dw))
        return lead * layer.out_channels * (layer.in_channels // groups) * kh * kw * h_out * w_out
    if layer.kind == "linear":
        if not shape or shape[-1] != layer.in_channels:
            raise ShapeMismatch(f"{layer.qualified_name}: expected last dim {layer.in_channels}, got {shape}")
        return math.prod(shape[:-1]) * layer.in_channels * layer.out_channels
    if layer.kind == "attention":
        if len(shape) < 2 or shape[-1] != layer.in_channels:
            raise ShapeMismatch(f"{layer.qualified_name}: expected (..., seq, {layer.in_channels}), got {shape}")
        lead, seq = math.prod(shape[:-2]), shape[-2]
        # scores (seq x seq per head) and context, each a head_dim-deep product
        return 2 * lead * seq * seq * layer.out_channels
    return 0


# ---------------------------------------------------------------- static


def _first_tensor(args, kwargs):
    for a in args:
        if isinstance(a, torch.Tensor):
            return a
    for v in kwargs.values():
        if isinstance(v, torch.Tensor):
            return v
    return None


def _run_forward(model: nn.Module, x: torch.Tensor):
    try:
        with torch.no_grad():
            return model(x)
    except torch.cuda.OutOfMemoryError as exc:
        raise OutOfMemory(str(exc)) from exc
    except (RuntimeError, ValueError) as exc:
        raise ForwardShapeError(str(exc)) from exc


def capture_input_shapes(model: nn.Module, names, x: torch.Tensor) -> dict[str, list[int]]:
    shapes: dict[str, list[int]] = {}
    hooks = []

    def make_hook(name):
        def hook(mod, args, kwargs):
            if name not in shapes:
                t = _first_tensor(args, kwargs)
                if t is not None:
                    shapes[name] = list(t.shape)
        return hook

    modules = dict(model.named_modules())
    for n in names:
        hooks.append(modules[n].register_forward_pre_hook(make_hook(n), with_kwargs=True))
    try:
        _run_forward(model, x)
    finally:
        for h in hooks:
            h.remove()
    return shapes


def profile_static(handle: ModelHandle, input_spec: InputSpec):
    """Per-layer MAC and parameter table plus totals ``{"total_macs", "total_params"}``."""
    layers = enumerate_layers(handle)
    model = handle.module_tree
    device = next((p.device for p in model.parameters()), torch.device("cpu"))
    shapes = capture_input_shapes(model, [d.qualified_name for d in layers],
                                  probe_input(input_spec, device=device))
    table = []
    for d in layers:
        shape = shapes.get(d.qualified_name)
        macs = count_macs(d, shape) if shape is not None else 0
        table.append(StaticLayerProfile(d.qualified_name, macs, d.param_count, d.kind, shape))
    totals = {"total_macs": sum(s.mac_count for s in table),
              "total_params": sum(s.param_count for s in table)}
    return table, totals


# ---------------------------------------------------------------- dynamic


def _current_device(model: nn.Module):
    current = next((p.device for p in model.parameters()), None)
    if current is None:
        current = next((b.device for b in model.buffers()), torch.device("cpu"))
    return current


def profile_dynamic(handle: ModelHandle, input_spec: InputSpec, device: str = "cpu",
                    warmup: int = DEFAULT_WARMUP, repeats: int = DEFAULT_REPEATS) -> list[DynamicOpProfile]:
    """Aggregate per-operator self time and memory over ``repeats`` timed passes."""
    if warmup < 0 or repeats < 1:
        raise ValueError("warmup must be >= 0 and repeats >= 1")
    dev = resolve_device(device)
    model = handle.module_tree
    original = _current_device(model)
    model.to(dev)
    x = probe_input(input_spec, device=dev)
    activities = [ProfilerActivity.CPU]
    if dev.type == "cuda":
        activities.append(ProfilerActivity.CUDA)
    try:
        for _ in range(warmup):
            _run_forward(model, x)
        synchronize(dev)
        with profile(activities=activities, record_shapes=True, profile_memory=True) as prof:
            for _ in range(repeats):
                _run_forward(model, x)
                synchronize(dev)
    finally:
        model.to(original)

    shapes: dict[str, list[list[int]]] = {}
    for evt in prof.key_averages(group_by_input_shape=True):
        for s in evt.input_shapes or []:
            if s and s not in shapes.setdefault(evt.key, []):
                shapes[evt.key].append(list(s))
    out = []
    for evt in prof.key_averages():
        if evt.key.startswith("["):
            continue
        if dev.type == "cuda":
            total = float(getattr(evt, "self_device_time_total", 0.0) or evt.self_cpu_time_total)
            mem = int(getattr(evt, "self_device_memory_usage", 0) or 0)
        else:
            total = float(evt.self_cpu_time_total)
            mem = int(evt.self_cpu_memory_usage or 0)
        out.append(DynamicOpProfile(
            op_name=evt.key,
            device="cpu" if dev.type == "cpu" else "accelerator",
            self_time_us=total / repeats,
            memory_bytes=max(0, mem) // repeats,
            input_shapes=sorted(shapes.get(evt.key, [])),
            calls=int(evt.count),
            total_self_time_us=total,
        ))
    out.sort(key=lambda p: p.op_name)
    return out


def _outermost(layers: list[LayerDescriptor]) -> list[str]:
    names = [d.qualified_name for d in layers]
    keep = []
    for n in names:
        if not any(o != n and (o == "" or n.startswith(o + ".")) for o in names):
            keep.append(n)
    return keep


def profile_layers(handle: ModelHandle, input_spec: InputSpec, warmup: int = DEFAULT_WARMUP,
                   repeats: int = DEFAULT_REPEATS, device: str = "cpu",
                   stats: dict | None = None) -> dict[str, float]:
    """Mean wall time per forward pass of each outermost profiled layer, in µs.

    Layers nested inside another profiled layer (q/k/v inside an attention
    block) are covered by their parent so the per-layer times do not
    double count.  Pass ``stats`` to also receive min/max and the end-to-end
    latency.
    """
    if warmup < 0 or repeats < 1:
        raise ValueError("warmup must be >= 0 and repeats >= 1")
    dev = resolve_device(device)
    model = handle.module_tree
    original = _current_device(model)
    model.to(dev)
    x = probe_input(input_spec, device=dev)
    names = _outermost(enumerate_layers(model))
    modules = dict(model.named_modules())
    starts: dict[str, list[int]] = {}
    per_pass: dict[str, float] = {}
    samples: dict[str, list[float]] = {n: [] for n in names}
    hooks = []

    def pre(name):
        def hook(mod, args):
            synchronize(dev)
            starts.setdefault(name, []).append(time.perf_counter_ns())
        return hook

    def post(name):
        def hook(mod, args, output):
            synchronize(dev)
            per_pass[name] = per_pass.get(name, 0.0) + (time.perf_counter_ns() - starts[name].pop()) / 1e3
        return hook

    e2e = []
    try:
        for _ in range(warmup):
            _run_forward(model, x)
        for n in names:
            hooks.append(modules[n].register_forward_pre_hook(pre(n)))
            hooks.append(modules[n].register_forward_hook(post(n)))
        for _ in range(repeats):
            per_pass.clear()
            synchronize(dev)
            t0 = time.perf_counter_ns()
            _run_forward(model, x)
            synchronize(dev)
            e2e.append((time.perf_counter_ns() - t0) / 1e3)
            for n in names:
                samples[n].append(per_pass.get(n, 0.0))
    finally:
        for h in hooks:
            h.remove()
        model.to(original)

    means = {n: sum(v) / len(v) for n, v in samples.items()}
    if stats is not None:
        stats["layer_min_us"] = {n: min(v) for n, v in samples.items()}
        stats["layer_max_us"] = {n: max(v) for n, v in samples.items()}
        stats["end_to_end_mean_us"] = sum(e2e) / len(e2e)
        stats["end_to_end_min_us"] = min(e2e)
        stats["end_to_end_max_us"] = max(e2e)
    return means


def profile_model(handle: ModelHandle, input_spec: InputSpec, devices=("cpu",),
                  warmup: int = DEFAULT_WARMUP, repeats: int = DEFAULT_REPEATS,
                  dynamic: bool = True) -> ProfilingReport:
    """Full static + dynamic profile; devices that are absent are skipped."""
    table, totals = profile_static(handle, input_spec)
    report = ProfilingReport(handle.model_id, input_spec, table, totals["total_macs"],
                             totals["total_params"], handle.family)
    env = {"timestamp": datetime.now(timezone.utc).isoformat(), "warmup": warmup, "repeats": repeats,
           "torch": torch.__version__, "host": platform.machine(), "devices": {}}
    if dynamic:
        for dev in devices:
            try:
                ops = profile_dynamic(handle, input_spec, dev, warmup, repeats)
            except DeviceUnavailable:
                env["devices"][dev] = "unavailable"
                continue
            env["devices"][dev] = (torch.cuda.get_device_name() if dev != "cpu" else platform.processor() or "cpu")
            if dev == "cpu":
                report.dynamic_cpu = ops
            else:
                report.dynamic_accel = ops
        stats: dict = {}
        report.layer_latency = profile_layers(handle, input_spec, warmup, repeats, devices[0], stats)
        env.update(stats)
    report.environment = env
    return report


# ---------------------------------------------------------------- serialization


def report_to_dict(report: ProfilingReport) -> dict:
    return {
        "model_id": report.model_id,
        "family": report.family,
        "input_spec": report.input_spec.to_dict(),
        "static": {
            "layers": [asdict(s) for s in report.static],
            "total_macs": report.total_macs,
            "total_params": report.total_params,
        },
        "dynamic_cpu": [asdict(p) for p in report.dynamic_cpu],
        "dynamic_accel": [asdict(p) for p in report.dynamic_accel],
        "layer_latency": dict(report.layer_latency),
        "environment": report.environment,
    }


def report_from_dict(d: dict) -> ProfilingReport:
    try:
        static = d["static"]
        report = ProfilingReport(
            model_id=d["model_id"],
            input_spec=InputSpec.from_dict(d["input_spec"]),
            static=[StaticLayerProfile(**s) for s in static["layers"]],
            total_macs=int(static["total_macs"]),
            total_params=int(static["total_params"]),
            family=d.get("family", "hybrid"),
            dynamic_cpu=[DynamicOpProfile(**p) for p in d.get("dynamic_cpu", [])],
            dynamic_accel=[DynamicOpProfile(**p) for p in d.get("dynamic_accel", [])],
            layer_latency={k: float(v) for k, v in d.get("layer_latency", {}).items()},
            environment=d.get("environment", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptReport(f"malformed profiling report: {exc!r}") from exc
    report.check_totals()
    return report


def serialize_report(report: ProfilingReport) -> bytes:
    from .store import dumps

    return dumps(report_to_dict(report)).encode()


def deserialize_report(data: bytes | str) -> ProfilingReport:
    try:
        d = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptReport(f"not JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise CorruptReport("report must be a JSON object")
    return report_from_dict(d)
