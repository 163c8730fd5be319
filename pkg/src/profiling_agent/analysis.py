"""Turn a profiling report into a validated compression plan via the LLM."""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from typing import Any

import torch.nn as nn

from .errors import BackendUnavailable, EmptyPlan, SchemaViolation, Timeout
from .llm import JsonSchemaSpec
from .plan import (PRUNING_TYPES, QUANT_DTYPES, RATIO_MAX, RATIO_MIN, CompressionPlan,
                   PruningDirective, QuantizationDirective)
from .profiler import ProfilingReport
from .zoo import ModelHandle, enumerate_layers

logger = logging.getLogger(__name__)

TOP_K = 10
FALLBACK_RATIO = 0.1
FALLBACK_LAYERS = 2

PLAN_SCHEMA = JsonSchemaSpec(required_keys=[
    ("pruning_recommendations", ("array", "object")),
    ("quantization_recommendations", ("array", "object")),
])

OUTPUT_EXAMPLE = {
    "pruning_recommendations": [{
        "layer": "<regex over layer names>",
        "pruning_type": "structured | head",
        "pruning_ratio": 0.2,
        "justification": "<short reason>",
    }],
    "quantization_recommendations": [{
        "layer": "all | <regex over layer names>",
        "quantization_type": "dynamic",
        "dtype": "qint8 | float16",
        "justification": "<short reason>",
    }],
}


@dataclass
class History:
    """What the previous iteration tried and how it measured."""

    plan: CompressionPlan
    evaluation: Any = None  # ComparisonReport or a dict of its fields

    def evaluation_dict(self) -> dict:
        ev = self.evaluation
        if ev is None:
            return {}
        return ev.to_dict() if hasattr(ev, "to_dict") else dict(ev)


# ---------------------------------------------------------------- prompt


def _fmt_int(n: int) -> str:
    return f"{n:,}"


def _ranked(items, key, k):
    return sorted(items, key=key, reverse=True)[:k]


def latency_ranking(report: ProfilingReport, k: int = TOP_K) -> list[tuple[str, float]]:
    if report.layer_latency:
        pairs = list(report.layer_latency.items())
    else:
        pairs = [(op.op_name, op.self_time_us) for op in report.dynamic_cpu or report.dynamic_accel]
    return _ranked(pairs, lambda p: p[1], k)


def build_analysis_prompt(report: ProfilingReport, history: History | None = None, k: int = TOP_K) -> str:
    spec = report.input_spec
    lines = [
        f"You are optimizing the pretrained vision model '{report.model_id}' "
        f"(family: {report.family}) for faster, smaller inference.",
        f"Input: {spec.channels}x{spec.height}x{spec.width}. "
        f"Total MACs: {_fmt_int(report.total_macs)}. Total parameters: {_fmt_int(report.total_params)}.",
        "",
        f"Top {k} layers by MACs:",
    ]
    for s in _ranked(report.static, lambda s: s.mac_count, k):
        lines.append(f"  {s.qualified_name} [{s.kind}] macs={_fmt_int(s.mac_count)} params={_fmt_int(s.param_count)}")
    lines += ["", f"Top {k} layers by parameters:"]
    for s in _ranked(report.static, lambda s: s.param_count, k):
        lines.append(f"  {s.qualified_name} [{s.kind}] params={_fmt_int(s.param_count)}")
    lat = latency_ranking(report, k)
    if lat:
        lines += ["", f"Top {k} by measured latency (microseconds per forward pass):"]
        lines += [f"  {name} {us:.1f}" for name, us in lat]
    if history is not None:
        ev = history.evaluation_dict()
        lines += ["", "Previous iteration plan:", json.dumps(history.plan.to_dict(), sort_keys=True)]
        ratios = ", ".join(f"{d.layer_pattern}={d.pruning_ratio}" for d in history.plan.pruning) or "none"
        lines.append(f"Previous pruning ratios: {ratios}")
        if ev:
            lines.append("Measured result of that plan:")
            for key in ("acc_before", "acc_after", "delta_acc_points", "speedup",
                        "param_reduction_pct", "mem_reduction_pct", "latency_before_s", "latency_after_s"):
                if key in ev and ev[key] is not None:
                    v = ev[key]
                    lines.append(f"  {key}: {v:.4f}" if isinstance(v, float) else f"  {key}: {v}")
        lines.append("Adjust the plan to keep accuracy while improving latency, memory and size.")
    lines += [
        "",
        "Recommend structured pruning (removes output channels of conv/linear layers), head pruning "
        "(removes attention heads of attention blocks) and dynamic quantization of linear layers.",
        "Layer patterns are regular expressions matched against the full layer names listed above.",
        "pruning_ratio is a float strictly between 0 and 1. quantization_type must be \"dynamic\"; "
        "dtype is qint8 or float16; layer \"all\" selects every linear layer.",
        "Respond with one JSON object using exactly these keys:",
        json.dumps(OUTPUT_EXAMPLE, indent=2),
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------- parsing


def _as_list(value) -> list:
    if value is None:
        return []
    return value if isinstance(value, list) else [value]


def _valid_regex(p) -> bool:
    if not isinstance(p, str) or not p:
        return False
    try:
        re.compile(p)
    except re.error:
        return False
    return True


def plan_from_payload(payload: dict, iteration: int = 0, source: str = "llm") -> CompressionPlan:
    """Normalize an LLM payload, dropping malformed items and clamping ratios."""
    warnings: list[str] = []
    pruning, quant = [], []
    for i, item in enumerate(_as_list(payload.get("pruning_recommendations"))):
        where = f"pruning_recommendations[{i}]"
        if not isinstance(item, dict):
            warnings.append(f"{where}: not an object, dropped")
            continue
        layer, ptype, ratio = item.get("layer"), item.get("pruning_type"), item.get("pruning_ratio")
        ptype = ptype.strip().lower() if isinstance(ptype, str) else ptype
        if not _valid_regex(layer):
            warnings.append(f"{where}: invalid layer pattern {layer!r}, dropped")
            continue
        if ptype not in PRUNING_TYPES:
            warnings.append(f"{where}: unknown pruning_type {ptype!r}, dropped")
            continue
        if isinstance(ratio, bool) or not isinstance(ratio, (int, float)) or not math.isfinite(ratio):
            warnings.append(f"{where}: non-numeric pruning_ratio {ratio!r}, dropped")
            continue
        ratio = float(ratio)
        clamped = min(max(ratio, RATIO_MIN), RATIO_MAX)
        if clamped != ratio:
            warnings.append(f"{where}: pruning_ratio {ratio} clamped to {clamped}")
        just = item.get("justification")
        pruning.append(PruningDirective(layer, ptype, clamped, just if isinstance(just, str) else ""))
    for i, item in enumerate(_as_list(payload.get("quantization_recommendations"))):
        where = f"quantization_recommendations[{i}]"
        if not isinstance(item, dict):
            warnings.append(f"{where}: not an object, dropped")
            continue
        layer, qtype, dtype = item.get("layer"), item.get("quantization_type"), item.get("dtype")
        qtype = qtype.strip().lower() if isinstance(qtype, str) else qtype
        if not (layer == "all" or _valid_regex(layer)):
            warnings.append(f"{where}: invalid layer selector {layer!r}, dropped")
            continue
        if qtype != "dynamic":
            warnings.append(f"{where}: unsupported quantization_type {qtype!r}, dropped")
            continue
        if dtype not in QUANT_DTYPES:
            warnings.append(f"{where}: unknown dtype {dtype!r}, dropped")
            continue
        just = item.get("justification")
        quant.append(QuantizationDirective(layer, qtype, dtype, just if isinstance(just, str) else ""))
    return CompressionPlan(pruning, quant, source, iteration, warnings)


def fallback_plan(report: ProfilingReport, iteration: int = 0, reason: str | None = None) -> CompressionPlan:
    """Prune the two conv/linear layers with the most MACs by 10%, quantize all linears to qint8."""
    candidates = [s for s in report.static if s.kind in ("conv2d", "linear") and s.mac_count > 0]
    top = sorted(candidates, key=lambda s: -s.mac_count)[:FALLBACK_LAYERS]
    pruning = [PruningDirective(re.escape(s.qualified_name), "structured", FALLBACK_RATIO,
                                "fallback: highest MAC share") for s in top]
    quant = [QuantizationDirective("all", "dynamic", "qint8", "fallback: quantize linear layers")]
    warnings = [f"fallback plan used: {reason}"] if reason else ["fallback plan used"]
    return CompressionPlan(pruning, quant, "fallback_rule", iteration, warnings)


def synthesize_plan(report: ProfilingReport, history: History | None, llm, iteration: int = 0,
                    out_path=None) -> CompressionPlan:
    """Ask the LLM for a plan; any gateway failure or empty answer yields the fallback plan."""
    plan = None
    if llm is None:
        plan = fallback_plan(report, iteration, "no LLM configured")
    else:
        try:
            payload, _ = llm.complete_json(build_analysis_prompt(report, history), PLAN_SCHEMA)
            plan = plan_from_payload(payload, iteration)
            if plan.empty:
                plan = fallback_plan(report, iteration, "LLM plan had no usable directives")
        except (SchemaViolation, Timeout, BackendUnavailable) as exc:
            logger.warning("analysis LLM failed (%s); using fallback plan", exc)
            plan = fallback_plan(report, iteration, f"{type(exc).__name__}: {exc}")
    if out_path is not None:
        from .store import write_json_atomic

        write_json_atomic(out_path, plan.to_dict())
    return plan


# ---------------------------------------------------------------- validation


def validate_plan(plan: CompressionPlan, handle: ModelHandle | nn.Module) -> CompressionPlan:
    """Keep only directives that hit something they can act on."""
    model = handle.module_tree if isinstance(handle, ModelHandle) else handle
    layers = enumerate_layers(model)
    kinds = {d.qualified_name: d.kind for d in layers}
    linears = [n for n, m in model.named_modules() if isinstance(m, nn.Linear)]
    warnings = list(plan.warnings)

    def warn(msg):
        if msg not in warnings:
            warnings.append(msg)

    pruning = []
    for d in plan.pruning:
        hits = [n for n in kinds if re.fullmatch(d.layer_pattern, n)]
        if not hits:
            warn(f"pruning pattern {d.layer_pattern!r} matches no layer; dropped")
            continue
        wanted = ("attention",) if d.pruning_type == "head" else ("conv2d", "linear")
        if not any(kinds[n] in wanted for n in hits):
            warn(f"{d.pruning_type} pattern {d.layer_pattern!r} matches no "
                 f"{'attention' if d.pruning_type == 'head' else 'conv/linear'} layer; dropped")
            continue
        pruning.append(d)
    quant = []
    for d in plan.quantization:
        if not any(d.matches(n) for n in linears):
            warn(f"quantization selector {d.layer_selector!r} matches no linear layer; dropped")
            continue
        quant.append(d)
    if not pruning and not quant:
        raise EmptyPlan("no directive survives validation")
    return CompressionPlan(pruning, quant, plan.source, plan.iteration, warnings)
