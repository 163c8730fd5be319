"""Structured channel and attention-head pruning over a dependency graph."""
from __future__ import annotations

import copy
import logging
import math
import re
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import BrokenForward, EmptyPlan
from .graph import HEADS, IN, OUT, DependencyGraph, PruneGroup, build_dependency_graph
from .importance import METHODS, lowest, random_selection, importance
from .plan import CompressionPlan
from .zoo import (HEAD_COUNT_ATTRS, InputSpec, ModelHandle, count_parameters, default_input_spec,
                  enumerate_layers, model_logits, probe_input)

logger = logging.getLogger(__name__)

N_PROBES = 3


@dataclass
class PruneSummary:
    layers: dict[str, list[int]] = field(default_factory=dict)  # name -> [before, after]
    params_before: int = 0
    params_after: int = 0
    applied_directives: list[dict] = field(default_factory=list)
    groups: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    method: str = "l2"

    def to_dict(self) -> dict:
        return {
            "layers": {k: list(v) for k, v in self.layers.items()},
            "params_before": self.params_before, "params_after": self.params_after,
            "applied_directives": self.applied_directives, "groups": self.groups,
            "warnings": self.warnings, "method": self.method,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneSummary":
        return cls({k: list(v) for k, v in d["layers"].items()}, d["params_before"],
                   d["params_after"], d["applied_directives"], d["groups"], d["warnings"],
                   d.get("method", "l2"))


def n_to_remove(width: int, ratio: float) -> int:
    """floor(ratio * width), keeping at least one channel.

    The tiny epsilon absorbs binary rounding (0.29 * 100 = 28.999...).
    """
    return max(0, min(math.floor(ratio * width + 1e-9), width - 1))


# ---------------------------------------------------------------- slicing


def _set_param(mod: nn.Module, name: str, value: torch.Tensor) -> None:
    old = getattr(mod, name)
    if isinstance(old, nn.Parameter):
        setattr(mod, name, nn.Parameter(value.contiguous(), requires_grad=old.requires_grad))
    else:
        setattr(mod, name, value.contiguous())


def _index(keep: list[int], device) -> torch.Tensor:
    return torch.tensor(keep, dtype=torch.long, device=device)


def _slice_out(mod: nn.Module, keep: list[int]) -> None:
    if isinstance(mod, nn.Conv2d):
        idx = _index(keep, mod.weight.device)
        depthwise = mod.groups > 1 and mod.groups == mod.in_channels == mod.out_channels
        _set_param(mod, "weight", mod.weight.data.index_select(0, idx))
        if mod.bias is not None:
            _set_param(mod, "bias", mod.bias.data.index_select(0, idx))
        mod.out_channels = len(keep)
        if depthwise:
            mod.in_channels = mod.groups = len(keep)
    elif isinstance(mod, nn.Linear):
        idx = _index(keep, mod.weight.device)
        _set_param(mod, "weight", mod.weight.data.index_select(0, idx))
        if mod.bias is not None:
            _set_param(mod, "bias", mod.bias.data.index_select(0, idx))
        mod.out_features = len(keep)
    elif isinstance(mod, nn.modules.batchnorm._BatchNorm):
        for attr in ("weight", "bias", "running_mean", "running_var"):
            t = getattr(mod, attr)
            if t is not None:
                _set_param(mod, attr, t.data.index_select(0, _index(keep, t.device)))
        mod.num_features = len(keep)
    elif isinstance(mod, nn.LayerNorm):
        for attr in ("weight", "bias"):
            t = getattr(mod, attr)
            if t is not None:
                _set_param(mod, attr, t.data.index_select(0, _index(keep, t.device)))
        mod.normalized_shape = (len(keep),)
    elif isinstance(mod, nn.Embedding):
        _set_param(mod, "weight", mod.weight.data.index_select(1, _index(keep, mod.weight.device)))
        mod.embedding_dim = len(keep)
    else:
        raise TypeError(f"cannot slice outputs of {type(mod).__name__}")


def _slice_in(mod: nn.Module, keep: list[int]) -> None:
    idx = _index(keep, mod.weight.device)
    _set_param(mod, "weight", mod.weight.data.index_select(1, idx))
    if isinstance(mod, nn.Conv2d):
        mod.in_channels = len(keep)
    elif isinstance(mod, nn.Linear):
        mod.in_features = len(keep)
    else:
        raise TypeError(f"cannot slice inputs of {type(mod).__name__}")


def _head_rows(heads: list[int], head_dim: int) -> list[int]:
    return [h * head_dim + j for h in heads for j in range(head_dim)]


def _width(model: nn.Module, group: PruneGroup) -> int:
    if group.kind == "head":
        return group.width
    name = group.producers[0]
    mod = model.get_submodule(name)
    for attr in ("out_channels", "out_features", "num_features", "embedding_dim"):
        if hasattr(mod, attr):
            return getattr(mod, attr)
    return mod.normalized_shape[-1]


def _group_rows(model: nn.Module, group: PruneGroup) -> torch.Tensor:
    """Stack every producer's weight rows side by side, one row per channel/head."""
    blocks = []
    if group.kind == "head":
        for name in group.qkv:
            w = model.get_submodule(name).weight.detach()
            blocks.append(w.reshape(group.width, -1))
    else:
        for name in group.producers:
            mod = model.get_submodule(name)
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                blocks.append(mod.weight.detach().reshape(mod.weight.shape[0], -1))
            elif isinstance(mod, nn.Embedding):
                blocks.append(mod.weight.detach().t())
    if not blocks:
        return torch.zeros(_width(model, group), 1)
    return torch.cat([b.float().cpu() for b in blocks], dim=1)


def select_removed(model: nn.Module, group: PruneGroup, n: int, method: str, seed: int) -> list[int]:
    width = _width(model, group)
    if method == "random":
        return random_selection(width, n, seed, group.group_id)
    if method not in METHODS:
        raise ValueError(f"unknown importance method {method!r}")
    return lowest(importance(_group_rows(model, group), method), n)


def _update_head_metadata(core: nn.Module, old: int, new: int, head_dim: int) -> None:
    for attr in HEAD_COUNT_ATTRS:
        if getattr(core, attr, None) == old:
            setattr(core, attr, new)
    for attr in ("all_head_size", "inner_dim"):
        if getattr(core, attr, None) == old * head_dim:
            setattr(core, attr, new * head_dim)


def prune_group(model: nn.Module, group: PruneGroup, remove: list[int]) -> None:
    """Remove ``remove`` (channel or head indices) from every member of ``group``."""
    width = _width(model, group)
    keep = [i for i in range(width) if i not in set(remove)]
    if group.kind == "head":
        rows = _head_rows(keep, group.head_dim)
        for name, axis in group.members:
            mod = model.get_submodule(name)
            if name in group.qkv:
                _slice_out(mod, rows)
            else:
                _slice_in(mod, rows)
        _update_head_metadata(model.get_submodule(group.attention), width, len(keep), group.head_dim)
    else:
        for name, axis in group.members:
            mod = model.get_submodule(name)
            if axis == OUT:
                _slice_out(mod, keep)
            elif axis == IN:
                _slice_in(mod, keep)
    group.width = len(keep)


def verify_forward(model: nn.Module, input_spec: InputSpec, expected_shape=None,
                   n_probes: int = N_PROBES) -> None:
    device = next((p.device for p in model.parameters()), torch.device("cpu"))
    with torch.no_grad():
        for i in range(n_probes):
            try:
                out = model_logits(model(probe_input(input_spec, seed=1000 + i, device=device)))
            except Exception as exc:
                raise BrokenForward(f"forward failed after pruning: {exc}") from exc
            if not torch.isfinite(out).all():
                raise BrokenForward("non-finite outputs after pruning")
            if expected_shape is not None and tuple(out.shape) != tuple(expected_shape):
                raise BrokenForward(f"output shape {tuple(out.shape)} != {tuple(expected_shape)}")


def _output_shape(model: nn.Module, input_spec: InputSpec):
    device = next((p.device for p in model.parameters()), torch.device("cpu"))
    with torch.no_grad():
        return tuple(model_logits(model(probe_input(input_spec, device=device))).shape)


def _prune_targets(model: nn.Module, graph: DependencyGraph, targets: list[tuple[PruneGroup, float, dict]],
                   method: str, seed: int, summary: PruneSummary) -> None:
    for group, ratio, directive in targets:
        width = _width(model, group)
        if width <= 1:
            msg = f"group {group.group_id} has width {width}; skipped"
            summary.warnings.append(msg)
            logger.warning(msg)
            continue
        n = n_to_remove(width, ratio)
        removed = select_removed(model, group, n, method, seed) if n else []
        if removed:
            prune_group(model, group, removed)
        summary.groups.append({"group_id": group.group_id, "kind": group.kind, "ratio": ratio,
                               "width_before": width, "width_after": width - len(removed),
                               "removed": removed, "directive": directive})
        for name, axis in group.members:
            if axis in (OUT, HEADS) and (group.kind == "channel" or name in group.qkv):
                before = summary.layers.get(name, [width])[0]
                summary.layers[name] = [before, width - len(removed)]
        if group.kind == "head":
            summary.layers[group.attention] = [summary.layers.get(group.attention, [width])[0],
                                               width - len(removed)]


def _prune(handle: ModelHandle, graph: DependencyGraph, layers, ratio: float, kind: str,
           method: str, seed: int, verify: bool) -> PruneSummary:
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    model = handle.module_tree if isinstance(handle, ModelHandle) else handle
    summary = PruneSummary(params_before=count_parameters(model), method=method)
    spec = graph.input_spec
    expected = _output_shape(model, spec) if verify and spec is not None else None
    targets, seen = [], set()
    for name in layers:
        g = graph.producer_group(name) if kind == "channel" else graph.head_group(name)
        if g is None:
            summary.warnings.append(f"{name}: no {kind} group")
            continue
        if not g.prunable:
            summary.warnings.append(f"{name}: group {g.group_id} is locked ({g.reason})")
            continue
        if g.group_id in seen:
            continue
        seen.add(g.group_id)
        targets.append((g, ratio, {"layers": [name], "ratio": ratio}))
    _prune_targets(model, graph, targets, method, seed, summary)
    summary.params_after = count_parameters(model)
    if verify and spec is not None:
        verify_forward(model, spec, expected)
    return summary


def apply_structured_pruning(handle, graph: DependencyGraph, layers, ratio: float,
                             method: str = "l2", seed: int = 0, verify: bool = True) -> PruneSummary:
    """Prune output channels of ``layers`` (and everything coupled to them) in place."""
    return _prune(handle, graph, layers, ratio, "channel", method, seed, verify)


def apply_head_pruning(handle, graph: DependencyGraph, layers, ratio: float,
                       method: str = "l2", seed: int = 0, verify: bool = True) -> PruneSummary:
    """Prune whole attention heads of the blocks named in ``layers`` in place."""
    return _prune(handle, graph, layers, ratio, "head", method, seed, verify)


def resolve_plan_targets(plan: CompressionPlan, graph: DependencyGraph, layer_names: list[str],
                         warnings: list[str]) -> list[tuple[PruneGroup, float, dict]]:
    """Map pruning directives to dependency groups; a later directive overrides an earlier one."""
    chosen: dict[int, tuple[PruneGroup, float, dict]] = {}
    for i, d in enumerate(plan.pruning):
        matched = [n for n in layer_names if re.fullmatch(d.layer_pattern, n)]
        desc = {"index": i, "pattern": d.layer_pattern, "pruning_type": d.pruning_type,
                "ratio": d.pruning_ratio}
        for name in matched:
            g = graph.producer_group(name) if d.pruning_type == "structured" else graph.head_group(name)
            if g is None:
                continue
            if not g.prunable:
                msg = f"{name}: group {g.group_id} is locked ({g.reason})"
                if msg not in warnings:
                    warnings.append(msg)
                continue
            prev = chosen.get(g.group_id)
            if prev is not None and prev[2]["index"] != i and prev[1] != d.pruning_ratio:
                warnings.append(f"group {g.group_id}: directive {i} overrides directive "
                                f"{prev[2]['index']} ({prev[1]} -> {d.pruning_ratio})")
            chosen[g.group_id] = (g, d.pruning_ratio, desc)
    return sorted(chosen.values(), key=lambda t: t[0].group_id)


def apply_pruning_plan(handle: ModelHandle, plan: CompressionPlan, method: str = "l2", seed: int = 0,
                       input_spec: InputSpec | None = None) -> tuple[ModelHandle, PruneSummary]:
    """Apply ``plan``'s pruning directives to a deep copy of ``handle``'s model."""
    if not plan.pruning:
        raise EmptyPlan("plan has no pruning directives")
    spec = input_spec or default_input_spec(handle)
    model = copy.deepcopy(handle.module_tree)
    pruned = handle.with_model(model)
    names = [d.qualified_name for d in enumerate_layers(model)]
    if not any(re.fullmatch(d.layer_pattern, n) for d in plan.pruning for n in names):
        raise EmptyPlan("no pruning directive matches any layer")
    graph = build_dependency_graph(pruned, spec)
    expected = _output_shape(model, spec)
    summary = PruneSummary(params_before=count_parameters(model), method=method)
    targets = resolve_plan_targets(plan, graph, names, summary.warnings)
    _prune_targets(model, graph, targets, method, seed, summary)
    summary.applied_directives = [d.to_dict() | {"index": i} for i, d in enumerate(plan.pruning)
                                  if any(t[2]["index"] == i for t in targets)]
    summary.params_after = count_parameters(model)
    verify_forward(model, spec, expected)
    return pruned, summary


def prune_all_groups(handle: ModelHandle, ratio: float, method: str, seed: int = 0,
                     input_spec: InputSpec | None = None,
                     graph: DependencyGraph | None = None) -> tuple[ModelHandle, PruneSummary]:
    """Prune every unlocked group of a copy of the model at one uniform ratio."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    spec = input_spec or (graph.input_spec if graph is not None else None) or default_input_spec(handle)
    model = copy.deepcopy(handle.module_tree)
    pruned = handle.with_model(model)
    graph = build_dependency_graph(pruned, spec)
    expected = _output_shape(model, spec)
    summary = PruneSummary(params_before=count_parameters(model), method=method)
    targets = [(g, ratio, {"uniform": ratio}) for g in graph.prunable_groups()]
    _prune_targets(model, graph, targets, method, seed, summary)
    summary.params_after = count_parameters(model)
    verify_forward(model, spec, expected)
    return pruned, summary


__all__ = ["PruneSummary", "apply_structured_pruning", "apply_head_pruning", "apply_pruning_plan",
           "prune_all_groups", "prune_group", "n_to_remove", "select_removed", "verify_forward"]
