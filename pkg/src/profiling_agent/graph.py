"""Dependency graph for structured pruning, built by tracing one forward pass.

The tracer runs the model on a probe input under a ``TorchFunctionMode`` and
follows which tensor axis carries each layer's output channels.  Channels
that must shrink together end up in one :class:`PruneGroup`:

* a producer's output channels and every consumer's input channels,
* all producers feeding an elementwise sum (residual connections),
* norm layers applied to a grouped tensor,
* q/k/v and output projections of one attention block, per head.

Conv, linear, norm, embedding and attention modules are treated as opaque
nodes; everything else is followed op by op.  Whenever channels flow into
something the tracer cannot slice (a raw parameter, a reshape that splits the
channel axis, the model output, ...) the group is locked instead of guessed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
from torch.overrides import TorchFunctionMode

from .errors import TraceFailure
from .qlinear import DynamicQuantLinear
from .zoo import (InputSpec, ModelHandle, head_count, inner_out_proj, is_attention_core,
                  probe_input, qkv_children)

OUT, IN, HEADS = "out_channels", "in_channels", "heads"


@dataclass
class PruneGroup:
    group_id: int
    members: list[tuple[str, str]]
    width: int
    kind: str = "channel"  # channel | head
    prunable: bool = True
    reason: str | None = None
    head_dim: int | None = None
    attention: str | None = None
    qkv: list[str] = field(default_factory=list)

    @property
    def producers(self) -> list[str]:
        return [n for n, ax in self.members if ax == OUT]

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id, "kind": self.kind, "width": self.width,
            "prunable": self.prunable, "reason": self.reason,
            "members": [list(m) for m in self.members],
            "attention": self.attention, "head_dim": self.head_dim,
        }


@dataclass
class DependencyGraph:
    groups: list[PruneGroup]
    layer_to_groups: dict[str, list[int]]
    input_spec: InputSpec | None = None

    def group(self, gid: int) -> PruneGroup:
        return self.groups[gid]

    def prunable_groups(self, kind: str | None = None) -> list[PruneGroup]:
        return [g for g in self.groups if g.prunable and (kind is None or g.kind == kind)]

    def producer_group(self, name: str) -> PruneGroup | None:
        """The channel group in which ``name`` produces output channels."""
        for gid in self.layer_to_groups.get(name, []):
            g = self.groups[gid]
            if g.kind == "channel" and (name, OUT) in g.members:
                return g
        return None

    def head_group(self, name: str) -> PruneGroup | None:
        """Head group of an attention block, looked up by block or projection name."""
        for g in self.groups:
            if g.kind == "head" and (g.attention == name or (name, HEADS) in g.members):
                return g
        return None

    def to_dict(self) -> dict:
        return {"groups": [g.to_dict() for g in self.groups],
                "layer_to_groups": self.layer_to_groups}


# ---------------------------------------------------------------- union-find slots


class _Slot:
    __slots__ = ("parent", "members", "width", "kind", "locked", "reasons",
                 "head_dim", "attention", "qkv", "order")

    def __init__(self, width, kind, order):
        self.parent = self
        self.members: list[tuple[str, str]] = []
        self.width = width
        self.kind = kind
        self.locked = False
        self.reasons: list[str] = []
        self.head_dim = None
        self.attention = None
        self.qkv: list[str] = []
        self.order = order

    def root(self) -> "_Slot":
        s = self
        while s.parent is not s:
            s.parent = s.parent.parent
            s = s.parent
        return s


def _lock(slot: _Slot, reason: str) -> None:
    r = slot.root()
    r.locked = True
    if reason not in r.reasons:
        r.reasons.append(reason)


def _union(a: _Slot, b: _Slot) -> _Slot:
    a, b = a.root(), b.root()
    if a is b:
        return a
    if a.order > b.order:
        a, b = b, a
    b.parent = a
    a.members.extend(m for m in b.members if m not in a.members)
    a.locked = a.locked or b.locked
    a.reasons.extend(r for r in b.reasons if r not in a.reasons)
    if a.kind != b.kind:
        _lock(a, "channel and head axes meet")
    if a.width != b.width:
        _lock(a, f"width mismatch {a.width} vs {b.width}")
    if a.kind == "head" and b.attention and not a.attention:
        a.attention, a.head_dim, a.qkv = b.attention, b.head_dim, b.qkv
    return a


def _add_member(slot: _Slot, name: str, axis: str) -> None:
    r = slot.root()
    if (name, axis) not in r.members:
        r.members.append((name, axis))


# ---------------------------------------------------------------- op tables

_BINARY = {
    "add", "sub", "subtract", "mul", "multiply", "div", "divide", "true_divide", "where",
    "maximum", "minimum", "fmax", "fmin", "add_", "sub_", "mul_", "div_",
    "__add__", "__radd__", "__iadd__", "__sub__", "__rsub__", "__isub__",
    "__mul__", "__rmul__", "__imul__", "__truediv__", "__rtruediv__", "__itruediv__",
}
_REDUCE = {"mean", "sum", "amax", "amin", "max", "min", "std", "var", "logsumexp", "prod",
           "argmax", "argmin", "nansum", "nanmean", "norm"}
_RESHAPE = {"view", "reshape", "flatten", "unflatten", "squeeze", "unsqueeze", "view_as",
            "reshape_as", "expand", "expand_as", "broadcast_to"}
_PERMUTE = {"permute", "transpose", "swapaxes", "swapdims", "t", "movedim", "moveaxis", "transpose_"}


def _tensors(obj, out=None):
    if out is None:
        out = []
    if isinstance(obj, torch.Tensor):
        out.append(obj)
    elif isinstance(obj, (list, tuple)):
        for o in obj:
            _tensors(o, out)
    elif isinstance(obj, dict):
        for o in obj.values():
            _tensors(o, out)
    elif hasattr(obj, "to_tuple"):
        _tensors(obj.to_tuple(), out)
    return out


def _norm_dim(d: int, ndim: int) -> int:
    return d + ndim if d < 0 else d


def _func_name(func) -> str:
    name = getattr(func, "__name__", "")
    if name == "__get__":
        owner = getattr(func, "__self__", None)
        return "." + getattr(owner, "__name__", "")
    return name


# ---------------------------------------------------------------- tracer


class _Tracer(TorchFunctionMode):
    def __init__(self, model: nn.Module):
        super().__init__()
        self.model = model
        self.chan: dict[int, tuple[int, _Slot]] = {}
        self.alive: list[torch.Tensor] = []
        self.depth = 0
        self.slots: list[_Slot] = []
        self.module_out: dict[str, _Slot] = {}
        self.head_slots: dict[str, _Slot] = {}

    # slot helpers
    def new_slot(self, width, kind="channel") -> _Slot:
        s = _Slot(width, kind, len(self.slots))
        self.slots.append(s)
        return s

    def get(self, t) -> tuple[int, _Slot] | None:
        info = self.chan.get(id(t))
        if info is None:
            return None
        return info[0], info[1].root()

    def set(self, t: torch.Tensor, axis: int, slot: _Slot) -> None:
        self.chan[id(t)] = (axis, slot.root())
        self.alive.append(t)

    def lock_inputs(self, tensors, reason):
        for t in tensors:
            info = self.get(t)
            if info is not None:
                _lock(info[1], reason)

    # ------------------------------------------------------------ functions
    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        out = func(*args, **kwargs)
        if self.depth == 0:
            try:
                self.propagate(func, args, kwargs, out)
            except Exception as exc:  # never let bookkeeping break the forward
                ins = _tensors(args) + _tensors(kwargs)
                self.lock_inputs(ins, f"trace error in {_func_name(func)}: {exc}")
        return out

    def propagate(self, func, args, kwargs, out):
        ins = _tensors(args) + _tensors(kwargs)
        tracked = [(t, self.get(t)) for t in ins if self.get(t) is not None]
        if not tracked:
            return
        outs = _tensors(out)
        if not outs:
            return
        name = _func_name(func)
        if name in (".shape", ".data", ".device", ".dtype"):
            return
        if name in _BINARY and len(ins) >= 2:
            return self._binary(ins, outs, name)
        if name in ("cat", "concat", "concatenate", "stack", "hstack", "vstack"):
            return self._cat(args, kwargs, outs[0], name)
        if len(ins) > 1 and not (name in _REDUCE and len(ins) == 1):
            self.lock_inputs(ins, f"unsupported multi-input op {name}")
            return
        t, (axis, slot) = tracked[0]
        if name in _PERMUTE or name in (".T", ".mT"):
            return self._permute(name, t, axis, slot, args, kwargs, outs[0])
        if name in _RESHAPE:
            return self._reshape(t, axis, slot, outs[0], name)
        if name == "__getitem__":
            return self._getitem(t, axis, slot, args[1], outs[0])
        if name in _REDUCE:
            return self._reduce(t, axis, slot, args, kwargs, outs, name)
        for o in outs:
            if o.ndim == t.ndim and o.shape[axis] == t.shape[axis]:
                self.set(o, axis, slot)
            else:
                _lock(slot, f"{name} changes the channel axis")

    def _binary(self, ins, outs, name):
        out = outs[0]
        target = None
        roots = []
        for t in ins:
            info = self.get(t)
            shift = out.ndim - t.ndim
            if info is None:
                continue
            oa = info[0] + shift
            if target is None:
                target = oa
            elif oa != target:
                self.lock_inputs(ins, f"{name} mixes channel axes")
                return
            roots.append(info[1])
        for t in ins:
            if self.get(t) is None:
                ta = target - (out.ndim - t.ndim)
                if 0 <= ta < t.ndim and t.shape[ta] > 1:
                    self.lock_inputs(ins, f"{name} with an untracked full-width operand")
                    return
        slot = roots[0]
        for r in roots[1:]:
            slot = _union(slot, r)
        for o in outs:
            if o.ndim == out.ndim:
                self.set(o, target, slot)

    def _cat(self, args, kwargs, out, name):
        seq = args[0] if args else kwargs.get("tensors")
        seq = list(seq)
        dim = kwargs.get("dim", args[1] if len(args) > 1 else 0)
        stack = name == "stack"
        dim = _norm_dim(dim, out.ndim if stack else seq[0].ndim)
        axis, roots = None, []
        for t in seq:
            info = self.get(t)
            if info is None:
                continue
            if axis is None:
                axis = info[0]
            if info[0] != axis or info[0] == dim and not stack:
                self.lock_inputs(seq, f"{name} along the channel axis")
                return
            roots.append(info[1])
        if any(self.get(t) is None and t.shape[axis] > 1 for t in seq):
            self.lock_inputs(seq, f"{name} with untracked full-width tensors")
            return
        slot = roots[0]
        for r in roots[1:]:
            slot = _union(slot, r)
        self.set(out, axis + 1 if stack and axis >= dim else axis, slot)

    def _permute(self, name, t, axis, slot, args, kwargs, out):
        n = t.ndim
        if name in ("permute",):
            dims = args[1:] if len(args) > 2 or not isinstance(args[1], (list, tuple)) else args[1]
            dims = [_norm_dim(d, n) for d in (dims or kwargs.get("dims"))]
            self.set(out, dims.index(axis), slot)
            return
        if name in ("transpose", "swapaxes", "swapdims", "transpose_"):
            d0, d1 = (_norm_dim(d, n) for d in args[1:3])
            self.set(out, d1 if axis == d0 else d0 if axis == d1 else axis, slot)
            return
        if name in ("t", ".T"):
            self.set(out, n - 1 - axis, slot)
            return
        if name == ".mT":
            self.set(out, {n - 1: n - 2, n - 2: n - 1}.get(axis, axis), slot)
            return
        src = args[1] if len(args) > 1 else kwargs["source"]
        dst = args[2] if len(args) > 2 else kwargs["destination"]
        src = [src] if isinstance(src, int) else list(src)
        dst = [dst] if isinstance(dst, int) else list(dst)
        src = [_norm_dim(d, n) for d in src]
        dst = [_norm_dim(d, n) for d in dst]
        order = [d for d in range(n) if d not in src]
        for d, s in sorted(zip(dst, src)):
            order.insert(d, s)
        self.set(out, order.index(axis), slot)

    def _reshape(self, t, axis, slot, out, name):
        pre = math.prod(t.shape[:axis])
        c = t.shape[axis]
        for b in range(out.ndim):
            if out.shape[b] == c and math.prod(out.shape[:b]) == pre:
                self.set(out, b, slot)
                return
        _lock(slot, f"{name} splits or merges the channel axis")

    def _getitem(self, t, axis, slot, index, out):
        items = list(index) if isinstance(index, tuple) else [index]
        if any(not (i is None or i is Ellipsis or isinstance(i, (int, slice))) or isinstance(i, bool)
               for i in items):
            _lock(slot, "advanced indexing")
            return
        if Ellipsis in items:
            k = sum(1 for i in items if i is not None and i is not Ellipsis)
            pos = items.index(Ellipsis)
            items = items[:pos] + [slice(None)] * (t.ndim - k) + items[pos + 1:]
        i = j = 0
        for it in items:
            if it is None:
                j += 1
                continue
            if i == axis:
                if isinstance(it, int):
                    _lock(slot, "indexing into the channel axis")
                    return
                if it.indices(t.shape[axis]) != (0, t.shape[axis], 1):
                    _lock(slot, "slicing the channel axis")
                    return
                self.set(out, j, slot)
                return
            if isinstance(it, slice):
                j += 1
            i += 1
        self.set(out, j + (axis - i), slot)

    def _reduce(self, t, axis, slot, args, kwargs, outs, name):
        dim = kwargs.get("dim", args[1] if len(args) > 1 and not isinstance(args[1], torch.Tensor) else None)
        if dim is None:
            _lock(slot, f"{name} over all dims")
            return
        keepdim = kwargs.get("keepdim", args[2] if len(args) > 2 and isinstance(args[2], bool) else False)
        dims = [dim] if isinstance(dim, int) else list(dim)
        dims = [_norm_dim(d, t.ndim) for d in dims]
        if axis in dims:
            _lock(slot, f"{name} reduces the channel axis")
            return
        new_axis = axis if keepdim else axis - sum(1 for d in dims if d < axis)
        for o in outs:
            if o.ndim > new_axis and o.shape[new_axis] == t.shape[axis]:
                self.set(o, new_axis, slot)

    # ------------------------------------------------------------ modules
    def pre_hook(self, mod, args, kwargs):
        self.depth += 1

    def post_hook(self, name):
        def hook(mod, args, kwargs, output):
            self.depth -= 1
            if self.depth == 0:
                x = next(iter(_tensors(args) + _tensors(kwargs)), None)
                outs = _tensors(output)
                try:
                    self.module_node(name, mod, x, outs)
                except Exception as exc:
                    if x is not None:
                        self.lock_inputs([x], f"trace error in {name}: {exc}")
        return hook

    def _out_slot(self, name, width):
        slot = self.module_out.get(name)
        if slot is None:
            slot = self.new_slot(width)
            _add_member(slot, name, OUT)
            self.module_out[name] = slot
        return slot.root()

    def module_node(self, name, mod, x, outs):
        info = self.get(x) if x is not None else None
        y = outs[0] if outs else None
        if isinstance(mod, nn.Conv2d):
            c_axis = x.ndim - 3
            depthwise = mod.groups > 1 and mod.groups == mod.in_channels == mod.out_channels
            if depthwise and info is not None and info[0] == c_axis:
                _add_member(info[1], name, OUT)
                self.set(y, y.ndim - 3, info[1])
                return
            if mod.groups == 1 and info is not None:
                if info[0] == c_axis:
                    _add_member(info[1], name, IN)
                else:
                    _lock(info[1], f"{name} reads channels on another axis")
            elif info is not None:
                _lock(info[1], f"{name} is a grouped convolution")
            slot = self._out_slot(name, mod.out_channels)
            if mod.groups != 1:
                _lock(slot, f"{name} is a grouped convolution")
            self.set(y, y.ndim - 3, slot)
        elif isinstance(mod, DynamicQuantLinear):
            if info is not None:
                _lock(info[1], f"{name} is quantized")
            _lock(self._out_slot(name, mod.out_features), f"{name} is quantized")
        elif isinstance(mod, nn.Linear):
            if info is not None:
                if info[0] == x.ndim - 1:
                    _add_member(info[1], name, HEADS if info[1].kind == "head" else IN)
                else:
                    _lock(info[1], f"{name} reads channels on another axis")
            self.set(y, y.ndim - 1, self._out_slot(name, mod.out_features))
        elif isinstance(mod, nn.modules.batchnorm._BatchNorm):
            if info is not None and info[0] == 1:
                _add_member(info[1], name, OUT)
                self.set(y, 1, info[1])
            elif info is not None:
                _lock(info[1], f"{name} normalizes another axis")
        elif isinstance(mod, nn.LayerNorm):
            if info is None:
                return
            nd = len(mod.normalized_shape)
            if nd == 1 and info[0] == x.ndim - 1:
                _add_member(info[1], name, OUT)
                self.set(y, info[0], info[1])
            elif info[0] < x.ndim - nd:
                self.set(y, info[0], info[1])
            else:
                _lock(info[1], f"{name} normalizes over several axes")
        elif isinstance(mod, nn.Embedding):
            self.set(y, y.ndim - 1, self._out_slot(name, mod.embedding_dim))
        elif is_attention_core(mod):
            self._attention(name, mod, x, info, outs)
        else:
            if info is not None:
                _lock(info[1], f"{name} ({type(mod).__name__}) is opaque")

    def _attention(self, name, mod, x, info, outs):
        q, k, v = qkv_children(mod)
        names = [f"{name}.{n}" for n in (q, k, v)]
        proj = inner_out_proj(mod)
        if info is not None:
            if info[0] == x.ndim - 1:
                for n in names:
                    _add_member(info[1], n, IN)
            else:
                _lock(info[1], f"{name} reads channels on another axis")
        heads = self.head_slots.get(name)
        if heads is None:
            qmod = getattr(mod, q)
            heads = self.new_slot(head_count(mod), "head")
            heads.head_dim = qmod.out_features // head_count(mod)
            heads.attention = name
            heads.qkv = names
            for n in names:
                _add_member(heads, n, HEADS)
            if proj is not None:
                _add_member(heads, f"{name}.{proj}", HEADS)
            if any(isinstance(getattr(mod, n), DynamicQuantLinear) for n in (q, k, v)):
                _lock(heads, f"{name} projections are quantized")
            known = {q, k, v, proj}
            if any(n.split(".")[0] not in known for n, _ in mod.named_parameters()):
                _lock(heads, f"{name} owns parameters outside its projections")
            self.head_slots[name] = heads
        y = outs[0] if outs else None
        if y is None:
            return
        if proj is not None:
            self.set(y, y.ndim - 1, self._out_slot(f"{name}.{proj}", getattr(mod, proj).out_features))
        else:
            self.set(y, y.ndim - 1, heads)


def _opaque_modules(model: nn.Module):
    for name, mod in model.named_modules():
        if isinstance(mod, (nn.Conv2d, nn.Linear, nn.modules.batchnorm._BatchNorm, nn.LayerNorm,
                            nn.Embedding, DynamicQuantLinear)) or is_attention_core(mod):
            yield name, mod
        elif name and any(True for _ in mod.parameters(recurse=False)) and not list(mod.children()):
            yield name, mod


def trace_groups(model: nn.Module, x: torch.Tensor) -> list[PruneGroup]:
    tracer = _Tracer(model)
    hooks = []
    for name, mod in _opaque_modules(model):
        hooks.append(mod.register_forward_pre_hook(tracer.pre_hook, with_kwargs=True))
        hooks.append(mod.register_forward_hook(tracer.post_hook(name), with_kwargs=True))
    try:
        with torch.no_grad(), tracer:
            output = model(x)
    except Exception as exc:
        raise TraceFailure(f"forward on probe input failed: {exc}") from exc
    finally:
        for h in hooks:
            h.remove()
    for t in _tensors(output):
        info = tracer.get(t)
        if info is not None:
            _lock(info[1], "feeds the model output")

    roots: dict[int, _Slot] = {}
    for s in tracer.slots:
        r = s.root()
        roots.setdefault(id(r), r)
    groups = []
    for r in sorted(roots.values(), key=lambda s: s.order):
        if not r.members:
            continue
        groups.append(PruneGroup(
            group_id=len(groups), members=list(r.members), width=r.width, kind=r.kind,
            prunable=not r.locked, reason="; ".join(r.reasons) or None,
            head_dim=r.head_dim, attention=r.attention, qkv=list(r.qkv)))
    return groups


def build_dependency_graph(handle: ModelHandle | nn.Module, input_spec: InputSpec,
                           seed: int = 0) -> DependencyGraph:
    """Trace ``handle`` on a probe input and group coupled prunable axes."""
    model = handle.module_tree if isinstance(handle, ModelHandle) else handle
    device = next((p.device for p in model.parameters()), torch.device("cpu"))
    groups = trace_groups(model, probe_input(input_spec, seed=seed, device=device))
    layer_to_groups: dict[str, list[int]] = {}
    for g in groups:
        for name, _ in g.members:
            ids = layer_to_groups.setdefault(name, [])
            if g.group_id not in ids:
                ids.append(g.group_id)
    return DependencyGraph(groups, layer_to_groups, input_spec)
