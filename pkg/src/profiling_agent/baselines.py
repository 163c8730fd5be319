"""Uniform-ratio pruning and uniform int8 quantization baselines."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import NoEligibleLayers
from .graph import DependencyGraph
from .importance import l1_importance, l2_importance, random_selection  # noqa: F401  (re-exported)
from .plan import CompressionPlan, QuantizationDirective
from .pruning import PruneSummary, prune_all_groups
from .quantization import apply_quantization_plan
from .zoo import InputSpec, ModelHandle

PRUNING_METHODS = ("l1", "l2", "random")
BASELINE_METHODS = PRUNING_METHODS + ("uniform_quant_int8",)
CLI_METHOD_NAMES = {"l1": "l1", "l2": "l2", "random": "random", "quant-int8": "uniform_quant_int8"}


@dataclass
class BaselineSpec:
    method: str
    ratio: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.method = CLI_METHOD_NAMES.get(self.method, self.method)
        if self.method not in BASELINE_METHODS:
            raise ValueError(f"unknown baseline method {self.method!r}")
        if self.method in PRUNING_METHODS:
            if self.ratio is None or not 0 < self.ratio < 1:
                raise ValueError(f"{self.method} needs a ratio in (0, 1), got {self.ratio}")
        elif self.ratio is not None:
            raise ValueError("quantization baseline takes no ratio")

    @property
    def is_pruning(self) -> bool:
        return self.method in PRUNING_METHODS

    @property
    def label(self) -> str:
        return f"{self.method}@{self.ratio}" if self.is_pruning else "int8-uniform"


def apply_baseline_pruning(handle: ModelHandle, graph: DependencyGraph | None, spec: BaselineSpec,
                           input_spec: InputSpec | None = None) -> tuple[ModelHandle, PruneSummary]:
    """Prune every unlocked group (channels and heads alike) at ``spec.ratio``."""
    if not spec.is_pruning:
        raise ValueError(f"{spec.method} is not a pruning baseline")
    return prune_all_groups(handle, spec.ratio, spec.method, spec.seed, input_spec=input_spec, graph=graph)


def uniform_dynamic_quantize(handle: ModelHandle) -> ModelHandle:
    """int8 dynamic quantization of every linear layer; same path as a plan selecting "all"."""
    plan = CompressionPlan([], [QuantizationDirective("all", "dynamic", "qint8", "uniform baseline")])
    try:
        return apply_quantization_plan(handle, plan)
    except NoEligibleLayers as exc:
        raise NoEligibleLayers(f"{handle.model_id}: no linear layers to quantize") from exc
