"""Compression plan types and their JSON form.

The JSON layout uses ``pruning_recommendations`` / ``quantization_recommendations``
lists, the format the analysis LLM is asked to emit, plus a ``_meta`` object
added by this package.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

PRUNING_TYPES = ("structured", "head")
QUANT_TYPES = ("dynamic",)
QUANT_DTYPES = ("qint8", "float16")
PLAN_SOURCES = ("llm", "fallback_rule", "user_cli")
RATIO_MIN, RATIO_MAX = 0.01, 0.95


@dataclass
class PruningDirective:
    layer_pattern: str
    pruning_type: str = "structured"
    pruning_ratio: float = 0.1
    justification: str = ""

    def __post_init__(self):
        if self.pruning_type not in PRUNING_TYPES:
            raise ValueError(f"unknown pruning_type {self.pruning_type!r}")
        if not 0 < self.pruning_ratio < 1:
            raise ValueError(f"pruning_ratio must be in (0, 1), got {self.pruning_ratio}")
        re.compile(self.layer_pattern)

    def to_dict(self) -> dict:
        return {"layer": self.layer_pattern, "pruning_type": self.pruning_type,
                "pruning_ratio": self.pruning_ratio, "justification": self.justification}


@dataclass
class QuantizationDirective:
    layer_selector: str = "all"
    quantization_type: str = "dynamic"
    dtype: str = "qint8"
    justification: str = ""

    def __post_init__(self):
        if self.quantization_type not in QUANT_TYPES:
            raise ValueError(f"unsupported quantization_type {self.quantization_type!r}")
        if self.dtype not in QUANT_DTYPES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if self.layer_selector != "all":
            re.compile(self.layer_selector)

    def matches(self, name: str) -> bool:
        return self.layer_selector == "all" or re.fullmatch(self.layer_selector, name) is not None

    def to_dict(self) -> dict:
        return {"layer": self.layer_selector, "quantization_type": self.quantization_type,
                "dtype": self.dtype, "justification": self.justification}


@dataclass
class CompressionPlan:
    pruning: list[PruningDirective] = field(default_factory=list)
    quantization: list[QuantizationDirective] = field(default_factory=list)
    source: str = "user_cli"
    iteration: int = 0
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.source not in PLAN_SOURCES:
            raise ValueError(f"unknown plan source {self.source!r}")
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")

    @property
    def empty(self) -> bool:
        return not self.pruning and not self.quantization

    def pruning_only(self) -> "CompressionPlan":
        return CompressionPlan(list(self.pruning), [], self.source, self.iteration, list(self.warnings))

    def quantization_only(self) -> "CompressionPlan":
        return CompressionPlan([], list(self.quantization), self.source, self.iteration, list(self.warnings))

    def to_dict(self) -> dict:
        return {
            "pruning_recommendations": [d.to_dict() for d in self.pruning],
            "quantization_recommendations": [d.to_dict() for d in self.quantization],
            "_meta": {"source": self.source, "iteration": self.iteration,
                      "warnings": list(self.warnings)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionPlan":
        """Strict loader for plans this package wrote (or users hand-edited)."""
        meta = d.get("_meta", {})
        pruning = [PruningDirective(p["layer"], p.get("pruning_type", "structured"),
                                    float(p["pruning_ratio"]), p.get("justification", ""))
                   for p in d.get("pruning_recommendations", [])]
        quant = [QuantizationDirective(q.get("layer", "all"), q.get("quantization_type", "dynamic"),
                                       q.get("dtype", "qint8"), q.get("justification", ""))
                 for q in d.get("quantization_recommendations", [])]
        return cls(pruning, quant, meta.get("source", "user_cli"), int(meta.get("iteration", 0)),
                   list(meta.get("warnings", [])))
