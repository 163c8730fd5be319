"""Profiling-guided, LLM-directed pruning and quantization of vision classifiers."""
from .analysis import History, build_analysis_prompt, fallback_plan, synthesize_plan, validate_plan
from .baselines import BaselineSpec, apply_baseline_pruning, uniform_dynamic_quantize
from .evaluation import ComparisonReport, EvaluationReport, compare, evaluate
from .graph import DependencyGraph, PruneGroup, build_dependency_graph
from .llm import LLMConfig, LLMGateway, ScriptedBackend
from .loop import BestRecord, better, run_iterations
from .plan import CompressionPlan, PruningDirective, QuantizationDirective
from .pipeline import RunConfig, run_pipeline
from .profiler import ProfilingReport, profile_model
from .pruning import apply_pruning_plan, apply_structured_pruning
from .quantization import apply_quantization_plan, estimate_model_bytes
from .zoo import InputSpec, ModelHandle, acquire_model, enumerate_layers

__version__ = "0.1.0"
