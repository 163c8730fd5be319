"""Stage runner and run-directory layout.

runs/<run_id>/
    config.json  input_spec.json  profile.json  llm/<n>.json  analysis_0.json
    model_prune/  model_quant/  model_baseline/      (model.pt + meta.json)
    eval_original.json  eval_<variant>.json  compare_<variant>.json
    iter_<i>/  best/  report.txt  manifest.json

Every stage reads what its predecessors wrote, so a run can be resumed:
stages that finished earlier and whose artifacts still exist are skipped.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .analysis import fallback_plan, synthesize_plan, validate_plan
from .baselines import BaselineSpec, apply_baseline_pruning, uniform_dynamic_quantize
from .errors import ConfigError, EmptyPlan, ProfilingAgentError, StageFailure
from .evaluation import DEFAULT_SAMPLES, DEFAULT_SEED, EvaluationReport, compare, evaluate, load_dataset
from .llm import LLMConfig, LLMGateway
from .loop import DEFAULT_ITERATIONS, Agents, run_iterations
from .plan import CompressionPlan, QuantizationDirective
from .profiler import DEFAULT_REPEATS, DEFAULT_WARMUP, deserialize_report, profile_model, serialize_report
from .pruning import apply_pruning_plan
from .quantization import apply_quantization_plan, quantized_layers
from .report import render_report
from .store import load_checkpoint, read_json, save_checkpoint, write_json_atomic, write_text_atomic
from .zoo import (ModelHandle, acquire_model, load_input_spec, model_metadata, parameter_checksum,
                  resolve_input_spec)

logger = logging.getLogger(__name__)

STAGES = ("profile", "analyze", "prune", "quantize", "evaluate", "iterate", "baseline")
DEPENDS = {
    "profile": (),
    "analyze": ("profile",),
    "prune": ("profile", "analyze"),
    "quantize": ("profile", "analyze"),
    "evaluate": (),
    "iterate": ("profile", "analyze", "prune", "evaluate"),
    "baseline": (),
}


def closure(stage: str) -> list[str]:
    """``stage`` plus everything it needs, in pipeline order."""
    need = {stage}
    frontier = [stage]
    while frontier:
        for dep in DEPENDS[frontier.pop()]:
            if dep not in need:
                need.add(dep)
                frontier.append(dep)
    return [s for s in STAGES if s in need]


def derive_seed(root: int, stage: str) -> int:
    return int(hashlib.sha256(f"{root}:{stage}".encode()).hexdigest()[:8], 16)


# ---------------------------------------------------------------- config


@dataclass
class RunConfig:
    model_id: str
    dataset_id: str = "synthetic-2class"
    device: str = "cpu"
    stages: list[str] = field(default_factory=lambda: [s for s in STAGES if s != "baseline"])
    llm: LLMConfig = field(default_factory=LLMConfig)
    n_samples: int = DEFAULT_SAMPLES
    seed: int = DEFAULT_SEED
    warmup: int = DEFAULT_WARMUP
    repeats: int = DEFAULT_REPEATS
    iterations: int = DEFAULT_ITERATIONS
    importance: str = "l2"
    baseline: BaselineSpec | None = None
    compose: bool = False
    weights: str = "pretrained"
    clock: str = "monotonic"
    dynamic_profile: bool = True
    run_id: str | None = None
    runs_dir: str = "runs"

    def __post_init__(self):
        if not self.model_id:
            raise ConfigError("model_id is required")
        if not self.stages:
            raise ConfigError("no stages selected")
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stages {unknown}")
        self.stages = [s for s in STAGES if s in self.stages]
        if "iterate" in self.stages and "prune" not in self.stages:
            raise ConfigError("the iterate stage requires the prune stage")
        if "baseline" in self.stages and self.baseline is None:
            raise ConfigError("the baseline stage needs a baseline method")
        if self.n_samples < 1 or self.iterations < 1 or self.repeats < 1 or self.warmup < 0:
            raise ConfigError("samples, iterations and repeats must be >= 1; warmup >= 0")
        if self.importance not in ("l1", "l2", "random"):
            raise ConfigError(f"unknown importance method {self.importance!r}")
        if self.clock not in ("monotonic", "ticks"):
            raise ConfigError(f"unknown clock {self.clock!r}")
        if self.llm.backend not in ("live", "scripted"):
            raise ConfigError(f"unknown llm backend {self.llm.backend!r}")
        uses_llm = {"analyze", "iterate"} & set(self.stages)
        if uses_llm and self.llm.backend == "scripted" and not self.llm.fixtures:
            raise ConfigError("the scripted llm backend needs --fixtures")
        if self.run_id is None:
            stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
            self.run_id = f"{stamp}-{uuid.uuid4().hex[:6]}"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["baseline"] = (None if self.baseline is None else
                         {"method": self.baseline.method, "ratio": self.baseline.ratio, "seed": self.baseline.seed})
        return d

    @property
    def run_dir(self) -> Path:
        return Path(self.runs_dir) / self.run_id


CONFIG_KEYS = {
    "model", "dataset", "device", "stages", "llm_backend", "llm_model", "temperature", "max_retries",
    "timeout", "fixtures", "base_url", "samples", "seed", "warmup", "repeats", "iterations", "importance",
    "method", "ratio", "baseline_seed", "compose", "weights", "clock", "dynamic_profile", "run_id", "runs_dir",
}


def load_config_file(path: str | Path) -> dict:
    text = Path(path).read_text()
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of flat keys")
    unknown = sorted(set(data) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return data


def build_config(values: dict) -> RunConfig:
    """Build a RunConfig from flat keys (file values already merged with CLI overrides)."""
    v = {k: x for k, x in values.items() if x is not None}
    try:
        llm = LLMConfig(
            backend=v.get("llm_backend", "scripted"), model=v.get("llm_model", "gpt-4o"),
            temperature=float(v.get("temperature", 0.0)), max_retries=int(v.get("max_retries", 2)),
            timeout=float(v.get("timeout", 60.0)), fixtures=v.get("fixtures"),
            base_url=v.get("base_url", "https://api.openai.com/v1"))
        baseline = None
        if v.get("method"):
            method = v["method"]
            ratio = v.get("ratio")
            if method == "quant-int8" or method == "uniform_quant_int8":
                ratio = None
            elif ratio is None:
                ratio = 0.1
            baseline = BaselineSpec(method, None if ratio is None else float(ratio),
                                    int(v.get("baseline_seed", derive_seed(int(v.get("seed", DEFAULT_SEED)), "baseline"))))
        stages = v.get("stages")
        if isinstance(stages, str):
            stages = [s.strip() for s in stages.split(",") if s.strip()]
        if stages is None:
            stages = [s for s in STAGES if s != "baseline" or baseline is not None]
        return RunConfig(
            model_id=v.get("model"), dataset_id=v.get("dataset", "synthetic-2class"),
            device=v.get("device", "cpu"), stages=list(stages), llm=llm,
            n_samples=int(v.get("samples", DEFAULT_SAMPLES)), seed=int(v.get("seed", DEFAULT_SEED)),
            warmup=int(v.get("warmup", DEFAULT_WARMUP)), repeats=int(v.get("repeats", DEFAULT_REPEATS)),
            iterations=int(v.get("iterations", DEFAULT_ITERATIONS)), importance=v.get("importance", "l2"),
            baseline=baseline, compose=bool(v.get("compose", False)), weights=v.get("weights", "pretrained"),
            clock=v.get("clock", "monotonic"), dynamic_profile=bool(v.get("dynamic_profile", True)),
            run_id=v.get("run_id"), runs_dir=v.get("runs_dir", "runs"))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    run_id: str
    config: dict
    stages: dict[str, dict] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    scripted_cursor: int = 0
    report: str | None = None
    started_at: str = ""
    finished_at: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)


# fields that legitimately differ between two otherwise identical runs
VOLATILE_KEYS = {"wall_clock_s", "started_at", "finished_at", "timestamp"}


def strip_volatile(obj):
    if isinstance(obj, dict):
        return {k: strip_volatile(v) for k, v in obj.items() if k not in VOLATILE_KEYS}
    if isinstance(obj, list):
        return [strip_volatile(v) for v in obj]
    return obj


# ---------------------------------------------------------------- context


class RunContext:
    def __init__(self, config: RunConfig, manifest: RunManifest):
        self.config = config
        self.dir = config.run_dir
        self.manifest = manifest
        self._handle: ModelHandle | None = None
        self._gateway: LLMGateway | None = None
        self._dataset = None
        self.checksum: str | None = None

    def path(self, name: str) -> Path:
        return self.dir / name

    @property
    def handle(self) -> ModelHandle:
        if self._handle is None:
            self._handle = acquire_model(self.config.model_id, self.config.device, self.config.weights)
            self.checksum = parameter_checksum(self._handle.module_tree)
        return self._handle

    @property
    def gateway(self) -> LLMGateway:
        if self._gateway is None:
            self._gateway = LLMGateway.from_config(self.config.llm, log_dir=self.path("llm"))
            if hasattr(self._gateway.backend, "calls") and self.config.llm.backend == "scripted":
                self._gateway.backend.calls = self.manifest.scripted_cursor
        return self._gateway

    def sync_cursor(self) -> None:
        if self._gateway is not None and self.config.llm.backend == "scripted":
            self.manifest.scripted_cursor = self._gateway.backend.calls

    @property
    def dataset(self):
        if self._dataset is None:
            self._dataset = load_dataset(self.config.dataset_id)
        return self._dataset

    def input_spec(self):
        return load_input_spec(self.path("input_spec.json"))

    def profile(self):
        return deserialize_report(self.path("profile.json").read_bytes())

    def plan(self) -> CompressionPlan:
        return CompressionPlan.from_dict(read_json(self.path("analysis_0.json")))

    def variant(self, name: str) -> ModelHandle:
        model, _ = load_checkpoint(self.path(f"model_{name}"), "cpu")
        return self.handle.with_model(model)

    def evaluate(self, handle: ModelHandle, ref: str) -> EvaluationReport:
        return evaluate(handle, self.dataset, self.config.n_samples, self.config.seed,
                        clock=self.config.clock, model_ref=ref)

    def original_eval(self) -> EvaluationReport:
        p = self.path("eval_original.json")
        if p.is_file():
            return EvaluationReport.from_dict(read_json(p))
        ev = self.evaluate(self.handle, self.config.model_id)
        write_json_atomic(p, ev.to_dict())
        return ev


# ---------------------------------------------------------------- stages


def stage_profile(ctx: RunContext) -> list[str]:
    cfg = ctx.config
    # the shape query is optional; without scripted fixtures fall back to metadata
    llm = None if cfg.llm.backend == "scripted" and not cfg.llm.fixtures else ctx.gateway
    spec = resolve_input_spec(cfg.model_id, model_metadata(ctx.handle), llm,
                              out_path=ctx.path("input_spec.json"))
    report = profile_model(ctx.handle, spec, devices=(cfg.device,), warmup=cfg.warmup,
                           repeats=cfg.repeats, dynamic=cfg.dynamic_profile)
    write_text_atomic(ctx.path("profile.json"), serialize_report(report).decode())
    return ["input_spec.json", "profile.json"]


def _validated_plan(report, history, gateway, handle, iteration: int) -> CompressionPlan:
    plan = synthesize_plan(report, history, gateway, iteration)
    try:
        return validate_plan(plan, handle)
    except EmptyPlan as exc:
        logger.warning("plan from %s did not validate (%s); using fallback", plan.source, exc)
        return validate_plan(fallback_plan(report, iteration, f"validation: {exc}"), handle)


def stage_analyze(ctx: RunContext) -> list[str]:
    plan = _validated_plan(ctx.profile(), None, ctx.gateway, ctx.handle, 0)
    write_json_atomic(ctx.path("analysis_0.json"), plan.to_dict())
    return ["analysis_0.json"]


def _prune_plan(ctx: RunContext, plan: CompressionPlan) -> CompressionPlan:
    if plan.pruning:
        return plan.pruning_only()
    fb = fallback_plan(ctx.profile(), plan.iteration, "analysis gave no pruning directives")
    return validate_plan(fb, ctx.handle).pruning_only()


def stage_prune(ctx: RunContext) -> list[str]:
    cfg = ctx.config
    plan = _prune_plan(ctx, ctx.plan())
    pruned, summary = apply_pruning_plan(ctx.handle, plan, cfg.importance,
                                         derive_seed(cfg.seed, "prune"), ctx.input_spec())
    save_checkpoint(pruned.module_tree, ctx.path("model_prune"),
                    {"kind": "prune", "model_id": cfg.model_id, "method": cfg.importance,
                     "plan": plan.to_dict()})
    write_json_atomic(ctx.path("model_prune/prune_summary.json"), summary.to_dict())
    return ["model_prune/model.pt", "model_prune/meta.json", "model_prune/prune_summary.json"]


def stage_quantize(ctx: RunContext) -> list[str]:
    cfg = ctx.config
    plan = ctx.plan()
    if not plan.quantization:
        plan = CompressionPlan([], [QuantizationDirective("all", "dynamic", "qint8", "command-line default")],
                               "user_cli", plan.iteration, plan.warnings + ["no quantization directive; using all/qint8"])
    source = ctx.variant("prune") if cfg.compose and ctx.path("model_prune/model.pt").is_file() else ctx.handle
    quant = apply_quantization_plan(source, plan.quantization_only())
    save_checkpoint(quant.module_tree, ctx.path("model_quant"),
                    {"kind": "quant", "model_id": cfg.model_id, "composed_with_prune": source is not ctx.handle,
                     "plan": plan.quantization_only().to_dict(), "layers": quantized_layers(quant)})
    return ["model_quant/model.pt", "model_quant/meta.json"]


def _variant_label(ctx: RunContext, name: str) -> str:
    if name == "prune":
        return f"Agent prune ({ctx.config.importance})"
    if name == "quant":
        meta = read_json(ctx.path("model_quant/meta.json"))
        dtypes = sorted({v["dtype"] for v in meta.get("layers", {}).values()})
        prefix = "Agent prune+quant" if meta.get("composed_with_prune") else "Agent quant"
        return f"{prefix} ({'/'.join(dtypes)})"
    return name


def stage_evaluate(ctx: RunContext) -> list[str]:
    original = ctx.original_eval()
    produced = ["eval_original.json"]
    for name in ("prune", "quant"):
        if not ctx.path(f"model_{name}/model.pt").is_file():
            continue
        ev = ctx.evaluate(ctx.variant(name), f"model_{name}")
        write_json_atomic(ctx.path(f"eval_{name}.json"), ev.to_dict())
        cmp_ = compare(original, ev, _variant_label(ctx, name))
        write_json_atomic(ctx.path(f"compare_{name}.json"), cmp_.to_dict())
        produced += [f"eval_{name}.json", f"compare_{name}.json"]
    return produced


def stage_iterate(ctx: RunContext) -> list[str]:
    cfg = ctx.config
    if not ctx.path("eval_prune.json").is_file():
        raise StageFailure("iterate needs eval_prune.json (run prune and evaluate first)")
    report, spec = ctx.profile(), ctx.input_spec()
    handle = ctx.handle
    seed = derive_seed(cfg.seed, "iterate")

    def prune(plan):
        return apply_pruning_plan(handle, plan.pruning_only(), cfg.importance, seed, spec)

    def save(h, directory, meta):
        save_checkpoint(h.module_tree, directory, {"kind": "iterate", "model_id": cfg.model_id} | meta)

    agents = Agents(
        analyze=lambda P, hist, llm, i: _validated_plan(P, hist, llm, handle, i),
        prune=prune,
        evaluate=lambda h: ctx.evaluate(h, "iterate"),
        save=save,
    )
    baseline_plan = _prune_plan(ctx, ctx.plan())
    baseline_eval = EvaluationReport.from_dict(read_json(ctx.path("eval_prune.json")))
    original = ctx.original_eval()
    best = run_iterations(report, baseline_plan, cfg.iterations, agents, ctx.gateway,
                          baseline_eval=baseline_eval, reference_eval=original, run_dir=ctx.dir,
                          baseline_model_path=str(ctx.path("model_prune")))
    label = f"Iterative prune (best of {cfg.iterations}, iter {best.found_at_iteration})"
    write_json_atomic(ctx.path("compare_iterate.json"), compare(original, best.eval_best, label).to_dict())
    produced = ["best/analysis.json", "best/eval.json", "best/best.json", "compare_iterate.json"]
    for i in range(1, cfg.iterations + 1):
        d = ctx.path(f"iter_{i}")
        produced += sorted(str(p.relative_to(ctx.dir)) for p in d.rglob("*") if p.is_file())
    if (ctx.path("best/model/model.pt")).is_file():
        produced += ["best/model/model.pt", "best/model/meta.json"]
    return produced


def stage_baseline(ctx: RunContext) -> list[str]:
    cfg = ctx.config
    spec = cfg.baseline
    original = ctx.original_eval()
    if spec.is_pruning:
        input_spec = ctx.input_spec() if ctx.path("input_spec.json").is_file() else None
        model, summary = apply_baseline_pruning(ctx.handle, None, spec, input_spec=input_spec)
        label = f"Baseline {spec.method.upper()} {round(spec.ratio * 100)}%"
    else:
        model, summary = uniform_dynamic_quantize(ctx.handle), None
        label = "Baseline int8 (uniform)"
    save_checkpoint(model.module_tree, ctx.path("model_baseline"),
                    {"kind": "baseline", "model_id": cfg.model_id, "method": spec.method, "ratio": spec.ratio})
    produced = ["model_baseline/model.pt", "model_baseline/meta.json"]
    if summary is not None:
        write_json_atomic(ctx.path("model_baseline/prune_summary.json"), summary.to_dict())
        produced.append("model_baseline/prune_summary.json")
    ev = ctx.evaluate(model, "model_baseline")
    write_json_atomic(ctx.path("eval_baseline.json"), ev.to_dict())
    write_json_atomic(ctx.path("compare_baseline.json"), compare(original, ev, label).to_dict())
    return produced + ["eval_original.json", "eval_baseline.json", "compare_baseline.json"]


STAGE_FUNCS = {
    "profile": stage_profile, "analyze": stage_analyze, "prune": stage_prune, "quantize": stage_quantize,
    "evaluate": stage_evaluate, "iterate": stage_iterate, "baseline": stage_baseline,
}


# ---------------------------------------------------------------- driver


def _write_manifest(ctx: RunContext) -> None:
    ctx.sync_cursor()
    m = ctx.manifest
    m.artifacts = sorted({a for s in m.stages.values() for a in s.get("artifacts", [])})
    write_json_atomic(ctx.path("manifest.json"), m.to_dict())


def _cached(ctx: RunContext, stage: str, previous: dict | None) -> bool:
    if not previous or previous.get("status") not in ("ok", "skipped"):
        return False
    if previous.get("status") == "skipped" and previous.get("detail") != "cached":
        return False
    arts = previous.get("artifacts", [])
    return bool(arts) and all(ctx.path(a).is_file() for a in arts)


def run_pipeline(config: RunConfig) -> RunManifest:
    """Run the configured stages; reuses a previous run with the same run_id."""
    run_dir = config.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    previous: dict = {}
    cursor = 0
    manifest_path = run_dir / "manifest.json"
    if manifest_path.is_file():
        old = read_json(manifest_path)
        previous = old.get("stages", {})
        cursor = old.get("scripted_cursor", 0)
    manifest = RunManifest(config.run_id, config.to_dict(), scripted_cursor=cursor,
                           started_at=datetime.now(timezone.utc).isoformat())
    ctx = RunContext(config, manifest)
    write_json_atomic(run_dir / "config.json", config.to_dict())

    failed: set[str] = set()
    for stage in config.stages:
        blocked = [d for d in DEPENDS[stage] if d in failed]
        if blocked:
            manifest.stages[stage] = {"status": "skipped", "detail": f"dependency failed: {','.join(blocked)}",
                                      "artifacts": [], "wall_clock_s": 0.0}
            failed.add(stage)
            _write_manifest(ctx)
            continue
        if _cached(ctx, stage, previous.get(stage)):
            manifest.stages[stage] = {"status": "skipped", "detail": "cached",
                                      "artifacts": previous[stage]["artifacts"], "wall_clock_s": 0.0}
            _write_manifest(ctx)
            continue
        t0 = time.perf_counter()
        try:
            artifacts = STAGE_FUNCS[stage](ctx)
            status, detail = "ok", None
        except ProfilingAgentError as exc:
            logger.error("stage %s failed: %s", stage, exc)
            artifacts, status, detail = [], "failed", f"{type(exc).__name__}: {exc}"
            failed.add(stage)
        manifest.stages[stage] = {"status": status, "detail": detail, "artifacts": sorted(set(artifacts)),
                                  "wall_clock_s": round(time.perf_counter() - t0, 6)}
        _write_manifest(ctx)

    if ctx.checksum is not None and parameter_checksum(ctx.handle.module_tree) != ctx.checksum:
        raise StageFailure("original model parameters changed during the run")
    if any(run_dir.glob("compare_*.json")):
        write_text_atomic(run_dir / "report.txt", render_report(run_dir))
        manifest.report = "report.txt"
    manifest.finished_at = datetime.now(timezone.utc).isoformat()
    _write_manifest(ctx)
    return manifest


def load_manifest(run_dir: str | Path) -> RunManifest:
    return RunManifest.from_dict(read_json(Path(run_dir) / "manifest.json"))
