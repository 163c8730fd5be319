"""Closed-loop pruning: ask for a plan, prune the original, evaluate, keep the best."""
from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .analysis import History
from .errors import AllIterationsFailed, IterationFailure
from .evaluation import EvaluationReport, compare
from .plan import CompressionPlan
from .store import write_json_atomic

logger = logging.getLogger(__name__)

DEFAULT_ITERATIONS = 5


def better(candidate: tuple, incumbent: tuple) -> bool:
    """Higher accuracy wins; then fewer parameters; then lower latency. Strict."""
    acc, params, lat = candidate
    acc0, params0, lat0 = incumbent
    if acc != acc0:
        return acc > acc0
    if params != params0:
        return params < params0
    return lat < lat0


def _key(ev: EvaluationReport) -> tuple:
    # accuracy is correct/n over one fixed subset, so equal counts give identical floats
    return (ev.accuracy, ev.param_count, ev.mean_latency_s)


@dataclass
class BestRecord:
    model_path: str | None
    acc_best: float
    params_best: int
    lat_best: float
    plan_best: CompressionPlan
    eval_best: EvaluationReport
    found_at_iteration: int
    log: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"model_path": self.model_path, "acc_best": self.acc_best, "params_best": self.params_best,
                "lat_best": self.lat_best, "plan_best": self.plan_best.to_dict(),
                "eval_best": self.eval_best.to_dict(), "found_at_iteration": self.found_at_iteration,
                "log": self.log}


@dataclass
class IterationState:
    i: int
    T: int
    history: list[tuple[CompressionPlan, EvaluationReport]]
    best: BestRecord


@dataclass
class Agents:
    """Callables the loop drives.

    analyze(profile, history, llm, iteration) -> CompressionPlan
    prune(plan) -> (handle, summary), always starting from the original model
    evaluate(handle) -> EvaluationReport
    save(handle, directory, meta) -> None, optional checkpoint writer
    """

    analyze: Callable[..., CompressionPlan]
    prune: Callable[[CompressionPlan], tuple[Any, Any]]
    evaluate: Callable[[Any], EvaluationReport]
    save: Callable[[Any, Path, dict], None] | None = None


def run_iterations(profile, baseline_plan: CompressionPlan, T: int, agents: Agents, llm, *,
                   baseline_eval: EvaluationReport, reference_eval: EvaluationReport | None = None,
                   run_dir: str | Path | None = None, baseline_model_path: str | None = None,
                   on_iteration: Callable[[IterationState], None] | None = None) -> BestRecord:
    """Run ``T`` rounds; every round prunes the original model afresh.

    ``baseline_eval`` is the evaluation of the initially pruned model and seeds
    the incumbent.  ``reference_eval`` (the unpruned model) turns evaluations
    into accuracy/size/latency deltas for the prompt.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    run_dir = Path(run_dir) if run_dir is not None else None
    acc, params, lat = baseline_eval.accuracy, baseline_eval.param_count, baseline_eval.mean_latency_s
    best = BestRecord(baseline_model_path, acc, params, lat, baseline_plan, baseline_eval, 0)
    best_handle = None
    history: list[tuple[CompressionPlan, EvaluationReport]] = []
    prev_plan, prev_eval = baseline_plan, baseline_eval
    completed = 0

    def feedback(ev: EvaluationReport):
        return compare(reference_eval, ev) if reference_eval is not None else ev.to_dict()

    for i in range(1, T + 1):
        # round 1 sees the baseline analysis/evaluation, later rounds the previous round
        prior = History(prev_plan, feedback(prev_eval))
        iter_dir = run_dir / f"iter_{i}" if run_dir is not None else None
        try:
            plan = agents.analyze(profile, prior, llm, i)
            if iter_dir is not None:
                write_json_atomic(iter_dir / f"analysis_{i}.json", plan.to_dict())
            handle, summary = agents.prune(plan)
            ev = agents.evaluate(handle)
        except Exception as exc:
            err = IterationFailure(f"iteration {i} failed: {type(exc).__name__}: {exc}")
            logger.warning("%s", err)
            best.log.append({"iteration": i, "status": "failed", "error": str(err)})
            if iter_dir is not None:
                write_json_atomic(iter_dir / "error.json", {"error": str(err)})
            continue
        completed += 1
        history.append((plan, ev))
        entry = {"iteration": i, "status": "ok", "accuracy": ev.accuracy, "params": ev.param_count,
                 "latency_s": ev.mean_latency_s}
        if iter_dir is not None:
            write_json_atomic(iter_dir / f"eval_{i}.json", ev.to_dict())
            if summary is not None and hasattr(summary, "to_dict"):
                write_json_atomic(iter_dir / "prune_summary.json", summary.to_dict())
            if agents.save is not None:
                agents.save(handle, iter_dir / "model", {"iteration": i, "plan": plan.to_dict()})
        if better(_key(ev), _key(best.eval_best)):
            model_path = str(iter_dir / "model") if iter_dir is not None and agents.save else None
            best = BestRecord(model_path, ev.accuracy, ev.param_count, ev.mean_latency_s, plan, ev, i, best.log)
            best_handle = handle
            entry["new_best"] = True
        best.log.append(entry)
        prev_plan, prev_eval = plan, ev
        if on_iteration is not None:
            on_iteration(IterationState(i, T, list(history), best))

    if run_dir is not None:
        _save_best(best, best_handle, run_dir / "best", agents)
    if completed == 0:
        err = AllIterationsFailed(f"all {T} iterations failed; baseline kept")
        err.best = best
        raise err
    return best


def _save_best(best: BestRecord, handle, directory: Path, agents: Agents) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_json_atomic(directory / "analysis.json", best.plan_best.to_dict())
    write_json_atomic(directory / "eval.json", best.eval_best.to_dict())
    write_json_atomic(directory / "best.json", best.to_dict())
    if best.model_path and Path(best.model_path).is_dir():
        shutil.copytree(best.model_path, directory / "model", dirs_exist_ok=True)
    elif handle is not None and agents.save is not None:
        agents.save(handle, directory / "model", {"iteration": best.found_at_iteration})
