import itertools
import json
import random

import hypothesis.strategies as st
import pytest
from hypothesis import given, settings

from profiling_agent.analysis import History
from profiling_agent.errors import AllIterationsFailed
from profiling_agent.evaluation import EvaluationReport
from profiling_agent.loop import Agents, better, run_iterations
from profiling_agent.plan import CompressionPlan, PruningDirective


def brute_better(a, b):
    # lexicographic on (accuracy desc, params asc, latency asc), strict
    return (-a[0], a[1], a[2]) < (-b[0], b[1], b[2])


def ev(acc, params, lat, ref="x"):
    return EvaluationReport(ref, "d", 100, acc, lat, [lat], params * 4, params, 42, "t")


def plan(i):
    return CompressionPlan([PruningDirective(f"layer{i}", "structured", 0.1)], source="llm", iteration=i)


def mocked(outcomes, fail=()):
    """Agents whose i-th plan evaluates to outcomes[i-1]; iterations in ``fail`` raise."""
    seen = []

    def analyze(profile, history, llm, i):
        seen.append((i, history))
        if i in fail:
            raise RuntimeError("bad plan")
        return plan(i)

    def prune(p):
        return p.iteration, None

    def evaluate(i):
        return ev(*outcomes[i - 1])

    return Agents(analyze, prune, evaluate), seen


def test_better_examples():
    assert better((0.80, 10e6, 0.10), (0.80, 12e6, 0.05))
    assert not better((0.80, 10e6, 0.10), (0.80, 10e6, 0.10))
    assert better((0.81, 99e6, 9.0), (0.80, 1, 0.0))
    assert better((0.8, 10, 0.1), (0.8, 10, 0.2))


def test_better_vs_brute_force():
    rng = random.Random(0)
    for _ in range(10_000):
        a = (rng.choice([0.7, 0.75, 0.8]), rng.choice([1, 2, 3]), rng.choice([0.1, 0.2, 0.3]))
        b = (rng.choice([0.7, 0.75, 0.8]), rng.choice([1, 2, 3]), rng.choice([0.1, 0.2, 0.3]))
        assert better(a, b) == brute_better(a, b)


@given(st.tuples(st.floats(0, 1), st.integers(0, 10**9), st.floats(0, 10)),
       st.tuples(st.floats(0, 1), st.integers(0, 10**9), st.floats(0, 10)))
def test_better_is_strict_order(a, b):
    assert not (better(a, b) and better(b, a))
    assert not better(a, a)


def test_best_found_at_iteration_2():
    agents, _ = mocked([(0.70, 10, 0.1), (0.75, 10, 0.1), (0.72, 10, 0.1)])
    best = run_iterations(None, plan(0), 3, agents, None, baseline_eval=ev(0.5, 10, 0.1))
    assert best.found_at_iteration == 2 and best.acc_best == 0.75
    assert best.eval_best.accuracy == best.acc_best and best.params_best == best.eval_best.param_count


def test_fewer_params_at_equal_accuracy():
    agents, _ = mocked([(0.80, 80_900_000, 0.1), (0.80, 78_060_000, 0.1)])
    best = run_iterations(None, plan(0), 2, agents, None, baseline_eval=ev(0.5, 86_600_000, 0.1))
    assert best.params_best == 78_060_000 and best.found_at_iteration == 2


def test_baseline_can_stay_best():
    agents, _ = mocked([(0.70, 10, 0.1), (0.75, 10, 0.1)])
    best = run_iterations(None, plan(0), 2, agents, None, baseline_eval=ev(0.9, 10, 0.1))
    assert best.found_at_iteration == 0 and best.plan_best == plan(0)


def test_exhaustive_oracle():
    accs, params, lats = (0.7, 0.8), (5, 6), (0.1, 0.2)
    grid = list(itertools.product(accs, params, lats))
    rng = random.Random(1)
    for _ in range(300):
        outcomes = [rng.choice(grid) for _ in range(5)]
        baseline = rng.choice(grid)
        agents, _ = mocked(outcomes)
        best = run_iterations(None, plan(0), 5, agents, None, baseline_eval=ev(*baseline))
        candidates = [(0, baseline)] + list(enumerate(outcomes, 1))
        want = candidates[0]
        for c in candidates[1:]:
            if brute_better(c[1], want[1]):
                want = c
        assert best.found_at_iteration == want[0]
        assert (best.acc_best, best.params_best, best.lat_best) == want[1]


def test_history_feedback():
    agents, seen = mocked([(0.7, 10, 0.1), (0.6, 9, 0.1)])
    ref = ev(0.9, 20, 0.2)
    run_iterations(None, plan(0), 2, agents, None, baseline_eval=ev(0.8, 12, 0.1), reference_eval=ref)
    (i1, h1), (i2, h2) = seen
    assert isinstance(h1, History) and h1.plan == plan(0)
    assert h1.evaluation_dict()["acc_after"] == 0.8
    assert h2.plan == plan(1) and h2.evaluation_dict()["delta_acc_points"] == pytest.approx(-20.0)


def test_failed_iteration_skipped():
    agents, _ = mocked([(0.7, 10, 0.1), (0.99, 1, 0.1), (0.75, 10, 0.1)], fail={2})
    best = run_iterations(None, plan(0), 3, agents, None, baseline_eval=ev(0.5, 10, 0.1))
    assert best.found_at_iteration == 3
    assert [e["status"] for e in best.log] == ["ok", "failed", "ok"]


def test_all_failed():
    agents, _ = mocked([(0.7, 10, 0.1)] * 2, fail={1, 2})
    with pytest.raises(AllIterationsFailed) as info:
        run_iterations(None, plan(0), 2, agents, None, baseline_eval=ev(0.5, 10, 0.1))
    assert info.value.best.found_at_iteration == 0


def test_artifacts_written(tmp_path):
    agents, _ = mocked([(0.7, 10, 0.1), (0.8, 10, 0.1)])
    saved = []
    agents.save = lambda h, d, meta: (d.mkdir(parents=True, exist_ok=True), (d / "model.pt").write_text("m"),
                                      saved.append(d))
    best = run_iterations(None, plan(0), 2, agents, None, baseline_eval=ev(0.5, 10, 0.1), run_dir=tmp_path)
    for i in (1, 2):
        assert (tmp_path / f"iter_{i}" / f"analysis_{i}.json").is_file()
        assert (tmp_path / f"iter_{i}" / f"eval_{i}.json").is_file()
    b = json.loads((tmp_path / "best" / "best.json").read_text())
    assert b["found_at_iteration"] == 2 and (tmp_path / "best" / "model" / "model.pt").is_file()
    assert best.model_path.endswith("iter_2/model")


def test_t_must_be_positive():
    agents, _ = mocked([])
    with pytest.raises(ValueError):
        run_iterations(None, plan(0), 0, agents, None, baseline_eval=ev(0.5, 10, 0.1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.5, 0.6]), st.integers(1, 3), st.sampled_from([0.1, 0.2])),
                min_size=1, max_size=5))
def test_history_length_and_monotone_best(outcomes):
    states = []
    agents, _ = mocked(outcomes)
    run_iterations(None, plan(0), len(outcomes), agents, None, baseline_eval=ev(0.4, 9, 0.3),
                   on_iteration=states.append)
    for s in states:
        assert len(s.history) == s.i
    keys = [(s.best.acc_best, s.best.params_best, s.best.lat_best) for s in states]
    for a, b in zip(keys, keys[1:]):
        assert a == b or brute_better(b, a)
