"""Fixed-width comparison table rendered from a run's comparison reports."""
from __future__ import annotations

from pathlib import Path

from .errors import MissingArtifacts
from .evaluation import ComparisonReport
from .store import read_json

ORDER = ("prune", "quant", "iterate", "baseline")
HEADER = ("Method", "Top-1 (before -> after)", "Mem.Red.%", "Param.Red.%", "Speed-up")


def format_row(c: ComparisonReport) -> tuple[str, ...]:
    return (
        c.method or "-",
        f"{100 * c.acc_before:.1f} -> {100 * c.acc_after:.1f}",
        f"{c.mem_reduction_pct:.1f}",
        f"{c.param_reduction_pct:.1f}",
        f"{c.speedup:.2f}x",
    )


def render_table(comparisons: list[ComparisonReport], title: str | None = None) -> str:
    rows = [HEADER] + [format_row(c) for c in comparisons]
    widths = [max(len(r[i]) for r in rows) for i in range(len(HEADER))]

    def line(r):
        return "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))

    out = [title] if title else []
    out += [line(rows[0]), "  ".join("-" * w for w in widths)]
    out += [line(r) for r in rows[1:]]
    return "\n".join(out) + "\n"


def load_comparisons(run_dir: str | Path) -> list[ComparisonReport]:
    run_dir = Path(run_dir)
    found = [run_dir / f"compare_{name}.json" for name in ORDER]
    return [ComparisonReport.from_dict(read_json(p)) for p in found if p.is_file()]


def render_report(run_dir: str | Path) -> str:
    """Table for a run directory; uses only compare_*.json and config.json."""
    run_dir = Path(run_dir)
    comparisons = load_comparisons(run_dir)
    if not comparisons:
        raise MissingArtifacts(f"no comparison reports under {run_dir}")
    title = None
    cfg_path = run_dir / "config.json"
    if cfg_path.is_file():
        cfg = read_json(cfg_path)
        title = f"{cfg['model_id']} on {cfg['dataset_id']} (n={cfg['n_samples']}, seed={cfg['seed']})"
    return render_table(comparisons, title)
