"""Channel importance scores and selection of the channels to remove."""
from __future__ import annotations

import numpy as np
import torch

METHODS = ("l1", "l2", "random")


def _rows(weight: torch.Tensor) -> torch.Tensor:
    return weight.detach().reshape(weight.shape[0], -1).float()


def l1_importance(weight: torch.Tensor) -> torch.Tensor:
    """Sum of absolute values of each output row (conv filters are flattened)."""
    return _rows(weight).abs().sum(dim=1)


def l2_importance(weight: torch.Tensor) -> torch.Tensor:
    return _rows(weight).pow(2).sum(dim=1).sqrt()


def importance(weight: torch.Tensor, method: str) -> torch.Tensor:
    if method == "l1":
        return l1_importance(weight)
    if method == "l2":
        return l2_importance(weight)
    raise ValueError(f"no norm importance for method {method!r}")


def lowest(scores: torch.Tensor, n: int) -> list[int]:
    """Indices of the ``n`` smallest scores; ties go to the lower index."""
    order = torch.sort(scores, stable=True).indices
    return sorted(order[:n].tolist())


def random_selection(width: int, n: int, seed: int, group_id: int = 0) -> list[int]:
    """``n`` distinct channels drawn from a generator keyed by (seed, group_id)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, group_id]))
    return sorted(int(i) for i in rng.choice(width, size=n, replace=False))


def select_channels(weight: torch.Tensor, n: int, method: str, seed: int = 0,
                    group_id: int = 0) -> list[int]:
    if method == "random":
        return random_selection(weight.shape[0], n, seed, group_id)
    return lowest(importance(weight, method), n)
