"""Hindsight improvability, frontier sweeps, and budgeted thresholds.

The frontier sweep forwards every sample through the model exactly once,
caches the per-stage confidence sequences, and replays them for each tau
on the grid; this is bit-identical to re-evaluating the policy per tau
and much cheaper. Everything here is pure post-processing over cached
arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bundle import ModelBundle
from .data import Dataset
from .exceptions import ConfigError, InfeasibleBudgetError


# ---------------------------------------------------------------------------
# hindsight improvability


@dataclass
class CorrectnessMatrix:
    """Per-sample correctness of each head's argmax, plus the final network."""

    head_correct: np.ndarray   # bool [N, M]
    final_correct: np.ndarray  # bool [N]

    def __post_init__(self):
        self.head_correct = np.asarray(self.head_correct, dtype=bool)
        self.final_correct = np.asarray(self.final_correct, dtype=bool)
        if self.head_correct.ndim != 2 or self.final_correct.shape != (self.head_correct.shape[0],):
            raise ConfigError("correctness matrix shape mismatch")


def correctness_matrix(dataset: Dataset, bundle: ModelBundle,
                       source: str = "head_probs") -> CorrectnessMatrix:
    outs = bundle.forward_outputs(dataset.inputs)
    cols = outs.stage_q if (source == "ensemble_probs" and outs.stage_q is not None) \
        else outs.head_probs
    head_ok = np.stack([c.argmax(axis=1) == dataset.labels for c in cols], axis=1)
    final_ok = outs.final_logits.argmax(axis=1) == dataset.labels
    return CorrectnessMatrix(head_correct=head_ok, final_correct=final_ok)


def hindsight_improvability(cm: CorrectnessMatrix) -> list:
    """HI_m = |wrong at m, right somewhere earlier| / |wrong at m|.

    Returns one entry per head: a float in [0, 1], or None when head m
    made no mistakes (the ratio is undefined, never coerced to 0).
    HI_1 is 0 whenever defined: there is nothing earlier to reuse.
    """
    n, m_total = cm.head_correct.shape
    if n < 1:
        raise ConfigError("empty correctness matrix")
    out: list = []
    union_earlier = np.zeros(n, dtype=bool)
    for m in range(m_total):
        wrong = ~cm.head_correct[:, m]
        n_wrong = int(wrong.sum())
        if n_wrong == 0:
            out.append(None)
        else:
            out.append(float((wrong & union_earlier).sum() / n_wrong))
        union_earlier |= cm.head_correct[:, m]
    return out


def write_hi_csv(path: str, hi_values: list):
    """hi.csv rows: head,hi,undefined_flag; undefined cells print NA."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("head,hi,undefined_flag\n")
        for m, v in enumerate(hi_values, start=1):
            if v is None:
                f.write(f"{m},NA,1\n")
            else:
                f.write(f"{m},{float(v)!r},0\n")


# ---------------------------------------------------------------------------
# frontier sweeps


@dataclass
class ConfidenceCache:
    """Everything a threshold or patience sweep needs, computed once."""

    conf: np.ndarray        # [N, M] per-stage top-class probability
    stage_preds: np.ndarray  # [N, M] per-stage argmax
    final_pred: np.ndarray  # [N]
    labels: np.ndarray      # [N]
    costs: np.ndarray       # [M + 1]
    full_network_flops: int


def build_confidence_cache(dataset: Dataset, bundle: ModelBundle,
                           source: str = "ensemble_probs") -> ConfidenceCache:
    outs = bundle.forward_outputs(dataset.inputs)
    if source == "ensemble_probs":
        if outs.stage_q is None:
            raise ConfigError("bundle has no fusion stages; use source=head_probs")
        cols = outs.stage_q
    elif source == "head_probs":
        cols = outs.head_probs
    else:
        raise ConfigError(f"unknown source {source!r}")
    conf = np.stack([c.max(axis=1) for c in cols], axis=1)
    preds = np.stack([c.argmax(axis=1) for c in cols], axis=1)
    return ConfidenceCache(
        conf=conf, stage_preds=preds,
        final_pred=outs.final_logits.argmax(axis=1),
        labels=dataset.labels,
        costs=bundle.cost_table(include_ensembles=(source == "ensemble_probs")),
        full_network_flops=bundle.full_network_flops())


@dataclass
class FrontierPoint:
    tau: float
    mean_flops: float
    flops_fraction: float
    accuracy: float


def exit_indices_for_tau(cache: ConfidenceCache, tau: float) -> np.ndarray:
    """0-based stage index per sample; M means the full network."""
    exited = cache.conf > tau
    any_exit = exited.any(axis=1)
    first = np.where(any_exit, exited.argmax(axis=1), cache.conf.shape[1])
    return first


def _point_from_exits(cache: ConfidenceCache, tau: float, first: np.ndarray) -> FrontierPoint:
    preds_all = np.concatenate([cache.stage_preds, cache.final_pred[:, None]], axis=1)
    preds = preds_all[np.arange(len(first)), first]
    accuracy = float((preds == cache.labels).mean())
    mean_flops = float(cache.costs[first].mean())
    return FrontierPoint(tau=float(tau), mean_flops=mean_flops,
                         flops_fraction=mean_flops / cache.full_network_flops,
                         accuracy=accuracy)


def sweep_frontier(cache: ConfidenceCache, grid: list) -> list:
    """One frontier point per tau, replayed from the cached confidences."""
    grid = list(grid)
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("tau grid must be strictly increasing")
    return [_point_from_exits(cache, tau, exit_indices_for_tau(cache, tau)) for tau in grid]


def patience_exit_indices(cache: ConfidenceCache, t: int) -> np.ndarray:
    """0-based exit stages for the patience rule; M means full network."""
    n, m_total = cache.stage_preds.shape
    first = np.full(n, m_total)
    for i in range(n):
        row = cache.stage_preds[i]
        for m in range(t, m_total):  # 0-based current stage, needs t predecessors
            if np.all(row[m - t:m + 1] == row[m]):
                first[i] = m
                break
    return first


def sweep_frontier_patience(cache: ConfidenceCache, t_values: list) -> list:
    points = []
    for t in t_values:
        if t != int(t) or t < 1:
            raise ConfigError(f"patience values must be positive integers, got {t}")
        points.append(_point_from_exits(cache, float(t), patience_exit_indices(cache, int(t))))
    return points


# ---------------------------------------------------------------------------
# budgeted threshold selection


def select_tau_for_budget(points: list, budget_fraction) -> tuple:
    """Largest grid tau whose mean cost fits the budget; returns (tau, accuracy).

    budget_fraction is a number in (0, 1] relative to the base network,
    or the string "max" for the unconstrained best accuracy on the grid.
    """
    if isinstance(budget_fraction, str):
        if budget_fraction.lower() != "max":
            raise ConfigError(f"unknown budget {budget_fraction!r}")
        best = max(points, key=lambda p: (p.accuracy, p.tau))
        return best.tau, best.accuracy
    budget = float(budget_fraction)
    if not 0.0 < budget <= 1.0:
        raise ConfigError(f"budget fraction must lie in (0, 1], got {budget}")
    feasible = [p for p in points if p.flops_fraction <= budget]
    if not feasible:
        raise InfeasibleBudgetError(
            f"no grid threshold fits budget {budget} (cheapest point uses "
            f"{min(p.flops_fraction for p in points):.3f} of the base network)")
    chosen = max(feasible, key=lambda p: p.tau)
    return chosen.tau, chosen.accuracy


def best_accuracy_within_budget(points: list, budget: float) -> float:
    """Best grid accuracy among feasible points (the Max-column semantics)."""
    feasible = [p.accuracy for p in points if p.flops_fraction <= budget]
    if not feasible:
        raise InfeasibleBudgetError(f"no grid threshold fits budget {budget}")
    return max(feasible)


def budget_label(token: str) -> str:
    if token.lower() == "max":
        return "Max"
    pct = float(token) * 100
    return f"{pct:.0f}%" if abs(pct - round(pct)) < 1e-9 else f"{pct:g}%"


def format_budget_table(rows: list, tokens: list) -> list:
    """Accuracy table, one line per method, columns per budget token.

    rows: (name, frontier points) pairs; tokens: budget strings like
    "0.25" or "max". Infeasible cells print NA.
    """
    labels = [budget_label(t) for t in tokens]
    width = max(8, max(len(l) for l in labels) + 2)
    name_w = max(6, max(len(name) for name, _ in rows) + 2)
    lines = ["".join([" " * name_w] + [l.rjust(width) for l in labels])]
    for name, points in rows:
        cells = []
        for token in tokens:
            budget = "max" if token.lower() == "max" else float(token)
            try:
                _tau, acc = select_tau_for_budget(points, budget)
                cells.append(f"{acc * 100:.1f}")
            except InfeasibleBudgetError:
                cells.append("NA")
        lines.append("".join([name.ljust(name_w)] + [c.rjust(width) for c in cells]))
    return lines


# ---------------------------------------------------------------------------
# CSV artifacts (UTF-8, '.' decimal, LF endings)


def write_frontier_csv(path: str, points: list):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("tau,mean_flops,flops_fraction,accuracy\n")
        for p in points:
            f.write(f"{p.tau!r},{p.mean_flops!r},{p.flops_fraction!r},{p.accuracy!r}\n")


def read_frontier_csv(path: str) -> list:
    points = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "tau,mean_flops,flops_fraction,accuracy":
            raise ConfigError(f"unexpected frontier header in {path}: {header!r}")
        for line in f:
            tau, mf, fr, acc = line.strip().split(",")
            points.append(FrontierPoint(tau=float(tau), mean_flops=float(mf),
                                        flops_fraction=float(fr), accuracy=float(acc)))
    return points
