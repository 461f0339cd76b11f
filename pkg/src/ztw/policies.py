"""Conditional-inference rules: confidence threshold and patience.

The threshold rule exits at the first stage whose top-class probability
strictly exceeds tau; a tau above 1 therefore reproduces the base network
exactly. The patience rule exits once the current head's answer matches
the t preceding heads' answers; the full network always answers if
reached and is not counted inside the patience window.

Decisions are pure functions of per-sample inputs, so evaluation is
embarrassingly parallel over samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bundle import ModelBundle
from .data import Dataset
from .exceptions import ConfigError


@dataclass
class PolicyConfig:
    kind: str = "threshold"           # "threshold" | "patience"
    tau: float = 0.75
    patience: int = 1
    source: str = "head_probs"        # "head_probs" | "ensemble_probs"

    def __post_init__(self):
        if self.kind not in ("threshold", "patience"):
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.source not in ("head_probs", "ensemble_probs"):
            raise ConfigError(f"unknown policy source {self.source!r}")
        if self.kind == "patience" and self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


@dataclass
class ExitDecision:
    exit_index: int            # 1..M, or M+1 for the full network
    distribution: np.ndarray | None  # [K] distribution behind the decision, if available
    predicted: int
    cumulative_flops: int

    def is_final(self, num_heads: int) -> bool:
        return self.exit_index == num_heads + 1


def _check_costs(costs, num_stages: int):
    costs = np.asarray(costs)
    if costs.shape != (num_stages + 1,):
        raise ConfigError(
            f"cost table must have {num_stages + 1} entries (stages + full), got {costs.shape}")
    if np.any(np.diff(costs) <= 0):
        raise ConfigError("cost table must be strictly increasing")
    return costs


def run_threshold_exit(stage_probs: list, final_logits: np.ndarray, tau: float,
                       costs) -> ExitDecision:
    """First stage with max probability strictly above tau wins."""
    costs = _check_costs(costs, len(stage_probs))
    for m, probs in enumerate(stage_probs, start=1):
        probs = np.asarray(probs)
        if probs.max() > tau:
            return ExitDecision(exit_index=m, distribution=probs,
                                predicted=int(probs.argmax()),
                                cumulative_flops=int(costs[m - 1]))
    final_logits = np.asarray(final_logits)
    zmax = final_logits.max()
    e = np.exp(final_logits - zmax)
    return ExitDecision(exit_index=len(stage_probs) + 1, distribution=e / e.sum(),
                        predicted=int(final_logits.argmax()),
                        cumulative_flops=int(costs[-1]))


def run_patience_exit(head_preds: list, final_pred: int, t: int, costs,
                      head_dists: list | None = None,
                      final_dist: np.ndarray | None = None) -> ExitDecision:
    """Exit at the smallest m >= t+1 whose last t+1 answers all agree."""
    if t < 1:
        raise ConfigError(f"patience must be >= 1, got {t}")
    m_total = len(head_preds)
    costs = _check_costs(costs, m_total)
    for m in range(t + 1, m_total + 1):
        window = head_preds[m - 1 - t:m]
        if all(p == window[-1] for p in window):
            dist = np.asarray(head_dists[m - 1]) if head_dists is not None else None
            return ExitDecision(exit_index=m, distribution=dist,
                                predicted=int(head_preds[m - 1]),
                                cumulative_flops=int(costs[m - 1]))
    dist = np.asarray(final_dist) if final_dist is not None else None
    return ExitDecision(exit_index=m_total + 1, distribution=dist,
                        predicted=int(final_pred), cumulative_flops=int(costs[-1]))


@dataclass
class EvalTrace:
    sample_id: int
    exit_index: int
    pred: int
    label: int
    correct: bool
    flops: int


@dataclass
class EvalResult:
    traces: list
    accuracy: float
    mean_flops: float


def evaluate_policy(dataset: Dataset, bundle: ModelBundle, policy: PolicyConfig) -> EvalResult:
    """Per-sample exit decisions over a whole split, plus aggregates."""
    outs = bundle.forward_outputs(dataset.inputs)
    if policy.source == "ensemble_probs":
        if outs.stage_q is None:
            raise ConfigError("policy wants fusion outputs but the bundle has none")
        stage_probs = outs.stage_q
    else:
        stage_probs = outs.head_probs
    include_ens = policy.source == "ensemble_probs"
    costs = bundle.cost_table(include_ensembles=include_ens)

    traces = []
    n = len(dataset)
    for i in range(n):
        if policy.kind == "threshold":
            decision = run_threshold_exit([p[i] for p in stage_probs],
                                          outs.final_logits[i], policy.tau, costs)
        else:
            preds = [int(p[i].argmax()) for p in outs.head_probs]
            decision = run_patience_exit(preds, int(outs.final_logits[i].argmax()),
                                         policy.patience, costs,
                                         head_dists=[p[i] for p in outs.head_probs],
                                         final_dist=_softmax_row(outs.final_logits[i]))
        label = int(dataset.labels[i])
        traces.append(EvalTrace(sample_id=i, exit_index=decision.exit_index,
                                pred=decision.predicted, label=label,
                                correct=decision.predicted == label,
                                flops=decision.cumulative_flops))
    accuracy = float(np.mean([t.correct for t in traces])) if traces else 0.0
    mean_flops = float(np.mean([t.flops for t in traces])) if traces else 0.0
    return EvalResult(traces=traces, accuracy=accuracy, mean_flops=mean_flops)


def _softmax_row(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def write_traces_csv(path: str, traces: list):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("sample_id,exit_index,pred,label,correct,flops\n")
        for t in traces:
            f.write(f"{t.sample_id},{t.exit_index},{t.pred},{t.label},"
                    f"{int(t.correct)},{t.flops}\n")
