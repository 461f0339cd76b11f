"""Weighted per-stage combination of head probabilities.

Stage m fuses the first m heads. The geometric form scales each class as
b_i * prod_j p_j_i ** w_j and renormalizes; it is evaluated entirely in
log space (weighted log-prob sums fed through the stable log softmax), so
tiny probabilities never materialize as raw products. The additive form
(w-weighted sum of probabilities plus prior) is the baseline variant.

Positivity of the trained weights and priors is guaranteed by a softplus
reparameterization; stages train independently on cached head log-probs,
so the stage jobs are free to run in parallel.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import NumericError, StageError, TrainingError


def softplus_inv(y: float) -> float:
    if y <= 0:
        raise NumericError(f"softplus inverse needs y > 0, got {y}")
    return math.log(math.expm1(y))


@dataclass
class EnsembleParams:
    """Unconstrained parameters for one stage; effective values are softplus."""

    raw_w: Tensor  # [stage]
    raw_b: Tensor  # [K]
    stage: int

    @classmethod
    def create(cls, stage: int, num_classes: int) -> "EnsembleParams":
        w0 = softplus_inv(1.0 / stage)
        b0 = softplus_inv(1.0 / num_classes)
        return cls(raw_w=Tensor([w0] * stage, requires_grad=True),
                   raw_b=Tensor([b0] * num_classes, requires_grad=True),
                   stage=stage)

    def weights(self) -> np.ndarray:
        return np.logaddexp(0.0, self.raw_w.data)

    def priors(self) -> np.ndarray:
        return np.logaddexp(0.0, self.raw_b.data)

    def params(self):
        return [self.raw_w, self.raw_b]

    def param_entries(self):
        return [(f"ens{self.stage}.raw_w", self.raw_w),
                (f"ens{self.stage}.raw_b", self.raw_b)]


@dataclass
class EnsembleOutput:
    q: np.ndarray        # [N, K]; rows sum to 1
    log_q: np.ndarray    # [N, K]


def _stack(arrays: list, stage: int, what: str) -> np.ndarray:
    if len(arrays) != stage:
        raise StageError(f"stage {stage} expects {stage} {what} inputs, got {len(arrays)}")
    mats = []
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 1:
            a = a[None, :]
        mats.append(a)
    return np.stack(mats, axis=0)  # [m, N, K]


def _validate_log_dist(stack: np.ndarray):
    if not np.all(np.isfinite(stack)):
        raise NumericError("log-probabilities must be finite")
    zmax = stack.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(stack - zmax).sum(axis=-1, keepdims=True))
    if np.max(np.abs(lse)) > 1e-6:
        raise NumericError(f"inputs are not log-distributions (logsumexp off by {np.max(np.abs(lse)):.2e})")


def _geometric_log_q(stack_t: Tensor, raw_w: Tensor, raw_b: Tensor) -> Tensor:
    m = stack_t.shape[0]
    w = ad.reshape(ad.softplus(raw_w), (m, 1, 1))
    weighted = (w * stack_t).sum(axis=0)                 # [N, K]
    scores = weighted + ad.tlog(ad.softplus(raw_b))      # + ln b_i, broadcast
    return ad.log_softmax(scores)


def _additive_log_q(stack_t: Tensor, raw_w: Tensor, raw_b: Tensor) -> Tensor:
    m = stack_t.shape[0]
    w = ad.reshape(ad.softplus(raw_w), (m, 1, 1))
    mixed = (w * stack_t).sum(axis=0) + ad.softplus(raw_b)   # [N, K], strictly positive
    return ad.tlog(mixed) - ad.tlog(mixed.sum(axis=-1, keepdims=True))


def geometric_combine(log_p: list, params: EnsembleParams) -> EnsembleOutput:
    """Stage-m geometric fusion of per-head log-probabilities.

    Every row of every input must be a valid log-distribution. The raw
    product form is never evaluated; normalization happens through the
    log-sum-exp inside log_softmax.
    """
    stack = _stack(log_p, params.stage, "log-prob")
    _validate_log_dist(stack)
    log_q = _geometric_log_q(Tensor(stack), Tensor(params.raw_w.data),
                             Tensor(params.raw_b.data)).data
    return EnsembleOutput(q=np.exp(log_q), log_q=log_q)


def additive_combine(p: list, params: EnsembleParams) -> EnsembleOutput:
    """Stage-m additive fusion of per-head probabilities."""
    stack = _stack(p, params.stage, "probability")
    if not np.all(np.isfinite(stack)) or np.any(stack < 0):
        raise NumericError("probabilities must be finite and non-negative")
    sums = stack.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > 1e-6:
        raise NumericError("inputs are not distributions")
    log_q = _additive_log_q(Tensor(stack), Tensor(params.raw_w.data),
                            Tensor(params.raw_b.data)).data
    return EnsembleOutput(q=np.exp(log_q), log_q=log_q)


def ensemble_flops(stage: int, num_classes: int) -> int:
    """Per-sample cost convention for evaluating one fusion stage:
    one multiply-add per head per class, plus prior add, exp, and
    normalization per class."""
    return 2 * stage * num_classes + 4 * num_classes


def _train_stage(stage: int, stack: np.ndarray, labels: np.ndarray, kind: str,
                 epochs: int, lr: float) -> tuple:
    num_classes = stack.shape[-1]
    params = EnsembleParams.create(stage, num_classes)
    stack_t = Tensor(stack)
    combine = _geometric_log_q if kind == "geometric" else _additive_log_q
    if kind == "additive":
        stack_t = Tensor(np.exp(stack))
    loss_val = math.nan
    for t in range(epochs):
        lr_t = lr * 0.5 * (1.0 + math.cos(math.pi * t / epochs))
        log_q = combine(stack_t, params.raw_w, params.raw_b)
        loss = ad.cross_entropy(log_q, labels)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise TrainingError(f"ensemble stage {stage} diverged at epoch {t}")
        params.raw_w.grad = None
        params.raw_b.grad = None
        loss.backward()
        params.raw_w.data -= lr_t * params.raw_w.grad
        params.raw_b.data -= lr_t * params.raw_b.grad
    # loss at the final parameter values
    final = float(ad.cross_entropy(combine(stack_t, params.raw_w, params.raw_b), labels).data)
    return params, final


def worker_count() -> int:
    """Worker cap from ZTW_THREADS; 0 or unset means auto."""
    raw = os.environ.get("ZTW_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise NumericError(f"ZTW_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise NumericError("ZTW_THREADS must be non-negative")
    return n if n > 0 else (os.cpu_count() or 1)


def train_ensembles(head_log_probs: list, labels: np.ndarray, *, kind: str = "geometric",
                    epochs: int = 500, lr: float = 0.1) -> tuple:
    """Full-batch gradient descent per stage, cosine-decayed learning rate.

    head_log_probs[j] holds the cached [N, K] log-probs of head j+1; the
    heads themselves are never touched. Returns (params per stage, final
    train loss per stage). Stages are independent, so they run on a small
    thread pool capped by ZTW_THREADS.
    """
    if kind not in ("geometric", "additive"):
        raise TrainingError(f"unknown ensemble kind {kind!r}")
    m_total = len(head_log_probs)
    labels = np.asarray(labels)
    stacks = [np.stack([np.asarray(head_log_probs[j], dtype=np.float64)
                        for j in range(m)], axis=0) for m in range(1, m_total + 1)]
    results: list = [None] * m_total
    max_workers = min(worker_count(), m_total)
    if max_workers <= 1:
        for m in range(1, m_total + 1):
            results[m - 1] = _train_stage(m, stacks[m - 1], labels, kind, epochs, lr)
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(_train_stage, m, stacks[m - 1], labels, kind, epochs, lr)
                       for m in range(1, m_total + 1)]
            results = [f.result() for f in futures]
    return [r[0] for r in results], [r[1] for r in results]


def stage_outputs(head_log_probs: list, ensembles: list, kind: str = "geometric") -> list:
    """Evaluate every trained stage on cached head log-probs; returns [N, K] q arrays."""
    outs = []
    for params in ensembles:
        logs = head_log_probs[:params.stage]
        if kind == "geometric":
            outs.append(geometric_combine(logs, params).q)
        else:
            outs.append(additive_combine([np.exp(lp) for lp in logs], params).q)
    return outs


def write_head_log_probs(path: str, head_log_probs: list):
    """Cache CSV: sample_id,head,class,log_prob (head and class 1-/0-based as produced)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("sample_id,head,class,log_prob\n")
        for h, mat in enumerate(head_log_probs, start=1):
            mat = np.asarray(mat)
            for i in range(mat.shape[0]):
                for k in range(mat.shape[1]):
                    f.write(f"{i},{h},{k},{float(mat[i, k])!r}\n")


def read_head_log_probs(path: str) -> list:
    """Inverse of write_head_log_probs."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "sample_id,head,class,log_prob":
            raise NumericError(f"unexpected header in {path}: {header!r}")
        for line in f:
            i, h, k, v = line.rstrip("\n").split(",")
            rows.append((int(i), int(h), int(k), float(v)))
    if not rows:
        return []
    n = max(r[0] for r in rows) + 1
    m = max(r[1] for r in rows)
    k_count = max(r[2] for r in rows) + 1
    mats = [np.zeros((n, k_count)) for _ in range(m)]
    for i, h, k, v in rows:
        mats[h - 1][i, k] = v
    return mats
