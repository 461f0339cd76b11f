"""Two-stage training: heads on a frozen backbone, then fusion stages.

Stage one optimizes all heads jointly from the summed per-head loss in a
single backward pass per batch; with the cascade links gradient-blocked
this is identical to optimizing each head independently, and it reuses
one backbone forward. Stage two trains the per-stage fusion weights on
cached head log-probs only; heads are byte-identical afterwards, which
the pipeline asserts.

The backbone is frozen throughout, so tap activations are precomputed
once per dataset and reused across epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import BackboneModel, pretrain_backbone
from .bundle import ModelBundle
from .data import Dataset, Splits
from .ensembles import train_ensembles
from .exceptions import ConfigError, TrainingError, UndefinedCosineError
from .heads import cascade_forward_all, make_heads
from .optim import make_optimizer, minibatches
from .rng import SplitMix64


@dataclass
class TrainConfig:
    """Knobs for the whole pipeline; a fixed seed makes runs deterministic."""

    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    lr_drop_epoch: int = 15
    lr_drop_factor: float = 0.1
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    stop_gradient: bool = True
    cascade: bool = True
    ensemble_kind: str = "geometric"   # geometric | additive | none
    ensemble_epochs: int = 500
    ensemble_lr: float = 0.1
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3
    pool_target: int = 2
    ic_stride: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigError(f"epochs >= 1 and lr > 0 required, got {self.epochs}, {self.lr}")
        if self.ensemble_kind not in ("geometric", "additive", "none"):
            raise ConfigError(f"unknown ensemble kind {self.ensemble_kind!r}")


@dataclass
class CachedTaps:
    """Frozen-backbone activations, computed once per dataset."""

    taps: list          # M numpy arrays [N, ...]
    final: np.ndarray   # [N, K]


def cache_tap_activations(backbone: BackboneModel, dataset: Dataset,
                          chunk: int = 256) -> CachedTaps:
    if not backbone.frozen:
        raise ConfigError("tap caching requires a frozen backbone")
    parts: list = [[] for _ in range(backbone.num_taps)]
    finals = []
    n = len(dataset)
    for lo in range(0, n, chunk):
        acts = backbone.forward_with_taps(Tensor(dataset.inputs[lo:lo + chunk]))
        for m, t in enumerate(acts.taps):
            parts[m].append(t.data)
        finals.append(acts.final.data)
    return CachedTaps(taps=[np.concatenate(p) for p in parts],
                      final=np.concatenate(finals))


class _TapSlice:
    """Adapter so cached numpy taps can stand in for TapActivations."""

    def __init__(self, cached: CachedTaps, idx: np.ndarray):
        self.taps = [Tensor(t[idx]) for t in cached.taps]
        self.final = Tensor(cached.final[idx])


def train_heads(backbone: BackboneModel, heads: list, dataset: Dataset,
                cfg: TrainConfig, cached: CachedTaps | None = None) -> list:
    """Joint minibatch training of the head chain; returns per-epoch losses.

    The history entry for epoch e is a list of the M mean per-head
    losses. The backbone must already be frozen and is untouched.
    """
    if not backbone.frozen:
        raise ConfigError("train_heads requires a frozen backbone")
    if cached is None:
        cached = cache_tap_activations(backbone, dataset)
    params = [p for h in heads for p in h.params()]
    opt = make_optimizer(cfg.optimizer, params, cfg.lr,
                         beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    rng = SplitMix64(cfg.seed)
    n = len(dataset)
    history = []
    for epoch in range(cfg.epochs):
        if epoch == cfg.lr_drop_epoch:
            opt.lr *= cfg.lr_drop_factor
        sums = np.zeros(len(heads))
        count = 0
        for batch in minibatches(n, cfg.batch_size, rng):
            taps = _TapSlice(cached, batch)
            y = dataset.labels[batch]
            outs = cascade_forward_all(heads, taps, detach_cascade=cfg.stop_gradient)
            losses = [ad.cross_entropy(ad.log_softmax(lg), y) for lg in outs.logits]
            for m, loss in enumerate(losses, start=1):
                if not np.isfinite(loss.data):
                    raise TrainingError(f"head {m} loss became non-finite at epoch {epoch}")
            total = losses[0]
            for loss in losses[1:]:
                total = total + loss
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += [float(l.data) for l in losses]
            count += 1
        history.append((sums / count).tolist())
    return history


def grad_cosine_diagnostic(backbone: BackboneModel, heads: list, inputs: np.ndarray,
                           labels: np.ndarray, detach_cascade: bool = False) -> list:
    """Per-head cosine between the joint-loss gradient and the own-loss gradient.

    For head j this compares d(sum_m L_m)/d phi_j against d(L_j)/d phi_j.
    With the cascade links gradient-blocked the two coincide and every
    cosine is exactly 1; without blocking, later heads' losses bend the
    update direction of earlier heads.
    """
    taps = backbone.forward_with_taps(Tensor(inputs))

    def grads_for(head_subset_loss):
        outs = cascade_forward_all(heads, taps, detach_cascade=detach_cascade)
        losses = [ad.cross_entropy(ad.log_softmax(lg), labels) for lg in outs.logits]
        total = head_subset_loss(losses)
        for h in heads:
            for p in h.params():
                p.grad = None
        total.backward()
        flat = []
        for h in heads:
            vecs = [p.grad.reshape(-1) if p.grad is not None else np.zeros(p.size)
                    for p in h.params()]
            flat.append(np.concatenate(vecs))
        return flat

    def total_loss(losses):
        out = losses[0]
        for l in losses[1:]:
            out = out + l
        return out

    g_joint = grads_for(total_loss)
    cosines = []
    for j in range(len(heads)):
        g_self = grads_for(lambda losses, j=j: losses[j])[j]
        a, b = g_joint[j], g_self
        if np.array_equal(a, b):
            cosines.append(1.0)
            continue
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise UndefinedCosineError(f"zero-norm gradient for head {j + 1}")
        cosines.append(float(np.dot(a, b) / (na * nb)))
    return cosines


@dataclass
class PipelineResult:
    bundle: ModelBundle
    head_loss_history: list            # per-epoch [M] mean losses
    ensemble_stage_losses: list | None  # final train loss per stage
    head_train_log_probs: list         # cached [N, K] per head (train split)
    head_train_losses: list            # per-head train cross-entropy


def _derive_seeds(seed: int) -> dict:
    s = SplitMix64(seed)
    return {name: s.next_u64() for name in
            ("backbone", "pretrain", "heads_init", "heads_train")}


def train_full_pipeline(splits: Splits, cfg: TrainConfig, backbone_factory,
                        prebuilt_backbone: BackboneModel | None = None) -> PipelineResult:
    """Pretrain (or adopt) a backbone, train heads, then fusion stages.

    backbone_factory(seed) builds the architecture; it is skipped when a
    frozen prebuilt backbone is supplied. Stage separation is enforced:
    fusion training sees only cached log-probs, and the pipeline verifies
    the heads' bytes did not change.
    """
    seeds = _derive_seeds(cfg.seed)
    if prebuilt_backbone is not None:
        backbone = prebuilt_backbone
        if not backbone.frozen:
            raise ConfigError("prebuilt backbone must be frozen")
    else:
        backbone = backbone_factory(seeds["backbone"])
        pretrain_backbone(backbone, splits.train, epochs=cfg.pretrain_epochs,
                          lr=cfg.pretrain_lr, batch_size=cfg.batch_size,
                          optimizer=cfg.optimizer, seed=seeds["pretrain"])
    backbone_before = backbone.param_bytes()

    heads = make_heads(backbone, cascade=cfg.cascade, seed=seeds["heads_init"],
                       pool_target=(cfg.pool_target, cfg.pool_target),
                       conv_stride=cfg.ic_stride)
    cached = cache_tap_activations(backbone, splits.train)
    head_cfg = TrainConfig(**{**cfg.__dict__, "seed": seeds["heads_train"]})
    history = train_heads(backbone, heads, splits.train, head_cfg, cached=cached)
    if backbone.param_bytes() != backbone_before:
        raise TrainingError("backbone parameters changed during head training")

    # train-split head outputs, cached once; fusion consumes only these
    outs = cascade_forward_all(heads, _TapSlice(cached, np.arange(len(splits.train))))
    log_probs = []
    for lg in outs.logits:
        z = lg.data
        zmax = z.max(axis=-1, keepdims=True)
        shifted = z - zmax
        log_probs.append(shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)))
    labels = splits.train.labels
    head_losses = [float(-lp[np.arange(len(labels)), labels].mean()) for lp in log_probs]

    ensembles = None
    stage_losses = None
    if cfg.ensemble_kind != "none":
        heads_before = b"".join(h.param_bytes() for h in heads)
        ensembles, stage_losses = train_ensembles(
            log_probs, labels, kind=cfg.ensemble_kind,
            epochs=cfg.ensemble_epochs, lr=cfg.ensemble_lr)
        if b"".join(h.param_bytes() for h in heads) != heads_before:
            raise TrainingError("head parameters changed during fusion training")

    bundle = ModelBundle(backbone=backbone, heads=heads, ensembles=ensembles,
                         ensemble_kind=cfg.ensemble_kind if cfg.ensemble_kind != "none" else "geometric")
    return PipelineResult(bundle=bundle, head_loss_history=history,
                          ensemble_stage_losses=stage_losses,
                          head_train_log_probs=log_probs,
                          head_train_losses=head_losses)
