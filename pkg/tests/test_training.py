"""Two-stage training contracts: freezing, stop-gradient, stage separation."""

import numpy as np
import pytest

from ztw import autodiff as ad
from ztw.autodiff import Tensor
from ztw.backbone import make_mlp_backbone, pretrain_backbone
from ztw.data import Dataset, SpiralSpec, gen_spirals, split
from ztw.exceptions import ConfigError
from ztw.heads import cascade_forward_all, make_heads
from ztw.training import (TrainConfig, cache_tap_activations, grad_cosine_diagnostic,
                          train_full_pipeline, train_heads)

from fixtures import spiral_splits
from test_backbone import blobs_dataset


def quick_cfg(**kw):
    base = dict(epochs=8, batch_size=32, lr=3e-3, lr_drop_epoch=100, seed=5,
                pretrain_epochs=15, pretrain_lr=0.01, ensemble_epochs=120)
    base.update(kw)
    return TrainConfig(**base)


def frozen_backbone(splits, seed=0, hidden=16, depth=3):
    classes = splits.train.num_classes
    model = make_mlp_backbone(2, hidden, depth, classes, seed=seed)
    pretrain_backbone(model, splits.train, epochs=15, lr=0.01, batch_size=32, seed=seed)
    return model


def test_single_head_separable_fixture():
    ds = blobs_dataset(n=160, seed=2)
    parts = split(ds, (1.0, 0.0, 0.0), seed=2)
    backbone = make_mlp_backbone(2, 16, 1, 2, seed=2)
    pretrain_backbone(backbone, parts.train, epochs=20, lr=0.01, batch_size=32, seed=2)
    heads = make_heads(backbone, cascade=False, seed=3)
    train_heads(backbone, heads, parts.train, quick_cfg(epochs=25))
    taps = backbone.forward_with_taps(Tensor(parts.train.inputs))
    outs = cascade_forward_all(heads, taps)
    acc = (outs.probs[0].data.argmax(axis=1) == parts.train.labels).mean()
    assert acc > 0.95


def test_backbone_untouched_by_head_training():
    parts = spiral_splits(seed=9)
    backbone = frozen_backbone(parts, seed=9)
    before = backbone.param_bytes()
    heads = make_heads(backbone, cascade=True, seed=10)
    train_heads(backbone, heads, parts.train, quick_cfg(epochs=3))
    assert backbone.param_bytes() == before


def test_loss_decreases_on_fixture():
    parts = spiral_splits(seed=11)
    backbone = frozen_backbone(parts, seed=11)
    heads = make_heads(backbone, cascade=True, seed=12)
    history = train_heads(backbone, heads, parts.train, quick_cfg(epochs=10))
    first, last = history[0], history[-1]
    assert all(l < f for f, l in zip(first, last))


def test_stop_gradient_makes_joint_equal_own_gradient():
    parts = spiral_splits(seed=13)
    backbone = frozen_backbone(parts, seed=13)
    heads = make_heads(backbone, cascade=True, seed=14)
    x, y = parts.train.inputs[:32], parts.train.labels[:32]

    taps = backbone.forward_with_taps(Tensor(x))
    outs = cascade_forward_all(heads, taps, detach_cascade=True)
    losses = [ad.cross_entropy(ad.log_softmax(lg), y) for lg in outs.logits]
    total = losses[0] + losses[1] + losses[2]
    total.backward()
    joint = [p.grad.copy() for p in heads[0].params()]

    for p in heads[0].params():
        p.grad = None
    outs = cascade_forward_all(heads, backbone.forward_with_taps(Tensor(x)),
                               detach_cascade=True)
    ad.cross_entropy(ad.log_softmax(outs.logits[0]), y).backward()
    own = [p.grad for p in heads[0].params()]
    for a, b in zip(joint, own):
        assert np.array_equal(a, b)


def test_later_losses_contribute_zero_with_detach():
    parts = spiral_splits(seed=15)
    backbone = frozen_backbone(parts, seed=15)
    heads = make_heads(backbone, cascade=True, seed=16)
    x, y = parts.train.inputs[:16], parts.train.labels[:16]
    outs = cascade_forward_all(heads, backbone.forward_with_taps(Tensor(x)),
                               detach_cascade=True)
    later = ad.cross_entropy(ad.log_softmax(outs.logits[1]), y) + \
        ad.cross_entropy(ad.log_softmax(outs.logits[2]), y)
    later.backward()
    for p in heads[0].params():
        assert p.grad is None or not p.grad.any()


def test_no_cascade_training_matches_independent_heads():
    from ztw.heads import head_forward
    from ztw.optim import Adam, minibatches
    from ztw.rng import SplitMix64

    parts = spiral_splits(seed=17)
    backbone = frozen_backbone(parts, seed=17)
    cfg = quick_cfg(epochs=4, cascade=False)
    heads_joint = make_heads(backbone, cascade=False, seed=18)
    train_heads(backbone, heads_joint, parts.train, cfg)

    # same init, each head trained alone on the same batch stream
    heads_solo = make_heads(backbone, cascade=False, seed=18)
    cached = cache_tap_activations(backbone, parts.train)
    for j, head in enumerate(heads_solo):
        opt = Adam(head.params(), cfg.lr)
        rng = SplitMix64(cfg.seed)
        for _ in range(cfg.epochs):
            for batch in minibatches(len(parts.train), cfg.batch_size, rng):
                out = head_forward(head, Tensor(cached.taps[j][batch]))
                loss = ad.cross_entropy(ad.log_softmax(out), parts.train.labels[batch])
                opt.zero_grad()
                loss.backward()
                opt.step()

    assert b"".join(h.param_bytes() for h in heads_joint) == \
        b"".join(h.param_bytes() for h in heads_solo)


def test_grad_cosine_one_with_detach():
    parts = spiral_splits(seed=19)
    backbone = frozen_backbone(parts, seed=19)
    heads = make_heads(backbone, cascade=True, seed=20)
    cos = grad_cosine_diagnostic(backbone, heads, parts.train.inputs[:24],
                                 parts.train.labels[:24], detach_cascade=True)
    assert cos == [1.0] * len(heads)


def test_grad_cosine_last_head_always_one():
    parts = spiral_splits(seed=21)
    backbone = frozen_backbone(parts, seed=21)
    heads = make_heads(backbone, cascade=True, seed=22)
    cos = grad_cosine_diagnostic(backbone, heads, parts.train.inputs[:24],
                                 parts.train.labels[:24], detach_cascade=False)
    assert cos[-1] == 1.0


def test_grad_cosine_below_one_without_detach():
    parts = spiral_splits(seed=23)
    backbone = frozen_backbone(parts, seed=23)
    heads = make_heads(backbone, cascade=True, seed=24)
    cos = grad_cosine_diagnostic(backbone, heads, parts.train.inputs[:48],
                                 parts.train.labels[:48], detach_cascade=False)
    assert cos[0] < 1.0


def test_single_head_cosine_is_one():
    parts = spiral_splits(seed=25)
    backbone = frozen_backbone(parts, seed=25, depth=1)
    heads = make_heads(backbone, cascade=True, seed=26)
    cos = grad_cosine_diagnostic(backbone, heads, parts.train.inputs[:16],
                                 parts.train.labels[:16], detach_cascade=False)
    assert cos == [1.0]


def test_pipeline_determinism():
    parts = spiral_splits(seed=27)

    def run():
        cfg = quick_cfg(epochs=3, seed=123, ensemble_epochs=40)
        res = train_full_pipeline(
            parts, cfg, lambda s: make_mlp_backbone(2, 16, 3, parts.train.num_classes, seed=s))
        entries = res.bundle.param_entries()
        return b"".join(t.data.tobytes() for _, t in entries)

    assert run() == run()


def test_pipeline_stage_separation_and_outputs():
    parts = spiral_splits(seed=29)
    cfg = quick_cfg(epochs=4, seed=7, ensemble_epochs=60)
    res = train_full_pipeline(
        parts, cfg, lambda s: make_mlp_backbone(2, 16, 3, parts.train.num_classes, seed=s))
    assert res.bundle.ensembles is not None
    assert len(res.ensemble_stage_losses) == res.bundle.num_heads
    assert len(res.head_train_log_probs) == res.bundle.num_heads
    # cached log-probs really are log-distributions
    for lp in res.head_train_log_probs:
        assert np.allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-9)


def test_pipeline_without_ensembles():
    parts = spiral_splits(seed=31)
    cfg = quick_cfg(epochs=2, seed=8, ensemble_kind="none")
    res = train_full_pipeline(
        parts, cfg, lambda s: make_mlp_backbone(2, 16, 3, parts.train.num_classes, seed=s))
    assert res.bundle.ensembles is None
    assert res.ensemble_stage_losses is None


def test_train_heads_requires_frozen_backbone():
    parts = spiral_splits(seed=33)
    backbone = make_mlp_backbone(2, 16, 3, parts.train.num_classes, seed=33)
    heads = make_heads(backbone, cascade=True, seed=34)
    with pytest.raises(ConfigError):
        train_heads(backbone, heads, parts.train, quick_cfg(epochs=1))


def test_cached_taps_match_live_forward():
    parts = spiral_splits(seed=35)
    backbone = frozen_backbone(parts, seed=35)
    n = len(parts.train)
    cached = cache_tap_activations(backbone, parts.train, chunk=n)
    live = backbone.forward_with_taps(Tensor(parts.train.inputs))
    for a, b in zip(cached.taps, live.taps):
        assert np.array_equal(a, b.data)
    assert np.array_equal(cached.final, live.final.data)
    # ragged chunking may reorder float ops inside the BLAS kernels, so it
    # only promises numerical (not bitwise) agreement
    ragged = cache_tap_activations(backbone, parts.train, chunk=17)
    assert np.allclose(ragged.final, live.final.data, atol=1e-12)
