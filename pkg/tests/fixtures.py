"""Shared small model fixtures for policy/metric/training tests."""

import numpy as np

from ztw.backbone import make_mlp_backbone, pretrain_backbone
from ztw.bundle import ModelBundle
from ztw.data import SpiralSpec, gen_spirals, split
from ztw.ensembles import EnsembleParams
from ztw.heads import make_heads


def spiral_splits(seed=0, classes=3, per_class=60, noise=0.15):
    ds = gen_spirals(SpiralSpec(classes=classes, per_class=per_class,
                                noise=noise, seed=seed))
    return split(ds, (0.6, 0.2, 0.2), seed=seed + 1)


def untrained_bundle(seed=0, classes=3, with_ensembles=True, cascade=True, depth=3):
    """Pretrained backbone with freshly initialized heads and default fusion."""
    parts = spiral_splits(seed=seed, classes=classes)
    backbone = make_mlp_backbone(2, 16, depth, classes, seed=seed)
    pretrain_backbone(backbone, parts.train, epochs=15, lr=0.01,
                      batch_size=32, seed=seed)
    heads = make_heads(backbone, cascade=cascade, seed=seed + 50)
    ensembles = None
    if with_ensembles:
        ensembles = [EnsembleParams.create(m, classes) for m in range(1, len(heads) + 1)]
    bundle = ModelBundle(backbone=backbone, heads=heads, ensembles=ensembles)
    return bundle, parts
