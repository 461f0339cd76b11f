"""Desk-scale experiment drivers shared by the scripts and the acceptance suite.

Each driver trains the full pipeline at small scale and reports the
quantities the acceptance checks need: per-stage train losses, last-stage
vs last-head test accuracy, and accuracy-vs-cost frontiers for the
threshold policy on fusion outputs ("ztw"), the threshold policy on
independently trained heads ("sdn"), and the patience policy ("pbee").

The two supervised methods share one pretrained backbone per seed; the
dataset is pinned by an explicit dataset seed so only training randomness
varies across run seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import (backbone_factory, build_splits, parse_config_text, parse_grid,
                     resolve_config, train_config)
from .metrics import build_confidence_cache, sweep_frontier, sweep_frontier_patience
from .training import train_full_pipeline

SPIRALS_CONFIG = """\
dataset.kind = spirals
dataset.classes = 4
dataset.per_class = 2000
dataset.noise = 0.2
dataset.revolutions = 1.0
dataset.seed = 20240901
dataset.train_fraction = 0.7
dataset.val_fraction = 0.15
dataset.test_fraction = 0.15
model.kind = mlp
model.hidden = 64
model.depth = 3
trainer.pretrain_epochs = 60
trainer.pretrain_lr = 0.003
trainer.epochs = 50
trainer.batch_size = 128
trainer.lr = 0.001
trainer.lr_drop_epoch = 15
trainer.pool_target = 4
trainer.ensemble_epochs = 500
trainer.ensemble_lr = 0.1
"""

DIGITS_CONFIG = """\
dataset.kind = digits
dataset.per_class = 1200
dataset.noise = 0.35
dataset.max_shift = 4
dataset.seed = 20240902
dataset.train_fraction = 0.8333333333333334
dataset.val_fraction = 0.0
dataset.test_fraction = 0.16666666666666666
model.kind = cnn
model.channels = 8
model.depth = 3
trainer.pretrain_epochs = 4
trainer.pretrain_lr = 0.003
trainer.epochs = 5
trainer.batch_size = 128
trainer.lr = 0.003
trainer.lr_drop_epoch = 3
trainer.ic_stride = 2
trainer.ensemble_epochs = 500
trainer.ensemble_lr = 0.1
"""

GRIDWORLD_CONFIG = """\
env.width = 7
env.height = 7
env.step_limit = 30
env.epsilon = 0.05
trainer.ic_stride = 2
distill.channels = 4
distill.pretrain_epochs = 25
distill.rounds = 6
distill.steps_per_round = 128
distill.epochs = 5
distill.batch_size = 64
distill.lr = 0.001
distill.episodes = 10
distill.grid = 0.1:1:0.1,1.01
"""


def spirals_config() -> dict:
    return resolve_config(parse_config_text(SPIRALS_CONFIG))


def digits_config() -> dict:
    return resolve_config(parse_config_text(DIGITS_CONFIG))


def gridworld_config() -> dict:
    return resolve_config(parse_config_text(GRIDWORLD_CONFIG))


@dataclass
class SeedComparison:
    seed: int
    base_test_accuracy: float
    ztw_stage_losses: list     # fusion train loss per stage
    ztw_head_losses: list      # cascade head train loss per head
    q_last_test_accuracy: float
    p_last_test_accuracy: float
    frontiers: dict            # name -> list[FrontierPoint]
    full_network_flops: int


def run_seed_comparison(cfg: dict, seed: int, grid: list | None = None) -> SeedComparison:
    """One seed of the ztw-vs-baselines experiment on a supervised fixture."""
    splits = build_splits(cfg, seed)
    factory = backbone_factory(cfg, splits.train.sample_shape, splits.train.num_classes)
    grid = grid if grid is not None else parse_grid(cfg["sweep.grid"])

    ztw_cfg = train_config(cfg, seed)
    ztw_res = train_full_pipeline(splits, ztw_cfg, factory)
    backbone = ztw_res.bundle.backbone  # frozen; shared with the baselines

    sdn_cfg = train_config(cfg, seed)
    sdn_cfg.cascade = False
    sdn_cfg.ensemble_kind = "none"
    sdn_res = train_full_pipeline(splits, sdn_cfg, factory, prebuilt_backbone=backbone)

    test = splits.test
    outs = ztw_res.bundle.forward_outputs(test.inputs)
    base_acc = float((outs.final_logits.argmax(axis=1) == test.labels).mean())
    q_last = float((outs.stage_q[-1].argmax(axis=1) == test.labels).mean())
    p_last = float((outs.head_probs[-1].argmax(axis=1) == test.labels).mean())

    ztw_cache = build_confidence_cache(test, ztw_res.bundle, source="ensemble_probs")
    sdn_cache = build_confidence_cache(test, sdn_res.bundle, source="head_probs")
    patience_grid = list(range(1, ztw_res.bundle.num_heads))
    frontiers = {
        "ztw": sweep_frontier(ztw_cache, grid),
        "sdn": sweep_frontier(sdn_cache, grid),
        "pbee": sweep_frontier_patience(sdn_cache, patience_grid or [1]),
    }
    return SeedComparison(
        seed=seed,
        base_test_accuracy=base_acc,
        ztw_stage_losses=ztw_res.ensemble_stage_losses,
        ztw_head_losses=ztw_res.head_train_losses,
        q_last_test_accuracy=q_last,
        p_last_test_accuracy=p_last,
        frontiers=frontiers,
        full_network_flops=ztw_res.bundle.full_network_flops())


def mean_accuracy_at_budget(results: list, method: str, budget: float) -> float:
    """Seed-averaged accuracy of the largest-feasible-threshold selection."""
    from .metrics import select_tau_for_budget
    accs = [select_tau_for_budget(r.frontiers[method], budget)[1] for r in results]
    return float(np.mean(accs))
