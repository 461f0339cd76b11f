"""Operator CLI: train, sweep, hi, budget, distill.

Exit statuses: 0 success, 2 usage or configuration error, 3 data error,
4 numeric or training failure. Every command is idempotent for identical
inputs and --out: artifacts contain no timestamps, hostnames, or absolute
paths, so reruns are byte-identical.

ZTW_THREADS (0 = auto) caps the worker pool used for the independent
fusion-stage training jobs.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from .checkpoint import assign_entries, load_checkpoint, save_checkpoint
from .config import (backbone_factory, build_splits, format_config, load_config,
                     parse_grid, train_config)
from .bundle import ModelBundle
from .ensembles import EnsembleParams, write_head_log_probs
from .exceptions import (ConfigError, DataFormatError, InfeasibleBudgetError,
                         ZtwError)
from .gridworld import run_distill_pipeline, write_return_csv
from .heads import make_heads
from .metrics import (build_confidence_cache, correctness_matrix,
                      hindsight_improvability, read_frontier_csv,
                      select_tau_for_budget, sweep_frontier,
                      sweep_frontier_patience, write_frontier_csv, write_hi_csv)
from .training import train_full_pipeline


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def _write_manifest(path: str, pairs: list):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key, value in pairs:
            f.write(f"{key} = {value}\n")


def _apply_ablations(cfg: dict, ablations: list):
    for name in ablations or []:
        if name == "no-cascade":
            cfg["trainer.cascade"] = False
        elif name == "no-ensemble":
            cfg["trainer.ensemble_kind"] = "none"
        elif name == "no-stopgrad":
            cfg["trainer.stop_gradient"] = False
        else:
            raise ConfigError(f"unknown ablation {name!r}")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["trainer.seed"] = args.seed
    _apply_ablations(cfg, args.ablate)
    seed = cfg["trainer.seed"]

    splits = build_splits(cfg, seed)
    factory = backbone_factory(cfg, splits.train.sample_shape, splits.train.num_classes)
    result = train_full_pipeline(splits, train_config(cfg, seed), factory)

    os.makedirs(args.out, exist_ok=True)
    resolved_path = os.path.join(args.out, "resolved.cfg")
    with open(resolved_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_config(cfg))
    ckpt_path = os.path.join(args.out, "checkpoint.ztw")
    save_checkpoint(ckpt_path, [(n, t.data) for n, t in result.bundle.param_entries()])
    cache_path = os.path.join(args.out, "head_logprobs.csv")
    write_head_log_probs(cache_path, result.head_train_log_probs)

    manifest = [
        ("seed", seed),
        ("config_sha256", hashlib.sha256(format_config(cfg).encode()).hexdigest()),
        ("dataset_train_hash", splits.train.content_hash()),
        ("dataset_val_hash", splits.val.content_hash()),
        ("dataset_test_hash", splits.test.content_hash()),
        ("checkpoint", "checkpoint.ztw"),
        ("resolved_config", "resolved.cfg"),
        ("head_logprobs", "head_logprobs.csv"),
        ("checkpoint_sha256", _sha256_file(ckpt_path)),
    ]
    _write_manifest(os.path.join(args.out, "manifest.txt"), manifest)
    print(f"trained: {ckpt_path}")
    return 0


def _load_bundle(cfg: dict, checkpoint_path: str):
    """Rebuild architecture from the config, then fill in checkpoint tensors."""
    seed = cfg["trainer.seed"]
    splits = build_splits(cfg, seed)
    factory = backbone_factory(cfg, splits.train.sample_shape, splits.train.num_classes)
    backbone = factory(0)
    backbone.freeze()
    heads = make_heads(backbone, cascade=cfg["trainer.cascade"], seed=0,
                       pool_target=(cfg["trainer.pool_target"], cfg["trainer.pool_target"]),
                       conv_stride=cfg["trainer.ic_stride"])
    loaded = load_checkpoint(checkpoint_path)
    ensembles = None
    kind = cfg["trainer.ensemble_kind"]
    if kind != "none" and "ens1.raw_w" in loaded:
        ensembles = [EnsembleParams.create(m, backbone.num_classes)
                     for m in range(1, len(heads) + 1)]
    bundle = ModelBundle(backbone=backbone, heads=heads, ensembles=ensembles,
                         ensemble_kind=kind if kind != "none" else "geometric")
    assign_entries(bundle.param_entries(), loaded, path=checkpoint_path)
    return bundle, splits


def _config_for_checkpoint(args) -> dict:
    if args.config:
        return load_config(args.config)
    sibling = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "resolved.cfg")
    if not os.path.exists(sibling):
        raise ConfigError(
            f"no --config given and {sibling} not found next to the checkpoint")
    return load_config(sibling)


def _pick_split(splits, name: str):
    return {"train": splits.train, "val": splits.val, "test": splits.test}[name]


def cmd_sweep(args) -> int:
    cfg = _config_for_checkpoint(args)
    bundle, splits = _load_bundle(cfg, args.checkpoint)
    split_name = args.split or cfg["sweep.split"]
    dataset = _pick_split(splits, split_name)
    grid = parse_grid(args.grid) if args.grid else parse_grid(cfg["sweep.grid"])

    if args.policy == "ztw":
        if bundle.ensembles is None:
            raise ConfigError("ztw policy needs fusion stages in the checkpoint")
        cache = build_confidence_cache(dataset, bundle, source="ensemble_probs")
        points = sweep_frontier(cache, grid)
    elif args.policy == "sdn":
        cache = build_confidence_cache(dataset, bundle, source="head_probs")
        points = sweep_frontier(cache, grid)
    else:  # pbee
        cache = build_confidence_cache(dataset, bundle, source="head_probs")
        points = sweep_frontier_patience(cache, [int(round(t)) for t in grid])

    os.makedirs(args.out, exist_ok=True)
    frontier_path = os.path.join(args.out, "frontier.csv")
    write_frontier_csv(frontier_path, points)
    _write_manifest(os.path.join(args.out, "frontier_meta.txt"), [
        ("policy", args.policy),
        ("split", split_name),
        ("dataset_hash", dataset.content_hash()),
        ("full_network_flops", bundle.full_network_flops()),
        ("checkpoint_sha256", _sha256_file(args.checkpoint)),
    ])
    print(f"frontier: {frontier_path}")
    return 0


def cmd_hi(args) -> int:
    cfg = _config_for_checkpoint(args)
    bundle, splits = _load_bundle(cfg, args.checkpoint)
    dataset = _pick_split(splits, args.dataset)
    if args.source == "ensembles" or (args.source == "auto" and bundle.ensembles is not None):
        source = "ensemble_probs"
        if bundle.ensembles is None:
            raise ConfigError("checkpoint has no fusion stages for --source ensembles")
    else:
        source = "head_probs"
    cm = correctness_matrix(dataset, bundle, source=source)
    values = hindsight_improvability(cm)
    os.makedirs(args.out, exist_ok=True)
    hi_path = os.path.join(args.out, "hi.csv")
    write_hi_csv(hi_path, values)
    shown = ["NA" if v is None else f"{v:.4f}" for v in values]
    print("hi: " + " ".join(shown))
    print(f"written: {hi_path}")
    return 0


def _budget_label(token: str) -> str:
    if token.lower() == "max":
        return "Max"
    frac = float(token)
    pct = frac * 100
    return f"{pct:.0f}%" if abs(pct - round(pct)) < 1e-9 else f"{pct:g}%"


def cmd_budget(args) -> int:
    points = read_frontier_csv(args.frontier)
    tokens = [t.strip() for t in args.budgets.split(",") if t.strip()]
    if not tokens:
        raise ConfigError("empty --budgets list")
    labels, taus, accs = [], [], []
    for token in tokens:
        labels.append(_budget_label(token))
        budget = token.lower() if token.lower() == "max" else float(token)
        if budget != "max" and not 0.0 < budget <= 1.0:
            raise ConfigError(f"budget {token} outside (0, 1]")
        try:
            tau, acc = select_tau_for_budget(points, budget)
            taus.append(f"{tau!r}")
            accs.append(f"{acc * 100:.1f}")
        except InfeasibleBudgetError:
            taus.append("NA")
            accs.append("NA")
    width = max(8, max(len(l) for l in labels) + 2)
    print("".join(l.rjust(width) for l in ["budget"] + labels))
    print("".join(l.rjust(width) for l in ["tau"] + taus))
    print("".join(l.rjust(width) for l in ["accuracy"] + accs))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "budget.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("budget,tau,accuracy\n")
            for token, tau, acc in zip(tokens, taus, accs):
                f.write(f"{token},{tau},{acc}\n")
        print(f"written: {path}")
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["trainer.seed"] = args.seed
    seed = cfg["trainer.seed"]
    result = run_distill_pipeline(cfg, seed)

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved.cfg"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write(format_config(cfg))
    ckpt_path = os.path.join(args.out, "checkpoint.ztw")
    save_checkpoint(ckpt_path, [(n, t.data) for n, t in result.bundle.param_entries()])
    rv_path = os.path.join(args.out, "return_vs_cost.csv")
    write_return_csv(rv_path, result.return_points)
    kl_path = os.path.join(args.out, "kl_history.csv")
    with open(kl_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("round,epoch,head,kl\n")
        for r, round_hist in enumerate(result.kl_history):
            for e, kls in enumerate(round_hist):
                for h, kl in enumerate(kls, start=1):
                    f.write(f"{r},{e},{h},{kl!r}\n")
    _write_manifest(os.path.join(args.out, "manifest.txt"), [
        ("seed", seed),
        ("config_sha256", hashlib.sha256(format_config(cfg).encode()).hexdigest()),
        ("checkpoint", "checkpoint.ztw"),
        ("return_vs_cost", "return_vs_cost.csv"),
        ("kl_history", "kl_history.csv"),
        ("checkpoint_sha256", _sha256_file(ckpt_path)),
    ])
    print(f"distilled: {ckpt_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ztw",
                                     description="Early-exit training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain backbone, train heads and fusion stages")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", action="append",
                   choices=["no-cascade", "no-ensemble", "no-stopgrad"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="accuracy vs cost frontier over a threshold grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--policy", required=True, choices=["ztw", "sdn", "pbee"])
    p.add_argument("--grid", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--split", default=None, choices=["train", "val", "test"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("hi", help="hindsight improvability per head")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--source", default="auto", choices=["auto", "heads", "ensembles"])
    p.set_defaults(func=cmd_hi)

    p = sub.add_parser("budget", help="budgeted accuracy table from a frontier")
    p.add_argument("--frontier", required=True)
    p.add_argument("--budgets", default="0.25,0.5,0.75,1.0,max")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("distill", help="clone an expert policy into exit heads")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataFormatError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except ZtwError as e:
        print(f"failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
