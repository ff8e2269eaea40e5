"""Command-line interface: synth, train, eval, decompose, gradcheck.

Exit codes: 0 on success, 2 for usage/configuration problems, 3 for
numeric failures (NaN gradients, failed gradient checks). The effective
merged configuration of a training run is written into its output
directory for provenance, and EMCNET_THREADS caps ``--jobs``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, EMCNetError, NumericError
from .gradcheck import COMPONENTS, run_gradcheck
from .graph import build_grid_adjacency
from .imaging import generate_synthetic_dataset, load_dataset, load_manifest
from .model import ModelConfig, load_model
from .training import (
    TrainConfig,
    compute_metrics,
    run_experiment,
)
from .treedecomp import decompose, verify_rip

SETTINGS = {"default": (256, 32), "fs": (512, 64), "ss": (512, 32)}


def _jobs_cap(jobs: int) -> int:
    cap = os.environ.get("EMCNET_THREADS")
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"EMCNET_THREADS must be an integer, got {cap!r}")
    return jobs


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict) or not set(raw) <= {"model", "train"}:
        raise ConfigError('config file must be an object with "model" and/or "train" sections')
    return raw


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emcnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic texture dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=25)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with model/train sections")
    p.add_argument("--setting", choices=sorted(SETTINGS), default=None,
                   help="resolution preset: default 256/32, fs 512/64, ss 512/32")
    p.add_argument("--seeds", type=str, default=None, help="comma-separated run seeds")
    p.add_argument("--no-genc", action="store_true")
    p.add_argument("--no-hgenc", action="store_true")
    p.add_argument("--no-ctenc", action="store_true")
    p.add_argument("--p-r", type=float, dest="p_r", default=None)
    p.add_argument("--T", type=int, dest="rounds", default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--k-folds", type=int, default=None)
    p.add_argument("--image-side", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default=None)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--topn", type=str, default="1,2,3,5")
    p.add_argument("--json", dest="json_out", help="also write metrics JSON here")
    p.add_argument("--dump-pool", help="write per-image pooling traces (kept nodes / scores)")

    p = sub.add_parser("decompose", help="clique-tree decomposition of a patch grid")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--verify", action="store_true")
    p.add_argument("--root-seed", type=int, default=None)
    p.add_argument("--out", help="write the JSON here instead of stdout")
    p.add_argument("--dump-graph", help="also write the grid graph as JSON {n, edges, master}")

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--component", action="append", choices=sorted(COMPONENTS),
                   help="restrict to one component (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def cmd_synth(args) -> int:
    manifest = generate_synthetic_dataset(
        args.classes, args.per_class, args.side, args.seed, args.out
    )
    print(f"wrote {len(manifest.entries)} images and {Path(args.out) / 'manifest.json'}")
    return 0


def _merged_configs(args) -> tuple[ModelConfig, TrainConfig]:
    file_cfg = _load_config_file(args.config)
    model_kw = dict(file_cfg.get("model", {}))
    train_kw = dict(file_cfg.get("train", {}))

    if args.setting:
        side, patch = SETTINGS[args.setting]
        model_kw["image_side"] = side
        model_kw["patch_size"] = patch
    overrides = {
        "image_side": args.image_side,
        "patch_size": args.patch,
        "d": args.d,
        "message_rounds": args.rounds,
        "pooling_ratio": args.p_r,
    }
    model_kw.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_genc:
        model_kw["use_genc"] = False
    if args.no_hgenc:
        model_kw["use_hgenc"] = False
    if args.no_ctenc:
        model_kw["use_ctenc"] = False

    train_overrides = {
        "batch_size": args.batch,
        "lr0": args.lr,
        "epochs": args.epochs,
        "k_folds": args.k_folds,
        "optimizer": args.optimizer,
    }
    train_kw.update({k: v for k, v in train_overrides.items() if v is not None})
    if args.seeds is not None:
        try:
            train_kw["seeds"] = tuple(int(s) for s in args.seeds.split(","))
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}")
    return ModelConfig.from_dict(model_kw), TrainConfig.from_dict(train_kw)


def cmd_train(args) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise ConfigError(f"manifest not found: {manifest_path}")
    manifest = load_manifest(manifest_path)
    model_config, train_config = _merged_configs(args)
    # the class count always comes from the data
    n_classes = len(manifest.classes)
    if model_config.n_classes != n_classes:
        model_config = ModelConfig.from_dict({**model_config.to_dict(), "n_classes": n_classes})
    summary = run_experiment(
        manifest,
        manifest_path.parent,
        model_config,
        train_config,
        args.out,
        jobs=_jobs_cap(args.jobs),
    )
    top1 = summary.get("topk", {}).get("1")
    line = f"done; summary in {Path(args.out) / 'summary.json'}"
    if top1 is not None:
        line += f" (test top-1 {top1:.3f})"
    print(line)
    return 0


def cmd_eval(args) -> int:
    params, config = load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if len(manifest.classes) != config.n_classes:
        raise CheckpointError(
            f"checkpoint/config mismatch on n_classes: checkpoint has {config.n_classes}, "
            f"manifest has {len(manifest.classes)}"
        )
    try:
        top_n = tuple(int(s) for s in args.topn.split(","))
    except ValueError:
        raise ConfigError(f"--topn must be comma-separated integers, got {args.topn!r}")
    split = manifest.splits.get(args.split, [])
    if not split:
        raise ConfigError(f"manifest has no {args.split!r} split")
    images, labels = load_dataset(manifest, Path(args.manifest).parent, image_side=config.image_side)
    from .model import forward_from_patches
    from .training import patch_stack

    patches = patch_stack([images[i] for i in split], config)
    traces = []
    probs = []
    for mat in patches:
        trace: list | None = [] if args.dump_pool else None
        probs.append(forward_from_patches(mat, params, config, pool_trace=trace).data[0])
        if args.dump_pool:
            traces.append(trace)
    metrics = compute_metrics(np.vstack(probs), labels[split], top_n)
    report = metrics.to_dict(manifest.classes)
    for n, v in sorted(metrics.top_n.items()):
        print(f"top-{n}: {v:.4f}")
    print(f"precision_macro: {metrics.precision_macro:.4f}")
    print(f"recall_macro: {metrics.recall_macro:.4f}")
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report, indent=2, sort_keys=True))
    if args.dump_pool:
        payload = [{"image": int(i), "layers": t} for i, t in zip(split, traces)]
        Path(args.dump_pool).write_text(json.dumps(payload, indent=2))
    return 0


def cmd_decompose(args) -> int:
    adjacency = build_grid_adjacency(args.rows, args.cols)
    tree, elim = decompose(adjacency, root_seed=args.root_seed)
    payload = tree.to_json_dict(fill_edges=elim.fill_edges)
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    if args.dump_graph:
        from .autodiff import constant
        from .graph import PatchGraph, graph_to_json_dict

        n = args.rows * args.cols
        g = PatchGraph(n, adjacency, constant(np.zeros((n, 1))))
        Path(args.dump_graph).write_text(json.dumps(graph_to_json_dict(g), indent=2))
    if args.verify:
        ok, report = verify_rip(tree, adjacency)
        print(f"RIP: {report}" if ok else f"RIP violation: {report}")
        if not ok:
            return 3
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_gradcheck(args.component, seed=args.seed, tolerance=args.tolerance)
    failed = False
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        print(f"{rep.component:12s} max rel err {rep.max_rel_err:.3e}  {status}")
        failed |= not rep.passed
    return 3 if failed else 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "eval": cmd_eval,
        "decompose": cmd_decompose,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except EMCNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
