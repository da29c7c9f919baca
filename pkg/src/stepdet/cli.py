"""Command line front end: one subcommand per pipeline stage plus reporting.

Every command works inside a run directory. `gen-data` freezes the config
snapshot there; later commands reload that snapshot, so a run stays
self-describing and idempotent. `run` chains all stages in one process.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

from .dataset import (
    frequency_groups,
    generate_shapeworld,
    load_annotations,
    partition_head_tail,
    save_annotations,
)
from .detector import load_checkpoint, save_checkpoint
from .pipeline import (
    RunConfig,
    canonical_json,
    config_fingerprint,
    evaluate_model,
    finetune_head_expert,
    finetune_seed,
    knowledge_transfer,
    prepare_run_dir,
    pretrain,
    pretrain_seed,
    read_curve,
    run_config_from_dict,
    run_stepwise,
    transfer_seed,
    write_curve,
)
from .presets import DIVISION_PRESETS, PRESETS
from .replay import (
    build_head_dominant,
    build_tail_dominant,
    load_scores,
    load_subset,
    save_scores,
    save_subset,
    score_instances,
)

RUN_ROOT_ENV = "STEPDET_RUN_ROOT"


class CommandError(Exception):
    """User-facing failure; rendered as `<stage>: <message>` with exit code 2."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")


def _resolve_run_dir(args, config_name: str | None = None) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    root = os.environ.get(RUN_ROOT_ENV)
    if root is None:
        raise CommandError(args.command, f"pass --run-dir or set {RUN_ROOT_ENV}")
    name = config_name or args.preset
    return Path(root) / name


def _config_from_args(args) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CommandError(args.command, f"config file {path} not found")
        cfg = run_config_from_dict(json.loads(path.read_text()))
    else:
        cfg = PRESETS[args.preset](args.seed)
    if getattr(args, "division", None):
        cfg = replace(cfg, divisions=DIVISION_PRESETS[args.division])
    return cfg


def _load_snapshot(run_dir: Path, command: str) -> RunConfig:
    path = run_dir / "config.json"
    if not path.exists():
        raise CommandError(command, f"{path} missing; run `stepdet gen-data` first")
    config = run_config_from_dict(json.loads(path.read_text()))
    if config.single_threaded:
        torch.set_num_threads(1)
    return config


def _require(path: Path, command: str, upstream: str) -> Path:
    if not path.exists():
        raise CommandError(command, f"{path} missing; run `stepdet {upstream}` first")
    return path


def _record_timing(run_dir: Path, tag: str, seconds: float) -> None:
    path = run_dir / "timings.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc[tag] = round(seconds, 3)
    path.write_text(canonical_json(doc))


def _thresholds(config: RunConfig) -> list[int]:
    return sorted(config.divisions, reverse=True)


def _step_threshold(config: RunConfig, step: int, command: str) -> int:
    thresholds = _thresholds(config)
    if not 1 <= step <= len(thresholds):
        raise CommandError(command, f"--step must be in 1..{len(thresholds)}")
    return thresholds[step - 1]


def cmd_gen_data(args) -> int:
    config = _config_from_args(args)
    run_dir = _resolve_run_dir(args, config.name)
    prepare_run_dir(config, run_dir)
    t0 = time.monotonic()
    train_ds = generate_shapeworld(config.train_data)
    val_ds = generate_shapeworld(config.val_data)
    save_annotations(train_ds, run_dir / "data" / "train.json")
    save_annotations(val_ds, run_dir / "data" / "val.json")
    _record_timing(run_dir, "gen-data", time.monotonic() - t0)
    print(f"wrote {len(train_ds.images)} train / {len(val_ds.images)} val images -> {run_dir}")
    for m in _thresholds(config):
        part = partition_head_tail(train_ds, m)
        print(f"  M={m}: {len(part.head)} head / {len(part.tail)} tail categories")
    return 0


def cmd_pretrain(args) -> int:
    run_dir = _resolve_run_dir(args)
    config = _load_snapshot(run_dir, "pretrain")
    train_path = _require(run_dir / "data" / "train.json", "pretrain", "gen-data")
    train_ds = load_annotations(train_path)
    t0 = time.monotonic()
    cfg = replace(config.pretrain_cfg, seed=pretrain_seed(config))
    model, curve = pretrain(train_ds, config.detector, cfg, config.weights)
    write_curve(run_dir, "pretrain", curve)
    save_checkpoint(model, run_dir / "checkpoints" / "pretrain.pt")
    _record_timing(run_dir, "pretrain", time.monotonic() - t0)
    print(f"pretrain done: {len(curve)} steps, final loss {curve[-1]['total']:.4f}")
    return 0


def cmd_score(args) -> int:
    run_dir = _resolve_run_dir(args)
    config = _load_snapshot(run_dir, "score")
    ckpt = _require(run_dir / "checkpoints" / "pretrain.pt", "score", "pretrain")
    train_ds = load_annotations(_require(run_dir / "data" / "train.json", "score", "gen-data"))
    t0 = time.monotonic()
    scored = score_instances(load_checkpoint(ckpt), train_ds)
    save_scores(scored, run_dir / "scores.jsonl")
    _record_timing(run_dir, "score", time.monotonic() - t0)
    above = sum(1 for s in scored if s.score > config.head_budget.tau)
    print(f"scored {len(scored)} instances ({above} above tau={config.head_budget.tau})")
    return 0


def cmd_build_replay(args) -> int:
    run_dir = _resolve_run_dir(args)
    config = _load_snapshot(run_dir, "build-replay")
    train_ds = load_annotations(
        _require(run_dir / "data" / "train.json", "build-replay", "gen-data")
    )
    scored = load_scores(_require(run_dir / "scores.jsonl", "build-replay", "score"))
    t0 = time.monotonic()
    for m in _thresholds(config):
        partition = partition_head_tail(train_ds, m)
        d_head = build_head_dominant(train_ds, scored, partition, config.head_budget)
        d_tail = build_tail_dominant(train_ds, scored, partition, config.tail_budget)
        save_subset(d_head, run_dir / "subsets" / f"head_m{m}.json", "data/train.json")
        save_subset(d_tail, run_dir / "subsets" / f"tail_m{m}.json", "data/train.json")
        print(
            f"M={m}: D_head {len(d_head.valid_annotation_ids)} instances / "
            f"{len(d_head.image_ids)} images; D_tail {len(d_tail.valid_annotation_ids)} / "
            f"{len(d_tail.image_ids)}"
        )
    _record_timing(run_dir, "build-replay", time.monotonic() - t0)
    return 0


def cmd_finetune(args) -> int:
    run_dir = _resolve_run_dir(args)
    config = _load_snapshot(run_dir, "finetune")
    m = _step_threshold(config, args.step, "finetune")
    train_ds = load_annotations(_require(run_dir / "data" / "train.json", "finetune", "gen-data"))
    subset = load_subset(
        _require(run_dir / "subsets" / f"head_m{m}.json", "finetune", "build-replay"), train_ds
    )
    if args.step == 1:
        ckpt = _require(run_dir / "checkpoints" / "pretrain.pt", "finetune", "pretrain")
    else:
        prev = _thresholds(config)[args.step - 2]
        ckpt = _require(
            run_dir / "checkpoints" / f"unified_m{prev}.pt",
            "finetune",
            f"transfer --step {args.step - 1}",
        )
    t0 = time.monotonic()
    cfg = replace(config.finetune_cfg, seed=finetune_seed(config, args.step))
    expert, curve = finetune_head_expert(load_checkpoint(ckpt), subset, cfg, config.weights)
    write_curve(run_dir, f"finetune_m{m}", curve)
    save_checkpoint(expert, run_dir / "checkpoints" / f"expert_m{m}.pt")
    _record_timing(run_dir, f"finetune_m{m}", time.monotonic() - t0)
    print(f"finetune M={m} done: {len(curve)} steps, final loss {curve[-1]['total']:.4f}")
    return 0


def cmd_transfer(args) -> int:
    run_dir = _resolve_run_dir(args)
    config = _load_snapshot(run_dir, "transfer")
    m = _step_threshold(config, args.step, "transfer")
    train_ds = load_annotations(_require(run_dir / "data" / "train.json", "transfer", "gen-data"))
    subset = load_subset(
        _require(run_dir / "subsets" / f"tail_m{m}.json", "transfer", "build-replay"), train_ds
    )
    ckpt = _require(
        run_dir / "checkpoints" / f"expert_m{m}.pt", "transfer", f"finetune --step {args.step}"
    )
    partition = partition_head_tail(train_ds, m)
    t0 = time.monotonic()
    cfg = replace(config.transfer_cfg, seed=transfer_seed(config, args.step))
    unified, curve = knowledge_transfer(
        load_checkpoint(ckpt), subset, cfg, frozenset(partition.head), config.weights
    )
    write_curve(run_dir, f"transfer_m{m}", curve)
    save_checkpoint(unified, run_dir / "checkpoints" / f"unified_m{m}.pt")
    _record_timing(run_dir, f"transfer_m{m}", time.monotonic() - t0)
    print(f"transfer M={m} done: {len(curve)} steps, final loss {curve[-1]['total']:.4f}")
    return 0


def _checkpoint_tags(run_dir: Path, config: RunConfig) -> list[str]:
    tags = ["pretrain"]
    for m in _thresholds(config):
        tags += [f"expert_m{m}", f"unified_m{m}"]
    return [t for t in tags if (run_dir / "checkpoints" / f"{t}.pt").exists()]


def _row_label(tag: str) -> str:
    if tag == "pretrain":
        return "baseline"
    if tag.startswith("expert"):
        return "FT"
    return "FT&KT"


def _print_metrics_table(metrics: dict[str, dict]) -> None:
    cols = ["ap", "ap_head", "ap_tail", "ap_rare", "ap_common", "ap_frequent"]
    names = ["AP", "AP_head", "AP_tail", "AP_r", "AP_c", "AP_f"]
    header = f"{'checkpoint':<22}{'role':<10}" + "".join(f"{n:>12}" for n in names)
    print(header)
    for tag, doc in metrics.items():
        cells = "".join(
            f"{doc[c]:>12.4f}" if doc.get(c) is not None else f"{'-':>12}" for c in cols
        )
        print(f"{tag:<22}{_row_label(tag):<10}" + cells)


def cmd_eval(args) -> int:
    run_dir = _resolve_run_dir(args)
    config = _load_snapshot(run_dir, "eval")
    train_ds = load_annotations(_require(run_dir / "data" / "train.json", "eval", "gen-data"))
    split_path = run_dir / "data" / f"{args.split}.json"
    eval_ds = load_annotations(_require(split_path, "eval", "gen-data"))
    groups = frequency_groups(train_ds, config.group_thresholds)
    partition = partition_head_tail(train_ds, min(config.divisions))

    if args.checkpoint == "all":
        tags = _checkpoint_tags(run_dir, config)
        if not tags:
            raise CommandError("eval", "no checkpoints found; run `stepdet pretrain` first")
    else:
        _require(run_dir / "checkpoints" / f"{args.checkpoint}.pt", "eval", "pretrain")
        tags = [args.checkpoint]

    t0 = time.monotonic()
    results = {}
    for tag in tags:
        model = load_checkpoint(run_dir / "checkpoints" / f"{tag}.pt")
        doc = evaluate_model(model, eval_ds, groups, partition, config.eval_score_threshold)
        doc["checkpoint"] = tag
        suffix = "" if args.split == "val" else f".{args.split}"
        (run_dir / "metrics").mkdir(exist_ok=True)
        (run_dir / "metrics" / f"{tag}{suffix}.json").write_text(canonical_json(doc))
        results[tag] = doc
    _record_timing(run_dir, "eval", time.monotonic() - t0)
    _print_metrics_table(results)
    return 0


def _plot_curves(run_dir: Path, curves: dict[str, list[dict]]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stages = [name for name, recs in curves.items() if recs]
    if not stages:
        return
    fig, axes = plt.subplots(1, len(stages), figsize=(5 * len(stages), 3.5), squeeze=False)
    for ax, name in zip(axes[0], stages):
        recs = curves[name]
        steps = [r["step"] for r in recs]
        for term in ("total", "hungarian", "feature_distill", "class_distill"):
            if term in recs[0]:
                ax.plot(steps, [r[term] for r in recs], label=term, linewidth=1)
        ax.set_title(name)
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
    fig.tight_layout()
    (run_dir / "plots").mkdir(exist_ok=True)
    fig.savefig(run_dir / "plots" / "loss_curves.png", dpi=120)
    plt.close(fig)


def _plot_group_ap(run_dir: Path, metrics: dict[str, dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    cols = ["ap", "ap_head", "ap_tail"]
    tags = list(metrics)
    if not tags:
        return
    x = np.arange(len(cols))
    width = 0.8 / len(tags)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, tag in enumerate(tags):
        vals = [metrics[tag].get(c) or 0.0 for c in cols]
        ax.bar(x + i * width, vals, width, label=tag)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(cols)
    ax.set_ylabel("AP")
    ax.legend(fontsize=7)
    fig.tight_layout()
    (run_dir / "plots").mkdir(exist_ok=True)
    fig.savefig(run_dir / "plots" / "group_ap.png", dpi=120)
    plt.close(fig)


def cmd_report(args) -> int:
    run_dir = _resolve_run_dir(args)
    config = _load_snapshot(run_dir, "report")
    curves = {}
    for path in sorted((run_dir / "curves").glob("*.jsonl")) if (run_dir / "curves").exists() else []:
        curves[path.stem] = read_curve(path)
    metrics = {}
    for tag in _checkpoint_tags(run_dir, config):
        path = run_dir / "metrics" / f"{tag}.json"
        if path.exists():
            metrics[tag] = json.loads(path.read_text())
    if not curves and not metrics:
        raise CommandError("report", "no curves or metrics found; run the pipeline first")

    timings_path = run_dir / "timings.json"
    timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}
    report = {
        "config_fingerprint": config_fingerprint(config.to_dict()),
        "wall_time_seconds": round(sum(timings.values()), 3),
        "metrics": metrics,
        "curves": curves,
    }
    (run_dir / "report.json").write_text(canonical_json(report))
    _plot_curves(run_dir, curves)
    _plot_group_ap(run_dir, metrics)
    if metrics:
        _print_metrics_table(metrics)
    print(f"report written to {run_dir / 'report.json'}")
    return 0


def cmd_run(args) -> int:
    config = _config_from_args(args)
    run_dir = _resolve_run_dir(args, config.name)
    _, report = run_stepwise(config, run_dir)
    _print_metrics_table(report.metrics)
    print(f"finished in {report.wall_time_seconds:.1f}s; artifacts in {run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stepdet",
        description="Step-wise long-tail detector training on synthetic shape data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, step=False):
        p.add_argument("--run-dir", default=None, help=f"run directory (or ${RUN_ROOT_ENV}/<name>)")
        p.add_argument("--config", default=None, help="config JSON (overrides --preset)")
        p.add_argument("--preset", default="toy-default", choices=sorted(PRESETS))
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--division", default=None, choices=sorted(DIVISION_PRESETS))
        if step:
            p.add_argument("--step", type=int, default=1, help="1-based chain step")

    common(sub.add_parser("gen-data", help="generate and persist train/val datasets"))
    common(sub.add_parser("pretrain", help="train the base detector on the full train set"))
    common(sub.add_parser("score", help="score every GT instance with the pretrained model"))
    common(sub.add_parser("build-replay", help="build head/tail-dominant replay subsets"))
    common(sub.add_parser("finetune", help="fine-tune the head-class expert"), step=True)
    common(sub.add_parser("transfer", help="distill expert knowledge on the tail subset"), step=True)
    p_eval = sub.add_parser("eval", help="evaluate checkpoints")
    common(p_eval)
    p_eval.add_argument("--checkpoint", default="all")
    p_eval.add_argument("--split", default="val", choices=("train", "val"))
    common(sub.add_parser("report", help="write report.json, plots and the ablation table"))
    common(sub.add_parser("run", help="full chain: gen-data through eval and report"))
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "score": cmd_score,
    "build-replay": cmd_build_replay,
    "finetune": cmd_finetune,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CommandError as err:
        print(str(err), file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as err:
        print(f"{args.command}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
