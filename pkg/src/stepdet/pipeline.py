"""Three-stage training: pretrain on the full long-tailed set, fine-tune a
head-class expert on the head-dominant subset, then transfer knowledge to the
tail on the tail-dominant subset with the expert as a frozen teacher.

Multi-threshold divisions chain the last two stages: each threshold gets its
own partition and subsets, with the previous unified model as the next
starting point. Everything is deterministic given (config, seed) when torch
runs single-threaded.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import (
    CategoryPartition,
    DetectionDataset,
    FrequencyGroups,
    GeneratorConfig,
    frequency_groups,
    generate_shapeworld,
    partition_head_tail,
    save_annotations,
)
from .detector import (
    TRAINABLE_ALL,
    TRAINABLE_CLASS_SPECIFIC,
    DetectorConfig,
    ShapeDetector,
    save_checkpoint,
    set_trainable,
    snapshot,
    trainable_parameters,
)
from .evaluation import average_precision, grouped_metrics, mean_over
from .inference import images_to_tensor, predict_detections
from .losses import (
    LossWeights,
    build_head_mask,
    class_distill,
    feature_distill,
    hungarian_loss,
)
from .rendering import render_image
from .replay import (
    HEAD_DOMINANT_BUDGET,
    TAIL_DOMINANT_BUDGET,
    ReplayBudget,
    ReplaySubset,
    build_head_dominant,
    build_tail_dominant,
    epoch_sampling_plan,
    save_scores,
    save_subset,
    score_instances,
    with_repeat_factors,
)

STAGE_PRETRAIN = "pretrain"
STAGE_FINETUNE = "finetune"
STAGE_TRANSFER = "transfer"


@dataclass(frozen=True)
class StageConfig:
    stage: str
    epochs: int
    lr: float
    decay_epoch: int | None = None
    decay_factor: float = 0.1
    trainable: str = TRAINABLE_ALL
    distillation: bool = False
    rfs_threshold: float | None = None
    seed: int = 0
    batch_size: int = 8
    weight_decay: float = 1e-4
    grad_clip: float = 0.1

    def __post_init__(self) -> None:
        if self.stage not in (STAGE_PRETRAIN, STAGE_FINETUNE, STAGE_TRANSFER):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.stage == STAGE_TRANSFER and (
            not self.distillation or self.trainable != TRAINABLE_CLASS_SPECIFIC
        ):
            raise ValueError("transfer stage requires distillation and class_specific_only")
        if self.rfs_threshold is not None and not 0.0 < self.rfs_threshold <= 1.0:
            raise ValueError("rfs_threshold must be in (0, 1]")


@dataclass
class RunReport:
    """Loss curves per stage plus final metrics; breakdown terms at every
    logged step sum exactly to the logged total."""

    curves: dict[str, list[dict]] = field(default_factory=dict)
    metrics: dict[str, dict] = field(default_factory=dict)
    config_fingerprint: str = ""
    wall_time_seconds: float = 0.0

    def as_dict(self) -> dict:
        return {
            "config_fingerprint": self.config_fingerprint,
            "wall_time_seconds": self.wall_time_seconds,
            "metrics": self.metrics,
            "curves": self.curves,
        }


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def config_fingerprint(config_doc: dict) -> str:
    return hashlib.sha256(canonical_json(config_doc).encode()).hexdigest()


def parameter_hash(model: ShapeDetector) -> str:
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        digest.update(name.encode())
        digest.update(param.detach().numpy().tobytes())
    return digest.hexdigest()


def derive_seed(master: int, *tags: int) -> int:
    return int(np.random.SeedSequence([master, *tags]).generate_state(1)[0])


def pretrain_seed(config: "RunConfig") -> int:
    return derive_seed(config.seed, 1)


def finetune_seed(config: "RunConfig", step_idx: int) -> int:
    return derive_seed(config.seed, 2, step_idx)


def transfer_seed(config: "RunConfig", step_idx: int) -> int:
    return derive_seed(config.seed, 3, step_idx)


def write_curve(run_dir: Path, tag: str, records: list[dict]) -> None:
    path = run_dir / "curves" / f"{tag}.jsonl"
    path.parent.mkdir(exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_curve(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def full_subset(ds: DetectionDataset) -> ReplaySubset:
    """The whole dataset viewed as a subset: every annotation valid, factors 1."""
    images = frozenset(rec.id for rec in ds.images if ds.annotations_by_image(rec.id))
    return ReplaySubset(
        dataset=ds,
        valid_annotation_ids=frozenset(a.id for a in ds.annotations),
        image_ids=images,
        repeat_factor={img: 1.0 for img in sorted(images)},
    )


class RenderCache:
    """Memoizes rendered images; rendering is deterministic so this is safe."""

    def __init__(self, ds: DetectionDataset):
        self.ds = ds
        self._cache: dict[int, np.ndarray] = {}

    def get(self, image_id: int) -> np.ndarray:
        if image_id not in self._cache:
            rec = self.ds.image_by_id(image_id)
            self._cache[image_id] = render_image(rec, self.ds.annotations_by_image(rec.id))
        return self._cache[image_id]


def _targets_for(subset: ReplaySubset, image_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Valid annotations as (labels, normalized cxcywh boxes)."""
    rec = subset.dataset.image_by_id(image_id)
    anns = subset.valid_annotations(image_id)
    labels = torch.as_tensor([a.category for a in anns], dtype=torch.long)
    if anns:
        xyxy = np.asarray([a.bbox for a in anns], dtype=np.float64)
        scale = np.array([rec.width, rec.height, rec.width, rec.height], dtype=np.float64)
        n = xyxy / scale
        boxes = np.stack(
            ((n[:, 0] + n[:, 2]) / 2, (n[:, 1] + n[:, 3]) / 2, n[:, 2] - n[:, 0], n[:, 3] - n[:, 1]),
            axis=1,
        )
        return labels, torch.from_numpy(boxes).to(torch.float32)
    return labels, torch.zeros((0, 4))


def _head_boxes_for(subset: ReplaySubset, image_id: int, head_categories) -> list:
    return [
        a.bbox for a in subset.valid_annotations(image_id) if a.category in head_categories
    ]


def train_stage(
    model: ShapeDetector,
    subset: ReplaySubset,
    cfg: StageConfig,
    weights: LossWeights = LossWeights(),
    teacher: ShapeDetector | None = None,
    head_categories: frozenset = frozenset(),
    render_cache: RenderCache | None = None,
) -> list[dict]:
    """Run one stage in place; returns the per-step loss curve records."""
    if not subset.image_ids:
        raise ValueError(f"{cfg.stage}: empty training subset")
    if cfg.distillation and teacher is None:
        raise ValueError(f"{cfg.stage}: distillation requires a teacher")
    torch.manual_seed(cfg.seed)
    set_trainable(model, cfg.trainable)
    model.train()
    params = trainable_parameters(model)
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.rfs_threshold is not None:
        subset = with_repeat_factors(subset, cfg.rfs_threshold)
    cache = render_cache or RenderCache(subset.dataset)
    grid = model.config.feature_grid
    image_hw = (model.config.image_size, model.config.image_size)

    curve: list[dict] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr * (cfg.decay_factor if cfg.decay_epoch and epoch > cfg.decay_epoch else 1.0)
        for group in optimizer.param_groups:
            group["lr"] = lr
        plan = epoch_sampling_plan(subset, [cfg.seed, epoch])
        for start in range(0, len(plan), cfg.batch_size):
            ids = plan[start : start + cfg.batch_size]
            batch = images_to_tensor([cache.get(i) for i in ids])
            out = model(batch)
            if not bool(torch.isfinite(out.class_logits).all() & torch.isfinite(out.boxes).all()):
                raise RuntimeError(
                    f"{cfg.stage}: non-finite model outputs at epoch {epoch} step {step}; "
                    "training diverged"
                )
            if cfg.distillation:
                with torch.no_grad():
                    t_out = teacher(batch)
                    p_head = t_out.class_logits.sigmoid()
                p_shared = model.classify_external_queries(t_out.query_features)

            hg_sum = out.class_logits.new_zeros(())
            fm_sum = out.class_logits.new_zeros(())
            cls_sum = out.class_logits.new_zeros(())
            for i, image_id in enumerate(ids):
                labels, boxes = _targets_for(subset, image_id)
                hg_sum = hg_sum + hungarian_loss(
                    out.class_logits[i], out.boxes[i], labels, boxes, weights
                )
                if cfg.distillation:
                    mask = build_head_mask(
                        _head_boxes_for(subset, image_id, head_categories),
                        image_hw,
                        (grid, grid),
                    )
                    fm_sum = fm_sum + feature_distill(out.features[i], t_out.features[i], mask)
                    cls_sum = cls_sum + class_distill(p_shared[i], p_head[i])

            n = len(ids)
            parts = {"hungarian": float(hg_sum.detach()) / n}
            loss = hg_sum / n
            if cfg.distillation:
                parts["feature_distill"] = float(fm_sum.detach()) / n
                parts["class_distill"] = float(cls_sum.detach()) / n
                loss = loss + weights.lambda_fm * fm_sum / n + weights.lambda_cls * cls_sum / n
                parts["total"] = (
                    parts["hungarian"]
                    + weights.lambda_fm * parts["feature_distill"]
                    + weights.lambda_cls * parts["class_distill"]
                )
            else:
                parts["total"] = parts["hungarian"]
            if not math.isfinite(parts["total"]):
                raise RuntimeError(f"{cfg.stage}: non-finite loss at epoch {epoch} step {step}")

            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            step += 1
            curve.append({"stage": cfg.stage, "epoch": epoch, "step": step, **parts})
    model.eval()
    return curve


def pretrain(
    ds: DetectionDataset,
    detector_cfg: DetectorConfig,
    cfg: StageConfig,
    weights: LossWeights = LossWeights(),
    render_cache: RenderCache | None = None,
) -> tuple[ShapeDetector, list[dict]]:
    """Train a fresh detector on the full dataset with the set-prediction loss."""
    if not ds.images:
        raise ValueError("pretrain: empty dataset")
    torch.manual_seed(derive_seed(cfg.seed, 0x1217))
    model = ShapeDetector(detector_cfg)
    curve = train_stage(model, full_subset(ds), cfg, weights, render_cache=render_cache)
    return model, curve


def finetune_head_expert(
    model: ShapeDetector,
    d_head: ReplaySubset,
    cfg: StageConfig,
    weights: LossWeights = LossWeights(),
    render_cache: RenderCache | None = None,
) -> tuple[ShapeDetector, list[dict]]:
    """Fine-tune only the class-specific parameters on the head-dominant subset.

    The input model is left untouched; the returned expert shares its
    class-agnostic parameters bit for bit.
    """
    if not d_head.image_ids:
        raise ValueError("finetune: empty head-dominant subset")
    expert = copy.deepcopy(model)
    cfg = replace(cfg, trainable=TRAINABLE_CLASS_SPECIFIC, distillation=False)
    curve = train_stage(expert, d_head, cfg, weights, render_cache=render_cache)
    return expert, curve


def knowledge_transfer(
    expert: ShapeDetector,
    d_tail: ReplaySubset,
    cfg: StageConfig,
    head_categories: frozenset,
    weights: LossWeights = LossWeights(),
    render_cache: RenderCache | None = None,
) -> tuple[ShapeDetector, list[dict]]:
    """Train a student initialized from the expert on the tail-dominant subset,
    distilling the frozen expert's features and class predictions."""
    if not d_tail.image_ids:
        raise ValueError("transfer: empty tail-dominant subset")
    teacher = snapshot(expert)
    teacher_hash = parameter_hash(teacher)
    student = copy.deepcopy(expert)
    curve = train_stage(
        student,
        d_tail,
        cfg,
        weights,
        teacher=teacher,
        head_categories=head_categories,
        render_cache=render_cache,
    )
    if parameter_hash(teacher) != teacher_hash or parameter_hash(expert) != teacher_hash:
        raise RuntimeError("transfer: teacher parameters changed during the stage")
    return student, curve


def evaluate_model(
    model: ShapeDetector,
    ds: DetectionDataset,
    groups: FrequencyGroups,
    partition: CategoryPartition,
    score_threshold: float = 0.05,
) -> dict:
    """Detection metrics on a dataset: overall, frequency groups, head/tail split."""
    dets = predict_detections(model, ds, score_threshold=score_threshold)
    per_cat = average_precision(dets, ds)
    table = grouped_metrics(per_cat, groups)
    doc = table.as_dict()
    doc["ap_head"] = mean_over(per_cat, partition.head)
    doc["ap_tail"] = mean_over(per_cat, partition.tail)
    doc["num_images"] = len(ds.images)
    doc["score_threshold"] = score_threshold
    return doc


@dataclass(frozen=True)
class RunConfig:
    """Everything a full run needs; serialized verbatim into the run directory."""

    name: str
    seed: int
    train_data: GeneratorConfig
    val_data: GeneratorConfig
    detector: DetectorConfig
    pretrain_cfg: StageConfig
    finetune_cfg: StageConfig
    transfer_cfg: StageConfig
    divisions: tuple[int, ...] = (30,)
    head_budget: ReplayBudget = HEAD_DOMINANT_BUDGET
    tail_budget: ReplayBudget = TAIL_DOMINANT_BUDGET
    weights: LossWeights = LossWeights()
    group_thresholds: tuple[int, int] = (10, 100)
    eval_score_threshold: float = 0.05
    single_threaded: bool = True

    def __post_init__(self) -> None:
        if not self.divisions:
            raise ValueError("divisions must name at least one threshold")
        if len(set(self.divisions)) != len(self.divisions):
            raise ValueError("division thresholds must be distinct")

    def to_dict(self) -> dict:
        return asdict(self)


def run_config_from_dict(doc: dict) -> RunConfig:
    def generator(d):
        return GeneratorConfig(**d)

    det = dict(doc["detector"])
    det["backbone_channels"] = tuple(det["backbone_channels"])
    return RunConfig(
        name=doc["name"],
        seed=doc["seed"],
        train_data=generator(doc["train_data"]),
        val_data=generator(doc["val_data"]),
        detector=DetectorConfig(**det),
        pretrain_cfg=StageConfig(**doc["pretrain_cfg"]),
        finetune_cfg=StageConfig(**doc["finetune_cfg"]),
        transfer_cfg=StageConfig(**doc["transfer_cfg"]),
        divisions=tuple(doc["divisions"]),
        head_budget=ReplayBudget(**doc["head_budget"]),
        tail_budget=ReplayBudget(**doc["tail_budget"]),
        weights=LossWeights(**doc["weights"]),
        group_thresholds=tuple(doc["group_thresholds"]),
        eval_score_threshold=doc["eval_score_threshold"],
        single_threaded=doc["single_threaded"],
    )


def prepare_run_dir(config: RunConfig, run_dir: Path) -> None:
    """Create the run directory and freeze the config snapshot; a pre-existing
    snapshot must match exactly."""
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot_text = canonical_json(config.to_dict())
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        if cfg_path.read_text() != snapshot_text:
            raise RuntimeError(f"{cfg_path} exists with a different config; refusing to overwrite")
    else:
        cfg_path.write_text(snapshot_text)
    for sub in ("data", "subsets", "checkpoints", "metrics"):
        (run_dir / sub).mkdir(exist_ok=True)


def run_stepwise(config: RunConfig, run_dir: Path) -> tuple[ShapeDetector, RunReport]:
    """Full chain: generate data, pretrain, score, build subsets, then
    finetune + transfer per division threshold (largest first). Every
    intermediate artifact lands under `run_dir`."""
    start = time.monotonic()
    if config.single_threaded:
        torch.set_num_threads(1)
    run_dir = Path(run_dir)
    prepare_run_dir(config, run_dir)
    report = RunReport(config_fingerprint=config_fingerprint(config.to_dict()))

    train_ds = generate_shapeworld(config.train_data)
    val_ds = generate_shapeworld(config.val_data)
    save_annotations(train_ds, run_dir / "data" / "train.json")
    save_annotations(val_ds, run_dir / "data" / "val.json")
    groups = frequency_groups(train_ds, config.group_thresholds)
    final_partition = partition_head_tail(train_ds, min(config.divisions))

    def evaluate_and_save(model, tag):
        doc = evaluate_model(
            model, val_ds, groups, final_partition, config.eval_score_threshold
        )
        doc["checkpoint"] = tag
        (run_dir / "metrics" / f"{tag}.json").write_text(canonical_json(doc))
        report.metrics[tag] = doc

    cache = RenderCache(train_ds)
    pre_cfg = replace(config.pretrain_cfg, seed=pretrain_seed(config))
    model, curve = pretrain(train_ds, config.detector, pre_cfg, config.weights, cache)
    report.curves[STAGE_PRETRAIN] = curve
    write_curve(run_dir, "pretrain", curve)
    save_checkpoint(model, run_dir / "checkpoints" / "pretrain.pt")
    evaluate_and_save(model, "pretrain")

    scored = score_instances(model, train_ds)
    save_scores(scored, run_dir / "scores.jsonl")

    current = model
    for step_idx, threshold in enumerate(sorted(config.divisions, reverse=True), 1):
        partition = partition_head_tail(train_ds, threshold)
        d_head = build_head_dominant(train_ds, scored, partition, config.head_budget)
        d_tail = build_tail_dominant(train_ds, scored, partition, config.tail_budget)
        save_subset(d_head, run_dir / "subsets" / f"head_m{threshold}.json", "data/train.json")
        save_subset(d_tail, run_dir / "subsets" / f"tail_m{threshold}.json", "data/train.json")

        ft_cfg = replace(config.finetune_cfg, seed=finetune_seed(config, step_idx))
        expert, ft_curve = finetune_head_expert(current, d_head, ft_cfg, config.weights, cache)
        report.curves[f"finetune_m{threshold}"] = ft_curve
        write_curve(run_dir, f"finetune_m{threshold}", ft_curve)
        save_checkpoint(expert, run_dir / "checkpoints" / f"expert_m{threshold}.pt")
        evaluate_and_save(expert, f"expert_m{threshold}")

        kt_cfg = replace(config.transfer_cfg, seed=transfer_seed(config, step_idx))
        unified, kt_curve = knowledge_transfer(
            expert, d_tail, kt_cfg, frozenset(partition.head), config.weights, cache
        )
        report.curves[f"transfer_m{threshold}"] = kt_curve
        write_curve(run_dir, f"transfer_m{threshold}", kt_curve)
        save_checkpoint(unified, run_dir / "checkpoints" / f"unified_m{threshold}.pt")
        evaluate_and_save(unified, f"unified_m{threshold}")
        current = unified

    report.wall_time_seconds = time.monotonic() - start
    (run_dir / "report.json").write_text(canonical_json(report.as_dict()))
    return current, report
