"""Multi-stage training with system-grouped cross-validation.

Per fold: spectrogram-only predictor (spec-s1); SSL-only predictor with a
frozen then unfrozen backbone (ssl-s1-frozen, ssl-s1-finetune); both
extractors reused under a fresh domain table and fusion head that is
trained alone (s2-fusion); then everything at a small learning rate
(s3-finetune). Each stage keeps the epoch with the best validation score.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader

from .data import UtteranceDataset, WaveformStore, collate
from .fusion import DomainTable, MOSPredictor, build_model, load_checkpoint, save_checkpoint
from .ingest import Manifest
from .metrics import UndefinedCorrelationError, srcc
from .objective import LossConfig, combined_loss, draw_mixup, mix_with
from .utils import config_hash, derive_seed, seeded

logger = logging.getLogger(__name__)

STAGES = ("spec-s1", "ssl-s1-frozen", "ssl-s1-finetune", "s2-fusion", "s3-finetune")
FROZEN_BY_STAGE: Dict[str, Tuple[str, ...]] = {
    "spec-s1": (),
    "ssl-s1-frozen": ("ssl_backbone",),
    "ssl-s1-finetune": (),
    "s2-fusion": ("spec_extractor", "ssl_extractor"),
    "s3-finetune": (),
}
# Ablation plans reuse s3 semantics.
STAGE_KIND = {"s3-no-stage2": "s3-finetune", "s3-only-stage3": "s3-finetune"}
ARMS = ("full", "no-ssl", "no-spec", "no-stage2", "only-stage3")


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    pass


@dataclass(frozen=True)
class StagePlan:
    stage: str
    lr_start: float
    lr_end: float
    epochs: int
    batch_size: int
    frozen_params: Tuple[str, ...] = ()
    max_steps: Optional[int] = None

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError(f"{self.stage}: need lr_start >= lr_end > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"{self.stage}: epochs and batch_size must be >= 1")

    @classmethod
    def from_config(cls, name: str, cfg) -> "StagePlan":
        plan = cfg.stages[name]
        kind = STAGE_KIND.get(name, name)
        return cls(
            stage=name,
            lr_start=plan.lr_start,
            lr_end=plan.lr_end,
            epochs=plan.epochs,
            batch_size=plan.batch_size,
            frozen_params=FROZEN_BY_STAGE[kind],
            max_steps=plan.max_steps,
        )


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    steps: int
    train_loss: float
    lr: float
    val_score: Optional[float] = None
    val_detail: dict = field(default_factory=dict)


@dataclass
class TrainHistory:
    stage: str
    records: List[EpochRecord] = field(default_factory=list)
    first_step_loss: Optional[float] = None
    best_epoch: Optional[int] = None
    best_score: Optional[float] = None

    def to_lines(self) -> List[str]:
        return [json.dumps(asdict(r), sort_keys=True) for r in self.records]


@dataclass
class FoldSplit:
    k: int
    assignments: Dict[Tuple[str, str], int]
    seed: int

    def fold_of(self, dataset_id: str, system_id: str) -> int:
        return self.assignments[(dataset_id, system_id)]

    def split(self, manifest: Manifest, fold: int) -> Tuple[Manifest, Manifest]:
        train = manifest.subset(lambda lab: self.fold_of(lab.dataset_id, lab.system_id) != fold)
        val = manifest.subset(lambda lab: self.fold_of(lab.dataset_id, lab.system_id) == fold)
        return train, val


def make_folds(manifest: Manifest, k: int = 5, seed: int = 0) -> FoldSplit:
    """Partition (dataset, system) groups into k folds, dealt round-robin per dataset.

    The deal position carries over between datasets so small datasets do
    not all land in the first folds.
    """
    if k < 2:
        raise ValueError("need k >= 2 folds")
    rng = np.random.default_rng(seed)
    by_ds: Dict[str, List[str]] = {}
    for ds, sys_id in manifest.systems():
        by_ds.setdefault(ds, []).append(sys_id)
    assignments: Dict[Tuple[str, str], int] = {}
    cursor = 0
    for ds in sorted(by_ds):
        systems = sorted(by_ds[ds])
        if len(systems) < 2 * k:
            warnings.warn(
                f"dataset {ds} has {len(systems)} systems; some of the {k} validation folds "
                "will hold fewer than 2 of its systems",
                stacklevel=2,
            )
        for i, j in enumerate(rng.permutation(len(systems))):
            assignments[(ds, systems[j])] = (cursor + i) % k
        cursor += len(systems)
    used = set(assignments.values())
    if len(used) < k:
        raise ValueError(f"only {len(assignments)} systems; cannot fill {k} folds")
    return FoldSplit(k, assignments, seed)


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_end + 0.5 * (lr_start - lr_end) * (1 + math.cos(math.pi * step / total_steps))


@torch.no_grad()
def predict_dataset(model: MOSPredictor, data: UtteranceDataset, batch_size: int = 16) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for batch in DataLoader(data, batch_size=batch_size, shuffle=False, collate_fn=collate):
        out.append(model(batch).double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def validation_score(model: MOSPredictor, data: UtteranceDataset) -> Tuple[Optional[float], dict]:
    """Mean over datasets of system-level SRCC; falls back to utterance SRCC.

    Returns ``(None, detail)`` when no correlation is defined.
    """
    preds = predict_dataset(model, data)
    truths = np.array([lab.mos for lab in data.labels])
    per_ds: Dict[str, float] = {}
    by_ds: Dict[str, Dict[str, List[int]]] = {}
    for i, lab in enumerate(data.labels):
        by_ds.setdefault(lab.dataset_id, {}).setdefault(lab.system_id, []).append(i)
    for ds, systems in sorted(by_ds.items()):
        if len(systems) < 2:
            continue
        p = [preds[idx].mean() for idx in systems.values()]
        t = [truths[idx].mean() for idx in systems.values()]
        try:
            per_ds[ds] = srcc(p, t)
        except UndefinedCorrelationError:
            pass
    if per_ds:
        return float(np.mean(list(per_ds.values()))), {"level": "system", "per_dataset": per_ds}
    try:
        return srcc(preds, truths), {"level": "utterance"}
    except UndefinedCorrelationError:
        return None, {"level": "undefined"}


def _set_frozen(model: MOSPredictor, frozen: Sequence[str]) -> List[torch.nn.Module]:
    groups = model.param_groups()
    missing = [g for g in frozen if g not in groups]
    if missing:
        raise TrainingError(f"frozen groups {missing} not in model (has {sorted(groups)})")
    frozen_ids = {id(p) for g in frozen for p in groups[g]}
    for p in model.parameters():
        p.requires_grad_(id(p) not in frozen_ids)
    return [m for g in frozen for m in model.group_modules(g) if m is not None]


def run_stage(
    model: MOSPredictor,
    plan: StagePlan,
    data: UtteranceDataset,
    loss_cfg: LossConfig,
    seed: int,
    val_data: Optional[UtteranceDataset] = None,
    weight_decay: float = 1e-4,
    num_workers: int = 0,
    select_best: bool = True,
) -> Tuple[MOSPredictor, TrainHistory]:
    """Train the non-frozen parameters of ``model`` for one stage (in place)."""
    if len(data) == 0:
        raise TrainingError(f"{plan.stage}: empty training data")
    frozen_modules = _set_frozen(model, plan.frozen_params)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=plan.lr_start, weight_decay=weight_decay)
    total = plan.epochs * math.ceil(len(data) / plan.batch_size)
    if plan.max_steps is not None:
        total = min(total, plan.max_steps)
    rng = np.random.default_rng(derive_seed(seed, plan.stage, "mixup"))
    history = TrainHistory(plan.stage)
    best_state = None
    step = 0
    try:
        for epoch in range(plan.epochs):
            model.train()
            for m in frozen_modules:
                m.eval()
            data.set_epoch(epoch)
            loader = DataLoader(
                data,
                batch_size=plan.batch_size,
                shuffle=True,
                generator=torch.Generator().manual_seed(derive_seed(seed, plan.stage, epoch)),
                collate_fn=collate,
                num_workers=num_workers,
            )
            losses = []
            lr = plan.lr_start
            for batch in loader:
                if step >= total:
                    break
                lr = cosine_lr(step, total, plan.lr_start, plan.lr_end)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                target = batch["target"]
                mix = None
                if len(target) >= 2 and loss_cfg.mixup_alpha > 0:
                    mix = draw_mixup(len(target), loss_cfg.mixup_alpha, rng)
                    target = mix_with(target, *mix)
                pred = model(batch, mix)
                loss = combined_loss(target, pred, loss_cfg)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"{plan.stage}: non-finite loss at epoch {epoch} step {step}; "
                        f"batch items {[data.labels[i].utterance_id for i in batch['index'].tolist()]}"
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                if history.first_step_loss is None:
                    history.first_step_loss = loss.item()
                losses.append(loss.item())
                step += 1
            record = EpochRecord(plan.stage, epoch, step, float(np.mean(losses)) if losses else float("nan"), lr)
            if val_data is not None and len(val_data):
                record.val_score, record.val_detail = validation_score(model, val_data)
            history.records.append(record)
            score = record.val_score
            if score is not None and (history.best_score is None or score > history.best_score):
                history.best_score, history.best_epoch = score, epoch
                if select_best:
                    best_state = copy.deepcopy(model.state_dict())
            logger.info("%s epoch %d loss %.4f val %s", plan.stage, epoch, record.train_loss, score)
            if step >= total:
                break
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    if best_state is not None:
        model.load_state_dict(best_state)
    elif history.records:
        history.best_epoch = history.records[-1].epoch
    model.eval()
    return model, history


@dataclass
class TrainResult:
    models: List[MOSPredictor]
    checkpoints: List[str]
    histories: List[Dict[str, TrainHistory]]
    report: dict


def _train_fold(cfg, manifest: Manifest, split: FoldSplit, fold: int, arm: str, seed: int, store: WaveformStore):
    vocab = manifest.domain_vocabulary
    loss_cfg = cfg.loss.build()
    fold_seed = derive_seed(seed, "fold", fold)
    train_m, val_m = split.split(manifest, fold)
    min_ssl = _min_ssl_samples(cfg)

    def dataset(m: Manifest) -> UtteranceDataset:
        return UtteranceDataset(m.labels, cfg.audio, vocab, fold_seed, store, min_ssl, cfg.model.ssl.input)

    train_ds, val_ds = dataset(train_m), dataset(val_m)
    histories: Dict[str, TrainHistory] = {}

    def stage(model, name):
        plan = StagePlan.from_config(name, cfg)
        _, hist = run_stage(
            model, plan, train_ds, loss_cfg, derive_seed(fold_seed, name), val_ds, cfg.weight_decay, cfg.num_workers
        )
        histories[name] = hist
        return model

    spec_model = ssl_model = None
    if arm != "only-stage3":
        if arm != "no-spec":
            spec_model = stage(build_model(cfg, vocab, ["spec"], seed=derive_seed(fold_seed, "spec")), "spec-s1")
        if arm != "no-ssl":
            ssl_model = build_model(cfg, vocab, ["ssl"], seed=derive_seed(fold_seed, "ssl"))
            stage(ssl_model, "ssl-s1-frozen")
            stage(ssl_model, "ssl-s1-finetune")
    if arm == "no-ssl":
        final = spec_model
    elif arm == "no-spec":
        final = ssl_model
    elif arm == "only-stage3":
        final = stage(build_model(cfg, vocab, ["spec", "ssl"], seed=derive_seed(fold_seed, "joint")), "s3-only-stage3")
    else:
        final = build_model(
            cfg, vocab, ["spec", "ssl"], derive_seed(fold_seed, "fusion"), spec=spec_model.spec, ssl=ssl_model.ssl
        )
        if arm == "no-stage2":
            stage(final, "s3-no-stage2")
        else:
            stage(final, "s2-fusion")
            stage(final, "s3-finetune")
    return final, histories


def _min_ssl_samples(cfg) -> int:
    if cfg.model.ssl.type == "tiny":
        return cfg.model.ssl.kernel
    return 400


def _selection_report(histories: List[Dict[str, TrainHistory]]) -> dict:
    return {
        "folds": [
            {
                name: {
                    "best_epoch": h.best_epoch,
                    "best_score": h.best_score,
                    "first_step_loss": h.first_step_loss,
                    "scores": [r.val_score for r in h.records],
                }
                for name, h in fold_hist.items()
            }
            for fold_hist in histories
        ]
    }


def train_full(
    manifest: Manifest,
    cfg,
    seed: Optional[int] = None,
    arm: str = "full",
    out_dir: Optional[Path] = None,
    store: Optional[WaveformStore] = None,
) -> TrainResult:
    """Cross-validated multi-stage training; one model (and checkpoint) per fold."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; known: {ARMS}")
    if len(manifest) == 0:
        raise TrainingError("empty manifest")
    seed = cfg.seed if seed is None else seed
    store = store or WaveformStore(cfg.audio.sample_rate)
    split = make_folds(manifest, cfg.folds, seed)
    models, paths, histories = [], [], []
    for fold in range(cfg.folds):
        logger.info("fold %d/%d (%s)", fold + 1, cfg.folds, arm)
        model, hist = _train_fold(cfg, manifest, split, fold, arm, seed, store)
        models.append(model)
        histories.append(hist)
        if out_dir is not None:
            out_dir = Path(out_dir)
            path = out_dir / "checkpoints" / f"fold_{fold}.pt"
            save_checkpoint(model, path, cfg, {"fold": fold, "arm": arm, "seed": seed})
            paths.append(str(path))
            hist_path = out_dir / "history" / f"fold_{fold}.jsonl"
            hist_path.parent.mkdir(parents=True, exist_ok=True)
            hist_path.write_text("".join(line + "\n" for h in hist.values() for line in h.to_lines()))
    report = _selection_report(histories)
    report["arm"] = arm
    report["config_hash"] = config_hash(cfg.snapshot())
    report["fold_assignments"] = {f"{d}/{s}": f for (d, s), f in sorted(split.assignments.items())}
    if out_dir is not None:
        (Path(out_dir) / "history" / "selection.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return TrainResult(models, paths, histories, report)


def continue_training(
    checkpoints: Sequence[str],
    manifest: Manifest,
    cfg,
    stage: str = "s3-finetune",
    seed: Optional[int] = None,
    out_dir: Optional[Path] = None,
) -> TrainResult:
    """Sequential fine-tuning: run one more stage of every fold model on a new manifest.

    With domain encoding on and a different dataset vocabulary, the domain
    table is replaced by a fresh one for the new vocabulary.
    """
    seed = cfg.seed if seed is None else seed
    split = make_folds(manifest, len(checkpoints), seed)
    store = WaveformStore(cfg.audio.sample_rate)
    loss_cfg = cfg.loss.build()
    models, paths, histories = [], [], []
    for fold, ckpt in enumerate(checkpoints):
        model, _, _ = load_checkpoint(ckpt)
        if model.domain is not None and model.domain.vocabulary != manifest.domain_vocabulary:
            with seeded(derive_seed(seed, "domain", fold)):
                model.domain = DomainTable(manifest.domain_vocabulary, model.domain.dim)
        vocab = model.domain.vocabulary if model.domain is not None else None
        fold_seed = derive_seed(seed, "fold", fold)
        train_m, val_m = split.split(manifest, fold)
        ds = lambda m: UtteranceDataset(
            m.labels, cfg.audio, vocab, fold_seed, store, _min_ssl_samples(cfg), cfg.model.ssl.input
        )
        _, hist = run_stage(
            model, StagePlan.from_config(stage, cfg), ds(train_m), loss_cfg,
            derive_seed(fold_seed, stage), ds(val_m), cfg.weight_decay, cfg.num_workers,
        )
        models.append(model)
        histories.append({stage: hist})
        if out_dir is not None:
            path = Path(out_dir) / "checkpoints" / f"fold_{fold}.pt"
            save_checkpoint(model, path, cfg, {"fold": fold, "continued_from": str(ckpt)})
            paths.append(str(path))
    return TrainResult(models, paths, histories, _selection_report(histories))
