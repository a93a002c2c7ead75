"""Training loop: identity-balanced batches, warmup plus step-decay learning
rate, Adam with batch-norm parameters excluded from weight decay, per-step TSV
logging, and checkpoint/resume.

All randomness is derived from the run seed. Batch composition reseeds per
epoch and augmentation reseeds per sample slot, so an interrupted run resumed
from a checkpoint replays the exact remaining schedule.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from .datamodel import DatasetIndex, load_sample
from .errors import ConfigurationError, TrainingAborted, ValidationError
from .losses import LossConfig, LossReport, total_loss
from .network import (TriStreamNet, build_model, load_checkpoint,
                      restore_optimizer, save_checkpoint)
from .preprocess import AugmentConfig, augment, build_part_masks, erase_clothing

# rng stream tags; synthetic data generation uses 1..3
_TAG_SAMPLER = 4
_TAG_AUGMENT = 5

LOG_FILENAME = "train_log.tsv"
FINAL_CHECKPOINT = "checkpoint_final.npz"


@dataclass
class TrainConfig:
    epochs: int = 150
    ids_per_batch: int = 4        # P
    images_per_id: int = 8        # K
    base_lr: float = 3.5e-4
    warmup_start_lr: float = 3.5e-6
    warmup_epochs: int = 10
    decay_epochs: tuple = (40, 80)
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    seed: int = 0
    checkpoint_every: int = 0     # 0: final checkpoint only

    def validate(self):
        if self.epochs <= 0:
            raise ConfigurationError("epochs must be positive")
        if self.ids_per_batch < 2:
            raise ConfigurationError("need at least 2 identities per batch for triplets")
        if self.images_per_id < 2:
            raise ConfigurationError("need at least 2 images per identity for triplets")
        if self.base_lr <= 0 or self.warmup_start_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.warmup_epochs < 0 or self.checkpoint_every < 0:
            raise ConfigurationError("warmup_epochs and checkpoint_every must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError("decay_factor must be in (0, 1]")
        if self.decay_epochs and self.warmup_epochs > min(self.decay_epochs):
            raise ConfigurationError("warmup must finish before the first decay epoch")
        return self


def lr_at(epoch, cfg: TrainConfig):
    """Learning rate for a zero-indexed epoch.

    Linear ramp from warmup_start_lr to base_lr across the warmup epochs
    (the last warmup epoch runs at base_lr), then a multiplicative drop at
    each decay epoch.
    """
    if epoch < cfg.warmup_epochs:
        span = max(cfg.warmup_epochs - 1, 1)
        frac = epoch / span if cfg.warmup_epochs > 1 else 1.0
        return cfg.warmup_start_lr + frac * (cfg.base_lr - cfg.warmup_start_lr)
    lr = cfg.base_lr
    for boundary in cfg.decay_epochs:
        if epoch >= boundary:
            lr *= cfg.decay_factor
    return lr


def pk_sample(entries_by_person, ids_per_batch, images_per_id, rng):
    """Identity-balanced batches for one epoch.

    Identities are shuffled and chunked into groups of P; each contributes K
    entries, drawn without replacement when it has enough images and with
    replacement otherwise. A trailing group with a single identity is dropped
    because it cannot form triplets.
    """
    pids = sorted(entries_by_person)
    if len(pids) < ids_per_batch:
        raise ConfigurationError(
            f"need at least {ids_per_batch} identities for P={ids_per_batch} sampling, got {len(pids)}")
    order = [pids[i] for i in rng.permutation(len(pids))]
    batches = []
    for i in range(0, len(order), ids_per_batch):
        group = order[i:i + ids_per_batch]
        if len(group) < 2:
            break
        batch = []
        for pid in group:
            pool = entries_by_person[pid]
            replace = len(pool) < images_per_id
            picks = rng.choice(len(pool), size=images_per_id, replace=replace)
            batch.extend(pool[int(j)] for j in picks)
        batches.append(batch)
    return batches


def build_optimizer(model, cfg: TrainConfig):
    """Adam over two parameter groups: batch-norm parameters skip weight decay."""
    bn_param_ids = set()
    for m in model.modules():
        if isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            bn_param_ids.update(id(p) for p in m.parameters(recurse=False))
    decay, no_decay = [], []
    for p in model.parameters():
        (no_decay if id(p) in bn_param_ids else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.Adam(groups, lr=cfg.base_lr)


class _SampleCache:
    """Decoded train images held in memory; the erased view is precomputed
    once per entry since erasure depends only on the stored parsing map."""

    def __init__(self, index: DatasetIndex):
        self.index = index
        self._data = {}

    def get(self, entry):
        if entry not in self._data:
            sample = load_sample(self.index, entry)
            self._data[entry] = (sample, erase_clothing(sample, self.index.vocabulary))
        return self._data[entry]


def prepare_batch(cache, entries, pid_map, aug_cfg, seed, epoch, step,
                  feature_size=None, with_masks=False):
    """Augment one batch and convert it to tensors.

    Returns (raw, black, labels, part_masks or None). Images come out as
    N x 3 x H x W float32 in [0, 1]; no channel normalization is applied.
    """
    vocab = cache.index.vocabulary
    bg = min(vocab.background_labels)
    raws, blacks, masks = [], [], []
    for slot, entry in enumerate(entries):
        sample, black_full = cache.get(entry)
        rng = np.random.default_rng([seed, _TAG_AUGMENT, epoch, step, slot])
        raw, black, parsing = augment((sample.image, black_full), sample.parsing,
                                      aug_cfg, rng, background_label=bg)
        raws.append(raw)
        blacks.append(black)
        if with_masks:
            fh, fw = feature_size
            masks.append(build_part_masks(parsing, vocab, fh, fw).masks)
    to_tensor = lambda stack: torch.from_numpy(
        np.stack(stack).transpose(0, 3, 1, 2).astype(np.float32))
    labels = torch.tensor([pid_map[e.person_id] for e in entries], dtype=torch.long)
    part_masks = None
    if with_masks:
        part_masks = torch.from_numpy(np.stack(masks).astype(np.float32))
    return to_tensor(raws), to_tensor(blacks), labels, part_masks


def _dump_bad_batch(run_dir, epoch, step, raw, black, labels, entries):
    path = os.path.join(run_dir, f"nonfinite_epoch{epoch}_step{step}.npz")
    np.savez(path, raw=raw.numpy(), black=black.numpy(), labels=labels.numpy(),
             paths=np.array([e.image_path for e in entries]))
    return path


@dataclass
class TrainResult:
    model: TriStreamNet
    history: list = field(default_factory=list)   # (epoch, step, lr, LossReport)
    pid_map: dict = field(default_factory=dict)
    checkpoint_path: str = ""
    log_path: str = ""


def train(index: DatasetIndex, train_cfg: TrainConfig, loss_cfg: LossConfig,
          aug_cfg: AugmentConfig, run_dir, model_cfg=None, model=None, resume=None):
    """Train on the index's train split and write logs plus checkpoints.

    Exactly one of `model_cfg`, `model`, or `resume` decides where the model
    comes from: a fresh seeded build, a caller-supplied module, or a
    checkpoint (which also restores the optimizer and epoch counter).
    """
    train_cfg.validate()
    loss_cfg.validate()
    aug_cfg.validate()
    os.makedirs(run_dir, exist_ok=True)

    entries = index.split_entries("train")
    if not entries:
        raise ValidationError("dataset has no train entries")
    pids = index.person_ids("train")
    if len(pids) < 2:
        raise ValidationError("training needs at least two identities")
    pid_map = {pid: i for i, pid in enumerate(pids)}
    by_person = {}
    for e in entries:
        by_person.setdefault(e.person_id, []).append(e)
    for pid in by_person:
        by_person[pid].sort(key=lambda e: e.image_path)

    start_epoch = 0
    optimizer = None
    if resume is not None:
        if model is not None or model_cfg is not None:
            raise ConfigurationError("pass either a resume checkpoint or a model, not both")
        model, meta, opt_arrays = load_checkpoint(resume)
        saved_map = {int(k): v for k, v in meta.get("pid_map", {}).items()}
        if saved_map and saved_map != pid_map:
            raise ValidationError("checkpoint identity map does not match this dataset")
        start_epoch = meta["epoch"] + 1
        optimizer = restore_optimizer(build_optimizer(model, train_cfg), opt_arrays)
        if "_torch_rng" in meta:
            torch.set_rng_state(torch.from_numpy(meta["_torch_rng"]))
    elif model is None:
        if model_cfg is None:
            raise ConfigurationError("either model_cfg, model, or resume is required")
        torch.manual_seed(train_cfg.seed)
        model_cfg = dict(model_cfg)
        model_cfg["num_identities"] = len(pids)
        model_cfg.setdefault("consistency_needed", loss_cfg.consistency_active)
        model = build_model(model_cfg)
    if model.num_identities != len(pids):
        raise ConfigurationError(
            f"model classifies {model.num_identities} identities but the train "
            f"split has {len(pids)}")

    if optimizer is None:
        optimizer = build_optimizer(model, train_cfg)
    cache = _SampleCache(index)
    feature_size = model.feature_size()
    need_black = "b" in model.streams
    need_masks = loss_cfg.part_active

    log_path = os.path.join(run_dir, LOG_FILENAME)
    header = "epoch\tstep\tlr\t" + "\t".join(LossReport.COLUMNS) + "\n"
    fresh_log = start_epoch == 0 or not os.path.exists(log_path)
    log = open(log_path, "w" if fresh_log else "a")
    if fresh_log:
        log.write(header)

    def checkpoint_meta():
        return {"pid_map": {str(k): v for k, v in pid_map.items()},
                "seed": train_cfg.seed,
                "train_config": asdict(train_cfg)}

    result = TrainResult(model=model, pid_map=pid_map, log_path=log_path)
    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            lr = lr_at(epoch, train_cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            epoch_rng = np.random.default_rng([train_cfg.seed, _TAG_SAMPLER, epoch])
            batches = pk_sample(by_person, train_cfg.ids_per_batch,
                                train_cfg.images_per_id, epoch_rng)
            model.train()
            for step, batch in enumerate(batches):
                raw, black, labels, masks = prepare_batch(
                    cache, batch, pid_map, aug_cfg, train_cfg.seed, epoch, step,
                    feature_size=feature_size, with_masks=need_masks)
                outputs = model.forward_train(raw, black if need_black else None)
                loss, report = total_loss(outputs, labels, loss_cfg, part_masks=masks)
                bad = [name for name, v in zip(LossReport.COLUMNS, report.as_row())
                       if not math.isfinite(v)]
                if bad:
                    dump = _dump_bad_batch(run_dir, epoch, step, raw, black, labels, batch)
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch} step {step}: "
                        f"{', '.join(bad)}; offending batch saved to {dump}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                row = [str(epoch), str(step), f"{lr:.10g}"]
                row += [f"{v:.10g}" for v in report.as_row()]
                log.write("\t".join(row) + "\n")
                result.history.append((epoch, step, lr, report))
            log.flush()
            periodic = train_cfg.checkpoint_every
            if periodic and (epoch + 1) % periodic == 0 and epoch + 1 < train_cfg.epochs:
                path = os.path.join(run_dir, f"checkpoint_epoch{epoch:04d}.npz")
                save_checkpoint(path, model, optimizer, epoch=epoch,
                                extra_meta=checkpoint_meta())
    finally:
        log.close()

    final_path = os.path.join(run_dir, FINAL_CHECKPOINT)
    save_checkpoint(final_path, model, optimizer, epoch=train_cfg.epochs - 1,
                    extra_meta=checkpoint_meta())
    result.checkpoint_path = final_path
    return result
