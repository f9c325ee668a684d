"""Two-stage trainer: caption pretraining, then joint caption+mask training.

Stage one optimizes the caption losses (bit regression + word
cross-entropy) plus the graph-adaptor losses and stops early once the
validation caption loss plateaus.  Stage two adds mask prediction and
the mask/word alignment loss; for the first ``warmup_epochs`` joint
epochs the alignment term pools ground-truth masks over the pixel
embedding, after which it switches to the predicted-query embeddings
(the switch is recorded in the run log).

Every epoch appends one JSON line per split to ``run_log.jsonl``,
checkpoints carry the config hash, parameters, optimizer state, epoch
counter, and RNG state, and resuming from a checkpoint reproduces the
uninterrupted run exactly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass

import torch

from .config import TrainConfig, config_hash
from .data import Sample, generate_dataset
from .errors import InputError, TrainingError
from .model import Batch, PreparedSample, ShapeCapModel, collate, prepare_sample

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# fixed offsets deriving independent RNG streams from the run seed
_SHUFFLE_SEED_STRIDE = 1_000_003
_EVAL_SEED_OFFSET = 777_777

__all__ = [
    "TrainResult",
    "build_model",
    "total_loss",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "load_model",
    "prepare_many",
]


@dataclass
class TrainResult:
    checkpoint_path: str
    run_log_path: str
    epochs_run: int
    final_val: dict


def build_model(cfg: TrainConfig) -> ShapeCapModel:
    """Construct the model with parameter init seeded by ``cfg.seed``."""
    torch.manual_seed(cfg.seed)
    return ShapeCapModel(
        dim=cfg.dim,
        heads=cfg.heads,
        depth=cfg.depth,
        enc_channels=cfg.enc_channels,
        d_joint=cfg.d_joint,
        steps=cfg.steps,
        theta=cfg.theta,
        filtering=cfg.filtering,
        ranking=cfg.ranking,
        cross_attention=cfg.cross_attention,
    )


def total_loss(losses: dict, cfg: TrainConfig, stage: str) -> torch.Tensor:
    """Combine component losses for the given stage.

    Caption stage: caption + lambda1 * graph-adaptor terms; a supplied
    mask term is ignored (and logged), never summed.  Joint stage adds
    the mask term and lambda2 times the alignment term, honouring the
    loss switches.  Any non-finite component aborts with an error that
    names the offending component.
    """
    if stage not in ("caption", "joint"):
        raise InputError(f"unknown stage {stage!r}")
    used: list[tuple[str, torch.Tensor, float]] = [("sg", losses["sg"], cfg.lambda1)]
    if stage == "caption":
        if "mask" in losses:
            log.info("caption stage: ignoring supplied mask loss")
        used.append(("caption", losses["caption"], 1.0))
    else:
        if cfg.loss_caption:
            used.append(("caption", losses["caption"], 1.0))
        if cfg.loss_mask:
            used.append(("mask", losses["mask"], 1.0))
            used.append(("mec", losses["mec"], cfg.lambda2))
    total = None
    for name, value, weight in used:
        if not bool(torch.isfinite(value)):
            raise TrainingError(f"non-finite loss component {name!r}: {float(value)}")
        if weight == 0.0:
            # a zero-weighted term is dropped outright so the parameters it
            # alone touches keep grad=None and the optimizer skips them
            continue
        term = weight * value if weight != 1.0 else value
        total = term if total is None else total + term
    if total is None:
        raise TrainingError("no active loss terms for this stage and config")
    return total


def prepare_many(samples: list[Sample]) -> list[PreparedSample]:
    return [prepare_sample(s) for s in samples]


def _epoch_shuffle(n: int, seed: int, epoch: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed * _SHUFFLE_SEED_STRIDE + epoch)
    return torch.randperm(n, generator=gen)


def _planned_epochs(cfg: TrainConfig) -> int:
    total = 0
    if cfg.loss_caption:
        total += cfg.epochs_stage1
    if cfg.loss_mask:
        total += cfg.epochs_stage2
    return max(total, 1)


def _cosine_lr(cfg: TrainConfig, epoch_index: int) -> float:
    """Learning rate for the given global epoch: cosine decay toward zero.

    A pure function of the epoch index and the planned epoch budget, so a
    resumed run applies exactly the same rates as an uninterrupted one
    without any scheduler state in the checkpoint.
    """
    progress = min(epoch_index, _planned_epochs(cfg)) / _planned_epochs(cfg)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _batches(prepared: list[PreparedSample], order: torch.Tensor, size: int):
    for start in range(0, len(prepared), size):
        idx = order[start : start + size].tolist()
        yield collate([prepared[i] for i in idx])


def _accumulate(sums: dict, counts: dict, losses: dict) -> None:
    for name, value in losses.items():
        val = float(value.detach()) if torch.is_tensor(value) else float(value)
        sums[name] = sums.get(name, 0.0) + val
        counts[name] = counts.get(name, 0) + 1


def _averages(sums: dict, counts: dict) -> dict:
    return {name: sums[name] / counts[name] for name in sums}


def _check_divergence(total: torch.Tensor, losses: dict, cfg: TrainConfig, where: str) -> None:
    value = float(total.detach())
    if math.isfinite(value) and value <= cfg.divergence_threshold:
        return
    parts = {
        k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in losses.items()
    }
    raise TrainingError(
        f"diverged at {where}: total loss {value:.6g} exceeds "
        f"{cfg.divergence_threshold:.6g}; components: {parts}"
    )


def save_checkpoint(
    path: str,
    model: ShapeCapModel,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    *,
    epoch: int,
    stage: str,
    stage_epoch: int,
    rng_state: torch.Tensor,
    best_val: float,
    patience_left: int,
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(cfg),
        "config_hash": config_hash(cfg),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "epoch": epoch,
        "stage": stage,
        "stage_epoch": stage_epoch,
        "rng_state": rng_state,
        "best_val": best_val,
        "patience_left": patience_left,
    }
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InputError(
            f"checkpoint version {payload.get('version')!r} is not supported"
        )
    return payload


def load_model(path: str) -> tuple[ShapeCapModel, TrainConfig]:
    """Rebuild a model plus its config from a checkpoint file."""
    payload = load_checkpoint(path)
    cfg = TrainConfig(**payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg


@torch.no_grad()
def _validate(
    model: ShapeCapModel,
    prepared: list[PreparedSample],
    cfg: TrainConfig,
    *,
    joint: bool,
    gt_mask_warmup: bool,
) -> dict:
    """Average validation losses with a fixed noise draw.

    The evaluation generator is re-seeded identically every call, so
    validation losses are comparable across epochs: changes reflect the
    parameters, not the noise.
    """
    model.eval()
    gen = torch.Generator().manual_seed(cfg.seed + _EVAL_SEED_OFFSET)
    sums: dict = {}
    counts: dict = {}
    order = torch.arange(len(prepared))
    for batch in _batches(prepared, order, cfg.batch_size):
        losses = model.forward_train(
            batch,
            joint=joint,
            gt_mask_warmup=gt_mask_warmup,
            strict_infonce=cfg.strict_infonce,
            generator=gen,
        )
        _accumulate(sums, counts, losses)
    model.train()
    return _averages(sums, counts)


def _log_line(fh, record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()


def train(
    cfg: TrainConfig,
    train_samples: list[Sample] | None = None,
    val_samples: list[Sample] | None = None,
    out_dir: str = "runs/default",
    resume_from: str | None = None,
    stop_after_epochs: int | None = None,
) -> TrainResult:
    """Run the full two-stage schedule, returning the final checkpoint.

    When sample lists are omitted they are generated from ``cfg.seed``
    (training split) and ``cfg.seed + 1`` (validation split).
    ``stop_after_epochs`` interrupts the run cleanly after that many
    global epochs; resuming from the saved checkpoint with the same
    config reproduces the uninterrupted run exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    run_log_path = os.path.join(out_dir, "run_log.jsonl")
    ckpt_path = os.path.join(out_dir, "checkpoint.pt")

    if train_samples is None:
        train_samples = generate_dataset(cfg.seed, cfg.dataset_size)
    if val_samples is None:
        val_samples = generate_dataset(cfg.seed + 1, cfg.eval_size)
    if not train_samples or not val_samples:
        raise InputError("training and validation splits must be non-empty")

    prepared_train = prepare_many(train_samples)
    prepared_val = prepare_many(val_samples)

    model = build_model(cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    noise_gen = torch.Generator().manual_seed(cfg.seed)

    epoch = 0
    stage = "caption"
    stage_epoch = 0
    best_val = math.inf
    patience_left = cfg.plateau_patience
    if not cfg.loss_caption:
        # mask-only training has no caption signal to pretrain on
        stage = "joint"

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["config_hash"] != config_hash(cfg):
            raise InputError(
                "checkpoint was trained with a different config "
                f"({payload['config_hash']} != {config_hash(cfg)})"
            )
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        noise_gen.set_state(payload["rng_state"])
        epoch = payload["epoch"]
        stage = payload["stage"]
        stage_epoch = payload["stage_epoch"]
        best_val = payload["best_val"]
        patience_left = payload["patience_left"]
        log.info("resumed from %s at epoch %d (%s)", resume_from, epoch, stage)

    model.train()
    mode = "a" if resume_from is not None else "w"
    final_val: dict = {}
    with open(run_log_path, mode, encoding="utf-8") as run_log:

        def should_stop() -> bool:
            return stop_after_epochs is not None and epoch >= stop_after_epochs

        def save_latest() -> None:
            save_checkpoint(
                ckpt_path, model, optimizer, cfg,
                epoch=epoch, stage=stage, stage_epoch=stage_epoch,
                rng_state=noise_gen.get_state(),
                best_val=best_val, patience_left=patience_left,
            )

        def run_epoch(joint: bool, gt_mask_warmup: bool) -> dict:
            nonlocal epoch
            lr_now = _cosine_lr(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr_now
            sums: dict = {}
            counts: dict = {}
            order = _epoch_shuffle(len(prepared_train), cfg.seed, epoch)
            for batch in _batches(prepared_train, order, cfg.batch_size):
                losses = model.forward_train(
                    batch,
                    joint=joint,
                    gt_mask_warmup=gt_mask_warmup,
                    strict_infonce=cfg.strict_infonce,
                    generator=noise_gen,
                )
                loss = total_loss(losses, cfg, "joint" if joint else "caption")
                _check_divergence(loss, losses, cfg, f"epoch {epoch + 1}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                _accumulate(sums, counts, losses)
                _accumulate(sums, counts, {"total": float(loss.detach())})
            epoch += 1
            return _averages(sums, counts)

        def log_epoch(train_avg: dict, val_avg: dict, *, mask_source: str | None) -> None:
            base = {"epoch": epoch, "stage": stage, "lr": optimizer.param_groups[0]["lr"]}
            if mask_source is not None:
                base["mask_source"] = mask_source
            _log_line(run_log, {**base, "split": "train", "losses": train_avg})
            _log_line(run_log, {**base, "split": "val", "losses": val_avg})

        # ---- stage one: caption-only pretraining -----------------------
        if stage == "caption":
            while (
                stage_epoch < cfg.epochs_stage1
                and patience_left > 0
                and not should_stop()
            ):
                train_avg = run_epoch(joint=False, gt_mask_warmup=False)
                stage_epoch += 1
                val_avg = _validate(
                    model, prepared_val, cfg, joint=False, gt_mask_warmup=False
                )
                log_epoch(train_avg, val_avg, mask_source=None)
                final_val = val_avg
                score = val_avg["caption"]
                if score < best_val - 1e-6:
                    best_val = score
                    patience_left = cfg.plateau_patience
                else:
                    patience_left -= 1
                save_latest()
            if not should_stop():
                if patience_left <= 0:
                    log.info(
                        "caption loss plateaued at epoch %d (best %.6f)",
                        epoch, best_val,
                    )
                stage = "joint"
                stage_epoch = 0

        # ---- stage two: joint training ---------------------------------
        if stage == "joint" and cfg.loss_mask and not should_stop():
            while stage_epoch < cfg.epochs_stage2 and not should_stop():
                warmup = stage_epoch < cfg.warmup_epochs
                source = "gt" if warmup else "pred"
                if stage_epoch == cfg.warmup_epochs:
                    log.info(
                        "alignment switching from ground-truth to predicted "
                        "masks at epoch %d", epoch + 1,
                    )
                train_avg = run_epoch(joint=True, gt_mask_warmup=warmup)
                stage_epoch += 1
                val_avg = _validate(
                    model, prepared_val, cfg, joint=True, gt_mask_warmup=warmup
                )
                log_epoch(train_avg, val_avg, mask_source=source)
                final_val = val_avg
                save_latest()

        # caption-only configurations skip stage two entirely; make sure a
        # checkpoint exists even when no epoch ran after a resume
        save_latest()

    return TrainResult(
        checkpoint_path=ckpt_path,
        run_log_path=run_log_path,
        epochs_run=epoch,
        final_val=final_val,
    )
