"""Trainer contract: loss composition, schedule, determinism, checkpoints."""

import json
import logging

import pytest
import torch

from shapecap.config import TrainConfig, config_hash
from shapecap.data import generate_dataset, generate_sample
from shapecap.errors import InputError, TrainingError
from shapecap.model import collate
from shapecap.training import (
    build_model,
    load_checkpoint,
    load_model,
    prepare_many,
    save_checkpoint,
    total_loss,
    train,
)


def tiny_cfg(**overrides) -> TrainConfig:
    base = dict(
        dim=32,
        heads=4,
        depth=2,
        enc_channels=(8, 8, 16, 16),
        d_joint=32,
        batch_size=2,
        dataset_size=4,
        eval_size=2,
        lr=1e-3,
        epochs_stage1=2,
        epochs_stage2=2,
        warmup_epochs=1,
        plateau_patience=5,
        steps=5,
    )
    base.update(overrides)
    return TrainConfig(**base)


def scalar_losses(**values):
    return {k: torch.tensor(float(v)) for k, v in values.items()}


def read_log(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


# ---------------------------------------------------------------- total_loss


def test_total_loss_weighted_sum():
    cfg = TrainConfig(lambda1=2.0, lambda2=1.0)
    losses = scalar_losses(caption=1, mask=1, sg=1, mec=1)
    assert float(total_loss(losses, cfg, "joint")) == pytest.approx(5.0)


def test_total_loss_zero_weights_drop_terms_entirely():
    cfg = TrainConfig(lambda1=0.0, lambda2=0.0)
    caption = torch.tensor(1.5, requires_grad=True)
    mask = torch.tensor(0.5, requires_grad=True)
    sg = torch.tensor(3.0, requires_grad=True)
    mec = torch.tensor(4.0, requires_grad=True)
    total = total_loss({"caption": caption, "mask": mask, "sg": sg, "mec": mec}, cfg, "joint")
    assert float(total.detach()) == pytest.approx(2.0)
    total.backward()
    assert sg.grad is None and mec.grad is None
    assert float(caption.grad) == 1.0 and float(mask.grad) == 1.0


def test_total_loss_caption_stage_ignores_mask(caplog):
    cfg = TrainConfig(lambda1=2.0)
    losses = scalar_losses(caption=1, mask=100, sg=1)
    with caplog.at_level(logging.INFO, logger="shapecap.training"):
        value = float(total_loss(losses, cfg, "caption"))
    assert value == pytest.approx(3.0)
    assert any("ignoring supplied mask loss" in r.message for r in caplog.records)


def test_total_loss_names_nonfinite_component():
    cfg = TrainConfig()
    losses = scalar_losses(caption=1, sg=1, mec=1)
    losses["mask"] = torch.tensor(float("inf"))
    with pytest.raises(TrainingError, match="mask"):
        total_loss(losses, cfg, "joint")
    losses["mask"] = torch.tensor(float("nan"))
    with pytest.raises(TrainingError, match="mask"):
        total_loss(losses, cfg, "joint")


def test_total_loss_rejects_unknown_stage():
    with pytest.raises(InputError, match="stage"):
        total_loss(scalar_losses(caption=1, sg=1), TrainConfig(), "warmup")


def test_total_loss_respects_loss_switches():
    cfg = TrainConfig(loss_caption=False, lambda1=1.0, lambda2=1.0)
    losses = scalar_losses(caption=100, mask=1, sg=1, mec=1)
    assert float(total_loss(losses, cfg, "joint")) == pytest.approx(3.0)
    cfg = TrainConfig(loss_mask=False, lambda1=1.0)
    assert float(total_loss(losses, cfg, "joint")) == pytest.approx(101.0)


# ------------------------------------------------------------------ schedule


def test_overfit_single_sample_under_200_steps(tmp_path):
    cfg = tiny_cfg(
        batch_size=1,
        lr=5e-3,
        weight_decay=0.0,
        loss_mask=False,
        epochs_stage1=200,
        plateau_patience=200,
        dataset_size=1,
        eval_size=1,
    )
    sample = generate_sample(123, n_objects=3, n_mentioned=1)
    result = train(cfg, [sample], [sample], out_dir=str(tmp_path / "run"))
    totals = [
        rec["losses"]["total"]
        for rec in read_log(result.run_log_path)
        if rec["split"] == "train"
    ]
    assert len(totals) <= 200
    assert min(totals) < 0.05


def test_run_log_records_stages_and_mask_source_flip(tmp_path):
    cfg = tiny_cfg(epochs_stage1=2, epochs_stage2=2, warmup_epochs=1, plateau_patience=5)
    train_set = generate_dataset(0, 4)
    val_set = generate_dataset(1, 2)
    result = train(cfg, train_set, val_set, out_dir=str(tmp_path / "run"))
    records = read_log(result.run_log_path)
    assert all(set(r) >= {"epoch", "stage", "split", "losses"} for r in records)
    caption_recs = [r for r in records if r["stage"] == "caption"]
    joint_recs = [r for r in records if r["stage"] == "joint"]
    assert len(caption_recs) == 4 and len(joint_recs) == 4  # train+val per epoch
    assert [r["mask_source"] for r in joint_recs if r["split"] == "train"] == ["gt", "pred"]
    assert all("mask" in r["losses"] and "mec" in r["losses"] for r in joint_recs)
    assert all("mask" not in r["losses"] for r in caption_recs)
    epochs = [r["epoch"] for r in records if r["split"] == "train"]
    assert epochs == sorted(epochs) == [1, 2, 3, 4]


def test_fixed_seed_gives_bit_identical_run_logs(tmp_path):
    cfg = tiny_cfg()
    train_set = generate_dataset(0, 4)
    val_set = generate_dataset(1, 2)
    a = train(cfg, train_set, val_set, out_dir=str(tmp_path / "a"))
    b = train(cfg, train_set, val_set, out_dir=str(tmp_path / "b"))
    with open(a.run_log_path, "rb") as fa, open(b.run_log_path, "rb") as fb:
        assert fa.read() == fb.read()


def test_resume_reproduces_uninterrupted_curve(tmp_path):
    cfg = tiny_cfg()
    train_set = generate_dataset(0, 4)
    val_set = generate_dataset(1, 2)
    full = train(cfg, train_set, val_set, out_dir=str(tmp_path / "full"))
    part = train(cfg, train_set, val_set, out_dir=str(tmp_path / "part"),
                 stop_after_epochs=1)
    resumed = train(cfg, train_set, val_set, out_dir=str(tmp_path / "resumed"),
                    resume_from=part.checkpoint_path)
    full_records = read_log(full.run_log_path)
    tail = [r for r in full_records if r["epoch"] > 1]
    assert read_log(resumed.run_log_path) == tail
    final_a = load_checkpoint(full.checkpoint_path)
    final_b = load_checkpoint(resumed.checkpoint_path)
    assert final_a["epoch"] == final_b["epoch"] == 4
    for key, tensor in final_a["model_state"].items():
        assert torch.equal(tensor, final_b["model_state"][key]), key


def test_resume_rejects_config_mismatch(tmp_path):
    cfg = tiny_cfg()
    train_set = generate_dataset(0, 2)
    val_set = generate_dataset(1, 2)
    part = train(cfg, train_set, val_set, out_dir=str(tmp_path / "part"),
                 stop_after_epochs=1)
    other = tiny_cfg(lr=2e-3)
    with pytest.raises(InputError, match="different config"):
        train(other, train_set, val_set, out_dir=str(tmp_path / "x"),
              resume_from=part.checkpoint_path)


def test_divergence_aborts_with_diagnostic(tmp_path):
    cfg = tiny_cfg(divergence_threshold=1e-9, dataset_size=2)
    train_set = generate_dataset(0, 2)
    with pytest.raises(TrainingError, match="diverged") as exc:
        train(cfg, train_set, generate_dataset(1, 2), out_dir=str(tmp_path / "run"))
    assert "components" in str(exc.value)


def test_empty_dataset_rejected(tmp_path):
    with pytest.raises(InputError, match="non-empty"):
        train(tiny_cfg(), [], generate_dataset(1, 2), out_dir=str(tmp_path / "run"))


# -------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_identical_forward(tmp_path):
    cfg = tiny_cfg()
    model = build_model(cfg)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
    path = str(tmp_path / "ckpt.pt")
    save_checkpoint(
        path, model, optimizer, cfg,
        epoch=3, stage="joint", stage_epoch=1,
        rng_state=torch.Generator().manual_seed(5).get_state(),
        best_val=0.5, patience_left=2,
    )
    loaded, loaded_cfg = load_model(path)
    assert loaded_cfg == cfg
    payload = load_checkpoint(path)
    assert payload["config_hash"] == config_hash(cfg)
    assert payload["epoch"] == 3 and payload["stage"] == "joint"

    batch = collate(prepare_many(generate_dataset(3, 2)))
    model.eval()
    with torch.no_grad():
        a = model.forward_train(batch, joint=True,
                                generator=torch.Generator().manual_seed(9))
        b = loaded.forward_train(batch, joint=True,
                                 generator=torch.Generator().manual_seed(9))
    for key in a:
        va = a[key] if torch.is_tensor(a[key]) else torch.tensor(a[key])
        vb = b[key] if torch.is_tensor(b[key]) else torch.tensor(b[key])
        assert torch.equal(va, vb), key


def test_checkpoint_version_guard(tmp_path):
    cfg = tiny_cfg()
    model = build_model(cfg)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
    path = str(tmp_path / "ckpt.pt")
    save_checkpoint(
        path, model, optimizer, cfg,
        epoch=0, stage="caption", stage_epoch=0,
        rng_state=torch.Generator().get_state(),
        best_val=1.0, patience_left=5,
    )
    payload = torch.load(path, weights_only=False)
    payload["version"] = 99
    torch.save(payload, path)
    with pytest.raises(InputError, match="version"):
        load_checkpoint(path)


def test_zero_weight_step_leaves_private_parameters_untouched():
    cfg = tiny_cfg(lambda1=0.0, lambda2=0.0)
    model = build_model(cfg)
    batch = collate(prepare_many(generate_dataset(2, 2)))
    optimizer = torch.optim.AdamW(model.parameters(), lr=1e-2, weight_decay=0.05)

    private = {
        name: param.detach().clone()
        for name, param in model.named_parameters()
        if name.startswith("mecl.") or "perm_head" in name
    }
    assert private, "expected alignment-head and ordering-head parameters"

    losses = model.forward_train(batch, joint=True,
                                 generator=torch.Generator().manual_seed(0))
    loss = total_loss(losses, cfg, "joint")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()

    changed = 0
    for name, param in model.named_parameters():
        if name in private:
            assert param.grad is None, name
            assert torch.equal(param.detach(), private[name]), name
        elif param.grad is not None and not torch.equal(
            param.grad, torch.zeros_like(param.grad)
        ):
            changed += 1
    assert changed > 0
