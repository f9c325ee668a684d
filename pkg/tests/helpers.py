"""Shared test utilities: gradient checking and cached training artifacts."""

import json
from pathlib import Path

import numpy as np
import torch

ARTIFACTS_DIR = Path(__file__).resolve().parent / "_artifacts"


def cached_train(cfg, tag: str) -> str:
    """Train once per (tag, config hash); reuse the checkpoint afterwards.

    Keyed by the config hash, so any config change triggers a fresh run
    while repeated test sessions skip straight to the cached artifact.
    """
    from shapecap.config import config_hash, write_config
    from shapecap.training import train

    run_dir = ARTIFACTS_DIR / f"{tag}-{config_hash(cfg)}"
    checkpoint = run_dir / "checkpoint.pt"
    done = run_dir / "DONE"
    if not (checkpoint.exists() and done.exists()):
        run_dir.mkdir(parents=True, exist_ok=True)
        result = train(cfg, out_dir=str(run_dir))
        write_config(cfg, str(run_dir / "config.txt"))
        done.write_text(f"epochs={result.epochs_run}\n")
    return str(checkpoint)


def cached_eval_summary(cfg, tag: str, *, k: int = 5, steps=None, seed: int = 0) -> dict:
    """Evaluate a cached checkpoint on its held-out split, caching the summary."""
    from shapecap.data import generate_dataset
    from shapecap.metrics import evaluate_model, write_report
    from shapecap.training import load_model

    checkpoint = Path(cached_train(cfg, tag))
    eval_key = f"eval-k{k}-steps{steps or cfg.steps}-seed{seed}-n{cfg.eval_size}"
    summary_path = checkpoint.parent / f"{eval_key}.json"
    if summary_path.exists():
        return json.loads(summary_path.read_text())
    model, _ = load_model(str(checkpoint))
    samples = generate_dataset(cfg.seed + 1, cfg.eval_size)
    report = evaluate_model(model, samples, k=k, steps=steps, seed=seed)
    write_report(report, str(checkpoint.parent / f"{eval_key}.jsonl"))
    summary_path.write_text(json.dumps(report.summary(), sort_keys=True))
    return report.summary()


def finite_difference_errors(loss_fn, module, *, h_scale, coords_per_tensor=None, seed=0, skip_norm=1e-8):
    """Per-parameter-tensor relative L2 error between autograd and central FD.

    loss_fn must rebuild the forward pass from scratch on every call.  Tensors
    whose autograd and FD gradients are both below `skip_norm` are reported as
    zero error (genuinely unused parameters).
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for (name, p), g in zip(params, grads):
            n = p.numel()
            if coords_per_tensor is None or coords_per_tensor >= n:
                idxs = np.arange(n)
            else:
                idxs = np.sort(rng.choice(n, coords_per_tensor, replace=False))
            flat = p.view(-1)
            fd = np.empty(len(idxs))
            ag = np.empty(len(idxs))
            for j, i in enumerate(idxs):
                orig = float(flat[i])
                step = h_scale * max(1.0, abs(orig))
                flat[i] = orig + step
                with torch.enable_grad():
                    lp = float(loss_fn().detach())
                flat[i] = orig - step
                with torch.enable_grad():
                    lm = float(loss_fn().detach())
                flat[i] = orig
                fd[j] = (lp - lm) / (2.0 * step)
                ag[j] = 0.0 if g is None else float(g.view(-1)[i])
            fd_n, ag_n = np.linalg.norm(fd), np.linalg.norm(ag)
            if fd_n < skip_norm and ag_n < skip_norm:
                errors[name] = 0.0
            else:
                errors[name] = float(np.linalg.norm(fd - ag) / max(fd_n, ag_n))
    return errors
