"""Training loop, checkpointing and periodic evaluation.

Outputs under ``out_dir``::

    config.yaml        config snapshot
    metrics.jsonl      one record per logged step
    ckpt_<step>.pt     checkpoints
    report.json        final losses, plus evaluation if a held-out split is given
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, save_config
from .exceptions import CheckpointIntegrityError, CheckpointVersionError, NumericalAbort
from .metrics import evaluate
from .model import SceneVAE
from .objective import TERMS, scheduled, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class TrainState:
    step: int
    model: SceneVAE
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    config: RunConfig


def build_state(cfg: RunConfig) -> TrainState:
    """Fresh model, optimizer and sampling generator, all seeded from the config."""
    torch.manual_seed(cfg.train.seed)
    device = torch.device(cfg.train.device)
    model = SceneVAE(cfg.model).to(device)
    mults = {"encoder": cfg.train.lr_mult_encoder, "prior": cfg.train.lr_mult_prior,
             "decoder": cfg.train.lr_mult_decoder}
    groups = [{"params": params, "lr": cfg.train.lr * mults[name], "name": name}
              for name, params in model.param_groups().items()]
    optimizer = torch.optim.Adam(groups, lr=cfg.train.lr)
    generator = torch.Generator(device=device)
    generator.manual_seed(cfg.train.seed)
    return TrainState(step=0, model=model, optimizer=optimizer, generator=generator, config=cfg)


def batch_indices(step, batch_size, n, seed):
    """Dataset indices for 0-based ``step``: consecutive slices of per-epoch permutations."""
    pos = np.arange(step * batch_size, (step + 1) * batch_size)
    epochs, offsets = np.divmod(pos, n)
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        perm = np.random.default_rng([int(seed), int(e)]).permutation(n)
        out[epochs == e] = perm[offsets[epochs == e]]
    return out


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(state: TrainState, path):
    payload = {
        "step": state.step,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "generator": state.generator.get_state(),
        "config": state.config.to_dict(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    torch.save({"format_version": CHECKPOINT_FORMAT,
                "sha256": hashlib.sha256(blob).hexdigest(),
                "payload": blob}, path)
    return Path(path)


def resume(path) -> TrainState:
    """Restore a :class:`TrainState` written by :func:`save_checkpoint`.

    Raises ``FileNotFoundError`` for a missing file,
    :class:`CheckpointIntegrityError` for an unreadable or corrupted one and
    :class:`CheckpointVersionError` for a different format version.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        outer = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointIntegrityError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(outer, dict) or "payload" not in outer:
        raise CheckpointIntegrityError(f"{path}: not a checkpoint archive")
    version = outer.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise CheckpointVersionError(
            f"{path}: checkpoint format {version}, this version reads {CHECKPOINT_FORMAT}")
    blob = outer["payload"]
    if hashlib.sha256(blob).hexdigest() != outer.get("sha256"):
        raise CheckpointIntegrityError(f"{path}: checksum mismatch")
    payload = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)

    cfg = RunConfig.from_dict(payload["config"])
    state = build_state(cfg)
    try:
        state.model.load_state_dict(payload["model"])
        state.optimizer.load_state_dict(payload["optimizer"])
    except (RuntimeError, ValueError, KeyError) as exc:
        raise CheckpointVersionError(f"{path}: incompatible checkpoint ({exc})") from None
    state.generator.set_state(payload["generator"])
    state.step = int(payload["step"])
    return state


def load_model(path) -> SceneVAE:
    model = resume(path).model
    model.eval()
    return model


# -- training ------------------------------------------------------------------

def _dump_diagnostics(out_dir, step, idx, x, breakdown):
    path = Path(out_dir) / f"nan_step{step}.pt"
    torch.save({"step": step, "indices": torch.as_tensor(idx), "batch": x.detach().cpu(),
                "loss": {k: float(getattr(breakdown, k).detach()) for k in (*TERMS, "total")}},
               path)
    return path


def train(cfg: RunConfig, dataset, out_dir, eval_dataset=None, state: TrainState | None = None):
    """Run training until ``cfg.train.num_steps`` steps have been taken.

    Passing ``state`` (e.g. from :func:`resume`) continues from its step and
    appends to the existing metrics log. Returns the final state.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    tc = cfg.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if tc.num_threads:
        torch.set_num_threads(tc.num_threads)
    if state is None:
        state = build_state(cfg)
    save_config(cfg, out_dir / "config.yaml")
    model, opt, gen = state.model, state.optimizer, state.generator
    device = next(model.parameters()).device
    base_lrs = [g["lr"] for g in opt.param_groups]

    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if state.step > 0 else "w"
    last = None
    with open(metrics_path, mode) as mlog:
        while state.step < tc.num_steps:
            idx = batch_indices(state.step, tc.batch_size, len(dataset), tc.seed)
            x = torch.as_tensor(dataset.batch(idx), device=device)
            prior, weights = scheduled(cfg, state.step)
            model.train()
            out = model(x, generator=gen)
            loss = total_loss(x, out, prior, weights, model.prior, cfg.model.pixel_std)
            if not torch.isfinite(loss.total):
                path = _dump_diagnostics(out_dir, state.step, idx, x, loss)
                raise NumericalAbort(f"non-finite loss at step {state.step}; "
                                     f"diagnostics in {path}", path)
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            if tc.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            state.step += 1
            last = loss.as_dict()

            row = None
            if state.step % tc.log_every == 0 or state.step == tc.num_steps:
                row = {"step": state.step, **last, "pres_prior": prior.pres_prob,
                       "alpha_overlap": weights.alpha_overlap, "lr": base_lrs[0]}
            if eval_dataset is not None and state.step % tc.eval_every == 0:
                report, _ = evaluate(model, eval_dataset, batch_size=tc.batch_size)
                row = row or {"step": state.step, **last, "pres_prior": prior.pres_prob,
                              "alpha_overlap": weights.alpha_overlap, "lr": base_lrs[0]}
                row.update(ap=report.ap, acc=report.acc, nmi=report.nmi)
            if row is not None:
                mlog.write(json.dumps(row) + "\n")
                mlog.flush()
                log.info("step %d total %.4g recon %.4g", state.step, last["total"], last["recon"])
            if state.step % tc.ckpt_every == 0 or state.step == tc.num_steps:
                save_checkpoint(state, out_dir / f"ckpt_{state.step}.pt")

    report = {"step": state.step, "loss": last}
    if eval_dataset is not None:
        ev, _ = evaluate(model, eval_dataset, batch_size=tc.batch_size)
        report.update(ap=ev.ap, acc=ev.acc, nmi=ev.nmi, n_correct_boxes=ev.n_correct_boxes)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return state


def read_metrics(path):
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                raise ValueError(f"{path}:{n}: malformed metrics record") from None
    return rows


def smooth(values, window=10):
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    lo = np.maximum(np.arange(1, len(v) + 1) - window, 0)
    return (c[1:] - c[lo]) / (np.arange(1, len(v) + 1) - lo)

