"""Seeded mini-batch training over episode sequences.

Each step samples a batch of episodes, averages their losses, clips the
global gradient norm, and applies AdamW. Every step appends one JSON line to
the training log; a non-finite loss or gradient aborts with a diagnostic
rather than silently poisoning the parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt, rng, tensor as T
from .errors import ConfigError, DataError, NumericError
from .model import ToyLM
from .optim import AdamW, clip_grad_norm

_KEY_BATCH = 501


@dataclass
class TrainSettings:
    steps: int = 500
    batch_size: int = 4
    lr: float = 2e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    stream_weight: float = 1.0
    seed: int = 0
    # halt once the smoothed loss falls below this fraction of the first
    # step's loss; None trains the full budget
    early_stop_fraction: float | None = None
    ema_alpha: float = 0.9


def train_step(model: ToyLM, opt: AdamW, batch: list, stream_weight: float,
               clip_norm: float, step: int) -> dict:
    if not batch:
        raise ConfigError("training step needs a non-empty batch")
    pieces = []
    streaming = 0.0
    lm = 0.0
    for seq, bundles in batch:
        t, parts = model.loss(seq, bundles, stream_weight)
        pieces.append(t)
        streaming += parts["streaming"]
        lm += parts["lm"]
    total = T.scale(T.add_all(pieces), 1.0 / len(batch))
    loss_val = total.item()
    if not math.isfinite(loss_val):
        raise NumericError(f"non-finite loss {loss_val!r} at step {step}")
    opt.zero_grad()
    total.backward()
    grad_norm = clip_grad_norm(opt.params, clip_norm)
    if not math.isfinite(grad_norm):
        raise NumericError(f"non-finite gradient norm at step {step}")
    opt.step()
    return {"step": step, "loss": loss_val,
            "streaming_term": streaming / len(batch),
            "lm_term": lm / len(batch), "grad_norm": grad_norm}


def save_checkpoint(stem: str | Path, model: ToyLM, opt: AdamW,
                    next_step: int, config_hash: str = "") -> None:
    """Parameters plus optimizer moments; enough for an exact resume."""
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.params().items():
        arrays[f"param:{name}"] = p.data
        arrays[f"m:{name}"] = opt._m[name]
        arrays[f"v:{name}"] = opt._v[name]
    ckpt.save_checkpoint(stem, arrays,
                         metadata={"next_step": next_step, "opt_t": opt.t,
                                   "config_hash": config_hash})


def load_checkpoint(stem: str | Path, model: ToyLM, opt: AdamW | None = None,
                    config_hash: str = "") -> int:
    """Restores state in place; returns the step to continue from."""
    arrays, meta = ckpt.load_checkpoint(stem)
    saved = meta.get("config_hash", "")
    if config_hash and saved and saved != config_hash:
        raise ConfigError(
            f"checkpoint belongs to config {saved}, not {config_hash}")
    params = model.params()
    names = {k[6:] for k in arrays if k.startswith("param:")}
    if names != set(params):
        raise DataError("checkpoint parameters do not match the model: "
                        f"{sorted(names ^ set(params))}")
    for name, p in params.items():
        arr = arrays[f"param:{name}"]
        if arr.shape != p.data.shape:
            raise DataError(f"checkpoint shape mismatch for {name}: "
                            f"{arr.shape} vs {p.data.shape}")
        p.data[:] = arr
        if opt is not None:
            opt._m[name][:] = arrays[f"m:{name}"]
            opt._v[name][:] = arrays[f"v:{name}"]
    if opt is not None:
        opt.t = int(meta.get("opt_t", 0))
    return int(meta.get("next_step", 0))


def train(model: ToyLM, episodes: list, settings: TrainSettings,
          log_path: str | Path | None = None,
          resume: str | Path | None = None,
          checkpoint_path: str | Path | None = None,
          config_hash: str = "") -> list[dict]:
    """Runs the step budget; returns the per-step records in order.

    Batch sampling is keyed by step index, so resuming from a checkpoint
    replays the exact batches an uninterrupted run would have seen. The
    early-stop baseline is the first loss of the current run.
    """
    if not episodes:
        raise ConfigError("cannot train on an empty episode list")
    opt = AdamW(model.params(), lr=settings.lr,
                weight_decay=settings.weight_decay)
    start = 0
    if resume is not None:
        # no hash check here: extending the step budget is a legitimate
        # resume, and the parameter manifest already pins the architecture
        start = load_checkpoint(resume, model, opt)
    records: list[dict] = []
    handle = None
    if log_path is not None:
        handle = open(log_path, "a" if resume is not None else "w")
    ema = None
    threshold = None
    try:
        for step in range(start, settings.steps):
            gen = rng.generator(settings.seed, _KEY_BATCH, step)
            take = min(settings.batch_size, len(episodes))
            idx = gen.choice(len(episodes), size=take, replace=False)
            batch = [episodes[int(i)] for i in idx]
            rec = train_step(model, opt, batch, settings.stream_weight,
                             settings.clip_norm, step)
            records.append(rec)
            if handle is not None:
                handle.write(json.dumps(rec, sort_keys=True) + "\n")
            ema = rec["loss"] if ema is None else (
                settings.ema_alpha * ema + (1.0 - settings.ema_alpha) * rec["loss"])
            if threshold is None and settings.early_stop_fraction is not None:
                threshold = settings.early_stop_fraction * records[0]["loss"]
            if threshold is not None and ema < threshold:
                break
    finally:
        if handle is not None:
            handle.close()
    if checkpoint_path is not None:
        next_step = records[-1]["step"] + 1 if records else start
        save_checkpoint(checkpoint_path, model, opt, next_step, config_hash)
    return records
