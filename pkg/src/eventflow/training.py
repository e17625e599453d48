"""Gradient-descent training loop for the toy video model.

AdamW with a linear learning-rate warmup followed by a constant rate, an
aggressive global-norm gradient clip, and sequential gradient accumulation
over each batch (mean reduction, so the batch loss does not depend on the
order the samples are visited in). Every random draw comes from a labeled
substream keyed by the step index, never from mutable generator state, so a
run resumed from a checkpoint reproduces the uninterrupted run bitwise.

Pixels live in [0, 1] on disk; the model works in [-1, 1] units. The two
conversions are `to_model_units` and `to_pixels`, and both the loop here and
the samplers built on top of it must agree on them.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .diffusion import CondDropout, rf_loss
from .model import LatentVideo, ToyDiT, load_checkpoint, patchify, save_checkpoint
from .numerics import Rng, assert_finite
from .timeline import EventScript, ValidationError, frame_timestamps

__all__ = [
    "AdamW",
    "TrainConfig",
    "TrainResult",
    "batch_loss",
    "global_grad_norm",
    "learning_rate",
    "load_train_checkpoint",
    "prepare_item",
    "save_train_checkpoint",
    "to_model_units",
    "to_pixels",
    "train",
]

LOG_HEADER = ("step", "loss", "grad_norm")

_OPT_STEP_KEY = "opt.step"
_OPT_M_PREFIX = "opt.m."
_OPT_V_PREFIX = "opt.v."


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters.

    The learning rate ramps linearly from lr/warmup_steps to lr over the
    first warmup_steps updates and stays constant afterwards. clip_norm
    bounds the global L2 norm of the averaged batch gradient. A
    checkpoint_every of 0 saves only the final checkpoint.
    """

    lr: float = 1e-3
    warmup_steps: int = 100
    clip_norm: float = 0.05
    batch_size: int = 16
    total_steps: int = 3000
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.lr > 0 and np.isfinite(self.lr)):
            raise ValidationError("bad_config", f"lr must be positive, got {self.lr}")
        if self.warmup_steps < 0:
            raise ValidationError(
                "bad_config", f"warmup_steps must be >= 0, got {self.warmup_steps}"
            )
        if not (self.clip_norm > 0):
            raise ValidationError(
                "bad_config", f"clip_norm must be positive, got {self.clip_norm}"
            )
        if self.batch_size < 1:
            raise ValidationError(
                "bad_config", f"batch_size must be >= 1, got {self.batch_size}"
            )
        if self.total_steps < 0:
            raise ValidationError(
                "bad_config", f"total_steps must be >= 0, got {self.total_steps}"
            )
        if self.weight_decay < 0:
            raise ValidationError(
                "bad_config",
                f"weight_decay must be >= 0, got {self.weight_decay}",
            )
        for name in ("beta1", "beta2"):
            val = getattr(self, name)
            if not (0.0 <= val < 1.0):
                raise ValidationError(
                    "bad_config", f"{name} must be in [0, 1), got {val}"
                )
        if not (self.adam_eps > 0):
            raise ValidationError(
                "bad_config", f"adam_eps must be positive, got {self.adam_eps}"
            )
        if self.checkpoint_every < 0:
            raise ValidationError(
                "bad_config",
                f"checkpoint_every must be >= 0, got {self.checkpoint_every}",
            )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_json(doc: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(
                "bad_config", f"unknown training fields: {sorted(unknown)}"
            )
        return TrainConfig(**doc)


def learning_rate(config: TrainConfig, step: int) -> float:
    """Learning rate applied at update `step` (0-based): linear warmup, then flat."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if config.warmup_steps == 0 or step >= config.warmup_steps:
        return config.lr
    return config.lr * (step + 1) / config.warmup_steps


# ---------------------------------------------------------------------------
# pixel <-> model units
# ---------------------------------------------------------------------------


def to_model_units(pixels: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to the [-1, 1] units the velocity model trains in."""
    return 2.0 * np.asarray(pixels, dtype=np.float64) - 1.0


def to_pixels(units: np.ndarray) -> np.ndarray:
    """Map model units back to displayable pixels, clipped to [0, 1]."""
    return np.clip((np.asarray(units, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def prepare_item(script: EventScript, video: np.ndarray, patch: int) -> LatentVideo:
    """Patchify one corpus video into model-unit tokens with frame timestamps."""
    video = np.asarray(video, dtype=np.float64)
    assert_finite(video, "training video")
    return patchify(to_model_units(video), patch, frame_timestamps(script))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    The moment tensors and the update counter are exposed as a flat tensor
    dict so they travel inside checkpoints; restoring them reproduces the
    interrupted run exactly.
    """

    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig) -> None:
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def apply(
        self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
    ) -> None:
        """One in-place update; `lr` is the warmup-scheduled rate for this step."""
        if set(grads) != set(self.m):
            raise ValueError("gradient keys do not match optimizer state")
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for name, g in grads.items():
            p = params[name]
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            if cfg.weight_decay:
                p *= 1.0 - lr * cfg.weight_decay
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            _OPT_STEP_KEY: np.array(float(self.step_count))
        }
        for name, arr in self.m.items():
            out[_OPT_M_PREFIX + name] = arr
        for name, arr in self.v.items():
            out[_OPT_V_PREFIX + name] = arr
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        if _OPT_STEP_KEY not in tensors:
            raise ValueError("optimizer state is missing the step counter")
        self.step_count = _scalar_int(tensors[_OPT_STEP_KEY])
        for name in self.m:
            for prefix, store in ((_OPT_M_PREFIX, self.m), (_OPT_V_PREFIX, self.v)):
                key = prefix + name
                if key not in tensors:
                    raise ValueError(f"optimizer state is missing {key}")
                arr = np.asarray(tensors[key], dtype=np.float64)
                if arr.shape != store[name].shape:
                    raise ValueError(f"optimizer tensor {key} has shape {arr.shape}")
                store[name] = arr.copy()


def _scalar_int(arr: np.ndarray) -> int:
    """Read a checkpointed scalar regardless of 0-d vs length-1 layout."""
    flat = np.asarray(arr, dtype=np.float64).ravel()
    if flat.size != 1:
        raise ValueError(f"expected a scalar tensor, got shape {np.shape(arr)}")
    return int(flat[0])


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    """L2 norm of all gradients concatenated."""
    total = 0.0
    for arr in grads.values():
        total += float(np.sum(arr * arr))
    return float(np.sqrt(total))


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most max_norm.

    Returns the pre-clip norm (the value worth logging).
    """
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for arr in grads.values():
            arr *= scale
    return norm


# ---------------------------------------------------------------------------
# batch objective
# ---------------------------------------------------------------------------


def batch_loss(
    model: ToyDiT,
    batch: Sequence[tuple[LatentVideo, EventScript]],
    rngs: Sequence[Rng],
    *,
    dropout: CondDropout | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss and mean gradients over a batch, accumulated sequentially.

    Each sample carries its own rng, so permuting the (sample, rng) pairs
    together changes nothing but floating-point summation order.
    """
    if not batch:
        raise ValueError("batch must not be empty")
    if len(rngs) != len(batch):
        raise ValueError(f"{len(rngs)} rngs for {len(batch)} samples")
    total_loss = 0.0
    total_grads: dict[str, np.ndarray] | None = None
    for (latent, script), rng in zip(batch, rngs):
        loss, grads = rf_loss(model, latent, script, rng, dropout=dropout)
        total_loss += loss
        if total_grads is None:
            total_grads = {k: v.copy() for k, v in grads.items()}
        else:
            for k, v in grads.items():
                total_grads[k] += v
    scale = 1.0 / len(batch)
    assert total_grads is not None
    for arr in total_grads.values():
        arr *= scale
    return total_loss * scale, total_grads


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------


def save_train_checkpoint(
    path: str | Path, model: ToyDiT, optimizer: AdamW, step: int
) -> None:
    """Model parameters plus optimizer state plus the next step index."""
    extra = optimizer.state_tensors()
    extra["train.step"] = np.array(float(step))
    save_checkpoint(path, model, extra)


def load_train_checkpoint(
    path: str | Path, config: TrainConfig
) -> tuple[ToyDiT, AdamW, int]:
    """Restore (model, optimizer, next step index) written by the loop here."""
    model, extra = load_checkpoint(path)
    if "train.step" not in extra:
        raise ValueError("checkpoint has no training state to resume from")
    optimizer = AdamW(model.params, config)
    optimizer.load_state(extra)
    return model, optimizer, _scalar_int(extra["train.step"])


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainResult:
    """What a training run produced; `model` is the trained instance."""

    model: ToyDiT
    optimizer: AdamW
    steps_run: int
    losses: tuple[float, ...]
    grad_norms: tuple[float, ...]


def train(
    model: ToyDiT,
    corpus: Sequence[tuple[EventScript, np.ndarray]],
    config: TrainConfig,
    *,
    dropout: CondDropout | None = CondDropout(),
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    optimizer: AdamW | None = None,
    start_step: int = 0,
    on_step: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Optimize `model` in place on (script, pixel-video) pairs.

    Batches are drawn with replacement from a substream keyed by the step
    index; per-sample noise comes from per-slot substreams of the same step.
    Passing `optimizer` and `start_step` (from `load_train_checkpoint`)
    continues an interrupted run; the completed run is bitwise identical to
    one that never stopped. The CSV log gains one `step,loss,grad_norm` row
    per update and is appended to on resume.
    """
    if not corpus:
        raise ValueError("training corpus must not be empty")
    if not 0 <= start_step <= config.total_steps:
        raise ValueError(
            f"start_step must be in [0, {config.total_steps}], got {start_step}"
        )
    patch = model.config.patch
    prepared = [
        (prepare_item(script, video, patch), script) for script, video in corpus
    ]
    if optimizer is None:
        optimizer = AdamW(model.params, config)

    losses: list[float] = []
    norms: list[float] = []
    log_file = None
    writer = None
    if log_path is not None:
        fresh = start_step == 0
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(LOG_HEADER)

    try:
        for step in range(start_step, config.total_steps):
            key = f"train/step{step:08d}"
            pick = Rng(config.seed, f"{key}/batch").integers(
                0, len(prepared), (config.batch_size,)
            )
            batch = [prepared[int(i)] for i in pick]
            rngs = [
                Rng(config.seed, f"{key}/item{slot:02d}")
                for slot in range(config.batch_size)
            ]
            loss, grads = batch_loss(model, batch, rngs, dropout=dropout)
            norm = _clip_grads(grads, config.clip_norm)
            optimizer.apply(model.params, grads, learning_rate(config, step))

            losses.append(loss)
            norms.append(norm)
            if writer is not None:
                writer.writerow([step, f"{loss:.17g}", f"{norm:.17g}"])
                log_file.flush()
            if on_step is not None:
                on_step(step, loss, norm)
            if (
                checkpoint_path is not None
                and config.checkpoint_every
                and (step + 1) % config.checkpoint_every == 0
            ):
                save_train_checkpoint(checkpoint_path, model, optimizer, step + 1)
    finally:
        if log_file is not None:
            log_file.close()

    if checkpoint_path is not None:
        save_train_checkpoint(checkpoint_path, model, optimizer, config.total_steps)
    return TrainResult(
        model=model,
        optimizer=optimizer,
        steps_run=config.total_steps - start_step,
        losses=tuple(losses),
        grad_norms=tuple(norms),
    )
