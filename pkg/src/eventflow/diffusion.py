"""Rectified-flow objective, conditioning dropout, and the Euler sampler.

Training draws a diffusion time and a noise sample, interpolates linearly
between clean latents and noise, and regresses the model's velocity onto
(noise - clean). Sampling integrates the learned velocity field backwards
from pure noise with classifier-free guidance applied inside a step-index
interval. Both directions are deterministic given their seeds.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conditioning import ConditioningMode, EncodedConditioning
from .model import (
    LatentVideo,
    ToyDiT,
    forward,
    loss_and_grads,
    unpatchify,
)
from .numerics import Rng, assert_finite
from .timeline import EventScript, frame_timestamps

__all__ = [
    "CondDropout",
    "SampleConfig",
    "apply_cond_dropout",
    "condition_on_first_frame",
    "draw_dropout",
    "euler_integrate",
    "guided_velocity",
    "load_video_json",
    "rf_interpolate",
    "rf_loss",
    "rf_target",
    "sample",
    "write_video_json",
    "write_video_pgms",
    "zero_cut_inference",
    "zeroed_conditioning",
]


@dataclass(frozen=True)
class SampleConfig:
    """Euler sampler settings.

    steps: number of uniform integration steps from noise (t=1) to data (t=0).
    cfg_scale: guidance strength; 1 disables guidance (and skips the
        unconditional evaluation entirely).
    guidance_interval: inclusive [lo, hi] range of step indices, counted from
        the noise end, inside which cfg_scale applies; outside it the scale
        is 1.
    seed: source of the initial noise.
    """

    steps: int = 256
    cfg_scale: float = 8.0
    guidance_interval: tuple[int, int] = (25, 100)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "guidance_interval", tuple(int(v) for v in self.guidance_interval)
        )
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        lo, hi = self.guidance_interval
        if not (0 <= lo <= hi <= self.steps):
            raise ValueError(
                f"guidance interval must satisfy 0 <= lo <= hi <= steps, got [{lo}, {hi}]"
            )
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


@dataclass(frozen=True)
class CondDropout:
    """Classifier-free dropout probabilities, all-or-nothing per branch.

    p_global: chance of zeroing the whole global-caption branch.
    p_temporal: independent chance of zeroing every event embedding and
        treating every event timestamp as zero.
    drop_cuts_with_temporal: when True (default) a temporal drop also zeroes
        cut conditioning; when False cut rows survive with their true timing.
    """

    p_global: float = 0.1
    p_temporal: float = 0.1
    drop_cuts_with_temporal: bool = True

    def __post_init__(self) -> None:
        for name in ("p_global", "p_temporal"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")


def draw_dropout(rng: Rng, dropout: CondDropout) -> tuple[bool, bool]:
    """Two independent Bernoulli draws: (drop_global, drop_temporal)."""
    drop_g = bool(float(rng.uniform(())) < dropout.p_global)
    drop_t = bool(float(rng.uniform(())) < dropout.p_temporal)
    return drop_g, drop_t


def zeroed_conditioning(
    enc: EncodedConditioning, keep_cuts: bool = False
) -> EncodedConditioning:
    """The temporal branch after a dropout hit: zero rows, zero timing.

    Rotation positions and time features go to zero along with the embedding
    rows; span windows widen to the whole video so masked attention still has
    attendable (zero-valued) rows everywhere. With keep_cuts, cut rows keep
    their embeddings and timing and only event rows are zeroed.
    """
    zap = np.ones(enc.n_rows, dtype=bool)
    if keep_cuts:
        zap &= enc.cut_of_row < 0
    tokens = np.where(zap[:, None], 0.0, enc.tokens)
    positions = enc.positions
    if positions is not None:
        positions = np.where(zap, 0.0, positions)
    time_features = enc.time_features
    if time_features is not None:
        time_features = np.where(zap[:, None], 0.0, time_features)
    spans = enc.spans.copy()
    spans[zap] = (0.0, enc.duration)
    event_of_row = np.where(zap, -1, enc.event_of_row)
    cut_of_row = np.where(zap, -1, enc.cut_of_row)
    return dataclasses.replace(
        enc,
        tokens=tokens,
        positions=positions,
        time_features=time_features,
        spans=spans,
        event_of_row=event_of_row,
        cut_of_row=cut_of_row,
    )


def apply_cond_dropout(
    global_rows: np.ndarray,
    enc: EncodedConditioning,
    rng: Rng,
    dropout: CondDropout,
) -> tuple[np.ndarray, EncodedConditioning]:
    """Randomly zero the global and/or temporal conditioning branches.

    Each branch is dropped whole or not at all, with its own probability.
    Returns (global rows, temporal encoding) with dropped branches replaced
    by their zeroed forms.
    """
    drop_g, drop_t = draw_dropout(rng, dropout)
    if drop_g:
        global_rows = np.zeros_like(global_rows)
    if drop_t:
        enc = zeroed_conditioning(enc, keep_cuts=not dropout.drop_cuts_with_temporal)
    return global_rows, enc


# ---------------------------------------------------------------------------
# training objective
# ---------------------------------------------------------------------------


def rf_interpolate(z: np.ndarray, eps: np.ndarray, t_diff: float) -> np.ndarray:
    """Straight-line noising path: (1 - t) * clean + t * noise."""
    return (1.0 - t_diff) * z + t_diff * eps


def rf_target(z: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Velocity regression target: noise minus clean (the path derivative)."""
    return eps - z


def rf_loss(
    model: ToyDiT,
    z: LatentVideo,
    script: EventScript,
    rng: Rng,
    *,
    dropout: CondDropout | None = None,
    zero_cuts: bool = False,
    first_frame: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """One training term: mean squared velocity error plus its gradients.

    Draws t ~ Uniform(0, 1) and unit-normal noise from `rng` (in that order,
    then the dropout coins when `dropout` is given), so a fixed rng stream
    reproduces the term bitwise. When the model conditions on a first frame
    and none is supplied, the clean first frame of `z` is used.
    """
    assert_finite(z.tokens, "clean latent")
    t_diff = float(rng.uniform(()))
    eps = rng.normal(z.tokens.shape)
    drop_g = drop_t = False
    keep_cuts = False
    if dropout is not None:
        drop_g, drop_t = draw_dropout(rng, dropout)
        keep_cuts = not dropout.drop_cuts_with_temporal
    z_t = LatentVideo(
        tokens=rf_interpolate(z.tokens, eps, t_diff), timestamps=z.timestamps
    )
    if model.config.first_frame_cond and first_frame is None:
        first_frame = np.array(z.tokens[0])
    loss, grads, _ = loss_and_grads(
        model,
        z_t,
        t_diff,
        rf_target(z.tokens, eps),
        script,
        drop_global=drop_g,
        drop_temporal=drop_t,
        zero_cuts=zero_cuts,
        keep_cuts_on_drop=keep_cuts,
        first_frame=first_frame,
    )
    return loss, grads


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def guided_velocity(
    v_cond: np.ndarray, v_uncond: np.ndarray, scale: float
) -> np.ndarray:
    """Classifier-free combination, affine in the scale."""
    return v_uncond + scale * (v_cond - v_uncond)


def euler_integrate(
    velocity, z_start: np.ndarray, config: SampleConfig
) -> np.ndarray:
    """Integrate dz/dt = -v(z, t) from t=1 down to 0 in uniform steps.

    `velocity(z, t_diff, uncond)` evaluates the field; the unconditional
    branch is only evaluated at steps whose effective guidance scale differs
    from 1, so scale-1 sampling is bitwise a pure conditional trajectory.
    Raises FloatingPointError if the state leaves the finite range.
    """
    z = np.array(z_start, dtype=np.float64)
    lo, hi = config.guidance_interval
    dt = 1.0 / config.steps
    for i in range(config.steps):
        t_diff = 1.0 - i * dt
        v_cond = velocity(z, t_diff, False)
        scale = config.cfg_scale if lo <= i <= hi else 1.0
        if scale == 1.0:
            v = v_cond
        else:
            v_uncond = velocity(z, t_diff, True)
            v = guided_velocity(v_cond, v_uncond, scale)
        z = z - dt * v
        assert_finite(z, f"sampler state after step {i}")
    return z


def sample(
    model: ToyDiT,
    script: EventScript,
    config: SampleConfig,
    mode: ConditioningMode | None = None,
    *,
    first_frame: np.ndarray | None = None,
    no_cuts: bool = False,
) -> np.ndarray:
    """Generate a pixel video [T, G, G] from noise under the script.

    The unconditional guidance branch uses dropout-style zeroed conditioning
    (both caption branches dropped). With no_cuts the script's cut rows are
    removed before conditioning, forcing a cut-free generation. A model built
    with first-frame conditioning receives `first_frame` in both branches.
    """
    if no_cuts:
        script = zero_cut_inference(script)
    cfg_m = model.config
    ts = frame_timestamps(script)
    shape = (len(ts), cfg_m.patches_per_frame, cfg_m.latent_channels)
    z_start = Rng(config.seed, "sample/noise").normal(shape)

    def velocity(z_arr: np.ndarray, t_diff: float, uncond: bool) -> np.ndarray:
        z_lat = LatentVideo(tokens=z_arr, timestamps=ts)
        return forward(
            model,
            z_lat,
            t_diff,
            script,
            mode,
            drop_global=uncond,
            drop_temporal=uncond,
            first_frame=first_frame,
        )

    z_clean = euler_integrate(velocity, z_start, config)
    return unpatchify(LatentVideo(tokens=z_clean, timestamps=ts), cfg_m.patch)


def condition_on_first_frame(
    z_t: LatentVideo, first_frame: np.ndarray | None
) -> LatentVideo:
    """Concatenate a clean first-frame latent onto every frame's channels.

    With first_frame None the input is returned unchanged (conditioning
    disabled). Otherwise the result has doubled channel width: original
    channels first, the broadcast conditioning frame second.
    """
    if first_frame is None:
        return z_t
    ff = np.asarray(first_frame, dtype=np.float64)
    t_n, s_n, c_n = z_t.tokens.shape
    if ff.shape != (s_n, c_n):
        raise ValueError(
            f"first frame shape {ff.shape} does not match one frame ({s_n}, {c_n})"
        )
    tokens = np.concatenate(
        [z_t.tokens, np.broadcast_to(ff, z_t.tokens.shape)], axis=-1
    )
    return LatentVideo(tokens=tokens, timestamps=z_t.timestamps)


def zero_cut_inference(script: EventScript) -> EventScript:
    """Script with all cut conditioning removed, for forced cut-free output."""
    return script.without_cuts()


# ---------------------------------------------------------------------------
# generated-video serialization
# ---------------------------------------------------------------------------


def write_video_json(path: str | Path, pixels: np.ndarray, fps: float) -> None:
    """Write a generated video as {"fps": f, "frames": [[[row-major reals]]]}."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3:
        raise ValueError(f"pixels must be [T, G, G], got shape {pixels.shape}")
    assert_finite(pixels, "video pixels")
    doc = {"fps": float(fps), "frames": pixels.tolist()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_video_json(path: str | Path) -> tuple[np.ndarray, float]:
    """Read a generated-video JSON file back as (pixels [T, G, G], fps)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    pixels = np.asarray(doc["frames"], dtype=np.float64)
    if pixels.ndim != 3:
        raise ValueError(f"frames must be a [T, G, G] nest, got shape {pixels.shape}")
    return pixels, float(doc["fps"])


def write_video_pgms(dir_path: str | Path, pixels: np.ndarray) -> list[Path]:
    """Dump one 8-bit PGM per frame (values clipped to [0, 1] then scaled).

    Returns the written paths, frame order preserved.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3:
        raise ValueError(f"pixels must be [T, G, G], got shape {pixels.shape}")
    out_dir = Path(dir_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_n, h, w = pixels.shape
    paths = []
    scaled = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    for i in range(t_n):
        p = out_dir / f"frame_{i:04d}.pgm"
        with open(p, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(scaled[i].tobytes())
        paths.append(p)
    return paths
