"""Temporal-caption conditioning for the cross-attention layer.

Four interchangeable modes place caption rows and video queries on a shared
positional axis:

- rescaled-rope: queries at remapped frame positions, every token of event n
  keyed at the fixed midpoint (n-1)L + L/2, cuts keyed at the remapped cut
  time. Distances are duration-invariant (see `timeline`).
- vanilla-rope: raw seconds, event rows keyed at raw midpoints.
- hard-mask: no rotation; attention logits forced to -inf for (frame, row)
  pairs outside the event span, cuts attendable within one frame step.
- concat-time: no positional treatment in attention; normalized (start, end)
  features accompany each row for a learned embedding to consume.

`EncodedConditioning` carries the raw embedding rows untouched in every mode
plus the per-row rotation positions; rotation itself happens inside the
attention primitive on projected q/k (or directly on probe vectors in the
analytics below). `bias_map` renders the pre-softmax positional landscape
either for one probe vector or, with probe=None, for the exact isotropic
mean, which is what the property checks assert on.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .numerics import assert_finite, softmax_rows
from .rope import RotaryEncoder, attn_bias, mean_bias, rotate
from .timeline import EventScript, frame_timestamps, rescale_map, rescale_timestamp

__all__ = [
    "ConditioningMode",
    "EncodedConditioning",
    "encode_events",
    "encode_cuts",
    "encode_conditioning",
    "query_positions",
    "hard_mask",
    "temporal_xattn",
    "bias_map",
    "write_bias_map_csv",
    "write_bias_map_pgm",
]


class ConditioningMode(str, Enum):
    RESCALED_ROPE = "rescaled-rope"
    VANILLA_ROPE = "vanilla-rope"
    HARD_MASK = "hard-mask"
    CONCAT_TIME = "concat-time"

    @property
    def uses_rotation(self) -> bool:
        return self in (ConditioningMode.RESCALED_ROPE, ConditioningMode.VANILLA_ROPE)


@dataclass(frozen=True)
class EncodedConditioning:
    """Caption rows prepared for cross-attention under one mode.

    tokens: [R, Dc] embedding rows, events first (caption-major) then cuts.
    positions: [R] rotation positions, or None when the mode does not rotate.
    event_of_row / cut_of_row: 0-based source indices (-1 where not applicable).
    spans: [R, 2] source span per row; cut rows carry (t_cut, t_cut).
    time_features: [R, 2] duration-normalized (start, end), concat-time only.
    event_spans: [N_e, 2] full script layout (for query positioning).
    """

    tokens: np.ndarray
    positions: np.ndarray | None
    event_of_row: np.ndarray
    cut_of_row: np.ndarray
    spans: np.ndarray
    time_features: np.ndarray | None
    event_spans: np.ndarray
    n_events: int
    n_cuts: int
    mode: ConditioningMode
    L: float
    fps: float
    duration: float

    @property
    def n_rows(self) -> int:
        return self.tokens.shape[0]


def _event_spans(script: EventScript) -> np.ndarray:
    return np.array([[ev.start, ev.end] for ev in script.events], dtype=np.float64)


def encode_events(
    embeddings: np.ndarray, script: EventScript, L: float, mode: ConditioningMode
) -> EncodedConditioning:
    """Lay out event-caption embeddings as conditioning rows.

    Args:
        embeddings: [N_e, L_c, Dc] caption token embeddings, one row group
            per event in script order.
        script: validated event script.
        L: remap stretch length.
        mode: conditioning mode.

    Returns:
        EncodedConditioning with N_e * L_c rows and no cut rows. Row content
        is the input embeddings bitwise; positions depend on the mode
        (remapped midpoints, raw midpoints, or none).
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n_e = len(script.events)
    if embeddings.ndim != 3 or embeddings.shape[0] != n_e:
        raise ValueError(
            f"expected embeddings [n_events={n_e}, caption_len, dim], got {embeddings.shape}"
        )
    l_c = embeddings.shape[1]
    tokens = embeddings.reshape(n_e * l_c, embeddings.shape[2]).copy()
    spans = np.repeat(_event_spans(script), l_c, axis=0)
    event_of_row = np.repeat(np.arange(n_e), l_c)
    if mode == ConditioningMode.RESCALED_ROPE:
        mids = (np.arange(n_e, dtype=np.float64) + 0.5) * float(L)
        positions = np.repeat(mids, l_c)
    elif mode == ConditioningMode.VANILLA_ROPE:
        mids = np.array([ev.midpoint for ev in script.events], dtype=np.float64)
        positions = np.repeat(mids, l_c)
    else:
        positions = None
    time_features = None
    if mode == ConditioningMode.CONCAT_TIME:
        time_features = spans / script.duration
    return EncodedConditioning(
        tokens=tokens,
        positions=positions,
        event_of_row=event_of_row,
        cut_of_row=np.full(n_e * l_c, -1, dtype=np.int64),
        spans=spans,
        time_features=time_features,
        event_spans=_event_spans(script),
        n_events=n_e,
        n_cuts=0,
        mode=mode,
        L=float(L),
        fps=script.fps,
        duration=script.duration,
    )


def encode_cuts(
    cut_vector: np.ndarray,
    script: EventScript,
    L: float,
    mode: ConditioningMode = ConditioningMode.RESCALED_ROPE,
) -> EncodedConditioning:
    """Lay out scene cuts as conditioning rows (one shared vector per cut).

    A cut behaves as a zero-length event at t_cut: under the remapped mode
    its row is keyed at rescale(t_cut), under the vanilla mode at raw t_cut.
    """
    cut_vector = np.asarray(cut_vector, dtype=np.float64).reshape(-1)
    n_c = len(script.cuts)
    tokens = np.tile(cut_vector, (n_c, 1))
    times = np.array([c.time for c in script.cuts], dtype=np.float64)
    spans = np.stack([times, times], axis=1) if n_c else np.zeros((0, 2))
    if mode == ConditioningMode.RESCALED_ROPE:
        positions = np.array(
            [rescale_timestamp(t, script, L) for t in times], dtype=np.float64
        )
    elif mode == ConditioningMode.VANILLA_ROPE:
        positions = times.copy()
    else:
        positions = None
    time_features = spans / script.duration if mode == ConditioningMode.CONCAT_TIME else None
    return EncodedConditioning(
        tokens=tokens,
        positions=positions,
        event_of_row=np.full(n_c, -1, dtype=np.int64),
        cut_of_row=np.arange(n_c, dtype=np.int64),
        spans=spans,
        time_features=time_features,
        event_spans=_event_spans(script),
        n_events=0,
        n_cuts=n_c,
        mode=mode,
        L=float(L),
        fps=script.fps,
        duration=script.duration,
    )


def encode_conditioning(
    embeddings: np.ndarray,
    cut_vector: np.ndarray | None,
    script: EventScript,
    L: float,
    mode: ConditioningMode,
) -> EncodedConditioning:
    """Concatenate event rows and cut rows (events first)."""
    ev = encode_events(embeddings, script, L, mode)
    if cut_vector is None or len(script.cuts) == 0:
        return ev
    cu = encode_cuts(cut_vector, script, L, mode)
    positions = None
    if ev.positions is not None:
        positions = np.concatenate([ev.positions, cu.positions])
    time_features = None
    if ev.time_features is not None:
        time_features = np.concatenate([ev.time_features, cu.time_features], axis=0)
    return EncodedConditioning(
        tokens=np.concatenate([ev.tokens, cu.tokens], axis=0),
        positions=positions,
        event_of_row=np.concatenate([ev.event_of_row, cu.event_of_row]),
        cut_of_row=np.concatenate([ev.cut_of_row, cu.cut_of_row]),
        spans=np.concatenate([ev.spans, cu.spans], axis=0),
        time_features=time_features,
        event_spans=ev.event_spans,
        n_events=ev.n_events,
        n_cuts=cu.n_cuts,
        mode=mode,
        L=float(L),
        fps=script.fps,
        duration=script.duration,
    )


def query_positions(
    timestamps: np.ndarray, script: EventScript, L: float, mode: ConditioningMode
) -> np.ndarray | None:
    """Rotation positions for video queries at `timestamps` (None if unrotated)."""
    if mode == ConditioningMode.RESCALED_ROPE:
        return np.asarray(rescale_map(script, L).apply(timestamps), dtype=np.float64)
    if mode == ConditioningMode.VANILLA_ROPE:
        return np.asarray(timestamps, dtype=np.float64)
    return None


def hard_mask(timestamps: np.ndarray, enc: EncodedConditioning) -> np.ndarray:
    """Boolean [T, R] map of allowed (frame, row) pairs for hard-mask mode.

    Event rows are attendable by frames inside the closed span; cut rows by
    frames within one frame step of the cut time.
    """
    t = np.asarray(timestamps, dtype=np.float64)[:, None]
    lo = enc.spans[None, :, 0]
    hi = enc.spans[None, :, 1]
    allowed = (t >= lo) & (t <= hi)
    is_cut = enc.cut_of_row >= 0
    if np.any(is_cut):
        step = 1.0 / enc.fps
        near = np.abs(t - enc.spans[None, :, 0]) <= step + 1e-9
        allowed = np.where(is_cut[None, :], near, allowed)
    return allowed


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    r, d = x.shape
    return x.reshape(r, heads, d // heads)


def temporal_xattn(
    video_tokens: np.ndarray,
    timestamps: np.ndarray,
    cond: EncodedConditioning,
    mode: ConditioningMode | None = None,
    L: float | None = None,
    heads: int = 1,
) -> np.ndarray:
    """Projection-free scaled-dot-product cross-attention over caption rows.

    Queries are the video tokens themselves (requires token dim == row dim);
    rotation positions come from `cond` and the script layout it carries.
    The learned model layer applies the same math to projected q/k/v.

    Args:
        video_tokens: [T, S, D] queries.
        timestamps: [T] frame times in seconds.
        cond: encoded conditioning rows.
        mode: conditioning mode; defaults to the mode `cond` was encoded for,
            and must match it when given (rows carry mode-specific positions).
        L: stretch length; defaults to (and must match) the one in `cond`.
        heads: head count; D must divide evenly and each head must be even.

    Returns:
        [T, S, D] attention output.
    """
    if mode is not None and mode != cond.mode:
        raise ValueError(
            f"conditioning was encoded for {cond.mode.value}, not {mode.value}"
        )
    if L is not None and float(L) != cond.L:
        raise ValueError(f"conditioning was encoded with L={cond.L}, not {L}")
    mode = cond.mode
    video_tokens = np.asarray(video_tokens, dtype=np.float64)
    if video_tokens.ndim != 3:
        raise ValueError("video_tokens must be [T, S, D]")
    t_n, s_n, d = video_tokens.shape
    if cond.n_rows == 0:
        raise ValueError("empty conditioning: no caption rows to attend to")
    if cond.tokens.shape[1] != d:
        raise ValueError(
            f"token dim {d} does not match conditioning row dim {cond.tokens.shape[1]}"
        )
    if d % heads != 0:
        raise ValueError(f"token dim {d} not divisible by {heads} heads")
    dh = d // heads
    q = _split_heads(video_tokens.reshape(t_n * s_n, d), heads)
    k = _split_heads(cond.tokens, heads)
    v = _split_heads(cond.tokens, heads)
    if mode.uses_rotation:
        enc = RotaryEncoder(dh)
        qpos = _query_positions_from_spans(
            np.asarray(timestamps, dtype=np.float64), cond.event_spans, cond.L, mode
        )
        qpos_tok = np.repeat(qpos, s_n)
        q = rotate(q, qpos_tok[:, None], enc)
        k = rotate(k, cond.positions[:, None], enc)
    logits = np.einsum("nhd,rhd->hnr", q, k) / np.sqrt(dh)
    if mode == ConditioningMode.HARD_MASK:
        allowed = hard_mask(timestamps, cond)
        allowed_tok = np.repeat(allowed, s_n, axis=0)
        logits = np.where(allowed_tok[None, :, :], logits, -np.inf)
    attn = softmax_rows(logits)
    out = np.einsum("hnr,rhd->nhd", attn, v).reshape(t_n * s_n, d)
    assert_finite(out, "temporal_xattn output")
    return out.reshape(t_n, s_n, d)


def _query_positions_from_spans(
    timestamps: np.ndarray, event_spans: np.ndarray, L: float, mode: ConditioningMode
) -> np.ndarray:
    if mode == ConditioningMode.VANILLA_ROPE:
        return timestamps
    from .timeline import RescaleMap

    return np.asarray(
        RescaleMap(
            starts=event_spans[:, 0], ends=event_spans[:, 1], length=float(L)
        ).apply(timestamps),
        dtype=np.float64,
    )


def bias_map(
    script: EventScript,
    L: float,
    mode: ConditioningMode,
    d: int = 32,
    probe: np.ndarray | None = None,
) -> np.ndarray:
    """Pre-softmax positional bias between each frame and each caption source.

    Returns a [T, N_e + N_cut] matrix, event columns first. With a probe
    vector the entries are attn_bias(probe, probe, qpos - kpos); with
    probe=None they are the exact isotropic mean of that quantity. Hard-mask
    yields a 0 / -inf attendability pattern; concat-time applies no
    positional treatment, so its map is constant.
    """
    ts = frame_timestamps(script)
    n_cols = len(script.events) + len(script.cuts)
    enc = RotaryEncoder(d)
    if probe is not None:
        probe = np.asarray(probe, dtype=np.float64)
        if probe.shape != (d,):
            raise ValueError(f"probe must have shape ({d},), got {probe.shape}")
    if mode == ConditioningMode.HARD_MASK:
        spans = _event_spans(script)
        out = np.full((len(ts), n_cols), -np.inf)
        inside = (ts[:, None] >= spans[None, :, 0]) & (ts[:, None] <= spans[None, :, 1])
        out[:, : len(script.events)][inside] = 0.0
        step = 1.0 / script.fps
        for j, c in enumerate(script.cuts):
            near = np.abs(ts - c.time) <= step + 1e-9
            out[near, len(script.events) + j] = 0.0
        return out
    if mode == ConditioningMode.CONCAT_TIME:
        level = float(probe @ probe) if probe is not None else float(mean_bias(enc, 0.0))
        return np.full((len(ts), n_cols), level)
    if mode == ConditioningMode.RESCALED_ROPE:
        qpos = np.asarray(rescale_map(script, L).apply(ts), dtype=np.float64)
        kpos = np.concatenate(
            [
                (np.arange(len(script.events), dtype=np.float64) + 0.5) * float(L),
                np.array(
                    [rescale_timestamp(c.time, script, L) for c in script.cuts],
                    dtype=np.float64,
                ),
            ]
        )
    else:
        qpos = ts
        kpos = np.concatenate(
            [
                np.array([ev.midpoint for ev in script.events], dtype=np.float64),
                np.array([c.time for c in script.cuts], dtype=np.float64),
            ]
        )
    dpos = qpos[:, None] - kpos[None, :]
    if probe is None:
        return np.asarray(mean_bias(enc, dpos), dtype=np.float64)
    flat = np.asarray(attn_bias(probe, probe, dpos.ravel(), enc), dtype=np.float64)
    return flat.reshape(dpos.shape)


def write_bias_map_csv(path: str | Path, bias: np.ndarray) -> None:
    """Write a bias map as CSV, one row per frame, one column per source."""
    bias = np.asarray(bias, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        for row in bias:
            fh.write(",".join(_fmt_float(x) for x in row))
            fh.write("\n")


def _fmt_float(x: float) -> str:
    if np.isneginf(x):
        return "-inf"
    return format(float(x), ".17g")


def write_bias_map_pgm(path: str | Path, bias: np.ndarray) -> None:
    """Write a bias map as binary 8-bit PGM, min-max normalized per file.

    The finite maximum maps to 255 and the finite minimum to 0; -inf entries
    (hard-mask blocked pairs) render as 0. A constant map renders as 255.
    """
    bias = np.asarray(bias, dtype=np.float64)
    finite = np.isfinite(bias)
    if not np.any(finite):
        raise ValueError("bias map has no finite entries")
    lo = bias[finite].min()
    hi = bias[finite].max()
    if hi > lo:
        scaled = (bias - lo) / (hi - lo)
    else:
        scaled = np.ones_like(bias)
    scaled = np.where(finite, scaled, 0.0)
    pixels = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
