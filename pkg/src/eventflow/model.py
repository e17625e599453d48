"""Toy latent-video diffusion transformer with hand-derived backprop.

The latent space is the raw patch decomposition of the pixel grid: a video
[T, G, G] becomes tokens [T, S, P*P] with S = (G/P)^2 — `patchify` is a pure
reshape, so it round-trips exactly. The model embeds those channels to its
working width internally and predicts a velocity with the same latent shape.

Each block applies, in order, residually:
  1. self-attention over all T*S tokens with factorized rotary positions
     (frame index rotates the first half of each head, patch index the
     second half), modulated by adaptive layer norm from the diffusion time;
  2. tanh-gated temporal cross-attention to the encoded event/cut rows,
     gate initialized to zero so an untrained layer is a no-op;
  3. global cross-attention to the whole-video caption rows, no positions;
  4. an MLP, adaLN-modulated like (1).

Every forward is float64 and bitwise deterministic; `loss_and_grads` returns
analytic gradients for all parameters, validated against central differences
in the test suite.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conditioning import ConditioningMode, hard_mask
from .numerics import (
    Rng,
    assert_finite,
    layer_norm,
    layer_norm_bwd,
    silu,
    silu_bwd,
    softmax_rows,
    softmax_rows_bwd,
)
from .rope import RotaryEncoder, rotate, rotate_bwd
from .timeline import (
    EventScript,
    event_midpoint_positions,
    frame_timestamps,
    rescale_map,
    rescale_timestamp,
)

__all__ = [
    "ModelConfig",
    "ToyDiT",
    "LatentVideo",
    "patchify",
    "unpatchify",
    "init_model",
    "forward",
    "loss_and_grads",
    "count_params",
    "save_checkpoint",
    "load_checkpoint",
    "config_hash",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"MINTCKPT"
CHECKPOINT_VERSION = 1
_LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. model_dim = heads * head_dim is enforced."""

    blocks: int = 4
    model_dim: int = 128
    heads: int = 4
    head_dim: int = 32
    text_dim: int = 64
    vocab_size: int = 64
    grid: int = 8
    patch: int = 4
    caption_len: int = 4
    max_events: int = 4
    rescale_length: float = 8.0
    mode: ConditioningMode = ConditioningMode.RESCALED_ROPE
    first_frame_cond: bool = False

    def __post_init__(self) -> None:
        if self.model_dim != self.heads * self.head_dim:
            raise ValueError(
                f"model_dim {self.model_dim} != heads {self.heads} * head_dim {self.head_dim}"
            )
        if self.grid % self.patch != 0:
            raise ValueError(f"grid {self.grid} not divisible by patch {self.patch}")
        if self.head_dim % 4 != 0:
            raise ValueError(
                f"head_dim must be a multiple of 4 for the factorized rotary split, got {self.head_dim}"
            )

    @property
    def patches_per_frame(self) -> int:
        return (self.grid // self.patch) ** 2

    @property
    def latent_channels(self) -> int:
        return self.patch * self.patch

    @property
    def input_channels(self) -> int:
        return self.latent_channels * (2 if self.first_frame_cond else 1)

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["mode"] = self.mode.value
        return doc

    @staticmethod
    def from_json(doc: dict) -> "ModelConfig":
        doc = dict(doc)
        doc["mode"] = ConditioningMode(doc["mode"])
        return ModelConfig(**doc)


@dataclass(frozen=True)
class LatentVideo:
    """Latent token grid [T, S, C] plus per-frame timestamps in seconds."""

    tokens: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self) -> None:
        if self.tokens.ndim != 3:
            raise ValueError("latent tokens must be [T, S, C]")
        if self.timestamps.shape != (self.tokens.shape[0],):
            raise ValueError("one timestamp per frame required")
        if self.tokens.shape[0] > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")


def patchify(video: np.ndarray, patch: int, timestamps: np.ndarray) -> LatentVideo:
    """Cut [T, G, G] pixels into non-overlapping patch tokens [T, S, P*P].

    Pure reshape; `unpatchify` inverts it exactly.
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 3 or video.shape[1] != video.shape[2]:
        raise ValueError("video must be [T, G, G]")
    g = video.shape[1]
    if g % patch != 0:
        raise ValueError(f"grid {g} not divisible by patch {patch}")
    n = g // patch
    t = video.shape[0]
    tok = (
        video.reshape(t, n, patch, n, patch)
        .transpose(0, 1, 3, 2, 4)
        .reshape(t, n * n, patch * patch)
    )
    return LatentVideo(tokens=tok, timestamps=np.asarray(timestamps, dtype=np.float64))


def unpatchify(latent: LatentVideo, patch: int) -> np.ndarray:
    """Inverse of patchify: [T, S, P*P] tokens back to [T, G, G] pixels."""
    tok = latent.tokens
    t, s, c = tok.shape
    if c != patch * patch:
        raise ValueError(f"channel dim {c} != patch*patch {patch * patch}")
    n = int(round(np.sqrt(s)))
    if n * n != s:
        raise ValueError(f"token count {s} is not a square grid")
    return (
        tok.reshape(t, n, n, patch, patch)
        .transpose(0, 1, 3, 2, 4)
        .reshape(t, n * patch, n * patch)
    )


@dataclass
class ToyDiT:
    """Named parameter tensors plus the config they were built for."""

    config: ModelConfig
    params: dict[str, np.ndarray]


def _param_specs(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Name -> (shape, init kind). Kinds: normal (fan-in scaled), zeros."""
    d_m, d_c = cfg.model_dim, cfg.text_dim
    specs: dict[str, tuple[tuple[int, ...], str]] = {
        "token_embed": ((cfg.vocab_size, d_c), "normal"),
        "cut_vector": ((d_c,), "normal"),
        "patch_embed_w": ((cfg.input_channels, d_m), "normal"),
        "patch_embed_b": ((d_m,), "zeros"),
        "patch_unembed_w": ((d_m, cfg.latent_channels), "zeros"),
        "patch_unembed_b": ((cfg.latent_channels,), "zeros"),
        "time_embed_w1": ((d_m, d_m), "normal"),
        "time_embed_b1": ((d_m,), "zeros"),
        "time_embed_w2": ((d_m, d_m), "normal"),
        "time_embed_b2": ((d_m,), "zeros"),
    }
    if cfg.mode == ConditioningMode.CONCAT_TIME:
        specs["time_feat_w1"] = ((2, d_c), "normal")
        specs["time_feat_b1"] = ((d_c,), "zeros")
        specs["time_feat_w2"] = ((d_c, d_c), "normal")
        specs["time_feat_b2"] = ((d_c,), "zeros")
    for b in range(cfg.blocks):
        p = f"block{b}."
        specs[p + "ada_w"] = ((d_m, 4 * d_m), "zeros")
        specs[p + "ada_b"] = ((4 * d_m,), "zeros")
        specs[p + "attn_qkv_w"] = ((d_m, 3 * d_m), "normal")
        specs[p + "attn_out_w"] = ((d_m, d_m), "normal")
        specs[p + "attn_out_b"] = ((d_m,), "zeros")
        specs[p + "tx_q_w"] = ((d_m, d_m), "normal")
        specs[p + "tx_kv_w"] = ((d_c, 2 * d_m), "normal")
        specs[p + "tx_out_w"] = ((d_m, d_m), "normal")
        specs[p + "tx_out_b"] = ((d_m,), "zeros")
        specs[p + "tx_gate"] = ((), "zeros")
        specs[p + "gx_q_w"] = ((d_m, d_m), "normal")
        specs[p + "gx_kv_w"] = ((d_c, 2 * d_m), "normal")
        specs[p + "gx_out_w"] = ((d_m, d_m), "normal")
        specs[p + "gx_out_b"] = ((d_m,), "zeros")
        specs[p + "mlp_w1"] = ((d_m, 4 * d_m), "normal")
        specs[p + "mlp_b1"] = ((4 * d_m,), "zeros")
        specs[p + "mlp_w2"] = ((4 * d_m, d_m), "normal")
        specs[p + "mlp_b2"] = ((d_m,), "zeros")
    return specs


def init_model(cfg: ModelConfig, seed: int) -> ToyDiT:
    """Deterministic initialization from one seed.

    Weights are fan-in-scaled normals drawn from per-tensor labeled streams;
    gates, adaLN modulation, and the patch unembedding start at zero so the
    initial velocity prediction is exactly zero. Each block's temporal
    cross-attention starts as a copy of its global cross-attention.
    """
    rng = Rng(seed, "init")
    params: dict[str, np.ndarray] = {}
    for name, (shape, kind) in _param_specs(cfg).items():
        if kind == "zeros":
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = shape[0] if len(shape) > 1 else max(1, int(np.prod(shape)))
            params[name] = rng.split(name).normal(shape) / np.sqrt(fan_in)
    for b in range(cfg.blocks):
        p = f"block{b}."
        for part in ("q_w", "kv_w", "out_w", "out_b"):
            params[p + "tx_" + part] = params[p + "gx_" + part].copy()
    return ToyDiT(config=cfg, params=params)


def count_params(model: ToyDiT) -> int:
    return int(sum(p.size for p in model.params.values()))


# ---------------------------------------------------------------------------
# conditioning row construction (model-side, with gradient bookkeeping)
# ---------------------------------------------------------------------------


@dataclass
class _CondRows:
    tokens: np.ndarray  # [R, Dc]
    positions: np.ndarray | None  # [R] rotary positions
    allowed: np.ndarray | None  # [T, R] hard-mask pattern
    row_token_ids: np.ndarray  # [R] vocab id per row, -1 for cut rows
    time_feats: np.ndarray | None  # [R, 2] inputs to the time-feature MLP
    tf_cache: tuple | None  # time-feature MLP cache
    events_dropped: bool
    cuts_dropped: bool


def _encode_cond_rows(
    model: ToyDiT,
    script: EventScript,
    drop_temporal: bool,
    zero_cuts: bool,
    keep_cuts_on_drop: bool = False,
) -> _CondRows:
    """Event and cut rows for temporal cross-attention, mode-aware.

    With drop_temporal the embeddings are zeroed and every timestamp treated
    as zero (rotary positions 0, time features 0); hard-mask spans widen to
    the whole video so each frame still has attendable rows — their values
    are zero, so the layer output is exactly zero either way. With
    keep_cuts_on_drop, cut rows survive a temporal drop with their true
    embeddings and timing while event rows are still zeroed.
    """
    cfg = model.config
    p = model.params
    cuts = () if zero_cuts else script.cuts
    drop_events = drop_temporal
    drop_cuts = drop_temporal and not keep_cuts_on_drop
    l_c = [len(ev.tokens) for ev in script.events]
    n_ev_rows = sum(l_c)
    ids = np.array(
        [t for ev in script.events for t in ev.tokens] + [-1] * len(cuts),
        dtype=np.int64,
    )
    rows = np.zeros((len(ids), cfg.text_dim), dtype=np.float64)
    if not drop_events:
        rows[:n_ev_rows] = p["token_embed"][ids[:n_ev_rows]]
    if not drop_cuts:
        rows[n_ev_rows:] = p["cut_vector"]
    positions: np.ndarray | None = None
    allowed: np.ndarray | None = None
    time_feats: np.ndarray | None = None
    tf_cache: tuple | None = None
    mode = cfg.mode
    if mode in (ConditioningMode.RESCALED_ROPE, ConditioningMode.VANILLA_ROPE):
        if mode == ConditioningMode.RESCALED_ROPE:
            mids = event_midpoint_positions(script, cfg.rescale_length)
            cut_pos = [rescale_timestamp(c.time, script, cfg.rescale_length) for c in cuts]
        else:
            mids = np.array([ev.midpoint for ev in script.events], dtype=np.float64)
            cut_pos = [c.time for c in cuts]
        positions = np.concatenate(
            [np.repeat(mids, l_c), np.asarray(cut_pos, dtype=np.float64)]
        )
        if drop_events:
            positions[:n_ev_rows] = 0.0
        if drop_cuts:
            positions[n_ev_rows:] = 0.0
    elif mode == ConditioningMode.HARD_MASK:
        ts = frame_timestamps(script)
        t_col = ts[:, None]
        ev_spans = np.repeat(
            np.array([[ev.start, ev.end] for ev in script.events]), l_c, axis=0
        )
        ev_allowed = (t_col >= ev_spans[None, :, 0]) & (t_col <= ev_spans[None, :, 1])
        if drop_events:
            ev_allowed = np.ones_like(ev_allowed)
        cut_times = np.array([c.time for c in cuts], dtype=np.float64)
        cut_allowed = np.abs(t_col - cut_times[None, :]) <= 1.0 / script.fps + 1e-9
        if drop_cuts:
            cut_allowed = np.ones_like(cut_allowed)
        allowed = np.concatenate([ev_allowed, cut_allowed], axis=1)
    elif mode == ConditioningMode.CONCAT_TIME:
        spans = [
            (ev.start / script.duration, ev.end / script.duration)
            for ev, lc in zip(script.events, l_c)
            for _ in range(lc)
        ] + [(c.time / script.duration, c.time / script.duration) for c in cuts]
        time_feats = np.asarray(spans, dtype=np.float64).reshape(len(ids), 2)
        if drop_events:
            time_feats[:n_ev_rows] = 0.0
        if drop_cuts:
            time_feats[n_ev_rows:] = 0.0
        h_pre = time_feats @ p["time_feat_w1"] + p["time_feat_b1"]
        h_act = silu(h_pre)
        emb = h_act @ p["time_feat_w2"] + p["time_feat_b2"]
        tf_cache = (time_feats, h_pre, h_act)
        rows = rows + emb
    return _CondRows(
        tokens=rows,
        positions=positions,
        allowed=allowed,
        row_token_ids=ids,
        time_feats=time_feats,
        tf_cache=tf_cache,
        events_dropped=drop_events,
        cuts_dropped=drop_cuts,
    )


def _cond_rows_bwd(
    model: ToyDiT, cond: _CondRows, d_rows: np.ndarray, grads: dict[str, np.ndarray]
) -> None:
    """Scatter row gradients back into token_embed / cut_vector / time MLP."""
    p = model.params
    if cond.tf_cache is not None:
        time_feats, h_pre, h_act = cond.tf_cache
        grads["time_feat_b2"] += d_rows.sum(axis=0)
        grads["time_feat_w2"] += h_act.T @ d_rows
        dh_act = d_rows @ p["time_feat_w2"].T
        dh_pre = silu_bwd(dh_act, h_pre)
        grads["time_feat_b1"] += dh_pre.sum(axis=0)
        grads["time_feat_w1"] += time_feats.T @ dh_pre
    ev = cond.row_token_ids >= 0
    if not cond.events_dropped:
        np.add.at(grads["token_embed"], cond.row_token_ids[ev], d_rows[ev])
    if not cond.cuts_dropped and np.any(~ev):
        grads["cut_vector"] += d_rows[~ev].sum(axis=0)


def _query_positions(
    cfg: ModelConfig,
    script: EventScript,
    drop_temporal: bool,
    keep_cuts_on_drop: bool = False,
):
    ts = frame_timestamps(script)
    zero_queries = drop_temporal and not keep_cuts_on_drop
    if cfg.mode == ConditioningMode.RESCALED_ROPE:
        if zero_queries:
            return np.zeros(len(ts), dtype=np.float64)
        return np.asarray(rescale_map(script, cfg.rescale_length).apply(ts))
    if cfg.mode == ConditioningMode.VANILLA_ROPE:
        return np.zeros(len(ts)) if zero_queries else ts
    return None


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _timestep_features(t_diff: float, dim: int) -> np.ndarray:
    """Sinusoidal features of the diffusion time (scaled by 1000)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    phases = (t_diff * 1000.0) * freqs
    return np.concatenate([np.cos(phases), np.sin(phases)])


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)  # [H, N, dh]


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _rope_self(q: np.ndarray, frame_pos: np.ndarray, patch_pos: np.ndarray, enc: RotaryEncoder, inverse: bool = False) -> np.ndarray:
    """Factorized rotation: frame index on the first half of each head's dims,
    patch index on the second half. q: [H, N, dh]."""
    dh = q.shape[-1]
    half = dh // 2
    fn = rotate_bwd if inverse else rotate
    out = np.empty_like(q)
    out[..., :half] = fn(q[..., :half], frame_pos[None, :], enc)
    out[..., half:] = fn(q[..., half:], patch_pos[None, :], enc)
    return out


def forward(
    model: ToyDiT,
    z_t: LatentVideo,
    t_diff: float,
    script: EventScript,
    mode: ConditioningMode | None = None,
    *,
    drop_global: bool = False,
    drop_temporal: bool = False,
    zero_cuts: bool = False,
    keep_cuts_on_drop: bool = False,
    first_frame: np.ndarray | None = None,
    disable_spatial_rope: bool = False,
    skip_temporal: bool = False,
) -> np.ndarray:
    """Predict the rectified-flow velocity for noisy latents.

    Returns an array with z_t's latent shape. `mode`, if given, must match
    the config (the weights are mode-specific).
    """
    v, _ = _forward_impl(
        model,
        z_t,
        t_diff,
        script,
        mode,
        drop_global=drop_global,
        drop_temporal=drop_temporal,
        zero_cuts=zero_cuts,
        keep_cuts_on_drop=keep_cuts_on_drop,
        first_frame=first_frame,
        disable_spatial_rope=disable_spatial_rope,
        skip_temporal=skip_temporal,
        want_cache=False,
    )
    return v


def _forward_impl(
    model: ToyDiT,
    z_t: LatentVideo,
    t_diff: float,
    script: EventScript,
    mode: ConditioningMode | None = None,
    *,
    drop_global: bool = False,
    drop_temporal: bool = False,
    zero_cuts: bool = False,
    keep_cuts_on_drop: bool = False,
    first_frame: np.ndarray | None = None,
    disable_spatial_rope: bool = False,
    skip_temporal: bool = False,
    want_cache: bool = False,
):
    cfg = model.config
    if mode is not None and mode != cfg.mode:
        raise ValueError(f"model was built for {cfg.mode.value}, not {mode.value}")
    p = model.params
    tok = np.asarray(z_t.tokens, dtype=np.float64)
    t_n, s_n, c_in = tok.shape
    if s_n != cfg.patches_per_frame or c_in != cfg.latent_channels:
        raise ValueError(
            f"latent shape {tok.shape} does not match config "
            f"(S={cfg.patches_per_frame}, C={cfg.latent_channels})"
        )
    if t_n != len(frame_timestamps(script)):
        raise ValueError(
            f"latent has {t_n} frames but the script timeline has "
            f"{len(frame_timestamps(script))}"
        )
    if cfg.first_frame_cond:
        if first_frame is None:
            raise ValueError("config has first-frame conditioning on; pass first_frame")
        ff = np.asarray(first_frame, dtype=np.float64)
        if ff.shape != (s_n, cfg.latent_channels):
            raise ValueError(f"first_frame must be [S, C], got {ff.shape}")
        tok = np.concatenate([tok, np.broadcast_to(ff, tok.shape)], axis=-1)
    elif first_frame is not None:
        raise ValueError("first_frame given but config.first_frame_cond is off")
    n = t_n * s_n
    x = tok.reshape(n, tok.shape[-1]) @ p["patch_embed_w"] + p["patch_embed_b"]

    # diffusion-time embedding
    feats = _timestep_features(float(t_diff), cfg.model_dim)
    te_pre = feats @ p["time_embed_w1"] + p["time_embed_b1"]
    te_act = silu(te_pre)
    temb = te_act @ p["time_embed_w2"] + p["time_embed_b2"]

    # conditioning rows
    cond = _encode_cond_rows(model, script, drop_temporal, zero_cuts, keep_cuts_on_drop)
    gids = np.asarray(script.global_tokens, dtype=np.int64)
    g_rows = np.zeros((len(gids), cfg.text_dim), dtype=np.float64)
    if not drop_global and len(gids):
        g_rows = p["token_embed"][gids].copy()
    qpos = _query_positions(cfg, script, drop_temporal, keep_cuts_on_drop)

    frame_pos = np.repeat(np.arange(t_n, dtype=np.float64), s_n)
    patch_pos = np.tile(np.arange(s_n, dtype=np.float64), t_n)
    if disable_spatial_rope:
        patch_pos = np.zeros_like(patch_pos)
    dh = cfg.head_dim
    enc_half = RotaryEncoder(dh // 2)
    enc_full = RotaryEncoder(dh)
    scale_self = 1.0 / np.sqrt(dh)

    caches = {"x0": x.copy(), "cond": cond, "g_rows": g_rows, "blocks": []}
    for b in range(cfg.blocks):
        pref = f"block{b}."
        blk: dict = {}
        # adaLN modulation (shift/scale for self-attn and MLP sublayers)
        mod = temb @ p[pref + "ada_w"] + p[pref + "ada_b"]
        sh1, sc1, sh2, sc2 = np.split(mod, 4)
        blk["mod"] = (sh1, sc1, sh2, sc2)

        # --- self-attention ---
        x_in1 = x
        h_ln1, ln1_cache = layer_norm(x_in1, eps=_LN_EPS)
        h1 = h_ln1 * (1.0 + sc1) + sh1
        qkv = h1 @ p[pref + "attn_qkv_w"]
        q, k, v = np.split(qkv, 3, axis=-1)
        qh = _split_heads(q, cfg.heads)
        kh = _split_heads(k, cfg.heads)
        vh = _split_heads(v, cfg.heads)
        qr = _rope_self(qh, frame_pos, patch_pos, enc_half)
        kr = _rope_self(kh, frame_pos, patch_pos, enc_half)
        logits = np.einsum("hnd,hmd->hnm", qr, kr) * scale_self
        attn = softmax_rows(logits)
        av = np.einsum("hnm,hmd->hnd", attn, vh)
        a_out = _merge_heads(av) @ p[pref + "attn_out_w"] + p[pref + "attn_out_b"]
        x = x_in1 + a_out
        blk["self"] = (x_in1, ln1_cache, h_ln1, h1, qh, kh, vh, qr, kr, attn, av)

        # --- temporal cross-attention (tanh-gated) ---
        x_in2 = x
        blk["skip_temporal"] = skip_temporal or cond.tokens.shape[0] == 0
        if not blk["skip_temporal"]:
            h_ln2, ln2_cache = layer_norm(x_in2, eps=_LN_EPS)
            tq = h_ln2 @ p[pref + "tx_q_w"]
            tkv = cond.tokens @ p[pref + "tx_kv_w"]
            tk, tv = np.split(tkv, 2, axis=-1)
            tqh = _split_heads(tq, cfg.heads)
            tkh = _split_heads(tk, cfg.heads)
            tvh = _split_heads(tv, cfg.heads)
            if qpos is not None:
                qpos_tok = np.repeat(qpos, s_n)
                tqr = rotate(tqh, qpos_tok[None, :], enc_full)
                tkr = rotate(tkh, cond.positions[None, :], enc_full)
            else:
                tqr, tkr = tqh, tkh
            t_logits = np.einsum("hnd,hrd->hnr", tqr, tkr) * scale_self
            if cond.allowed is not None:
                allow_tok = np.repeat(cond.allowed, s_n, axis=0)
                t_logits = np.where(allow_tok[None, :, :], t_logits, -np.inf)
            t_attn = softmax_rows(t_logits)
            t_av = np.einsum("hnr,hrd->hnd", t_attn, tvh)
            t_merged = _merge_heads(t_av)
            t_out = t_merged @ p[pref + "tx_out_w"] + p[pref + "tx_out_b"]
            gate = np.tanh(p[pref + "tx_gate"])
            x = x_in2 + gate * t_out
            blk["temporal"] = (
                x_in2, ln2_cache, h_ln2, tqh, tkh, tvh, tqr, tkr, t_attn, t_av, t_out
            )

        # --- global cross-attention ---
        x_in3 = x
        blk["skip_global"] = len(gids) == 0
        if not blk["skip_global"]:
            h_ln3, ln3_cache = layer_norm(x_in3, eps=_LN_EPS)
            gq = h_ln3 @ p[pref + "gx_q_w"]
            gkv = g_rows @ p[pref + "gx_kv_w"]
            gk, gv = np.split(gkv, 2, axis=-1)
            gqh = _split_heads(gq, cfg.heads)
            gkh = _split_heads(gk, cfg.heads)
            gvh = _split_heads(gv, cfg.heads)
            g_logits = np.einsum("hnd,hrd->hnr", gqh, gkh) * scale_self
            g_attn = softmax_rows(g_logits)
            g_av = np.einsum("hnr,hrd->hnd", g_attn, gvh)
            g_out = _merge_heads(g_av) @ p[pref + "gx_out_w"] + p[pref + "gx_out_b"]
            x = x_in3 + g_out
            blk["global"] = (x_in3, ln3_cache, h_ln3, gqh, gkh, gvh, g_attn, g_av)

        # --- MLP ---
        x_in4 = x
        h_ln4, ln4_cache = layer_norm(x_in4, eps=_LN_EPS)
        h4 = h_ln4 * (1.0 + sc2) + sh2
        m_pre = h4 @ p[pref + "mlp_w1"] + p[pref + "mlp_b1"]
        m_act = silu(m_pre)
        m_out = m_act @ p[pref + "mlp_w2"] + p[pref + "mlp_b2"]
        x = x_in4 + m_out
        blk["mlp"] = (x_in4, ln4_cache, h_ln4, h4, m_pre, m_act)
        caches["blocks"].append(blk)

    h_fin, fin_cache = layer_norm(x, eps=_LN_EPS)
    v_flat = h_fin @ p["patch_unembed_w"] + p["patch_unembed_b"]
    assert_finite(v_flat, "model forward output")
    v = v_flat.reshape(t_n, s_n, cfg.latent_channels)
    if not want_cache:
        return v, None
    caches.update(
        x_final=x,
        h_fin=h_fin,
        fin_cache=fin_cache,
        temb_path=(feats, te_pre, te_act),
        temb=temb,
        tok_in=tok,
        qpos=qpos,
        frame_pos=frame_pos,
        patch_pos=patch_pos,
        shape=(t_n, s_n),
        gids=gids,
        drop_global=drop_global,
    )
    return v, caches


def loss_and_grads(
    model: ToyDiT,
    z_t: LatentVideo,
    t_diff: float,
    target_v: np.ndarray,
    script: EventScript,
    **fwd_kwargs,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Mean-squared velocity error and analytic parameter gradients.

    Returns (loss, grads keyed like params, predicted velocity).
    """
    cfg = model.config
    p = model.params
    v, cache = _forward_impl(model, z_t, t_diff, script, want_cache=True, **fwd_kwargs)
    target_v = np.asarray(target_v, dtype=np.float64)
    if target_v.shape != v.shape:
        raise ValueError(f"target shape {target_v.shape} != prediction {v.shape}")
    diff = v - target_v
    loss = float(np.mean(diff * diff))
    assert_finite(loss, "rectified-flow loss")

    grads = {name: np.zeros_like(arr) for name, arr in p.items()}
    t_n, s_n = cache["shape"]
    n = t_n * s_n
    dv_flat = (2.0 / diff.size) * diff.reshape(n, cfg.latent_channels)

    # final projection
    grads["patch_unembed_b"] += dv_flat.sum(axis=0)
    grads["patch_unembed_w"] += cache["h_fin"].T @ dv_flat
    dx = layer_norm_bwd(dv_flat @ p["patch_unembed_w"].T, cache["fin_cache"])

    d_temb = np.zeros(cfg.model_dim, dtype=np.float64)
    cond: _CondRows = cache["cond"]
    d_cond_rows = np.zeros_like(cond.tokens)
    d_g_rows = np.zeros_like(cache["g_rows"])
    dh_enc_half = RotaryEncoder(cfg.head_dim // 2)
    enc_full = RotaryEncoder(cfg.head_dim)
    scale_self = 1.0 / np.sqrt(cfg.head_dim)
    frame_pos, patch_pos = cache["frame_pos"], cache["patch_pos"]
    qpos = cache["qpos"]

    for b in reversed(range(cfg.blocks)):
        pref = f"block{b}."
        blk = cache["blocks"][b]
        sh1, sc1, sh2, sc2 = blk["mod"]
        d_mod = np.zeros(4 * cfg.model_dim, dtype=np.float64)

        # --- MLP backward ---
        x_in4, ln4_cache, h_ln4, h4, m_pre, m_act = blk["mlp"]
        d_mout = dx
        grads[pref + "mlp_b2"] += d_mout.sum(axis=0)
        grads[pref + "mlp_w2"] += m_act.T @ d_mout
        d_mact = d_mout @ p[pref + "mlp_w2"].T
        d_mpre = silu_bwd(d_mact, m_pre)
        grads[pref + "mlp_b1"] += d_mpre.sum(axis=0)
        grads[pref + "mlp_w1"] += h4.T @ d_mpre
        dh4 = d_mpre @ p[pref + "mlp_w1"].T
        d_mod[3 * cfg.model_dim:] += np.sum(dh4 * h_ln4, axis=0)  # d sc2
        d_mod[2 * cfg.model_dim: 3 * cfg.model_dim] += dh4.sum(axis=0)  # d sh2
        dx = dx + layer_norm_bwd(dh4 * (1.0 + sc2), ln4_cache)

        # --- global cross-attention backward ---
        if not blk["skip_global"]:
            x_in3, ln3_cache, h_ln3, gqh, gkh, gvh, g_attn, g_av = blk["global"]
            d_gout = dx
            grads[pref + "gx_out_b"] += d_gout.sum(axis=0)
            g_merged = _merge_heads(g_av)
            grads[pref + "gx_out_w"] += g_merged.T @ d_gout
            d_gav = _split_heads(d_gout @ p[pref + "gx_out_w"].T, cfg.heads)
            d_gattn = np.einsum("hnd,hrd->hnr", d_gav, gvh)
            d_gvh = np.einsum("hnr,hnd->hrd", g_attn, d_gav)
            d_glogits = softmax_rows_bwd(d_gattn, g_attn) * scale_self
            d_gqh = np.einsum("hnr,hrd->hnd", d_glogits, gkh)
            d_gkh = np.einsum("hnr,hnd->hrd", d_glogits, gqh)
            d_gq = _merge_heads(d_gqh)
            d_gkv = np.concatenate([_merge_heads(d_gkh), _merge_heads(d_gvh)], axis=-1)
            grads[pref + "gx_kv_w"] += cache["g_rows"].T @ d_gkv
            d_g_rows += d_gkv @ p[pref + "gx_kv_w"].T
            grads[pref + "gx_q_w"] += h_ln3.T @ d_gq
            dx = dx + layer_norm_bwd(d_gq @ p[pref + "gx_q_w"].T, ln3_cache)

        # --- temporal cross-attention backward ---
        if not blk["skip_temporal"]:
            (x_in2, ln2_cache, h_ln2, tqh, tkh, tvh, tqr, tkr, t_attn, t_av, t_out) = blk["temporal"]
            gate_raw = p[pref + "tx_gate"]
            gate = np.tanh(gate_raw)
            d_tout = gate * dx
            grads[pref + "tx_gate"] += np.sum(dx * t_out) * (1.0 - gate * gate)
            grads[pref + "tx_out_b"] += d_tout.sum(axis=0)
            t_merged = _merge_heads(t_av)
            grads[pref + "tx_out_w"] += t_merged.T @ d_tout
            d_tav = _split_heads(d_tout @ p[pref + "tx_out_w"].T, cfg.heads)
            d_tattn = np.einsum("hnd,hrd->hnr", d_tav, tvh)
            d_tvh = np.einsum("hnr,hnd->hrd", t_attn, d_tav)
            d_tlogits = softmax_rows_bwd(d_tattn, t_attn) * scale_self
            d_tqr = np.einsum("hnr,hrd->hnd", d_tlogits, tkr)
            d_tkr = np.einsum("hnr,hnd->hrd", d_tlogits, tqr)
            if qpos is not None:
                qpos_tok = np.repeat(qpos, s_n)
                d_tqh = rotate_bwd(d_tqr, qpos_tok[None, :], enc_full)
                d_tkh = rotate_bwd(d_tkr, cond.positions[None, :], enc_full)
            else:
                d_tqh, d_tkh = d_tqr, d_tkr
            d_tq = _merge_heads(d_tqh)
            d_tkv = np.concatenate([_merge_heads(d_tkh), _merge_heads(d_tvh)], axis=-1)
            grads[pref + "tx_kv_w"] += cond.tokens.T @ d_tkv
            d_cond_rows += d_tkv @ p[pref + "tx_kv_w"].T
            grads[pref + "tx_q_w"] += h_ln2.T @ d_tq
            dx = dx + layer_norm_bwd(d_tq @ p[pref + "tx_q_w"].T, ln2_cache)

        # --- self-attention backward ---
        x_in1, ln1_cache, h_ln1, h1, qh, kh, vh, qr, kr, attn, av = blk["self"]
        d_aout = dx
        grads[pref + "attn_out_b"] += d_aout.sum(axis=0)
        merged = _merge_heads(av)
        grads[pref + "attn_out_w"] += merged.T @ d_aout
        d_av = _split_heads(d_aout @ p[pref + "attn_out_w"].T, cfg.heads)
        d_attn = np.einsum("hnd,hmd->hnm", d_av, vh)
        d_vh = np.einsum("hnm,hnd->hmd", attn, d_av)
        d_logits = softmax_rows_bwd(d_attn, attn) * scale_self
        d_qr = np.einsum("hnm,hmd->hnd", d_logits, kr)
        d_kr = np.einsum("hnm,hnd->hmd", d_logits, qr)
        d_qh = _rope_self(d_qr, frame_pos, patch_pos, dh_enc_half, inverse=True)
        d_kh = _rope_self(d_kr, frame_pos, patch_pos, dh_enc_half, inverse=True)
        d_qkv = np.concatenate(
            [_merge_heads(d_qh), _merge_heads(d_kh), _merge_heads(d_vh)], axis=-1
        )
        grads[pref + "attn_qkv_w"] += h1.T @ d_qkv
        dh1 = d_qkv @ p[pref + "attn_qkv_w"].T
        d_mod[cfg.model_dim: 2 * cfg.model_dim] += np.sum(dh1 * h_ln1, axis=0)  # d sc1
        d_mod[: cfg.model_dim] += dh1.sum(axis=0)  # d sh1
        dx = dx + layer_norm_bwd(dh1 * (1.0 + sc1), ln1_cache)

        grads[pref + "ada_b"] += d_mod
        grads[pref + "ada_w"] += np.outer(cache["temb"], d_mod)
        d_temb += d_mod @ p[pref + "ada_w"].T

    # timestep-embedding MLP backward
    feats, te_pre, te_act = cache["temb_path"]
    grads["time_embed_b2"] += d_temb
    grads["time_embed_w2"] += np.outer(te_act, d_temb)
    d_te_act = d_temb @ p["time_embed_w2"].T
    d_te_pre = silu_bwd(d_te_act, te_pre)
    grads["time_embed_b1"] += d_te_pre
    grads["time_embed_w1"] += np.outer(feats, d_te_pre)

    # patch embedding backward
    grads["patch_embed_b"] += dx.sum(axis=0)
    tok_flat = cache["tok_in"].reshape(n, -1)
    grads["patch_embed_w"] += tok_flat.T @ dx

    # conditioning rows backward
    _cond_rows_bwd(model, cond, d_cond_rows, grads)
    if not cache["drop_global"] and len(cache["gids"]):
        np.add.at(grads["token_embed"], cache["gids"], d_g_rows)

    for name, g in grads.items():
        assert_finite(g, f"gradient of {name}")
    return loss, grads, v


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------


def config_hash(cfg: ModelConfig) -> str:
    canonical = json.dumps(cfg.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("checkpoint truncated")
    return raw


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def save_checkpoint(
    path: str | Path,
    model: ToyDiT,
    extra_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    """Binary little-endian checkpoint with config hash and tensor manifest.

    `extra_tensors` (e.g. optimizer moments under an "opt." prefix) are
    stored alongside the parameters and returned separately on load.
    """
    tensors = dict(model.params)
    for name, arr in (extra_tensors or {}).items():
        if name in tensors:
            raise ValueError(f"extra tensor name collides with parameter: {name}")
        tensors[name] = arr
    header = {
        "config": model.config.to_json(),
        "config_hash": config_hash(model.config),
        "tensor_count": len(tensors),
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_str(fh, json.dumps(header, sort_keys=True))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            _write_str(fh, name)
            fh.write(struct.pack("<B", 0))  # dtype tag 0 = float64
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ToyDiT, dict[str, np.ndarray]]:
    """Load a checkpoint, validating magic, version, config hash, and count.

    Returns (model, extra tensors) where extra tensors are the non-parameter
    entries (optimizer state), keyed by their stored names.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(_read_str(fh))
        cfg = ModelConfig.from_json(header["config"])
        if header["config_hash"] != config_hash(cfg):
            raise ValueError("checkpoint config hash mismatch")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(int(header["tensor_count"])):
            name = _read_str(fh)
            (tag,) = struct.unpack("<B", _read_exact(fh, 1))
            if tag != 0:
                raise ValueError(f"unknown dtype tag {tag}")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = [
                struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank)
            ]
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
            tensors[name] = data.reshape(dims).astype(np.float64)
        if fh.read(1):
            raise ValueError("trailing bytes after last tensor")
    expected = set(_param_specs(cfg))
    params = {k: v for k, v in tensors.items() if k in expected}
    extra = {k: v for k, v in tensors.items() if k not in expected}
    missing = expected - set(params)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:4]}")
    for name, arr in params.items():
        assert_finite(arr, f"checkpoint tensor {name}")
    return ToyDiT(config=cfg, params=params), extra
