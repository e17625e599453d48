"""Model tests: patch round-trip, init contracts, forward invariants,
finite-difference gradient validation, checkpoint format."""

import numpy as np
import pytest

from eventflow.conditioning import ConditioningMode
from eventflow.model import (
    CHECKPOINT_MAGIC,
    LatentVideo,
    ModelConfig,
    ToyDiT,
    config_hash,
    count_params,
    forward,
    init_model,
    load_checkpoint,
    loss_and_grads,
    patchify,
    save_checkpoint,
    unpatchify,
)
from eventflow.numerics import Rng, grad_check
from eventflow.timeline import EventScript, SceneCut, TemporalCaption, frame_timestamps


def tiny_config(mode=ConditioningMode.RESCALED_ROPE, **kw):
    defaults = dict(
        blocks=1,
        model_dim=8,
        heads=1,
        head_dim=8,
        text_dim=6,
        vocab_size=8,
        grid=4,
        patch=2,
        caption_len=2,
        max_events=4,
        rescale_length=8.0,
        mode=mode,
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


def tiny_script(cuts=()):
    return EventScript(
        duration=1.5,
        fps=2.0,
        global_tokens=(1, 2),
        events=(
            TemporalCaption(tokens=(3, 4), start=0.0, end=1.0),
            TemporalCaption(tokens=(5, 6), start=1.0, end=1.5),
        ),
        cuts=tuple(SceneCut(t) for t in cuts),
    )


def tiny_latent(cfg, script, seed=0):
    ts = frame_timestamps(script)
    tok = Rng(seed, "z").normal((len(ts), cfg.patches_per_frame, cfg.latent_channels))
    return LatentVideo(tokens=tok, timestamps=ts)


def randomize_zero_init(model, scale=0.2, seed=9):
    """Give the zero-initialized tensors small random values so every path
    carries gradient signal (gates, adaLN, unembed, biases)."""
    rng = Rng(seed, "perturb")
    for name, arr in model.params.items():
        if np.all(arr == 0.0):
            model.params[name] = rng.split(name).normal(arr.shape) * scale
    return model


class TestPatchify:
    def test_round_trip_exact(self):
        video = Rng(1, "v").normal((12, 8, 8))
        ts = np.arange(12) / 4.0
        lat = patchify(video, 4, ts)
        assert lat.tokens.shape == (12, 4, 16)
        np.testing.assert_array_equal(unpatchify(lat, 4), video)

    def test_patch_one_is_pixel_tokens(self):
        video = Rng(2, "v").normal((3, 4, 4))
        lat = patchify(video, 1, np.arange(3, dtype=np.float64))
        assert lat.tokens.shape == (3, 16, 1)
        np.testing.assert_array_equal(unpatchify(lat, 1), video)

    def test_patch_layout_row_major_blocks(self):
        video = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        lat = patchify(video, 2, np.array([0.0]))
        # first token is the top-left 2x2 block in row-major order
        np.testing.assert_array_equal(lat.tokens[0, 0], [0, 1, 4, 5])
        np.testing.assert_array_equal(lat.tokens[0, 3], [10, 11, 14, 15])

    def test_rejects_indivisible_grid(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((1, 6, 6)), 4, np.array([0.0]))

    def test_latent_video_invariants(self):
        with pytest.raises(ValueError):
            LatentVideo(tokens=np.zeros((2, 4, 4)), timestamps=np.array([0.0]))
        with pytest.raises(ValueError):
            LatentVideo(
                tokens=np.zeros((2, 4, 4)), timestamps=np.array([1.0, 0.5])
            )


class TestConfig:
    def test_dim_invariant(self):
        with pytest.raises(ValueError):
            tiny_config(model_dim=10)

    def test_grid_divisibility(self):
        with pytest.raises(ValueError):
            tiny_config(grid=5)

    def test_head_dim_multiple_of_four(self):
        with pytest.raises(ValueError):
            tiny_config(model_dim=6, head_dim=6)

    def test_json_round_trip(self):
        cfg = tiny_config(mode=ConditioningMode.HARD_MASK)
        assert ModelConfig.from_json(cfg.to_json()) == cfg

    def test_hash_changes_with_config(self):
        a = config_hash(tiny_config())
        b = config_hash(tiny_config(blocks=2))
        assert a != b
        assert a == config_hash(tiny_config())


class TestInit:
    def test_gates_and_output_head_start_zero(self):
        model = init_model(tiny_config(blocks=2), seed=0)
        assert np.all(model.params["block0.tx_gate"] == 0.0)
        assert np.all(model.params["block1.tx_gate"] == 0.0)
        assert np.all(model.params["patch_unembed_w"] == 0.0)

    def test_initial_velocity_is_exactly_zero(self):
        cfg = tiny_config()
        model = init_model(cfg, seed=0)
        script = tiny_script()
        v = forward(model, tiny_latent(cfg, script), 0.5, script)
        np.testing.assert_array_equal(v, np.zeros_like(v))

    def test_temporal_layer_copies_global_init(self):
        model = init_model(tiny_config(), seed=3)
        np.testing.assert_array_equal(
            model.params["block0.tx_q_w"], model.params["block0.gx_q_w"]
        )
        np.testing.assert_array_equal(
            model.params["block0.tx_kv_w"], model.params["block0.gx_kv_w"]
        )

    def test_deterministic_and_seed_sensitive(self):
        a = init_model(tiny_config(), seed=0)
        b = init_model(tiny_config(), seed=0)
        c = init_model(tiny_config(), seed=1)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        assert any(
            not np.array_equal(a.params[n], c.params[n]) for n in a.params
        )

    def test_param_names_unique_and_finite(self):
        model = init_model(tiny_config(blocks=3), seed=5)
        names = list(model.params)
        assert len(names) == len(set(names))
        for arr in model.params.values():
            assert np.all(np.isfinite(arr))


class TestCountParams:
    def test_matches_manual_sum(self):
        model = init_model(tiny_config(blocks=2), seed=0)
        assert count_params(model) == sum(p.size for p in model.params.values())

    def test_gate_scalars_contribute_blocks_params(self):
        model = init_model(tiny_config(blocks=3), seed=0)
        gates = [n for n in model.params if n.endswith("tx_gate")]
        assert len(gates) == 3
        assert sum(model.params[n].size for n in gates) == 3

    def test_block_scaling(self):
        c1 = count_params(init_model(tiny_config(blocks=1), seed=0))
        c2 = count_params(init_model(tiny_config(blocks=2), seed=0))
        c4 = count_params(init_model(tiny_config(blocks=4), seed=0))
        assert c4 - c2 == 2 * (c2 - c1)


class TestForward:
    def test_output_shape_matches_latent(self):
        for mode in ConditioningMode:
            cfg = tiny_config(mode=mode)
            model = randomize_zero_init(init_model(cfg, seed=1))
            script = tiny_script(cuts=(0.75,))
            z = tiny_latent(cfg, script)
            v = forward(model, z, 0.3, script)
            assert v.shape == z.tokens.shape
            assert np.all(np.isfinite(v))

    def test_bitwise_deterministic(self):
        cfg = tiny_config()
        model = randomize_zero_init(init_model(cfg, seed=1))
        script = tiny_script()
        z = tiny_latent(cfg, script)
        np.testing.assert_array_equal(
            forward(model, z, 0.3, script), forward(model, z, 0.3, script)
        )

    def test_zero_gate_is_bitwise_noop_of_temporal_layer(self):
        cfg = tiny_config(blocks=2)
        model = randomize_zero_init(init_model(cfg, seed=2))
        for b in range(cfg.blocks):
            model.params[f"block{b}.tx_gate"] = np.zeros(())
        script = tiny_script(cuts=(0.75,))
        z = tiny_latent(cfg, script)
        with_layer = forward(model, z, 0.7, script)
        without_layer = forward(model, z, 0.7, script, skip_temporal=True)
        np.testing.assert_array_equal(with_layer, without_layer)

    def test_mode_mismatch_rejected(self):
        cfg = tiny_config()
        model = init_model(cfg, seed=0)
        script = tiny_script()
        with pytest.raises(ValueError):
            forward(
                model, tiny_latent(cfg, script), 0.5, script,
                mode=ConditioningMode.HARD_MASK,
            )

    def test_frame_count_mismatch_rejected(self):
        cfg = tiny_config()
        model = init_model(cfg, seed=0)
        script = tiny_script()
        bad = LatentVideo(
            tokens=np.zeros((2, cfg.patches_per_frame, cfg.latent_channels)),
            timestamps=np.array([0.0, 0.5]),
        )
        with pytest.raises(ValueError):
            forward(model, bad, 0.5, script)

    def test_dropout_branches_run_and_stay_finite(self):
        for mode in ConditioningMode:
            cfg = tiny_config(mode=mode)
            model = randomize_zero_init(init_model(cfg, seed=4))
            script = tiny_script(cuts=(0.75,))
            z = tiny_latent(cfg, script)
            v = forward(
                model, z, 0.2, script, drop_global=True, drop_temporal=True
            )
            assert np.all(np.isfinite(v))

    def test_spatial_permutation_equivariance_without_spatial_rope(self):
        cfg = tiny_config()
        model = randomize_zero_init(init_model(cfg, seed=6))
        script = tiny_script()
        z = tiny_latent(cfg, script, seed=7)
        perm = Rng(8, "perm").permutation(cfg.patches_per_frame)
        z_perm = LatentVideo(tokens=z.tokens[:, perm, :], timestamps=z.timestamps)
        v = forward(model, z, 0.4, script, disable_spatial_rope=True)
        v_perm = forward(model, z_perm, 0.4, script, disable_spatial_rope=True)
        np.testing.assert_allclose(v_perm, v[:, perm, :], atol=1e-12)

    def test_temporal_drop_can_keep_cut_rows_alive(self):
        cfg = tiny_config()
        model = randomize_zero_init(init_model(cfg, seed=14))
        script = tiny_script(cuts=(0.75,))
        z = tiny_latent(cfg, script)
        dropped = forward(model, z, 0.2, script, drop_temporal=True)
        kept = forward(
            model, z, 0.2, script, drop_temporal=True, keep_cuts_on_drop=True
        )
        assert not np.allclose(dropped, kept)
        # with no cuts in the script the flag has nothing to keep
        plain = tiny_script()
        z2 = tiny_latent(cfg, plain)
        np.testing.assert_array_equal(
            forward(model, z2, 0.2, plain, drop_temporal=True),
            forward(model, z2, 0.2, plain, drop_temporal=True, keep_cuts_on_drop=True),
        )

    def test_spatial_rope_breaks_permutation_symmetry(self):
        cfg = tiny_config()
        model = randomize_zero_init(init_model(cfg, seed=6))
        script = tiny_script()
        z = tiny_latent(cfg, script, seed=7)
        perm = np.array([1, 0, 3, 2])
        z_perm = LatentVideo(tokens=z.tokens[:, perm, :], timestamps=z.timestamps)
        v = forward(model, z, 0.4, script)
        v_perm = forward(model, z_perm, 0.4, script)
        assert not np.allclose(v_perm, v[:, perm, :])


class TestFirstFrameConditioning:
    def test_doubled_input_channels(self):
        cfg = tiny_config(first_frame_cond=True)
        model = init_model(cfg, seed=0)
        assert model.params["patch_embed_w"].shape[0] == 2 * cfg.latent_channels

    def test_forward_requires_frame_when_enabled(self):
        cfg = tiny_config(first_frame_cond=True)
        model = randomize_zero_init(init_model(cfg, seed=1))
        script = tiny_script()
        z = tiny_latent(cfg, script)
        with pytest.raises(ValueError):
            forward(model, z, 0.5, script)
        ff = z.tokens[0]
        v = forward(model, z, 0.5, script, first_frame=ff)
        assert v.shape == z.tokens.shape

    def test_forward_rejects_frame_when_disabled(self):
        cfg = tiny_config()
        model = init_model(cfg, seed=1)
        script = tiny_script()
        z = tiny_latent(cfg, script)
        with pytest.raises(ValueError):
            forward(model, z, 0.5, script, first_frame=z.tokens[0])


def flat_grad_check(model, names, script, cuts_in_z_seed=11, **fwd_kwargs):
    """Finite-difference check of loss_and_grads over the named tensors."""
    cfg = model.config
    z = tiny_latent(cfg, script, seed=cuts_in_z_seed)
    target = Rng(12, "target").normal(z.tokens.shape)
    shapes = [model.params[n].shape for n in names]
    sizes = [int(np.prod(s)) if s else 1 for s in shapes]

    def pack():
        return np.concatenate(
            [model.params[n].reshape(-1) for n in names]
        )

    def unpack(vec):
        off = 0
        for n, s, size in zip(names, shapes, sizes):
            model.params[n] = vec[off: off + size].reshape(s)
            off += size

    x0 = pack()

    def f(vec):
        unpack(vec)
        loss, grads, _ = loss_and_grads(model, z, 0.37, target, script, **fwd_kwargs)
        g = np.concatenate([grads[n].reshape(-1) for n in names])
        return loss, g

    try:
        return grad_check(f, x0)
    finally:
        unpack(x0)


class TestGradients:
    def test_full_model_gradients_rescaled(self):
        cfg = tiny_config(mode=ConditioningMode.RESCALED_ROPE)
        model = randomize_zero_init(init_model(cfg, seed=21))
        script = tiny_script(cuts=(0.75,))
        err = flat_grad_check(model, sorted(model.params), script)
        assert err <= 1e-4

    def test_mode_specific_gradients_concat_time(self):
        cfg = tiny_config(mode=ConditioningMode.CONCAT_TIME)
        model = randomize_zero_init(init_model(cfg, seed=22))
        script = tiny_script(cuts=(0.75,))
        names = [
            "time_feat_w1", "time_feat_b1", "time_feat_w2", "time_feat_b2",
            "token_embed", "cut_vector", "block0.tx_kv_w", "block0.tx_gate",
        ]
        assert flat_grad_check(model, names, script) <= 1e-4

    def test_mode_specific_gradients_hard_mask(self):
        cfg = tiny_config(mode=ConditioningMode.HARD_MASK)
        model = randomize_zero_init(init_model(cfg, seed=23))
        script = tiny_script(cuts=(0.75,))
        names = ["block0.tx_q_w", "block0.tx_kv_w", "block0.tx_gate", "token_embed"]
        assert flat_grad_check(model, names, script) <= 1e-4

    def test_gradients_with_first_frame_conditioning(self):
        cfg = tiny_config(first_frame_cond=True)
        model = randomize_zero_init(init_model(cfg, seed=24))
        script = tiny_script()
        z = tiny_latent(cfg, script, seed=25)
        names = ["patch_embed_w", "block0.attn_qkv_w"]
        err = flat_grad_check(
            model, names, script, first_frame=np.asarray(z.tokens[0])
        )
        assert err <= 1e-4

    def test_prediction_returned_matches_forward(self):
        cfg = tiny_config()
        model = randomize_zero_init(init_model(cfg, seed=26))
        script = tiny_script()
        z = tiny_latent(cfg, script)
        target = np.zeros_like(z.tokens)
        loss, _, v = loss_and_grads(model, z, 0.5, target, script)
        np.testing.assert_array_equal(v, forward(model, z, 0.5, script))
        assert loss == pytest.approx(float(np.mean(v * v)), abs=1e-15)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        cfg = tiny_config(blocks=2, mode=ConditioningMode.CONCAT_TIME)
        model = randomize_zero_init(init_model(cfg, seed=31))
        path = tmp_path / "model.ckpt"
        extra = {"opt.step": np.array(17.0), "opt.token_embed.m": np.ones((8, 6))}
        save_checkpoint(path, model, extra)
        loaded, loaded_extra = load_checkpoint(path)
        assert loaded.config == cfg
        assert set(loaded.params) == set(model.params)
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name], model.params[name])
        np.testing.assert_array_equal(loaded_extra["opt.step"], np.array(17.0))
        np.testing.assert_array_equal(
            loaded_extra["opt.token_embed.m"], np.ones((8, 6))
        )

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        cfg = tiny_config()
        model = init_model(cfg, seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_config_hash_tampering_detected(self, tmp_path):
        cfg = tiny_config()
        model = init_model(cfg, seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        data = path.read_bytes()
        # flip the stored blocks count inside the header JSON
        tampered = data.replace(b'"blocks": 1', b'"blocks": 2', 1)
        assert tampered != data
        path.write_bytes(tampered)
        with pytest.raises(ValueError, match="hash"):
            load_checkpoint(path)

    def test_file_starts_with_magic(self, tmp_path):
        model = init_model(tiny_config(), seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        assert path.read_bytes().startswith(CHECKPOINT_MAGIC)
