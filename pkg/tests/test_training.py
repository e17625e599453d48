"""Training-loop tests: config, schedule, optimizer, batch objective, resume."""

import csv
from pathlib import Path

import numpy as np
import pytest

from eventflow.diffusion import CondDropout
from eventflow.model import ModelConfig, init_model, save_checkpoint, unpatchify
from eventflow.numerics import Rng
from eventflow.timeline import (
    EventScript,
    TemporalCaption,
    ValidationError,
    frame_timestamps,
)
from eventflow.training import (
    AdamW,
    TrainConfig,
    batch_loss,
    global_grad_norm,
    learning_rate,
    load_train_checkpoint,
    prepare_item,
    save_train_checkpoint,
    to_model_units,
    to_pixels,
    train,
)


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        blocks=1,
        model_dim=8,
        heads=1,
        head_dim=8,
        text_dim=8,
        vocab_size=16,
        grid=8,
        patch=4,
        caption_len=2,
        max_events=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_script(duration: float = 1.5, fps: float = 2.0) -> EventScript:
    half = duration / 2.0
    return EventScript(
        duration=duration,
        fps=fps,
        global_tokens=(1,),
        events=(
            TemporalCaption(tokens=(2,), start=0.0, end=half),
            TemporalCaption(tokens=(3,), start=half, end=duration),
        ),
        cuts=(),
    )


def tiny_corpus(n: int = 3, seed: int = 0) -> list[tuple[EventScript, np.ndarray]]:
    rng = Rng(seed, "test/tiny-corpus")
    out = []
    for i in range(n):
        script = tiny_script()
        t = len(frame_timestamps(script))
        out.append((script, rng.uniform((t, 8, 8))))
    return out


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-3
        assert cfg.warmup_steps == 100
        assert cfg.clip_norm == 0.05
        assert cfg.batch_size == 16
        assert cfg.total_steps == 3000

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"lr": 0.0},
            {"lr": -1e-3},
            {"lr": float("nan")},
            {"warmup_steps": -1},
            {"clip_norm": 0.0},
            {"clip_norm": -0.1},
            {"batch_size": 0},
            {"total_steps": -1},
            {"weight_decay": -0.01},
            {"beta1": 1.0},
            {"beta2": -0.1},
            {"adam_eps": 0.0},
            {"checkpoint_every": -2},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValidationError):
            TrainConfig(**kwargs)

    def test_json_round_trip(self):
        cfg = TrainConfig(lr=5e-4, warmup_steps=7, batch_size=3, seed=11)
        assert TrainConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_field_rejected(self):
        doc = TrainConfig().to_json()
        doc["momentum"] = 0.9
        with pytest.raises(ValidationError):
            TrainConfig.from_json(doc)


class TestLearningRate:
    def test_linear_warmup_then_constant(self):
        cfg = TrainConfig(lr=1e-3, warmup_steps=100)
        assert learning_rate(cfg, 0) == pytest.approx(1e-5)
        assert learning_rate(cfg, 49) == pytest.approx(5e-4)
        assert learning_rate(cfg, 99) == pytest.approx(1e-3)
        assert learning_rate(cfg, 100) == 1e-3
        assert learning_rate(cfg, 2999) == 1e-3

    def test_monotone_during_warmup(self):
        cfg = TrainConfig(lr=2e-3, warmup_steps=10)
        rates = [learning_rate(cfg, s) for s in range(15)]
        assert all(b > a for a, b in zip(rates[:9], rates[1:10]))
        assert rates[10:] == [2e-3] * 5

    def test_zero_warmup_is_constant(self):
        cfg = TrainConfig(warmup_steps=0)
        assert learning_rate(cfg, 0) == cfg.lr

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            learning_rate(TrainConfig(), -1)


class TestUnitConversion:
    def test_endpoints(self):
        assert to_model_units(np.array(0.0)) == -1.0
        assert to_model_units(np.array(1.0)) == 1.0
        assert to_model_units(np.array(0.5)) == 0.0
        assert to_pixels(np.array(-1.0)) == 0.0
        assert to_pixels(np.array(1.0)) == 1.0

    def test_round_trip_on_pixel_range(self):
        px = Rng(0, "test/px").uniform((5, 8, 8))
        np.testing.assert_allclose(to_pixels(to_model_units(px)), px, atol=1e-15)

    def test_out_of_range_units_clip(self):
        units = np.array([-3.0, 2.5])
        assert to_pixels(units).tolist() == [0.0, 1.0]

    def test_prepare_item_shapes_and_units(self):
        script = tiny_script()
        video = Rng(0, "test/prep").uniform((3, 8, 8))
        latent = prepare_item(script, video, patch=4)
        assert latent.tokens.shape == (3, 4, 16)
        np.testing.assert_array_equal(latent.timestamps, frame_timestamps(script))
        assert latent.tokens.min() >= -1.0 and latent.tokens.max() <= 1.0
        back = to_pixels(unpatchify(latent, patch=4))
        np.testing.assert_allclose(back, video, atol=1e-15)

    def test_prepare_item_rejects_nonfinite(self):
        video = np.full((3, 8, 8), np.nan)
        with pytest.raises(Exception):
            prepare_item(tiny_script(), video, patch=4)


class TestAdamW:
    def test_descends_quadratic(self):
        cfg = TrainConfig(lr=0.1, warmup_steps=0, weight_decay=0.0)
        params = {"x": np.array([1.0, -2.0])}
        opt = AdamW(params, cfg)
        for _ in range(200):
            grads = {"x": 2.0 * params["x"]}
            opt.apply(params, grads, cfg.lr)
        assert np.abs(params["x"]).max() < 1e-3

    def test_first_step_is_signed_lr(self):
        cfg = TrainConfig(lr=0.01, warmup_steps=0, weight_decay=0.0)
        params = {"x": np.array([0.0, 0.0])}
        opt = AdamW(params, cfg)
        opt.apply(params, {"x": np.array([3.0, -0.5])}, cfg.lr)
        np.testing.assert_allclose(params["x"], [-0.01, 0.01], rtol=1e-6)

    def test_weight_decay_shrinks_without_gradient(self):
        cfg = TrainConfig(lr=0.1, warmup_steps=0, weight_decay=0.5)
        params = {"x": np.array([4.0])}
        opt = AdamW(params, cfg)
        opt.apply(params, {"x": np.zeros(1)}, cfg.lr)
        assert params["x"][0] == pytest.approx(4.0 * (1.0 - 0.1 * 0.5))

    def test_state_round_trip_bitwise(self):
        cfg = TrainConfig(lr=0.05, warmup_steps=0)
        rng = Rng(0, "test/adamw")
        params = {"a": rng.normal((3, 2)), "b": rng.normal((4,))}
        opt = AdamW(params, cfg)
        for _ in range(5):
            opt.apply(params, {k: rng.normal(v.shape) for k, v in params.items()}, 0.05)
        restored = AdamW({k: np.zeros_like(v) for k, v in params.items()}, cfg)
        restored.load_state(opt.state_tensors())
        assert restored.step_count == opt.step_count
        for k in params:
            np.testing.assert_array_equal(restored.m[k], opt.m[k])
            np.testing.assert_array_equal(restored.v[k], opt.v[k])

    def test_load_state_missing_key_raises(self):
        cfg = TrainConfig()
        opt = AdamW({"a": np.zeros(2)}, cfg)
        state = opt.state_tensors()
        del state["opt.m.a"]
        with pytest.raises(ValueError):
            opt.load_state(state)

    def test_mismatched_grad_keys_raise(self):
        opt = AdamW({"a": np.zeros(2)}, TrainConfig())
        with pytest.raises(ValueError):
            opt.apply({"a": np.zeros(2)}, {"b": np.zeros(2)}, 1e-3)


class TestGradClip:
    def test_norm_of_known_grads(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert global_grad_norm(grads) == pytest.approx(5.0)

    def test_clip_scales_to_threshold(self):
        from eventflow.training import _clip_grads

        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        pre = _clip_grads(grads, 0.05)
        assert pre == pytest.approx(5.0)
        assert global_grad_norm(grads) == pytest.approx(0.05)

    def test_no_clip_below_threshold(self):
        from eventflow.training import _clip_grads

        grads = {"a": np.array([0.01])}
        before = grads["a"].copy()
        pre = _clip_grads(grads, 0.05)
        assert pre == pytest.approx(0.01)
        np.testing.assert_array_equal(grads["a"], before)


class TestBatchLoss:
    def make_batch(self, n=4):
        model = init_model(tiny_model_config(), seed=1)
        corpus = tiny_corpus(n)
        batch = [
            (prepare_item(script, video, 4), script) for script, video in corpus
        ]
        fresh_rngs = lambda: [Rng(7, f"test/batch/item{i}") for i in range(n)]
        return model, batch, fresh_rngs

    def test_permutation_invariance(self):
        model, batch, fresh_rngs = self.make_batch(3)
        loss_a, grads_a = batch_loss(model, batch, fresh_rngs(), dropout=CondDropout())
        order = [2, 0, 1]
        rngs_b = fresh_rngs()
        loss_b, grads_b = batch_loss(
            model,
            [batch[i] for i in order],
            [rngs_b[i] for i in order],
            dropout=CondDropout(),
        )
        assert loss_b == pytest.approx(loss_a, rel=1e-12)
        for k in grads_a:
            np.testing.assert_allclose(grads_b[k], grads_a[k], rtol=1e-12, atol=1e-15)

    def test_mean_reduction_of_duplicates(self):
        model, batch, _fresh = self.make_batch(1)
        rng_label = lambda: Rng(3, "test/batch/dup")
        loss_one, grads_one = batch_loss(model, batch, [rng_label()])
        loss_two, grads_two = batch_loss(model, batch * 2, [rng_label(), rng_label()])
        assert loss_two == loss_one
        for k in grads_one:
            np.testing.assert_array_equal(grads_two[k], grads_one[k])

    def test_empty_batch_rejected(self):
        model, _, _ = self.make_batch(1)
        with pytest.raises(ValueError):
            batch_loss(model, [], [])

    def test_rng_count_mismatch_rejected(self):
        model, batch, fresh_rngs = self.make_batch(2)
        with pytest.raises(ValueError):
            batch_loss(model, batch, fresh_rngs()[:1])


class TestTrainLoop:
    def quick_config(self, **overrides) -> TrainConfig:
        base = dict(
            lr=1e-2,
            warmup_steps=2,
            clip_norm=0.05,
            batch_size=2,
            total_steps=5,
            checkpoint_every=0,
            seed=42,
        )
        base.update(overrides)
        return TrainConfig(**base)

    def test_runs_and_logs(self, tmp_path):
        model = init_model(tiny_model_config(), seed=0)
        cfg = self.quick_config()
        log = tmp_path / "loss.csv"
        result = train(model, tiny_corpus(), cfg, log_path=log)
        assert result.steps_run == 5
        assert len(result.losses) == 5
        assert all(np.isfinite(result.losses))
        rows = list(csv.reader(log.open()))
        assert rows[0] == ["step", "loss", "grad_norm"]
        assert len(rows) == 6
        for i, row in enumerate(rows[1:]):
            assert int(row[0]) == i
            assert float(row[1]) == result.losses[i]
            assert float(row[2]) == result.grad_norms[i]

    def test_deterministic(self):
        cfg = self.quick_config()
        results = []
        for _ in range(2):
            model = init_model(tiny_model_config(), seed=0)
            results.append(train(model, tiny_corpus(), cfg))
        assert results[0].losses == results[1].losses
        for k in results[0].model.params:
            np.testing.assert_array_equal(
                results[0].model.params[k], results[1].model.params[k]
            )

    def test_resume_is_bitwise(self, tmp_path):
        corpus = tiny_corpus()
        cfg = self.quick_config(total_steps=6)

        model_full = init_model(tiny_model_config(), seed=0)
        full_log = tmp_path / "full.csv"
        full_ckpt = tmp_path / "full.ckpt"
        train(
            model_full, corpus, cfg, log_path=full_log, checkpoint_path=full_ckpt
        )

        model_half = init_model(tiny_model_config(), seed=0)
        half_cfg = TrainConfig(**{**cfg.to_json(), "total_steps": 3})
        part_log = tmp_path / "part.csv"
        part_ckpt = tmp_path / "part.ckpt"
        train(
            model_half, corpus, half_cfg, log_path=part_log, checkpoint_path=part_ckpt
        )
        resumed_model, opt, start = load_train_checkpoint(part_ckpt, cfg)
        assert start == 3
        train(
            resumed_model,
            corpus,
            cfg,
            log_path=part_log,
            checkpoint_path=part_ckpt,
            optimizer=opt,
            start_step=start,
        )
        assert part_ckpt.read_bytes() == full_ckpt.read_bytes()
        assert part_log.read_text() == full_log.read_text()

    def test_periodic_checkpoint_written(self, tmp_path):
        model = init_model(tiny_model_config(), seed=0)
        ckpt = tmp_path / "run.ckpt"
        cfg = self.quick_config(total_steps=4, checkpoint_every=2)
        train(model, tiny_corpus(), cfg, checkpoint_path=ckpt)
        _, _, step = load_train_checkpoint(ckpt, cfg)
        assert step == 4

    def test_loss_decreases_on_small_corpus(self):
        model = init_model(tiny_model_config(), seed=3)
        cfg = self.quick_config(
            lr=2e-2, warmup_steps=5, total_steps=150, batch_size=2, seed=9
        )
        corpus = tiny_corpus(2)
        batch = [(prepare_item(s, v, 4), s) for s, v in corpus]
        fixed_rngs = lambda: [Rng(1, f"eval/{i}") for i in range(len(batch))]
        before, _ = batch_loss(model, batch, fixed_rngs())
        result = train(model, corpus, cfg, dropout=None)
        after, _ = batch_loss(model, batch, fixed_rngs())
        # deterministic held-fixed evaluation: training must shrink it
        assert after < 0.97 * before
        # the noisy per-step trace should still trend down on average
        assert np.mean(result.losses[-20:]) < np.mean(result.losses[:20])

    def test_on_step_callback(self):
        model = init_model(tiny_model_config(), seed=0)
        seen = []
        result = train(
            model,
            tiny_corpus(),
            self.quick_config(total_steps=3),
            on_step=lambda s, l, g: seen.append((s, l, g)),
        )
        assert [s for s, _, _ in seen] == [0, 1, 2]
        assert tuple(l for _, l, _ in seen) == result.losses

    def test_empty_corpus_rejected(self):
        model = init_model(tiny_model_config(), seed=0)
        with pytest.raises(ValueError):
            train(model, [], self.quick_config())

    def test_bad_start_step_rejected(self):
        model = init_model(tiny_model_config(), seed=0)
        with pytest.raises(ValueError):
            train(model, tiny_corpus(), self.quick_config(), start_step=9)


class TestTrainCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = TrainConfig()
        model = init_model(tiny_model_config(), seed=5)
        opt = AdamW(model.params, cfg)
        rng = Rng(11, "test/ckpt")
        for _ in range(3):
            grads = {k: rng.normal(v.shape) for k, v in model.params.items()}
            opt.apply(model.params, grads, 1e-3)
        path = tmp_path / "t.ckpt"
        save_train_checkpoint(path, model, opt, step=3)
        model2, opt2, step = load_train_checkpoint(path, cfg)
        assert step == 3
        assert opt2.step_count == 3
        for k in model.params:
            np.testing.assert_array_equal(model2.params[k], model.params[k])
            np.testing.assert_array_equal(opt2.m[k], opt.m[k])
            np.testing.assert_array_equal(opt2.v[k], opt.v[k])

    def test_plain_checkpoint_has_no_train_state(self, tmp_path):
        model = init_model(tiny_model_config(), seed=5)
        path = tmp_path / "plain.ckpt"
        save_checkpoint(path, model)
        with pytest.raises(ValueError):
            load_train_checkpoint(path, TrainConfig())
