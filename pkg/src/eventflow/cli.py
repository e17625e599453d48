"""Command-line entry point covering the full pipeline.

Six subcommands: gen-data, train, sample, viz-attn, check-properties, eval.
Every command resolves one RunConfig — package defaults, overlaid by an
optional JSON config file, overlaid by explicit flags (flags win) — before
any work starts, and serializes the resolved config next to its outputs.
All randomness inside a command flows from a single seed through labeled
substreams, so identical invocations produce identical bytes.

Exit codes: 0 success, 1 usage error (bad flags), 2 validation error
(missing or invalid inputs), 3 property or acceptance failure. Commands that
fail partway remove the incomplete outputs they created.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .conditioning import ConditioningMode, bias_map
from .diffusion import SampleConfig, sample, write_video_json, write_video_pgms
from .evalsuite import emit_heatmap, evaluate_corpus, verify_properties
from .model import ModelConfig, config_hash, init_model, load_checkpoint
from .numerics import Rng
from .synthdata import (
    CorpusConfig,
    CorpusItem,
    default_library,
    gen_corpus,
    measure_fixtures,
    read_corpus,
    write_corpus,
)
from .timeline import (
    EventScript,
    TemporalCaption,
    ValidationError,
    parse_script,
)
from .training import (
    TrainConfig,
    load_train_checkpoint,
    to_pixels,
    train,
)

__all__ = ["RunConfig", "main", "parse_mode"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_PROPERTY = 3

RUN_CONFIG_NAME = "run_config.json"

_MODE_ALIASES = {
    "rerope": ConditioningMode.RESCALED_ROPE,
    "vanilla": ConditioningMode.VANILLA_ROPE,
}


def parse_mode(text: str) -> ConditioningMode:
    """Accept canonical mode names plus the short aliases."""
    key = text.strip().lower()
    if key in _MODE_ALIASES:
        return _MODE_ALIASES[key]
    try:
        return ConditioningMode(key)
    except ValueError:
        choices = sorted({m.value for m in ConditioningMode} | set(_MODE_ALIASES))
        raise ValidationError(
            "bad_mode", f"unknown mode {text!r}; choose from {choices}"
        ) from None


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def _sample_config_to_json(cfg: SampleConfig) -> dict:
    return {
        "steps": cfg.steps,
        "cfg_scale": cfg.cfg_scale,
        "guidance_interval": list(cfg.guidance_interval),
        "seed": cfg.seed,
    }


def _sample_config_from_json(doc: dict) -> SampleConfig:
    known = {"steps", "cfg_scale", "guidance_interval", "seed"}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(
            "bad_config", f"unknown sampling fields: {sorted(unknown)}"
        )
    merged = _sample_config_to_json(SampleConfig())
    merged.update(doc)
    merged["guidance_interval"] = tuple(merged["guidance_interval"])
    try:
        return SampleConfig(**merged)
    except ValueError as exc:
        raise ValidationError("bad_config", str(exc)) from None


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings for one command invocation."""

    model: ModelConfig
    corpus: CorpusConfig
    sampling: SampleConfig
    training: TrainConfig

    def to_json(self) -> dict:
        return {
            "model": self.model.to_json(),
            "corpus": self.corpus.to_json(),
            "sampling": _sample_config_to_json(self.sampling),
            "training": self.training.to_json(),
        }

    @staticmethod
    def from_json(doc: dict) -> "RunConfig":
        known = {"model", "corpus", "sampling", "training"}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(
                "bad_config", f"unknown config sections: {sorted(unknown)}"
            )
        model_doc = ModelConfig().to_json()
        model_doc.update(doc.get("model", {}))
        try:
            model = ModelConfig.from_json(model_doc)
        except (TypeError, ValueError) as exc:
            raise ValidationError("bad_config", f"model section: {exc}") from None
        corpus_doc = CorpusConfig().to_json()
        corpus_doc.update(doc.get("corpus", {}))
        corpus = CorpusConfig.from_json(corpus_doc)
        sampling = _sample_config_from_json(doc.get("sampling", {}))
        training_doc = TrainConfig().to_json()
        training_doc.update(doc.get("training", {}))
        training = TrainConfig.from_json(training_doc)
        return RunConfig(
            model=model, corpus=corpus, sampling=sampling, training=training
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path


def resolve_config(config_path: str | None) -> RunConfig:
    """Defaults overlaid with the JSON config file, when one is given."""
    if config_path is None:
        return RunConfig.from_json({})
    path = Path(config_path)
    if not path.is_file():
        raise ValidationError("missing_config", f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError("bad_config", f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError("bad_config", f"{path}: top level must be an object")
    return RunConfig.from_json(doc)


def _sibling_run_config(out_file: Path) -> Path:
    return out_file.with_name(out_file.stem + ".run.json")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


@contextmanager
def _cleanup_on_error(root: Path):
    """Delete files created under `root` during the block if it raises."""
    root = Path(root)
    existed = root.exists()
    before: set[Path] = set()
    if existed and root.is_dir():
        before = {p for p in root.rglob("*")}
    try:
        yield
    except BaseException:
        if not existed:
            if root.is_dir():
                shutil.rmtree(root, ignore_errors=True)
            elif root.exists():
                root.unlink(missing_ok=True)
        elif root.is_dir():
            for p in sorted(root.rglob("*"), reverse=True):
                if p in before:
                    continue
                if p.is_dir():
                    try:
                        p.rmdir()
                    except OSError:
                        pass
                else:
                    p.unlink(missing_ok=True)
        elif root.is_file():
            root.unlink(missing_ok=True)
        raise


def _load_script_file(path: str, max_events: int | None = None) -> EventScript:
    script_path = Path(path)
    if not script_path.is_file():
        raise ValidationError("missing_script", f"script file not found: {script_path}")
    try:
        doc = json.loads(script_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError("bad_script", f"{script_path}: {exc}") from None
    return parse_script(doc, max_events=max_events)


def _parse_interval(text: str) -> tuple[int, int]:
    parts = text.split(":")
    if len(parts) != 2:
        raise ValidationError(
            "bad_interval", f"interval must look like lo:hi, got {text!r}"
        )
    try:
        lo, hi = int(parts[0]), int(parts[1])
    except ValueError:
        raise ValidationError(
            "bad_interval", f"interval bounds must be integers, got {text!r}"
        ) from None
    return lo, hi


def _canonical_script() -> EventScript:
    """Equal-thirds three-event layout used when no script file is supplied."""
    return EventScript(
        duration=6.0,
        fps=4.0,
        global_tokens=(1,),
        events=(
            TemporalCaption(tokens=(2,), start=0.0, end=2.0),
            TemporalCaption(tokens=(3,), start=2.0, end=4.0),
            TemporalCaption(tokens=(4,), start=4.0, end=6.0),
        ),
        cuts=(),
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config)
    corpus_cfg = cfg.corpus
    if args.seed is not None:
        corpus_cfg = replace(corpus_cfg, seed=args.seed)
    if args.num_videos is not None:
        corpus_cfg = replace(corpus_cfg, num_videos=args.num_videos)
    cfg = replace(cfg, corpus=corpus_cfg)

    library = default_library(cfg.model.grid)
    items = gen_corpus(corpus_cfg, library)
    fixtures = measure_fixtures(items, library)
    out = Path(args.out)
    with _cleanup_on_error(out):
        write_corpus(out, items, fixtures)
        cfg.save(out / RUN_CONFIG_NAME)
    print(f"wrote {len(items)} videos to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config)
    if args.mode is not None:
        cfg = replace(cfg, model=replace(cfg.model, mode=parse_mode(args.mode)))

    items = read_corpus(args.data)
    if not items:
        raise ValidationError("bad_record", f"corpus at {args.data} is empty")
    grid = items[0].video.shape[1]
    if grid != cfg.model.grid:
        raise ValidationError(
            "bad_record",
            f"corpus grid {grid} does not match model grid {cfg.model.grid}",
        )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.ckpt"
    log_path = out / "loss_log.csv"

    if args.resume:
        if not ckpt_path.is_file():
            raise ValidationError(
                "missing_checkpoint", f"cannot resume: {ckpt_path} does not exist"
            )
        model, optimizer, start_step = load_train_checkpoint(ckpt_path, cfg.training)
        if config_hash(model.config) != config_hash(cfg.model):
            raise ValidationError(
                "bad_checkpoint",
                "checkpoint model configuration does not match the resolved config",
            )
        if start_step >= cfg.training.total_steps:
            print(f"nothing to do: checkpoint already at step {start_step}")
            cfg.save(out / RUN_CONFIG_NAME)
            return EXIT_OK
    else:
        model = init_model(cfg.model, seed=cfg.training.seed)
        optimizer = None
        start_step = 0

    def report(step: int, loss: float, norm: float) -> None:
        if (step + 1) % 100 == 0 or step + 1 == cfg.training.total_steps:
            print(f"step {step + 1}/{cfg.training.total_steps} loss {loss:.5f}")

    with _cleanup_on_error(out):
        result = train(
            model,
            [(it.script, it.video) for it in items],
            cfg.training,
            log_path=log_path,
            checkpoint_path=ckpt_path,
            optimizer=optimizer,
            start_step=start_step,
            on_step=report,
        )
        cfg.save(out / RUN_CONFIG_NAME)
    final = result.losses[-1] if result.losses else float("nan")
    print(f"training finished at step {cfg.training.total_steps}, last loss {final:.5f}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config)
    sampling = cfg.sampling
    if args.steps is not None:
        sampling = replace(sampling, steps=args.steps)
    if args.cfg_scale is not None:
        sampling = replace(sampling, cfg_scale=args.cfg_scale)
    if args.interval is not None:
        sampling = replace(sampling, guidance_interval=_parse_interval(args.interval))
    if args.seed is not None:
        sampling = replace(sampling, seed=args.seed)
    try:
        sampling = SampleConfig(**_sample_config_to_json(sampling))
    except ValueError as exc:
        raise ValidationError("bad_config", str(exc)) from None
    cfg = replace(cfg, sampling=sampling)

    ckpt_path = Path(args.ckpt)
    if not ckpt_path.is_file():
        raise ValidationError("missing_checkpoint", f"checkpoint not found: {ckpt_path}")
    model, _ = load_checkpoint(ckpt_path)
    script = _load_script_file(args.script, max_events=model.config.max_events)

    pixels = to_pixels(sample(model, script, sampling, no_cuts=args.no_cuts))
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    with _cleanup_on_error(out):
        write_video_json(out, pixels, script.fps)
        cfg.save(_sibling_run_config(out))
    if args.pgm_dir is not None:
        pgm_dir = Path(args.pgm_dir)
        with _cleanup_on_error(pgm_dir):
            pgm_dir.mkdir(parents=True, exist_ok=True)
            write_video_pgms(pgm_dir, pixels)
    print(f"wrote {pixels.shape[0]} frames to {out}")
    return EXIT_OK


def cmd_viz_attn(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config)
    mode = parse_mode(args.mode)
    if args.L <= 0:
        raise ValidationError("bad_length", f"--L must be positive, got {args.L}")
    if args.format not in ("csv", "pgm", "both"):
        raise ValidationError(
            "bad_format", f"--format must be csv, pgm, or both, got {args.format!r}"
        )
    script = (
        _load_script_file(args.script) if args.script else _canonical_script()
    )
    bias = bias_map(script, args.L, mode, d=args.dim)
    out = Path(args.out)
    formats = ("csv", "pgm") if args.format == "both" else (args.format,)
    with _cleanup_on_error(out):
        out.mkdir(parents=True, exist_ok=True)
        stem = f"bias_{mode.value}_L{args.L:g}"
        written = [emit_heatmap(bias, out / f"{stem}.{fmt}", format=fmt) for fmt in formats]
        cfg.save(out / RUN_CONFIG_NAME)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_check_properties(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config)
    mode = parse_mode(args.mode)
    if args.trials < 1:
        raise ValidationError("bad_trials", f"--trials must be >= 1, got {args.trials}")
    script = _canonical_script()
    reports = {}
    all_passed = True
    for L in (4.0, 8.0, 16.0):
        rng = Rng(args.seed, f"check-properties/L{L:g}")
        report = verify_properties(script, L, mode, args.trials, rng, dim=args.dim)
        reports[f"L={L:g}"] = report.to_json()
        all_passed = all_passed and report.passed
    doc = {
        "mode": mode.value,
        "trials": args.trials,
        "seed": args.seed,
        "dim": args.dim,
        "passed": all_passed,
        "reports": reports,
    }
    report_path = Path(args.report)
    if report_path.parent != Path(""):
        report_path.parent.mkdir(parents=True, exist_ok=True)
    with _cleanup_on_error(report_path):
        report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        cfg.save(_sibling_run_config(report_path))
    if all_passed:
        print(f"properties passed in mode {mode.value} ({args.trials} trials per L)")
        return EXIT_OK
    for key, rep in reports.items():
        for prop in ("argmax", "unimodality", "boundary_equality"):
            example = rep[prop]["counterexample"]
            if example is not None:
                print(f"property failure at {key} / {prop}:")
                print(json.dumps(example, indent=2, sort_keys=True))
                print(f"full report: {report_path}")
                return EXIT_PROPERTY
    return EXIT_PROPERTY


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config)
    ckpt_path = Path(args.ckpt)
    if not ckpt_path.is_file():
        raise ValidationError("missing_checkpoint", f"checkpoint not found: {ckpt_path}")
    model, _ = load_checkpoint(ckpt_path)
    items = read_corpus(args.data)
    if not items:
        raise ValidationError("bad_record", f"corpus at {args.data} is empty")
    library = default_library(model.config.grid)

    generated = []
    for i, item in enumerate(items):
        seed = int(
            Rng(cfg.sampling.seed, f"eval/video{i:06d}").integers(0, 2**31 - 1, ())
        )
        per_item = replace(cfg.sampling, seed=seed)
        pixels = to_pixels(sample(model, item.script, per_item))
        generated.append(CorpusItem(script=item.script, video=pixels))
        print(f"sampled {i + 1}/{len(items)}")

    report = evaluate_corpus(
        generated,
        library,
        mode=model.config.mode,
        L=model.config.rescale_length,
        rng=Rng(cfg.sampling.seed, "eval/properties"),
        seeds={"sampling": cfg.sampling.seed},
    )
    report_path = Path(args.report)
    if report_path.parent != Path(""):
        report_path.parent.mkdir(parents=True, exist_ok=True)
    with _cleanup_on_error(report_path):
        report.save(report_path)
        cfg.save(_sibling_run_config(report_path))
    print(f"timing accuracy {report.timing_accuracy:.3f} over {report.n_videos} videos")
    print(f"report: {report_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures exit 1 instead of 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="eventflow",
        description=(
            "Event-scripted toy video diffusion: data generation, training, "
            "sampling, positional-bias visualization, property checking, and "
            "evaluation."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic video corpus")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int, help="override corpus seed")
    p.add_argument("--num-videos", type=int, help="override corpus size")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated corpus")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    p.add_argument("--out", required=True, help="output directory (checkpoint, log)")
    p.add_argument("--mode", help="conditioning mode override")
    p.add_argument(
        "--resume",
        action="store_true",
        help="continue from the checkpoint already in --out",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate a video from a trained checkpoint")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--script", required=True, help="script JSON file")
    p.add_argument("--out", required=True, help="output video JSON path")
    p.add_argument("--steps", type=int, help="integration steps")
    p.add_argument("--cfg-scale", type=float, help="guidance strength")
    p.add_argument("--interval", help="guidance interval as lo:hi step indices")
    p.add_argument("--seed", type=int, help="sampling noise seed")
    p.add_argument(
        "--no-cuts",
        action="store_true",
        help="strip cut conditioning to force a cut-free video",
    )
    p.add_argument("--pgm-dir", help="also dump per-frame PGM images here")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("viz-attn", help="emit positional-bias heatmaps")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--script", help="script JSON file (default: canonical 3-event)")
    p.add_argument("--mode", default="rescaled-rope", help="conditioning mode")
    p.add_argument("--L", type=float, default=8.0, help="rescale window length")
    p.add_argument("--format", default="csv", help="csv, pgm, or both")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dim", type=int, default=32, help="rotary dimension")
    p.set_defaults(func=cmd_viz_attn)

    p = sub.add_parser(
        "check-properties", help="verify the positional-bias properties"
    )
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--trials", type=int, default=100, help="random trials per L")
    p.add_argument("--seed", type=int, default=0, help="trial seed")
    p.add_argument("--mode", default="rescaled-rope", help="conditioning mode")
    p.add_argument("--report", required=True, help="output report JSON path")
    p.add_argument("--dim", type=int, default=32, help="rotary dimension")
    p.set_defaults(func=cmd_check_properties)

    p = sub.add_parser("eval", help="sample a model over a corpus and score it")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--report", required=True, help="output report JSON path")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
