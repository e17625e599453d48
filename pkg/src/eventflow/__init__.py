"""eventflow: event-timed video generation on a deterministic numpy substrate.

A small rectified-flow video generator whose text conditioning is a list of
temporally captioned events plus optional scene cuts. The package centers on
one idea: remap every video's event boundaries onto a shared positional grid
so that rotary cross-attention sees the same geometry regardless of how long
each event runs in wall-clock time. Three baseline conditioning modes
(vanilla rotary time, hard span masking, learned time-feature addition) ship
alongside it for comparison, plus a synthetic benchmark with exactly
checkable event timing.
"""

from .conditioning import (
    ConditioningMode,
    EncodedConditioning,
    bias_map,
    encode_conditioning,
    encode_cuts,
    encode_events,
    hard_mask,
    temporal_xattn,
)
from .diffusion import (
    CondDropout,
    SampleConfig,
    euler_integrate,
    guided_velocity,
    load_video_json,
    rf_loss,
    sample,
    write_video_json,
    write_video_pgms,
)
from .evalsuite import (
    EvalReport,
    PropertyReport,
    concentration_ratio,
    detect_cuts,
    emit_heatmap,
    evaluate_corpus,
    timing_accuracy,
    verify_properties,
)
from .synthdata import (
    CorpusConfig,
    CorpusItem,
    PatternLibrary,
    default_library,
    gen_corpus,
    gen_script,
    measure_fixtures,
    read_corpus,
    read_fixtures,
    render_video,
    write_corpus,
)
from .model import (
    LatentVideo,
    ModelConfig,
    ToyDiT,
    count_params,
    forward,
    init_model,
    load_checkpoint,
    loss_and_grads,
    patchify,
    save_checkpoint,
    unpatchify,
)
from .numerics import Rng, assert_finite, grad_check
from .rope import RotaryEncoder, angle_schedule, attn_bias, mean_bias, rotate
from .training import (
    AdamW,
    TrainConfig,
    TrainResult,
    batch_loss,
    learning_rate,
    load_train_checkpoint,
    save_train_checkpoint,
    to_model_units,
    to_pixels,
    train,
)
from .timeline import (
    EventScript,
    SceneCut,
    TemporalCaption,
    ValidationError,
    event_midpoint_positions,
    frame_timestamps,
    load_script,
    locate_event,
    parse_script,
    rescale_map,
    rescale_timestamp,
    save_script,
    script_to_json,
    validate_script,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "AdamW",
    "CondDropout",
    "ConditioningMode",
    "CorpusConfig",
    "CorpusItem",
    "EncodedConditioning",
    "EvalReport",
    "EventScript",
    "LatentVideo",
    "ModelConfig",
    "PatternLibrary",
    "PropertyReport",
    "Rng",
    "RotaryEncoder",
    "SampleConfig",
    "SceneCut",
    "TemporalCaption",
    "ToyDiT",
    "TrainConfig",
    "TrainResult",
    "ValidationError",
    "angle_schedule",
    "assert_finite",
    "attn_bias",
    "batch_loss",
    "bias_map",
    "concentration_ratio",
    "count_params",
    "default_library",
    "detect_cuts",
    "emit_heatmap",
    "encode_conditioning",
    "encode_cuts",
    "encode_events",
    "euler_integrate",
    "evaluate_corpus",
    "event_midpoint_positions",
    "forward",
    "frame_timestamps",
    "gen_corpus",
    "gen_script",
    "grad_check",
    "guided_velocity",
    "hard_mask",
    "init_model",
    "learning_rate",
    "load_checkpoint",
    "load_script",
    "load_train_checkpoint",
    "load_video_json",
    "locate_event",
    "loss_and_grads",
    "mean_bias",
    "measure_fixtures",
    "parse_script",
    "patchify",
    "read_corpus",
    "read_fixtures",
    "render_video",
    "rescale_map",
    "rescale_timestamp",
    "rf_loss",
    "rotate",
    "sample",
    "save_checkpoint",
    "save_script",
    "save_train_checkpoint",
    "script_to_json",
    "temporal_xattn",
    "timing_accuracy",
    "to_model_units",
    "to_pixels",
    "train",
    "unpatchify",
    "validate_script",
    "verify_properties",
    "write_corpus",
    "write_video_json",
    "write_video_pgms",
]
