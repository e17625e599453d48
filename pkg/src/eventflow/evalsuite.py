"""Evaluation suite: timing accuracy, cut detection, and positional-property checks.

Three layers:

* Frame-exact metrics for the synthetic corpus — `timing_accuracy` classifies
  every frame against the pattern library at its scheduled phase (normalizing
  palette inversions via detected cuts), and `detect_cuts` thresholds mean
  absolute frame-to-frame change.
* `verify_properties` checks the three positional-bias properties of the
  conditioning layer — per-frame argmax, within-event unimodality, and
  boundary equality — over randomized scripts and probe vectors, emitting
  machine-readable counterexamples when a mode violates one. The argmax and
  unimodality statements are about the expected bias over isotropic probes
  (the exact mean curve that `bias_map` returns with no probe); boundary
  equality holds probe-by-probe because both adjacent distances are exactly
  equal under the rescaled layout, so it is checked per random probe.
* `emit_heatmap` and `concentration_ratio` render bias maps to CSV/PGM and
  quantify how sharply each event's attention band concentrates as the
  rescale length grows.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conditioning import (
    ConditioningMode,
    bias_map,
    write_bias_map_csv,
    write_bias_map_pgm,
)
from .numerics import Rng
from .rope import RotaryEncoder, attn_bias, mean_bias, monotone_decay_extent
from .synthdata import PatternLibrary
from .timeline import (
    EventScript,
    SceneCut,
    TemporalCaption,
    ValidationError,
    event_midpoint_positions,
    frame_count,
    frame_timestamps,
    locate_event,
    rescale_map,
    script_to_json,
    validate_script,
)

__all__ = [
    "PropertyResult",
    "PropertyReport",
    "EvalReport",
    "detect_cuts",
    "timing_accuracy",
    "random_ratio_script",
    "verify_properties",
    "emit_heatmap",
    "concentration_ratio",
    "evaluate_corpus",
]

_ROTARY_MODES = (ConditioningMode.RESCALED_ROPE, ConditioningMode.VANILLA_ROPE)

DEFAULT_CUT_THRESHOLD = 0.3
BOUNDARY_TOLERANCE = 1e-9
_PLATEAU_TOLERANCE = 1e-12


def detect_cuts(video: np.ndarray, threshold: float = DEFAULT_CUT_THRESHOLD) -> np.ndarray:
    """Frame indices where mean absolute inter-frame change exceeds `threshold`.

    Runs of consecutive detections are merged down to their first index, so a
    single palette inversion reports exactly one cut even if the following
    frames keep changing fast.
    """
    if not (threshold > 0.0):
        raise ValidationError("bad_threshold", f"threshold must be > 0, got {threshold}")
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 3 or video.shape[0] < 2:
        return np.zeros(0, dtype=np.int64)
    deltas = np.abs(np.diff(video, axis=0)).mean(axis=(1, 2))
    hits = np.flatnonzero(deltas > threshold) + 1  # index of the changed frame
    out: list[int] = []
    prev = None
    for h in hits:
        if prev is not None and int(h) == prev + 1:
            prev = int(h)  # same run of consecutive detections: keep its first index
            continue
        out.append(int(h))
        prev = int(h)
    return np.array(out, dtype=np.int64)


def _inversion_parity_from_cuts(n_frames: int, cut_frames: np.ndarray) -> np.ndarray:
    parity = np.zeros(n_frames, dtype=np.int64)
    for c in cut_frames:
        parity[int(c) :] += 1
    return parity % 2


def timing_accuracy(
    video: np.ndarray,
    script: EventScript,
    library: PatternLibrary,
    threshold: float = DEFAULT_CUT_THRESHOLD,
) -> float:
    """Fraction of frames classified as their scheduled event's pattern.

    Each frame is first palette-normalized using detected cuts (an odd number
    of detected cuts before a frame means it is viewed inverted), then
    classified by argmin over the library ids of Euclidean distance to the
    candidate pattern rendered at the frame's scheduled phase.
    """
    video = np.asarray(video, dtype=np.float64)
    expected = (frame_count(script), library.grid, library.grid)
    if video.shape != expected:
        raise ValidationError(
            "bad_shape", f"video shape {video.shape} does not match script {expected}"
        )
    cuts = detect_cuts(video, threshold)
    parity = _inversion_parity_from_cuts(len(video), cuts).astype(bool)
    normalized = np.where(parity[:, None, None], 1.0 - video, video)
    ts = frame_timestamps(script)
    ids = library.ids
    correct = 0
    for i, t in enumerate(ts):
        n = locate_event(float(t), script)
        ev = script.events[n - 1]
        phase = (float(t) - ev.start) / (ev.end - ev.start)
        phase = min(max(phase, 0.0), 1.0)
        best_id, best_dist = None, math.inf
        for pid in ids:
            diff = normalized[i] - library.frame(pid, phase)
            dist = float(np.sqrt((diff * diff).sum()))
            if dist < best_dist:
                best_id, best_dist = pid, dist
        correct += int(best_id == ev.tokens[0])
    return correct / len(ts)


def random_ratio_script(
    rng: Rng,
    *,
    max_ratio: float = 10.0,
    min_ratio: float = 1.0,
    n_events: int | None = None,
    cut_probability: float = 0.3,
    adjacent_extremes: bool = False,
) -> EventScript:
    """Random script whose event-length ratios reach up to `max_ratio`.

    Lengths are log-uniform in [1, max_ratio] seconds, optionally forced so
    the longest and shortest events sit adjacent (`adjacent_extremes`), which
    maximizes the chance of a wrong-argmax zone for unscaled rotary time. The
    frame rate guarantees at least four frames inside every event. When
    `min_ratio` > 1, the realized max/min length ratio is at least that.
    """
    if max_ratio < 1.0 or min_ratio < 1.0 or min_ratio > max_ratio:
        raise ValidationError(
            "bad_config", f"need 1 <= min_ratio <= max_ratio, got {min_ratio}, {max_ratio}"
        )
    n = int(n_events) if n_events is not None else int(rng.integers(2, 5))
    if n < 1:
        raise ValidationError("bad_config", f"n_events must be >= 1, got {n}")
    lengths = np.exp(rng.uniform((n,), 0.0, math.log(max_ratio))) if max_ratio > 1.0 else np.ones(n)
    if n >= 2 and min_ratio > 1.0:
        # pin the extremes so the realized ratio is in [min_ratio, max_ratio]
        lengths[0] = 1.0
        lengths[1] = float(rng.uniform((), min_ratio, max_ratio))
    if adjacent_extremes and n >= 2:
        order = list(rng.permutation(n))
        lo = order.index(int(np.argmin(lengths)))
        hi = order.index(int(np.argmax(lengths)))
        # swap the longest event into the slot next to the shortest
        neighbor = lo + 1 if lo + 1 < n else lo - 1
        if hi != neighbor and hi != lo:
            order[neighbor], order[hi] = order[hi], order[neighbor]
        lengths = np.asarray(lengths)[order]
    else:
        lengths = lengths[rng.permutation(n)]
    duration = float(lengths.sum())
    bounds = np.concatenate(([0.0], np.cumsum(lengths)))
    bounds[-1] = duration
    fps = 4.0 / float(lengths.min())
    ids: list[int] = []
    for i in range(n):
        pool = [p for p in range(8) if not ids or p != ids[-1]]
        ids.append(int(pool[int(rng.integers(0, len(pool)))]))
    cuts: tuple[SceneCut, ...] = ()
    if float(rng.uniform()) < cut_probability:
        cuts = (SceneCut(time=duration * float(rng.uniform((), 0.1, 0.9))),)
    script = EventScript(
        duration=duration,
        fps=fps,
        global_tokens=tuple(sorted(set(ids))),
        events=tuple(
            TemporalCaption(tokens=(ids[i],), start=float(bounds[i]), end=float(bounds[i + 1]))
            for i in range(n)
        ),
        cuts=cuts,
    )
    validate_script(script)
    return script


@dataclass(frozen=True)
class PropertyResult:
    """Outcome of one property over all checked items.

    `precondition_met` is False when the property's stated precondition did
    not hold for some checked script (unimodality is only claimed while half
    the event's positional extent stays inside the mean curve's verified
    monotone window); skipped items are not counted as checks.
    """

    passed: bool
    checked: int
    violations: int
    precondition_met: bool
    counterexample: dict | None

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class PropertyReport:
    mode: str
    L: float
    dim: int
    trials: int
    argmax: PropertyResult
    unimodality: PropertyResult
    boundary_equality: PropertyResult

    @property
    def passed(self) -> bool:
        return (
            self.argmax.passed
            and self.unimodality.passed
            and self.boundary_equality.passed
        )

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "L": self.L,
            "dim": self.dim,
            "trials": self.trials,
            "passed": self.passed,
            "argmax": self.argmax.to_json(),
            "unimodality": self.unimodality.to_json(),
            "boundary_equality": self.boundary_equality.to_json(),
        }


class _PropertyAccumulator:
    def __init__(self) -> None:
        self.checked = 0
        self.violations = 0
        self.precondition_met = True
        self.counterexample: dict | None = None

    def check(self, ok: bool, counterexample_factory) -> None:
        self.checked += 1
        if not ok:
            self.violations += 1
            if self.counterexample is None:
                self.counterexample = counterexample_factory()

    def result(self) -> PropertyResult:
        return PropertyResult(
            passed=self.violations == 0,
            checked=self.checked,
            violations=self.violations,
            precondition_met=self.precondition_met,
            counterexample=self.counterexample,
        )


def _frame_positions(script: EventScript, L: float, mode: ConditioningMode):
    """Per-frame and per-event-midpoint positions on the mode's time axis."""
    ts = frame_timestamps(script)
    if mode == ConditioningMode.RESCALED_ROPE:
        qpos = np.asarray(rescale_map(script, L).apply(ts), dtype=np.float64)
        mids = event_midpoint_positions(script, L)
        bounds = np.arange(1, len(script.events), dtype=np.float64) * float(L)
        mid_extent = 0.5 * float(L)
    else:
        qpos = ts
        mids = np.array([ev.midpoint for ev in script.events], dtype=np.float64)
        bounds = np.array([ev.end for ev in script.events[:-1]], dtype=np.float64)
        mid_extent = 0.5 * max(ev.length for ev in script.events)
    return ts, qpos, mids, bounds, mid_extent


def _check_script_properties(
    script: EventScript,
    L: float,
    mode: ConditioningMode,
    enc: RotaryEncoder,
    probe: np.ndarray,
    extent: float,
    trial: int,
    acc_argmax: _PropertyAccumulator,
    acc_unimodal: _PropertyAccumulator,
    acc_boundary: _PropertyAccumulator,
) -> None:
    n_events = len(script.events)
    ts = frame_timestamps(script)
    event_bias = bias_map(script, L, mode, d=enc.dim)[:, :n_events]
    if mode in _ROTARY_MODES:
        _, qpos, mids, bounds, mid_extent = _frame_positions(script, L, mode)
        precondition = mid_extent <= extent + 1e-12
    else:
        qpos = ts
        mids = np.array([ev.midpoint for ev in script.events], dtype=np.float64)
        bounds = np.array([ev.end for ev in script.events[:-1]], dtype=np.float64)
        precondition = True
    # A frame whose position coincides with an interior boundary (within
    # float resolution) is a boundary frame: the equality property owns it,
    # and the interior properties have no representable margin left there.
    if len(bounds):
        on_boundary = np.min(np.abs(qpos[:, None] - bounds[None, :]), axis=1) <= 1e-9
    else:
        on_boundary = np.zeros(len(ts), dtype=bool)

    def base_info(extra: dict) -> dict:
        info = {"trial": trial, "mode": mode.value, "L": L, "dim": enc.dim}
        info.update(extra)
        info["script"] = script_to_json(script)
        return info

    # Property: every frame strictly inside an event gives that event the
    # strictly largest (isotropic-mean) bias.
    located = np.array([locate_event(float(t), script) for t in ts], dtype=np.int64)
    for i, t in enumerate(ts):
        n = int(located[i])
        if on_boundary[i]:
            continue
        if n_events == 1:
            acc_argmax.check(True, dict)
            continue
        own = float(event_bias[i, n - 1])
        rivals = np.delete(event_bias[i], n - 1)
        rival = float(rivals.max())
        rival_idx = int(np.argmax(np.where(np.arange(n_events) == n - 1, -np.inf, event_bias[i])))
        acc_argmax.check(
            own > rival,
            lambda: base_info(
                {
                    "property": "argmax",
                    "frame_index": i,
                    "time": float(t),
                    "located_event": n,
                    "argmax_event": rival_idx + 1,
                    "own_bias": own,
                    "rival_bias": rival,
                }
            ),
        )

    # Property: within each event the bias column rises to a single peak at
    # the frame nearest the event midpoint, then falls (plateaus allowed).
    # For rotary modes this is only claimed while half the positional extent
    # of an event stays inside the mean curve's monotone-decay window.
    if not precondition:
        acc_unimodal.precondition_met = False
    else:
        for j, ev in enumerate(script.events):
            inside = [
                i
                for i, t in enumerate(ts)
                if located[i] == j + 1 and not on_boundary[i]
            ]
            if not inside:
                continue
            column = event_bias[inside, j]
            dists = np.abs(qpos[inside] - mids[j])
            peak = int(np.argmin(dists))
            ok = bool(np.all(column <= column[peak] + _PLATEAU_TOLERANCE))
            if ok:
                for a, b in zip(range(peak, len(column) - 1), range(peak + 1, len(column))):
                    if column[b] > column[a] + _PLATEAU_TOLERANCE:
                        ok = False
                        break
            if ok:
                for a, b in zip(range(peak, 0, -1), range(peak - 1, -1, -1)):
                    if column[b] > column[a] + _PLATEAU_TOLERANCE:
                        ok = False
                        break
            acc_unimodal.check(
                ok,
                lambda: base_info(
                    {
                        "property": "unimodality",
                        "event": j + 1,
                        "column": [float(x) for x in column],
                        "peak_frame": inside[peak],
                    }
                ),
            )

    # Property: a query exactly on an interior boundary gives equal bias to
    # the two adjacent events, for every probe with q = k.
    if n_events >= 2:
        if mode in _ROTARY_MODES:
            for k, b in enumerate(bounds):
                left = float(attn_bias(probe, probe, float(b - mids[k]), enc))
                right = float(attn_bias(probe, probe, float(b - mids[k + 1]), enc))
                acc_boundary.check(
                    abs(left - right) <= BOUNDARY_TOLERANCE,
                    lambda: base_info(
                        {
                            "property": "boundary_equality",
                            "boundary": k + 1,
                            "left_bias": left,
                            "right_bias": right,
                            "gap": abs(left - right),
                        }
                    ),
                )
        else:
            # Hard masking admits both adjacent events at their shared
            # endpoint (0 == 0) and the additive mode applies no positional
            # bias at all, so equality holds identically.
            for k in range(n_events - 1):
                acc_boundary.check(True, dict)


def verify_properties(
    script: EventScript,
    L: float,
    mode: ConditioningMode | str,
    trials: int,
    rng: Rng,
    dim: int = 32,
) -> PropertyReport:
    """Check the three positional-bias properties, reporting counterexamples.

    Trial 0 checks the given script; every further trial draws a fresh
    random script (event-length ratios up to 10:1) and an independent probe
    vector. The argmax and unimodality checks evaluate the exact
    isotropic-mean bias; boundary equality is checked per probe at 1e-9.
    The report is machine-readable via `to_json`, with the first violating
    (frame, script, bias) triple kept per property.
    """
    if trials < 1:
        raise ValidationError("bad_trials", f"trials must be >= 1, got {trials}")
    mode = ConditioningMode(mode)
    enc = RotaryEncoder(dim)
    extent = monotone_decay_extent(enc) if mode in _ROTARY_MODES else math.inf
    acc_argmax = _PropertyAccumulator()
    acc_unimodal = _PropertyAccumulator()
    acc_boundary = _PropertyAccumulator()
    for trial in range(trials):
        s = script if trial == 0 else random_ratio_script(rng)
        probe = rng.normal((dim,))
        _check_script_properties(
            s, L, mode, enc, probe, extent, trial,
            acc_argmax, acc_unimodal, acc_boundary,
        )
    return PropertyReport(
        mode=mode.value,
        L=float(L),
        dim=dim,
        trials=trials,
        argmax=acc_argmax.result(),
        unimodality=acc_unimodal.result(),
        boundary_equality=acc_boundary.result(),
    )


def emit_heatmap(bias: np.ndarray, path: str | Path, format: str = "csv") -> Path:
    """Write a bias map to disk as CSV or binary PGM and return the path."""
    path = Path(path)
    if format == "csv":
        write_bias_map_csv(path, bias)
    elif format == "pgm":
        write_bias_map_pgm(path, bias)
    else:
        raise ValidationError("bad_format", f"format must be csv or pgm, got {format!r}")
    return path


def concentration_ratio(L: float, dim: int = 32) -> float:
    """Peak-to-boundary mean-bias ratio for one event band.

    The event midpoint sits at positional distance 0 from its own caption
    row and an event boundary at distance L/2, so the ratio of the two mean
    biases measures how sharply attention concentrates mid-event. It grows
    with L while L/2 stays inside the mean curve's decaying range.
    """
    enc = RotaryEncoder(dim)
    peak = float(mean_bias(enc, 0.0))
    boundary = float(mean_bias(enc, 0.5 * float(L)))
    return peak / boundary


@dataclass(frozen=True)
class EvalReport:
    """Corpus-level evaluation summary; JSON-serializable via to_json."""

    timing_accuracy: float
    mean_cuts_per_video: float
    cut_timing_errors: tuple[int | None, ...]
    properties: dict
    mode: str
    L: float
    dim: int
    n_videos: int
    seeds: dict

    def to_json(self) -> dict:
        return {
            "timing_accuracy": self.timing_accuracy,
            "mean_cuts_per_video": self.mean_cuts_per_video,
            "cut_timing_errors": list(self.cut_timing_errors),
            "properties": dict(self.properties),
            "mode": self.mode,
            "L": self.L,
            "dim": self.dim,
            "n_videos": self.n_videos,
            "seeds": dict(self.seeds),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )


def evaluate_corpus(
    items,
    library: PatternLibrary,
    *,
    mode: ConditioningMode | str = ConditioningMode.RESCALED_ROPE,
    L: float = 8.0,
    trials: int = 50,
    rng: Rng | None = None,
    dim: int = 32,
    threshold: float = DEFAULT_CUT_THRESHOLD,
    seeds: dict | None = None,
) -> EvalReport:
    """Aggregate timing accuracy, cut statistics, and property checks.

    `items` is a sequence with `.script` and `.video` attributes (corpus
    records or generated samples). Cut timing errors list, per scripted cut,
    the frame distance to the nearest detection, or None when nothing was
    detected in that video.
    """
    mode = ConditioningMode(mode)
    rng = rng if rng is not None else Rng(0, "eval")
    accuracies = []
    cut_counts = []
    errors: list[int | None] = []
    base_script = None
    for item in items:
        script, video = item.script, item.video
        if base_script is None:
            base_script = script
        accuracies.append(timing_accuracy(video, script, library, threshold))
        detected = detect_cuts(video, threshold)
        cut_counts.append(len(detected))
        ts = frame_timestamps(script)
        for cut in script.cuts:
            scheduled = int(np.searchsorted(ts, cut.time, side="left"))
            if len(detected) == 0:
                errors.append(None)
            else:
                errors.append(int(np.abs(detected - scheduled).min()))
    if base_script is None:
        base_script = EventScript(
            duration=2.0,
            fps=2.0,
            global_tokens=(0,),
            events=(TemporalCaption(tokens=(0,), start=0.0, end=2.0),),
        )
    report = verify_properties(base_script, L, mode, trials, rng, dim=dim)
    return EvalReport(
        timing_accuracy=float(np.mean(accuracies)) if accuracies else 0.0,
        mean_cuts_per_video=float(np.mean(cut_counts)) if cut_counts else 0.0,
        cut_timing_errors=tuple(errors),
        properties={
            "argmax": report.argmax.passed,
            "unimodality": report.unimodality.passed,
            "boundary_equality": report.boundary_equality.passed,
        },
        mode=mode.value,
        L=float(L),
        dim=dim,
        n_videos=len(accuracies),
        seeds=dict(seeds) if seeds else {},
    )
