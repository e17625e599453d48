"""Event scripts and the piecewise-linear timestamp remap.

An :class:`EventScript` describes a video as a contiguous sequence of
captioned events covering [0, duration] exactly, plus optional scene cuts.
The remap stretches every event onto a fixed length L, so event n occupies
[(n-1)L, nL) regardless of its real duration; event midpoints land at
(n-1)L + L/2 and interior boundaries at integer multiples of L. Distances
measured in remapped coordinates are therefore invariant to uniformly
scaling the script in time, which is the property the conditioning layer
relies on.

Script JSON uses exactly the fields {duration, fps, global, events, cuts}
with events as {tokens, start, end}; unknown or missing fields are
validation errors, never warnings.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ValidationError",
    "TemporalCaption",
    "SceneCut",
    "EventScript",
    "RescaleMap",
    "validate_script",
    "locate_event",
    "rescale_timestamp",
    "rescale_map",
    "event_midpoint_positions",
    "frame_timestamps",
    "frame_count",
    "script_to_json",
    "parse_script",
    "load_script",
    "save_script",
]


class ValidationError(ValueError):
    """Input rejected with a machine-readable code."""

    def __init__(self, code: str, message: str) -> None:
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class TemporalCaption:
    """One captioned event: token ids plus its [start, end) span in seconds."""

    tokens: tuple[int, ...]
    start: float
    end: float

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.start + self.end)


@dataclass(frozen=True)
class SceneCut:
    """A hard scene transition at `time` seconds."""

    time: float


@dataclass(frozen=True)
class EventScript:
    duration: float
    fps: float
    global_tokens: tuple[int, ...]
    events: tuple[TemporalCaption, ...]
    cuts: tuple[SceneCut, ...] = ()

    @property
    def n_events(self) -> int:
        return len(self.events)

    @property
    def cut_times(self) -> tuple[float, ...]:
        return tuple(c.time for c in self.cuts)

    def without_cuts(self) -> "EventScript":
        return dataclasses.replace(self, cuts=())


def validate_script(script: EventScript, max_events: int | None = None) -> None:
    """Check structural invariants, raising ValidationError on the first failure.

    Distinct failures carry distinct codes: bad_duration, bad_fps,
    empty_events, too_many_events, empty_caption, bad_token, reversed_interval,
    overlap, gap, out_of_range, cut_out_of_range, cuts_unsorted.
    """
    if not (script.duration > 0.0) or not np.isfinite(script.duration):
        raise ValidationError("bad_duration", f"duration must be positive, got {script.duration}")
    if not (script.fps > 0.0) or not np.isfinite(script.fps):
        raise ValidationError("bad_fps", f"fps must be positive, got {script.fps}")
    if len(script.events) == 0:
        raise ValidationError("empty_events", "script must contain at least one event")
    if max_events is not None and len(script.events) > max_events:
        raise ValidationError(
            "too_many_events",
            f"script has {len(script.events)} events, maximum is {max_events}",
        )
    for tok in script.global_tokens:
        if tok < 0:
            raise ValidationError("bad_token", f"negative global token id {tok}")
    for i, ev in enumerate(script.events):
        if len(ev.tokens) == 0:
            raise ValidationError("empty_caption", f"event {i + 1} has no tokens")
        for tok in ev.tokens:
            if tok < 0:
                raise ValidationError("bad_token", f"negative token id {tok} in event {i + 1}")
        if not (np.isfinite(ev.start) and np.isfinite(ev.end)):
            raise ValidationError("reversed_interval", f"event {i + 1} has non-finite bounds")
        if ev.end <= ev.start:
            raise ValidationError(
                "reversed_interval",
                f"event {i + 1} interval [{ev.start}, {ev.end}] is empty or reversed",
            )
    first, last = script.events[0], script.events[-1]
    if first.start < 0.0 or last.end > script.duration:
        raise ValidationError(
            "out_of_range",
            f"events span [{first.start}, {last.end}] outside [0, {script.duration}]",
        )
    if first.start > 0.0:
        raise ValidationError("gap", f"uncovered time before first event (starts at {first.start})")
    for i in range(len(script.events) - 1):
        a, b = script.events[i], script.events[i + 1]
        if b.start < a.end:
            raise ValidationError(
                "overlap", f"event {i + 2} starts at {b.start} before event {i + 1} ends at {a.end}"
            )
        if b.start > a.end:
            raise ValidationError(
                "gap", f"uncovered time between events {i + 1} and {i + 2} ({a.end} to {b.start})"
            )
    if last.end < script.duration:
        raise ValidationError("gap", f"uncovered time after last event (ends at {last.end})")
    prev = 0.0
    for c in script.cuts:
        if not (0.0 < c.time < script.duration):
            raise ValidationError(
                "cut_out_of_range", f"cut at {c.time} outside (0, {script.duration})"
            )
        if c.time <= prev and prev > 0.0:
            raise ValidationError("cuts_unsorted", f"cut at {c.time} not after previous {prev}")
        prev = c.time


def locate_event(t: float, script: EventScript) -> int:
    """1-based index of the event containing time `t`.

    Interior boundaries belong to the later event; t == duration belongs to
    the last event.
    """
    if not (0.0 <= t <= script.duration):
        raise ValueError(f"time {t} outside [0, {script.duration}]")
    starts = [ev.start for ev in script.events]
    lo, hi = 0, len(starts)
    while lo < hi:
        mid = (lo + hi) // 2
        if starts[mid] <= t:
            lo = mid + 1
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class RescaleMap:
    """Vectorized piecewise-linear remap for one script and stretch length L."""

    starts: np.ndarray
    ends: np.ndarray
    length: float

    def apply(self, t: np.ndarray | float) -> np.ndarray | float:
        t_arr = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.starts, t_arr, side="right") - 1
        idx = np.clip(idx, 0, len(self.starts) - 1)
        s = self.starts[idx]
        e = self.ends[idx]
        out = (t_arr - s) * (self.length / (e - s)) + idx * self.length
        if np.ndim(t) == 0:
            return float(out)
        return out


def rescale_map(script: EventScript, L: float) -> RescaleMap:
    starts = np.array([ev.start for ev in script.events], dtype=np.float64)
    ends = np.array([ev.end for ev in script.events], dtype=np.float64)
    return RescaleMap(starts=starts, ends=ends, length=float(L))


def rescale_timestamp(t: float, script: EventScript, L: float) -> float:
    """Remapped position of time `t`: (t - start_n) * L / len_n + (n-1) L."""
    n = locate_event(t, script)
    ev = script.events[n - 1]
    return (t - ev.start) * (float(L) / (ev.end - ev.start)) + (n - 1) * float(L)


def event_midpoint_positions(script: EventScript, L: float) -> np.ndarray:
    """Remapped event midpoints: (n-1) L + L/2 for n = 1..N."""
    n = np.arange(len(script.events), dtype=np.float64)
    return n * float(L) + 0.5 * float(L)


def frame_count(script: EventScript) -> int:
    return int(round(script.duration * script.fps))


def frame_timestamps(script: EventScript) -> np.ndarray:
    """Frame times k / fps for k = 0 .. T-1, T = round(duration * fps)."""
    t = frame_count(script)
    if t < 1:
        raise ValidationError("bad_fps", "script shorter than one frame")
    return np.arange(t, dtype=np.float64) / script.fps


def script_to_json(script: EventScript) -> dict:
    return {
        "duration": script.duration,
        "fps": script.fps,
        "global": list(script.global_tokens),
        "events": [
            {"tokens": list(ev.tokens), "start": ev.start, "end": ev.end}
            for ev in script.events
        ],
        "cuts": [c.time for c in script.cuts],
    }


_SCRIPT_FIELDS = {"duration", "fps", "global", "events", "cuts"}
_EVENT_FIELDS = {"tokens", "start", "end"}


def parse_script(obj: dict, max_events: int | None = None) -> EventScript:
    """Build and validate an EventScript from its JSON form (strict fields)."""
    if not isinstance(obj, dict):
        raise ValidationError("bad_format", "script JSON must be an object")
    unknown = set(obj) - _SCRIPT_FIELDS
    if unknown:
        raise ValidationError("unknown_field", f"unknown script fields: {sorted(unknown)}")
    missing = _SCRIPT_FIELDS - set(obj)
    if missing:
        raise ValidationError("missing_field", f"missing script fields: {sorted(missing)}")
    events = []
    if not isinstance(obj["events"], list):
        raise ValidationError("bad_format", "events must be a list")
    for i, raw in enumerate(obj["events"]):
        if not isinstance(raw, dict):
            raise ValidationError("bad_format", f"event {i + 1} must be an object")
        unknown = set(raw) - _EVENT_FIELDS
        if unknown:
            raise ValidationError(
                "unknown_field", f"unknown fields in event {i + 1}: {sorted(unknown)}"
            )
        missing = _EVENT_FIELDS - set(raw)
        if missing:
            raise ValidationError(
                "missing_field", f"missing fields in event {i + 1}: {sorted(missing)}"
            )
        events.append(
            TemporalCaption(
                tokens=_ids(raw["tokens"], f"event {i + 1} tokens"),
                start=_number(raw["start"], f"event {i + 1} start"),
                end=_number(raw["end"], f"event {i + 1} end"),
            )
        )
    if not isinstance(obj["cuts"], list):
        raise ValidationError("bad_format", "cuts must be a list")
    script = EventScript(
        duration=_number(obj["duration"], "duration"),
        fps=_number(obj["fps"], "fps"),
        global_tokens=_ids(obj["global"], "global tokens"),
        events=tuple(events),
        cuts=tuple(SceneCut(_number(t, "cut time")) for t in obj["cuts"]),
    )
    validate_script(script, max_events=max_events)
    return script


def _number(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError("bad_format", f"{what} must be a number, got {value!r}")
    return float(value)


def _ids(value, what: str) -> tuple[int, ...]:
    if not isinstance(value, list) or any(
        isinstance(t, bool) or not isinstance(t, int) for t in value
    ):
        raise ValidationError("bad_format", f"{what} must be a list of integer ids")
    return tuple(int(t) for t in value)


def load_script(path: str | Path, max_events: int | None = None) -> EventScript:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError("bad_format", f"invalid JSON in {path}: {exc}") from exc
    return parse_script(obj, max_events=max_events)


def save_script(script: EventScript, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(script_to_json(script), fh, indent=2)
        fh.write("\n")
