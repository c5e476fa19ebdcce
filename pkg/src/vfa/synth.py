"""Ranked stutter synthesis by frame drop-and-duplicate.

For drop rate r on a T-frame anchor, ``round(T * r)`` frames are dropped in
M randomly sized, randomly placed spans; each dropped frame is replaced by
the last surviving frame before its span, so the output keeps T frames and
the video visibly freezes then jumps.
"""
from __future__ import annotations

import json
import shlex
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

MAX_PLACEMENT_RETRIES = 64

# Drop-rate schedules by number of synthesized levels.
RATE_SCHEDULES = {
    3: (0.1, 0.5, 0.9),
    5: (0.1, 0.3, 0.5, 0.7, 0.9),
    7: (0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9),
    9: (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
}


@dataclass(frozen=True)
class SynthSpec:
    frames: int
    drop_rates: tuple[float, ...] = RATE_SCHEDULES[7]
    intervals: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "drop_rates", tuple(float(r) for r in self.drop_rates))
        rates = self.drop_rates
        if not rates:
            raise ValueError("at least one drop rate is required")
        if any(not 0.0 < r < 1.0 for r in rates):
            raise ValueError(f"drop rates must lie in (0, 1): {rates}")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"drop rates must be strictly increasing: {rates}")
        if self.intervals < 1:
            raise ValueError("interval count must be >= 1")
        if self.frames < self.intervals:
            raise ValueError(f"need at least {self.intervals} frames, got {self.frames}")

    @property
    def levels(self) -> int:
        return len(self.drop_rates)


@dataclass(frozen=True)
class EditOp:
    start: int
    length: int
    hold: int


@dataclass
class EditSchedule:
    frames: int
    level: int
    drop_rate: float
    ops: list[EditOp] = field(default_factory=list)
    seed: int | None = None

    @property
    def dropped(self) -> int:
        return sum(op.length for op in self.ops)

    def source_index(self) -> np.ndarray:
        """For each output frame, the anchor frame it shows."""
        src = np.arange(self.frames)
        for op in self.ops:
            src[op.start:op.start + op.length] = op.hold
        return src

    def validate(self, frames: int | None = None) -> None:
        n = self.frames if frames is None else frames
        if n != self.frames:
            raise ValueError(f"schedule is for {self.frames} frames, video has {n}")
        end = 0
        for op in sorted(self.ops, key=lambda o: o.start):
            if op.length < 1 or op.start < 0 or op.start + op.length > n:
                raise ValueError(f"span {op} outside [0, {n})")
            if op.start < end:
                raise ValueError(f"span {op} overlaps a previous span")
            if not 0 <= op.hold < n:
                raise ValueError(f"hold frame {op.hold} outside [0, {n})")
            end = op.start + op.length

    def to_dict(self) -> dict:
        return {"T": self.frames, "level": self.level, "drop_rate": self.drop_rate,
                "ops": [{"start": o.start, "len": o.length, "hold": o.hold} for o in self.ops],
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "EditSchedule":
        ops = [EditOp(int(o["start"]), int(o["len"]), int(o["hold"])) for o in d["ops"]]
        s = cls(int(d["T"]), int(d["level"]), float(d["drop_rate"]), ops, d.get("seed"))
        s.validate()
        return s

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def drop_count(frames: int, rate: float) -> int:
    """round(frames * rate), halves rounded up, computed in decimal."""
    exact = Decimal(frames) * Decimal(repr(float(rate)))
    return int(exact.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def random_composition(total: int, parts: int, rng: np.random.Generator) -> list[int]:
    """Uniform draw from the compositions of ``total`` into ``parts`` non-negative integers."""
    if parts == 1:
        return [total]
    bars = np.sort(rng.choice(total + parts - 1, size=parts - 1, replace=False))
    edges = np.concatenate(([-1], bars, [total + parts - 1]))
    return [int(x) for x in np.diff(edges) - 1]


def _free_starts(occupied: np.ndarray, length: int, lo: int) -> np.ndarray:
    n = occupied.size
    if length > n - lo:
        return np.empty(0, dtype=np.int64)
    taken = np.concatenate(([0], np.cumsum(occupied)))
    starts = np.arange(lo, n - length + 1)
    return starts[taken[starts + length] - taken[starts] == 0]


def _place(lengths: list[int], frames: int, rng: np.random.Generator) -> list[tuple[int, int]] | None:
    occupied = np.zeros(frames, dtype=np.int64)
    spans = []
    for length in lengths:
        if length == 0:
            continue
        # frame 0 always survives so every span has a frame to hold
        starts = _free_starts(occupied, length, lo=1)
        if starts.size == 0:
            return None
        s = int(starts[rng.integers(starts.size)])
        occupied[s:s + length] = 1
        spans.append((s, length))
    return spans


def _with_holds(spans: list[tuple[int, int]], frames: int) -> list[EditOp]:
    dropped = np.zeros(frames, dtype=bool)
    for s, n in spans:
        dropped[s:s + n] = True
    ops = []
    for s, n in sorted(spans):
        hold = s - 1
        while dropped[hold]:
            hold -= 1
        ops.append(EditOp(s, n, hold))
    return ops


def plan_schedule(spec: SynthSpec, level: int) -> EditSchedule:
    """Edit schedule for level ``level`` (1-based) of ``spec``.

    Deterministic in (spec.seed, level): each level draws from its own
    generator.
    """
    if not 1 <= level <= spec.levels:
        raise ValueError(f"level must be in [1, {spec.levels}], got {level}")
    T, M = spec.frames, spec.intervals
    rate = spec.drop_rates[level - 1]
    n_drop = drop_count(T, rate)
    if n_drop >= T:
        raise ValueError(f"drop rate {rate} removes all {T} frames")
    schedule = EditSchedule(T, level, rate, [], spec.seed)
    if n_drop == 0:
        return schedule
    rng = np.random.default_rng([spec.seed, level])
    lengths = random_composition(n_drop, M, rng)
    spans = None
    for _ in range(MAX_PLACEMENT_RETRIES):
        spans = _place(lengths, T, rng)
        if spans is not None:
            break
    if spans is None:
        spans, pos = [], 1
        for length in lengths:
            if length:
                spans.append((pos, length))
                pos += length
    schedule.ops = _with_holds(spans, T)
    return schedule


def apply_schedule(frames: np.ndarray, schedule: EditSchedule) -> np.ndarray:
    frames = np.asarray(frames)
    schedule.validate(frames.shape[0])
    return frames[schedule.source_index()]


def synthesize_ranked_set(anchor: np.ndarray, spec: SynthSpec):
    """Anchor followed by its K stuttered variants, most to least fluent.

    Returns ``(videos, schedules)`` where ``videos[0]`` is the anchor and
    ``videos[k]`` is level k; intended fluency strictly decreases with index.
    """
    anchor = np.asarray(anchor)
    if anchor.shape[0] != spec.frames:
        raise ValueError(f"spec is for {spec.frames} frames, anchor has {anchor.shape[0]}")
    schedules = [plan_schedule(spec, k) for k in range(1, spec.levels + 1)]
    videos = [anchor] + [apply_schedule(anchor, s) for s in schedules]
    return videos, schedules


# ---------------------------------------------------------------- ffmpeg text


def emit_commands(schedule: EditSchedule, in_path: str, out_path: str) -> list[str]:
    """ffmpeg command realizing ``schedule`` on a constant-frame-rate video.

    Dropped spans are removed with one ``select`` term each; every span's
    hold frame is then repeated with one ``loop`` filter, applied from the
    last span backwards so earlier frame indices stay valid. Nothing is run.
    """
    src, dst = shlex.quote(in_path), shlex.quote(out_path)
    if not schedule.ops:
        return [f"ffmpeg -y -i {src} -c copy {dst}"]
    ops = sorted(schedule.ops, key=lambda o: o.start)
    terms = "+".join(f"between(n,{o.start},{o.start + o.length - 1})" for o in ops)
    dropped = np.zeros(schedule.frames, dtype=bool)
    for o in ops:
        dropped[o.start:o.start + o.length] = True
    before = np.concatenate(([0], np.cumsum(dropped)))
    loops = [f"loop=loop={o.length}:size=1:start={o.hold - int(before[o.hold])}"
             for o in sorted(ops, key=lambda o: (o.hold, o.start), reverse=True)]
    chain = ",".join([f"select='not({terms})'", *loops, "setpts=N/FRAME_RATE/TB"])
    return [f"ffmpeg -y -i {src} -vf \"{chain}\" -an {dst}"]


def emit_ranked_commands(schedules: list[EditSchedule], in_path: str, out_pattern: str) -> list[str]:
    """One command per level; ``out_pattern`` is formatted with ``level``."""
    cmds = []
    for s in schedules:
        cmds.extend(emit_commands(s, in_path, out_pattern.format(level=s.level)))
    return cmds
