"""Hierarchical temporal memory: periods, levels, clip division and the current memory list."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Iterator, Mapping

from .errors import MembershipError


@dataclass(frozen=True, order=True)
class TimePeriod:
    """Half-open interval ``[start_s, end_s)`` in whole seconds."""

    start_s: int
    end_s: int

    def __post_init__(self) -> None:
        if self.start_s < 0 or self.end_s <= self.start_s:
            raise ValueError(f"invalid period [{self.start_s}, {self.end_s})")

    @property
    def duration(self) -> int:
        return self.end_s - self.start_s

    def contains_second(self, t: float) -> bool:
        return self.start_s <= t < self.end_s

    def contains(self, other: TimePeriod) -> bool:
        return self.start_s <= other.start_s and other.end_s <= self.end_s

    def overlap(self, other: TimePeriod) -> int:
        return max(0, min(self.end_s, other.end_s) - max(self.start_s, other.start_s))

    def as_tuple(self) -> tuple[int, int]:
        return (self.start_s, self.end_s)

    def __str__(self) -> str:
        return f"({self.start_s}, {self.end_s})"


class MemoryLevel(enum.IntEnum):
    COARSE = 0
    FINE = 1
    ULTRAFINE = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str | int | MemoryLevel) -> MemoryLevel:
        if isinstance(value, MemoryLevel):
            return value
        if isinstance(value, int):
            return cls(value)
        key = value.strip().lower().replace("-", "").replace("_", "")
        for level in cls:
            if level.label == key:
                return level
        raise ValueError(f"unknown memory level {value!r}")

    def child(self) -> MemoryLevel | None:
        return None if self is MemoryLevel.ULTRAFINE else MemoryLevel(self + 1)


def _fps(value) -> Fraction:
    fps = Fraction(value) if not isinstance(value, float) else Fraction(value).limit_denominator(1000)
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {value}")
    return fps


@dataclass(frozen=True)
class ScopeConfig:
    t_coarse_s: int
    t_fine_s: int
    t_ultrafine_s: int
    fps_per_level: Mapping[MemoryLevel, Fraction]
    init_relevant_count: int = 3
    max_iterations: int = 5
    # deepest level the loop may create; ablation switch
    max_depth: MemoryLevel = MemoryLevel.ULTRAFINE

    def __post_init__(self) -> None:
        # t_fine == t_ultrafine is allowed: the short Video-MME split ships T_f = T_uf = 1
        if not (self.t_coarse_s > self.t_fine_s >= self.t_ultrafine_s >= 1):
            raise ValueError(
                "scopes must satisfy coarse > fine >= ultrafine >= 1, got "
                f"{self.t_coarse_s}/{self.t_fine_s}/{self.t_ultrafine_s}"
            )
        if self.init_relevant_count < 1 or self.max_iterations < 1:
            raise ValueError("init_relevant_count and max_iterations must be positive")
        fps = {MemoryLevel.parse(k): _fps(v) for k, v in self.fps_per_level.items()}
        missing = set(MemoryLevel) - set(fps)
        if missing:
            raise ValueError(f"fps missing for levels {sorted(m.label for m in missing)}")
        object.__setattr__(self, "fps_per_level", fps)
        object.__setattr__(self, "max_depth", MemoryLevel.parse(self.max_depth))

    def scope_for(self, level: MemoryLevel) -> int:
        return (self.t_coarse_s, self.t_fine_s, self.t_ultrafine_s)[level]

    def fps(self, level: MemoryLevel) -> Fraction:
        return self.fps_per_level[level]

    def with_overrides(self, **kwargs) -> ScopeConfig:
        return replace(self, **kwargs)


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    duration_s: int
    source_uri: str = ""

    def __post_init__(self) -> None:
        if self.duration_s < 1:
            raise ValueError("duration_s must be >= 1")


@dataclass(frozen=True)
class ClipDivision:
    periods: tuple[TimePeriod, ...]

    def __iter__(self) -> Iterator[TimePeriod]:
        return iter(self.periods)

    def __len__(self) -> int:
        return len(self.periods)

    def __getitem__(self, i: int) -> TimePeriod:
        return self.periods[i]

    def __contains__(self, period: object) -> bool:
        return period in self._index

    @property
    def _index(self) -> dict[TimePeriod, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {p: i for i, p in enumerate(self.periods)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def index(self, period: TimePeriod) -> int:
        try:
            return self._index[period]
        except KeyError:
            raise MembershipError(f"{period} is not a member of the division") from None


def divide(duration_s: int, scope_s: int, start_s: int = 0) -> ClipDivision:
    """Split ``[start_s, start_s + duration_s)`` into ``ceil(duration/scope)`` abutting clips.

    All clips have length ``scope_s`` except possibly a shorter final remainder.
    """
    if duration_s < 1 or scope_s < 1:
        raise ValueError("duration_s and scope_s must be >= 1")
    end = start_s + duration_s
    return ClipDivision(
        tuple(TimePeriod(s, min(s + scope_s, end)) for s in range(start_s, end, scope_s))
    )


def subdivide(period: TimePeriod, scope_s: int) -> ClipDivision:
    return divide(period.duration, scope_s, start_s=period.start_s)


@dataclass(frozen=True)
class MemoryEntry:
    period: TimePeriod
    level: MemoryLevel
    text: str
    instruction: str = ""
    revision: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "level", MemoryLevel.parse(self.level))

    @property
    def key(self) -> tuple[TimePeriod, MemoryLevel]:
        return (self.period, self.level)

    def sort_key(self) -> tuple[int, int, int]:
        return (self.period.start_s, self.level, self.period.end_s)


@dataclass(frozen=True)
class MemoryList:
    """Current memory list. A value: every update returns a new list."""

    _entries: Mapping[tuple[TimePeriod, MemoryLevel], MemoryEntry] = field(default_factory=dict)

    @classmethod
    def of(cls, entries: Iterable[MemoryEntry]) -> MemoryList:
        cm = cls()
        for e in entries:
            cm = upsert(cm, e)
        return cm

    def __iter__(self) -> Iterator[MemoryEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: object) -> bool:
        return key in self._entries

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryList):
            return NotImplemented
        return self.entries == other.entries

    def __hash__(self) -> int:
        return hash(self.entries)

    @property
    def entries(self) -> tuple[MemoryEntry, ...]:
        cached = self.__dict__.get("_sorted")
        if cached is None:
            cached = tuple(sorted(self._entries.values(), key=MemoryEntry.sort_key))
            object.__setattr__(self, "_sorted", cached)
        return cached

    def get(self, period: TimePeriod, level: MemoryLevel) -> MemoryEntry | None:
        return self._entries.get((period, level))

    def at_level(self, level: MemoryLevel) -> list[MemoryEntry]:
        return [e for e in self.entries if e.level is level]

    def periods(self, level: MemoryLevel | None = None) -> list[TimePeriod]:
        return [e.period for e in self.entries if level is None or e.level is level]


def upsert(cm: MemoryList, entry: MemoryEntry) -> MemoryList:
    """Insert ``entry`` or replace the text/instruction stored under its (period, level).

    Replacement bumps the stored revision by one.
    """
    entries = dict(cm._entries)
    old = entries.get(entry.key)
    if old is not None:
        entry = replace(old, text=entry.text, instruction=entry.instruction, revision=old.revision + 1)
    entries[entry.key] = entry
    return MemoryList(entries)


def upsert_many(cm: MemoryList, new: Iterable[MemoryEntry]) -> MemoryList:
    for entry in new:
        cm = upsert(cm, entry)
    return cm


def filter_by_periods(cm: MemoryList, keep: Iterable[TimePeriod]) -> MemoryList:
    keep = set(keep)
    return MemoryList({k: e for k, e in cm._entries.items() if e.period in keep})


def neighborhood_expand(selected: Iterable[TimePeriod], division: ClipDivision) -> set[TimePeriod]:
    """Add the immediate predecessor and successor clip of every selected clip."""
    result: set[TimePeriod] = set()
    last = len(division) - 1
    for period in selected:
        i = division.index(period)
        result.add(period)
        if i > 0:
            result.add(division[i - 1])
        if i < last:
            result.add(division[i + 1])
    return result


def render_entry(entry: MemoryEntry) -> str:
    # one line per entry: multi-paragraph captions are flattened
    text = " ".join(entry.text.split())
    return f"[{entry.period.start_s} s – {entry.period.end_s} s] ({entry.level.label}): {text}"


def render_for_prompt(cm: MemoryList | Iterable[MemoryEntry]) -> str:
    entries = cm.entries if isinstance(cm, MemoryList) else sorted(cm, key=MemoryEntry.sort_key)
    return "\n".join(render_entry(e) for e in entries)


def entry_to_record(video_id: str, entry: MemoryEntry) -> dict:
    return {
        "video_id": video_id,
        "start_s": entry.period.start_s,
        "end_s": entry.period.end_s,
        "level": entry.level.label,
        "text": entry.text,
        "instruction": entry.instruction,
        "revision": entry.revision,
    }


def entry_from_record(record: Mapping) -> MemoryEntry:
    revision = record["revision"]
    if not isinstance(revision, int) or revision < 0:
        raise ValueError(f"bad revision {revision!r}")
    text = record["text"]
    if not isinstance(text, str) or not isinstance(record["instruction"], str):
        raise ValueError("text and instruction must be strings")
    return MemoryEntry(
        period=TimePeriod(int(record["start_s"]), int(record["end_s"])),
        level=MemoryLevel.parse(record["level"]),
        text=text,
        instruction=record["instruction"],
        revision=revision,
    )
