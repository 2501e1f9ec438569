"""Strict parsers for agent completions, plus the repair-retry driver."""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass
from typing import Any, Callable, Sequence, TypeVar

from .errors import OutOfRangeError, ParseError
from .memory import TimePeriod
from .prompts import render_repair_prompt

T = TypeVar("T")

NO_ANSWER = "No Answer"
NO_TIME = "No Time"
NO_TIME_PERIODS = "No Time Periods"


@dataclass(frozen=True)
class InitLocalizationResponse:
    flag: bool
    periods: tuple[TimePeriod, ...]
    reason: str = ""

    def __post_init__(self) -> None:
        if not self.flag and self.periods:
            raise ValueError("flag=False requires an empty period list")


@dataclass(frozen=True)
class LocateAndInstructResponse:
    period: TimePeriod
    instruction: str
    reason: str = ""

    def __post_init__(self) -> None:
        if not self.instruction.strip():
            raise ValueError("instruction must be non-empty")


@dataclass(frozen=True)
class AnswerResponse:
    confidence: bool
    answer: str
    periods: tuple[TimePeriod, ...]
    reason: str = ""

    def __post_init__(self) -> None:
        if self.confidence == (self.answer == NO_ANSWER) or self.confidence != bool(self.periods):
            raise ValueError("confidence, answer and periods disagree")


# ---------------------------------------------------------------- extraction

_BARE_WORDS = {"true": "True", "false": "False", "null": "None"}


def extract_dict_literal(raw: str) -> str:
    """Return the first balanced ``{...}`` in ``raw``, skipping braces inside string literals."""
    start = raw.find("{")
    while start != -1:
        depth = 0
        quote: str | None = None
        escaped = False
        for i in range(start, len(raw)):
            ch = raw[i]
            if quote:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == quote:
                    quote = None
                continue
            if ch in "\"'":
                quote = ch
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return raw[start : i + 1]
        start = raw.find("{", start + 1)
    raise ParseError("no dictionary literal found in response")


def _replace_bare_words(text: str) -> str:
    out = []
    for token in re.split(r"(\"(?:[^\"\\]|\\.)*\"|'(?:[^'\\]|\\.)*')", text):
        if token[:1] in ("'", '"'):
            out.append(token)
        else:
            out.append(re.sub(r"\b(true|false|null)\b", lambda m: _BARE_WORDS[m.group(1)], token))
    return "".join(out)


def load_dict(raw: str) -> dict[str, Any]:
    """Parse the first dictionary literal in ``raw`` as JSON or a Python literal."""
    text = extract_dict_literal(raw)
    for attempt in (
        lambda: json.loads(text),
        lambda: ast.literal_eval(text),
        lambda: ast.literal_eval(_replace_bare_words(text)),
    ):
        try:
            value = attempt()
        except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
            continue
        if isinstance(value, dict):
            return value
    raise ParseError("dictionary literal is malformed")


def _require_key(data: dict, key: str) -> Any:
    if key not in data:
        raise ParseError(f"missing key {key!r}")
    return data[key]


def _as_bool(value: Any, key: str) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("true", "false"):
        return value.strip().lower() == "true"
    raise ParseError(f"{key!r} must be a boolean, got {value!r}")


def _as_str(value: Any, key: str) -> str:
    if not isinstance(value, str):
        raise ParseError(f"{key!r} must be a string, got {type(value).__name__}")
    return value


# ---------------------------------------------------------------- periods

_CLOCK = re.compile(r"^(?:(\d+):)?(\d{1,2}):(\d{1,2}(?:\.\d+)?)$")


def _seconds(value: Any) -> float:
    if isinstance(value, bool):
        raise ParseError(f"bad time value {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        s = value.strip().lower().rstrip("s").strip()
        m = _CLOCK.match(s)
        if m:
            h, mnt, sec = m.groups()
            return int(h or 0) * 3600 + int(mnt) * 60 + float(sec)
        try:
            return float(s)
        except ValueError:
            pass
    raise ParseError(f"bad time value {value!r}")


def coerce_period(value: Any) -> tuple[float, float]:
    """Turn ``(start, end)``, ``[start, end]`` or ``"start-end"`` into a pair of seconds."""
    if isinstance(value, str):
        parts = [p for p in re.split(r"\s*(?:,|\u2013|\u2014|-|to)\s*", value.strip().strip("()[]")) if p]
        if len(parts) != 2:
            raise ParseError(f"bad period {value!r}")
        value = parts
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ParseError(f"bad period {value!r}")
    start, end = (_seconds(v) for v in value)
    if end <= start:
        raise ParseError(f"period end must follow start: {value!r}")
    return start, end


def _period_list(value: Any, key: str, empty_markers: tuple[str, ...]) -> list[tuple[float, float]] | None:
    """Return None for an explicit 'no periods' marker, else the list of raw pairs."""
    if value is None:
        return None
    if isinstance(value, str):
        if value.strip().rstrip(".").lower() in {m.lower() for m in empty_markers}:
            return None
        try:
            return [coerce_period(value)]
        except ParseError:
            raise ParseError(f"{key!r} must be a list of periods, got {value!r}") from None
    if isinstance(value, (list, tuple)) and len(value) == 2 and not isinstance(value[0], (list, tuple, str)):
        # a bare (start, end) pair rather than a list of pairs
        return [coerce_period(value)]
    if not isinstance(value, (list, tuple)):
        raise ParseError(f"{key!r} must be a list of periods")
    return [coerce_period(v) for v in value]


def integral_period(start: float, end: float) -> TimePeriod:
    s = max(0, int(start // 1))
    e = int(-(-end // 1))
    if e <= s:
        e = s + 1
    return TimePeriod(s, e)


def snap_period(start: float, end: float, candidates: Sequence[TimePeriod]) -> TimePeriod:
    """Map a returned period onto the candidate with maximal overlap.

    An exact match always wins; overlap ties go to the earlier candidate.
    """
    if not candidates:
        raise OutOfRangeError("no candidate periods to snap to")
    lo = min(c.start_s for c in candidates)
    hi = max(c.end_s for c in candidates)
    start, end = max(start, lo), min(end, hi)
    if end <= start:
        raise OutOfRangeError(f"period ({start}, {end}) lies outside [{lo}, {hi})")
    for c in candidates:
        if c.start_s == start and c.end_s == end:
            return c
    best, best_overlap = None, 0.0
    for c in candidates:
        ov = min(end, c.end_s) - max(start, c.start_s)
        if ov > best_overlap:
            best, best_overlap = c, ov
    if best is None:
        raise OutOfRangeError(f"period ({start}, {end}) overlaps no candidate period")
    return best


def _snap_all(pairs: list[tuple[float, float]], candidates: Sequence[TimePeriod]) -> tuple[TimePeriod, ...]:
    out: list[TimePeriod] = []
    for start, end in pairs:
        p = snap_period(start, end, candidates)
        if p not in out:
            out.append(p)
    return tuple(out)


# ---------------------------------------------------------------- parsers


def parse_init_localization(
    raw: str, division: Sequence[TimePeriod], max_periods: int = 3
) -> InitLocalizationResponse:
    data = load_dict(raw)
    flag = _as_bool(_require_key(data, "Flag"), "Flag")
    pairs = _period_list(_require_key(data, "Time Period"), "Time Period", (NO_TIME_PERIODS, NO_TIME))
    reason = str(data.get("Reason", ""))
    if not flag:
        return InitLocalizationResponse(False, (), reason)
    if not pairs:
        raise ParseError("Flag is True but no time periods were given")
    if len(pairs) > max_periods:
        raise ParseError(f"expected at most {max_periods} periods, got {len(pairs)}")
    return InitLocalizationResponse(True, _snap_all(pairs, division), reason)


def parse_locate_and_instruct(raw: str, division: Sequence[TimePeriod]) -> LocateAndInstructResponse:
    data = load_dict(raw)
    pairs = _period_list(_require_key(data, "Time Period"), "Time Period", ())
    instruction = _as_str(_require_key(data, "Instruction"), "Instruction").strip()
    if not pairs or len(pairs) != 1:
        raise ParseError(f"expected single period, got {0 if not pairs else len(pairs)}")
    if not instruction:
        raise ParseError("'Instruction' must be non-empty")
    (start, end), = pairs
    return LocateAndInstructResponse(snap_period(start, end, division), instruction, str(data.get("Reason", "")))


def parse_answer(raw: str) -> AnswerResponse:
    data = load_dict(raw)
    confidence = _as_bool(_require_key(data, "Confidence"), "Confidence")
    answer = _as_str(_require_key(data, "Answer"), "Answer").strip()
    pairs = _period_list(_require_key(data, "Time Period"), "Time Period", (NO_TIME, NO_TIME_PERIODS))
    reason = str(data.get("Reason", ""))
    if not confidence:
        # unconfident is unambiguous: drop any stray answer text into the reason
        if answer and answer != NO_ANSWER:
            reason = f"{reason} (withdrawn answer: {answer})".strip()
        return AnswerResponse(False, NO_ANSWER, (), reason)
    if not answer or answer == NO_ANSWER:
        raise ParseError("Confidence is True but no answer was given")
    if not pairs:
        raise ParseError("Confidence is True but no time periods were given")
    periods: list[TimePeriod] = []
    for start, end in pairs:
        p = integral_period(start, end)
        if p not in periods:
            periods.append(p)
    return AnswerResponse(True, answer, tuple(periods), reason)


_SCORE = re.compile(r"Scoring result:\s*\**\s*(-?\d+)\s*\**\s*points?", re.IGNORECASE)


def parse_relevance(raw: str) -> int:
    m = _SCORE.search(raw)
    if not m:
        raise ParseError('no "Scoring result: X points" line found')
    score = int(m.group(1))
    if not 1 <= score <= 5:
        raise ParseError(f"score {score} outside 1..5")
    return score


# ---------------------------------------------------------------- serializers


def _periods_text(periods: Sequence[TimePeriod]) -> str:
    return "[" + ", ".join(f"({p.start_s}, {p.end_s})" for p in periods) + "]"


def _q(text: str) -> str:
    return json.dumps(text, ensure_ascii=False)


def format_init_localization(r: InitLocalizationResponse) -> str:
    periods = _periods_text(r.periods) if r.flag else _q(NO_TIME_PERIODS)
    return f'{{"Flag": {r.flag}, "Time Period": {periods}, "Reason": {_q(r.reason)}}}'


def format_locate_and_instruct(r: LocateAndInstructResponse) -> str:
    return (
        f'{{"Time Period": {_periods_text([r.period])}, "Instruction": {_q(r.instruction)}, '
        f'"Reason": {_q(r.reason)}}}'
    )


def format_answer(r: AnswerResponse) -> str:
    periods = _periods_text(r.periods) if r.confidence else _q(NO_TIME)
    return (
        f'{{"Confidence": {r.confidence}, "Answer": {_q(r.answer)}, "Time Period": {periods}, '
        f'"Reason": {_q(r.reason)}}}'
    )


# ---------------------------------------------------------------- retry


def retry_parse(
    render: Callable[[], str] | str,
    parse: Callable[[str], T],
    backend,
    max_repairs: int = 2,
    schema: str = "",
    on_call: Callable[[str, str, int], None] | None = None,
) -> T:
    """Call ``backend`` and parse; on ParseError re-prompt with a repair suffix.

    Makes at most ``1 + max_repairs`` backend calls. ``on_call(prompt, raw, attempt)``
    is invoked once per call. The last ParseError propagates when the budget runs out.
    """
    if max_repairs < 0:
        raise ValueError("max_repairs must be >= 0")
    prompt = render() if callable(render) else render
    current = prompt
    for attempt in range(max_repairs + 1):
        raw = backend.complete(current)
        if on_call is not None:
            on_call(current, raw, attempt)
        try:
            return parse(raw)
        except ParseError as exc:
            if attempt == max_repairs:
                raise
            current = render_repair_prompt(prompt, raw, str(exc), schema)
    raise AssertionError("unreachable")
