"""Scripted worlds and backends for deterministic end-to-end runs.

A world is a synthetic annotated "video": a timeline of events, each with a short
summary, a longer detail passage, and per-second micro observations. The scripted
captioner reveals these at coarse, fine and ultra-fine granularity; the scripted
reasoner answers the agent prompts with exact lowercase keyword overlap.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .backends import CaptionBackend, ClipRequest, DecodeParams, TextBackend
from .errors import UnknownTemplateError
from .memory import MemoryLevel, ScopeConfig, TimePeriod
from .parsing import (
    NO_ANSWER,
    AnswerResponse,
    InitLocalizationResponse,
    LocateAndInstructResponse,
    format_answer,
    format_init_localization,
    format_locate_and_instruct,
)
from .prompts import (
    ANSWER_SENTINEL,
    FORCED_SENTINEL,
    INIT_SENTINEL,
    LOCATE_SENTINEL,
    RELEVANCE_SENTINEL,
    REPAIR_SENTINEL,
)

NOTHING = "nothing notable"

STOPWORDS = frozenset(
    "a an the of in on at to is are was were what which who whom whose how why when where "
    "does do did this that these those it its and or with for from by as be been there their "
    "video clip time period".split()
)


def tokens(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def keywords(text: str) -> set[str]:
    return {t for t in tokens(text) if t not in STOPWORDS}


# ---------------------------------------------------------------- world model


@dataclass
class WorldEvent:
    period: TimePeriod
    summary: str
    detail: str
    micro: dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for sec in self.micro:
            if not self.period.contains_second(sec):
                raise ValueError(f"micro second {sec} outside {self.period}")

    def to_json(self) -> dict:
        return {
            "start_s": self.period.start_s,
            "end_s": self.period.end_s,
            "summary": self.summary,
            "detail": self.detail,
            "micro": {str(k): v for k, v in sorted(self.micro.items())},
        }

    @classmethod
    def from_json(cls, d: dict) -> WorldEvent:
        return cls(TimePeriod(int(d["start_s"]), int(d["end_s"])), d["summary"], d["detail"],
                   {int(k): v for k, v in d.get("micro", {}).items()})


@dataclass
class Fact:
    """A planted, answerable detail: the answer string is visible only at ``second``."""

    question: str
    answer: str
    second: int
    options: list[str] = field(default_factory=list)
    category: str = "Detail Perception"

    def to_json(self) -> dict:
        return {"question": self.question, "answer": self.answer, "second": self.second,
                "options": list(self.options), "category": self.category}

    @classmethod
    def from_json(cls, d: dict) -> Fact:
        return cls(d["question"], d["answer"], int(d["second"]), list(d.get("options", [])),
                   d.get("category", "Detail Perception"))


@dataclass
class WorldSpec:
    video_id: str
    duration_s: int
    events: list[WorldEvent]
    facts: list[Fact] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.duration_s < 1:
            raise ValueError("duration_s must be >= 1")
        for ev in self.events:
            if ev.period.end_s > self.duration_s:
                raise ValueError(f"event {ev.period} beyond world duration {self.duration_s}")
        self.events.sort(key=lambda e: (e.period.start_s, e.period.end_s))

    def to_json(self) -> dict:
        return {"video_id": self.video_id, "duration_s": self.duration_s,
                "events": [e.to_json() for e in self.events], "facts": [f.to_json() for f in self.facts]}

    @classmethod
    def from_json(cls, d: dict) -> WorldSpec:
        return cls(d["video_id"], int(d["duration_s"]), [WorldEvent.from_json(e) for e in d["events"]],
                   [Fact.from_json(f) for f in d.get("facts", [])])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> WorldSpec:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def overlapping(self, period: TimePeriod) -> list[WorldEvent]:
        return [e for e in self.events if e.period.overlap(period)]


# ---------------------------------------------------------------- captioner


def scripted_caption_text(world: WorldSpec, period: TimePeriod, scope: ScopeConfig) -> str:
    """Granularity is chosen by clip length: summaries above the fine scope, details
    down to the ultra-fine scope, per-second micro observations at or below it."""
    events = world.overlapping(period)
    d = period.duration
    if d > scope.t_fine_s:
        parts = [e.summary for e in events]
    elif d > scope.t_ultrafine_s:
        parts = [e.detail for e in events]
    else:
        parts = [e.micro[s] for s in range(period.start_s, period.end_s) for e in events if s in e.micro]
    return " ".join(parts) if parts else NOTHING


class ScriptedCaptioner(CaptionBackend):
    def __init__(self, worlds: WorldSpec | Iterable[WorldSpec], scope: ScopeConfig) -> None:
        super().__init__()
        worlds = [worlds] if isinstance(worlds, WorldSpec) else list(worlds)
        self.worlds = {w.video_id: w for w in worlds}
        self.scope = scope

    def _caption(self, req: ClipRequest) -> str:
        return scripted_caption_text(self.worlds[req.video.video_id], req.period, self.scope)


# ---------------------------------------------------------------- reasoner

_BLOCK = re.compile(r"^\[(\d+) s – (\d+) s\] \((coarse|fine|ultrafine)\): (.*)$", re.MULTILINE)
_QUESTION = re.compile(
    r"Now, a question has been raised regarding (?:the content descriptions of )?this video\.\n\n(.*?)\n\nPlease read",
    re.DOTALL,
)
_EXPLORED = re.compile(r"other than the following time periods:\n\n(.*?)\n\nIn addition", re.DOTALL)
_EXPLORED_ITEM = re.compile(r"\((\d+), (\d+)\) \[(coarse|fine|ultrafine)\]")
_OPTION = re.compile(r"^\(?([A-Z])[).:]\s+(.+)$")
_REL_TEXT = re.compile(r"^Given Text: (.*)\nGiven Question: (.*)$", re.DOTALL | re.MULTILINE)


@dataclass(frozen=True)
class Block:
    period: TimePeriod
    level: MemoryLevel
    text: str


def parse_blocks(prompt: str) -> list[Block]:
    return [Block(TimePeriod(int(a), int(b)), MemoryLevel.parse(lvl), text)
            for a, b, lvl, text in _BLOCK.findall(prompt)]


def split_question(question: str) -> tuple[str, list[tuple[str, str]]]:
    """Separate the stem from labelled option lines."""
    stem, options = [], []
    for line in question.strip().splitlines():
        m = _OPTION.match(line.strip())
        if m and stem:
            options.append((m.group(1), m.group(2).strip()))
        else:
            stem.append(line.strip())
    return " ".join(stem).strip(), options


def _contains(text: str, needle: str) -> bool:
    return re.search(r"(?<![a-z0-9])" + re.escape(needle.lower()) + r"(?![a-z0-9])", text.lower()) is not None


class ScriptedReasoner(TextBackend):
    """Answers the four prompt templates deterministically.

    Localization picks the block sharing the most question keywords (ties go to the
    deeper, then earlier block). Answering is confident iff the planted answer string
    for the question appears verbatim in some block.
    """

    def __init__(self, facts: Iterable[Fact] | WorldSpec = (), init_count: int = 3) -> None:
        super().__init__()
        if isinstance(facts, WorldSpec):
            facts = facts.facts
        self.answers = {split_question(f.question)[0].lower(): f.answer for f in facts}
        self.init_count = init_count

    def _complete(self, prompt: str, params: DecodeParams) -> str:
        prompt = prompt.split(REPAIR_SENTINEL)[0]
        if RELEVANCE_SENTINEL in prompt:
            return self._relevance(prompt)
        if LOCATE_SENTINEL in prompt:
            return self._locate(prompt)
        if INIT_SENTINEL in prompt:
            return self._init(prompt)
        if ANSWER_SENTINEL in prompt:
            return self._answer(prompt, force=FORCED_SENTINEL in prompt)
        raise UnknownTemplateError("prompt matches no known template")

    @staticmethod
    def _question(prompt: str) -> tuple[str, list[tuple[str, str]]]:
        m = _QUESTION.search(prompt)
        if not m:
            raise UnknownTemplateError("no question found in prompt")
        return split_question(m.group(1))

    @staticmethod
    def _rank(blocks: Sequence[Block], qk: set[str]) -> list[tuple[int, Block]]:
        scored = [(len(qk & keywords(b.text)), b) for b in blocks]
        scored.sort(key=lambda sb: (-sb[0], -sb[1].level, sb[1].period.start_s, sb[1].period.end_s))
        return scored

    def _init(self, prompt: str) -> str:
        stem, _ = self._question(prompt)
        blocks = [b for b in parse_blocks(prompt) if b.level is MemoryLevel.COARSE]
        ranked = self._rank(blocks, keywords(stem))
        if not ranked or ranked[0][0] == 0:
            return format_init_localization(InitLocalizationResponse(False, (), "no period mentions the question"))
        chosen = tuple(b.period for _, b in ranked[: self.init_count])
        return format_init_localization(InitLocalizationResponse(True, chosen, "keyword overlap"))

    def _locate(self, prompt: str) -> str:
        stem, _ = self._question(prompt)
        m = _EXPLORED.search(prompt)
        explored = set()
        if m:
            explored = {(TimePeriod(int(a), int(b)), MemoryLevel.parse(lvl))
                        for a, b, lvl in _EXPLORED_ITEM.findall(m.group(1))}
        blocks = [b for b in parse_blocks(prompt)
                  if b.level is not MemoryLevel.ULTRAFINE and (b.period, b.level) not in explored]
        qk = keywords(stem)
        ranked = self._rank(blocks, qk)
        if not ranked:
            # nothing left; echo any block so the caller sees a well-formed reply
            ranked = self._rank(parse_blocks(prompt), qk)
        best = ranked[0][1]
        focus = ", ".join(sorted(qk)) or "the main activity"
        instruction = (
            "Please observe all the details in this video very carefully and provide a detailed and "
            f"objective description of what is shown in the video, focusing particularly on: {focus}."
        )
        return format_locate_and_instruct(LocateAndInstructResponse(best.period, instruction, "keyword overlap"))

    def _answer(self, prompt: str, force: bool) -> str:
        stem, options = self._question(prompt)
        blocks = parse_blocks(prompt)
        target = self.answers.get(stem.lower())
        support = [b for b in blocks if target and _contains(b.text, target)]
        if support:
            answer = target
            for label, text in options:
                if _contains(text, target):
                    answer = f"({label}) {text}"
                    break
            periods = tuple(dict.fromkeys(b.period for b in support))
            return format_answer(AnswerResponse(True, answer, periods, "the answer is stated verbatim"))
        if not force:
            return format_answer(AnswerResponse(False, NO_ANSWER, (), "the answer is not in the descriptions"))
        ranked = self._rank(blocks, keywords(stem))
        guess = f"({options[0][0]}) {options[0][1]}" if options else "unknown"
        period = ranked[0][1].period if ranked else TimePeriod(0, 1)
        return format_answer(AnswerResponse(True, guess, (period,), "best guess"))

    def _relevance(self, prompt: str) -> str:
        m = _REL_TEXT.search(prompt)
        if not m:
            raise UnknownTemplateError("relevance prompt without text/question")
        text, question = m.group(1), m.group(2)
        qk = keywords(split_question(question)[0])
        coverage = len(qk & keywords(text)) / len(qk) if qk else 0.0
        return f"Scoring result: {1 + int(4 * coverage + 1e-9)} points"


class FaultyTextBackend(TextBackend):
    """Wraps a backend and corrupts a fraction of its replies."""

    def __init__(self, inner: TextBackend, rate: float, seed: int = 0) -> None:
        super().__init__()
        self.inner = inner
        self.rate = rate
        self.rng = random.Random(seed)
        self.faults = 0

    def _complete(self, prompt: str, params: DecodeParams) -> str:
        raw = self.inner._complete(prompt, params)
        if self.rng.random() >= self.rate:
            return raw
        self.faults += 1
        kind = self.rng.randrange(5)
        if kind == 4 and LOCATE_SENTINEL in prompt:
            # well-formed but adversarial: point at any shown block, explored or ultra-fine included
            blocks = parse_blocks(prompt.split(REPAIR_SENTINEL)[0])
            if blocks:
                p = self.rng.choice(blocks).period
                return re.sub(r'"Time Period": \[\(\d+, \d+\)\]', f'"Time Period": [({p.start_s}, {p.end_s})]',
                              raw, count=1)
        if kind in (0, 4):
            return "I need to think about this more carefully before answering."
        if kind == 1:
            return raw[: max(1, len(raw) // 2)]
        if kind == 2:
            return '```json\n{"Reason": "forgot the other keys"}\n```'
        swapped = re.sub(r"\((\d+), (\d+)\)", r"(\2, \1)", raw)
        return swapped if swapped != raw else "{'Flag': maybe"


# ---------------------------------------------------------------- generator

BG_GROUPS = ["crowd", "family", "couple", "team", "choir", "audience", "commuters", "shoppers", "hikers",
             "runners", "guests", "visitors", "neighbors", "friends", "students", "tourists"]
BG_ACTIONS = ["walks along", "gathers near", "waits beside", "talks around", "sits beside", "moves through",
              "lingers near", "strolls past", "chats beside", "rests near"]
BG_PLACES = ["street", "park", "plaza", "corridor", "lobby", "hallway", "garden", "square", "terrace",
             "balcony", "courtyard", "station", "market", "beach", "meadow", "pier"]

FACT_SUBJECTS = ["courier", "nurse", "pilot", "chef", "librarian", "plumber", "florist", "jockey", "barista",
                 "surgeon", "tailor", "sailor", "farmer", "juggler", "referee", "locksmith", "mechanic",
                 "painter", "cashier", "guard", "baker", "welder", "drummer", "ranger"]
FACT_PLACES = ["warehouse", "greenhouse", "lighthouse", "bakery", "observatory", "harbor", "stadium",
               "pharmacy", "laundromat", "planetarium", "aquarium", "vineyard", "boathouse", "workshop",
               "chapel", "barn", "garage", "library", "gallery", "arcade", "foundry", "kiosk", "hangar",
               "cellar"]
FACT_ACTIONS = ["unloads boxes", "checks shelves", "inspects equipment", "sorts parcels", "counts supplies",
                "repairs a panel", "arranges tools", "carries crates"]
FACT_ATTRIBUTES = [("badge", "number"), ("scarf", "color"), ("sign", "text"), ("mug", "logo"),
                   ("ticket", "code"), ("helmet", "sticker"), ("umbrella", "pattern"), ("notebook", "title"),
                   ("jacket", "emblem"), ("crate", "label"), ("poster", "slogan"), ("lanyard", "tag"),
                   ("glove", "stripe"), ("apron", "monogram"), ("bottle", "brand"), ("cap", "insignia")]

_SYL_C = "bdfghjklmnprstvz"
_SYL_V = "aeiou"


def _pseudo(rng: random.Random, n: int) -> str:
    """Filler pseudo-words; they never collide with real keywords."""
    words = []
    for _ in range(n):
        k = rng.randint(2, 3)
        words.append("".join(rng.choice(_SYL_C) + rng.choice(_SYL_V) for _ in range(k)) + rng.choice("qxw"))
    return " ".join(words)


def _value(rng: random.Random, used: set[str]) -> str:
    while True:
        v = f"{rng.choice('KMRTVXZ')}{rng.randint(1000, 9999)}"
        if v not in used:
            used.add(v)
            return v


def _options(rng: random.Random, answer: str, used: set[str], n: int = 4) -> list[str]:
    opts = [answer] + [_value(rng, used) for _ in range(n - 1)]
    rng.shuffle(opts)
    return opts


@dataclass
class _Planted:
    subject: str
    place: str
    action: str
    attrs: list[tuple[str, str]]


def _planted_event(rng: random.Random, p: _Planted, period: TimePeriod, seconds: Sequence[int],
                   used: set[str]) -> tuple[WorldEvent, list[Fact]]:
    summary = f"a {p.subject} {p.action} inside the {p.place}."
    carried = "; ".join(f"a {obj} with a visible {prop}" for obj, prop in p.attrs)
    detail = f"the {p.subject} {p.action} in the {p.place}, carrying {carried}. {_pseudo(rng, 14)}."
    micro: dict[int, str] = {}
    facts: list[Fact] = []
    for (obj, prop), sec in zip(p.attrs, seconds):
        answer = _value(rng, used)
        micro[sec] = (
            f"close view of the {p.subject} in the {p.place}: the {prop} on the {obj} reads {answer} "
            f"clearly. {_pseudo(rng, 45)}."
        )
        question = f"What {prop} is shown on the {obj} of the {p.subject} in the {p.place}?"
        facts.append(Fact(question, answer, sec, _options(rng, answer, used)))
    return WorldEvent(period, summary, detail, micro), facts


def _background(rng: random.Random, duration_s: int, min_len: int = 60, max_len: int = 600) -> list[WorldEvent]:
    events, t = [], 0
    while t < duration_s:
        end = min(duration_s, t + rng.randint(min_len, max_len))
        group, action, place = rng.choice(BG_GROUPS), rng.choice(BG_ACTIONS), rng.choice(BG_PLACES)
        period = TimePeriod(t, end)
        micro = {}
        for _ in range(rng.randint(0, 2)):
            micro[rng.randrange(t, end)] = f"the {group} {action} the {place}. {_pseudo(rng, 20)}."
        events.append(WorldEvent(
            period,
            f"the {group} {action} the {place}.",
            f"the {group} {action} the {place} {_pseudo(rng, 12)}.",
            micro,
        ))
        t = end
    return events


def _draw_planted(rng: random.Random, pools: dict[str, list], n_attrs: int) -> _Planted:
    subject = pools["subjects"].pop(rng.randrange(len(pools["subjects"])))
    place = pools["places"].pop(rng.randrange(len(pools["places"])))
    attrs = rng.sample(FACT_ATTRIBUTES, n_attrs)
    return _Planted(subject, place, rng.choice(FACT_ACTIONS), attrs)


def _fresh_pools(exclude: Iterable[str] = ()) -> dict[str, list]:
    ex = set(exclude)
    return {"subjects": [s for s in FACT_SUBJECTS if s not in ex], "places": [p for p in FACT_PLACES if p not in ex]}


def generate_world(seed: int, duration_s: int, n_facts: int = 1, max_fact_len: int = 10,
                   video_id: str | None = None) -> WorldSpec:
    """Random world with ``n_facts`` planted single-second details, each inside a short event."""
    rng = random.Random(seed)
    events = _background(rng, duration_s)
    pools = _fresh_pools()
    used: set[str] = set()
    facts: list[Fact] = []
    for _ in range(n_facts):
        planted = _draw_planted(rng, pools, 1)
        second = rng.randrange(duration_s)
        length = min(duration_s, rng.randint(3, max_fact_len))
        start = min(max(0, second - rng.randrange(length)), duration_s - length)
        event, new = _planted_event(rng, planted, TimePeriod(start, start + length), [second], used)
        events.append(event)
        facts += new
    return WorldSpec(video_id or f"sim-{seed}", duration_s, events, facts)


def generate_needle(rng: random.Random, n_questions: int = 4, duration_s: int = 10,
                    exclude: Iterable[str] = (), used: set[str] | None = None) -> WorldSpec:
    """A short clip (world fragment) with ``n_questions`` detail facts at distinct seconds."""
    used = set() if used is None else used
    pools = _fresh_pools(exclude)
    planted = _draw_planted(rng, pools, n_questions)
    seconds = sorted(rng.sample(range(duration_s), n_questions))
    event, facts = _planted_event(rng, planted, TimePeriod(0, duration_s), seconds, used)
    return WorldSpec(f"needle-{planted.subject}", duration_s, [event], facts)


def world_vocabulary(world: WorldSpec) -> set[str]:
    return {w for f in world.facts for w in keywords(split_question(f.question)[0])}


def generate_needles(rng: random.Random, count: int = 5, n_questions: int = 4, duration_s: int = 10,
                     exclude: Iterable[str] = ()) -> list[WorldSpec]:
    """Several needles with pairwise distinct subjects, places and answer values."""
    taken, used, out = set(exclude), set(), []
    for i in range(count):
        frag = generate_needle(rng, n_questions, duration_s, taken, used)
        ev = frag.events[0].summary
        taken |= {w for w in FACT_SUBJECTS + FACT_PLACES if f" {w} " in f" {ev[:-1]} "}
        out.append(WorldSpec(f"{frag.video_id}-{i}", frag.duration_s, frag.events, frag.facts))
    return out
