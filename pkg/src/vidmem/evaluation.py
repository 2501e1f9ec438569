"""Benchmark QA runner, richness/relevance metrics and needle-in-a-haystack splicing."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import string
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

from . import engine
from .backends import CaptionBackend, TextBackend
from .errors import OverlapError, VidmemError
from .memory import MemoryLevel, ScopeConfig, TimePeriod, VideoMeta
from .parsing import parse_relevance, retry_parse
from .prompts import RELEVANCE_SCHEMA, render_relevance_prompt
from .sim import Fact, ScriptedCaptioner, ScriptedReasoner, WorldEvent, WorldSpec

log = logging.getLogger(__name__)


@dataclass
class QARecord:
    id: str
    video_id: str
    question: str
    options: list[tuple[str, str]]
    answer_label: str
    category: str | None = None
    # evidence second in video coordinates, when known (needle questions)
    timestamp_s: int | None = None

    def __post_init__(self) -> None:
        self.options = [(str(label), str(text)) for label, text in self.options]
        if len(self.options) < 2:
            raise ValueError(f"{self.id}: at least two options required")
        if self.answer_label not in {label for label, _ in self.options}:
            raise ValueError(f"{self.id}: answer label {self.answer_label!r} is not an option label")

    @property
    def labels(self) -> list[str]:
        return [label for label, _ in self.options]

    def prompt_text(self) -> str:
        return "\n".join([self.question.strip()] + [f"({label}) {text}" for label, text in self.options])

    def to_json(self) -> dict:
        d = {"id": self.id, "video_id": self.video_id, "question": self.question,
             "options": [{"label": lbl, "text": txt} for lbl, txt in self.options],
             "answer_label": self.answer_label, "category": self.category}
        if self.timestamp_s is not None:
            d["timestamp_s"] = self.timestamp_s
        return d

    @classmethod
    def from_json(cls, d: dict) -> QARecord:
        opts = d["options"]
        if isinstance(opts, dict):
            options = list(opts.items())
        else:
            options = [(o["label"], o["text"]) if isinstance(o, dict) else (o[0], o[1]) for o in opts]
        return cls(str(d["id"]), str(d["video_id"]), d["question"], options, str(d["answer_label"]),
                   d.get("category"), d.get("timestamp_s"))


def load_qas(path: str | Path) -> list[QARecord]:
    return [QARecord.from_json(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


def save_qas(qas: Iterable[QARecord], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([q.to_json() for q in qas], indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def qa_from_fact(fact: Fact, video_id: str, qid: str) -> QARecord:
    labels = string.ascii_uppercase[: len(fact.options)]
    options = list(zip(labels, fact.options))
    answer_label = labels[fact.options.index(fact.answer)]
    return QARecord(qid, video_id, fact.question, options, answer_label, fact.category, fact.second)


def qas_from_world(world: WorldSpec) -> list[QARecord]:
    return [qa_from_fact(f, world.video_id, f"{world.video_id}-q{i}") for i, f in enumerate(world.facts)]


# ---------------------------------------------------------------- answer normalization


def normalize_label(answer: str, labels: Sequence[str]) -> str | None:
    """First standalone option-label token in the answer, or None."""
    wanted = set(labels)
    for m in re.finditer(r"(?<![A-Za-z0-9])([A-Za-z])(?![A-Za-z0-9])", answer):
        if m.group(1) in wanted:
            return m.group(1)
    return None


Matcher = Callable[[str, QARecord], "str | None"]

MATCH_TEMPLATE = """A multiple-choice question was answered in free text.

Question:
{question}

Given answer: {answer}

Which option label does the given answer select? Reply with the label only, or "None" if it selects no option."""


def label_matcher(answer: str, qa: QARecord) -> str | None:
    return normalize_label(answer, qa.labels)


def llm_matcher(llm: TextBackend) -> Matcher:
    """Matcher that asks a reasoning backend to map the answer onto an option label."""

    def match(answer: str, qa: QARecord) -> str | None:
        found = normalize_label(answer, qa.labels)
        if found is not None and answer.strip().startswith((found, f"({found})")):
            return found
        reply = llm.complete(MATCH_TEMPLATE.format(question=qa.prompt_text(), answer=answer))
        return normalize_label(reply, qa.labels)

    return match


# ---------------------------------------------------------------- pipelines


class Pipeline(Protocol):
    def video(self, video_id: str) -> VideoMeta: ...

    def backends(self, video_id: str) -> tuple[TextBackend, CaptionBackend]: ...


class SimPipeline:
    """Resolves video ids to scripted worlds, with one scripted backend pair per world."""

    def __init__(self, worlds: Iterable[WorldSpec], scope: ScopeConfig) -> None:
        self.worlds = {w.video_id: w for w in worlds}
        self.scope = scope

    def video(self, video_id: str) -> VideoMeta:
        try:
            w = self.worlds[video_id]
        except KeyError:
            raise VidmemError(f"unknown video {video_id!r}") from None
        return VideoMeta(w.video_id, w.duration_s, f"sim://{w.video_id}")

    def backends(self, video_id: str) -> tuple[TextBackend, CaptionBackend]:
        w = self.worlds[video_id]
        return ScriptedReasoner(w, self.scope.init_relevant_count), ScriptedCaptioner(w, self.scope)


class FixedPipeline:
    """Same backend pair for every video; videos resolved through a lookup callable."""

    def __init__(self, resolve: Callable[[str], VideoMeta], llm: TextBackend, captioner: CaptionBackend) -> None:
        self.resolve = resolve
        self.llm = llm
        self.captioner = captioner

    def video(self, video_id: str) -> VideoMeta:
        return self.resolve(video_id)

    def backends(self, video_id: str) -> tuple[TextBackend, CaptionBackend]:
        return self.llm, self.captioner


@dataclass
class Outcome:
    id: str
    video_id: str
    category: str | None
    status: str  # "ok" or "error"
    answer_label: str
    predicted_label: str | None = None
    answer: str = ""
    correct: bool = False
    confident: bool = False
    iterations: int = 0
    llm_calls: int = 0
    llm_logical_calls: int = 0
    caption_calls: int = 0
    error: str = ""


@dataclass
class EvalReport:
    outcomes: list[Outcome]
    accuracy: float
    per_category: dict[str, float]
    ledger: dict[str, int]
    mean_llm_calls: float
    total: int
    correct: int
    errors: int
    strict: bool

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "errors": self.errors,
            "strict": self.strict,
            "per_category": self.per_category,
            "ledger": self.ledger,
            "mean_llm_calls": self.mean_llm_calls,
            "outcomes": [o.__dict__ for o in self.outcomes],
        }

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / "report.json", out / "report.csv"
        jpath.write_text(json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        fields = list(Outcome.__dataclass_fields__)
        with open(cpath, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for o in self.outcomes:
                writer.writerow(o.__dict__)
        return jpath, cpath


def _evaluate_one(qa: QARecord, pipeline: Pipeline, scope: ScopeConfig, opts: engine.EngineOptions,
                  matcher: Matcher) -> Outcome:
    base = dict(id=qa.id, video_id=qa.video_id, category=qa.category, answer_label=qa.answer_label)
    try:
        video = pipeline.video(qa.video_id)
        llm, captioner = pipeline.backends(qa.video_id)
        final = engine.run(video, qa.prompt_text(), scope, llm, captioner, opts)
    except VidmemError as exc:
        return Outcome(status="error", error=f"{type(exc).__name__}: {exc}", **base)
    try:
        predicted = matcher(final.answer, qa)
    except VidmemError as exc:
        log.warning("answer matching failed for %s: %s", qa.id, exc)
        predicted = None
    return Outcome(
        status="ok", predicted_label=predicted, answer=final.answer, correct=predicted == qa.answer_label,
        confident=final.confident, iterations=final.iterations_used, llm_calls=final.ledger.llm_calls,
        llm_logical_calls=final.ledger.llm_logical_calls, caption_calls=final.ledger.caption_calls, **base,
    )


def run_eval(qas: Sequence[QARecord], pipeline: Pipeline, scope: ScopeConfig,
             opts: engine.EngineOptions | None = None, strict: bool = False, workers: int = 4,
             matcher: Matcher = label_matcher) -> EvalReport:
    """Run every question through the loop and score the normalized answer labels.

    Errored records count as wrong when ``strict``; otherwise they leave the denominator.
    """
    if not qas:
        raise VidmemError("empty evaluation set")
    opts = opts or engine.EngineOptions()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda q: _evaluate_one(q, pipeline, scope, opts, matcher), qas))
    else:
        outcomes = [_evaluate_one(q, pipeline, scope, opts, matcher) for q in qas]

    scored = [o for o in outcomes if strict or o.status == "ok"]
    correct = sum(o.correct for o in scored)
    by_cat: dict[str, list[Outcome]] = defaultdict(list)
    for o in scored:
        by_cat[o.category or "uncategorized"].append(o)
    ok = [o for o in outcomes if o.status == "ok"]
    ledger = {
        "llm_calls": sum(o.llm_calls for o in ok),
        "llm_logical_calls": sum(o.llm_logical_calls for o in ok),
        "caption_calls": sum(o.caption_calls for o in ok),
    }
    return EvalReport(
        outcomes=outcomes,
        accuracy=correct / len(scored) if scored else 0.0,
        per_category={c: sum(o.correct for o in os_) / len(os_) for c, os_ in sorted(by_cat.items())},
        ledger=ledger,
        mean_llm_calls=ledger["llm_calls"] / len(ok) if ok else 0.0,
        total=len(scored),
        correct=correct,
        errors=len(outcomes) - len(ok),
        strict=strict,
    )


# ---------------------------------------------------------------- richness / relevance


def shannon_entropy(text: str) -> float:
    """Entropy in bits of the lowercase whitespace-token distribution of ``text``."""
    words = text.lower().split()
    total = len(words)
    if total == 0:
        return 0.0
    h = 0.0
    for count in Counter(words).values():
        p = count / total
        h -= p * math.log2(p)
    return h


def relevance_score(text: str, question: str, llm: TextBackend, max_repairs: int = 2) -> int:
    return retry_parse(lambda: render_relevance_prompt(text, question), parse_relevance, llm,
                       max_repairs=max_repairs, schema=RELEVANCE_SCHEMA)


def backtrack_snapshots(final: engine.FinalResponse) -> dict[MemoryLevel, list[str]]:
    """Memory texts along the backtracking path, per level.

    Coarse and fine levels contribute the entries of explored periods; the
    ultra-fine level contributes the entries cited as answer evidence.
    """
    out: dict[MemoryLevel, list[str]] = {lvl: [] for lvl in MemoryLevel}
    state = final.state
    if state is None:
        return out
    for period, level in state.explored:
        entry = state.cm.get(period, level)
        if entry is not None:
            out[level].append(entry.text)
    for period in final.evidence_periods:
        entry = state.cm.get(period, MemoryLevel.ULTRAFINE)
        if entry is not None:
            out[MemoryLevel.ULTRAFINE].append(entry.text)
    return out


@dataclass
class LevelRow:
    level: MemoryLevel
    entropy_mean: float | None
    relevance_mean: float | None
    count: int = 0

    @property
    def flagged(self) -> bool:
        return self.count == 0


def richness_relevance_curve(snapshots: dict[MemoryLevel, Sequence[str]], question: str,
                             llm: TextBackend) -> list[LevelRow]:
    """Per-level mean entropy and mean relevance score (unweighted over entries)."""
    if not snapshots:
        raise ValueError("at least one level snapshot is required")
    rows = []
    for level in sorted(snapshots):
        texts = list(snapshots[level])
        if not texts:
            log.warning("no memories at level %s; row left empty", level.label)
            rows.append(LevelRow(level, None, None, 0))
            continue
        ent = sum(shannon_entropy(t) for t in texts) / len(texts)
        rel = sum(relevance_score(t, question, llm) for t in texts) / len(texts)
        rows.append(LevelRow(level, ent, rel, len(texts)))
    return rows


def write_levels_csv(rows: Sequence[LevelRow], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "entropy_mean", "relevance_mean"])
        for r in rows:
            writer.writerow([r.level.label, "" if r.entropy_mean is None else f"{r.entropy_mean:.6f}",
                             "" if r.relevance_mean is None else f"{r.relevance_mean:.6f}"])
    return path


# ---------------------------------------------------------------- needle in a haystack


@dataclass
class Needle:
    clip: WorldSpec | str  # world fragment, or a media file path
    qas: list[QARecord]
    duration_s: int = 10


@dataclass
class SplicePlan:
    """Cut list for the external decoder: alternating base and needle segments."""

    segments: list[dict] = field(default_factory=list)
    duration_s: int = 0

    def to_json(self) -> dict:
        return {"duration_s": self.duration_s, "segments": self.segments}


@dataclass
class HaystackResult:
    world: WorldSpec | None
    plan: SplicePlan
    qas: list[QARecord]
    needle_periods: list[TimePeriod]


def _check_positions(positions: Sequence[int], duration_s: int) -> None:
    for p in positions:
        if not 0 <= p <= duration_s:
            raise VidmemError(f"insertion position {p} outside [0, {duration_s}]")
    if len(set(positions)) != len(positions):
        raise OverlapError("two needles are inserted at the same position")


def shift_time(t: int, inserts: Sequence[tuple[int, int]]) -> int:
    """Map a base-timeline second to the spliced timeline. ``inserts`` holds (position, length)."""
    return t + sum(length for pos, length in inserts if pos <= t)


def build_needle_haystack(base: WorldSpec | VideoMeta, needles: Sequence[Needle], positions: Sequence[int],
                          video_id: str | None = None) -> HaystackResult:
    """Splice needle clips into ``base`` at base-timeline ``positions``.

    Later material shifts right by the inserted length; an event cut by an insertion is
    split in two. Needle QA timestamps are rewritten to spliced coordinates.
    """
    if len(needles) != len(positions):
        raise ValueError("one position per needle is required")
    _check_positions(positions, base.duration_s)
    order = sorted(range(len(needles)), key=lambda i: positions[i])
    inserts = [(positions[i], needles[i].duration_s) for i in order]
    new_id = video_id or (f"{base.video_id}-haystack" if needles else base.video_id)
    total = base.duration_s + sum(n.duration_s for n in needles)

    plan = SplicePlan(duration_s=total)
    cursor = 0
    for i in order:
        pos, n = positions[i], needles[i]
        if pos > cursor:
            plan.segments.append({"source": "base", "start_s": cursor, "end_s": pos})
        src = n.clip if isinstance(n.clip, str) else n.clip.video_id
        plan.segments.append({"source": src, "start_s": 0, "end_s": n.duration_s, "needle": i})
        cursor = pos
    if cursor < base.duration_s:
        plan.segments.append({"source": "base", "start_s": cursor, "end_s": base.duration_s})

    needle_periods: dict[int, TimePeriod] = {}
    offset = 0
    for i in order:
        start = positions[i] + offset
        needle_periods[i] = TimePeriod(start, start + needles[i].duration_s)
        offset += needles[i].duration_s

    qas: list[QARecord] = []
    for i, n in enumerate(needles):
        np_ = needle_periods[i]
        for q in n.qas:
            ts = None if q.timestamp_s is None else np_.start_s + q.timestamp_s
            qas.append(QARecord(f"{new_id}-n{i}-{q.id}", new_id, q.question, q.options, q.answer_label,
                                q.category, ts))

    world = None
    if isinstance(base, WorldSpec):
        events: list[WorldEvent] = []
        cuts = sorted(p for p, _ in inserts)
        for ev in base.events:
            bounds = [ev.period.start_s] + [c for c in cuts if ev.period.start_s < c < ev.period.end_s] \
                + [ev.period.end_s]
            for a, b in zip(bounds, bounds[1:]):
                micro = {shift_time(s, inserts): m for s, m in ev.micro.items() if a <= s < b}
                events.append(WorldEvent(TimePeriod(shift_time(a, inserts), shift_time(b - 1, inserts) + 1),
                                         ev.summary, ev.detail, micro))
        facts = [Fact(f.question, f.answer, shift_time(f.second, inserts), f.options, f.category)
                 for f in base.facts]
        for i, n in enumerate(needles):
            if not isinstance(n.clip, WorldSpec):
                raise TypeError("simulation splicing needs world-fragment needles")
            off = needle_periods[i].start_s
            for ev in n.clip.events:
                events.append(WorldEvent(TimePeriod(ev.period.start_s + off, ev.period.end_s + off), ev.summary,
                                         ev.detail, {s + off: m for s, m in ev.micro.items()}))
            facts += [Fact(f.question, f.answer, f.second + off, f.options, f.category) for f in n.clip.facts]
        world = WorldSpec(new_id, total, events, facts)
    return HaystackResult(world, plan, qas, [needle_periods[i] for i in range(len(needles))])


def needle_from_fragment(fragment: WorldSpec) -> Needle:
    qas = [qa_from_fact(f, fragment.video_id, f"q{j}") for j, f in enumerate(fragment.facts)]
    return Needle(fragment, qas, fragment.duration_s)


def needle_to_json(n: Needle) -> dict:
    clip = n.clip if isinstance(n.clip, str) else n.clip.to_json()
    return {"clip": clip, "duration_s": n.duration_s, "qas": [q.to_json() for q in n.qas]}


def needle_from_json(d: dict) -> Needle:
    clip = d["clip"]
    clip = clip if isinstance(clip, str) else WorldSpec.from_json(clip)
    duration = int(d.get("duration_s", clip.duration_s if isinstance(clip, WorldSpec) else 10))
    return Needle(clip, [QARecord.from_json(q) for q in d.get("qas", [])], duration)
