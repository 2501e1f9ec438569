"""Iterative backtracking over hierarchical memory.

Coarse captions are built once per video; for each question the loop narrows the
coarse memory to the relevant neighbourhood, then alternates answer attempts with
depth/breadth exploration steps until the answering agent is confident or the
iteration budget is spent.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import media
from .backends import CaptionBackend, ClipRequest, TextBackend
from .errors import BudgetError, CaptionError, ExhaustedError, ParseError
from .memory import (
    ClipDivision,
    MemoryEntry,
    MemoryLevel,
    MemoryList,
    ScopeConfig,
    TimePeriod,
    VideoMeta,
    divide,
    filter_by_periods,
    neighborhood_expand,
    subdivide,
    upsert,
    upsert_many,
)
from .parsing import (
    NO_ANSWER,
    AnswerResponse,
    parse_answer,
    parse_init_localization,
    parse_locate_and_instruct,
    retry_parse,
)
from .prompts import (
    ANSWER_SCHEMA,
    COARSE_INSTRUCTION,
    INIT_SCHEMA,
    LOCATE_SCHEMA,
    render_answer_prompt,
    render_init_localization_prompt,
    render_locate_and_instruct_prompt,
)

log = logging.getLogger(__name__)

DEFAULT_CONTEXT_BUDGET = 200_000
DEFAULT_WORKERS = 8

ExploredKey = tuple[TimePeriod, MemoryLevel]


class EventKind(str, enum.Enum):
    INIT = "Init"
    LOCATE = "Locate"
    CAPTION = "Caption"
    ANSWER = "Answer"
    FORCED_ANSWER = "ForcedAnswer"
    ERROR = "Error"


@dataclass
class LoopEvent:
    kind: EventKind
    iteration: int
    period: TimePeriod | None = None
    level: MemoryLevel | None = None
    prompt_chars: int = 0
    response_chars: int = 0
    wall_ms: float = 0.0
    timestamp: float = 0.0
    attempt: int = 0
    payload: dict = field(default_factory=dict)

    @property
    def is_call(self) -> bool:
        return self.kind is not EventKind.ERROR

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "iteration": self.iteration,
            "period": list(self.period.as_tuple()) if self.period else None,
            "level": self.level.label if self.level is not None else None,
            "prompt_chars": self.prompt_chars,
            "response_chars": self.response_chars,
            "wall_ms": round(self.wall_ms, 3),
            "attempt": self.attempt,
            "timestamp": round(self.timestamp, 6),
            "payload": self.payload,
        }


@dataclass
class Ledger:
    llm_calls: int = 0
    llm_logical_calls: int = 0
    repair_calls: int = 0
    caption_calls: int = 0

    def to_dict(self) -> dict:
        return {
            "llm_calls": self.llm_calls,
            "llm_logical_calls": self.llm_logical_calls,
            "repair_calls": self.repair_calls,
            "caption_calls": self.caption_calls,
        }


class Trace:
    """Append-only event log plus per-backend call ledger. Owned by the loop driver."""

    def __init__(self, clock: Callable[[], float] = time.perf_counter) -> None:
        self.clock = clock
        self.events: list[LoopEvent] = []
        self.ledger = Ledger()

    def add(self, event: LoopEvent) -> None:
        self.events.append(event)
        if event.kind is EventKind.CAPTION:
            self.ledger.caption_calls += 1
        elif event.is_call:
            self.ledger.llm_calls += 1
            if event.attempt == 0:
                self.ledger.llm_logical_calls += 1
            else:
                self.ledger.repair_calls += 1

    def error(self, iteration: int, message: str, **payload) -> None:
        self.add(LoopEvent(EventKind.ERROR, iteration, timestamp=self.clock(),
                           payload={"error": message, **payload}))


@dataclass
class EngineOptions:
    workers: int = DEFAULT_WORKERS
    context_budget: int = DEFAULT_CONTEXT_BUDGET
    max_repairs: int = 2
    cache_dir: str | Path | None = None
    clock: Callable[[], float] = time.perf_counter


@dataclass(frozen=True)
class RelevantPeriodSet:
    periods: frozenset[TimePeriod]


@dataclass
class LoopState:
    cm: MemoryList
    division: ClipDivision
    explored: list[ExploredKey] = field(default_factory=list)
    iteration: int = 0
    trace: Trace = field(default_factory=Trace)

    @property
    def ledger(self) -> Ledger:
        return self.trace.ledger

    def explored_set(self) -> set[ExploredKey]:
        return set(self.explored)


@dataclass
class FinalResponse:
    answer: str
    evidence_periods: tuple[TimePeriod, ...]
    confident: bool
    iterations_used: int
    trace: list[LoopEvent]
    ledger: Ledger
    state: LoopState | None = None
    forced: bool = False

    def to_dict(self) -> dict:
        return {
            "answer": self.answer,
            "evidence_periods": [list(p.as_tuple()) for p in self.evidence_periods],
            "confident": self.confident,
            "forced": self.forced,
            "iterations_used": self.iterations_used,
            "ledger": self.ledger.to_dict(),
        }


# ---------------------------------------------------------------- helpers


def _llm_call(trace: Trace, kind: EventKind, iteration: int, render: str, parse, llm: TextBackend,
              max_repairs: int, schema: str, extra: Callable[[object], dict] | None = None):
    """Run one logical reasoning call (with repairs), logging an event per backend call."""
    t0 = [trace.clock()]

    def on_call(prompt: str, raw: str, attempt: int) -> None:
        now = trace.clock()
        trace.add(LoopEvent(kind, iteration, prompt_chars=len(prompt), response_chars=len(raw),
                            wall_ms=(now - t0[0]) * 1000.0, timestamp=now, attempt=attempt))
        t0[0] = now

    result = retry_parse(render, parse, llm, max_repairs=max_repairs, schema=schema, on_call=on_call)
    if extra is not None:
        trace.events[-1].payload.update(extra(result))
    return result


def _caption_many(jobs: Sequence[tuple[TimePeriod, MemoryLevel]], video: VideoMeta, scope: ScopeConfig,
                  instruction: str, captioner: CaptionBackend, trace: Trace, iteration: int,
                  workers: int) -> list[MemoryEntry]:
    """Caption every job, concurrently when workers > 1. All-or-nothing."""
    clock = trace.clock

    def one(job):
        period, level = job
        t0 = clock()
        try:
            req = ClipRequest(video, period, scope.fps(level), instruction)
            return captioner.caption(req), None, t0, clock()
        except Exception as exc:  # surfaced after the join
            return None, exc, t0, clock()

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(job) for job in jobs]

    entries: list[MemoryEntry] = []
    failure: Exception | None = None
    failed_period = None
    for (period, level), (text, exc, t0, t1) in zip(jobs, results):
        trace.add(LoopEvent(EventKind.CAPTION, iteration, period, level, prompt_chars=len(instruction),
                            response_chars=len(text or ""), wall_ms=(t1 - t0) * 1000.0, timestamp=t1,
                            payload={"error": str(exc)} if exc else {}))
        if exc is not None:
            if failure is None:
                failure, failed_period = exc, period
            continue
        entries.append(MemoryEntry(period, level, text, instruction))
    if failure is not None:
        if isinstance(failure, CaptionError):
            if failure.period is None:
                failure.period = failed_period
            raise failure
        if isinstance(failure, (ValueError, TypeError)):
            raise CaptionError(f"captioning {failed_period} failed: {failure}", failed_period) from failure
        raise failure
    return entries


def fit_to_budget(cm: MemoryList, explored: Sequence[ExploredKey], render: Callable[[MemoryList], str],
                  budget: int) -> tuple[MemoryList, str]:
    """Render ``cm``; when over ``budget`` characters, drop unprotected coarse entries earliest first.

    Coarse entries overlapping or abutting an explored period are protected. Eviction
    only affects the rendered view, never the memory list itself.
    """
    prompt = render(cm)
    if len(prompt) <= budget:
        return cm, prompt
    explored_periods = [p for p, _ in explored]

    def protected(p: TimePeriod) -> bool:
        return any(p.overlap(q) or p.end_s == q.start_s or p.start_s == q.end_s for q in explored_periods)

    evictable = [e for e in cm.at_level(MemoryLevel.COARSE) if not protected(e.period)]
    view = cm
    for entry in evictable:
        view = MemoryList({k: v for k, v in view._entries.items() if k != entry.key})
        if len(view) == 0:
            break
        prompt = render(view)
        if len(prompt) <= budget:
            log.info("evicted coarse entries up to %s to fit context budget", entry.period)
            return view, prompt
    raise BudgetError(f"prompt of {len(prompt)} chars exceeds context budget {budget}")


def eligible_entries(cm: MemoryList, explored: set[ExploredKey], scope: ScopeConfig) -> list[MemoryEntry]:
    return [
        e for e in cm
        if e.level < MemoryLevel.ULTRAFINE and e.level <= scope.max_depth and e.key not in explored
    ]


# ---------------------------------------------------------------- operations


def build_coarse_memory(video: VideoMeta, scope: ScopeConfig, captioner: CaptionBackend,
                        opts: EngineOptions | None = None, trace: Trace | None = None) -> MemoryList:
    """Caption every coarse clip with the generic instruction, reusing the on-disk cache."""
    opts = opts or EngineOptions()
    trace = trace or Trace(opts.clock)
    division = divide(video.duration_s, scope.t_coarse_s)
    cached = media.cache_load(video.video_id, opts.cache_dir) if opts.cache_dir else MemoryList()
    have = {p: cached.get(p, MemoryLevel.COARSE) for p in division}
    missing = [(p, MemoryLevel.COARSE) for p, e in have.items() if e is None]
    if missing:
        fresh = _caption_many(missing, video, scope, COARSE_INSTRUCTION, captioner, trace, 0, opts.workers)
        for e in fresh:
            have[e.period] = e
        if opts.cache_dir:
            media.cache_store(video.video_id, upsert_many(cached, fresh), opts.cache_dir)
    else:
        log.info("coarse memory cache hit for %s", video.video_id)
    return MemoryList.of(have[p] for p in division)


def sparse_init(cm_init: MemoryList, question: str, scope: ScopeConfig, llm: TextBackend,
                opts: EngineOptions | None = None, trace: Trace | None = None
                ) -> tuple[MemoryList, RelevantPeriodSet]:
    """Keep only the coarse clips the localization agent flags, plus their neighbours."""
    opts = opts or EngineOptions()
    trace = trace or Trace(opts.clock)
    division = ClipDivision(tuple(cm_init.periods(MemoryLevel.COARSE)))
    everything = RelevantPeriodSet(frozenset(division))
    view, prompt = fit_to_budget(cm_init, [], lambda v: render_init_localization_prompt(v, question),
                                 opts.context_budget)
    shown = view.periods(MemoryLevel.COARSE)
    try:
        resp = _llm_call(
            trace, EventKind.INIT, 0, prompt,
            lambda raw: parse_init_localization(raw, shown, scope.init_relevant_count),
            llm, opts.max_repairs, INIT_SCHEMA,
            extra=lambda r: {"flag": r.flag, "periods": [list(p.as_tuple()) for p in r.periods]},
        )
    except ParseError as exc:
        trace.error(0, f"init localization unparseable, keeping full memory: {exc}")
        return cm_init, everything
    if not resp.flag:
        return cm_init, everything
    keep = neighborhood_expand(resp.periods, division)
    return filter_by_periods(cm_init, keep), RelevantPeriodSet(frozenset(keep))


def _answer(state: LoopState, question: str, video: VideoMeta, llm: TextBackend, opts: EngineOptions,
            force: bool) -> AnswerResponse:
    kind = EventKind.FORCED_ANSWER if force else EventKind.ANSWER
    _, prompt = fit_to_budget(state.cm, state.explored,
                              lambda v: render_answer_prompt(v, question, video.duration_s, force),
                              opts.context_budget)
    return _llm_call(
        state.trace, kind, state.iteration, prompt, parse_answer, llm, opts.max_repairs, ANSWER_SCHEMA,
        extra=lambda r: {"confidence": r.confidence, "answer": r.answer, "cm_size": len(state.cm)},
    )


def explore_step(state: LoopState, question: str, video: VideoMeta, scope: ScopeConfig, llm: TextBackend,
                 captioner: CaptionBackend, opts: EngineOptions | None = None) -> LoopState:
    """Locate one period, recaption it with a question-guided instruction and caption its children.

    Either every caption lands in the memory list or none does.
    """
    opts = opts or EngineOptions()
    explored = state.explored_set()
    if not eligible_entries(state.cm, explored, scope):
        raise ExhaustedError("every coarse and fine period has been explored")
    state.iteration += 1
    it = state.iteration

    view, prompt = fit_to_budget(
        state.cm, state.explored,
        lambda v: render_locate_and_instruct_prompt(v, question, state.explored, video.duration_s),
        opts.context_budget,
    )
    candidates = eligible_entries(view, explored, scope)
    if not candidates:
        raise BudgetError("no explorable period survives the context budget")
    resp = _llm_call(
        state.trace, EventKind.LOCATE, it, prompt,
        lambda raw: parse_locate_and_instruct(raw, [e.period for e in candidates]),
        llm, opts.max_repairs, LOCATE_SCHEMA,
    )
    # the shallowest eligible entry owns the period (equal periods only arise for remainder clips)
    target = min((e for e in candidates if e.period == resp.period), key=lambda e: e.level)
    t, level = target.period, target.level
    last = state.trace.events[-1]
    last.period, last.level = t, level
    last.payload.update({"instruction": resp.instruction, "cm_size": len(state.cm),
                         "explored_before": len(state.explored)})

    jobs: list[tuple[TimePeriod, MemoryLevel]] = [(t, level)]
    child = level.child()
    if child is not None and child <= scope.max_depth:
        jobs += [(c, child) for c in subdivide(t, scope.scope_for(child))]
    entries = _caption_many(jobs, video, scope, resp.instruction, captioner, state.trace, it, opts.workers)

    state.explored.append((t, level))
    state.cm = upsert_many(state.cm, entries)
    return state


def run(video: VideoMeta, question: str, scope: ScopeConfig, llm: TextBackend, captioner: CaptionBackend,
        opts: EngineOptions | None = None) -> FinalResponse:
    """Answer ``question`` about ``video``; always returns, falling back to a forced answer."""
    opts = opts or EngineOptions()
    trace = Trace(opts.clock)
    cm_init = build_coarse_memory(video, scope, captioner, opts, trace)
    cm, _ = sparse_init(cm_init, question, scope, llm, opts, trace)
    state = LoopState(cm=cm, division=ClipDivision(tuple(cm_init.periods(MemoryLevel.COARSE))), trace=trace)

    def attempt_answer() -> AnswerResponse | None:
        try:
            return _answer(state, question, video, llm, opts, force=False)
        except ParseError as exc:
            trace.error(state.iteration, f"answer unparseable, treating as unconfident: {exc}")
            return None

    resp = attempt_answer()
    while (resp is None or not resp.confidence) and state.iteration < scope.max_iterations:
        try:
            explore_step(state, question, video, scope, llm, captioner, opts)
        except ExhaustedError as exc:
            trace.error(state.iteration, str(exc))
            break
        except ParseError as exc:
            trace.error(state.iteration, f"localization unparseable, step skipped: {exc}")
            continue
        except CaptionError as exc:
            trace.error(state.iteration, f"captioning failed, step rolled back: {exc}",
                        period=list(exc.period.as_tuple()) if exc.period else None)
            continue
        resp = attempt_answer()

    if resp is not None and resp.confidence:
        return FinalResponse(resp.answer, resp.periods, True, state.iteration, trace.events, trace.ledger, state)

    try:
        forced = _answer(state, question, video, llm, opts, force=True)
    except ParseError as exc:
        trace.error(state.iteration, f"forced answer unparseable: {exc}")
        return FinalResponse(NO_ANSWER, (), False, state.iteration, trace.events, trace.ledger, state, True)
    return FinalResponse(forced.answer, forced.periods, forced.confidence, state.iteration, trace.events,
                         trace.ledger, state, True)


# ---------------------------------------------------------------- export


def question_hash(question: str) -> str:
    return hashlib.sha256(question.encode("utf-8")).hexdigest()[:12]


def trace_document(final: FinalResponse, video_id: str, question: str) -> dict:
    return {
        "video_id": video_id,
        "question": question,
        "result": final.to_dict(),
        "ledger": final.ledger.to_dict(),
        "events": [e.to_dict() for e in final.trace],
    }


def export_trace(final: FinalResponse, video_id: str, question: str, out_dir: str | Path) -> Path:
    path = Path(out_dir) / f"{video_id}.{question_hash(question)}.trace.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(trace_document(final, video_id, question), indent=2, ensure_ascii=False) + "\n",
                    encoding="utf-8")
    return path


def planned_budget(video: VideoMeta, scope: ScopeConfig) -> dict:
    """Worst-case call counts for one question, computed without touching any backend."""
    n_coarse = len(divide(video.duration_s, scope.t_coarse_s))
    fine_per_coarse = -(-scope.t_coarse_s // scope.t_fine_s)
    uf_per_fine = -(-scope.t_fine_s // scope.t_ultrafine_s)
    per_step = 1 + max(fine_per_coarse, uf_per_fine)
    return {
        "coarse_captions": n_coarse,
        "max_iterations": scope.max_iterations,
        "max_llm_logical_calls": 2 + 2 * scope.max_iterations + 1,
        "max_caption_calls_per_question": per_step * scope.max_iterations,
    }
