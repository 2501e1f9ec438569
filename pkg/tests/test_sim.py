from __future__ import annotations

import random

from hypothesis import given, settings, strategies as st

from vidmem import sim
from vidmem.backends import ClipRequest, FunctionTextBackend
from vidmem.memory import TimePeriod, VideoMeta
from vidmem.parsing import parse_answer

from conftest import make_scope


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(60, 20_000))
def test_generated_world_is_consistent(seed, duration):
    w = sim.generate_world(seed, duration)
    assert w.duration_s == duration and len(w.facts) == 1
    f = w.facts[0]
    assert 0 <= f.second < duration and f.answer in f.options and len(set(f.options)) == 4
    assert any(f.answer in m for e in w.overlapping(TimePeriod(f.second, f.second + 1))
               for m in e.micro.values())


def test_world_json_round_trip(tmp_path, world):
    path = world.save(tmp_path / "w.json")
    assert sim.WorldSpec.load(path) == world


def test_caption_granularity(world):
    scope = make_scope()
    f = world.facts[0]
    cap = sim.ScriptedCaptioner(world, scope)
    video = VideoMeta(world.video_id, world.duration_s)
    coarse_start = f.second - f.second % 200
    coarse = cap.caption(ClipRequest(video, TimePeriod(coarse_start, min(coarse_start + 200, world.duration_s)),
                                     scope.fps(0), "d"))
    second = cap.caption(ClipRequest(video, TimePeriod(f.second, f.second + 1), scope.fps(2), "d"))
    assert f.answer not in coarse and f.answer in second


def test_reasoner_confident_only_on_verbatim_answer():
    w = sim.generate_world(3, 2000)
    f = w.facts[0]
    r = sim.ScriptedReasoner(w)
    q = f.question + "\n" + "\n".join(f"({chr(65 + i)}) {o}" for i, o in enumerate(f.options))
    from vidmem.memory import MemoryEntry, MemoryList
    from vidmem.prompts import render_answer_prompt

    miss = MemoryList.of([MemoryEntry(TimePeriod(0, 200), 0, "people walk")])
    hit = MemoryList.of([MemoryEntry(TimePeriod(f.second, f.second + 1), 2, f"it reads {f.answer} clearly")])
    assert not parse_answer(r.complete(render_answer_prompt(miss, q, 2000))).confidence
    resp = parse_answer(r.complete(render_answer_prompt(hit, q, 2000)))
    label = chr(65 + f.options.index(f.answer))
    assert resp.confidence and resp.answer.startswith(f"({label})")
    forced = parse_answer(r.complete(render_answer_prompt(miss, q, 2000, force=True)))
    assert forced.confidence and forced.answer.startswith("(A)")


def test_faulty_backend_rate_and_determinism():
    inner = FunctionTextBackend(lambda p: '{"Confidence": False, "Answer": "No Answer", "Time Period": "No Time"}')
    a = sim.FaultyTextBackend(inner, 0.2, seed=4)
    b = sim.FaultyTextBackend(FunctionTextBackend(inner.fn), 0.2, seed=4)
    outs_a = [a.complete("p") for _ in range(500)]
    outs_b = [b.complete("p") for _ in range(500)]
    assert outs_a == outs_b
    bad = sum(o != inner.fn("p") for o in outs_a)
    assert 60 <= bad <= 140


def test_needles_have_disjoint_vocabulary():
    needles = sim.generate_needles(random.Random(0), 5)
    subjects = [n.events[0].summary.split()[1] for n in needles]
    assert len(set(subjects)) == 5
    answers = [f.answer for n in needles for f in n.facts]
    assert len(set(answers)) == 20
    assert all(n.duration_s == 10 and len(n.facts) == 4 for n in needles)
