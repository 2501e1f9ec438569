from __future__ import annotations

import math

import pytest
from hypothesis import given, strategies as st

from vidmem.errors import MembershipError
from vidmem.memory import (
    MemoryEntry,
    MemoryLevel,
    MemoryList,
    ScopeConfig,
    TimePeriod,
    divide,
    entry_from_record,
    entry_to_record,
    filter_by_periods,
    neighborhood_expand,
    render_entry,
    render_for_prompt,
    subdivide,
    upsert,
)

from conftest import C, F, U, make_scope


def test_time_period_rejects_empty_and_negative():
    with pytest.raises(ValueError):
        TimePeriod(5, 5)
    with pytest.raises(ValueError):
        TimePeriod(-1, 3)
    p = TimePeriod(10, 20)
    assert p.duration == 10 and p.contains_second(10) and not p.contains_second(20)
    assert TimePeriod(0, 30).contains(p) and p.overlap(TimePeriod(15, 40)) == 5


def test_scope_config_validation():
    with pytest.raises(ValueError):
        make_scope(t_coarse_s=10, t_fine_s=10)
    with pytest.raises(ValueError):
        make_scope(fps_per_level={C: 1, F: 2})
    with pytest.raises(ValueError):
        make_scope(fps_per_level={C: 0, F: 2, U: 2})
    s = make_scope(t_coarse_s=5, t_fine_s=1, t_ultrafine_s=1)
    assert s.scope_for(F) == s.scope_for(U) == 1
    assert make_scope(fps_per_level={"coarse": 0.25, "fine": 0.5, "ultrafine": 1}).fps(C) == 0.25


def test_divide_examples():
    d = divide(3600, 200)
    assert len(d) == 18 and d[0] == TimePeriod(0, 200) and d[-1] == TimePeriod(3400, 3600)
    d = divide(450, 200)
    assert [p.as_tuple() for p in d] == [(0, 200), (200, 400), (400, 450)]
    assert [p.as_tuple() for p in divide(5, 10)] == [(0, 5)]
    with pytest.raises(ValueError):
        divide(0, 10)
    assert [p.as_tuple() for p in subdivide(TimePeriod(200, 400), 10)][:2] == [(200, 210), (210, 220)]
    assert len(subdivide(TimePeriod(200, 400), 10)) == 20


@given(st.integers(1, 100_000), st.integers(1, 5_000), st.integers(0, 10_000))
def test_divide_partitions(duration, scope, start):
    d = divide(duration, scope, start)
    assert len(d) == math.ceil(duration / scope)
    assert d[0].start_s == start and d[-1].end_s == start + duration
    for a, b in zip(d, list(d)[1:]):
        assert a.end_s == b.start_s and a.duration == scope
    assert 1 <= d[-1].duration <= scope


def test_division_index_and_membership():
    d = divide(600, 200)
    assert d.index(TimePeriod(200, 400)) == 1
    with pytest.raises(MembershipError):
        d.index(TimePeriod(0, 100))


def test_upsert_replaces_and_bumps_revision():
    cm = MemoryList()
    cm = upsert(cm, MemoryEntry(TimePeriod(0, 200), C, "first"))
    cm2 = upsert(cm, MemoryEntry(TimePeriod(0, 200), C, "second", "look closer"))
    assert len(cm) == len(cm2) == 1
    e = cm2.get(TimePeriod(0, 200), C)
    assert e.text == "second" and e.revision == 1 and e.instruction == "look closer"
    assert cm.get(TimePeriod(0, 200), C).text == "first"  # value semantics
    cm3 = upsert(cm2, MemoryEntry(TimePeriod(0, 200), F, "same period, other level"))
    assert len(cm3) == 2


entries_st = st.lists(
    st.builds(
        MemoryEntry,
        st.builds(lambda a, n: TimePeriod(a, a + n), st.integers(0, 500), st.integers(1, 50)),
        st.sampled_from(list(MemoryLevel)),
        st.text(min_size=1, max_size=20),
    ),
    max_size=30,
)


@given(entries_st)
def test_upsert_keys_unique_and_sorted(entries):
    cm = MemoryList.of(entries)
    assert len(cm) == len({e.key for e in entries})
    keys = [e.sort_key() for e in cm]
    assert keys == sorted(keys)
    for e in entries:
        assert e.key in cm


@given(entries_st)
def test_render_is_injective_on_keys(entries):
    cm = MemoryList.of(entries)
    lines = render_for_prompt(cm).split("\n") if len(cm) else []
    assert len(lines) == len(cm)
    prefixes = [line.split(":", 1)[0] for line in lines]
    assert len(set(prefixes)) == len(prefixes)


def test_render_entry_format():
    e = MemoryEntry(TimePeriod(0, 200), C, "a dog")
    assert render_entry(e) == "[0 s – 200 s] (coarse): a dog"


def test_neighborhood_expand_examples():
    d = divide(3600, 200)
    picked = {d[0], d[5], d[17]}
    got = neighborhood_expand(picked, d)
    assert got == {d[0], d[1], d[4], d[5], d[6], d[16], d[17]}
    assert neighborhood_expand({d[3], d[4]}, d) == {d[2], d[3], d[4], d[5]}
    with pytest.raises(MembershipError):
        neighborhood_expand({TimePeriod(1, 2)}, d)


@given(st.integers(1, 60), st.data())
def test_neighborhood_expand_monotone_and_bounded(n, data):
    d = divide(n * 10, 10)
    small = data.draw(st.sets(st.sampled_from(list(d)), max_size=5))
    extra = data.draw(st.sets(st.sampled_from(list(d)), max_size=5))
    a, b = neighborhood_expand(small, d), neighborhood_expand(small | extra, d)
    assert small <= a <= b
    assert len(a) <= 3 * len(small)


def test_filter_by_periods_keeps_all_levels():
    cm = MemoryList.of([
        MemoryEntry(TimePeriod(0, 10), C, "x"),
        MemoryEntry(TimePeriod(0, 10), F, "y"),
        MemoryEntry(TimePeriod(10, 20), C, "z"),
    ])
    assert len(filter_by_periods(cm, {TimePeriod(0, 10)})) == 2


def test_record_round_trip_and_validation():
    e = MemoryEntry(TimePeriod(3, 9), U, "text ünïcode", "instr", 2)
    rec = entry_to_record("v1", e)
    assert set(rec) == {"video_id", "start_s", "end_s", "level", "text", "instruction", "revision"}
    assert entry_from_record(rec) == e
    with pytest.raises(ValueError):
        entry_from_record({**rec, "revision": -1})
    with pytest.raises(ValueError):
        entry_from_record({**rec, "level": "medium"})


def test_scope_overrides():
    s = make_scope()
    assert s.with_overrides(max_iterations=2).max_iterations == 2
    assert isinstance(s, ScopeConfig) and s.max_iterations == 5 and s.init_relevant_count == 3
