from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from vidmem.backends import FunctionTextBackend
from vidmem.errors import OutOfRangeError, ParseError
from vidmem.memory import TimePeriod, divide
from vidmem.parsing import (
    NO_ANSWER,
    AnswerResponse,
    InitLocalizationResponse,
    LocateAndInstructResponse,
    coerce_period,
    extract_dict_literal,
    format_answer,
    format_init_localization,
    format_locate_and_instruct,
    parse_answer,
    parse_init_localization,
    parse_locate_and_instruct,
    parse_relevance,
    retry_parse,
    snap_period,
)

DIV = list(divide(3600, 200))


def test_init_localization_examples():
    raw = 'Sure! {"Flag": True, "Time Period": [(0, 200), (1400, 1600), (3400, 3600)], "Reason": "x"}'
    r = parse_init_localization(raw, DIV)
    assert r.flag and r.periods == (TimePeriod(0, 200), TimePeriod(1400, 1600), TimePeriod(3400, 3600))
    r = parse_init_localization('{"Flag": False, "Time Period": "No Time Periods.", "Reason": "global"}', DIV)
    assert not r.flag and r.periods == ()
    with pytest.raises(ParseError):
        parse_init_localization('{"Flag": True, "Time Period": [(0,200),(200,400),(400,600),(600,800)]}', DIV)
    with pytest.raises(ParseError):
        parse_init_localization("I think the answer is around minute three.", DIV)


def test_init_snaps_to_division():
    r = parse_init_localization('{"Flag": true, "Time Period": [[190, 390]], "Reason": ""}', DIV)
    assert r.periods == (TimePeriod(200, 400),)
    with pytest.raises(OutOfRangeError):
        parse_init_localization('{"Flag": True, "Time Period": [(4000, 4100)]}', DIV)


def test_locate_examples():
    r = parse_locate_and_instruct('{"Time Period": [(200, 400)], "Instruction": "Describe the cook.", '
                                  '"Reason": "r"}', DIV)
    assert r.period == TimePeriod(200, 400) and r.instruction == "Describe the cook."
    with pytest.raises(ParseError, match="expected single period"):
        parse_locate_and_instruct('{"Time Period": [(0, 200), (200, 400)], "Instruction": "x"}', DIV)
    with pytest.raises(ParseError):
        parse_locate_and_instruct('{"Time Period": [(0, 200)], "Instruction": ""}', DIV)
    # a bare pair is read as one period; "mm:ss" strings are accepted
    assert parse_locate_and_instruct('{"Time Period": (0, 200), "Instruction": "x"}', DIV).period == DIV[0]
    assert parse_locate_and_instruct('{"Time Period": ["03:20-06:40"], "Instruction": "x"}', DIV).period == DIV[1]


def test_answer_examples():
    r = parse_answer('{"Confidence": True, "Answer": "(B) 08:00", "Time Period": [(214, 215)], "Reason": "r"}')
    assert r.confidence and r.answer == "(B) 08:00" and r.periods == (TimePeriod(214, 215),)
    r = parse_answer('{"Confidence": False, "Answer": "No Answer", "Time Period": "No Time", "Reason": "r"}')
    assert not r.confidence and r.answer == NO_ANSWER and r.periods == ()
    r = parse_answer('{"Confidence": False, "Answer": "maybe B", "Time Period": "No Time", "Reason": "r"}')
    assert r.answer == NO_ANSWER and "maybe B" in r.reason
    with pytest.raises(ParseError):
        parse_answer('{"Confidence": True, "Answer": "No Answer", "Time Period": [(1, 2)]}')
    with pytest.raises(ParseError):
        parse_answer('{"Confidence": True, "Answer": "B", "Time Period": "No Time"}')
    # fractional seconds widen to whole seconds
    assert parse_answer('{"Confidence": True, "Answer": "B", "Time Period": [(3.5, 4.2)]}').periods == (
        TimePeriod(3, 5),)


def test_extract_skips_braces_in_strings():
    raw = 'note {"Reason": "a } brace", "x": 1} trailing'
    assert extract_dict_literal(raw) == '{"Reason": "a } brace", "x": 1}'


def test_coerce_period_forms():
    assert coerce_period("(10, 20)") == (10, 20)
    assert coerce_period("1:00:00 - 1:00:10") == (3600, 3610)
    with pytest.raises(ParseError):
        coerce_period((20, 10))


def test_snap_rules():
    cands = [TimePeriod(0, 10), TimePeriod(10, 20), TimePeriod(0, 20)]
    assert snap_period(0, 20, cands) == TimePeriod(0, 20)  # exact beats overlap
    assert snap_period(5, 15, cands[:2]) == TimePeriod(0, 10)  # tie goes earlier
    assert snap_period(-5, 3, cands[:2]) == TimePeriod(0, 10)  # clamped


def test_relevance_examples():
    assert parse_relevance("Analysis...\nScoring result: 4 points") == 4
    assert parse_relevance("Scoring result: **1** point") == 1
    with pytest.raises(ParseError):
        parse_relevance("Scoring result: 7 points")
    with pytest.raises(ParseError):
        parse_relevance("I would rate it highly.")


def test_retry_parse_repairs_then_succeeds():
    replies = iter(["not a dict", '{"Confidence": False, "Answer": "No Answer", "Time Period": "No Time"}'])
    seen = []
    llm = FunctionTextBackend(lambda p: (seen.append(p), next(replies))[1])
    r = retry_parse("PROMPT", parse_answer, llm, max_repairs=2)
    assert not r.confidence and llm.calls == 2
    assert seen[0] == "PROMPT" and seen[1].startswith("PROMPT") and "not a dict" in seen[1]


def test_retry_parse_budget_exhausted():
    llm = FunctionTextBackend(lambda p: "nope")
    with pytest.raises(ParseError):
        retry_parse("P", parse_answer, llm, max_repairs=2)
    assert llm.calls == 3


# ---------------------------------------------------------------- round trip

safe_text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=40)
div_periods = st.sampled_from(DIV)


@st.composite
def init_responses(draw):
    if draw(st.booleans()):
        periods = draw(st.lists(div_periods, min_size=1, max_size=3, unique=True))
        return InitLocalizationResponse(True, tuple(periods), draw(safe_text))
    return InitLocalizationResponse(False, (), draw(safe_text))


@st.composite
def locate_responses(draw):
    instr = draw(safe_text.filter(lambda s: s.strip() == s and s))
    return LocateAndInstructResponse(draw(div_periods), instr, draw(safe_text))


@st.composite
def answer_responses(draw):
    if draw(st.booleans()):
        ans = draw(safe_text.filter(lambda s: s.strip() == s and s and s != NO_ANSWER))
        periods = draw(st.lists(st.builds(lambda a, n: TimePeriod(a, a + n), st.integers(0, 5000),
                                          st.integers(1, 300)), min_size=1, max_size=4, unique=True))
        return AnswerResponse(True, ans, tuple(periods), draw(safe_text))
    return AnswerResponse(False, NO_ANSWER, (), draw(safe_text))


@settings(max_examples=300)
@given(init_responses())
def test_round_trip_init(r):
    assert parse_init_localization(format_init_localization(r), DIV) == r


@settings(max_examples=300)
@given(locate_responses())
def test_round_trip_locate(r):
    assert parse_locate_and_instruct(format_locate_and_instruct(r), DIV) == r


@settings(max_examples=300)
@given(answer_responses())
def test_round_trip_answer(r):
    assert parse_answer(format_answer(r)) == r
