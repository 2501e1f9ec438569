from __future__ import annotations

from pathlib import Path

import pytest

from vidmem import prompts
from vidmem.errors import TemplateError
from vidmem.memory import MemoryList

from conftest import GOLDEN_DURATION, GOLDEN_EXPLORED, GOLDEN_QUESTION, build_golden_cm

GOLDEN = Path(__file__).parent / "golden"


def rendered() -> dict[str, str]:
    cm = build_golden_cm()
    return {
        "init_loc.txt": prompts.render_init_localization_prompt(cm, GOLDEN_QUESTION),
        "loc_ins.txt": prompts.render_locate_and_instruct_prompt(cm, GOLDEN_QUESTION, GOLDEN_EXPLORED,
                                                                  GOLDEN_DURATION),
        "answer.txt": prompts.render_answer_prompt(cm, GOLDEN_QUESTION, GOLDEN_DURATION),
        "answer_forced.txt": prompts.render_answer_prompt(cm, GOLDEN_QUESTION, GOLDEN_DURATION, force=True),
        "relevance.txt": prompts.render_relevance_prompt(cm.entries[1].text, GOLDEN_QUESTION),
    }


@pytest.mark.parametrize("name", sorted(rendered()))
def test_golden_byte_equality(name):
    expected = (GOLDEN / name).read_bytes()
    assert rendered()[name].encode("utf-8") == expected


def test_each_sentinel_identifies_one_template():
    r = rendered()
    by_sentinel = {
        prompts.INIT_SENTINEL: {"init_loc.txt"},
        prompts.LOCATE_SENTINEL: {"loc_ins.txt"},
        prompts.ANSWER_SENTINEL: {"answer.txt", "answer_forced.txt"},
        prompts.FORCED_SENTINEL: {"answer_forced.txt"},
        prompts.RELEVANCE_SENTINEL: {"relevance.txt"},
    }
    for sentinel, names in by_sentinel.items():
        assert {n for n, text in r.items() if sentinel in text} == names


def test_forced_is_plain_answer_plus_addendum():
    r = rendered()
    assert r["answer_forced.txt"].startswith(r["answer.txt"])


def test_empty_inputs_rejected(golden_cm):
    with pytest.raises(TemplateError):
        prompts.render_answer_prompt(golden_cm, "   ", 10)
    with pytest.raises(TemplateError):
        prompts.render_init_localization_prompt(MemoryList(), "q?")


def test_render_explored():
    assert prompts.render_explored([]) == "(none)"
    assert prompts.render_explored(GOLDEN_EXPLORED) == "(200, 400) [coarse]\n(210, 220) [fine]"


def test_pure_functions(golden_cm):
    a = prompts.render_locate_and_instruct_prompt(golden_cm, GOLDEN_QUESTION, GOLDEN_EXPLORED, 450)
    b = prompts.render_locate_and_instruct_prompt(golden_cm, GOLDEN_QUESTION, GOLDEN_EXPLORED, 450)
    assert a == b


def test_repair_prompt_wraps_original():
    out = prompts.render_repair_prompt("ORIGINAL", "garbage", "no dict", prompts.ANSWER_SCHEMA)
    assert out.startswith("ORIGINAL") and prompts.REPAIR_SENTINEL in out and "garbage" in out
