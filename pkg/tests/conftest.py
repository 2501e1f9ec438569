from __future__ import annotations

import pytest

from vidmem.memory import MemoryEntry, MemoryLevel, MemoryList, ScopeConfig, TimePeriod
from vidmem import sim

C, F, U = MemoryLevel.COARSE, MemoryLevel.FINE, MemoryLevel.ULTRAFINE


def make_scope(**kw) -> ScopeConfig:
    base = dict(t_coarse_s=200, t_fine_s=10, t_ultrafine_s=1, fps_per_level={C: 1, F: 2, U: 2})
    base.update(kw)
    return ScopeConfig(**base)


@pytest.fixture
def scope() -> ScopeConfig:
    return make_scope()


def build_golden_cm() -> MemoryList:
    """Small mixed-level memory used by the frozen prompt files."""
    return MemoryList.of([
        MemoryEntry(TimePeriod(0, 200), C, "A man walks a dog along a beach at sunrise."),
        MemoryEntry(TimePeriod(200, 400), C, "Two people cook pasta in a small kitchen."),
        MemoryEntry(TimePeriod(400, 450), C, "A cyclist rides through heavy rain."),
        MemoryEntry(TimePeriod(210, 220), F, "The woman pours salt into boiling water; a red timer reads 8 minutes."),
        MemoryEntry(TimePeriod(214, 215), U, "Close view of the timer: the digits read 08:00 in red."),
    ])


@pytest.fixture
def golden_cm() -> MemoryList:
    return build_golden_cm()


GOLDEN_QUESTION = "What does the kitchen timer read?\n(A) 05:00\n(B) 08:00\n(C) 10:00\n(D) 12:00"
GOLDEN_EXPLORED = [(TimePeriod(200, 400), C), (TimePeriod(210, 220), F)]
GOLDEN_DURATION = 450


@pytest.fixture
def world() -> sim.WorldSpec:
    return sim.generate_world(7, 3000)
