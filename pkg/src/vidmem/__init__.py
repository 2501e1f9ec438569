"""Hierarchical temporal memory and iterative backtracking for long-video question answering."""

from __future__ import annotations

from .engine import EngineOptions, FinalResponse, run
from .memory import MemoryLevel, MemoryList, ScopeConfig, TimePeriod, VideoMeta, divide

__all__ = ["EngineOptions", "FinalResponse", "MemoryLevel", "MemoryList", "ScopeConfig", "TimePeriod",
           "VideoMeta", "divide", "run"]
__version__ = "0.1.0"
