"""Deterministic deliberation cost model, in ticks."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CostModel:
    c_pg: int = 1
    c_fp: int = 1
    c_alt: int = 10
    c_add: int = 1

    def __post_init__(self):
        for name in ("c_pg", "c_fp", "c_alt", "c_add"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def pg_round(self, size: int) -> int:
        """One policy-iteration round over ``size`` states."""
        return max(1, int(self.c_pg * size ** 3))

    def findpath(self, expanded: int) -> int:
        return max(1, int(self.c_fp * expanded))

    def alteration(self, size: int, changed: int) -> int:
        """One fall-out or occupancy analysis on ``size`` states plus per-state edits."""
        return max(1, int(self.c_alt * size + self.c_add * changed))
