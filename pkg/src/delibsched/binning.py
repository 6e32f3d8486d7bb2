"""Quantile bin edges and pooled cell statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def quantile_edges(values, bins: int) -> np.ndarray:
    """Distinct quantile cut points; ``len(edges) - 1`` bins, at least one."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("no values to bin")
    edges = np.unique(np.quantile(values, np.linspace(0.0, 1.0, bins + 1)))
    if len(edges) == 1:
        edges = np.array([edges[0], edges[0]])
    return edges


def bin_index(edges: np.ndarray, x: float) -> int:
    """Bin ``[e_i, e_{i+1})`` holding ``x``; the last bin is closed and outliers clamp."""
    nb = len(edges) - 1
    return int(min(max(np.searchsorted(edges, x, side="right") - 1, 0), nb - 1))


def bin_indices(edges: np.ndarray, xs) -> np.ndarray:
    nb = len(edges) - 1
    return np.clip(np.searchsorted(edges, np.asarray(xs, dtype=float), side="right") - 1, 0, nb - 1)


@dataclass(frozen=True)
class Moments:
    mean: float
    variance: float
    count: int

    @classmethod
    def of(cls, xs) -> "Moments":
        xs = np.asarray(xs, dtype=float)
        return cls(float(xs.mean()), float(xs.var()), int(xs.size))

    @staticmethod
    def pool(parts) -> "Moments":
        parts = [p for p in parts if p.count > 0]
        total = sum(p.count for p in parts)
        if total == 0:
            return Moments(0.0, 0.0, 0)
        mean = sum(p.count * p.mean for p in parts) / total
        second = sum(p.count * (p.variance + p.mean ** 2) for p in parts) / total
        return Moments(mean, max(second - mean ** 2, 0.0), total)


def format_edges(edges) -> str:
    return " ".join(repr(float(e)) for e in edges)


def parse_edges(text: str) -> np.ndarray:
    edges = np.array([float(t) for t in text.split()])
    if len(edges) < 2 or np.any(np.diff(edges) < 0):
        raise ValueError(f"bad bin edges {text!r}")
    return edges
