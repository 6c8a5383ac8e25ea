"""Normalize-Aggregate-Perturb mechanism and the write-once aggregate cache."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .graph import Graph
from .rng import make_rng


@dataclass(frozen=True)
class NapConfig:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")


def row_normalize(x: np.ndarray) -> np.ndarray:
    """Scale every nonzero row to unit L2 norm; zero rows stay zero."""
    x = np.asarray(x)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe


def aggregate(graph: Graph, xn: np.ndarray) -> np.ndarray:
    """Sum of in-neighbor rows: ``out[i] = sum_{j -> i} xn[j]``."""
    xn = np.asarray(xn)
    if xn.ndim != 2 or xn.shape[0] != graph.num_nodes:
        raise ValueError(f"expected {graph.num_nodes} rows, got shape {xn.shape}")
    out = graph.adjacency_t() @ xn
    return np.asarray(out, dtype=xn.dtype)


def nap(graph: Graph, x: np.ndarray, config: NapConfig, stage: int = 0) -> np.ndarray:
    """Normalize, aggregate, then add i.i.d. N(0, sigma^2) noise per entry.

    The noise stream is keyed by ``(config.seed, stage)``.
    """
    out = aggregate(graph, row_normalize(x))
    if config.sigma > 0:
        rng = make_rng(config.seed, "nap", stage)
        out = out + (config.sigma * rng.standard_normal(out.shape)).astype(out.dtype)
    return out


class AggregateCache:
    """Write-once store of noisy aggregates, one matrix per stage ``k >= 1``."""

    def __init__(self):
        self._store: dict[int, np.ndarray] = {}
        self.nap_calls = 0

    def __contains__(self, stage: int) -> bool:
        return stage in self._store

    def __len__(self) -> int:
        return len(self._store)

    def __getitem__(self, stage: int) -> np.ndarray:
        return self._store[stage]

    def stages(self) -> list[int]:
        return sorted(self._store)

    def put(self, stage: int, value: np.ndarray) -> None:
        if stage < 1:
            raise ValueError("cache keys are stages k >= 1")
        if stage in self._store:
            raise KeyError(f"aggregate for stage {stage} is already cached")
        value = np.array(value)
        value.setflags(write=False)
        self._store[stage] = value

    def save(self, path) -> None:
        save_tensors(path, {f"stage{k}": v for k, v in sorted(self._store.items())})

    @classmethod
    def load(cls, path, dtype=np.float32) -> AggregateCache:
        cache = cls()
        for name, value in load_tensors(path).items():
            cache.put(int(name.removeprefix("stage")), value.astype(dtype))
        cache.nap_calls = len(cache)
        return cache


def cached_nap(cache: AggregateCache, stage: int, graph: Graph | None, x, config: NapConfig):
    """Return the stage's aggregate, computing it with :func:`nap` only once.

    On a cache hit neither ``graph`` nor ``x`` is read.
    """
    if stage < 1:
        raise ValueError("NAP is applied from stage 1 onward")
    if stage not in cache:
        if graph is None:
            raise ValueError(f"stage {stage} is not cached and no graph was given")
        cache.put(stage, nap(graph, x, config, stage=stage))
        cache.nap_calls += 1
    return cache[stage]
