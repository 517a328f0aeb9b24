"""Synthetic networked series with planted cross-node influence."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .graph import DynamicGraph, SeriesPanel
from .recurrent import ConfigError


@dataclass
class SynthConfig:
    n_nodes: int = 200
    n_steps: int = 500
    period: int = 7
    season_amp: float = 0.3  # relative to the node level
    trend: float = 0.2  # max relative level change over the whole series
    noise: float = 0.25  # relative noise scale
    gamma: float = 0.5
    edge_density: float = 1.5  # mean number of in-neighbor slots per node
    churn: float = 0.02  # per-step probability that a slot switches source
    level_low: float = 20.0
    level_high: float = 2000.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_nodes < 1 or self.n_steps < 1:
            raise ConfigError("n_nodes and n_steps must be positive")
        if self.period < 1:
            raise ConfigError("period must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        if not 0.0 <= self.churn <= 1.0:
            raise ConfigError("churn must be in [0, 1]")
        if min(self.season_amp, self.trend, self.noise, self.edge_density) < 0:
            raise ConfigError("amplitudes and density must be non-negative")
        if not 0 < self.level_low <= self.level_high:
            raise ConfigError("need 0 < level_low <= level_high")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SynthData:
    panel: SeriesPanel
    graph: DynamicGraph
    influence: np.ndarray  # (N, N): mean weight of i on j over time
    base: np.ndarray  # (N, T) series before diffusion


def base_series(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Seasonal pattern plus linear trend plus noise, all scaled by a
    log-uniform node level and clipped at zero."""
    N, T_ = cfg.n_nodes, cfg.n_steps
    level = np.exp(rng.uniform(np.log(cfg.level_low), np.log(cfg.level_high), size=N))
    t = np.arange(T_)
    phase = rng.uniform(0, 2 * np.pi, size=N)
    amp = cfg.season_amp * rng.uniform(0.5, 1.0, size=N)
    season = amp[:, None] * np.sin(2 * np.pi * t[None, :] / cfg.period + phase[:, None])
    slope = cfg.trend * rng.uniform(-1, 1, size=N)
    trend = slope[:, None] * t[None, :] / max(T_ - 1, 1)
    noise = cfg.noise * rng.standard_normal((N, T_))
    return np.maximum(level[:, None] * (1.0 + season + trend + noise), 0.0)


def dynamic_edges(cfg: SynthConfig, rng: np.random.Generator) -> DynamicGraph:
    """Each node owns a Poisson number of in-neighbor slots. At every step a
    slot keeps its source, or with probability ``churn`` moves to a source not
    used by the node at this or the previous step."""
    N, T_ = cfg.n_nodes, cfg.n_steps
    slots = rng.poisson(cfg.edge_density, size=N)
    slots = np.minimum(slots, max((N - 1) // 2, 0))
    edges = []
    for j in range(N):
        k = int(slots[j])
        if k == 0:
            continue
        pool = np.delete(np.arange(N), j)
        cur = rng.choice(pool, size=k, replace=False)
        start = np.zeros(k, np.int64)
        for t in range(1, T_):
            move = rng.random(k) < cfg.churn
            if not move.any():
                continue
            used = set(cur.tolist())
            nxt = cur.copy()
            for s in np.flatnonzero(move):
                while True:
                    c = int(pool[rng.integers(len(pool))])
                    if c not in used:
                        break
                used.add(c)
                nxt[s] = c
                edges.append((int(cur[s]), j, int(start[s]), t))
                start[s] = t
            cur = nxt
        edges.extend((int(cur[s]), j, int(start[s]), T_) for s in range(k))
    return DynamicGraph(N, T_, edges)


def diffuse(base: np.ndarray, graph: DynamicGraph, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Add ``gamma`` times the mean base value of each node's in-neighbors at
    every step. Returns the new series and the time-averaged influence matrix."""
    a = graph.adjacency().astype(np.float64)  # (N, N, T)
    deg = a.sum(axis=0)  # (N, T) in-degree
    w = a / np.maximum(deg, 1.0)[None, :, :]
    values = base + gamma * np.einsum("ijt,it->jt", w, base)
    return values, gamma * w.mean(axis=2)


def generate(cfg: SynthConfig) -> SynthData:
    rng = np.random.default_rng(cfg.seed)
    base = base_series(cfg, rng)
    graph = dynamic_edges(cfg, rng)
    values, influence = diffuse(base, graph, cfg.gamma)
    N, T_ = values.shape
    panel = SeriesPanel(
        values[:, :, None].astype(np.float32),
        np.zeros((N, T_), bool),
        [f"node{j}" for j in range(N)],
        ["synthetic"] * N,
    )
    return SynthData(panel, graph, influence, base)
