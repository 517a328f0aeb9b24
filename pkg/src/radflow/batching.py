"""Assembling model inputs from a panel and its graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import EVAL_NEIGHBORS, TRAIN_NEIGHBORS, DynamicGraph, NeighborSelector, SeriesPanel
from .model import WindowBatch
from .recurrent import ConfigError, ModelConfig, to_log


@dataclass
class Split:
    """Time boundaries. Training windows end at or before ``train_end``;
    validation forecasts start at ``val_origin`` and test forecasts at
    ``test_origin``."""

    train_end: int
    val_origin: int
    test_origin: int

    def check(self, T_: int, backcast: int, horizon: int) -> None:
        if self.train_end < backcast + horizon:
            raise ConfigError(f"training range of {self.train_end} steps is shorter than B+F={backcast + horizon}")
        for name in ("val_origin", "test_origin"):
            o = getattr(self, name)
            if o < backcast or o + horizon > T_:
                raise ConfigError(f"{name}={o} leaves no room for B={backcast} and F={horizon} in T={T_}")

    @classmethod
    def last(cls, T_: int, horizon: int) -> "Split":
        """Test on the final F steps, validate on the F steps before them."""
        test = T_ - horizon
        val = test - horizon
        return cls(train_end=val, val_origin=val, test_origin=test)


def _drop_self_loops(graph: DynamicGraph) -> DynamicGraph:
    """A node is never its own neighbor."""
    loops = graph.edges[:, 0] == graph.edges[:, 1]
    return graph.without_edges(~loops) if loops.any() else graph


class NetworkData:
    """A forward-filled panel in log space plus neighbor selection."""

    def __init__(self, panel: SeriesPanel, graph: DynamicGraph, prune: bool = True):
        if graph.N != panel.N or graph.T != panel.T:
            raise ValueError(f"graph is {graph.N}x{graph.T}, panel is {panel.N}x{panel.T}")
        self.panel = panel
        self.graph = _drop_self_loops(graph)
        self.raw = panel.filled().astype(np.float64)
        self.log = to_log(self.raw)
        self.selector = NeighborSelector(self.graph, self.raw, prune)

    @property
    def N(self) -> int:
        return self.panel.N

    @property
    def T(self) -> int:
        return self.panel.T

    def with_graph(self, graph: DynamicGraph) -> "NetworkData":
        out = object.__new__(NetworkData)
        out.panel, out.graph, out.raw, out.log = self.panel, _drop_self_loops(graph), self.raw, self.log
        out.selector = NeighborSelector(out.graph, self.raw, self.selector.prune)
        return out

    def with_values(self, panel: SeriesPanel) -> "NetworkData":
        return NetworkData(panel, self.graph, self.selector.prune)

    def _pick(self, ego, origin, B, k, rng):
        start = origin - B
        if rng is not None:
            ids = self.selector.sample(ego, start, origin, k, rng).ids
        else:
            ids, counts = self.selector.candidates(ego, start, origin)
            order = np.lexsort((ids, -counts))
            ids = ids[order[:k]]
        return ids

    def batch(
        self,
        egos,
        origins,
        config: ModelConfig,
        hops: int,
        rng: np.random.Generator | None = None,
        horizon_log: np.ndarray | None = None,
    ) -> WindowBatch:
        """Windows ``[origin - B, origin + F)`` for each ego.

        With ``rng`` neighbors are sampled for training (4 per hop); without it
        the most present neighbors are taken (16 for one hop, 8 per hop for
        two). ``horizon_log`` (N, F, D) replaces neighbors' horizon values,
        which is how the forecast setting is run; all origins must then agree.
        """
        B, F = config.backcast, config.horizon
        egos = np.asarray(egos, dtype=np.int64)
        origins = np.broadcast_to(np.asarray(origins, dtype=np.int64), egos.shape)
        if ((origins < B) | (origins + F > self.T)).any():
            raise ValueError("window outside the series")
        if horizon_log is not None and len(np.unique(origins)) > 1:
            raise ValueError("horizon override needs a single origin")
        n, D = len(egos), self.panel.D
        idx = origins[:, None] + np.arange(-B, F)[None, :]
        ego = self.log[egos[:, None], idx]
        target = self.raw[egos[:, None], idx[:, B:]]
        out = WindowBatch(ego=ego, target=target, ego_ids=egos, origin=origins)
        if hops == 0 or config.hops == 0:
            return out

        k1 = TRAIN_NEIGHBORS if rng is not None else EVAL_NEIGHBORS[hops]
        k2 = k1 if hops == 2 else 0
        series_log = self.log
        if horizon_log is not None:
            o = int(origins[0])
            series_log = self.log.copy()
            series_log[:, o : o + F] = horizon_log

        hop1 = np.zeros((n, k1, B + F, D))
        mask1 = np.zeros((n, F, k1), bool)
        ids1 = np.full((n, k1), -1, np.int64)
        hop2 = np.zeros((n, k1, k2, B + F, D))
        mask2 = np.zeros((n, F, k1, k2), bool)
        for i, (e, o) in enumerate(zip(egos.tolist(), origins.tolist())):
            steps = np.arange(o, o + F)
            ids = self._pick(e, o, B, k1, rng)
            m = len(ids)
            ids1[i, :m] = ids
            hop1[i, :m] = series_log[ids[:, None], idx[i][None, :]]
            mask1[i, :, :m] = self.graph.presence_mask(e, ids, steps)
            if k2:
                for j, nb in enumerate(ids.tolist()):
                    ids2 = self._pick(nb, o, B, k2, rng)
                    hop2[i, j, : len(ids2)] = series_log[ids2[:, None], idx[i][None, :]]
                    mask2[i, :, j, : len(ids2)] = self.graph.presence_mask(nb, ids2, steps)
        out.hop1, out.mask1, out.hop1_ids = hop1, mask1, ids1
        if k2:
            out.hop2, out.mask2 = hop2, mask2
        return out
