"""Series panel and dynamic graph storage, file formats and neighbor selection.

Edges carry half-open presence intervals ``[start, end)`` in time steps. A
directed edge ``src -> dst`` makes ``src`` a neighbor of ``dst`` at every step
its interval covers.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PANEL_MAGIC = b"RADFLOWPANEL"
PANEL_VERSION = 1
_HEADER = struct.Struct("<12sI")
_DESCRIPTOR = struct.Struct("<QQQ")
_LENGTH = struct.Struct("<Q")

TRAIN_NEIGHBORS = 4
EVAL_NEIGHBORS = {1: 16, 2: 8}


class DataFormatError(ValueError):
    """Malformed or truncated panel/edge data."""


def forward_fill(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace missing entries (mask True) along axis 1 by the last valid value.

    ``values`` is (N, T, ...) and ``mask`` (N, T). Leading missing values
    become 0.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    N, T = mask.shape
    idx = np.where(~mask, np.arange(T)[None, :], -1)
    np.maximum.accumulate(idx, axis=1, out=idx)
    rows = np.arange(N)[:, None]
    out = values[rows, np.maximum(idx, 0)]
    out[idx < 0] = 0.0
    return out


@dataclass
class SeriesPanel:
    """Raw-scale observations ``values`` (N, T, D) stored as float32 and a
    missing-value ``mask`` (N, T), True where the observation is missing."""

    values: np.ndarray
    mask: np.ndarray
    names: list[str] = field(default_factory=list)
    categories: list[str | None] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)
        if self.values.ndim != 3 or self.mask.shape != self.values.shape[:2]:
            raise DataFormatError("values must be (N, T, D) and mask (N, T)")
        if not self.names:
            self.names = [str(i) for i in range(self.N)]
        if not self.categories:
            self.categories = [None] * self.N
        if len(self.names) != self.N or len(self.categories) != self.N:
            raise DataFormatError("metadata length does not match N")

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def D(self) -> int:
        return self.values.shape[2]

    def filled(self) -> np.ndarray:
        """Forward-filled raw values as float64 (N, T, D)."""
        return forward_fill(self.values, self.mask)

    def missing_rate(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


# --------------------------------------------------------------------------
# graph


def merge_intervals(edges: np.ndarray) -> np.ndarray:
    """Union overlapping or touching intervals of the same (src, dst) pair.

    Returns rows (src, dst, start, end) sorted by (dst, src, start).
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 4)
    if len(edges) == 0:
        return edges
    order = np.lexsort((edges[:, 2], edges[:, 0], edges[:, 1]))
    e = edges[order]
    out = []
    cur = e[0].copy()
    for row in e[1:]:
        if row[0] == cur[0] and row[1] == cur[1] and row[2] <= cur[3]:
            cur[3] = max(cur[3], row[3])
        else:
            out.append(cur)
            cur = row.copy()
    out.append(cur)
    return np.array(out, dtype=np.int64)


class DynamicGraph:
    """Directed edges with presence intervals over ``T`` steps."""

    def __init__(self, n_nodes: int, n_steps: int, edges=()):
        self.N = int(n_nodes)
        self.T = int(n_steps)
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 4)
        if len(e):
            bad = (
                (e[:, 2] < 0) | (e[:, 2] >= e[:, 3]) | (e[:, 3] > self.T)
                | (e[:, 0] < 0) | (e[:, 0] >= self.N) | (e[:, 1] < 0) | (e[:, 1] >= self.N)
            )
            if bad.any():
                raise DataFormatError(f"edge out of range: {e[np.argmax(bad)].tolist()}")
        self.edges = merge_intervals(e)
        counts = np.bincount(self.edges[:, 1], minlength=self.N) if len(self.edges) else np.zeros(self.N, int)
        self._ptr = np.concatenate([[0], np.cumsum(counts)])
        self._outdeg = None

    @classmethod
    def static(cls, n_nodes: int, n_steps: int, pairs) -> "DynamicGraph":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        e = np.column_stack([pairs, np.zeros(len(pairs), np.int64), np.full(len(pairs), n_steps)])
        return cls(n_nodes, n_steps, e)

    def __len__(self) -> int:
        return len(self.edges)

    def in_edges(self, node: int) -> np.ndarray:
        return self.edges[self._ptr[node] : self._ptr[node + 1]]

    def neighbors_at(self, node: int, t: int) -> np.ndarray:
        if not 0 <= t < self.T:
            raise IndexError(f"time step {t} outside [0, {self.T})")
        e = self.in_edges(node)
        return np.unique(e[(e[:, 2] <= t) & (t < e[:, 3]), 0])

    def adjacency(self) -> np.ndarray:
        """Dense (N, N, T) presence array; ``a[i, j, t]`` is 1 for an edge i -> j at t."""
        a = np.zeros((self.N, self.N, self.T), dtype=np.int8)
        for s, d, t0, t1 in self.edges:
            a[s, d, t0:t1] = 1
        return a

    def out_degree(self) -> np.ndarray:
        """Per-step out-degree table (N, T)."""
        if self._outdeg is None:
            diff = np.zeros((self.N, self.T + 1), dtype=np.int64)
            if len(self.edges):
                np.add.at(diff, (self.edges[:, 0], self.edges[:, 2]), 1)
                np.add.at(diff, (self.edges[:, 0], self.edges[:, 3]), -1)
            self._outdeg = np.cumsum(diff[:, :-1], axis=1)
        return self._outdeg

    def presence_counts(self, node: int, start: int, end: int) -> tuple[np.ndarray, np.ndarray]:
        """In-neighbors of ``node`` present somewhere in ``[start, end)`` and the
        number of steps each is present there. Ids ascending."""
        e = self.in_edges(node)
        overlap = np.minimum(e[:, 3], end) - np.maximum(e[:, 2], start)
        keep = overlap > 0
        if not keep.any():
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        ids, inv = np.unique(e[keep, 0], return_inverse=True)
        counts = np.bincount(inv, weights=overlap[keep]).astype(np.int64)
        return ids, counts

    def presence_mask(self, node: int, sources: np.ndarray, steps: np.ndarray) -> np.ndarray:
        """Boolean (len(steps), len(sources)): source present as in-neighbor at step."""
        e = self.in_edges(node)
        sources = np.asarray(sources)
        steps = np.asarray(steps)
        if len(e) == 0 or len(sources) == 0:
            return np.zeros((len(steps), len(sources)), dtype=bool)
        match = (e[:, 0][:, None] == sources[None, :]).astype(np.int64)
        active = ((e[:, 2][:, None] <= steps[None, :]) & (steps[None, :] < e[:, 3][:, None])).astype(np.int64)
        return (active.T @ match) > 0

    def without_edges(self, keep: np.ndarray) -> "DynamicGraph":
        return DynamicGraph(self.N, self.T, self.edges[np.asarray(keep, bool)])


# --------------------------------------------------------------------------
# neighbor selection


def importance_scores(values_filled: np.ndarray, graph: DynamicGraph, nodes, t: int) -> np.ndarray:
    """Total raw value at ``t`` divided by (out-degree at ``t`` + 1)."""
    nodes = np.asarray(nodes, dtype=np.int64)
    total = values_filled[nodes, t].sum(axis=-1)
    return total / (graph.out_degree()[nodes, t] + 1.0)


def bottom_decile_threshold(scores: np.ndarray) -> float:
    """Nearest-rank 10th percentile: the value at 1-based rank floor(0.1 n) + 1."""
    s = np.sort(np.asarray(scores))
    return float(s[int(math.floor(0.1 * len(s)))])


def prune_bottom_decile(ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Drop neighbors scoring strictly below the 10th percentile; ties kept."""
    ids = np.asarray(ids)
    if len(ids) <= 1:
        return ids
    return ids[np.asarray(scores) >= bottom_decile_threshold(scores)]


@dataclass
class NeighborSample:
    ego: int
    window: tuple[int, int]
    ids: np.ndarray
    counts: np.ndarray


class NeighborSelector:
    """Candidate pruning, training-time sampling and evaluation-time top-k."""

    def __init__(self, graph: DynamicGraph, values_filled: np.ndarray, prune: bool = True):
        self.graph = graph
        self.values = values_filled
        self.prune = prune

    def candidates(self, ego: int, start: int, end: int) -> tuple[np.ndarray, np.ndarray]:
        """Neighbors present in ``[start, end)`` after importance pruning at ``end - 1``."""
        ids, counts = self.graph.presence_counts(ego, start, end)
        if self.prune and len(ids) > 1:
            scores = importance_scores(self.values, self.graph, ids, end - 1)
            keep = scores >= bottom_decile_threshold(scores)
            ids, counts = ids[keep], counts[keep]
        return ids, counts

    def sample(self, ego: int, start: int, end: int, k: int, rng: np.random.Generator) -> NeighborSample:
        """Up to ``k`` distinct neighbors, drawn without replacement with
        probability proportional to presence counts in the window."""
        ids, counts = self.candidates(ego, start, end)
        if len(ids) > k:
            pick = rng.choice(len(ids), size=k, replace=False, p=counts / counts.sum())
            pick.sort()
            ids, counts = ids[pick], counts[pick]
        return NeighborSample(ego, (start, end), ids, counts)

    def top(self, ego: int, start: int, end: int, hops: int) -> np.ndarray:
        """The most frequently present neighbors (16 for one hop, 8 for two);
        ties broken by ascending id."""
        ids, counts = self.candidates(ego, start, end)
        order = np.lexsort((ids, -counts))
        return ids[order[: EVAL_NEIGHBORS[hops]]]


# --------------------------------------------------------------------------
# files


def save_panel(panel: SeriesPanel, path) -> None:
    meta = json.dumps({"names": panel.names, "categories": panel.categories}).encode("utf-8")
    packed = np.packbits(panel.mask, axis=1, bitorder="little")
    _atomic_write(
        path,
        b"".join(
            [
                _HEADER.pack(PANEL_MAGIC, PANEL_VERSION),
                _DESCRIPTOR.pack(panel.N, panel.T, panel.D),
                panel.values.astype("<f4").tobytes(),
                packed.tobytes(),
                _LENGTH.pack(len(meta)),
                meta,
            ]
        ),
    )


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


class PanelFile:
    """Random-access reader over a panel file; only requested windows are read."""

    def __init__(self, path):
        self.path = Path(path)
        size = self.path.stat().st_size
        with open(self.path, "rb") as fh:
            head = fh.read(_HEADER.size + _DESCRIPTOR.size)
        if len(head) < _HEADER.size + _DESCRIPTOR.size:
            raise DataFormatError("truncated panel header")
        magic, version = _HEADER.unpack_from(head)
        if magic != PANEL_MAGIC:
            raise DataFormatError("not a panel file (bad magic)")
        if version != PANEL_VERSION:
            raise DataFormatError(f"unsupported panel version {version}")
        self.N, self.T, self.D = _DESCRIPTOR.unpack_from(head, _HEADER.size)
        self._values_off = _HEADER.size + _DESCRIPTOR.size
        self._row_bytes = (self.T + 7) // 8
        self._mask_off = self._values_off + 4 * self.N * self.T * self.D
        self._meta_off = self._mask_off + self._row_bytes * self.N
        if size < self._meta_off + _LENGTH.size:
            raise DataFormatError("truncated panel payload")
        with open(self.path, "rb") as fh:
            fh.seek(self._meta_off)
            (n_meta,) = _LENGTH.unpack(fh.read(_LENGTH.size))
            raw = fh.read(n_meta)
        if len(raw) != n_meta:
            raise DataFormatError("truncated panel metadata")
        try:
            self.meta = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"bad panel metadata: {exc}") from exc
        self._values = np.memmap(
            self.path, dtype="<f4", mode="r", offset=self._values_off, shape=(self.N, self.T, self.D)
        )
        self._mask = np.memmap(
            self.path, dtype=np.uint8, mode="r", offset=self._mask_off, shape=(self.N, self._row_bytes)
        )

    def window(self, nodes, start: int, end: int) -> tuple[np.ndarray, np.ndarray]:
        """Values (n, end-start, D) and mask (n, end-start) for the given nodes."""
        nodes = np.asarray(nodes, dtype=np.int64)
        vals = np.array(self._values[nodes, start:end], dtype=np.float32)
        bits = np.unpackbits(self._mask[nodes], axis=1, bitorder="little", count=self.T)
        return vals, bits[:, start:end].astype(bool)

    def load(self) -> SeriesPanel:
        vals, mask = self.window(np.arange(self.N), 0, self.T)
        return SeriesPanel(vals, mask, list(self.meta["names"]), list(self.meta["categories"]))


def load_panel(path) -> SeriesPanel:
    return PanelFile(path).load()


def save_edges(graph: DynamicGraph, path) -> None:
    lines = "".join(f"{s} {d} {a} {b}\n" for s, d, a, b in graph.edges.tolist())
    _atomic_write(path, lines.encode("ascii"))


def load_edges(path, n_nodes: int, n_steps: int) -> DynamicGraph:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 'src dst start end'")
            try:
                rows.append([int(p) for p in parts])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    return DynamicGraph(n_nodes, n_steps, rows)


# --------------------------------------------------------------------------
# ingestion


def read_matrix_adjacency(speed_csv, adj_csv) -> tuple[SeriesPanel, DynamicGraph]:
    """Traffic matrix (header row of node ids, then T rows of N readings) plus
    an N x N adjacency matrix. Nonzero off-diagonal ``a[i, j]`` becomes a
    static edge i -> j over the whole series. Empty or NaN cells are missing."""
    with open(speed_csv, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    try:
        speeds = np.genfromtxt(speed_csv, delimiter=",", skip_header=1, dtype=np.float64)
        adj = np.genfromtxt(adj_csv, delimiter=",", dtype=np.float64)
    except ValueError as exc:
        raise DataFormatError(str(exc)) from exc
    speeds = np.atleast_2d(speeds)
    adj = np.atleast_2d(adj)
    T_, N = speeds.shape
    if len(header) != N:
        raise DataFormatError(f"header has {len(header)} ids but rows have {N} columns")
    if adj.shape != (N, N):
        raise DataFormatError(f"adjacency is {adj.shape}, expected ({N}, {N})")
    if np.isnan(adj).any():
        raise DataFormatError("adjacency contains non-numeric cells")
    mask = np.isnan(speeds).T
    values = np.nan_to_num(speeds.T, nan=0.0)[:, :, None]
    panel = SeriesPanel(values, mask, [h.strip() for h in header])
    src, dst = np.nonzero(adj)
    off = src != dst
    graph = DynamicGraph.static(N, T_, np.column_stack([src[off], dst[off]]))
    return panel, graph
