"""The full forecaster: recurrent stack plus optional neighbor aggregation."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .aggregation import init_aggregation_params, network_term
from .graph import _atomic_write
from .recurrent import (
    ModelConfig,
    Rollout,
    init_recurrent_params,
    project_input,
    recurrent_forecast,
    rollout,
    run_stack_sequence,
)
from .tensor import Tensor

CKPT_MAGIC = b"RADFLOWCKPT\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class WindowBatch:
    """Inputs for forecasting the last ``F`` steps of ``n`` windows.

    Series are log-scale and span ``B + F`` steps. ``mask1[i, k, j]`` says
    whether first-hop slot ``j`` of window ``i`` is a neighbor at forecast
    step ``k``; ``mask2`` does the same for second-hop slots of each first-hop
    neighbor. ``target`` holds raw-scale truth for the forecast steps.
    """

    ego: np.ndarray  # (n, B+F, D)
    target: np.ndarray | None = None  # (n, F, D)
    hop1: np.ndarray | None = None  # (n, K, B+F, D)
    mask1: np.ndarray | None = None  # (n, F, K)
    hop2: np.ndarray | None = None  # (n, K, K2, B+F, D)
    mask2: np.ndarray | None = None  # (n, F, K, K2)
    ego_ids: np.ndarray | None = None
    hop1_ids: np.ndarray | None = None  # (n, K), -1 for empty slots
    origin: np.ndarray | None = None  # first forecast step per window

    @property
    def n(self) -> int:
        return self.ego.shape[0]


class Radflow:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "Radflow":
        rng = np.random.default_rng(seed)
        params = init_recurrent_params(config, rng)
        params.update(init_aggregation_params(config, rng))
        return cls(config, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def copy(self) -> "Radflow":
        return Radflow(
            ModelConfig.from_dict(self.config.to_dict()),
            {k: T.parameter(v.data.copy()) for k, v in self.params.items()},
        )

    @property
    def has_network(self) -> bool:
        return self.config.hops > 0

    # ------------------------------------------------------------------ training

    def _split_neighbors(self, emb, n, K, K2, start, F):
        """Slice embeddings of stacked neighbor series into (n, F, K, E) and
        (n, F, K, K2, E) over the forecast steps."""
        E = emb.shape[-1]
        h1 = h2 = None
        if K:
            x = T.reshape(emb[start : start + n * K, -F:], (n, K, F, E))
            h1 = T.transpose(x, (0, 2, 1, 3))
            start += n * K
        if K and K2:
            x = T.reshape(emb[start : start + n * K * K2, -F:], (n, K, K2, F, E))
            h2 = T.transpose(x, (0, 3, 1, 2, 4))
        return h1, h2

    def _neighbor_arrays(self, batch: WindowBatch, hops: int):
        n, F = batch.n, self.config.horizon
        S, D = batch.ego.shape[1], batch.ego.shape[2]
        if hops >= 1 and batch.hop1 is not None:
            hop1, mask1 = batch.hop1, batch.mask1
        else:
            hop1, mask1 = np.zeros((n, 0, S, D)), np.zeros((n, F, 0), bool)
        K = hop1.shape[1]
        if self.config.hops == 2:
            if hops == 2 and batch.hop2 is not None and K:
                hop2, mask2 = batch.hop2, batch.mask2
            else:
                hop2, mask2 = np.zeros((n, K, 0, S, D)), np.zeros((n, F, K, 0), bool)
        else:
            hop2, mask2 = np.zeros((n, K, 0, S, D)), np.zeros((n, F, K, 0), bool)
        return hop1, mask1, hop2, mask2

    def teacher_forecast(self, batch: WindowBatch, training=False, rng=None, hops=None):
        """One-step-ahead log forecasts for the last F steps of each window, with
        true ego inputs throughout. Returns ``(forecast, v_rec, v_net, trace)``."""
        cfg = self.config
        B, F = cfg.backcast, cfg.horizon
        hops = cfg.hops if hops is None else hops
        n = batch.n
        if batch.ego.shape[1] != B + F:
            raise ValueError(f"windows must span {B + F} steps")
        parts = [batch.ego]
        K = K2 = 0
        if cfg.hops:
            hop1, mask1, hop2, mask2 = self._neighbor_arrays(batch, hops)
            K, K2 = hop1.shape[1], hop2.shape[2]
            D = batch.ego.shape[2]
            parts.append(hop1.reshape(n * K, B + F, D))
            parts.append(hop2.reshape(n * K * K2, B + F, D))
        series = np.concatenate(parts, axis=0)
        # heads only at steps B-1 .. B+F-1: the ego predicts from the first F,
        # neighbors contribute the embeddings of the last F
        out = run_stack_sequence(
            self.params, project_input(self.params, T.tensor(series)), cfg, training=training, rng=rng,
            window=slice(B - 1, B + F),
        )
        v_rec = recurrent_forecast(self.params, out.qhat[:n, :F])
        if not cfg.hops:
            return v_rec, v_rec, None, None
        ego_u = out.embedding[:n, :F]
        h1, h2 = self._split_neighbors(out.embedding, n, K, K2, n, F)
        if h1 is None:
            E = cfg.embed_dim
            h1 = T.tensor(np.zeros((n, F, 0, E)))
            h2 = T.tensor(np.zeros((n, F, 0, 0, E)))
        elif h2 is None:
            h2 = T.tensor(np.zeros((n, F, K, 0, cfg.embed_dim)))
        v_net, _, trace, _ = network_term(self.params, cfg, ego_u, h1, mask1, h2, mask2)
        return v_rec + v_net, v_rec, v_net, trace

    def neighbor_embeddings(self, batch: WindowBatch, hops=None, training=False, rng=None):
        """Embeddings of neighbor series over the forecast steps, as tensors."""
        cfg = self.config
        F = cfg.horizon
        hops = cfg.hops if hops is None else hops
        hop1, mask1, hop2, mask2 = self._neighbor_arrays(batch, hops)
        n, K, K2 = batch.n, hop1.shape[1], hop2.shape[2]
        S = hop1.shape[2]
        E = cfg.embed_dim
        D = batch.ego.shape[2]
        series = np.concatenate([hop1.reshape(n * K, S, D), hop2.reshape(n * K * K2, S, D)], axis=0)
        if len(series) == 0:
            return T.tensor(np.zeros((n, F, 0, E))), mask1, T.tensor(np.zeros((n, F, 0, 0, E))), mask2
        out = run_stack_sequence(
            self.params, project_input(self.params, T.tensor(series)), cfg, training=training, rng=rng,
            window=slice(S - F, S),
        )
        h1, h2 = self._split_neighbors(out.embedding, n, K, K2, 0, F)
        if h2 is None:
            h2 = T.tensor(np.zeros((n, F, K, 0, E)))
        return h1, mask1, h2, mask2

    def forecast(self, batch: WindowBatch, hops=None, feedback: str = "own", training=False, rng=None,
                 keep_tensors=False) -> Rollout:
        """Roll out F steps from the first B steps of each window.

        With ``feedback='own'`` each forecast is fed back as the next ego
        input; neighbor series are always taken from the batch as given.
        """
        cfg = self.config
        B, F = cfg.backcast, cfg.horizon
        ego = batch.ego
        truth = ego[:, B:] if feedback == "teacher" else None
        network_fn = None
        if cfg.hops:
            h1, mask1, h2, mask2 = self.neighbor_embeddings(batch, hops, training, rng)

            def network_fn(k, u):
                v_net, _, trace, trace2 = network_term(
                    self.params, cfg, u, h1[:, k], mask1[:, k], h2[:, k], mask2[:, k]
                )
                return v_net, (trace, trace2)

        return rollout(
            self.params, cfg, ego[:, :B], F, feedback, truth, network_fn, training, rng, keep_tensors
        )

    # ------------------------------------------------------------------ io

    def save(self, path) -> None:
        cfg = json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8")
        chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<Q", len(cfg)), cfg,
                  struct.pack("<Q", len(self.params))]
        for name, p in self.params.items():
            nb = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(nb)) + nb)
            chunks.append(struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        _atomic_write(Path(path), b"".join(chunks))

    @classmethod
    def load(cls, path) -> "Radflow":
        buf = Path(path).read_bytes()
        try:
            if buf[:12] != CKPT_MAGIC:
                raise CheckpointError("not a checkpoint (bad magic)")
            (version,) = struct.unpack_from("<I", buf, 12)
            if version != CKPT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            off = 16
            (n_cfg,) = struct.unpack_from("<Q", buf, off)
            off += 8
            config = ModelConfig.from_dict(json.loads(buf[off : off + n_cfg].decode("utf-8")))
            off += n_cfg
            (count,) = struct.unpack_from("<Q", buf, off)
            off += 8
            params = {}
            for _ in range(count):
                (n_name,) = struct.unpack_from("<I", buf, off)
                off += 4
                name = buf[off : off + n_name].decode("utf-8")
                off += n_name
                (ndim,) = struct.unpack_from("<I", buf, off)
                off += 4
                shape = struct.unpack_from(f"<{ndim}Q", buf, off)
                off += 8 * ndim
                size = int(np.prod(shape)) if ndim else 1
                if off + 8 * size > len(buf):
                    raise CheckpointError("truncated checkpoint")
                data = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
                off += 8 * size
                params[name] = T.parameter(data.astype(np.float64))
        except struct.error as exc:
            raise CheckpointError(f"truncated checkpoint: {exc}") from exc
        expected = cls.initialize(config).params
        if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in params):
            raise CheckpointError("checkpoint tensors do not match its config")
        return cls(config, params)
