"""Stacked recurrent blocks with residual decomposition.

Each block runs an LSTM cell over its residual input and feeds the hidden
output through three two-layer GELU heads: a backcast vector ``p`` that is
subtracted from the residual passed to the next block, a forecast vector ``q``
whose sum over blocks is projected to the next-step forecast, and a node vector
``u`` whose sum over blocks is the node embedding used by neighbor
aggregation.

Two execution orders are provided. :func:`stack_step` advances every block by
one time step and is what autoregressive rollouts use.
:func:`run_stack_sequence` processes the whole input sequence one block at a
time, which is equivalent when all inputs are known in advance (teacher
forcing) and much cheaper to differentiate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("attention", "graphsage", "meanpool")
EMBEDDING_SOURCES = ("u", "h", "p", "q", "h+p", "h+p+q")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    backcast: int = 112
    horizon: int = 28
    dim: int = 1
    hidden: int = 128
    layers: int = 8
    dropout: float = 0.1
    heads: int = 4
    hops: int = 0
    variant: str = "attention"
    embedding_source: str = "u"
    final_projection: bool = True
    zero_attention: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("backcast", "horizon", "dim", "hidden", "layers", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.hops not in (0, 1, 2):
            raise ConfigError("hops must be 0, 1 or 2")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.embedding_source not in EMBEDDING_SOURCES:
            raise ConfigError(f"embedding_source must be one of {EMBEDDING_SOURCES}")
        if self.hidden % self.heads:
            raise ConfigError("hidden must be divisible by heads")
        if self.hops and self.direct_combine and self.variant == "attention" and self.embed_dim != self.hidden:
            raise ConfigError("direct ego combination needs embedding size == hidden")
        if self.hops == 2 and self.embed_dim != self.combined_dim:
            raise ConfigError("two-hop aggregation needs embedding size == combined size")

    @property
    def embed_dim(self) -> int:
        return self.hidden * len(self.embedding_source.split("+"))

    @property
    def direct_combine(self) -> bool:
        return self.variant == "meanpool" or not self.final_projection

    @property
    def combined_dim(self) -> int:
        """Size of the ego+neighbor vector fed to the network output map."""
        return self.embed_dim if self.direct_combine else self.hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# value transform


def to_log(raw) -> np.ndarray:
    return np.log1p(np.asarray(raw, dtype=np.float64))


def from_log(x) -> np.ndarray:
    """Inverse of :func:`to_log`, clamped below at zero."""
    return np.maximum(np.expm1(np.asarray(x, dtype=np.float64)), 0.0)


# --------------------------------------------------------------------------
# parameters


def _uniform(rng, shape, H):
    bound = 1.0 / np.sqrt(H)
    return T.parameter(rng.uniform(-bound, bound, size=shape))


def init_recurrent_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Weights uniform in +-1/sqrt(H), biases zero."""
    H, D = config.hidden, config.dim
    p = {"input.W": _uniform(rng, (H, D), H)}
    for l in range(config.layers):
        p[f"block{l}.lstm.W_ih"] = _uniform(rng, (4 * H, H), H)
        p[f"block{l}.lstm.W_hh"] = _uniform(rng, (4 * H, H), H)
        p[f"block{l}.lstm.b"] = T.parameter(np.zeros(4 * H))
        for head in "pqu":
            p[f"block{l}.ff_{head}.W1"] = _uniform(rng, (H, H), H)
            p[f"block{l}.ff_{head}.b1"] = T.parameter(np.zeros(H))
            p[f"block{l}.ff_{head}.W2"] = _uniform(rng, (H, H), H)
            p[f"block{l}.ff_{head}.b2"] = T.parameter(np.zeros(H))
    p["output.W"] = _uniform(rng, (D, H), H)
    return p


# --------------------------------------------------------------------------
# blocks


def feed_forward(params, prefix: str, h) -> Tensor:
    hidden = T.gelu(T.linear(h, params[prefix + ".W1"], params[prefix + ".b1"]))
    return T.linear(hidden, params[prefix + ".W2"], params[prefix + ".b2"])


def project_input(params, obs) -> Tensor:
    """Map log-scale observations (..., D) into the hidden space (..., H)."""
    return T.linear(obs, params["input.W"])


def _heads(params, l, h, config, training, rng):
    hd = T.dropout(h, config.dropout, training, rng)
    return tuple(feed_forward(params, f"block{l}.ff_{k}", hd) for k in "pqu")


def block_step(params, l: int, z, state, config: ModelConfig, training=False, rng=None):
    """Advance block ``l`` by one step.

    ``state`` is ``(h, c)``. Returns ``(p, q, u, h, new_state)``.
    """
    h, c = T.lstm_cell(
        z, state[0], state[1],
        params[f"block{l}.lstm.W_ih"], params[f"block{l}.lstm.W_hh"], params[f"block{l}.lstm.b"],
    )
    p, q, u = _heads(params, l, h, config, training, rng)
    return p, q, u, h, (h, c)


def zero_states(config: ModelConfig, n: int) -> list[tuple[Tensor, Tensor]]:
    dtype = T.get_default_dtype()
    return [
        (T.tensor(np.zeros((n, config.hidden), dtype)), T.tensor(np.zeros((n, config.hidden), dtype)))
        for _ in range(config.layers)
    ]


@dataclass
class StackOutput:
    """Outputs of the block stack at one step or over a sequence.

    ``qhat`` is the summed forecast vector, ``q_layers`` the per-block forecast
    vectors, ``embedding`` the node embedding selected by the config, ``z_final``
    the residual left after the last block, and ``states`` the per-block
    ``(h, c)`` after the last processed step.
    """

    qhat: Tensor
    q_layers: list
    p_layers: list
    embedding: Tensor
    z_final: Tensor
    states: list


def _embedding(config, h_sum, p_sum, q_sum, u_sum):
    parts = {"u": u_sum, "h": h_sum, "p": p_sum, "q": q_sum}
    names = config.embedding_source.split("+")
    if len(names) == 1:
        return parts[names[0]]
    return T.concat([parts[k] for k in names], axis=-1)


def stack_step(params, z1, states, config: ModelConfig, training=False, rng=None) -> StackOutput:
    """Run all blocks for one step with residual subtraction between blocks."""
    z = z1
    new_states = []
    qs, ps = [], []
    h_sum = u_sum = None
    for l in range(config.layers):
        p, q, u, h, st = block_step(params, l, z, states[l], config, training, rng)
        new_states.append(st)
        qs.append(q)
        ps.append(p)
        h_sum = h if h_sum is None else h_sum + h
        u_sum = u if u_sum is None else u_sum + u
        z = z - p
    q_sum = _sum(qs)
    emb = _embedding(config, h_sum, _sum(ps), q_sum, u_sum)
    return StackOutput(q_sum, qs, ps, emb, z, new_states)


def _sum(items):
    out = items[0]
    for x in items[1:]:
        out = out + x
    return out


def run_stack_sequence(
    params, z1_seq, config: ModelConfig, states=None, training=False, rng=None, window: slice | None = None
) -> StackOutput:
    """Layer-major pass over a (n, S, H) sequence of projected inputs.

    With ``window`` the forecast and embedding heads only run on those steps,
    so ``qhat``, ``q_layers``, ``embedding`` and ``z_final`` cover the window
    alone. The backcast heads still run everywhere since later blocks need
    the full residual.
    """
    z = z1_seq
    qs, ps, new_states = [], [], []
    h_sum = u_sum = None
    L = config.layers
    for l in range(L):
        h0, c0 = (None, None) if states is None else states[l]
        h_all, h_last, c_last = T.lstm_sequence(
            z, params[f"block{l}.lstm.W_ih"], params[f"block{l}.lstm.W_hh"], params[f"block{l}.lstm.b"],
            h0, c0,
        )
        new_states.append((h_last, c_last))
        hd = T.dropout(h_all, config.dropout, training, rng)
        if window is None:
            hw, hdw = h_all, hd
        else:
            hw, hdw = h_all[:, window], hd[:, window]
        last = l == L - 1
        p = feed_forward(params, f"block{l}.ff_p", hdw if (last and window is not None) else hd)
        q = feed_forward(params, f"block{l}.ff_q", hdw)
        u = feed_forward(params, f"block{l}.ff_u", hdw)
        pw = p if (window is None or last) else p[:, window]
        qs.append(q)
        ps.append(pw)
        h_sum = hw if h_sum is None else h_sum + hw
        u_sum = u if u_sum is None else u_sum + u
        if not last:
            z = z - p
        else:
            z = (z if window is None else z[:, window]) - p
    q_sum = _sum(qs)
    emb = _embedding(config, h_sum, _sum(ps), q_sum, u_sum)
    return StackOutput(q_sum, qs, ps, emb, z, new_states)


def recurrent_forecast(params, qhat) -> Tensor:
    """Project the summed forecast vector to a log-scale D-vector."""
    return T.linear(qhat, params["output.W"])


# --------------------------------------------------------------------------
# rollout


@dataclass
class Rollout:
    """Result of a multi-step forecast in log space.

    ``forecast`` and ``recurrent`` are (n, F, D); ``network`` is the additive
    neighbor term (zeros without aggregation); ``layers`` holds the per-block
    contributions (L, n, F, D); ``embeddings`` the ego embedding at each step
    that produced a forecast (n, F, E); ``traces`` whatever the network
    callback returned per step.
    """

    forecast: np.ndarray
    recurrent: np.ndarray
    network: np.ndarray
    layers: np.ndarray
    embeddings: np.ndarray
    traces: list

    def raw(self) -> np.ndarray:
        return from_log(self.forecast)


NetworkFn = Callable[[int, Tensor], tuple]


def rollout(
    params,
    config: ModelConfig,
    series_log: np.ndarray,
    horizon: int,
    feedback: str = "own",
    truth_log: np.ndarray | None = None,
    network_fn: NetworkFn | None = None,
    training: bool = False,
    rng=None,
    keep_tensors: bool = False,
):
    """Warm up on ``series_log`` (n, S, D) and forecast ``horizon`` steps.

    ``feedback='own'`` feeds each forecast back as the next input;
    ``'teacher'`` feeds ``truth_log`` (n, horizon, D) instead. ``network_fn(k,
    u)`` may add a neighbor term to forecast step ``k`` given the ego embedding
    ``u`` of the step that produces it; it returns ``(v_net, trace)``.

    Returns a :class:`Rollout`, or with ``keep_tensors`` the list of forecast
    tensors (for differentiating through the rollout).
    """
    series_log = np.asarray(series_log)
    if series_log.ndim != 3 or series_log.shape[1] < 1:
        raise ValueError("series must be (n, steps >= 1, D)")
    if feedback not in ("own", "teacher"):
        raise ValueError("feedback must be 'own' or 'teacher'")
    if feedback == "teacher" and (truth_log is None or truth_log.shape[1] < horizon - 1):
        raise ValueError("teacher feedback needs truth for the horizon")

    z1 = project_input(params, T.tensor(series_log))
    out = run_stack_sequence(params, z1, config, training=training, rng=rng)
    states = out.states
    qhat = out.qhat[:, -1]
    q_layers = [q[:, -1] for q in out.q_layers]
    emb = out.embedding[:, -1]

    preds, rec, net, layers, embs, traces = [], [], [], [], [], []
    for k in range(horizon):
        v_rec = recurrent_forecast(params, qhat)
        if network_fn is not None:
            v_net, trace = network_fn(k, emb)
            v = v_rec + v_net
        else:
            v_net, trace = None, None
            v = v_rec
        preds.append(v)
        rec.append(v_rec.data)
        net.append(np.zeros_like(v_rec.data) if v_net is None else v_net.data)
        layers.append([recurrent_forecast(params, q).data for q in q_layers])
        embs.append(emb.data)
        traces.append(trace)
        if k == horizon - 1:
            break
        nxt = v if feedback == "own" else T.tensor(truth_log[:, k])
        step = stack_step(params, project_input(params, nxt), states, config, training, rng)
        states, qhat, q_layers, emb = step.states, step.qhat, step.q_layers, step.embedding

    if keep_tensors:
        return preds
    return Rollout(
        forecast=np.stack([p.data for p in preds], axis=1),
        recurrent=np.stack(rec, axis=1),
        network=np.stack(net, axis=1),
        layers=np.stack([np.stack(l, axis=0) for l in layers], axis=2),
        embeddings=np.stack(embs, axis=1),
        traces=traces,
    )


def decompose(params, config: ModelConfig, series_log: np.ndarray, horizon: int) -> np.ndarray:
    """Per-block forecast contributions (L, n, F, D) for an own-feedback rollout."""
    return rollout(params, config, series_log, horizon).layers
