"""Metrics, evaluation protocols, baselines and analysis statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import tensor as T
from .batching import NetworkData
from .graph import DynamicGraph, SeriesPanel
from .model import Radflow
from .recurrent import from_log

DELTA = 1e-8


# --------------------------------------------------------------------------
# metrics


def _prepare(preds, truths):
    p = np.asarray(preds, dtype=np.float64)
    v = np.asarray(truths, dtype=np.float64)
    if p.shape != v.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {v.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, v


def smape_terms(preds, truths) -> np.ndarray:
    """Elementwise 200 |v - v_hat| / (|v| + |v_hat|), with 0/0 taken as 0."""
    p, v = _prepare(preds, truths)
    num = 200.0 * np.abs(v - p)
    den = np.abs(v) + np.abs(p)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _select(terms, truths, nonzero):
    if not nonzero:
        return terms.ravel()
    keep = np.asarray(truths).ravel() != 0
    if not keep.any():
        raise ValueError("no non-zero truth values")
    return terms.ravel()[keep]


def smape_metric(preds, truths, nonzero: bool = False) -> float:
    return float(_select(smape_terms(preds, truths), truths, nonzero).mean())


def rmse_metric(preds, truths, nonzero: bool = False) -> float:
    p, v = _prepare(preds, truths)
    return float(np.sqrt(_select((v - p) ** 2, v, nonzero).mean()))


def mae_metric(preds, truths, nonzero: bool = False) -> float:
    p, v = _prepare(preds, truths)
    return float(_select(np.abs(v - p), v, nonzero).mean())


@dataclass
class MetricReport:
    """Overall and per-node SMAPE, RMSE and MAE.

    Per-node SMAPE and MAE average to the overall values when every node has
    the same number of counted steps; the overall RMSE is the root of the
    averaged per-node squared error.
    """

    smape: float
    rmse: float
    mae: float
    count: int
    node_ids: np.ndarray
    node_smape: np.ndarray
    node_rmse: np.ndarray
    node_mae: np.ndarray
    nonzero: bool = False
    group: str | None = None

    def summary(self) -> dict:
        return {"smape": self.smape, "rmse": self.rmse, "mae": self.mae, "count": self.count,
                "nonzero": self.nonzero, "group": self.group}


def metric_report(preds, truths, node_ids=None, nonzero: bool = False, group=None) -> MetricReport:
    """Metrics for (n, F[, D]) predictions; rows are nodes."""
    p, v = _prepare(preds, truths)
    n = p.shape[0]
    node_ids = np.arange(n) if node_ids is None else np.asarray(node_ids)
    ns, nr, nm = np.full(n, np.nan), np.full(n, np.nan), np.full(n, np.nan)
    for i in range(n):
        if nonzero and not (v[i] != 0).any():
            continue
        ns[i] = smape_metric(p[i], v[i], nonzero)
        nr[i] = rmse_metric(p[i], v[i], nonzero)
        nm[i] = mae_metric(p[i], v[i], nonzero)
    count = int((v != 0).sum()) if nonzero else int(v.size)
    return MetricReport(
        smape_metric(p, v, nonzero), rmse_metric(p, v, nonzero), mae_metric(p, v, nonzero),
        count, node_ids, ns, nr, nm, nonzero, group,
    )


# --------------------------------------------------------------------------
# simple baselines


def baseline_copy_step(history, horizon: int) -> np.ndarray:
    """Repeat the last observation of (n, S, D) history for ``horizon`` steps."""
    h = np.asarray(history, dtype=np.float64)
    if h.shape[1] < 1:
        raise ValueError("copy-step needs at least one step of history")
    return np.repeat(h[:, -1:], horizon, axis=1)


def baseline_copy_week(history, horizon: int, period: int = 7) -> np.ndarray:
    """Tile the final ``period`` observations so that step k of the forecast
    copies the value one period earlier."""
    h = np.asarray(history, dtype=np.float64)
    if h.shape[1] < period:
        raise ValueError(f"copy-week needs at least {period} steps of history")
    last = h[:, -period:]
    return last[:, np.arange(horizon) % period]


# --------------------------------------------------------------------------
# ARNet: per-node AR(7) plus weighted neighbor values at the forecast step


ARNET_LAGS = 7


@dataclass
class ArnetParams:
    alpha: np.ndarray  # (N, 7); alpha[:, k] multiplies the value k+1 steps back
    beta: np.ndarray  # (N, N); beta[i, j] weights neighbor i for node j
    adjacency: np.ndarray  # (N, N) bool, static edges i -> j


def static_adjacency(graph: DynamicGraph, start: int, end: int, min_fraction: float = 0.5) -> np.ndarray:
    """Edges present in at least ``min_fraction`` of the steps in [start, end)."""
    a = np.zeros((graph.N, graph.N))
    for s, d, t0, t1 in graph.edges.tolist():
        if s != d:
            a[s, d] += max(0, min(t1, end) - max(t0, start))
    return a >= min_fraction * (end - start)


def arnet_init(adjacency: np.ndarray) -> ArnetParams:
    N = len(adjacency)
    alpha = np.zeros((N, ARNET_LAGS))
    alpha[:, 0] = 1.0
    return ArnetParams(alpha, np.zeros((N, N)), np.asarray(adjacency, bool))


def _arnet_forward(alpha, beta, adj, x, start, end):
    """Log-space one-step predictions (N, end-start, D) for every node at steps
    [start, end), from true lags and true neighbor values."""
    N, _, D = x.shape
    steps = np.arange(start, end)
    lags = x[:, steps[:, None] - 1 - np.arange(ARNET_LAGS)[None, :]]  # (N, S, 7, D)
    own = T.sum_(T.mul(T.reshape(alpha, (N, 1, ARNET_LAGS, 1)), lags), axis=2)
    W = T.transpose(T.mul(beta, adj.astype(np.float64)), (1, 0))  # W[j, i] weights neighbor i of j
    net = T.reshape(T.matmul(W, x[:, start:end].reshape(N, -1)), (N, len(steps), D))
    return T.add(own, net)


def arnet_fit(data: NetworkData, train_end: int, steps: int = 500, lr: float = 1e-2, min_fraction: float = 0.5,
              fit_beta: bool = True) -> ArnetParams:
    """Full-batch fit of one-step SMAPE over the training range, with the
    learning rate decaying linearly to zero."""
    from .training import OptimConfig, OptimizerState, adamw_step, lr_at, smape_loss_log

    if train_end <= ARNET_LAGS:
        raise ValueError(f"ARNet needs more than {ARNET_LAGS} steps of history")
    adj = static_adjacency(data.graph, 0, train_end, min_fraction)
    init = arnet_init(adj)
    params = {"alpha": T.parameter(init.alpha), "beta": T.parameter(init.beta)}
    if not fit_beta:
        params.pop("beta")
    beta_fixed = T.tensor(init.beta)
    cfg = OptimConfig(peak_lr=lr, warmup_steps=0, epochs=1, steps_per_epoch=steps, weight_decay=0.0, clip_norm=1e9)
    state = OptimizerState()
    truth = data.raw[:, ARNET_LAGS:train_end]
    for step in range(steps):
        with T.Tape() as tape:
            pred = _arnet_forward(params["alpha"], params.get("beta", beta_fixed), adj, data.log, ARNET_LAGS,
                                  train_end)
            loss = smape_loss_log(pred, truth)
        g = T.backward(tape, loss, params.values())
        adamw_step(params, {k: g[p] for k, p in params.items()}, state, lr_at(step, cfg), cfg)
    beta = params["beta"].data if fit_beta else init.beta
    return ArnetParams(params["alpha"].data.copy(), beta.copy() * adj, adj)


def arnet_predict(params: ArnetParams, data: NetworkData, origin: int, horizon: int, nodes=None) -> np.ndarray:
    """Imputation-mode raw forecasts (n, F, D): own lags inside the horizon come
    from earlier predictions, neighbor values are the truth at each step."""
    if origin < ARNET_LAGS:
        raise ValueError(f"ARNet needs {ARNET_LAGS} steps of history")
    nodes = np.arange(data.N) if nodes is None else np.asarray(nodes)
    x = data.log
    hist = x[nodes, origin - ARNET_LAGS : origin].copy()  # (n, 7, D)
    W = (params.beta * params.adjacency)[:, nodes].T  # (n, N)
    out = []
    for k in range(horizon):
        own = np.einsum("nk,nkd->nd", params.alpha[nodes], hist[:, ::-1])
        pred = own + W @ x[:, origin + k]
        out.append(pred)
        hist = np.concatenate([hist[:, 1:], pred[:, None]], axis=1)
    return from_log(np.stack(out, axis=1))


# --------------------------------------------------------------------------
# model evaluation


@dataclass
class EvalResult:
    """Forecasts and metrics for one origin.

    ``forecast`` is raw-scale (n, F, D); ``recurrent`` and ``network`` are the
    two additive log-space terms; ``scores`` holds head-averaged attention on
    each first-hop slot (n, F, K) and ``null_scores`` the null slot's weight.
    """

    report: MetricReport
    nodes: np.ndarray
    origin: int
    setting: str
    hops: int
    forecast: np.ndarray
    truth: np.ndarray
    recurrent: np.ndarray
    network: np.ndarray
    layers: np.ndarray
    neighbor_ids: np.ndarray | None = None
    mask: np.ndarray | None = None
    scores: np.ndarray | None = None
    null_scores: np.ndarray | None = None

    @property
    def smape(self) -> float:
        return self.report.smape


def pure_forecasts(model: Radflow, data: NetworkData, origin: int, batch_size: int = 256) -> np.ndarray:
    """Log-space F-step forecasts for every node from a model without aggregation."""
    if model.config.hops:
        raise ValueError("neighbor forecasts must come from a model without aggregation")
    out = []
    for chunk in np.array_split(np.arange(data.N), max(1, math.ceil(data.N / batch_size))):
        b = data.batch(chunk, origin, model.config, 0)
        out.append(model.forecast(b, hops=0).forecast)
    return np.concatenate(out, axis=0)


def evaluate(
    model: Radflow,
    data: NetworkData,
    origin: int,
    setting: str = "imputation",
    hops: int | None = None,
    nodes=None,
    neighbor_model: Radflow | None = None,
    neighbor_forecasts: np.ndarray | None = None,
    truth: np.ndarray | None = None,
    nonzero: bool = False,
    batch_size: int = 64,
) -> EvalResult:
    """Warm up on the B steps before ``origin`` and forecast F steps per node.

    In the imputation setting neighbor embeddings see their true horizon
    values; in the forecast setting those are replaced by forecasts of a model
    without aggregation (``neighbor_model`` or precomputed
    ``neighbor_forecasts`` in log space, shape (N, F, D)). ``truth`` overrides
    the raw values scored against, for runs on perturbed inputs.
    """
    cfg = model.config
    F = cfg.horizon
    hops = cfg.hops if hops is None else hops
    if hops > cfg.hops:
        raise ValueError(f"model was built for {cfg.hops} hops, asked for {hops}")
    if setting not in ("imputation", "forecast"):
        raise ValueError("setting must be 'imputation' or 'forecast'")
    nodes = np.arange(data.N) if nodes is None else np.asarray(nodes, dtype=np.int64)
    horizon_log = None
    if setting == "forecast" and hops > 0:
        if neighbor_forecasts is None:
            if neighbor_model is None:
                raise ValueError("forecast setting needs neighbor forecasts or a model to make them")
            neighbor_forecasts = pure_forecasts(neighbor_model, data, origin)
        horizon_log = neighbor_forecasts
    truth_raw = data.raw if truth is None else truth
    parts = []
    for chunk in np.array_split(nodes, max(1, math.ceil(len(nodes) / batch_size))):
        if not len(chunk):
            continue
        b = data.batch(chunk, origin, cfg, hops, horizon_log=horizon_log)
        r = model.forecast(b, hops=hops)
        scores = nulls = None
        if cfg.hops and cfg.variant == "attention":
            tr = [t[0] for t in r.traces]
            scores = np.stack([t.mean_over_heads() for t in tr], axis=1)
            nulls = np.stack([t.null_scores.mean(axis=-1) for t in tr], axis=1)
        parts.append((r, b, scores, nulls))

    def cat(get):
        items = [get(p) for p in parts]
        return None if items[0] is None else np.concatenate(items, axis=0)

    fc = np.concatenate([from_log(p[0].forecast) for p in parts], axis=0)
    tr = truth_raw[nodes][:, origin : origin + F]
    return EvalResult(
        report=metric_report(fc, tr, nodes, nonzero),
        nodes=nodes, origin=origin, setting=setting, hops=hops,
        forecast=fc, truth=tr,
        recurrent=cat(lambda p: p[0].recurrent),
        network=cat(lambda p: p[0].network),
        layers=np.concatenate([p[0].layers for p in parts], axis=1),
        neighbor_ids=cat(lambda p: p[1].hop1_ids),
        mask=cat(lambda p: p[1].mask1),
        scores=cat(lambda p: p[2]),
        null_scores=cat(lambda p: p[3]),
    )


# --------------------------------------------------------------------------
# significance


def paired_ttest(a, b) -> tuple[float, float]:
    """Two-sided dependent t-test. All-zero differences give p = 1; constant
    non-zero differences give p = 0 (t infinite)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-d and of equal length")
    if len(a) < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    if not d.any():
        return 0.0, 1.0
    if np.all(d == d[0]):
        return math.copysign(math.inf, d[0]), 0.0
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)


# --------------------------------------------------------------------------
# robustness and counterfactuals


def _check_fractions(fracs):
    for f in fracs:
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"fraction {f} outside [0, 1]")


def drop_values(panel: SeriesPanel, fraction: float, rng: np.random.Generator) -> SeriesPanel:
    """Mark a random ``fraction`` of observed entries missing."""
    mask = panel.mask.copy()
    obs = np.flatnonzero(~mask.ravel())
    k = int(round(fraction * len(obs)))
    if k:
        mask.ravel()[rng.choice(obs, size=k, replace=False)] = True
    return SeriesPanel(panel.values, mask, panel.names, panel.categories)


def drop_edges(graph: DynamicGraph, fraction: float, rng: np.random.Generator) -> DynamicGraph:
    keep = np.ones(len(graph.edges), bool)
    k = int(round(fraction * len(keep)))
    if k:
        keep[rng.choice(len(keep), size=k, replace=False)] = False
    return graph.without_edges(keep)


@dataclass
class RobustnessPoint:
    kind: str
    fraction: float
    smape: float


def robustness_sweep(model: Radflow, data: NetworkData, origin: int, value_fractions=(), edge_fractions=(),
                     seed: int = 0, nodes=None, hops=None) -> list[RobustnessPoint]:
    """Imputation SMAPE after deleting random values or edges. Scores are
    always against the unperturbed truth."""
    _check_fractions(value_fractions)
    _check_fractions(edge_fractions)
    out = []
    for kind, fracs in (("values", value_fractions), ("edges", edge_fractions)):
        for i, f in enumerate(fracs):
            rng = np.random.default_rng([seed, 0 if kind == "values" else 1, i])
            if f == 0:
                d = data
            elif kind == "values":
                d = data.with_values(drop_values(data.panel, f, rng))
            else:
                d = data.with_graph(drop_edges(data.graph, f, rng))
            r = evaluate(model, d, origin, "imputation", hops=hops, nodes=nodes, truth=data.raw)
            out.append(RobustnessPoint(kind, float(f), r.smape))
    return out


def counterfactual_double(model: Radflow, data: NetworkData, ego: int, neighbor: int, day: int, origin: int,
                          hops: int | None = None) -> dict:
    """Double ``neighbor``'s raw value on horizon day ``day`` and compare the
    ego's attention on it and its forecast for that day."""
    F = model.config.horizon
    if not 0 <= day < F:
        raise ValueError(f"day must be in [0, {F})")
    t = origin + day
    if neighbor not in data.graph.neighbors_at(ego, t).tolist():
        raise ValueError(f"node {neighbor} is not a neighbor of {ego} at step {t}")
    before = evaluate(model, data, origin, "imputation", hops=hops, nodes=[ego])
    values = data.panel.values.copy()
    values[neighbor, t] = 2 * data.raw[neighbor, t]
    mask = data.panel.mask.copy()
    mask[neighbor, t] = False
    after = evaluate(model, data.with_values(SeriesPanel(values, mask, data.panel.names, data.panel.categories)),
                     origin, "imputation", hops=hops, nodes=[ego], truth=data.raw)

    def score(r):
        if r.scores is None or r.neighbor_ids is None:
            return 0.0
        slot = np.flatnonzero(r.neighbor_ids[0] == neighbor)
        return float(r.scores[0, day, slot[0]]) if len(slot) else 0.0

    f0 = float(before.forecast[0, day].mean())
    f1 = float(after.forecast[0, day].mean())
    a0, a1 = score(before), score(after)
    return {
        "ego": int(ego), "neighbor": int(neighbor), "origin": int(origin), "step": int(day),
        "score_before": a0, "score_after": a1, "delta_score": a1 - a0,
        "forecast_before": f0, "forecast_after": f1,
        "delta_forecast": (f1 - f0) / (abs(f0) + DELTA),
    }


# --------------------------------------------------------------------------
# interpretability statistics


def network_contribution(recurrent, network) -> np.ndarray:
    """Per node, the horizon mean of |v_A| / (|v_R| + |v_A| + delta), with both
    terms taken in the log space where they are added."""
    r = np.abs(np.asarray(recurrent, dtype=np.float64))
    a = np.abs(np.asarray(network, dtype=np.float64))
    frac = a / (r + a + DELTA)
    return frac.reshape(frac.shape[0], -1).mean(axis=1)


def pearson(x, y) -> float | None:
    """Pearson correlation, or None when either series is constant."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((dx * dx).sum()), np.sqrt((dy * dy).sum())
    if sx == 0 or sy == 0:
        return None
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


def attention_correlation(result: EvalResult, data: NetworkData) -> list[dict]:
    """Correlation of ego and neighbor raw series over the horizon against the
    neighbor's mean attention over the steps it is present."""
    if result.scores is None:
        raise ValueError("evaluation has no attention scores")
    F = result.forecast.shape[1]
    recs = []
    for i, ego in enumerate(result.nodes.tolist()):
        ego_series = data.raw[ego, result.origin : result.origin + F]
        for j, nb in enumerate(result.neighbor_ids[i].tolist()):
            if nb < 0:
                continue
            present = result.mask[i, :, j]
            if not present.any():
                continue
            c = pearson(ego_series, data.raw[nb, result.origin : result.origin + F])
            recs.append({
                "ego": ego, "neighbor": nb,
                "correlation": float("nan") if c is None else c,
                "attention": float(result.scores[i, present, j].mean()),
                "constant": c is None,
            })
    return recs


def attention_records(result: EvalResult) -> list[dict]:
    """Flat attention trace: one record per (ego, step, present neighbor)."""
    if result.scores is None:
        return []
    recs = []
    for i, ego in enumerate(result.nodes.tolist()):
        for k in range(result.scores.shape[1]):
            for j, nb in enumerate(result.neighbor_ids[i].tolist()):
                if nb >= 0 and result.mask[i, k, j]:
                    recs.append({"ego": ego, "origin": result.origin, "step": k, "neighbor": nb,
                                 "score": float(result.scores[i, k, j]),
                                 "null_score": float(result.null_scores[i, k])})
    return recs


def popularity_buckets(raw: np.ndarray, nodes, start: int, end: int) -> np.ndarray:
    """Integer log10 bucket of each node's mean raw value over [start, end)."""
    m = raw[np.asarray(nodes), start:end].reshape(len(nodes), -1).mean(axis=1)
    return np.floor(np.log10(np.maximum(m, 1e-12))).astype(int)


def layer_contributions(layers: np.ndarray) -> np.ndarray:
    """Per-layer mean contribution per horizon step with a 95% normal
    interval across nodes. Input (L, n, F, D); output (L, F, 3) holding
    mean, lower and upper bound, averaged over D."""
    x = np.asarray(layers, dtype=np.float64).mean(axis=-1)  # (L, n, F)
    n = x.shape[1]
    mean = x.mean(axis=1)
    half = 1.96 * x.std(axis=1, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    return np.stack([mean, mean - half, mean + half], axis=-1)
