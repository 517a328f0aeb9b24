"""Synthetic network-effect experiment shared by scripts and tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .batching import NetworkData, Split
from .evaluation import EvalResult, evaluate, pure_forecasts
from .model import Radflow
from .recurrent import ModelConfig
from .synth import SynthConfig, generate
from .training import OptimConfig, fit


@dataclass
class NetworkEffectConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(backcast=28, horizon=28, hidden=16, layers=2, heads=4, dropout=0.0)
    )
    optim: OptimConfig = field(
        default_factory=lambda: OptimConfig(
            peak_lr=2e-3, warmup_steps=1000, epochs=10, steps_per_epoch=1900, batch_size=32,
            clip_norm=1.0, precision="float32",
        )
    )
    seed: int = 0


@dataclass
class NetworkEffectResult:
    nonet: EvalResult
    imputation: EvalResult
    forecast: EvalResult
    nodes: np.ndarray
    models: dict
    data: NetworkData
    split: Split
    seconds: dict

    @property
    def improvement(self) -> float:
        """Relative SMAPE reduction of the one-hop model over the pure model."""
        return 1.0 - self.imputation.smape / self.nonet.smape


def nodes_with_neighbors(data: NetworkData, origin: int, horizon: int) -> np.ndarray:
    """Nodes with at least one in-neighbor somewhere in the forecast window."""
    a = [len(data.graph.presence_counts(j, origin, origin + horizon)[0]) > 0 for j in range(data.N)]
    return np.flatnonzero(a)


def run_network_effect(cfg: NetworkEffectConfig, log=None) -> NetworkEffectResult:
    sd = generate(cfg.synth)
    data = NetworkData(sd.panel, sd.graph)
    F = cfg.model.horizon
    split = Split.last(data.T, F)
    seconds = {}
    models = {}
    for hops in (0, 1):
        mc = replace(cfg.model, hops=hops)
        model = Radflow.initialize(mc, cfg.seed)
        t0 = time.perf_counter()
        fit(model, data, split, replace(cfg.optim, seed=cfg.seed), on_step=log)
        seconds[f"train_hops{hops}"] = time.perf_counter() - t0
        models[hops] = model
    nodes = nodes_with_neighbors(data, split.test_origin, F)
    origin = split.test_origin
    nonet = evaluate(models[0], data, origin, "imputation", nodes=nodes)
    imp = evaluate(models[1], data, origin, "imputation", nodes=nodes)
    nb = pure_forecasts(models[0], data, origin)
    fc = evaluate(models[1], data, origin, "forecast", nodes=nodes, neighbor_forecasts=nb)
    return NetworkEffectResult(nonet, imp, fc, nodes, models, data, split, seconds)


# --------------------------------------------------------------------------
# static traffic network (Los-loop layout: speed matrix plus adjacency)

LOSLOOP_FILES = ("los_speed.csv", "los_adj.csv")
LOSLOOP_HORIZON = 12


def load_losloop(directory) -> NetworkData | None:
    """Load the sensor network from ``directory``; None when the files are absent."""
    from pathlib import Path

    from .graph import read_matrix_adjacency

    paths = [Path(directory) / f for f in LOSLOOP_FILES]
    if not all(p.exists() for p in paths):
        return None
    panel, graph = read_matrix_adjacency(*paths)
    return NetworkData(panel, graph)


def losloop_copy_baseline(data: NetworkData):
    """Repeat the last observed speed over the final hour."""
    from .evaluation import baseline_copy_step, metric_report

    origin = data.T - LOSLOOP_HORIZON
    preds = baseline_copy_step(data.raw[:, :origin], LOSLOOP_HORIZON)
    return metric_report(preds, data.raw[:, origin:])


@dataclass
class LosloopConfig:
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(backcast=36, horizon=LOSLOOP_HORIZON, hidden=32, layers=4, heads=4,
                                            dropout=0.1)
    )
    optim: OptimConfig = field(
        default_factory=lambda: OptimConfig(
            peak_lr=2e-3, warmup_steps=500, epochs=4, steps_per_epoch=1500, batch_size=32,
            clip_norm=1.0, precision="float32",
        )
    )
    seed: int = 0


def run_losloop(data: NetworkData, cfg: LosloopConfig | None = None, log=None) -> dict:
    """Train the pure and one-hop models and score both on the final hour.
    The one-hop model sees neighbor forecasts from the pure model."""
    cfg = cfg or LosloopConfig()
    F = cfg.model.horizon
    split = Split.last(data.T, F)
    origin = split.test_origin
    out = {}
    models = {}
    for hops in (0, 1):
        model = Radflow.initialize(replace(cfg.model, hops=hops), cfg.seed)
        t0 = time.perf_counter()
        fit(model, data, split, replace(cfg.optim, seed=cfg.seed), on_step=log)
        out[f"seconds_hops{hops}"] = time.perf_counter() - t0
        models[hops] = model
    out["nonet"] = evaluate(models[0], data, origin, "imputation").report
    nb = pure_forecasts(models[0], data, origin)
    out["radflow"] = evaluate(models[1], data, origin, "forecast", neighbor_forecasts=nb).report
    return out
