"""Command-line entry points.

    radflow <command> --config run.yaml [--seed N] [--out DIR]
            [--setting imputation|forecast] [--hops 0|1|2]
            [--variant attention|graphsage|meanpool]

Every command writes its fully resolved configuration to
``DIR/config.resolved.yaml``; feeding that file back reproduces the outputs.
Exit status is 0 on success, 2 for configuration errors and 3 for data errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .batching import NetworkData, Split
from .evaluation import (
    attention_correlation,
    attention_records,
    counterfactual_double,
    evaluate,
    layer_contributions,
    network_contribution,
    popularity_buckets,
    robustness_sweep,
)
from .graph import DataFormatError, _atomic_write, load_edges, load_panel, read_matrix_adjacency, save_edges, save_panel
from .model import CheckpointError, Radflow
from .recurrent import ConfigError, ModelConfig
from .synth import SynthConfig, generate
from .training import OptimConfig, TrainingDiverged, fit

log = logging.getLogger("radflow")

COMMANDS = ("ingest", "train", "eval", "forecast", "decompose", "attention", "perturb", "synth")
PANEL_FILE = "panel.bin"
EDGES_FILE = "edges.txt"
CHECKPOINT_FILE = "model.ckpt"


@dataclass
class RunConfig:
    """Flat run configuration: model, optimizer and synthetic-data keys live at
    the top level next to the run options below. ``seed`` seeds training,
    sampling and data generation alike."""

    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0
    out: str = "run"
    # data
    source: str = "panel"  # ingest source: panel | losloop | sztaxi
    panel: str | None = None
    edges: str | None = None
    speed_csv: str | None = None
    adj_csv: str | None = None
    prune: bool = True
    # time split; unset values default to the final F steps for test and
    # the F steps before them for validation
    train_end: int | None = None
    val_origin: int | None = None
    test_origin: int | None = None
    # evaluation
    setting: str = "imputation"
    eval_hops: int | None = None
    checkpoint: str | None = None
    neighbor_checkpoint: str | None = None
    nodes: list | None = None
    nonzero: bool = False
    # analysis
    value_fractions: list = field(default_factory=list)
    edge_fractions: list = field(default_factory=list)
    counterfactuals: list = field(default_factory=list)  # [ego, neighbor, day] triples

    @classmethod
    def run_keys(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name not in ("model", "optim", "synth")]

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        groups = {
            "model": {f.name for f in fields(ModelConfig)},
            "optim": {f.name for f in fields(OptimConfig)} - {"seed"},
            "synth": {f.name for f in fields(SynthConfig)} - {"seed"},
        }
        run_keys = set(cls.run_keys())
        parts: dict = {k: {} for k in groups}
        top: dict = {}
        for key, value in d.items():
            owner = [g for g, names in groups.items() if key in names]
            if owner:
                parts[owner[0]][key] = value
            elif key in run_keys:
                top[key] = value
            else:
                raise ConfigError(f"unknown config key: {key!r}")
        seed = int(top.get("seed", 0))
        try:
            cfg = cls(
                model=ModelConfig(**parts["model"]),
                optim=OptimConfig(seed=seed, **parts["optim"]),
                synth=SynthConfig(seed=seed, **parts["synth"]),
                **top,
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.source not in ("panel", "losloop", "sztaxi"):
            raise ConfigError("source must be panel, losloop or sztaxi")
        if self.setting not in ("imputation", "forecast"):
            raise ConfigError("setting must be imputation or forecast")
        if self.eval_hops is not None and self.eval_hops not in (0, 1, 2):
            raise ConfigError("eval_hops must be 0, 1 or 2")
        for f in list(self.value_fractions) + list(self.edge_fractions):
            if not 0.0 <= float(f) <= 1.0:
                raise ConfigError(f"fraction {f} outside [0, 1]")
        for c in self.counterfactuals:
            if len(c) != 3:
                raise ConfigError("counterfactuals are [ego, neighbor, day] triples")

    def to_dict(self) -> dict:
        d = {}
        d.update(self.model.to_dict())
        d.update({k: v for k, v in self.optim.to_dict().items() if k != "seed"})
        d.update({k: v for k, v in self.synth.to_dict().items() if k != "seed"})
        for k in self.run_keys():
            v = getattr(self, k)
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["seed"] = seed
        return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    return RunConfig.from_dict(raw)


def apply_overrides(cfg: RunConfig, args, command: str) -> RunConfig:
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    if args.setting is not None:
        d["setting"] = args.setting
    if args.variant is not None:
        d["variant"] = args.variant
    if args.hops is not None:
        # training builds a model with that many hops; the other commands
        # evaluate an existing one with that many
        if command == "train":
            d["hops"] = args.hops
        else:
            d["eval_hops"] = args.hops
    return RunConfig.from_dict(d)


# --------------------------------------------------------------------------
# outputs


def write_text(path: Path, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


def write_csv(path: Path, header_comment: str, columns: list[str], rows) -> None:
    buf = io.StringIO()
    for line in header_comment.strip().splitlines():
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    write_text(path, buf.getvalue())


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_jsonl(path: Path, records) -> None:
    write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.resolved.yaml", yaml.safe_dump(cfg.to_dict(), sort_keys=True))


# --------------------------------------------------------------------------
# data and checkpoints


def load_data(cfg: RunConfig) -> NetworkData:
    out = Path(cfg.out)
    panel_path = Path(cfg.panel) if cfg.panel else out / PANEL_FILE
    edges_path = Path(cfg.edges) if cfg.edges else out / EDGES_FILE
    if not panel_path.exists():
        raise DataFormatError(f"panel file not found: {panel_path}")
    panel = load_panel(panel_path)
    if edges_path.exists():
        graph = load_edges(edges_path, panel.N, panel.T)
    elif cfg.edges:
        raise DataFormatError(f"edges file not found: {edges_path}")
    else:
        from .graph import DynamicGraph

        graph = DynamicGraph(panel.N, panel.T)
    return NetworkData(panel, graph, cfg.prune)


def resolve_split(cfg: RunConfig, T_: int, model_cfg: ModelConfig) -> Split:
    F = model_cfg.horizon
    default = Split.last(T_, F)
    split = Split(
        train_end=default.train_end if cfg.train_end is None else cfg.train_end,
        val_origin=default.val_origin if cfg.val_origin is None else cfg.val_origin,
        test_origin=default.test_origin if cfg.test_origin is None else cfg.test_origin,
    )
    if max(split.train_end, split.val_origin + F, split.test_origin + F) > T_:
        raise ConfigError(f"split {split} exceeds the series length {T_}")
    split.check(T_, model_cfg.backcast, F)
    return split


def load_model(cfg: RunConfig, path=None) -> Radflow:
    p = Path(path or cfg.checkpoint or Path(cfg.out) / CHECKPOINT_FILE)
    if not p.exists():
        raise DataFormatError(f"checkpoint not found: {p}")
    model = Radflow.load(p)
    mc = model.config
    if cfg.model.variant != mc.variant and cfg.model.hops and mc.hops:
        raise ConfigError(f"config asks for variant {cfg.model.variant} but the checkpoint is {mc.variant}")
    hops = mc.hops if cfg.eval_hops is None else cfg.eval_hops
    if hops > mc.hops:
        raise ConfigError(f"checkpoint aggregates {mc.hops} hops, asked for {hops}")
    return model


def _eval_hops(cfg: RunConfig, model: Radflow) -> int:
    return model.config.hops if cfg.eval_hops is None else cfg.eval_hops


def _nodes(cfg: RunConfig, data: NetworkData):
    if cfg.nodes is None:
        return np.arange(data.N)
    nodes = np.asarray(cfg.nodes, dtype=np.int64)
    if ((nodes < 0) | (nodes >= data.N)).any():
        raise ConfigError("node id out of range")
    return nodes


def _run_eval(cfg: RunConfig, model: Radflow, data: NetworkData, origin: int):
    hops = _eval_hops(cfg, model)
    nb_model = None
    if cfg.setting == "forecast" and hops > 0:
        if not cfg.neighbor_checkpoint:
            raise ConfigError("the forecast setting needs neighbor_checkpoint (a model without aggregation)")
        nb_model = load_model(RunConfig.from_dict({**cfg.to_dict(), "eval_hops": 0}), cfg.neighbor_checkpoint)
        if nb_model.config.hops:
            raise ConfigError("neighbor_checkpoint must be a model without aggregation")
    return evaluate(model, data, origin, cfg.setting, hops, _nodes(cfg, data), neighbor_model=nb_model,
                    nonzero=cfg.nonzero)


# --------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    if cfg.source in ("losloop", "sztaxi"):
        if not cfg.speed_csv or not cfg.adj_csv:
            raise ConfigError("ingest needs speed_csv and adj_csv")
        for p in (cfg.speed_csv, cfg.adj_csv):
            if not Path(p).exists():
                raise DataFormatError(f"source file not found: {p}")
        panel, graph = read_matrix_adjacency(cfg.speed_csv, cfg.adj_csv)
    else:
        if not cfg.panel:
            raise ConfigError("ingest from a panel needs the panel path")
        data = load_data(cfg)
        panel, graph = data.panel, data.graph
    save_panel(panel, out / PANEL_FILE)
    save_edges(graph, out / EDGES_FILE)
    report = {"source": cfg.source, "N": panel.N, "T": panel.T, "D": panel.D, "edges": len(graph),
              "missing_rate": panel.missing_rate()}
    write_text(out / "ingest_report.json", json.dumps(report, sort_keys=True) + "\n")
    log.info("ingested %s", report)


def cmd_synth(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    sd = generate(cfg.synth)
    save_panel(sd.panel, out / PANEL_FILE)
    save_edges(sd.graph, out / EDGES_FILE)
    N = sd.influence.shape[0]
    rows = [(i, j, sd.influence[i, j]) for i in range(N) for j in range(N) if sd.influence[i, j] > 0]
    write_csv(out / "influence.csv", "ground-truth mean influence weight of source on target over time",
              ["source", "target", "weight"], rows)


def cmd_train(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    data = load_data(cfg)
    split = resolve_split(cfg, data.T, cfg.model)
    model = Radflow.initialize(cfg.model, cfg.seed)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    res = fit(model, data, split, cfg.optim, nodes=_nodes(cfg, data), log_path=out / "train_log.jsonl",
              checkpoint_dir=ckpt_dir)
    model.save(out / CHECKPOINT_FILE)
    summary = {"best_epoch": res.best_epoch, "val_smape": res.val_history, "steps": len(res.log)}
    write_text(out / "train_summary.json", json.dumps(summary, sort_keys=True) + "\n")


def _report_files(out: Path, r, tag: str) -> None:
    write_text(out / f"metrics_{tag}.json", json.dumps({**r.report.summary(), "setting": r.setting, "hops": r.hops,
                                                         "origin": r.origin}, sort_keys=True) + "\n")
    rep = r.report
    write_csv(out / f"metrics_{tag}_per_node.csv", "per-node SMAPE, RMSE and MAE over the test horizon",
              ["node", "smape", "rmse", "mae"],
              zip(rep.node_ids.tolist(), rep.node_smape, rep.node_rmse, rep.node_mae))


def cmd_eval(cfg: RunConfig) -> None:
    data = load_data(cfg)
    model = load_model(cfg)
    split = resolve_split(cfg, data.T, model.config)
    r = _run_eval(cfg, model, data, split.test_origin)
    _report_files(Path(cfg.out), r, "test")


def cmd_forecast(cfg: RunConfig) -> None:
    data = load_data(cfg)
    model = load_model(cfg)
    split = resolve_split(cfg, data.T, model.config)
    r = _run_eval(cfg, model, data, split.test_origin)
    rows = []
    for i, node in enumerate(r.nodes.tolist()):
        for k in range(r.forecast.shape[1]):
            for d in range(r.forecast.shape[2]):
                rows.append((node, split.test_origin + k, d, r.forecast[i, k, d], r.truth[i, k, d]))
    write_csv(Path(cfg.out) / "forecast.csv", f"raw-scale forecasts, {cfg.setting} setting",
              ["node", "step", "dim", "forecast", "truth"], rows)


def cmd_decompose(cfg: RunConfig) -> None:
    data = load_data(cfg)
    model = load_model(cfg)
    split = resolve_split(cfg, data.T, model.config)
    r = _run_eval(cfg, model, data, split.test_origin)
    L = model.config.layers
    ci = layer_contributions(r.layers)  # (L, F, 3)
    mean_layers = r.layers.mean(axis=(1, 3))  # (L, F)
    recurrent = r.recurrent.mean(axis=(0, 2))  # (F,)
    F = recurrent.shape[0]
    write_csv(Path(cfg.out) / "decompose.csv",
              "mean log-space forecast contribution of each block per horizon step across nodes;\n"
              "the layer columns sum to the recurrent column",
              ["step"] + [f"layer_{l}" for l in range(L)] + ["recurrent"],
              [[k] + list(mean_layers[:, k]) + [recurrent[k]] for k in range(F)])
    write_csv(Path(cfg.out) / "decompose_ci.csv",
              "per-block mean contribution with 95% normal interval across nodes",
              ["layer", "step", "mean", "lower", "upper"],
              [(l, k, *ci[l, k]) for l in range(L) for k in range(F)])


def cmd_attention(cfg: RunConfig) -> None:
    data = load_data(cfg)
    model = load_model(cfg)
    split = resolve_split(cfg, data.T, model.config)
    r = _run_eval(cfg, model, data, split.test_origin)
    out = Path(cfg.out)
    recs = attention_records(r)
    write_csv(out / "attention.csv", "head-averaged attention of each ego on each present neighbor per step",
              ["ego", "origin", "step", "neighbor", "score", "null_score"],
              [(x["ego"], x["origin"], x["step"], x["neighbor"], x["score"], x["null_score"]) for x in recs])
    corr = attention_correlation(r, data) if r.scores is not None else []
    write_csv(out / "correlation.csv",
              "correlation of ego and neighbor series over the horizon against mean attention;\n"
              "constant series have no correlation and are flagged",
              ["ego", "neighbor", "correlation", "attention", "constant"],
              [(x["ego"], x["neighbor"], x["correlation"], x["attention"], int(x["constant"])) for x in corr])
    contrib = network_contribution(r.recurrent, r.network)
    buckets = popularity_buckets(data.raw, r.nodes, 0, split.test_origin)
    mean_raw = data.raw[r.nodes, : split.test_origin].reshape(len(r.nodes), -1).mean(axis=1)
    write_csv(out / "contribution.csv",
              "network share of each forecast: horizon mean of |v_A| / (|v_R| + |v_A| + 1e-8) with both\n"
              "terms in log space, against node popularity (mean raw value before the test window)",
              ["node", "contribution", "mean_value", "log10_bucket"],
              zip(r.nodes.tolist(), contrib, mean_raw, buckets.tolist()))


def cmd_perturb(cfg: RunConfig) -> None:
    data = load_data(cfg)
    model = load_model(cfg)
    split = resolve_split(cfg, data.T, model.config)
    hops = _eval_hops(cfg, model)
    out = Path(cfg.out)
    if cfg.setting != "imputation":
        raise ConfigError("perturbation runs use the imputation setting")
    points = robustness_sweep(model, data, split.test_origin, [float(f) for f in cfg.value_fractions],
                              [float(f) for f in cfg.edge_fractions], seed=cfg.seed, nodes=_nodes(cfg, data),
                              hops=hops)
    write_csv(out / "robustness.csv", "test SMAPE after deleting a random fraction of values or edges",
              ["kind", "fraction", "smape"], [(p.kind, p.fraction, p.smape) for p in points])
    try:
        recs = [counterfactual_double(model, data, int(e), int(n), int(d), split.test_origin, hops)
                for e, n, d in cfg.counterfactuals]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cols = ["ego", "origin", "step", "neighbor", "score_before", "score_after", "delta_score",
            "forecast_before", "forecast_after", "delta_forecast"]
    write_csv(out / "counterfactual.csv",
              "attention on a neighbor and the ego forecast before and after doubling the neighbor's value",
              cols, [[r[c] for c in cols] for r in recs])


HANDLERS = {
    "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval, "forecast": cmd_forecast,
    "decompose": cmd_decompose, "attention": cmd_attention, "perturb": cmd_perturb, "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="radflow", description="networked time series forecasting")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="YAML run configuration")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--setting", choices=("imputation", "forecast"))
    ap.add_argument("--hops", type=int, choices=(0, 1, 2))
    ap.add_argument("--variant", choices=("attention", "graphsage", "meanpool"))
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args, args.command)
        echo_config(cfg, Path(cfg.out))
        HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, CheckpointError, FileNotFoundError, TrainingDiverged) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
