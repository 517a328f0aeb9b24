import csv

import numpy as np
import pytest
import yaml

from radflow.cli import RunConfig, main
from radflow.graph import load_edges
from radflow.model import Radflow

TINY = dict(
    n_nodes=8, n_steps=60, edge_density=2.0, churn=0.05, level_low=2.0, level_high=8.0,
    backcast=14, horizon=7, hidden=8, layers=2, heads=2, dropout=0.0,
    epochs=1, steps_per_epoch=6, batch_size=4, warmup_steps=2, peak_lr=1e-3,
)


def write_cfg(path, **kw):
    d = dict(TINY)
    d.update(kw)
    path.write_text(yaml.safe_dump(d))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.reader(lines))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("synth", "--config", write_cfg(root / "s.yaml"), "--out", data, "--seed", 5) == 0
    panel, edges = data / "panel.bin", data / "edges.txt"
    cfg = write_cfg(root / "t.yaml", panel=str(panel), edges=str(edges))
    m0, m1 = root / "m0", root / "m1"
    assert run("train", "--config", cfg, "--out", m0, "--hops", 0) == 0
    assert run("train", "--config", cfg, "--out", m1, "--hops", 1) == 0
    return dict(root=root, data=data, panel=panel, edges=edges, cfg=cfg, m0=m0, m1=m1)


# ---------------------------------------------------------------- exit codes


def test_config_errors_exit_2(tmp_path):
    assert run("eval", "--config", tmp_path / "missing.yaml", "--out", tmp_path) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"hidden_size": 3}))
    assert run("train", "--config", bad, "--out", tmp_path) == 2
    assert run("train", "--config", write_cfg(tmp_path / "h.yaml", hidden=7), "--out", tmp_path) == 2
    assert run("eval", "--config", write_cfg(tmp_path / "f.yaml", edge_fractions=[1.5]), "--out", tmp_path) == 2
    assert run("frobnicate", "--out", tmp_path) == 2
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    assert run("eval", "--config", tmp_path / "list.yaml", "--out", tmp_path) == 2


def test_data_errors_exit_3(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml")
    assert run("train", "--config", cfg, "--out", tmp_path / "nodata") == 3
    (tmp_path / "junk.bin").write_bytes(b"not a panel")
    assert run("train", "--config", write_cfg(tmp_path / "j.yaml", panel=str(tmp_path / "junk.bin")),
               "--out", tmp_path / "j") == 3


def test_checkpoint_errors(trained, tmp_path):
    # evaluation without a checkpoint is a data error
    assert run("eval", "--config", trained["cfg"], "--out", tmp_path) == 3
    # asking a hops=0 checkpoint for aggregation is a config error
    cfg = write_cfg(tmp_path / "c.yaml", panel=str(trained["panel"]), edges=str(trained["edges"]),
                    checkpoint=str(trained["m0"] / "model.ckpt"))
    assert run("eval", "--config", cfg, "--out", tmp_path, "--hops", 1) == 2
    # the forecast setting needs a neighbor model
    cfg = write_cfg(tmp_path / "d.yaml", panel=str(trained["panel"]), edges=str(trained["edges"]),
                    checkpoint=str(trained["m1"] / "model.ckpt"))
    assert run("eval", "--config", cfg, "--out", tmp_path, "--setting", "forecast") == 2
    # a test window beyond the data
    cfg = write_cfg(tmp_path / "e.yaml", panel=str(trained["panel"]), edges=str(trained["edges"]),
                    checkpoint=str(trained["m1"] / "model.ckpt"), test_origin=58)
    assert run("eval", "--config", cfg, "--out", tmp_path) == 2


# ---------------------------------------------------------------- commands


def test_train_outputs(trained):
    m1 = trained["m1"]
    for name in ("model.ckpt", "train_log.jsonl", "train_summary.json", "config.resolved.yaml"):
        assert (m1 / name).exists()
    echoed = yaml.safe_load((m1 / "config.resolved.yaml").read_text())
    assert echoed["hops"] == 1 and echoed["hidden"] == 8 and echoed["seed"] == 0
    assert set(echoed) == set(RunConfig.from_dict({}).to_dict())
    assert Radflow.load(m1 / "model.ckpt").config.hops == 1


def test_same_seed_identical_metric_files(trained, tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", panel=str(trained["panel"]), edges=str(trained["edges"]))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("train", "--config", cfg, "--out", out, "--hops", 1, "--seed", 3) == 0
        assert run("eval", "--config", out / "config.resolved.yaml", "--out", out) == 0
        outs.append(out)
    for f in ("metrics_test.json", "metrics_test_per_node.csv", "train_summary.json", "model.ckpt"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_hops0_settings_give_identical_reports(trained, tmp_path):
    base = dict(panel=str(trained["panel"]), edges=str(trained["edges"]), checkpoint=str(trained["m0"] / "model.ckpt"))
    files = {}
    for setting in ("imputation", "forecast"):
        out = tmp_path / setting
        assert run("eval", "--config", write_cfg(tmp_path / f"{setting}.yaml", **base), "--out", out,
                   "--setting", setting) == 0
        files[setting] = out
    a = yaml.safe_load((files["imputation"] / "metrics_test.json").read_text())
    b = yaml.safe_load((files["forecast"] / "metrics_test.json").read_text())
    a.pop("setting"), b.pop("setting")
    assert a == b
    assert (files["imputation"] / "metrics_test_per_node.csv").read_bytes() == (
        files["forecast"] / "metrics_test_per_node.csv").read_bytes()


def test_forecast_setting_with_neighbor_model(trained, tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", panel=str(trained["panel"]), edges=str(trained["edges"]),
                    checkpoint=str(trained["m1"] / "model.ckpt"),
                    neighbor_checkpoint=str(trained["m0"] / "model.ckpt"))
    assert run("forecast", "--config", cfg, "--out", tmp_path, "--setting", "forecast") == 0
    rows = read_csv(tmp_path / "forecast.csv")
    assert rows[0] == ["node", "step", "dim", "forecast", "truth"]
    assert len(rows) - 1 == 8 * 7
    assert all(float(r[3]) >= 0 for r in rows[1:])


def test_meanpool_routing(trained, tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", panel=str(trained["panel"]), edges=str(trained["edges"]))
    out = tmp_path / "mp"
    assert run("train", "--config", cfg, "--out", out, "--variant", "meanpool", "--hops", 1) == 0
    m = Radflow.load(out / "model.ckpt")
    assert m.config.variant == "meanpool" and m.config.hops == 1
    assert m.config.direct_combine
    agg = sorted(k for k in m.params if k.startswith("agg."))
    assert agg == ["agg.W_A"]


def test_decompose_reconstructs_recurrent(trained, tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", panel=str(trained["panel"]), edges=str(trained["edges"]),
                    checkpoint=str(trained["m1"] / "model.ckpt"))
    assert run("decompose", "--config", cfg, "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "decompose.csv")
    assert rows[0] == ["step", "layer_0", "layer_1", "recurrent"]
    body = np.array(rows[1:], dtype=float)
    assert body.shape == (7, 4)
    np.testing.assert_allclose(body[:, 1:3].sum(axis=1), body[:, 3], rtol=0, atol=1e-6)
    ci = np.array(read_csv(tmp_path / "decompose_ci.csv")[1:], dtype=float)
    assert ci.shape == (2 * 7, 5)
    assert (ci[:, 3] <= ci[:, 2]).all() and (ci[:, 2] <= ci[:, 4]).all()
    assert (tmp_path / "decompose.csv").read_text().startswith("# ")


def test_attention_exports(trained, tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", panel=str(trained["panel"]), edges=str(trained["edges"]),
                    checkpoint=str(trained["m1"] / "model.ckpt"))
    assert run("attention", "--config", cfg, "--out", tmp_path) == 0
    att = read_csv(tmp_path / "attention.csv")
    assert att[0] == ["ego", "origin", "step", "neighbor", "score", "null_score"]
    for r in att[1:]:
        assert 0.0 <= float(r[4]) <= 1.0 and 0.0 <= float(r[5]) <= 1.0
    contrib = np.array(read_csv(tmp_path / "contribution.csv")[1:], dtype=float)
    assert contrib.shape == (8, 4)
    assert ((contrib[:, 1] >= 0) & (contrib[:, 1] < 1)).all()
    assert read_csv(tmp_path / "correlation.csv")[0] == ["ego", "neighbor", "correlation", "attention", "constant"]


def test_perturb_outputs(trained, tmp_path):
    base = dict(panel=str(trained["panel"]), edges=str(trained["edges"]), checkpoint=str(trained["m1"] / "model.ckpt"))
    empty = tmp_path / "empty"
    assert run("perturb", "--config", write_cfg(tmp_path / "e.yaml", **base), "--out", empty) == 0
    assert read_csv(empty / "robustness.csv") == [["kind", "fraction", "smape"]]
    assert read_csv(empty / "counterfactual.csv")[1:] == []
    # a pair linked over the whole test window (the last 7 of 60 steps)
    g = load_edges(trained["edges"], 8, 60)
    src, dst = next((int(e[0]), int(e[1])) for e in g.edges if e[2] <= 53 and e[3] == 60)
    full = tmp_path / "full"
    cfg = write_cfg(tmp_path / "f.yaml", **base, edge_fractions=[0.0, 1.0], value_fractions=[0.5],
                    counterfactuals=[[dst, src, 2]])
    assert run("perturb", "--config", cfg, "--out", full) == 0
    rows = read_csv(full / "robustness.csv")[1:]
    assert [(r[0], float(r[1])) for r in rows] == [("values", 0.5), ("edges", 0.0), ("edges", 1.0)]
    cf = read_csv(full / "counterfactual.csv")
    assert len(cf) == 2 and cf[1][0] == str(dst) and cf[1][3] == str(src)
    # a pair that is not linked is a config error
    cfg = write_cfg(tmp_path / "g.yaml", **base, counterfactuals=[[dst, dst, 2]])
    assert run("perturb", "--config", cfg, "--out", tmp_path / "bad") == 2


def test_ingest_is_idempotent(trained, tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", panel=str(trained["panel"]), edges=str(trained["edges"]))
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert run("ingest", "--config", cfg, "--out", out) == 0
    for f in ("panel.bin", "edges.txt", "ingest_report.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    # re-ingesting the ingested files reproduces them
    again = write_cfg(tmp_path / "d.yaml", panel=str(outs[0] / "panel.bin"), edges=str(outs[0] / "edges.txt"))
    assert run("ingest", "--config", again, "--out", tmp_path / "c") == 0
    assert (tmp_path / "c" / "panel.bin").read_bytes() == (outs[0] / "panel.bin").read_bytes()
    assert (tmp_path / "c" / "edges.txt").read_bytes() == (outs[0] / "edges.txt").read_bytes()


def test_matrix_ingest(tmp_path):
    rng = np.random.default_rng(0)
    speed = rng.uniform(10, 60, (30, 4))
    np.savetxt(tmp_path / "speed.csv", speed, delimiter=",", header="a,b,c,d", comments="")
    adj = np.array([[0, 1, 0, 0], [1, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0]], float)
    np.savetxt(tmp_path / "adj.csv", adj, delimiter=",")
    cfg = write_cfg(tmp_path / "c.yaml", source="losloop", speed_csv=str(tmp_path / "speed.csv"),
                    adj_csv=str(tmp_path / "adj.csv"))
    assert run("ingest", "--config", cfg, "--out", tmp_path / "o") == 0
    report = yaml.safe_load((tmp_path / "o" / "ingest_report.json").read_text())
    assert report["N"] == 4 and report["T"] == 30 and report["edges"] == 6
    bad = write_cfg(tmp_path / "b.yaml", source="losloop", speed_csv=str(tmp_path / "nope.csv"),
                    adj_csv=str(tmp_path / "adj.csv"))
    assert run("ingest", "--config", bad, "--out", tmp_path / "o2") == 3


def test_resolved_config_reproduces_outputs(trained, tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", panel=str(trained["panel"]), edges=str(trained["edges"]),
                    checkpoint=str(trained["m1"] / "model.ckpt"), edge_fractions=[0.0, 0.5])
    first = tmp_path / "first"
    assert run("perturb", "--config", cfg, "--out", first, "--seed", 11) == 0
    snapshot = (first / "robustness.csv").read_bytes()
    echoed = first / "config.resolved.yaml"
    assert run("perturb", "--config", echoed) == 0
    assert (first / "robustness.csv").read_bytes() == snapshot
    assert yaml.safe_load(echoed.read_text())["seed"] == 11
