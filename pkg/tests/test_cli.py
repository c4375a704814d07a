import hashlib
import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from crbmsim import cli
from crbmsim import model_io
from crbmsim import schema as sc


def _write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """synth -> ingest -> train on a small cohort; returns the directories."""
    root = tmp_path_factory.mktemp("cli")
    env = {}
    d = {k: root / k for k in ("synth", "ingest", "train")}
    synth_cfg = _write(root / "synth.yaml", "n_patients: 150\nmissing_rate: 0.15\n")
    assert cli.main(["synth", "--config", synth_cfg, "--seed", "3", "--out", str(d["synth"])], env) == 0
    assert cli.main(["ingest", "--input", str(d["synth"] / "events.csv"), "--seed", "3",
                     "--out", str(d["ingest"])], env) == 0
    train_cfg = _write(root / "train.cfg", "epochs: 2\nbatch_size: 50\nmc_steps_sampling: 5\ncheckpoint_every: 1\n")
    assert cli.main(["train", "--dataset", str(d["ingest"]), "--config", train_cfg, "--seed", "3",
                     "--out", str(d["train"])], env) == 0
    d["root"] = root
    return d


def _manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_derive_seed():
    expect = int.from_bytes(hashlib.sha256(b"7:training").digest()[:8], "big") % 2 ** 63
    assert cli.derive_seed(7, "training") == expect
    assert cli.derive_seed(7, "training") != cli.derive_seed(7, "simulate")
    assert cli.derive_seed(7, "training") != cli.derive_seed(8, "training")


def test_synth_and_ingest_outputs(run):
    ev = pd.read_csv(run["synth"] / "events.csv", nrows=5)
    assert list(ev.columns) == ["patient_id", "variable", "day", "value"]
    m = _manifest(run["synth"])
    assert m["command"] == "synth" and m["seed"] == 3
    assert m["module_seeds"]["synthgen"] == cli.derive_seed(3, "synthgen")
    assert m["config"]["seed"] == cli.derive_seed(3, "synthgen")
    m = _manifest(run["ingest"])
    counts = m["split_counts"]
    n = sum(counts.values())
    assert counts["train"] == int(np.floor(0.7 * n + 1e-9))
    ds = cli.load_dataset(run["ingest"])
    assert len(ds.cohort) == n


def test_train_outputs(run):
    m = _manifest(run["train"])
    assert m["config"]["epochs"] == 2 and m["config"]["seed"] == cli.derive_seed(3, "training")
    assert sorted(p.name for p in (run["train"] / "checkpoints").iterdir()) == ["model_00001.npz", "model_00002.npz"]
    mon = pd.read_csv(run["train"] / "monitor.csv")
    assert list(mon["epoch"]) == [0, 1]
    b = model_io.load(run["train"] / "model.npz")
    j = model_io.import_json((run["train"] / "model.json").read_text())
    np.testing.assert_array_equal(b.model.params.W, j.model.params.W)
    for key in ("schema_hash", "schema_version", "tool_version", "config_hash", "started", "finished", "inputs"):
        assert key in m
    assert m["schema_hash"] == sc.build_schema().hash()


def test_default_config_values():
    cfg = cli.load_config(Path(__file__).parents[1] / "configs" / "default.cfg")
    assert (cfg["epochs"], cfg["batch_size"], cfg["gamma"]) == (2000, 100, 0.3)


def test_simulate_conditional_and_generative(run):
    out = run["root"] / "simc"
    args = ["simulate", "--model", str(run["train"] / "model.npz"), "--dataset", str(run["ingest"]),
            "--n", "3", "--n-draws", "4", "--out", str(out), "--seed", "3"]
    assert cli.main(args, {}) == 0
    traj = pd.read_csv(out / "trajectories.csv")
    assert list(traj.columns) == ["patient_id", "draw", "month", "variable", "value", "post_dropout"]
    assert traj["patient_id"].nunique() == 3 and set(traj["draw"]) == {0, 1, 2, 3}
    summ = pd.read_csv(out / "summary.csv")
    assert {"mean", "std", "q05", "q95"} <= set(summ.columns)
    gen = run["root"] / "simg"
    assert cli.main(["simulate", "--mode", "generative", "--n", "5", "--model", str(run["train"] / "model.npz"),
                     "--out", str(gen)], {}) == 0
    assert pd.read_csv(gen / "trajectories.csv")["patient_id"].nunique() == 5


def test_simulate_idempotent(run):
    outs = []
    for k in range(2):
        out = run["root"] / f"idem{k}"
        assert cli.main(["simulate", "--model", str(run["train"] / "model.npz"), "--dataset", str(run["ingest"]),
                         "--n", "2", "--n-draws", "3", "--out", str(out)], {}) == 0
        outs.append((out / "trajectories.csv").read_bytes())
    assert outs[0] == outs[1]


def test_env_overrides(run, tmp_path):
    cfg = _write(tmp_path / "s.yaml", "n_patients: 20\n")
    env = {"CRBMSIM_CONFIG": cfg, "CRBMSIM_SEED": "11", "CRBMSIM_OUT": str(tmp_path / "o"), "CRBMSIM_THREADS": "1"}
    assert cli.main(["synth"], env) == 0
    m = _manifest(tmp_path / "o")
    assert m["seed"] == 11 and m["threads"] == 1 and m["config"]["n_patients"] == 20
    # explicit flags win over the environment
    assert cli.main(["synth", "--seed", "12", "--out", str(tmp_path / "p")], env) == 0
    assert _manifest(tmp_path / "p")["seed"] == 12
    assert cli.main(["synth"], {**env, "CRBMSIM_SEED": "abc"}) == 2


def test_error_codes(run, tmp_path):
    out = tmp_path / "e"
    assert cli.main(["ingest", "--input", str(tmp_path / "nope.csv"), "--out", str(out)], {}) == 3
    rec = json.loads((out / "error.json").read_text())
    assert rec["error"] == "MissingInput" and rec["command"] == "ingest"
    assert not (out / "manifest.json").exists()
    bad = _write(tmp_path / "bad.cfg", "learning_rate: 0.1\n")
    assert cli.main(["train", "--dataset", str(run["ingest"]), "--config", bad, "--out", str(out)], {}) == 2
    assert json.loads((out / "error.json").read_text())["error"] == "ConfigInvalid"
    assert cli.main(["synth", "--config", _write(tmp_path / "l.yaml", "[1, 2]\n"), "--out", str(out)], {}) == 2
    assert cli.main(["simulate", "--model", str(run["train"] / "model.npz"), "--dataset", str(run["ingest"]),
                     "--config", _write(tmp_path / "m.yaml", "mode: sideways\n"), "--out", str(out)], {}) == 2


def test_schema_mismatch_exit_code(run, tmp_path):
    sub = tmp_path / "sub"
    cfg = _write(tmp_path / "d.yaml", "variables: [ADAS Word Recall, Weight, Sex]\nselect: false\n")
    assert cli.main(["ingest", "--input", str(run["synth"] / "events.csv"), "--config", cfg,
                     "--out", str(sub)], {}) == 0
    out = tmp_path / "x"
    assert cli.main(["simulate", "--model", str(run["train"] / "model.npz"), "--dataset", str(sub),
                     "--out", str(out)], {}) == 4
    assert json.loads((out / "error.json").read_text())["error"] == "SchemaMismatch"
