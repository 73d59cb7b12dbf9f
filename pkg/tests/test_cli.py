import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relcast.cli import main, resolve_config, build_parser, splice
from relcast.data import load_dataset

FAST = ["--d", "8", "--layers", "1", "--heads", "2", "--max-epochs", "2", "--fractions", "0.6,0.2,0.2"]


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "ds"
    assert main(["synth-gen", "--n", "20", "--t", "96", "--period", "24", "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture
def small_dataset(tmp_path):
    out = tmp_path / "small"
    assert main(["synth-gen", "--n", "5", "--t", "48", "--period", "12", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_synth_gen_round_trip_and_deterministic(dataset, tmp_path):
    db = load_dataset(dataset)
    assert db.shape == (20, 96, 1) and db.period == 24
    again = tmp_path / "again"
    main(["synth-gen", "--n", "20", "--t", "96", "--period", "24", "--seed", "7", "--out", str(again)])
    for name in ("series.csv", "graph.csv", "meta.json"):
        assert (dataset / name).read_bytes() == (again / name).read_bytes()


def test_synth_gen_period_too_long(tmp_path):
    assert main(["synth-gen", "--period", "200", "--t", "96", "--out", str(tmp_path / "x")]) == 2


def test_synth_gen_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["synth-gen", "--out", str(blocker / "sub")]) != 0


@pytest.mark.parametrize("cmd", ["synth-gen", "retrieve", "train", "infer", "eval", "theory-check"])
def test_every_subcommand_has_help(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_retrieve_json(small_dataset, capsys):
    assert main(["retrieve", "--data", str(small_dataset), "--target", "s3", "--k", "2",
                 "--length", "12"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["c"] == 0.9 and out["target_id"] == "s3"
    refs = out["references"]
    assert len(refs) == 2
    assert refs[0]["score"] >= refs[1]["score"]
    assert "s3" not in {r["series_id"] for r in refs}


def test_retrieve_k_bound(small_dataset):
    assert main(["retrieve", "--data", str(small_dataset), "--target", "s3", "--k", "100", "--length", "12"]) == 2


def test_retrieve_unknown_id(small_dataset, capsys):
    assert main(["retrieve", "--data", str(small_dataset), "--target", "nope", "--length", "12"]) == 2
    assert "nope" in capsys.readouterr().err


def test_retrieve_relations_query(small_dataset, capsys):
    assert main(["retrieve", "--data", str(small_dataset), "--relations", "s0,s1", "--k", "3",
                 "--length", "12", "--c", "0.5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["c"] == 0.5 and len(out["references"]) == 3


# -- config resolution ----------------------------------------------------------

def _parse(argv):
    return build_parser().parse_args(argv)


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "run.yaml"
    cfg_file.write_text("d: 32\nlayers: 3\nr: [0.2, 0.4]\nlr: 0.0001\n")
    cfg = resolve_config(_parse(["train", "--config", str(cfg_file), "--d", "8"]))
    assert cfg.d == 8            # flag beats file
    assert cfg.layers == 3       # file beats default
    assert cfg.heads == 4        # default
    assert cfg.r == (0.2, 0.4) and cfg.lr == (0.0001,)


def test_config_rejects_unknown_keys(tmp_path, dataset):
    cfg_file = tmp_path / "run.yaml"
    cfg_file.write_text("d: 8\ndropout: 0.3\n")
    assert main(["train", "--data", str(dataset), "--config", str(cfg_file)]) == 2


def test_config_rejects_bad_rate(dataset):
    assert main(["train", "--data", str(dataset), "--r", "1.5"]) == 2


def test_train_needs_single_cell(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--k", "1,5", "--out", str(tmp_path / "o")]) == 2


# -- train / infer / eval --------------------------------------------------------

@pytest.fixture
def trained(dataset, tmp_path):
    out = tmp_path / "run"
    code = main(["train", "--data", str(dataset), "--task", "impute", "--r", "0.5", "--k", "3",
                 "--out", str(out), *FAST])
    assert code == 0
    return out


def test_train_writes_artifacts(trained):
    ck = json.loads((trained / "checkpoint.json").read_text())
    assert ck["config"]["model"]["k"] == 3
    assert "stats" in ck["extra"]
    history = json.loads((trained / "history.json").read_text())
    assert len(history) == 2


def _read_completed(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "var_1"]
    return np.array([[float(c) for c in r[1:]] for r in rows[1:]])


def test_infer_impute_splices_observed(trained, dataset, tmp_path):
    db = load_dataset(dataset)
    window = db.snippet("s4", 24, 24).values
    rng = np.random.default_rng(0)
    missing = rng.random(24) < 0.5
    missing[0] = True
    missing[1] = False
    src = tmp_path / "in.csv"
    with open(src, "w") as fh:
        fh.write("t,var_1\n")
        for t in range(24):
            fh.write(f"{24 + t},{'' if missing[t] else repr(float(window[t, 0]))}\n")
    out = tmp_path / "out.csv"
    assert main(["infer", "--checkpoint", str(trained / "checkpoint.json"), "--data", str(dataset),
                 "--target", "s4", "--start", "24", "--input", str(src), "--task", "impute",
                 "--out", str(out)]) == 0
    done = _read_completed(out)
    assert np.all(np.isfinite(done))
    np.testing.assert_array_equal(done[~missing, 0], window[~missing, 0])


def test_infer_generated_mask(trained, dataset, tmp_path):
    out = tmp_path / "out.csv"
    assert main(["infer", "--checkpoint", str(trained / "checkpoint.json"), "--data", str(dataset),
                 "--target", "s2", "--out", str(out)]) == 0
    assert _read_completed(out).shape == (24, 1)


def test_infer_config_mismatch(trained, dataset, tmp_path):
    override = tmp_path / "model.yaml"
    override.write_text("d: 16\n")
    code = main(["infer", "--checkpoint", str(trained / "checkpoint.json"), "--data", str(dataset),
                 "--target", "s2", "--model-config", str(override), "--out", str(tmp_path / "o.csv")])
    assert code == 3


def test_infer_corrupt_checkpoint(trained, dataset, tmp_path):
    path = trained / "checkpoint.json"
    payload = json.loads(path.read_text())
    payload["config"]["model"]["layers"] = 4
    path.write_text(json.dumps(payload))
    assert main(["infer", "--checkpoint", str(path), "--data", str(dataset), "--target", "s2",
                 "--out", str(tmp_path / "o.csv")]) == 3


def test_eval_sweep_rows(dataset, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--data", str(dataset), "--task", "forecast", "--r", "0.2,0.4,0.6,0.8",
                 "--k", "2", "--out", str(out), *FAST]) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["setting", "task", "r", "k", "lr", "seed", "rmse", "mae", "sigma", "delta"]
    assert [float(r["r"]) for r in rows] == [0.2, 0.4, 0.6, 0.8]
    report = json.loads((out / "report.json").read_text())
    assert len(report["cells"]) == 4
    assert main(["theory-check", "--report", str(out / "report.json")]) == 0


def test_eval_from_checkpoint(trained, dataset, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--data", str(dataset), "--task", "impute", "--r", "0.3,0.5", "--k", "3",
                 "--checkpoint", str(trained / "checkpoint.json"), "--out", str(out), *FAST]) == 0
    assert len((out / "sweep.csv").read_text().splitlines()) == 3


def test_theory_check_sigma(capsys):
    assert main(["theory-check", "--sigma", "1.0"]) == 0
    line = json.loads(capsys.readouterr().out)
    assert line["delta"] == pytest.approx(1.41894, abs=1e-5)
    assert line["consistent"]


def test_theory_check_detects_tampering(tmp_path):
    doc = {"cells": [{"theory": {"sigma_hat": 1.0, "delta": 2.0, "mse": 1.0, "v": 1}}]}
    (tmp_path / "r.json").write_text(json.dumps(doc))
    assert main(["theory-check", "--report", str(tmp_path / "r.json")]) == 4


def test_splice_pass_through():
    obs = np.array([[1.0], [np.nan], [3.0]])
    mask = np.array([[1.0], [0.0], [1.0]])
    np.testing.assert_array_equal(splice(obs, np.full((3, 1), 9.0), mask), [[1.0], [9.0], [3.0]])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_splice_keeps_observed_entries(length, v, seed):
    rng = np.random.default_rng(seed)
    truth = rng.normal(size=(length, v))
    mask = (rng.random((length, v)) < 0.5).astype(float)
    observed = np.where(mask == 1, truth, np.nan)
    out = splice(observed, rng.normal(size=(length, v)), mask)
    assert np.all(np.isfinite(out))
    assert np.array_equal(out[mask == 1], truth[mask == 1])
