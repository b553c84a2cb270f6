# Tests for the command-line entry point

import json
import os
from datetime import datetime, timedelta

import numpy as np
import pandas as pd
import pytest

from wearmil import __version__
from wearmil.bags import load_bag_dir
from wearmil.encoder import EMBEDDING_DIM, Embedding, write_embeddings
from wearmil.cli import EXIT_DATA_ERROR, EXIT_OK, EXIT_USAGE, _overrides, build_parser, main
from tests.conftest import TEST_DATA_DIR


def test_help_and_version_exit_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "simulate" in capsys.readouterr().out
    assert main(["--version"]) == EXIT_OK
    assert __version__ in capsys.readouterr().out


def test_usage_errors_exit_two(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["evaluate", "--bags", "b", "--out", "o", "--modalities", "all,xyz"]) == EXIT_USAGE
    assert main(["train", "--bags", "b", "--out", "o", "--horizon", "both"]) == EXIT_USAGE
    capsys.readouterr()


def test_missing_input_exits_one(tmp_path, capsys):
    code = main(["transform", "watch", "--in", str(tmp_path / "absent"), "--out", str(tmp_path / "out")])
    assert code == EXIT_DATA_ERROR
    assert "not found" in capsys.readouterr().err


def test_bad_config_exits_one(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
    code = main(["simulate", "--out", str(tmp_path / "cohort"), "--config", str(config)])
    assert code == EXIT_DATA_ERROR
    assert "unknown key 'learning_rate'" in capsys.readouterr().err


def test_flags_become_overrides():
    parser = build_parser()
    args = parser.parse_args(["--seed", "5", "simulate", "--patients", "7", "--noise-sd", "0", "--out", "x"])
    assert _overrides(args) == {"seed": 5, "simulate": {"n_patients": 7, "noise_sd": 0.0}}
    args = parser.parse_args(["transform", "ecg", "--in", "a", "--out", "b", "--png", "--jobs", "3",
                              "--quality-threshold", "0.5"])
    assert _overrides(args) == {"jobs": 3, "ecg": {"quality_threshold": 0.5, "write_png": True}}
    args = parser.parse_args(["evaluate", "--bags", "b", "--out", "o", "--modalities", "ps, se"])
    assert args.modalities == ["ps", "se"]


def test_simulate_writes_cohort_and_provenance(tmp_path, capsys):
    out = tmp_path / "cohort"
    config = os.path.join(TEST_DATA_DIR, "config_small.json")
    code = main(["simulate", "--config", config, "--patients", "3", "--weeks", "4", "--out", str(out), "--quiet"])
    assert code == EXIT_OK
    assert capsys.readouterr().out == ""
    assessments = pd.read_csv(out / "assessments.csv")
    assert sorted(set(assessments["patient_id"])) == ["P001", "P002", "P003"]
    with open(out / "run.json", encoding="utf-8") as f:
        record = json.load(f)
    assert record["stage"] == "simulate"
    assert record["config"]["seed"] == 7
    assert record["config"]["simulate"]["n_patients"] == 3
    assert record["config"]["bags"]["cap_policy"] == "latest"
    assert record["argv"][0] == "simulate"


def test_seed_flag_overrides_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("WEARMIL_SEED", "11")
    out = tmp_path / "cohort"
    assert main(["simulate", "--weeks", "4", "--patients", "2", "--seed", "4", "--out", str(out), "--quiet"]) == EXIT_OK
    with open(out / "run.json", encoding="utf-8") as f:
        assert json.load(f)["config"]["seed"] == 4


@pytest.fixture
def embedding_dir(tmp_path):
    start = datetime(2024, 1, 8, 9)
    rng = np.random.default_rng(0)
    embeddings = [Embedding(rng.normal(size=EMBEDDING_DIM), k % 3, "P001", start + timedelta(days=7 * k))
                  for k in range(30)]
    write_embeddings(str(tmp_path / "embeddings" / "P001.npz"), embeddings)
    return str(tmp_path / "embeddings")


def test_bag_accepts_cap_and_seed(tmp_path, embedding_dir, capsys):
    assessments = os.path.join(TEST_DATA_DIR, "assessments_small.csv")
    out = tmp_path / "bags"
    code = main(["bag", "--embeddings", embedding_dir, "--assessments", assessments, "--horizon", "m3",
                 "--cap", "512", "--seed", "5", "--out", str(out)])
    assert code == EXIT_OK
    (bag,) = load_bag_dir(str(out), verbose=False)
    assert bag.bag_id == "P001_M3"
    assert bag.n == 14  # weekly instances up to the M3 day

    capped = tmp_path / "capped"
    assert main(["bag", "--embeddings", embedding_dir, "--assessments", assessments, "--horizon", "m3",
                 "--cap", "5", "--seed", "5", "--out", str(capped), "--quiet"]) == EXIT_OK
    (small,) = load_bag_dir(str(capped), verbose=False)
    assert small.n == 5
    assert set(small.instants) <= set(bag.instants)
    with open(capped / "run.json", encoding="utf-8") as f:
        assert json.load(f)["config"]["bags"]["max_instances"] == 5
    capsys.readouterr()
