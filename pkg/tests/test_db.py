"""
Tests for the SQLite run registry
"""
import json

import pytest

import db_schema
from config import ExperimentConfig
from db_schema import record_run, registry_url
from federation import RoundRecord
from utils.db_utils import get_arm_summary, get_round_metrics, get_runs


def make_report(macro_f1, tags=("a", "b")):
    return {
        "arm": "fl_ae",
        "combined": {"macro_f1": macro_f1},
        "per_dataset": {tag: {"macro_f1": macro_f1 / 2} for tag in tags},
        "confusion": [],
        "metadata": {"code_version": "1.0.0"},
    }


def make_records(n):
    return [
        RoundRecord(round=r, client_loss_mean=1.0 / r, client_loss_std=0.1, server_loss=0.9 / r,
                    bytes_down=2 * 100, bytes_up=2 * 100, participants=2)
        for r in range(1, n + 1)
    ]


@pytest.fixture
def url(tmp_path):
    return f"sqlite:///{tmp_path / 'experiments.db'}"


def test_default_url_lives_in_output_dir(tmp_path, monkeypatch):
    monkeypatch.setattr(db_schema, "REGISTRY_URL", "")
    assert registry_url(str(tmp_path)) == f"sqlite:///{tmp_path / 'experiments.db'}"


def test_env_url_wins(tmp_path, monkeypatch):
    monkeypatch.setattr(db_schema, "REGISTRY_URL", "sqlite:///elsewhere.db")
    assert registry_url(str(tmp_path)) == "sqlite:///elsewhere.db"


def test_record_and_list_runs(tmp_path, url):
    cfg = ExperimentConfig(arm="fl_ae", seed=3, output_dir=str(tmp_path))
    first = record_run(url, cfg, make_report(0.6), make_records(3), model_bytes=100, n_clients=2)
    cfg.arm = "conventional"
    second = record_run(url, cfg, make_report(0.7))
    assert second > first

    runs = get_runs(url)
    assert runs["id"].tolist() == [second, first]
    fl = runs[runs["arm"] == "fl_ae"].iloc[0]
    assert fl["rounds"] == 3
    assert fl["model_bytes"] == 100
    assert json.loads(fl["per_dataset_json"]) == {"a": 0.3, "b": 0.3}

    assert len(get_runs(url, arm="conventional")) == 1
    assert len(get_runs(url, seed=99)) == 0
    assert len(get_runs(url, seed=3)) == 2
    assert runs["created_at"].notna().all()
    assert len(get_runs(url, limit=1)) == 1


def test_round_metrics(tmp_path, url):
    cfg = ExperimentConfig(output_dir=str(tmp_path))
    run_id = record_run(url, cfg, make_report(0.5), make_records(4), model_bytes=100, n_clients=2)
    rounds = get_round_metrics(url, run_id)
    assert rounds["round"].tolist() == [1, 2, 3, 4]
    assert rounds["bytes_up"].sum() == 4 * 200
    assert rounds["server_loss"].iloc[1] == pytest.approx(0.45)


def test_nan_losses_stored_as_null(tmp_path, url):
    cfg = ExperimentConfig(output_dir=str(tmp_path))
    record = RoundRecord(round=1, client_loss_mean=float("nan"), client_loss_std=float("nan"),
                         server_loss=0.5, bytes_down=0, bytes_up=0)
    run_id = record_run(url, cfg, make_report(0.5), [record])
    rounds = get_round_metrics(url, run_id)
    assert rounds["client_loss_mean"].isna().all()


def test_arm_summary(tmp_path, url):
    cfg = ExperimentConfig(output_dir=str(tmp_path))
    for score in (0.4, 0.8):
        record_run(url, cfg, make_report(score))
    cfg.arm = "conventional_ae"
    record_run(url, cfg, make_report(0.5))
    summary = get_arm_summary(url).set_index("arm")
    assert summary.loc["fl_ae", "runs"] == 2
    assert summary.loc["fl_ae", "best_macro_f1"] == pytest.approx(0.8)
    assert summary.loc["fl_ae", "mean_macro_f1"] == pytest.approx(0.6)
    assert summary.loc["conventional_ae", "runs"] == 1
