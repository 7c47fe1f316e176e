import json
from unittest.mock import Mock, patch

import pandas as pd
import pytest

from config import RunConfig
from services.errors import RelevanceError
from services.orchestrator import Orchestrator
from conftest import FIXTURES


@pytest.fixture
def inputs(tmp_path, discrete_table, discrete_model):
    data = tmp_path / "data.csv"
    model = tmp_path / "model.json"
    discrete_table.to_csv(data, index=False)
    model.write_text(json.dumps(discrete_model), encoding="utf-8")
    return data, model


def _run(tmp_path, command, **kwargs):
    return RunConfig(command=command, out=tmp_path / "out", **kwargs)


def _names(paths):
    return sorted(path.name for path in paths)


def test_decompose_writes_all_views(tmp_path, inputs):
    # Setup
    data, model = inputs
    orchestrator = Orchestrator(_run(tmp_path, "decompose", data=data, model=model, seed=3))

    # Execute
    written = orchestrator.execute()

    # Assert
    assert _names(written) == ["decomposition.csv", "decomposition.json", "decomposition.txt"]
    payload = json.loads((tmp_path / "out" / "decomposition.json").read_text(encoding="utf-8"))
    assert payload["metadata"]["command"] == "decompose"
    assert payload["metadata"]["seed"] == 3
    assert payload["metadata"]["mode"] == "standard"
    assert set(payload["coefficients"]) == {"beta_ols", "beta_c", "beta_cl", "beta_iv"}
    assert "Difference" in (tmp_path / "out" / "decomposition.txt").read_text(encoding="utf-8")


def test_compare_se_flag_reaches_the_decomposition(tmp_path, inputs):
    # Setup
    data, model = inputs

    # Execute
    Orchestrator(_run(tmp_path, "decompose", data=data, model=model, compare_se=True)).execute()
    payload = json.loads((tmp_path / "out" / "decomposition.json").read_text(encoding="utf-8"))

    # Assert
    assert set(payload["se_comparison"]) == {"beta_ols", "beta_c", "beta_cl", "beta_iv"}
    assert payload["se_comparison"]["beta_iv"]["plugin"] > 0


def test_format_selects_files(tmp_path, inputs):
    # Setup
    data, model = inputs

    # Execute
    json_only = Orchestrator(_run(tmp_path, "first-stage", data=data, model=model, format="json")).execute()
    csv_only = Orchestrator(_run(tmp_path, "dwh-test", data=data, model=model, format="csv")).execute()

    # Assert
    assert _names(json_only) == ["first_stage.json"]
    assert _names(csv_only) == ["dwh.csv"]


def test_weights_tables(tmp_path, inputs):
    # Setup
    data, model = inputs

    # Execute
    written = Orchestrator(_run(tmp_path, "weights", data=data, model=model, bin=0.1)).execute()

    # Assert
    assert _names(written) == ["weights.json", "weights_groups.csv", "weights_levels.csv"]
    levels = pd.read_csv(tmp_path / "out" / "weights_levels.csv")
    groups = pd.read_csv(tmp_path / "out" / "weights_groups.csv")
    assert list(levels["level"]) == [1.0, 2.0]
    assert levels["iv_weight"].sum() == pytest.approx(1.0, abs=1e-12)
    assert len(groups) == 2
    payload = json.loads((tmp_path / "out" / "weights.json").read_text(encoding="utf-8"))
    assert payload["metadata"]["bin_floor"] == 0.1


def test_weights_and_cluster_flags_extend_the_schema(tmp_path, inputs, discrete_table):
    # Setup
    data, model = inputs
    table = discrete_table.assign(wt=1.0, cl=[i % 25 for i in range(len(discrete_table))])
    table.to_csv(data, index=False)
    run = _run(tmp_path, "first-stage", data=data, model=model, weights="wt", cluster="cl", format="json")

    # Execute
    Orchestrator(run).execute()

    # Assert
    payload = json.loads((tmp_path / "out" / "first_stage.json").read_text(encoding="utf-8"))
    assert payload["n_clusters"] == 25
    assert payload["f_label"] == "robust Wald F (not the effective F)"


def test_simulate_writes_sample_and_metadata(tmp_path):
    # Setup
    run = _run(tmp_path, "simulate", dgp=FIXTURES / "dgp_c.json", n=300, seed=8)

    # Execute
    written = Orchestrator(run).execute()

    # Assert
    assert _names(written) == ["sample.csv", "sample_metadata.json"]
    table = pd.read_csv(tmp_path / "out" / "sample.csv")
    assert len(table) == 300
    assert {"y", "x", "z", "g", "t", "u", "cell"} <= set(table.columns)
    meta = json.loads((tmp_path / "out" / "sample_metadata.json").read_text(encoding="utf-8"))
    assert meta["metadata"]["population"] == "dgp-c"
    assert meta["metadata"]["mode"] == "did-rd"


@patch("services.orchestrator.verify_identities")
def test_oracle_check_reports_failures_without_raising(mock_verify, tmp_path):
    # Setup
    report = Mock()
    report.all_passed = False
    report.failures = [Mock()]
    report.checks = []
    report.to_dict.return_value = {"population": "dgp-a", "all_passed": False, "checks": []}
    mock_verify.return_value = report

    # Execute
    written = Orchestrator(_run(tmp_path, "oracle-check", dgp=FIXTURES / "dgp_a.json")).execute()

    # Assert
    assert mock_verify.called
    assert _names(written) == ["oracle_checks.csv", "oracle_report.json"]
    payload = json.loads((tmp_path / "out" / "oracle_report.json").read_text(encoding="utf-8"))
    assert payload["all_passed"] is False


@patch("services.orchestrator.mc_study")
def test_mc_study_forwards_run_settings(mock_mc, tmp_path):
    # Setup
    summary = Mock()
    summary.to_dict.return_value = {"population": "dgp-b", "summary": []}
    summary.table = pd.DataFrame({"target": ["beta_iv"], "mean": [1.0]})
    mock_mc.return_value = summary
    run = _run(tmp_path, "mc-study", dgp=FIXTURES / "dgp_b.json", n=500, reps=20, seed=5,
               threads=2, targets=["beta_iv"], se="corrected")

    # Execute
    written = Orchestrator(run).execute()

    # Assert
    args = mock_mc.call_args[0]
    assert args[1:] == (500, 20, 5, ["beta_iv"], 2, "corrected")
    assert _names(written) == ["mc_summary.csv", "mc_summary.json"]


@patch("services.orchestrator.decompose")
def test_numerical_errors_propagate(mock_decompose, tmp_path, inputs):
    # Setup
    data, model = inputs
    mock_decompose.side_effect = RelevanceError("instrument is irrelevant")

    # Execute / Assert
    with pytest.raises(RelevanceError):
        Orchestrator(_run(tmp_path, "decompose", data=data, model=model)).execute()
    assert not (tmp_path / "out" / "decomposition.json").exists()
