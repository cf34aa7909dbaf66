import json

import pytest

import run_experiment
from conftest import DATA
from harness.experiment import improvement_pct, run_experiment as run_sweep, sweep_points
from harness.report import emit_report, load_report_json, load_rows_csv
from harness.seeds import SeedPlan
from models.schemas import RunConfig, RunReport


def small_config(**overrides):
    values = dict(
        topology=str(DATA / "usnet.json"),
        von_count=8,
        slots=2,
        fs_per_vlink=[2, 4],
        mu_sweep=[0.0, -30.0],
        mu_sweep_fs=[4],
        replications=2,
        seed=42,
    )
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture(scope="module")
def fs_report():
    return run_sweep(small_config())


def test_sweep_points():
    config = small_config()
    assert sweep_points(config, "fs") == [(2, -30.0), (4, -30.0)]
    assert sweep_points(config, "mu") == [(4, 0.0), (4, -30.0)]


def test_improvement_pct():
    assert improvement_pct(110.0, 100.0) == pytest.approx(10.0)
    assert improvement_pct(5.0, 0.0) is None


def test_config_rejects_odd_fs_steps():
    with pytest.raises(ValueError):
        small_config(fs_per_vlink=[3])
    with pytest.raises(ValueError):
        small_config(opt_out_vons=[8])


def test_seed_plan_streams_are_independent():
    plan = SeedPlan(7)
    first = plan.generator("demand", 4, 0).integers(0, 2**32, 4)
    again = SeedPlan(7).generator("demand", 4, 0).integers(0, 2**32, 4)
    other = plan.generator("demand", 4, 1).integers(0, 2**32, 4)
    assert list(first) == list(again)
    assert list(first) != list(other)
    assert plan.replication_seed(4, 0) != plan.replication_seed(4, 1)


def test_fs_sweep_rows(fs_report):
    report = fs_report
    # 2 points x 2 replications x 2 modes
    assert len(report.rows) == 8
    assert [p.fs_per_vlink for p in report.points] == [2, 4]
    assert all(p.feasible and p.replications == 2 for p in report.points)
    assert len(report.chains) == 4
    assert all(chain.verified and chain.rejected_blocks == 0 for chain in report.chains)
    assert report.assumptions


def test_trading_is_zero_sum_and_never_hurts(fs_report):
    rows = {(r.fs_per_vlink, r.replication, r.mode): r for r in fs_report.rows}
    for row in fs_report.rows:
        assert row.credit_sum_units == 0
        assert row.carried_gbps + row.blocked_gbps == pytest.approx(row.offered_gbps)
    for (fs, rep, mode), row in rows.items():
        if mode != "st":
            continue
        nonst = rows[(fs, rep, "nonst")]
        assert row.offered_gbps == pytest.approx(nonst.offered_gbps)
        assert row.carried_gbps >= nonst.carried_gbps - 1e-9
        assert row.improvement_pct == pytest.approx(improvement_pct(row.carried_gbps, nonst.carried_gbps))
        assert nonst.trades == 0 and nonst.blocks == 0


def test_runs_are_deterministic(fs_report):
    again = run_sweep(small_config())
    assert again.rows == fs_report.rows
    assert again.chains == fs_report.chains


def test_seed_changes_the_run(fs_report):
    other = run_sweep(small_config(seed=43))
    assert [r.offered_gbps for r in other.rows] != [r.offered_gbps for r in fs_report.rows]


def test_centralized_engine_matches_protocol(fs_report):
    centralized = run_sweep(small_config(engine="centralized"))
    for got, want in zip(centralized.rows, fs_report.rows):
        assert (got.carried_gbps, got.trades, got.chain_tip) == (want.carried_gbps, want.trades, want.chain_tip)
    # only the distributed engine exchanges messages
    assert any(r.messages for r in fs_report.rows if r.mode == "st")
    assert not any(r.messages for r in centralized.rows)


def test_mu_sweep_shares_scenarios():
    report = run_sweep(small_config(), sweep="mu")
    assert [(p.fs_per_vlink, p.threshold_mu) for p in report.points] == [(4, 0.0), (4, -30.0)]
    nonst = {}
    for row in report.rows:
        if row.mode == "nonst":
            nonst.setdefault(row.replication, set()).add((row.offered_gbps, row.carried_gbps))
    assert all(len(values) == 1 for values in nonst.values())


def test_single_mode():
    report = run_sweep(small_config(fs_per_vlink=[2], replications=1), modes=["nonst"])
    assert [row.mode for row in report.rows] == ["nonst"]
    assert report.chains == []
    with pytest.raises(ValueError):
        run_sweep(small_config(), modes=[])


def test_infeasible_point_has_no_rows():
    config = small_config(fs_total=8, fs_per_vlink=[4], max_embed_retries=1, replications=1)
    report = run_sweep(config)
    assert report.rows == []
    (point,) = report.points
    assert not point.feasible
    assert point.mean_improvement_pct is None


def test_trace_files(tmp_path):
    run_sweep(small_config(fs_per_vlink=[4], replications=1), trace_dir=tmp_path)
    traces = list(tmp_path.glob("trace_fs_fs4_*.jsonl"))
    assert len(traces) == 1
    first = json.loads(traces[0].read_text().splitlines()[0])
    assert first["topic"].startswith("st/")


def test_report_files_round_trip(tmp_path, fs_report):
    csv_path, json_path = emit_report(fs_report, tmp_path)
    assert csv_path.name == "report_fs.csv"
    assert load_rows_csv(csv_path) == fs_report.rows
    assert load_report_json(json_path) == fs_report


def test_report_records_scenarios_and_ledgers(fs_report):
    assert [(s.fs_per_vlink, s.replication) for s in fs_report.scenarios] == [(2, 0), (2, 1), (4, 0), (4, 1)]
    for record in fs_report.scenarios:
        assert [von.von_id for von in record.vons] == list(range(8))
        for von in record.vons:
            assert len(set(von.node_map)) == len(von.node_map)
            assert all(0 <= a < b < len(von.node_map) for a, b in von.edges)

    # 2 points x 2 replications x 2 slots
    assert len(fs_report.ledger_snapshots) == 8
    assert all(sum(s.credit_units.values()) == 0 for s in fs_report.ledger_snapshots)
    assert all(len(s.credit_units) == 8 for s in fs_report.ledger_snapshots)

    again = RunReport.model_validate_json(fs_report.model_dump_json())
    assert again.scenarios == fs_report.scenarios
    assert again.ledger_snapshots == fs_report.ledger_snapshots


def test_report_rejects_unknown_format(tmp_path, fs_report):
    with pytest.raises(ValueError, match="xml"):
        emit_report(fs_report, tmp_path, ["csv", "xml"])


# -- command line -----------------------------------------------------------------


def write_config(tmp_path, **overrides):
    path = tmp_path / "config.json"
    path.write_text(small_config(fs_per_vlink=[4], replications=1, **overrides).model_dump_json())
    return path


def test_cli_writes_reports(tmp_path):
    out = tmp_path / "results"
    code = run_experiment.main(["--config", str(write_config(tmp_path)), "--seed", "5", "--out", str(out)])
    assert code == 0
    report = load_report_json(out / "report_fs.json")
    assert report.seed == 5
    assert len(load_rows_csv(out / "report_fs.csv")) == 2


def test_cli_single_format_and_mode(tmp_path):
    out = tmp_path / "results"
    argv = ["--config", str(write_config(tmp_path)), "--out", str(out), "--format", "csv", "--mode", "st"]
    assert run_experiment.main(argv) == 0
    assert [path.name for path in out.iterdir()] == ["report_fs.csv"]
    assert {row.mode for row in load_rows_csv(out / "report_fs.csv")} == {"st"}


def test_cli_persists_run(tmp_path):
    import database

    out = tmp_path / "results"
    argv = ["--config", str(write_config(tmp_path)), "--out", str(out), "--persist"]
    assert run_experiment.main(argv) == 0
    db_run = database.list_runs(limit=1)[0]
    assert db_run.status == "finished"
    assert db_run.total_rows == 2
    assert len(database.get_run_rows(db_run.id, mode="st")) == 1


def test_cli_rejects_bad_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"fs_per_vlink": [3]}))
    assert run_experiment.main(["--config", str(path), "--out", str(tmp_path)]) == 1


def test_cli_rejects_missing_topology(tmp_path):
    path = write_config(tmp_path, topology=str(tmp_path / "missing.json"))
    assert run_experiment.main(["--config", str(path), "--out", str(tmp_path)]) == 1


def test_cli_rejects_unknown_format(tmp_path):
    assert run_experiment.main(["--config", str(write_config(tmp_path)), "--out", str(tmp_path), "--format", "xml"]) == 1
