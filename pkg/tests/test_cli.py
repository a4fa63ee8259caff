import pytest
import yaml
from click.testing import CliRunner

from v2icoop import cli
from v2icoop.geometry import write_correspondences
from v2icoop.scenario import build_redlight_scenario
from v2icoop.simcore import IncompleteRunError, SimulationLog

LOGS = ("ground_truth.csv", "detections.csv", "publishes.csv", "fused.csv")


@pytest.fixture
def runner():
    return CliRunner()


def test_run_writes_logs_and_metrics(runner, tmp_path):
    out = tmp_path / "run"
    res = runner.invoke(cli.main, ["run", "--scenario", "redlight_default", "--seed", "1", "--out", str(out)])
    assert res.exit_code == 0, res.output
    for name in LOGS + ("metrics.txt", "metrics.csv", "run.yaml"):
        assert (out / name).exists()
    assert "mean IoU" in res.output


def test_run_flags(runner, tmp_path):
    out = tmp_path / "raw"
    res = runner.invoke(cli.main, ["run", "--scenario", "redlight_default", "--out", str(out), "--no-compensation",
                                   "--delay-source", "measured"])
    assert res.exit_code == 0, res.output
    log = SimulationLog.read(out)
    assert log.config["compensation"] is False and log.config["delay_source"] == "measured"
    assert log.publishes and all(r[1] is None for r in log.publishes)
    res = runner.invoke(cli.main, ["run", "--scenario", "redlight_default", "--out", str(tmp_path / "v"), "--no-v2i"])
    assert res.exit_code == 0 and SimulationLog.read(tmp_path / "v").messages == []


def test_invalid_config_exit_2(runner, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"world_dt": 0}))
    res = runner.invoke(cli.main, ["run", "--scenario", "redlight_default", "--config", str(bad),
                                   "--out", str(tmp_path / "o")])
    assert res.exit_code == 2
    res = runner.invoke(cli.main, ["run", "--scenario", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "o")])
    assert res.exit_code == 2


def test_incomplete_run_exit_3(runner, tmp_path, monkeypatch):
    def boom(spec, config):
        raise IncompleteRunError("event queue exhausted")

    monkeypatch.setattr(cli, "run_simulation", boom)
    res = runner.invoke(cli.main, ["run", "--scenario", "redlight_default", "--out", str(tmp_path / "o")])
    assert res.exit_code == 3


def test_report_recomputes_and_plots(runner, tmp_path):
    runner.invoke(cli.main, ["run", "--scenario", "redlight_default", "--seed", "2", "--out", str(tmp_path / "r")])
    res = runner.invoke(cli.main, ["report", "--logs", str(tmp_path / "r"), "--out", str(tmp_path / "rep")])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "rep" / "metrics.csv").read_text() == (tmp_path / "r" / "metrics.csv").read_text()
    assert (tmp_path / "rep" / "bev.svg").read_text().lstrip().startswith("<?xml")


def test_report_incomplete_log_exit_3(runner, tmp_path):
    runner.invoke(cli.main, ["run", "--scenario", "redlight_default", "--out", str(tmp_path / "r")])
    meta = yaml.safe_load((tmp_path / "r" / "run.yaml").read_text())
    meta["complete"] = False
    (tmp_path / "r" / "run.yaml").write_text(yaml.safe_dump(meta))
    res = runner.invoke(cli.main, ["report", "--logs", str(tmp_path / "r"), "--out", str(tmp_path / "rep")])
    assert res.exit_code == 3


def test_calibrate(runner, tmp_path):
    corr = tmp_path / "corr.csv"
    write_correspondences(corr, build_redlight_scenario().rsu.correspondences)
    assert corr.read_text().splitlines()[0] == "u_px,v_px,x_m,y_m"
    res = runner.invoke(cli.main, ["calibrate", "--correspondences", str(corr), "--out", str(tmp_path / "cal.txt")])
    assert res.exit_code == 0, res.output
    assert "rms reprojection residual" in res.output
    bad = tmp_path / "few.csv"
    bad.write_text("u_px,v_px,x_m,y_m\n1,2,3,4\n")
    res = runner.invoke(cli.main, ["calibrate", "--correspondences", str(bad), "--out", str(tmp_path / "x.txt")])
    assert res.exit_code == 2


def test_ablate(runner, tmp_path):
    res = runner.invoke(cli.main, ["ablate", "--scenario", "redlight_default", "--seeds", "1", "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    for name in ("per_seed.csv", "aggregate.csv", "summary.txt", "bev_seed0.svg", "error_seed0.svg"):
        assert (tmp_path / name).exists()
