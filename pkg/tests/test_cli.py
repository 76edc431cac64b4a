import csv
import json

import pytest

from tfdma import cli
from tfdma.delay import DelayParams
from tfdma.engine import SimConfig


def run_cli(*argv):
    return cli.main(list(argv))


def read(path):
    return path.read_bytes()


def test_simulate_defaults(tmp_path, capsys):
    assert run_cli("simulate", "--out", str(tmp_path)) == 0
    for name in ("trace.csv", "trace.jsonl", "summary.json", "config.json"):
        assert (tmp_path / name).exists()
    assert "converged" in capsys.readouterr().out


def test_simulate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        run_cli("simulate", "--seed", "9", "--out", str(tmp_path / d))
    for name in ("trace.csv", "trace.jsonl", "summary.json"):
        assert read(tmp_path / "a" / name) == read(tmp_path / "b" / name)


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("TFDMA_SEED", "9")
    run_cli("simulate", "--out", str(tmp_path / "env"))
    monkeypatch.delenv("TFDMA_SEED")
    run_cli("simulate", "--seed", "9", "--out", str(tmp_path / "flag"))
    assert read(tmp_path / "env" / "trace.csv") == read(tmp_path / "flag" / "trace.csv")


def test_single_channel_has_no_switch_events(tmp_path):
    run_cli("simulate", "--channels", "1", "--out", str(tmp_path))
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["switch_attempts"] == 0 and s["returns"] == 0


def test_non_convergence_exits_zero(tmp_path, capsys):
    assert run_cli("simulate", "--max-time", "0.1", "--out", str(tmp_path)) == 0
    assert json.loads((tmp_path / "summary.json").read_text())["converged"] is False
    assert "not converged" in capsys.readouterr().out


def test_replications_write_one_dir_each(tmp_path):
    run_cli("simulate", "--nodes", "8", "--channels", "2", "--replications", "3", "--format", "csv", "--out", str(tmp_path))
    assert sorted(p.name for p in tmp_path.glob("run_*")) == ["run_0000", "run_0001", "run_0002"]
    assert not list(tmp_path.glob("run_0000/*.jsonl"))


@pytest.mark.parametrize(
    "argv",
    [
        ("simulate", "--nodes", "0"),
        ("simulate", "--alpha", "1.5"),
        ("simulate", "--format", "xml"),
        ("simulate", "--no-such-flag"),
        ("predict-delay", "--p-sw0", "0"),
        ("analyze-matrix", "--occupancy", "3,1", "--offsets", "2,1"),
        ("sweep", "--grid", "bogus=1,2"),
    ],
)
def test_bad_input_gives_json_error(tmp_path, capsys, argv):
    with pytest.raises(SystemExit) as e:
        run_cli(*argv, "--out", str(tmp_path))
    assert e.value.code != 0
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert set(err) == {"error", "message"}


def test_predict_delay_outputs(tmp_path, capsys):
    run_cli("predict-delay", "--nodes", "8", "--channels", "4", "--mode", "as-printed", "--out", str(tmp_path))
    d = json.loads((tmp_path / "delay.json").read_text())
    assert d["total_seconds"] == pytest.approx(3.1, abs=0.15)
    rows = list(csv.DictReader(open(tmp_path / "compositions.csv")))
    assert len(rows) == 165
    assert "3.1" in capsys.readouterr().out


def test_analyze_matrix(tmp_path):
    run_cli("analyze-matrix", "--channels", "4", "--occupancy", "6,2,0,0", "--p-sw0", "1", "--iterate", "--out", str(tmp_path))
    d = json.loads((tmp_path / "matrix.json").read_text())
    assert d["spectral_radius"] <= 1 + 1e-9
    assert d["final"] == [2.0, 2.0, 2.0, 2.0]
    assert (tmp_path / "trajectory.csv").exists()


def test_sweep_monotone_in_p(tmp_path):
    run_cli("sweep", "--nodes", "8", "--channels", "2", "--grid", "p_sw0=0.1,0.3,0.5,0.7,0.9", "--out", str(tmp_path))
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    delays = [float(r["delay_s"]) for r in rows]
    assert len(delays) == 5 and all(b < a for a, b in zip(delays, delays[1:]))


def test_sweep_Z(tmp_path):
    run_cli("sweep", "--nodes", "8", "--channels", "2", "--grid", "Z=10,60,120", "--out", str(tmp_path))
    delays = [float(r["delay_s"]) for r in csv.DictReader(open(tmp_path / "sweep.csv"))]
    assert all(b >= a for a, b in zip(delays, delays[1:]))


def test_empty_sweep_is_header_only(tmp_path):
    assert run_cli("sweep", "--out", str(tmp_path)) == 0
    assert (tmp_path / "sweep.csv").read_text() == "delay_s\n"


def test_oversized_sweep_refused(tmp_path, capsys):
    grid = "p_sw0=" + ",".join(str(0.01 * i) for i in range(1, 101))
    beta = "beta=" + ",".join(str(1.01 + 0.001 * i) for i in range(101))
    with pytest.raises(SystemExit):
        run_cli("sweep", "--grid", grid, "--grid", beta, "--out", str(tmp_path))
    assert "limit" in capsys.readouterr().err


def test_sweep_with_simulation(tmp_path):
    run_cli("sweep", "--nodes", "8", "--channels", "2", "--grid", "p_sw0=0.33", "--simulate", "--replications", "3", "--out", str(tmp_path))
    row = next(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert float(row["sim_mean_s"]) > 0


def test_compare_reference_setups(tmp_path, capsys):
    run_cli("compare-table3", "--replications", "5", "--out", str(tmp_path))
    rows = list(csv.DictReader(open(tmp_path / "reference_comparison.csv")))
    assert [(int(r["nodes"]), int(r["channels"])) for r in rows] == [(16, 8), (16, 4), (16, 2), (8, 4), (8, 2)]
    assert float(rows[0]["analytic_as_printed_s"]) == pytest.approx(4.9, abs=0.15)
    assert float(rows[0]["reference_measured_s"]) == 4.7
    assert "analytic_multinomial_s" in capsys.readouterr().out


def test_spec_round_trip():
    args = cli.build_parser().parse_args(["simulate", "--loss", "0.1", "--seed", "4"])
    spec = cli.ExperimentSpec("simulate", cli.sim_config(args), 3, "x", ("csv",))
    back = cli.ExperimentSpec.from_json(spec.to_json())
    assert back == spec and isinstance(back.config, SimConfig)
    dspec = cli.ExperimentSpec("predict-delay", DelayParams(W_tot=8, C=2), 1, "y")
    assert cli.ExperimentSpec.from_json(dspec.to_json()) == dspec


def test_written_config_reparses(tmp_path):
    run_cli("simulate", "--nodes", "8", "--out", str(tmp_path))
    spec = cli.ExperimentSpec.from_json((tmp_path / "config.json").read_text())
    assert spec.config.n_nodes_W_tot == 8
