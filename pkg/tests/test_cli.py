import csv
import math
import subprocess
import sys

import pytest

import oracles
from ridepool.cli import EXIT_INVALID, EXIT_OK, EXIT_PARTIAL, TRACE_HEADER, main
from ridepool.exmas import RIDES_HEADER
from ridepool.experiment import read_results
from ridepool.matching import SOLUTION_HEADER


@pytest.fixture
def net_dir(tmp_path):
    out = tmp_path / "net"
    assert main(["net", "grid", "--rows", "5", "--cols", "5", "--spacing", "300", "--speed", "10",
                 "--out", str(out)]) == EXIT_OK
    return out


def _demand(tmp_path, net_dir, n=6, seed=17, batch=120):
    path = tmp_path / f"demand_{n}_{seed}.csv"
    assert main(["demand", "gen", "--net", str(net_dir), "--n", str(n), "--batch-s", str(batch),
                 "--seed", str(seed), "--out", str(path)]) == EXIT_OK
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_theory_table(capsys):
    assert main(["theory", "--q-list", "2", "--d-list", "2"]) == EXIT_OK
    assert capsys.readouterr().out.splitlines() == ["q,d,search_space,log10", "2,2,4,0.602"]


def test_theory_file_and_degenerate(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["theory", "--q-list", "3,2000", "--d-list", "1,4,8", "--out", str(out)]) == EXIT_OK
    rows = _rows(out)
    assert rows[1] == ["3", "1", "3", "0.477"]
    assert rows[2] == ["3", "4", "0", ""]
    assert rows[-1][0:2] == ["2000", "8"] and rows[-1][3] == "31.008"
    assert int(rows[-1][2]) == math.comb(2000, 8) * math.factorial(8) ** 2


@pytest.mark.parametrize("argv,message", [
    (["theory", "--q-list", "a", "--d-list", "2"], "--q-list"),
    (["theory", "--q-list", "3", "--d-list", "0"], "--d-list"),
    (["net", "grid", "--rows", "1", "--cols", "3", "--spacing", "1", "--speed", "1", "--out", "x"], "net grid"),
])
def test_invalid_input_exit_code(argv, message, capsys):
    assert main(argv) == EXIT_INVALID
    assert message in capsys.readouterr().err


def test_grid_and_demand_files(tmp_path, net_dir):
    assert _rows(net_dir / "nodes.csv")[0] == ["id", "x", "y"]
    assert len(_rows(net_dir / "edges.csv")) == 1 + 2 * 2 * 5 * 4
    demand = _demand(tmp_path, net_dir, n=12, seed=3)
    again = _demand(tmp_path / "..", net_dir, n=12, seed=3)
    assert demand.read_bytes() == again.read_bytes()
    assert len(_rows(demand)) == 13


def test_net_import_round_trip(tmp_path, net_dir):
    out = tmp_path / "copy"
    assert main(["net", "import", "--nodes", str(net_dir / "nodes.csv"), "--edges", str(net_dir / "edges.csv"),
                 "--out", str(out)]) == EXIT_OK
    assert (out / "edges.csv").read_bytes() == (net_dir / "edges.csv").read_bytes()


def test_net_import_reports_line(tmp_path, capsys):
    (tmp_path / "n.csv").write_text("id,x,y\n1,0,0\n1,1,1\n")
    (tmp_path / "e.csv").write_text("from,to,length_m,speed_mps\n")
    assert main(["net", "import", "--nodes", str(tmp_path / "n.csv"), "--edges", str(tmp_path / "e.csv"),
                 "--out", str(tmp_path / "o")]) == EXIT_INVALID
    assert "duplicate node id 1" in capsys.readouterr().err


def _oracle_rides_file(net_dir, demand, lam, path):
    """rides.csv written from the brute-force oracle, read from raw CSV files."""
    nodes = [int(r[0]) for r in _rows(net_dir / "nodes.csv")[1:]]
    edges = [(int(a), int(b), float(length), float(speed)) for a, b, length, speed in _rows(net_dir / "edges.csv")[1:]]
    reqs = {int(r[0]): {"o": int(r[1]), "d": int(r[2]), "req": float(r[3]), "t": float(r[4]), "l": float(r[5])}
            for r in _rows(demand)[1:]}
    found = oracles.all_rides(reqs, oracles.travel_times(nodes, edges), (1.0, 0.005, 1.2, 1.0), lam)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RIDES_HEADER)
        for k, (key, gains) in enumerate(sorted(found.items(), key=lambda kv: (len(kv[0][0]), kv[0]))):
            travelers, pick, drop = key
            w.writerow([k, len(travelers), ";".join(map(str, travelers)), ";".join(map(str, pick)),
                        ";".join(map(str, drop)), repr(math.fsum(gains)), ";".join(map(repr, gains))])


def test_solve_matches_oracle_fixture(tmp_path, net_dir, capsys):
    demand = _demand(tmp_path, net_dir)
    capsys.readouterr()
    out = tmp_path / "solve"
    assert main(["solve", "--net", str(net_dir), "--demand", str(demand), "--lambda", "0.4",
                 "--out-dir", str(out)]) == EXIT_OK
    stats = capsys.readouterr().out.strip()
    assert stats.startswith("status=completed rides=12 search_space=6 ")
    _oracle_rides_file(net_dir, demand, 0.4, tmp_path / "oracle_rides.csv")
    assert (out / "rides.csv").read_bytes() == (tmp_path / "oracle_rides.csv").read_bytes()
    assert [r[0] for r in _rows(out / "trace.csv")] == ["stage", "init", "degree2", "degree3", "degree4", "matching"]
    assert _rows(out / "trace.csv")[0] == TRACE_HEADER
    sol = (out / "solution.csv").read_text().splitlines()
    assert sol[0] == ",".join(SOLUTION_HEADER) and len(sol) == 8 and sol[-1].startswith("# objective=")


def test_solve_is_byte_reproducible(tmp_path, net_dir):
    demand = _demand(tmp_path, net_dir, n=25, seed=2, batch=300)
    for d in ("a", "b"):
        assert main(["solve", "--net", str(net_dir), "--demand", str(demand), "--lambda", "0.3",
                     "--out-dir", str(tmp_path / d)]) == EXIT_OK
    for name in ("rides.csv", "solution.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_solve_with_params_file(tmp_path, net_dir):
    demand = _demand(tmp_path, net_dir)
    params = tmp_path / "params.txt"
    params.write_text("beta_s = 1.0  # no sharing discomfort\nbeta_d = 0.5\n")
    assert main(["solve", "--net", str(net_dir), "--demand", str(demand), "--lambda", "0.4",
                 "--params-file", str(params), "--out-dir", str(tmp_path / "p")]) == EXIT_OK
    assert len(_rows(tmp_path / "p" / "rides.csv")) > 13
    params.write_text("beta_x = 1\n")
    assert main(["solve", "--net", str(net_dir), "--demand", str(demand), "--lambda", "0.4",
                 "--params-file", str(params), "--out-dir", str(tmp_path / "q")]) == EXIT_INVALID


def test_solve_guard_abort_writes_partial_outputs(tmp_path, capsys):
    net = tmp_path / "line"
    net.mkdir()
    (net / "nodes.csv").write_text("id,x,y\n0,0,0\n1,600,0\n2,1200,0\n")
    (net / "edges.csv").write_text("from,to,length_m,speed_mps\n0,1,600,10\n1,0,600,10\n1,2,600,10\n2,1,600,10\n")
    demand = tmp_path / "same.csv"
    demand.write_text("id,origin,destination,request_time_s,direct_time_s,length_km\n"
                      + "".join(f"{i},0,2,0.0,120.0,1.2\n" for i in range(30)))
    code = main(["solve", "--net", str(net), "--demand", str(demand), "--lambda", "0.3", "--max-degree", "3",
                 "--max-avg-degree", "20", "--out-dir", str(tmp_path / "o")])
    captured = capsys.readouterr()
    assert code == EXIT_PARTIAL
    assert captured.out.startswith("status=aborted rides=1770 search_space=1740 pair_edges=435 avg_degree=29")
    assert "aborted at degree 2: avg_degree 29 > 20" in captured.err
    assert len(_rows(tmp_path / "o" / "rides.csv")) == 1 + 1770
    assert not (tmp_path / "o" / "solution.csv").exists()
    trace = {r[0]: r for r in _rows(tmp_path / "o" / "trace.csv")[1:]}
    assert trace["degree2"][-1] == "aborted" and "degree3" not in trace


@pytest.mark.parametrize("extra,message", [
    (["--lambda", "1.5"], "--lambda"),
    (["--lambda", "0.3", "--max-degree", "7"], "--max-degree"),
    (["--lambda", "0.3", "--max-avg-degree", "0"], "guard"),
])
def test_solve_rejects_bad_flags(tmp_path, net_dir, extra, message, capsys):
    demand = _demand(tmp_path, net_dir)
    assert main(["solve", "--net", str(net_dir), "--demand", str(demand), "--out-dir", str(tmp_path / "o")]
                + extra) == EXIT_INVALID
    assert message in capsys.readouterr().err


def test_solve_missing_inputs(tmp_path, net_dir, capsys):
    assert main(["solve", "--net", str(tmp_path), "--demand", "x.csv", "--lambda", "0.3",
                 "--out-dir", str(tmp_path / "o")]) == EXIT_INVALID
    assert "--net" in capsys.readouterr().err
    assert main(["solve", "--net", str(net_dir), "--demand", str(tmp_path / "nope.csv"), "--lambda", "0.3",
                 "--out-dir", str(tmp_path / "o")]) == EXIT_INVALID
    assert "nope.csv" in capsys.readouterr().err
    bad = tmp_path / "far.csv"
    bad.write_text("id,origin,destination,request_time_s,direct_time_s,length_km\n0,0,999,0,1,1\n")
    assert main(["solve", "--net", str(net_dir), "--demand", str(bad), "--lambda", "0.3",
                 "--out-dir", str(tmp_path / "o")]) == EXIT_INVALID
    assert "not in network" in capsys.readouterr().err


DEMO_CONFIG = """\
demand_levels = 10, 20
lambdas = 0.15, 0.35
replications = 1
grid_rows = 5
grid_cols = 5
"""


def test_sweep_and_report(tmp_path, capsys):
    cfg = tmp_path / "demo.cfg"
    cfg.write_text(DEMO_CONFIG)
    results = tmp_path / "results.csv"
    assert main(["sweep", "--config", str(cfg), "--out", str(results)]) == EXIT_OK
    assert len(read_results(results)) == 4
    assert main(["sweep", "--config", str(cfg), "--out", str(results)]) == EXIT_INVALID
    assert "--resume" in capsys.readouterr().err
    assert main(["sweep", "--config", str(cfg), "--out", str(results), "--resume"]) == EXIT_OK
    assert len(read_results(results)) == 4
    capsys.readouterr()
    assert main(["report", "--results", str(results), "--out-dir", str(tmp_path / "fig")]) == EXIT_OK
    assert capsys.readouterr().out.startswith("indicator,lambda,min,median,max,n")
    assert len(_rows(tmp_path / "fig" / "fig3a.csv")) == 5


def test_sweep_config_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("replications = 1\nlambdas = 0.2, x\n")
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "r.csv")]) == EXIT_INVALID
    assert "bad.cfg:2: bad value for lambdas" in capsys.readouterr().err


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "ridepool", "theory", "--q-list", "8000", "--d-list", "4"],
                          capture_output=True, text=True, check=True)
    assert done.stdout.splitlines()[1].endswith(",16.992")
    bad = subprocess.run([sys.executable, "-m", "ridepool", "frobnicate"], capture_output=True, text=True)
    assert bad.returncode == 2 and "invalid choice" in bad.stderr
