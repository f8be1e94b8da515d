import csv
import json

import pytest

from overlaycc.cli import main


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_run_writes_outputs(tmp_path, capsys):
    rc = main(["run", "--scenario", "toy2", "--algorithm", "vanilla", "--duration", "20", "--warmup", "5",
               "--reps", "2", "--out-dir", str(tmp_path)])
    assert rc == 0
    summ = _rows(tmp_path / "summary.csv")
    assert [r["seed"] for r in summ] == ["1", "2"]
    for r in summ:
        assert 0.6 <= float(r["fairness_index"]) <= 0.75
        assert (tmp_path / r["run_id"] / "latency.csv").exists()
        assert (tmp_path / r["run_id"] / "throughput.csv").exists()
    assert "fairness_index" in capsys.readouterr().out


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text("scenario = toy2\nalgorithm = pctcp\nduration = 3\nwarmup = 1\n")
    rc = main(["run", "--config", str(cfg), "--algorithm", "vanilla", "--out-dir", str(tmp_path)])
    assert rc == 0
    assert _rows(tmp_path / "summary.csv")[0]["algorithm"] == "vanilla"


@pytest.mark.parametrize("text", ["bogus_key = 3\n", "duration = soon\n", "[extra]\nx = 1\n"])
def test_bad_config_exits_1(tmp_path, text):
    cfg = tmp_path / "bad.conf"
    cfg.write_text(text)
    assert main(["run", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 1


def test_bad_flag_exits_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--algorithm", "tcp", "--out-dir", str(tmp_path)])
    assert exc.value.code == 1
    assert main(["run", "--throttle", "2", "--out-dir", str(tmp_path)]) == 1


@pytest.mark.parametrize("jobs", ["1", "2"])
def test_sweep_aggregates(tmp_path, jobs):
    spec = tmp_path / "s.conf"
    spec.write_text("scenario = toy2\nsweep = throttle\nvalues = 0, 0.5\nalgorithms = vanilla, pctcp\n"
                    "reps = 2\nduration = 3\nwarmup = 1\n")
    out = tmp_path / "o"
    assert main(["sweep", str(spec), "--jobs", jobs, "--out-dir", str(out)]) == 0
    runs = _rows(out / "runs.csv")
    assert len(runs) == 8
    assert len({r["run_id"] for r in runs}) == 8
    agg = _rows(out / "sweep.csv")
    assert [(float(r["value"]), r["algorithm"], r["runs"]) for r in agg] == [
        (0.0, "vanilla", "2"), (0.0, "pctcp", "2"), (0.5, "vanilla", "2"), (0.5, "pctcp", "2")]


def test_sweep_unknown_parameter(tmp_path):
    spec = tmp_path / "s.conf"
    spec.write_text("sweep = horizon\nvalues = 1, 2\n")
    assert main(["sweep", str(spec), "--out-dir", str(tmp_path)]) == 1


def test_fair_toy(capsys):
    assert main(["fair", "toy2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "circuit_id,maxmin_qp,maxmin_waterfill,abs_diff"
    for line in out[1:4]:
        _, a, b, _ = line.split(",")
        assert float(a) == pytest.approx(136.7, abs=0.01)
        assert float(b) == pytest.approx(136.7, abs=0.01)
    assert float(out[-1].split()[-1]) < 1e-6


def test_fair_json(tmp_path, capsys):
    topo = tmp_path / "t.json"
    topo.write_text(json.dumps({"nodes": [[0, 100, 100], [1, 30, 30], [2, 500, 500]],
                                "circuits": [[0, 2], [0, 1]]}))
    out_csv = tmp_path / "f.csv"
    assert main(["fair", str(topo), "--out", str(out_csv)]) == 0
    rows = _rows(out_csv)
    assert [float(r["maxmin_waterfill"]) for r in rows] == pytest.approx([70.0, 30.0])
    assert main(["fair", str(tmp_path / "missing.json")]) == 1
