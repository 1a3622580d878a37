import csv
import os
from pathlib import Path

import numpy as np
import pytest

from surfrann import cli
from surfrann import experiments as exps
from surfrann.config import ConfigError, dump_config, load_config, parse_config

ROOT = Path(__file__).resolve().parents[1]
QUICK = ROOT / "configs" / "quick"

SMALL_TORUS = """
[ex1_torus]
M = 60, 80, 100
N = 100, 144, 196, 256
seeds = 0
n_test = 300
"""


def _write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _without_timings(path):
    return [{k: v for k, v in r.items() if not k.startswith(exps.TIMING_PREFIX)} for r in _rows(path)]


def test_parse_config_types_and_round_trip():
    cfg = parse_config(SMALL_TORUS)
    assert cfg.M == (60, 80, 100) and cfg.N == (100, 144, 196, 256) and cfg.seeds == (0,)
    again = parse_config(dump_config(cfg))
    assert again == cfg


@pytest.mark.parametrize("text, needle", [
    ("[ex1_torus]\nwidth = 5\n", "unknown key 'width'"),
    ("[ex9]\nM = 1\n", "unknown experiment"),
    ("[ex1_torus]\nM = ten\n", "cannot parse"),
    ("[ex1_torus]\n[ex2_cheese]\n", "exactly one section"),
])
def test_parse_config_rejects(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_every_shipped_config_parses():
    paths = sorted(ROOT.glob("configs/*.ini")) + sorted(QUICK.glob("*.ini"))
    assert paths
    for p in paths:
        load_config(p)


def test_unknown_key_exits_2(tmp_path, capsys):
    cfg = _write(tmp_path, "[ex1_torus]\nwidth = 5\n")
    assert cli.main(["solve-static", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "width" in capsys.readouterr().err


def test_invalid_inputs_exit_2(tmp_path):
    bad_n = _write(tmp_path, "[ex1_torus]\nN = 50\n", "n.ini")
    wrong = _write(tmp_path, "[ex2_cheese]\n", "w.ini")
    out = str(tmp_path / "o")
    assert cli.main(["solve-static", "--config", str(bad_n), "--out", out]) == 2
    assert cli.main(["solve-heat", "--config", str(wrong), "--out", out]) == 2
    assert cli.main(["solve-static", "--config", str(tmp_path / "missing.ini"), "--out", out]) == 2
    assert cli.main(["bench", "ex1_torus", "--config", str(wrong), "--out", out]) == 2


def test_torus_sweep_shape_and_determinism(tmp_path):
    cfg = _write(tmp_path, SMALL_TORUS)
    for d in ("a", "b"):
        assert cli.main(["solve-static", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    rows = _rows(tmp_path / "a" / "ex1_torus.csv")
    assert len(rows) == 12
    assert {(int(r["M"]), int(r["N"])) for r in rows} == {(m, n) for m in (60, 80, 100) for n in (100, 144, 196, 256)}
    assert all(float(r["error"]) > 0 for r in rows)
    assert _without_timings(tmp_path / "a" / "ex1_torus.csv") == _without_timings(tmp_path / "b" / "ex1_torus.csv")
    assert (tmp_path / "a" / "ex1_torus_error.svg").read_bytes() == (tmp_path / "b" / "ex1_torus_error.svg").read_bytes()
    assert (tmp_path / "a" / "ex1_torus.ini").read_text() == (tmp_path / "b" / "ex1_torus.ini").read_text()


def test_seed_override_is_recorded(tmp_path):
    cfg = _write(tmp_path, "[ex1_torus]\nM = 60\nN = 100\nseeds = 0\nn_test = 200\n")
    assert cli.main(["solve-static", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "ex1_torus.csv")
    assert [r["seed"] for r in rows] == ["4"]


def test_compare_pass_and_fail(tmp_path, capsys):
    ref = tmp_path / "ref.csv"
    exps.write_rows(ref, [{"M": 600, "N": 900, "error": 1e-7}, {"M": 600, "N": 2500, "error": 1e-9}])
    same = tmp_path / "same.csv"
    exps.write_rows(same, [{"M": 600, "N": 900, "seed": s, "error": 1e-7} for s in range(3)]
                    + [{"M": 600, "N": 2500, "seed": 0, "error": 1e-9}])
    assert cli.main(["compare", str(same), str(ref)]) == 0
    worse = tmp_path / "worse.csv"
    exps.write_rows(worse, [{"M": 600, "N": 900, "error": 1e-7}, {"M": 600, "N": 2500, "error": 1e-3}])
    capsys.readouterr()
    assert cli.main(["compare", str(worse), str(ref)]) == 1
    out = capsys.readouterr().out
    assert "FAIL (M=600, N=2500) error" in out and "PASS (M=600, N=900) error" in out


def test_compare_uses_seed_median_and_orders(tmp_path):
    ref = tmp_path / "ref.csv"
    exps.write_rows(ref, [{"M": 10, "N": 4, "error": 1.0}])
    res = tmp_path / "res.csv"
    exps.write_rows(res, [{"M": 10, "N": 4, "seed": s, "error": e} for s, e in enumerate((5.0, 50.0, 1e9))])
    ok, lines = cli.compare(res, ref, orders=2)
    assert ok and "5.000e+01" in lines[0]
    ok, _ = cli.compare(res, ref, orders=1)
    assert not ok


def test_compare_without_matching_rows_exits_2(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    exps.write_rows(a, [{"M": 1, "N": 4, "error": 1.0}])
    exps.write_rows(b, [{"M": 2, "N": 4, "error": 1.0}])
    assert cli.main(["compare", str(a), str(b)]) == 2


def test_reference_tables_compare_against_themselves():
    for ref in sorted((ROOT / "references").glob("*.csv")):
        ok, lines = cli.compare(ref, ref, orders=0)
        assert ok and lines, ref.name


def test_numerical_failure_exits_3(tmp_path, monkeypatch):
    def broken(cfg):
        raise np.linalg.LinAlgError("SVD did not converge")

    monkeypatch.setitem(exps.EXPERIMENTS, "ex1_torus", (exps.TorusConfig, broken))
    cfg = _write(tmp_path, "[ex1_torus]\nM = 60\nN = 100\n")
    assert cli.main(["solve-static", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    report = (tmp_path / "ex1_torus_failure.txt").read_text()
    assert "LinAlgError" in report and "[ex1_torus]" in report


def test_non_finite_metric_exits_3(tmp_path, monkeypatch):
    def nan_rows(cfg):
        return exps.ExperimentResult([{"experiment": cfg.id, "M": 60, "N": 100, "residual": float("nan")}])

    monkeypatch.setitem(exps.EXPERIMENTS, "ex1_torus", (exps.TorusConfig, nan_rows))
    cfg = _write(tmp_path, "[ex1_torus]\nM = 60\nN = 100\n")
    assert cli.main(["solve-static", "--config", str(cfg), "--out", str(tmp_path)]) == 3


def test_droplet_quick_run_writes_diagnostics(tmp_path):
    assert cli.main(["bench", "ex7_droplet", "--config", str(QUICK / "ex7_droplet.ini"), "--out", str(tmp_path)]) == 0
    cons = _rows(tmp_path / "ex7_droplet_conservation.csv")
    assert list(cons[0]) == ["t", "V", "E_V", "m", "E_m"]
    assert float(cons[0]["E_V"]) == 0.0 and max(float(r["E_V"]) for r in cons) <= 1e-4
    snaps = sorted(tmp_path.glob("ex7_droplet_snapshot_t*.csv"))
    assert len(snaps) == 5
    assert (tmp_path / "ex7_droplet_conservation.svg").exists()
    assert len(list(tmp_path.glob("ex7_droplet_flow_N0_*.npz"))) == 1
    stages = {r["stage"] for r in _rows(tmp_path / "ex7_droplet.csv")}
    assert stages == {"flow", "pde"}


def test_learn_flow_skips_the_pde(tmp_path):
    assert cli.main(["learn-flow", "--config", str(QUICK / "ex7_droplet.ini"), "--out", str(tmp_path)]) == 0
    assert {r["stage"] for r in _rows(tmp_path / "ex7_droplet.csv")} == {"flow"}


def test_sample_writes_points(tmp_path):
    cfg = _write(tmp_path, "[sample]\nsurface = sphere\ncount = 50\nformat = xyz\n")
    assert cli.main(["sample", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    pts = np.loadtxt(tmp_path / "sphere_points.xyz")
    assert pts.shape == (50, 3)
    assert np.allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-10)


def test_thread_env_is_honoured(tmp_path, monkeypatch):
    from threadpoolctl import threadpool_info

    seen = {}

    def probe(cfg):
        seen["limits"] = [p["num_threads"] for p in threadpool_info()]
        return exps.ExperimentResult([{"experiment": cfg.id, "M": 60, "N": 100, "error": 1.0}])

    monkeypatch.setitem(exps.EXPERIMENTS, "ex1_torus", (exps.TorusConfig, probe))
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    cfg = _write(tmp_path, "[ex1_torus]\nM = 60\nN = 100\n")
    assert cli.main(["solve-static", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert all(n == 1 for n in seen["limits"])
    assert os.environ[cli.THREADS_ENV] == "1"
