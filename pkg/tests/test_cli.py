import csv
import json
import time
from pathlib import Path

import pytest

from argus_dl.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_smoke_run_rows_and_speed(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ARGUS_DL_OUT", str(tmp_path))
    t0 = time.time()
    assert main(["run", str(CONFIGS / "smoke.cfg"), "--dump-triggers"]) == 0
    assert time.time() - t0 < 30
    out = tmp_path / "smoke-seed1"
    metrics = rows(out / "metrics.csv")
    assert len(metrics) == 5 * 8
    assert sorted({int(r["round"]) for r in metrics}) == list(range(5))
    assert set(metrics[0]) >= {"round", "node", "role", "ca", "asr", "rejections_out",
                               "rejections_in", "trusted", "suspected", "ejected"}
    edges = rows(out / "edges.csv")
    assert {r["decision"] for r in edges} <= {"accepted", "rejected_local+collab",
                                              "rejected_state", "rejected_policy"}
    assert json.loads((out / "calibration.json").read_text())["window"] == 5
    for pgm in (out / "triggers").glob("*.pgm"):
        lines = pgm.read_text().split("\n")
        assert lines[0] == "P2" and lines[1] == "16 16"


def test_run_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(CONFIGS / "smoke.cfg"), "--out", str(a)]) == 0
    assert main(["run", str(CONFIGS / "smoke.cfg"), "--out", str(b)]) == 0
    for name in ("metrics.csv", "edges.csv", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_missing_section_exit_code(tmp_path, capsys):
    text = (CONFIGS / "smoke.cfg").read_text().replace("[dataset]", "[oops]")
    bad = tmp_path / "bad.cfg"
    bad.write_text(text)
    assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "dataset" in capsys.readouterr().err


def test_sweep_aggregates(tmp_path):
    base = tmp_path / "base.cfg"
    base.write_text((CONFIGS / "smoke.cfg").read_text().replace("rounds = 5", "rounds = 2"))
    spec = tmp_path / "s.cfg"
    spec.write_text("[sweep]\nbase = base.cfg\nseeds = 1,2\ndefense.kind = none,oracle\n")
    out = tmp_path / "agg.csv"
    assert main(["sweep", str(spec), "--out", str(out)]) == 0
    table = rows(out)
    assert [r["defense.kind"] for r in table] == ["none", "oracle"]
    assert all(r["status"] == "ok" and r["seeds"] == "2" for r in table)
    assert any(float(r["ca_std"]) > 0 for r in table)


def test_single_cell_sweep_matches_run(tmp_path):
    base = tmp_path / "base.cfg"
    base.write_text((CONFIGS / "smoke.cfg").read_text().replace("rounds = 5", "rounds = 2"))
    spec = tmp_path / "s.cfg"
    spec.write_text("[sweep]\nbase = base.cfg\nseeds = 1\n")
    assert main(["sweep", str(spec), "--out", str(tmp_path / "agg.csv")]) == 0
    assert main(["run", str(base), "--out", str(tmp_path / "r")]) == 0
    agg = rows(tmp_path / "agg.csv")[0]
    final = [r for r in rows(tmp_path / "r" / "metrics.csv")
             if r["round"] == "1" and r["role"] == "honest"]
    ca = sum(float(r["ca"]) for r in final) / len(final)
    assert float(agg["ca_mean"]) == pytest.approx(ca, abs=1e-12)
    assert float(agg["ca_std"]) == 0.0


def test_sweep_bad_spec(tmp_path):
    spec = tmp_path / "s.cfg"
    spec.write_text("[sweep]\nseeds = 1\n")
    assert main(["sweep", str(spec)]) == 2


def test_calibrate_record(capsys):
    assert main(["calibrate", "--height", "16", "--width", "16", "--k", "13", "--window", "5",
                 "--samples", "2000"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert {"xi", "mean_sim", "std_sim", "height", "window"} <= set(rec)
    assert 0 < rec["mean_sim"] < rec["xi"] < 1


def test_theory_table(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["theory", "--p-fp", "0.011,0.1", "--T", "20,50", "--d", "2,3",
                 "--out", str(out)]) == 0
    table = rows(out)
    assert len(table) == 8
    first = table[0]
    assert float(first["pi_mal"]) == pytest.approx(0.63488, abs=1e-12)
    assert first["mc_mal_eject"] == ""


def test_theory_rejects_small_trial_count():
    assert main(["theory", "--trials", "100"]) == 2
