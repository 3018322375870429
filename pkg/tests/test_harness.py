import json
import os

import pytest

from exanet.harness import bench, compare
from exanet.harness.cli import main
from exanet.harness.report import ReportRow, from_csv, summary, to_csv, to_json
from exanet.harness.scenario import ConfigError, ScenarioInvalid, loads, parse_size

SCN = os.path.join(os.path.dirname(__file__), "..", "scenarios")

BASE = {"name": "tiny", "benchmark": "latency", "dims": "2,1,1",
        "pairs": "M1QAF1-M1QAF2, M1QAF1-M1QBF1", "sizes": "0, 64", "iterations": "4",
        "warmup": "1"}


def scenario_text(tail="", **over):
    keys = dict(BASE, **over)
    return "[scenario]\n" + "".join(f"{k} = {v}\n" for k, v in keys.items()) + tail


LAT = scenario_text()


def test_parse_size():
    assert [parse_size(x) for x in ("0", "64", "4K", "4k", "1M", "2MB")] == \
        [0, 64, 4096, 4096, 1 << 20, 2 << 20]


def test_loads_fields_and_seed_override():
    scn = loads(scenario_text("[faults]\nloss_rate = 0.02\n", seed=3), seed=11)
    assert scn.pairs == (("M1QAF1", "M1QAF2"), ("M1QAF1", "M1QBF1"))
    assert scn.sizes == (0, 64) and scn.dims == (2, 1, 1)
    assert scn.seed == 11 and scn.loss_rate == 0.02
    assert json.loads(scn.to_json())["params"]["link_latency_ns"] == 120.0


@pytest.mark.parametrize("text", [
    "no section here", "[other]\nx = 1\n", scenario_text(colour="red"),
    scenario_text(iterations="many"), LAT + "[calibration]\nbogus = 1\n",
    LAT + "[calibration]\ntlb_entries = 2.5\n", scenario_text(pairs="M1QAF1"),
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        loads(text)


@pytest.mark.parametrize("text", [
    scenario_text(benchmark="pingpong"), scenario_text(warmup=9), scenario_text(sizes="64, 0"),
    scenario_text(dims="0,1,1"), LAT + "[faults]\nloss_rate = 1.5\n",
    LAT + "[calibration]\nlink_latency_ns = -5\n",
])
def test_invariant_violations(text):
    with pytest.raises(ScenarioInvalid):
        loads(text)


def test_latency_rows_and_warmup():
    rows = bench.run(loads(LAT))
    assert [(r.path_class, r.size_bytes) for r in rows] == [
        ("Intra-QFDB-sh", 0), ("Intra-QFDB-sh", 64), ("Intra-mezz-sh", 0), ("Intra-mezz-sh", 64)]
    assert rows[0].paper_ref == "lat0.intra_qfdb_sh"
    assert rows[0].value == pytest.approx(1.293, rel=0.02)
    assert rows[0].deviation_pct == pytest.approx((rows[0].value - 1.293) / 1.293 * 100, abs=1e-3)


def test_pair_benchmark_needs_two_ranks():
    with pytest.raises(bench.BadRankCount):
        bench.run(loads(scenario_text(n_ranks=3)))


def test_bcast_single_rank_is_zero():
    rows = bench.run(loads("[scenario]\nbenchmark = bcast\nn_ranks = 1\nsizes = 1\n"))
    assert rows[0].value == 0.0


def test_accel_constraint_gives_fallback_row():
    text = "[scenario]\nbenchmark = allreduce_accel\nn_ranks = 12\nsizes = 256\nranks_per_fpga = 1\nrepetitions = 1\n"
    rows = bench.run(loads(text))
    assert [r.path_class for r in rows] == ["fallback"]


def test_csv_round_trip_and_json():
    rows = [ReportRow("bw", "Intra-QFDB-sh", 2, 4194304, "bandwidth_gbps", 13.0, None,
                      "bw4m.intra_qfdb_sh", -0.794),
            ReportRow("latency", "Intra-FPGA", 2, 0, "latency_us", 1.17, 1.17, "", None)]
    text = to_csv(rows)
    assert text.splitlines()[0] == ("benchmark,path_class,n_ranks,size_bytes,metric,value,"
                                    "model_value,paper_ref,deviation_pct")
    assert from_csv(text) == rows
    doc = json.loads(to_json(rows, {"seed": 1}))
    assert doc["metadata"] == {"seed": 1} and len(doc["rows"]) == 2
    assert "FLAG" in summary(rows, 0.5) and "FLAG" not in summary(rows)


def test_compare_reports_model_gaps():
    rows = {(r.paper_ref, r.metric): r for r in compare.compare()}
    assert rows[("lat0.inter_mezz_312", "paper_vs_model")].deviation_pct == pytest.approx(-2.294, abs=0.01)
    for rid in ("lat0.intra_mezz_mh2", "lat0.intra_mezz_mh3"):
        assert 10 < abs(rows[(rid, "model_vs_paper")].deviation_pct) <= 15
    flagged = {r.paper_ref for r in compare.flagged(rows.values())}
    assert {"lat0.intra_mezz_mh2", "lat0.intra_mezz_mh3"} <= flagged
    assert "lat0.intra_qfdb_sh" not in flagged


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.scn"
    bad.write_text("garbage")
    invalid = tmp_path / "invalid.scn"
    invalid.write_text(scenario_text(warmup=99))
    out = str(tmp_path / "res")
    assert main(["frobnicate"]) == 1
    assert main([]) == 1
    assert main(["run"]) == 1
    assert main(["run", str(tmp_path / "missing.scn")]) == 1
    assert main(["run", str(bad)]) == 1
    assert main(["run", str(invalid), "--out", out]) == 2
    err = capsys.readouterr().err
    assert "usage" in err and "invalid scenario" in err


def test_cli_run_compare_sweep(tmp_path):
    scn = tmp_path / "tiny.scn"
    scn.write_text(LAT)
    out = str(tmp_path / "res")
    assert main(["run", str(scn), "--out", out]) == 0
    csv_path = os.path.join(out, "tiny.csv")
    assert len(from_csv(open(csv_path).read())) == 4
    assert main(["compare", "--results", csv_path, "--out", out]) == 0
    joined = from_csv(open(os.path.join(out, "compare.csv")).read())
    assert any(r.metric == "sim_vs_paper" for r in joined)
    assert main(["sweep", str(scn), "--sizes", "0,1", "--out", out, "--format", "json"]) == 0
    doc = json.load(open(os.path.join(out, "tiny_sweep.json")))
    assert len(doc["rows"]) == 4 and doc["metadata"]["sweep_sizes"] == [0, 1]
    assert main(["trace", str(scn), "--out", out]) == 0
    assert os.path.getsize(os.path.join(out, "tiny.trace")) > 0


def test_cli_is_deterministic(tmp_path):
    lossy = os.path.join(SCN, "lossy.scn")
    outs = []
    for k in range(2):
        d = str(tmp_path / f"r{k}")
        assert main(["run", lossy, "--out", d]) == 0
        outs.append(open(os.path.join(d, "lossy.csv"), "rb").read())
    assert outs[0] == outs[1]
