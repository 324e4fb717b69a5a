import csv
import json

import numpy as np
import pytest

from qsafenet.cli import main
from qsafenet.errors import AssignmentMismatch, NoSamples, ParseError, ValidationError
from qsafenet.harness import PhaseTimings, emit_report, load_topology, parse_topology, read_topology, run_case


def test_load_bundled_fig2():
    cfg = read_topology("fig2.json")
    assert {n.id: n.kind for n in cfg.nodes} == {"A": "CN", "B": "CN", "C": "CN", "D": "QN", "E": "QN", "F": "QN"}
    assert {(l.a, l.b) for l in cfg.links} == {("D", "E"), ("E", "F")}


def test_parse_errors(tmp_path):
    with pytest.raises(ParseError):
        parse_topology("")
    with pytest.raises(ParseError):
        parse_topology("{not json")
    with pytest.raises(ParseError):
        parse_topology('{"links": []}')
    with pytest.raises(ParseError):
        read_topology(tmp_path / "missing.json")


def test_validation_errors():
    cn_link = {"nodes": [{"id": "A", "kind": "CN"}, {"id": "D", "kind": "QN"}], "links": [{"a": "A", "b": "D"}]}
    with pytest.raises(ValidationError):
        parse_topology(json.dumps(cn_link))
    dup = {"nodes": [{"id": "A", "kind": "QN"}, {"id": "A", "kind": "QN"}]}
    with pytest.raises(ValidationError):
        parse_topology(json.dumps(dup))
    bad_kind = {"nodes": [{"id": "A", "kind": "XN"}]}
    with pytest.raises(ValidationError):
        parse_topology(json.dumps(bad_kind))


def test_config_round_trip():
    cfg = read_topology("fig2.json")
    assert parse_topology(json.dumps(cfg.to_dict())) == cfg


@pytest.mark.parametrize("case", ["T1", "T2", "T3", "T4"])
def test_run_case(fig2, case):
    result = run_case(fig2, case, iterations=3)
    assert result.passed and result.passes == 3
    assert {s.side for s in result.samples} == {"INITIATOR", "TARGET"}
    assert len(result.samples) == 6


def test_t2_after_link_removal_is_mismatch(fig2):
    fig2.remove_link("D-E")
    with pytest.raises(AssignmentMismatch):
        run_case(fig2, "T2", iterations=1)
    result = run_case(fig2, "T2", iterations=2, strict=False)
    assert not result.passed and len(result.failures) == 2


def _sample(v, level="L1", side="INITIATOR"):
    return PhaseTimings("s", level, side, v, v, v, v, 4 * v, mode="inproc")


def test_emit_report_statistics(tmp_path):
    values = [float(i) for i in range(1, 101)]
    paths = emit_report([_sample(v) for v in values], tmp_path)
    summary = json.loads(paths["json"].read_text())["summary"]
    stats = summary["inproc"]["L1"]["INITIATOR"]["t_e2e"]
    arr = 4 * np.array(values)
    assert stats["median"] == pytest.approx(float(np.median(arr)))
    assert stats["mean"] == pytest.approx(202.0)
    assert stats["p1"] == pytest.approx(float(np.percentile(arr, 1)))
    assert stats["p99"] == pytest.approx(float(np.percentile(arr, 99)))
    assert stats["n"] == 100
    with paths["csv"].open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 100 and float(rows[0]["t_e2e"]) == 4.0


def test_emit_report_empty(tmp_path):
    with pytest.raises(NoSamples):
        emit_report([], tmp_path)


def test_cli_run_all(tmp_path, capsys):
    assert main(["run", "--iterations", "2", "--report", str(tmp_path), "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4
    assert (tmp_path / "summary.json").exists()


def test_cli_failure_exit_code(tmp_path, capsys):
    cfg = read_topology("fig2.json").to_dict()
    cfg["links"] = [l for l in cfg["links"] if l["id"] != "D-E"]
    path = tmp_path / "cut.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", "--topology", str(path), "--case", "T2", "--iterations", "1"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_cli_load_error(tmp_path, capsys):
    empty = tmp_path / "empty.json"
    empty.write_text("")
    assert main(["run", "--topology", str(empty)]) == 2
    assert "ParseError" in capsys.readouterr().err


def test_net_mode_smoke():
    with load_topology("fig2.json", mode="net", seed=2) as tb:
        for case in ("T1", "T2", "T3", "T4"):
            assert run_case(tb, case, iterations=2).passes == 2


def test_single_sample_statistics_collapse(tmp_path):
    paths = emit_report([_sample(2.5)], tmp_path)
    stats = json.loads(paths["json"].read_text())["summary"]["inproc"]["L1"]["INITIATOR"]["t_assignment"]
    assert {k: v for k, v in stats.items() if k != "n"} == dict.fromkeys(["median", "mean", "p25", "p75", "p1", "p99"], 2.5)
