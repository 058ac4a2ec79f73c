import json

import pytest

from trail.cli import main


def test_run_twice_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--scenario", "paper-params", "--seed", "7", "--out", str(a)]) == 0
    first = capsys.readouterr().out
    assert main(["run", "--scenario", "paper-params", "--seed", "7", "--out", str(b)]) == 0
    assert capsys.readouterr().out == first
    for name in ("events.jsonl", "report.json", "report.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert "8,288" in first


def test_report_headline_preset(capsys):
    assert main(["report", "--preset", "paper", "--format", "table"]) == 0
    rows = {line.split("\t")[0]: line.split("\t") for line in capsys.readouterr().out.splitlines()}
    assert rows["block bytes"][1:3] == ["8288", "8288"]
    assert rows["input bytes (truncated)"][1:3] == ["1056", "1056"]
    assert rows["compact block bytes, 10^4 txs"][1:3] == ["88288", "88288"]
    assert float(rows["device memory bytes"][1]) == pytest.approx(1.63e6, rel=0.01)
    assert float(rows["archive bytes"][1]) == pytest.approx(183e6, rel=0.02)


def test_report_overrides(capsys):
    assert main(["report", "--set", "u=0", "--set", "h_delete=50000"]) == 0
    out = capsys.readouterr().out
    assert "device memory bytes" in out
    with pytest.raises(SystemExit):
        main(["report", "--set", "nope=1"])


def test_verify_clean_and_tampered(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--scenario", "smoke", "--out", str(out)]) == 0
    log = out / "events.jsonl"
    assert main(["verify", str(log)]) == 0
    assert "OK:" in capsys.readouterr().out

    bad = tmp_path / "bad.jsonl"
    fixture = {"type": "fixture", "t": 0, "height": 1, "kind": "block-double-spend",
               "expected": 2, "actual": None, "ok": False}
    bad.write_text(log.read_text() + json.dumps(fixture) + "\n")
    assert main(["verify", str(bad)]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_report_from_log(tmp_path, capsys):
    out = tmp_path / "run"
    main(["run", "--scenario", "smoke", "--out", str(out), "--format", "table"])
    capsys.readouterr()
    assert main(["report", "--log", str(out / "events.jsonl")]) == 0
    assert "block bytes" in capsys.readouterr().out


def test_errors_exit_2(tmp_path, capsys):
    assert main(["run", "--scenario", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert main(["run", "--scenario", str(bad)]) == 2
