import csv
import io
import json

import numpy as np
import pytest

from tbqkd.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_OK, SESSION_COLUMNS, main
from tbqkd.model import config_to_dict, default_setup
from tbqkd.session import read_key


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_rate_vs_loss_stdout(capsys):
    assert main(["rate-vs-loss", "--start", "20", "--stop", "22", "--step", "1"]) == EXIT_OK
    out = rows(capsys.readouterr().out)
    assert [float(r["loss_db"]) for r in out] == [20.0, 21.0, 22.0]
    assert float(out[1]["skr"]) > 0


def test_rate_vs_power_to_file(tmp_path, capsys):
    path = tmp_path / "p.csv"
    assert main(["rate-vs-power", "--start", "-30", "--stop", "-26", "--step", "1",
                 "--out", str(path)]) == EXIT_OK
    out = rows(path.read_text())
    assert float(out[-1]["skr"]) == 0.0 and float(out[0]["skr"]) > 0
    assert capsys.readouterr().out == ""


@pytest.mark.parametrize("argv", [
    ["rate-vs-loss", "--step", "0"],
    ["rate-vs-loss", "--start", "5", "--stop", "1"],
    ["rate-vs-loss", "--loss", "-3"],
    ["rate-vs-loss", "--config", "/nonexistent/config.json"],
    ["stability", "--duration", "0"],
    ["stability", "--loss-step", "oops"],
    ["stability", "--mode", "session"],
    ["session", "--sample-fraction", "1.5"],
    ["calibrate", "--seed", "-1"],
])
def test_config_errors_exit_2(argv, capsys):
    assert main(argv) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_bad_config_file(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    assert main(["rate-vs-loss", "--config", str(path)]) == EXIT_CONFIG
    config, link = default_setup()
    d = config_to_dict(config, link)
    d["link"]["dark_rate"] = -1
    path.write_text(json.dumps(d))
    assert main(["rate-vs-loss", "--config", str(path)]) == EXIT_CONFIG
    assert "dark_rate" in capsys.readouterr().err


def test_session_low_loss(tmp_path, capsys):
    code = main(["session", "--loss", "5", "--block-size", "200000", "--seed", "3",
                 "--key-dir", str(tmp_path)])
    assert code == EXIT_OK
    (row,) = rows(capsys.readouterr().out)
    assert tuple(row) == SESSION_COLUMNS
    assert row["keys_equal"] == "1" and row["abort_reason"] == ""
    a, b = read_key(tmp_path / "alice.key"), read_key(tmp_path / "bob.key")
    assert np.array_equal(a, b) and a.size == int(row["key_length"]) > 0
    assert (tmp_path / "transcript.bin").stat().st_size > 0


def test_session_high_loss_aborts(capsys):
    code = main(["session", "--loss", "35", "--block-size", "100000"])
    assert code == EXIT_ABORT
    captured = capsys.readouterr()
    assert "no extractable key" in captured.err
    assert rows(captured.out)[0]["abort_reason"] == "no extractable key"


def test_session_at_21db(capsys):
    assert main(["session", "--block-size", "1000000"]) == EXIT_OK
    (row,) = rows(capsys.readouterr().out)
    assert int(row["key_length"]) > 0 and row["keys_equal"] == "1"


def test_session_two_process_matches_in_process(tmp_path, capsys):
    one, two = tmp_path / "one", tmp_path / "two"
    base = ["session", "--loss", "10", "--block-size", "200000", "--seed", "5"]
    assert main(base + ["--key-dir", str(one)]) == EXIT_OK
    assert main(base + ["--two-process", "--key-dir", str(two)]) == EXIT_OK
    for name in ("alice.key", "bob.key"):
        assert (one / name).read_bytes() == (two / name).read_bytes()
    assert (one / "transcript.bin").read_bytes() == (two / "transcript.bin").read_bytes()


def test_calibrate(tmp_path, capsys):
    path = tmp_path / "cal.csv"
    assert main(["calibrate", "--out", str(path)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "intrinsic_error" in text and "crosstalk_coeff" in text
    (row,) = rows(path.read_text())
    assert float(row["skr_electrical"]) == pytest.approx(4530, rel=1e-6)
    assert float(row["loss_cutoff_db"]) == pytest.approx(28.5, abs=1e-3)


def test_stability(capsys):
    assert main(["stability", "--duration", "3600", "--interval", "1200", "--sync", "optical",
                 "--loss-step", "1200:0.5"]) == EXIT_OK
    out = rows(capsys.readouterr().out)
    assert len(out) == 3
    assert float(out[0]["loss_db"]) == 21.0 and float(out[1]["loss_db"]) == 21.5
