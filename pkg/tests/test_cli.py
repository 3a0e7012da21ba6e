import json
import subprocess
import sys

import numpy as np

from latentsteer.cli import main
from latentsteer.geometry import read_pnm


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_steer_writes_trace_and_heatmap(tmp_path, capsys):
    code, out, _ = _run(capsys, "steer", "--scenario", "0", "--trace-out", str(tmp_path / "t.csv"),
                        "--heatmap-out", str(tmp_path / "h.pgm"))
    assert code == 0
    result = json.loads(out)
    assert result["stop_reason"] == "completed" and len(result["energies"]) == 5
    assert (tmp_path / "t.csv").read_text().startswith("iteration,energy,in_region_ratio,stopped")
    assert read_pnm(tmp_path / "h.pgm").shape == (8, 8)


def test_steer_with_config_and_scenario_file(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"T": 2, "energy": "soft"}))
    (tmp_path / "sc.json").write_text(json.dumps({"seed": 4, "prompt": "scribble"}))
    code, out, _ = _run(capsys, "steer", "--scenario", str(tmp_path / "sc.json"),
                        "--config", str(tmp_path / "cfg.json"))
    assert code == 0
    assert len(json.loads(out)["energies"]) <= 3


def test_roc_subcommand(tmp_path, capsys):
    code, out, _ = _run(capsys, "roc", "--methods", "none,steer-hard", "--n", "3",
                        "--report-out", str(tmp_path / "roc.csv"))
    assert code == 0
    assert set(json.loads(out)["accuracy"]) == {"none", "steer-hard"}
    assert len((tmp_path / "roc.jsonl").read_text().splitlines()) == 6


def test_heatmap_from_csv(tmp_path, capsys):
    np.savetxt(tmp_path / "m.csv", np.arange(16.0).reshape(4, 4), delimiter=",")
    code, _, _ = _run(capsys, "heatmap", "--in", str(tmp_path / "m.csv"), "--out", str(tmp_path / "m.pgm"))
    assert code == 0
    assert read_pnm(tmp_path / "m.pgm")[3, 3] == 255


def test_heatmap_leaves_input_csv_alone(tmp_path, capsys):
    src = tmp_path / "m.csv"
    src.write_text("1,2\n3,4\n")
    code, out, _ = _run(capsys, "heatmap", "--in", str(src), "--out", str(tmp_path / "m.pgm"))
    assert code == 0 and json.loads(out)["csv"] is None
    assert src.read_text() == "1,2\n3,4\n"


def test_gradcheck_subcommand(capsys):
    code, out, _ = _run(capsys, "gradcheck", "--n", "2", "--coords", "3")
    assert code == 0
    assert json.loads(out)["max_relative_error"] < 1e-5


def test_errors_are_machine_readable(tmp_path, capsys):
    code, out, err = _run(capsys, "steer", "--weights", str(tmp_path / "missing.bin"), "--scenario", "0")
    assert code == 1 and out == ""
    assert json.loads(err)["error"] == "FileNotFoundError"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "latentsteer", "roc", "--methods", "bogus", "--n", "1",
                           "--report-out", "/dev/null"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "unknown method" in json.loads(proc.stderr)["message"]
