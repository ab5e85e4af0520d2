import json

import numpy as np
import pytest

from main import build_parser, main
from utils import read_csv

STARKMAP_CONFIG = """
[run]
scenario = smoke
model = hydrogen

[physics]
n = 5

[sweep]
start = 0.0
stop = 1.0
points = 3
"""

RABI_CONFIG = """
[physics]
n = 5

[sweep]
start = 0.0
stop = 1.0
points = 11
"""


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--version"])
    assert exc.value.code == 0
    assert "rydberg-transfer 1.0.0" in capsys.readouterr().out


def test_starkmap_run_writes_table_and_summary(tmp_path, write_config):
    out = tmp_path / "out"
    status = main(["--output-dir", str(out), "--config", str(write_config(STARKMAP_CONFIG)), "starkmap"])
    assert status == 0

    table = read_csv(out / "starkmap.csv")
    assert table["F_V_per_cm"] == pytest.approx([0.0, 0.5, 1.0])
    offsets = [values for name, values in table.items() if name.endswith("_over_2pi_MHz")]
    assert offsets
    assert all(values[0] == 0.0 for values in offsets)

    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok"
    assert summary["subcommand"] == "starkmap"
    assert summary["scenario"] == "smoke"
    assert summary["config"]["physics"]["n"] == 5
    assert summary["files"] == ["starkmap.csv"]


def test_unknown_config_key_is_a_config_error(tmp_path, write_config, capsys):
    out = tmp_path / "out"
    config = write_config("[physics]\nn = 5\nmagnetic_field = 1.0\n")
    status = main(["--output-dir", str(out), "--config", str(config), "starkmap"])
    assert status == 2
    record = json.loads((out / "error.json").read_text())
    assert record["status"] == "error"
    assert record["error_type"] == "ConfigError"
    assert record["subcommand"] == "starkmap"
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1]) == record


def test_missing_config_file(tmp_path):
    status = main(["--output-dir", str(tmp_path), "--config", str(tmp_path / "absent.ini"), "rabi"])
    assert status == 2


def test_rabi_runs_are_reproducible(tmp_path, write_config):
    config = str(write_config(RABI_CONFIG))
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["--output-dir", str(first), "--config", config, "rabi"]) == 0
    assert main(["--output-dir", str(second), "--config", config, "--workers", "2", "rabi"]) == 0
    assert (first / "rabi.csv").read_bytes() == (second / "rabi.csv").read_bytes()

    table = read_csv(first / "rabi.csv")
    assert table["c"][0] == pytest.approx(0.0, abs=1e-12)
    total = sum(values for name, values in table.items() if name != "time_us")
    assert np.allclose(total, 1.0, atol=1e-6)


def test_simulate_schedule_requires_a_schedule_file(tmp_path):
    status = main(["--output-dir", str(tmp_path), "simulate-schedule"])
    assert status == 2
    assert json.loads((tmp_path / "error.json").read_text())["subcommand"] == "simulate-schedule"
