import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from spingap.cli import ConfigError, fmt_float, main, parse_config, to_csv, to_json

GAP = """\
[experiment]
kind = "gap_exact"

[potential]
phi = "quadratic"
phi_params = [0.5]

[grid]
rho = [0.0]
n = [2]
"""


def _run(tmp_path, text, cmd, *extra, name="run"):
    cfg = tmp_path / f"{name}.toml"
    cfg.write_text(text)
    out = tmp_path / f"{name}.out"
    code = main([cmd, "--config", str(cfg), "--out", str(out), *extra])
    return code, out


def test_gap_gaussian_row(tmp_path):
    code, out = _run(tmp_path, GAP, "gap")
    assert code == 0
    header, row = out.read_text().splitlines()
    vals = dict(zip(header.split(","), row.split(",")))
    assert abs(float(vals["gamma"]) - 1.0) <= 1e-4
    assert vals["method"] == "exact_eigen"
    man = json.loads((tmp_path / "run.out.manifest.json").read_text())
    assert man["kind"] == "gap_exact" and "numpy" in man["versions"] and man["wall_time_s"] >= 0


def test_paths_json(tmp_path):
    text = '[potential]\nphi = "quadratic"\n[grid]\nd = 2\nl = [4]\n'
    code, out = _run(tmp_path, text, "paths", "--format", "json")
    assert code == 0
    row = json.loads(out.read_text())["rows"][0]
    assert row["max_length"] == 6 and row["max_congestion"] == 32


def test_empty_rho_grid(tmp_path, capsys):
    code, out = _run(tmp_path, GAP.replace("rho = [0.0]", "rho = []"), "gap")
    assert code == 2
    err = capsys.readouterr().err
    assert "rho grid empty" in err and "line 9" in err
    assert not out.exists()


def test_syntax_error_has_line(tmp_path, capsys):
    code, _ = _run(tmp_path, GAP.replace("n = [2]", "n = [2"), "gap")
    assert code == 2 and "line" in capsys.readouterr().err


def test_unknown_family(tmp_path, capsys):
    code, _ = _run(tmp_path, GAP.replace('"quadratic"', '"sextic"'), "gap")
    assert code == 2 and "line 5" in capsys.readouterr().err


def test_kind_mismatch(tmp_path):
    code, _ = _run(tmp_path, GAP, "tilt")
    assert code == 2


def test_selfcheck_exit_code(tmp_path, capsys):
    code, _ = _run(tmp_path, GAP + "\n[numerics]\ntolerance = -1.0\n", "gap")
    assert code == 3 and "resolution_doubling" in capsys.readouterr().err


def test_deterministic_and_thread_independent(tmp_path):
    text = ('[potential]\nphi = "quartic"\npsi = "cos"\npsi_params = [0.3, 1.0]\n'
            '[grid]\nrho = {start = -1, stop = 1, num = 3}\n')
    _, a = _run(tmp_path, text, "tilt", name="a")
    _, b = _run(tmp_path, text, "tilt", "--threads", "2", name="b")
    assert a.read_bytes() == b.read_bytes()


def test_sample_needs_seed(tmp_path):
    text = ('[potential]\nphi = "quartic"\n[grid]\nrho = [1.0]\nn = [4]\n'
            '[sampler]\nchains = 2\nsteps = 200\nburn_in = 50\nthin = 5\n')
    assert _run(tmp_path, text, "sample", name="noseed")[0] == 2
    code, out = _run(tmp_path, text, "sample", "--seed", "7", "--format", "json", name="seed")
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["max_sum_error"] <= 1e-9 and len(doc["rows"]) == 4


def test_parse_grid_table():
    cfg = parse_config('[potential]\nphi = "quartic"\n[grid]\nrho = {start = 0, stop = 1, num = 5}\n', "tilt_sweep")
    assert cfg.rho == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_unknown_section():
    with pytest.raises(ConfigError) as exc:
        parse_config('[potential]\nphi = "quartic"\n[plot]\nx = 1\n', "tilt_sweep")
    assert exc.value.line == 3


def test_csv_and_json_floats():
    assert to_csv([{"a": 0.1, "b": "x"}]) == "a,b\n0.10000000000000001,x\n"
    assert to_json({"v": [1.0 / 3.0, math.nan]}) == '{"v": [0.33333333333333331, null]}'


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_roundtrip(x):
    assert float(fmt_float(x)) == x
