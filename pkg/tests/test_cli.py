import json
import subprocess
import sys
from pathlib import Path

import pytest

from cylres.cli import ConfigError, format_digest, main, parse_config, report_digest, run

VALIDATE = """kind = "validate"
[profile]
family = "power"
c = 1.0
m = 1.0
"""

MULTI = """seed = 3
[[tasks]]
name = "b"
kind = "bounds"
potentials = [ { family = "power", A = 1.0, m = 1.0 }, { family = "bump", A = 100.0, b = 4.0, delta = 0.5 } ]
z = { grid = { count = 10 } }
[[tasks]]
name = "v"
kind = "validate"
profile = { family = "bump", c = 0.5, b = 6.0 }
"""


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_validate_ok(tmp_path):
    code, man = run(write(tmp_path, VALIDATE), out=tmp_path / "out")
    assert code == 0
    assert man["tasks"][0]["status"] == "ok"
    rep = json.loads((tmp_path / "out" / man["tasks"][0]["name"] / "report.json").read_text())
    assert rep["schema"] == "cylres-report/1"


def test_constant_profile_is_geometry_error(tmp_path):
    cfg = write(tmp_path, 'kind = "validate"\nprofile = { family = "constant" }\n')
    code, man = run(cfg, out=tmp_path / "out")
    assert code == 3
    assert "GeometryError" in man["tasks"][0]["error"]


def test_syntax_error_reports_position(tmp_path):
    cfg = write(tmp_path, 'kind = "bounds"\nz = [[1.0, 1e-6], [-2.0, 0.0]\n')
    with pytest.raises(ConfigError, match=r"cfg\.toml:2: Unclosed array"):
        parse_config(cfg)
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_bad_field_type_names_the_field(tmp_path):
    cfg = write(tmp_path, 'kind = "bounds"\npotentials = [ { family = "power", A = 1.0, m = "x" } ]\n')
    with pytest.raises(ConfigError, match=r"potentials\[0\]\.m"):
        parse_config(cfg)


def test_unknown_field_has_line(tmp_path):
    cfg = write(tmp_path, 'kind = "validate"\ncolour = 3\n[profile]\nfamily = "power"\n')
    with pytest.raises(ConfigError, match=r"cfg\.toml:2: .*colour"):
        parse_config(cfg)


def test_unknown_kind(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(write(tmp_path, 'kind = "teleport"\n'))


def test_json_config_equivalent(tmp_path):
    cfg = write(tmp_path, json.dumps({"kind": "validate", "profile": {"family": "power", "c": 1.0, "m": 1.0}}),
                "cfg.json")
    code, _ = run(cfg, out=tmp_path / "out")
    assert code == 0


def test_outputs_deterministic_across_workers(tmp_path):
    cfg = write(tmp_path, MULTI)
    _, m1 = run(cfg, workers=1, out=tmp_path / "a")
    _, m2 = run(cfg, workers=2, out=tmp_path / "b")
    h1 = {e["path"]: e["sha256"] for e in m1["inventory"] if "sha256" in e and e["path"].endswith((".csv", ".dat"))}
    h2 = {e["path"]: e["sha256"] for e in m2["inventory"] if "sha256" in e and e["path"].endswith((".csv", ".dat"))}
    assert h1 and h1 == h2
    assert m1["config_hash"] == m2["config_hash"]


def test_bounds_digest_and_manifest(tmp_path):
    code, man = run(write(tmp_path, MULTI), out=tmp_path / "out")
    assert code == 0
    rows = report_digest(tmp_path / "out" / "manifest.json")
    top = {r[0]: r for r in rows if r[0]}
    assert top["b"][3] == "PASS" and "worst_ratio" in top["b"][2]
    assert (tmp_path / "out" / "b" / "digest.csv").exists()
    for e in man["inventory"]:
        if "sha256" in e:
            assert (tmp_path / "out" / e["path"]).stat().st_size == e["bytes"]


def test_missing_output_detected(tmp_path):
    run(write(tmp_path, MULTI), out=tmp_path / "out")
    (tmp_path / "out" / "v" / "report.json").unlink()
    rows = report_digest(tmp_path / "out" / "manifest.json")
    assert any(r[0] == "v" and r[3].startswith("MISSING") for r in rows)


def test_empty_digest():
    assert format_digest(report_digest({"tasks": []})) == "(no tasks)"


@pytest.mark.slow
def test_region_rows(tmp_path):
    cfg = write(tmp_path, """kind = "region"
h = [0.2]
[geometry]
profile = { family = "bump", c = 0.5, b = 6.0 }
spectrum = { kind = "circle", count = 41 }
""")
    code, man = run(cfg, out=tmp_path / "out")
    assert code == 0, man["tasks"][0]
    name = man["tasks"][0]["name"]
    assert (tmp_path / "out" / name / "mu_table.csv").read_text().startswith("h,")
    assert man["tasks"][0]["rows"][0].startswith("h=0.2")


def test_console_entry_point(tmp_path):
    cfg = write(tmp_path, VALIDATE)
    proc = subprocess.run([sys.executable, "-m", "cylres", "run", str(cfg), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "PASS" in proc.stdout


def test_defaults_only_reach_tasks_that_read_them(tmp_path):
    cfg = write(tmp_path, """[defaults.geometry]
profile = { family = "bump", c = 0.5, b = 6.0 }
spectrum = { kind = "circle", count = 41 }
[[tasks]]
name = "v"
kind = "validate"
profile = { family = "power", c = 1.0, m = 1.0 }
[[tasks]]
name = "r"
kind = "region"
h = [0.2]
""")
    tasks = {t["name"]: t for t in parse_config(cfg)["tasks"]}
    assert "geometry" not in tasks["v"] and "geometry" in tasks["r"]


def test_typo_in_task_flagged(tmp_path):
    cfg = write(tmp_path, '[[tasks]]\nkind = "validate"\nprofile = { family = "power" }\nr_mx = 1\n')
    with pytest.raises(ConfigError, match="r_mx"):
        parse_config(cfg)


def test_unread_default_is_flagged(tmp_path):
    cfg = write(tmp_path, '[defaults]\nseed_offset = 1\n[[tasks]]\nkind = "validate"\nprofile = { family = "power" }\n')
    with pytest.raises(ConfigError, match=r"defaults\.seed_offset"):
        parse_config(cfg)
