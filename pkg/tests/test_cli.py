import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from tbqkd.cli import EXIT_NO_KEY, EXIT_OK, EXIT_STREAM, EXIT_USAGE, main
from tbqkd.config import SCHEMA
from tbqkd.timetags import write_timetags


def _config(tmp_path, name="run.toml", **channel):
    body = f'schema = "{SCHEMA}"\n[channel]\n' + "".join(f"{k} = {v}\n" for k, v in channel.items())
    p = tmp_path / name
    p.write_text(body)
    return str(p)


def _json(path):
    return json.loads(path.read_text())


def test_simulate_pic_10db_has_key(tmp_path):
    cfg = _config(tmp_path, attenuation_db=10.0)
    code = main(["simulate", "--config", cfg, "--out", str(tmp_path), "--duration", "0.2", "--seed", "3"])
    assert code == EXIT_OK
    report = _json(tmp_path / "report.json")["report"]
    assert report["feasible"] is True and report["l_bits"] > 0
    assert "generated" in _json(tmp_path / "report.json")


def test_simulate_200db_no_key(tmp_path):
    cfg = _config(tmp_path, attenuation_db=200.0)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path), "--no-timestamp"]) == EXIT_NO_KEY
    assert _json(tmp_path / "report.json")["report"]["l_bits"] == 0


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "absent.toml"
    assert main(["simulate", "--config", str(missing)]) == EXIT_USAGE
    assert "absent.toml" in capsys.readouterr().err


def test_invalid_config_field_path(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text(f'schema = "{SCHEMA}"\n[receiver]\nvisibility = 3.0\n')
    assert main(["simulate", "--config", str(p)]) == EXIT_USAGE
    assert "receiver.visibility" in capsys.readouterr().err


def test_lax_mode_accepts_unknown_keys(tmp_path):
    p = tmp_path / "lax.toml"
    p.write_text(f'schema = "{SCHEMA}"\n[channel]\nattenuation_db = 10.0\ncolour = "red"\n')
    args = ["simulate", "--config", str(p), "--out", str(tmp_path), "--duration", "0.01"]
    assert main(args) == EXIT_USAGE
    assert main(args + ["--lax"]) in (EXIT_OK, EXIT_NO_KEY)


def test_outputs_byte_identical_without_timestamp(tmp_path):
    cfg = _config(tmp_path, attenuation_db=20.0)
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        main(["simulate", "--config", cfg, "--out", str(out), "--duration", "0.05", "--no-timestamp", "--tags"])
        outs.append(out)
    for name in ("report.json", "counts.json", "tags.bin"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


@pytest.mark.parametrize("fmt", ["binary", "text"])
def test_analyze_matches_count_mode(tmp_path, fmt):
    cfg = _config(tmp_path, attenuation_db=10.0)
    base = ["--config", cfg, "--out", str(tmp_path), "--seed", "17", "--no-timestamp"]
    code = main(["simulate", *base, "--duration", "0.02", "--tags", "--tag-format", fmt])
    tags = tmp_path / ("tags.bin" if fmt == "binary" else "tags.txt")
    assert main(["analyze", str(tags), *base, "--window", "0.005"]) == code
    sim = _json(tmp_path / "report.json")["report"]
    ana = _json(tmp_path / "analyze_report.json")["report"]
    assert sim == ana
    rows = list(csv.reader((tmp_path / "qber.csv").open()))
    assert rows[0] == ["window_start_s", "qber", "samples"] and len(rows) == 5


def test_analyze_truncated_stream(tmp_path, capsys):
    cfg = _config(tmp_path, attenuation_db=10.0)
    main(["simulate", "--config", cfg, "--out", str(tmp_path), "--duration", "0.005", "--tags"])
    blob = (tmp_path / "tags.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(blob[:16 + 9 * 100 + 5])
    assert main(["analyze", str(tmp_path / "cut.bin"), "--out", str(tmp_path)]) == EXIT_STREAM
    assert "byte offset 916" in capsys.readouterr().err


def test_analyze_dark_stream(tmp_path, capsys):
    rng = np.random.default_rng(0)
    F = 4095 * 1680
    ts = np.sort(rng.integers(0, 300 * F, 30_000)).astype(np.uint64)
    write_timetags(tmp_path / "dark.bin", rng.integers(1, 4, 30_000), ts, declared_channels=[1, 2, 3])
    assert main(["analyze", str(tmp_path / "dark.bin"), "--out", str(tmp_path)]) == EXIT_STREAM
    assert "frame structure" in capsys.readouterr().err


def test_sweep(tmp_path):
    atts = ",".join(str(a) for a in range(0, 50, 5))
    assert main(["sweep", "--out", str(tmp_path), "--attenuations", atts]) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
    assert len(rows) == 10
    rates = [float(r["skr_bps"]) for r in rows]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    both = list(csv.DictReader((tmp_path / "sweep_variants.csv").open()))
    at40 = {r["variant"]: float(r["skr_bps"]) for r in both if r["attenuation_db"] == "40"}
    assert 637.8 / 2 <= at40["pic"] <= 637.8 * 2
    assert 110 / 2 <= at40["fiber"] <= 110 * 2


def test_sweep_empty_list(tmp_path):
    assert main(["sweep", "--out", str(tmp_path), "--attenuations", ""]) == EXIT_USAGE


def test_bad_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        main(["sweep", "--variant", "copper"])
    assert err.value.code == EXIT_USAGE


def test_optimize(tmp_path):
    cfg = _config(tmp_path, attenuation_db=0.0)
    args = ["optimize", "--config", cfg, "--out", str(tmp_path), "--no-timestamp"]
    assert main(args) == EXIT_OK
    first = (tmp_path / "optimize.json").read_bytes()
    assert main(args) == EXIT_OK
    assert (tmp_path / "optimize.json").read_bytes() == first
    pinned = args + ["--mu-signal", "0.48", "--mu-decoy", "0.12", "--p-mu1", "0.7"]
    assert main(pinned) == EXIT_OK
    res = _json(tmp_path / "optimize.json")["result"]
    assert (res["mu_signal"], res["mu_decoy"], res["p_mu1"]) == (0.48, 0.12, 0.7)


def test_optimize_infeasible(tmp_path):
    cfg = _config(tmp_path, attenuation_db=45.0)
    p = tmp_path / "fiber.toml"
    p.write_text(open(cfg).read() + '[receiver]\nvariant = "fiber"\n')
    assert main(["optimize", "--config", str(p), "--out", str(tmp_path)]) == EXIT_NO_KEY


def _series(path):
    rows = list(csv.DictReader(path.open()))
    return np.array([float(r["window_start_s"]) for r in rows]), np.array([float(r["qber"]) for r in rows])


def test_stability_pic_50_hours(tmp_path):
    assert main(["stability", "--out", str(tmp_path), "--duration", str(50 * 3600), "--window", "600",
                 "--variant", "pic"]) == EXIT_OK
    _, q = _series(tmp_path / "stability_pic.csv")
    assert abs(q.mean() - (1 - 0.96) / 2) <= 0.005


def test_stability_fiber_gaps(tmp_path):
    assert main(["stability", "--out", str(tmp_path), "--duration", str(5 * 3600), "--window", "300"]) == EXIT_OK
    t, _ = _series(tmp_path / "stability_fiber.csv")
    assert np.any(np.diff(t) > 300 * 1.5)
    tp, _ = _series(tmp_path / "stability_pic.csv")
    assert len(tp) == 60


def test_stability_single_window_and_bad_window(tmp_path):
    assert main(["stability", "--out", str(tmp_path), "--duration", "3600", "--window", "3600"]) == EXIT_OK
    t, _ = _series(tmp_path / "stability_pic.csv")
    assert len(t) == 1
    assert main(["stability", "--out", str(tmp_path), "--duration", "600", "--window", "3600"]) == EXIT_USAGE


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tbqkd", "sweep", "--out", str(tmp_path), "--attenuations", "10"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_OK and "10 dB" in proc.stdout
