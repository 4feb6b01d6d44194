import json
import subprocess
import sys

import pytest

from tcbands.cli import build_parser, main, run
from tcbands.config import KEYS, KINDS, parse_config
from tcbands.errors import ConfigError

BASE = """
[market]
S0 = 100
mu = 0.08
sigma = 0.2
[preference]
p = 1
[numerics]
seed = 7
"""


def _cfg(extra="", **num):
    text = BASE + "".join(f"{k} = {v}\n" for k, v in num.items()) + extra
    return text


def test_defaults():
    cfg = parse_config(_cfg(eps=0.01), "welfare")
    num = cfg["numerics"]
    assert num["n_steps"] == 10_000 and num["n_paths"] == 10_000 and num["T"] == 1.0
    assert num["threads"] >= 1 and num["start"] == "uniform"
    assert cfg["claim"]["maturity"] == 1.0 and cfg["preference"]["x0"] == 0.0
    assert parse_config(_cfg(eps=0.01, T=2), "band")["numerics"]["n_steps"] == 20_000


@pytest.mark.parametrize(
    "kind,text,msg",
    [
        ("welfare", _cfg(eps=-0.01), "eps"),
        ("welfare", _cfg(eps=1.5), "eps"),
        ("scaling", _cfg(eps_list="0.01"), "at least 3"),
        ("welfare", _cfg(eps=0.01, colour="red"), "unknown keys"),
        ("welfare", _cfg(eps=0.01) + "[extras]\nx = 1\n", "unknown keys"),
        ("welfare", _cfg(), "needs: eps"),
        ("welfare", BASE.replace("sigma = 0.2", "sigma = 0"), "sigma"),
        ("welfare", BASE.replace("seed = 7", ""), "missing required keys: numerics.seed"),
        ("welfare", _cfg(eps="abc"), "cannot parse"),
        ("hedge", _cfg(eps=0.01) + "[claim]\nstrike = 100\n", "basis-risk"),
        ("price", _cfg(eps=0.01, T=1) + "[claim]\nstrike = 100\nmaturity = 2\n", "exceeds"),
        ("semistatic", _cfg(search_lo=1, search_hi=0) + "[claim]\nstrike = 100\nhedge_strike = 110\n", "search_lo"),
        ("welfare", "not an ini", "malformed"),
        ("wobble", BASE, "unknown experiment"),
    ],
)
def test_config_errors(kind, text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text, kind)


def test_every_kind_has_subcommand_and_keys_documented():
    parser = build_parser()
    for kind in KINDS:
        args = parser.parse_args([kind, "--config", "x.ini"])
        assert args.kind == kind
    for sec in KEYS.values():
        assert all(k.help for k in sec.values())


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(_cfg(eps=-0.01))
    assert main(["welfare", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["welfare", "--config", str(tmp_path / "missing.ini")]) == 2
    # a runtime failure inside a module: drift zero makes the shadow cubic degenerate
    deg = tmp_path / "deg.ini"
    deg.write_text(_cfg(eps=0.01, n_steps=10, n_paths=5).replace("mu = 0.08", "mu = 0"))
    assert main(["shadow-check", "--config", str(deg), "--out", str(tmp_path / "d")]) == 1
    assert "error in tcbands.shadow" in capsys.readouterr().err


SMALL = dict(n_steps=200, n_paths=300, chunk_size=128)
CLAIM = "[claim]\nstrike = 100\nhedge_strike = 110\n"
CONFIGS = {
    "band": _cfg(eps=0.01, **SMALL),
    "welfare": _cfg(eps=0.01, **SMALL) + "[output]\nledger_paths = 2\n",
    "scaling": _cfg(eps_list="0.02, 0.01, 0.005", **SMALL),
    "price": _cfg(eps=0.01, **SMALL) + CLAIM,
    "hedge": _cfg(eps=0.01, **SMALL).replace("mu = 0.08", "mu = 0\nmodel = basis-risk\nY0 = 100\nmu_Y = 0\nsigma_Y = 0.25\nrho = 0.8") + CLAIM,
    "semistatic": _cfg(**SMALL) + CLAIM,
    "shadow-check": _cfg(eps=0.01, **SMALL),
}


@pytest.mark.parametrize("kind", KINDS)
def test_every_experiment_writes_reports(kind, tmp_path):
    cfg = parse_config(CONFIGS[kind], kind)
    report = run(cfg, tmp_path)
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk["kind"] == kind and on_disk["results"] == report["results"]
    assert set(on_disk["provenance"]) == {"tool", "version", "seed", "timestamp"}
    assert on_disk["config"]["numerics"]["seed"] == 7
    assert (tmp_path / "report.txt").read_text().startswith("tcbands")
    for f in report["files"]:
        assert (tmp_path / f).stat().st_size > 0


def test_report_values(tmp_path):
    band = run(parse_config(CONFIGS["band"], "band"), tmp_path / "b")["results"]
    assert band["monetary_halfwidth"] == pytest.approx(0.3915, abs=1e-4)
    assert band["monetary_halfwidth_closed_form"] == pytest.approx(band["monetary_halfwidth"], rel=1e-12)
    assert band["monetary_halfwidth_cash_gamma"] == pytest.approx(band["monetary_halfwidth"], rel=1e-12)
    assert band["shadow_halfwidth_shares_t0"] == pytest.approx(band["halfwidth_shares_t0"], rel=1e-10)
    price = run(parse_config(CONFIGS["price"], "price"), tmp_path / "p")["results"]
    assert price["complete_correction_total"]["value"] == pytest.approx(
        price["indifference_pipeline_correction_total"]["value"], rel=1e-10
    )
    semi = run(parse_config(CONFIGS["semistatic"], "semistatic"), tmp_path / "s")["results"]
    assert semi["objective"] < semi["objective_unhedged"]


def test_determinism_across_threads(tmp_path):
    ini = tmp_path / "w.ini"
    ini.write_text(CONFIGS["scaling"])
    outs = []
    for threads in (1, 3):
        d = tmp_path / f"t{threads}"
        assert main(["scaling", "--config", str(ini), "--out", str(d), "--threads", str(threads)]) == 0
        outs.append(d)
    a, b = (json.loads((d / "report.json").read_text()) for d in outs)
    assert a["results"] == b["results"] and a["config"]["numerics"]["threads"] == 1
    assert (outs[0] / "scaling.csv").read_bytes() == (outs[1] / "scaling.csv").read_bytes()


def test_seed_override_changes_results(tmp_path):
    ini = tmp_path / "w.ini"
    ini.write_text(CONFIGS["welfare"])
    main(["welfare", "--config", str(ini), "--out", str(tmp_path / "a")])
    main(["welfare", "--config", str(ini), "--out", str(tmp_path / "b"), "--seed", "8"])
    a, b = (json.loads((tmp_path / d / "report.json").read_text()) for d in "ab")
    assert b["provenance"]["seed"] == 8 and a["results"] != b["results"]


def test_module_entry_point(tmp_path):
    ini = tmp_path / "b.ini"
    ini.write_text(CONFIGS["band"])
    proc = subprocess.run(
        [sys.executable, "-m", "tcbands", "band", "--config", str(ini), "--out", str(tmp_path / "o")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "band.csv").exists()


def test_readme_lists_every_key():
    from pathlib import Path

    readme = (Path(__file__).resolve().parents[1] / "README.md").read_text()
    for sec, keys in KEYS.items():
        for name in keys:
            assert f"| `{sec}` | `{name}` |" in readme
