import json

import pytest

from mfcontrol.cli import list_pipelines, main, run

MARKS = [{"z": -0.5, "rate": 0.3}]


def write_cfg(tmp_path, name="cfg.json", **body):
    p = tmp_path / name
    p.write_text(json.dumps(body))
    return str(p)


def test_pipeline_listing_is_stable(capsys):
    names = [n for n, _ in list_pipelines()]
    assert names == ["duality-suite", "gateaux-suite", "malliavin-adjoint",
                     "bsde-suite", "lq-solve", "cross-check"]
    assert main(["list"]) == 0
    out = capsys.readouterr().out
    for n in names:
        assert n in out


def test_unknown_key_rejected(tmp_path):
    cfg = write_cfg(tmp_path, pipeline="duality-suite", n_pahts=100)
    assert run(cfg) == 2


def test_unknown_pipeline_rejected(tmp_path):
    cfg = write_cfg(tmp_path, pipeline="frobnicate")
    assert run(cfg) == 2


def test_missing_config_rejected(tmp_path):
    assert run(str(tmp_path / "nope.json")) == 2


def test_nested_unknown_keys_rejected(tmp_path):
    cfg = write_cfg(tmp_path, pipeline="duality-suite",
                    grid={"T": 1.0, "n": 10})
    assert run(cfg) == 2
    cfg = write_cfg(tmp_path, pipeline="duality-suite",
                    levy={"marks": [{"z": 0.5, "intensity": 0.3}]})
    assert run(cfg) == 2


def test_duality_pipeline_runs_and_reruns_identically(tmp_path):
    cfg = write_cfg(tmp_path, pipeline="duality-suite", seed=5, n_paths=3000,
                    grid={"T": 1.0, "steps": 10}, levy={"marks": MARKS},
                    out_dir=str(tmp_path / "a"))
    assert main(["run", cfg]) == 0
    for fn in ("duality.csv", "summary.txt", "resolved_config.json"):
        assert (tmp_path / "a" / fn).exists()
    summary = (tmp_path / "a" / "summary.txt").read_text()
    assert "PASS" in summary and "FAIL" not in summary
    assert main(["run", cfg, "--out", str(tmp_path / "b")]) == 0
    assert ((tmp_path / "a" / "duality.csv").read_bytes()
            == (tmp_path / "b" / "duality.csv").read_bytes())
    assert ((tmp_path / "a" / "summary.txt").read_bytes()
            == (tmp_path / "b" / "summary.txt").read_bytes())


def test_lq_control_free_shortcut(tmp_path):
    params = dict(A=0.1, C=0.0, D=0.2, F=0.0, S=(0.1,), I=(0.0,),
                  L=1.0, O=1.0, M=0.5, N_term=1.0, x0=1.0, h0=0.0, h1=0.5)
    cfg = write_cfg(tmp_path, pipeline="lq-solve", seed=3, n_paths=2000,
                    grid={"T": 1.0, "steps": 10}, levy={"marks": MARKS},
                    model={"name": "lq_meanfield", "params": params},
                    out_dir=str(tmp_path / "lq"))
    assert run(cfg) == 0
    summary = (tmp_path / "lq" / "summary.txt").read_text()
    assert "control-free shortcut" in summary
    assert (tmp_path / "lq" / "cost.csv").exists()


def test_numerical_blowup_exit_code(tmp_path):
    # a huge drift coefficient overflows the simulation
    params = dict(A=1e30, B=1.0, C=0.2, D=0.1, Fz=(0.1,), Gz=(0.05,),
                  L=1.0, M=0.0, N_term=1.0, x0=1.0, h0=0.0, h1=0.5)
    cfg = write_cfg(tmp_path, pipeline="malliavin-adjoint", seed=3, n_paths=500,
                    grid={"T": 1.0, "steps": 20}, levy={"marks": MARKS},
                    model={"name": "lq_plain", "params": params},
                    out_dir=str(tmp_path / "boom"))
    import numpy as np
    with np.errstate(over="ignore"):
        assert run(cfg) == 3


def test_seed_override_changes_output(tmp_path):
    cfg = write_cfg(tmp_path, pipeline="duality-suite", seed=5, n_paths=2000,
                    grid={"T": 1.0, "steps": 8}, levy={"marks": MARKS},
                    out_dir=str(tmp_path / "s5"))
    assert run(cfg) == 0
    assert run(cfg, seed=6, out_dir=str(tmp_path / "s6")) == 0
    assert ((tmp_path / "s5" / "duality.csv").read_bytes()
            != (tmp_path / "s6" / "duality.csv").read_bytes())
    resolved = json.loads((tmp_path / "s6" / "resolved_config.json").read_text())
    assert resolved["seed"] == 6


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
