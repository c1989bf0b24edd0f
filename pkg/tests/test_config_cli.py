import json

import numpy as np
import pytest

from tabf.cli import main
from tabf.config import PRESETS, RECORD_DT, ConfigError, from_dict, load_config, preset, save_config
from tabf.gridfn import load_tensor_sum


def _small(**extra):
    raw = {"experiment": "separable-test", "seed": 3, "n_replicas": 4, "n_nodes": 10,
           "schedule": {"t_up": 10 * RECORD_DT, "n_up": 2, "m_per_update": 2}}
    raw.update(extra)
    return raw


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_validate(name):
    cfg = preset(name)
    assert cfg.steps_per_update * cfg.integrator.dt == pytest.approx(cfg.schedule.t_up)


def test_toy_defaults():
    cfg = preset("toy_beta1")
    assert cfg.schedule.n_up == 60 and cfg.schedule.m_per_update == 8
    assert cfg.steps_per_update == 2000
    assert cfg.t_total == pytest.approx(30.0)


def test_polymer_default_terms_follow_dimension():
    cfg = from_dict({"experiment": "polymer", "seed": 0,
                     "potential": {"kind": "polymer", "n_particles": 12, "n_polymer": 3}})
    assert cfg.schedule.m_per_update == 12
    assert cfg.schedule.gabf_baseline


def test_polymer_step_keeps_recording_interval():
    cfg = preset("polymer_d3")
    assert cfg.integrator.dt == pytest.approx(1e-4)
    assert cfg.integrator.dt * cfg.integrator.record_stride == pytest.approx(RECORD_DT)


@pytest.mark.parametrize("raw, path", [
    ({"seed": 1}, "experiment"),
    ({"experiment": "toy"}, "seed"),
    ({"experiment": "toy", "seed": 1, "kernel": {"lam": 0.0}}, "kernel.lam"),
    ({"experiment": "toy", "seed": 1, "kernel": {"mode": "von_mises"}}, "kernel.eps"),
    ({"experiment": "toy", "seed": 1, "schedule": {"t_up": 1e-3}}, "schedule.t_up"),
    ({"experiment": "toy", "seed": 1, "schedule": {"bogus": 1}}, "schedule.bogus"),
    ({"experiment": "toy", "seed": 1, "n_nodes": 2}, "n_nodes"),
    ({"experiment": "toy", "seed": -4}, "seed"),
    ({"experiment": "toy", "seed": 1, "t_total": 0.7}, "t_total"),
    ({"experiment": "toy", "seed": 1, "initial_z": [0.0]}, "initial_z"),
])
def test_validation_names_the_field(raw, path):
    with pytest.raises(ConfigError) as exc:
        from_dict(raw)
    assert path in [p for p, _ in exc.value.errors]


def test_von_mises_allows_zero_lambda():
    cfg = from_dict({"experiment": "toy", "seed": 1, "kernel": {"mode": "von_mises", "eps": 0.5, "lam": 0.0}})
    assert cfg.kernel.lam == 0.0


def test_round_trip(tmp_path):
    cfg = preset("polymer_d3")
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_empty_file_is_config_error(tmp_path):
    (tmp_path / "c.json").write_text("")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_cli_bad_config_exit_2(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"experiment": "toy", "seed": 1, "kernel": {"lam": -1}}))
    assert main(["run-tabf", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "r")]) == 2
    assert "kernel.lam" in capsys.readouterr().err


def test_cli_run_refuses_nonempty_dir(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(_small()))
    out = tmp_path / "run"
    assert main(["run-tabf", "--config", str(cfg), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["n_terms"] == 4
    bias = load_tensor_sum(out / "bias_manifest.json")
    assert bias.n_terms == 4
    assert main(["run-tabf", "--config", str(cfg), "--out", str(out)]) == 3
    assert main(["run-tabf", "--config", str(cfg), "--out", str(out), "--force"]) == 0
    assert json.loads((out / "manifest.json").read_text())["content_hash"] == manifest["content_hash"]


def test_cli_seed_override_changes_hash(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(_small()))
    main(["run-unbiased", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["run-unbiased", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "4"])
    ha = json.loads((tmp_path / "a" / "manifest.json").read_text())["content_hash"]
    hb = json.loads((tmp_path / "b" / "manifest.json").read_text())["content_hash"]
    assert ha != hb


def test_cli_oracles_and_report(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(_small()))
    run = tmp_path / "run"
    assert main(["run-tabf", "--config", str(cfg), "--out", str(run)]) == 0
    assert main(["oracle-grid", "--run", str(run), "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g" / "grid_minimizer.csv").exists()
    assert main(["report", "--run", str(run)]) == 0
    assert (run / "report" / "free_energy.csv").exists()
    assert main(["oracle-toy", "--beta", "1", "--n-nodes", "8", "--n-quad", "200",
                 "--out", str(tmp_path / "t")]) == 0
    rows = (tmp_path / "t" / "toy_free_energy.csv").read_text().splitlines()
    assert len(rows) == 1 + 64
    vals = np.array([float(r.split(",")[2]) for r in rows[1:]])
    assert abs(vals.mean()) < 1e-12


def test_cli_check(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 5
