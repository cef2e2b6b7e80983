import json

import pytest
import yaml

from certmpc.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, main
from certmpc.config import ConfigError, from_dict, load_config
from certmpc.dataset import load

SMALL = {
    "grid": {"lower": ["-pi", -0.5], "upper": ["pi", 0.5], "counts": [5, 4]},
    "validation": {"n": 20},
    "train": {"epochs": 30},
    "certify": {"epsilon": 100.0, "nn_samples": 50},
    "simulate": {"steps": 8},
}


def write_config(tmp_path, doc, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return str(path)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp, SMALL)
    out = tmp / "run"
    code = main(["run", "--config", cfg, "--out", str(out)])
    return cfg, out, code


def test_config_rejects_unknown_keys(tmp_path, capsys):
    with pytest.raises(ConfigError, match="unknown key 'lamda'"):
        from_dict({"train": {"lamda": 1}})
    cfg = write_config(tmp_path, {"ocp": {"horizon": 5}})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "horizon" in capsys.readouterr().err


def test_config_values_and_pi_strings(tmp_path):
    cfg = load_config("configs/pendulum.yaml")
    assert cfg.hash() == from_dict({}).hash()
    assert cfg.grid().upper[0] == pytest.approx(6.283185307179586)
    assert from_dict({"simulate": {"x0": ["-0.5*pi", 0]}}).simulate_options()["x0"][0] == \
        pytest.approx(-1.5707963267948966)
    with pytest.raises(ConfigError):
        from_dict({"simulate": {"x0": ["tau", 0]}})
    with pytest.raises(ConfigError):
        from_dict({"ocp": {"R": [[0.0]]}})
    assert main(["gen-data", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG


def test_seed_offsets():
    cfg = from_dict({"seed": 7})
    assert [cfg.stage_seed(s) for s in ("data", "train", "validation", "disturbance",
                                        "certify")] == [7, 7, 1007, 2007, 3007]
    assert cfg.train_config("nominal").lambdas[1] == 0.0
    assert cfg.train_config("sensreg").lambdas == (1.0, 3.0, 0.05)


def test_report_lists_missing_stages(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "gen-data" in err and "train --variant nominal" in err


def test_train_needs_dataset(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "gen-data" in capsys.readouterr().err


def test_gen_data_without_sensitivities(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    out = tmp_path / "o"
    assert main(["gen-data", "--no-sens", "--config", cfg, "--out", str(out)]) == EXIT_OK
    ds = load(out / "dataset.jsonl")
    assert len(ds.samples) == 20 and all(s.jac is None for s in ds.samples)


def test_full_run_outputs(small_run):
    _, out, code = small_run
    assert code == EXIT_OK
    for name in ("dataset.jsonl", "validation.jsonl", "nominal/params.json",
                 "sensreg/history.csv", "certify_nominal.json", "certify_sensreg.json",
                 "sim_mpc.csv", "sim_nn-sensreg.json", "fig1.svg", "fig2_data.csv",
                 "tables.md", "manifest.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] and manifest["toolkit_version"]
    assert not manifest["stages"]["gen-data"]["cache_hit"]


def test_figure_labels_carry_units(small_run):
    svg = (small_run[1] / "fig1.svg").read_text()
    for label in ("x1 (rad)", "x2 (rad/s)", "u (N·m)", "time (s)"):
        assert label in svg


def test_rerun_hits_cache(small_run, capsys):
    cfg, out, _ = small_run
    before = {p: p.read_bytes() for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"}
    capsys.readouterr()
    assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert "gen-data: cache hit" in capsys.readouterr().out
    stages = json.loads((out / "manifest.json").read_text())["stages"]
    assert all(entry["cache_hit"] for entry in stages.values())
    assert all(p.read_bytes() == b for p, b in before.items())


def test_disturbed_simulation_command(small_run):
    cfg, out, _ = small_run
    assert main(["simulate", "--controller", "disturbed-mpc", "--config", cfg,
                 "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "sim_disturbed-mpc.json").read_text())
    assert doc["max_input_divergence"] == pytest.approx(0.5)


def test_variant_flag_only_for_nn(small_run):
    cfg, out, _ = small_run
    assert main(["simulate", "--controller", "mpc", "--variant", "nominal", "--config", cfg,
                 "--out", str(out)]) == EXIT_CONFIG


def test_infeasible_certificate_exit_code(small_run, tmp_path, capsys):
    cfg, out, _ = small_run
    tight = dict(SMALL, certify={"epsilon": 1e-6, "nn_samples": 50})
    path = write_config(tmp_path, tight)
    assert main(["certify", "--config", path, "--out", str(out)]) == EXIT_INFEASIBLE
    assert "epsilon_d" in capsys.readouterr().err
