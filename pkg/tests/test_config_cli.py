import csv
import json
import os
import subprocess
import sys

import pytest

from gembml import config
from gembml._validation import ConfigError
from gembml.cli import main

TINY = [
    "--set", "arch.layer_sizes = 1, 8, 1",
    "--set", "meta.iterations = 4",
    "--set", "meta.meta_batch_size = 2",
    "--set", "test.n_tasks = 6",
    "--set", "inner_test.steps = 3",
    "--set", "meta.checkpoint_every = 2",
]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_defaults_follow_sinusoid_hyperparameters():
    cfg = config.load()
    mc = config.meta_config(cfg)
    assert (mc.meta_lr, mc.meta_batch_size, mc.inner.learning_rate, mc.inner.steps, mc.inner_test.steps) == (0.001, 5, 0.001, 1, 10)
    assert cfg["arch.layer_sizes"] == (1, 40, 40, 1) and cfg["task.K"] == 10 and cfg["task.k_split"] == 5


def test_parse_lines_grammar():
    got = config.parse_lines(["# comment", "", "seed = 3  # trailing", "arch.layer_sizes = 1, 4, 1", "meta.fixed_variance = none", "test.control = FALSE"])
    assert got == {"seed": 3, "arch.layer_sizes": (1, 4, 1), "meta.fixed_variance": None, "test.control": False}
    for bad in (["seed"], ["nope = 1"], ["seed = x"], ["test.control = yes"]):
        with pytest.raises(ConfigError):
            config.parse_lines(bad)


def test_load_precedence_and_validation(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 5\nmeta.iterations = 10\n")
    cfg = config.load(str(path), ["meta.iterations = 3"])
    assert cfg["seed"] == 5 and cfg["meta.iterations"] == 3
    for bad in (["jobs = 0"], ["task.setting = hard"], ["task.k_split = 11"], ["noise_var = 0"], ["meta.method = maml"], ["arch.layer_sizes = 1"]):
        with pytest.raises(ConfigError):
            config.load(None, bad)
    with pytest.raises(ConfigError):
        config.load(str(tmp_path / "missing.cfg"))


def test_dumps_roundtrip_and_hash():
    cfg = config.load(None, ["meta.fixed_variance = 0.5", "seed = 9"])
    again = config.defaults()
    again.update(config.parse_lines(config.dumps(cfg).splitlines()))
    assert again == cfg
    assert config.config_hash(again) == config.config_hash(cfg)
    assert config.config_hash(config.load(None, ["seed = 10"])) != config.config_hash(cfg)


def test_delta_methods_get_unit_variance():
    mc = config.meta_config(config.load(None, ["meta.method = reptile"]))
    assert mc.fixed_variance == 1.0


def test_prior_variance_held_unless_learned():
    mc = config.meta_config(config.load(None, ["meta.init_log_var = -4"]))
    assert mc.fixed_variance == pytest.approx(0.018315638888734)
    assert config.meta_config(config.load(None, ["meta.learn_variance = true"])).fixed_variance is None


def test_gradcheck_passes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "gradcheck.csv")
    assert rows[0] == ["check", "max_error", "tolerance", "passed"]
    assert len(rows) == 13 and all(r[3] == "1" for r in rows[1:])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "ok" and "gradcheck.csv" in manifest["outputs"]


def test_gradcheck_injected_fault(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path), "--set", "gradcheck.inject_fault = gaussian.kl_grad"]) == 1
    assert "gaussian.kl_grad" in capsys.readouterr().err
    assert main(["gradcheck", "--out", str(tmp_path), "--set", "gradcheck.inject_fault = nope"]) == 2


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["theory", "nonsense", "--out", str(tmp_path)]) == 2
    assert main(["sine", "--out", str(tmp_path), "--set", "bogus.key = 1"]) == 2
    assert main(["sine", "--out", str(tmp_path), "--config", str(tmp_path / "absent.cfg")]) == 2


def test_neighborhood_requires_checkpoint(tmp_path):
    assert main(["neighborhood", "--out", str(tmp_path)]) == 2
    assert main(["neighborhood", "--out", str(tmp_path), "--set", f"neighborhood.checkpoint = {tmp_path / 'none.json'}"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["neighborhood", "--out", str(tmp_path), "--set", f"neighborhood.checkpoint = {bad}"]) == 2


def test_numeric_failure_exit_code(tmp_path, capsys):
    code = main(["sine", "--out", str(tmp_path), *TINY, "--set", "inner.learning_rate = 1e200", "--set", "meta.init_log_var = 50"])
    assert code == 3
    assert "numeric failure" in capsys.readouterr().err
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "numeric-failure"


def test_sine_outputs(tmp_path):
    code = main(["sine", "--out", str(tmp_path), *TINY])
    assert code in (0, 1)
    meta_rows = read_csv(tmp_path / "meta_test.csv")
    assert meta_rows[0] == ["step", "mean_mse", "ci95", "control_mean_mse", "control_ci95"]
    assert len(meta_rows) == 1 + 4
    assert len(read_csv(tmp_path / "meta_test_tasks.csv")) == 1 + 6 * 4
    diag = read_csv(tmp_path / "diagnostics.csv")
    assert diag[0] == ["iteration", "task_index", "method", "elbo_tr", "elbo_trval", "grad_norm_mean", "grad_norm_logvar"]
    assert len(diag) == 1 + 4 * 2
    assert sorted(os.listdir(tmp_path / "checkpoints")) == ["ckpt_0000002.json", "ckpt_0000004.json", "final.json"]
    ck = json.loads((tmp_path / "checkpoints" / "final.json").read_text())
    assert set(ck) == {"iteration", "theta", "fixed_variance", "config_hash", "seed"} and ck["iteration"] == 4
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary["checks"]) == {"final_lt_step0_p01", "final_lt_control"}
    # the checkpoint feeds the neighborhood study
    out2 = tmp_path / "nb"
    code = main(["neighborhood", "--out", str(out2), "--set", f"neighborhood.checkpoint = {tmp_path / 'checkpoints' / 'final.json'}",
                 "--set", "arch.layer_sizes = 1, 8, 1", "--set", "inner_test.steps = 2", "--set", "neighborhood.n_anchors = 3",
                 "--set", "neighborhood.n_combinations = 4", "--set", "neighborhood.n_tasks = 5"])
    assert code in (0, 1)
    rows = read_csv(out2 / "neighborhood.csv")
    assert rows[0] == ["initializer", "step", "mean_mse"] and len(rows) == 1 + 5 * 3


def test_sine_bitwise_deterministic(tmp_path):
    for name in ("a", "b"):
        main(["sine", "--out", str(tmp_path / name), "--seed", "7", *TINY])
    for f in ("meta_test.csv", "meta_test_tasks.csv", "diagnostics.csv", "checkpoints/final.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_theory_and_grad_error_row_counts(tmp_path):
    assert main(["theory", "l2_check", "--out", str(tmp_path / "l2"), "--set", "l2_check.n_splits = 50"]) == 0
    assert len(read_csv(tmp_path / "l2" / "l2_check.csv")) == 51
    code = main(["grad-error-study", "--out", str(tmp_path / "ge"), "--set", "grad_error.n_problems = 5"])
    assert code in (0, 1)
    assert len(read_csv(tmp_path / "ge" / "grad_error.csv")) == 1 + 6
    assert len(read_csv(tmp_path / "ge" / "grad_error_raw.csv")) == 1 + 5 * 6


def test_console_script_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "gembml.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
