"""Acceptance gate: one test (or pair) per criterion, each at its stated tolerance and time budget.

Results are summarised as PASS/FAIL lines at the end of the pytest run.
"""

import csv
import time

import numpy as np
import pytest

from gembml import config, experiments as ex
from gembml.cli import main
from gembml.meta import MetaConfig, SinusoidSampler, collapsed, meta_train
from gembml.nn import ArchSpec, MLPLikelihood
from gembml.oracle import exact_marginal_grad, exact_posterior, expected_prior_score_full, random_conjugate_problem


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def cfg_with(*overrides):
    return config.load(None, list(overrides))


@pytest.mark.criterion(1, "gradient-EM identity on 1000 conjugate models")
def test_gradient_em_identity():
    with Timer() as t:
        worst = 0.0
        rng = np.random.default_rng(20240601)
        for i in range(1000):
            p = (1, 2, 5)[i % 3]
            model, y = random_conjugate_problem(rng, p, int(rng.integers(1, 21)))
            gem = expected_prior_score_full(exact_posterior(model, y), model.prior).as_vector()
            worst = max(worst, float(np.max(np.abs(gem - exact_marginal_grad(model, y).as_vector()))))
    print(f"max |GEM - exact| = {worst:.3g} in {t.seconds:.1f}s")
    assert worst <= 1e-10
    assert t.seconds < 10


@pytest.mark.criterion(2, "L2 decomposition residual on 1000 splits")
def test_l2_decomposition():
    with Timer() as t:
        rows, summary = ex.l2_check(cfg_with("l2_check.n_splits = 1000"))
    assert any(r[2] == 0 for r in rows) and any(r[3] == 0 for r in rows)
    assert summary["max_abs_residual"] <= 1e-9
    assert t.seconds < 5


@pytest.mark.criterion(3, "Pinsker bound over 10^4 perturbed posteriors")
def test_pinsker_bound():
    with Timer() as t:
        rows, summary = ex.pinsker(cfg_with())
    assert summary["n_reports"] >= 10_000
    assert summary["violations"] == 0
    ms = summary["mean_shift"]
    assert abs(ms["error"] - 0.1) <= 1e-12 and abs(ms["bound"] - 0.1) <= 1e-12
    assert t.seconds < 30


@pytest.mark.criterion(4, "asymptotic variance ratio m/(m-k)")
def test_variance_ratio():
    with Timer() as t:
        _, summary = ex.variance_ratio(cfg_with("variance_ratio.k = 5", "variance_ratio.m = 10"))
    print(summary["ratio"], summary["ci95"], summary["k0_ci95"])
    assert 1.7 <= summary["ratio"] <= 2.3
    lo, hi = summary["k0_ci95"]
    assert lo <= 1.0 <= hi
    assert t.seconds < 300


@pytest.mark.criterion(5, "GEM error <= ELBO-gradient error at every T")
def test_meta_gradient_estimation_error():
    with Timer() as t:
        rows, _, summary = ex.grad_error_study(cfg_with())
    for T, g, e in rows:
        print(f"T={T:<4d} median gem={g:.3e} elbo={e:.3e}")
    assert len(rows) == 6 and cfg_with()["grad_error.n_problems"] >= 100
    assert summary["checks"]["both_decrease"]
    assert summary["checks"]["largest_T_converged"]
    assert t.seconds < 120
    assert summary["checks"]["ordering_gem_le_elbo_all_T"], f"GEM worse than ELBO at T not in {summary['gem_better_at']}"


@pytest.mark.criterion(6, "exact posterior is the best decision rule")
def test_predictive_optimality():
    with Timer() as t:
        _, summary = ex.predictive_optimality(cfg_with("predictive.n_tasks = 10000"))
    scores = summary["scores"]
    for name, p in summary["p_values"].items():
        assert scores[name] < scores["exact"] and p < 0.01, name
    assert t.seconds < 60


def _sine_checks(iterations, budget):
    cfg = cfg_with(f"meta.iterations = {iterations}", "test.n_tasks = 600", "meta.method = gem_bml_plus")
    mc = config.meta_config(cfg)
    assert (mc.meta_lr, mc.inner.learning_rate, mc.inner.steps, mc.inner_test.steps, mc.meta_batch_size) == (0.001, 0.001, 1, 10, 5)
    with Timer() as t:
        _, trained, control, summary = ex.run_sine(cfg)
    print(f"{iterations} it: step0 {summary['mse_step0']:.4f} step10 {summary['mse_final']:.4f} "
          f"p {summary['p_final_lt_step0']:.3g} control {summary['control_mse_final']:.4f} ({t.seconds:.0f}s)")
    assert trained.n_tasks == 600
    assert summary["mse_final"] < summary["mse_step0"] and summary["p_final_lt_step0"] < 0.01
    assert summary["mse_final"] < summary["control_mse_final"]
    assert t.seconds <= budget


@pytest.mark.slow
@pytest.mark.criterion(7, "sinusoid fast adaptation, GEM-BML+ 20k iterations and 2k smoke")
def test_sinusoid_fast_adaptation_full():
    _sine_checks(20_000, 2 * 3600)


@pytest.mark.criterion(7, "sinusoid fast adaptation, GEM-BML+ 20k iterations and 2k smoke")
def test_sinusoid_fast_adaptation_smoke():
    _sine_checks(2_000, 600)


@pytest.mark.criterion(8, "collapsed GEM-BML reproduces Reptile trajectories")
def test_reptile_reduction():
    model = MLPLikelihood(ArchSpec((1, 40, 40, 1)), 1.0)
    # the literal outer update of the meta-train loop: plain gradient steps
    base = MetaConfig(method="gem_bml", iterations=100, seed=11, meta_optimizer="sgd")
    with Timer() as t:
        a = meta_train(SinusoidSampler(), collapsed(base, 1.0), model, record_trajectory=True)
        b = meta_train(SinusoidSampler(), base.with_(method="reptile", fixed_variance=1.0), model, record_trajectory=True)
    diff = max(float(np.max(np.abs(x.theta.mean - y.theta.mean))) for x, y in zip(a.trajectory, b.trajectory))
    print(f"max trajectory gap {diff:.3g}")
    assert len(a.trajectory) == 100 and diff <= 1e-5
    assert t.seconds < 60


@pytest.mark.criterion(9, "foMAML on the easy setting improves with 1, 2, 3 inner steps")
def test_many_inner_steps(tmp_path):
    # one model per inner-step count k, meta-trained and meta-tested with k steps
    final = []
    with Timer() as t:
        for k in (1, 2, 3):
            out = tmp_path / f"k{k}"
            code = main(["sine", "--out", str(out), "--set", "task.setting = easy", "--set", "meta.method = fomaml",
                         "--set", f"inner.steps = {k}", "--set", f"inner_test.steps = {k}",
                         "--set", "test.n_tasks = 200", "--set", "test.control = false"])
            assert code in (0, 1)
            rows = list(csv.DictReader(open(out / "meta_test.csv")))
            final.append(float(rows[-1]["mean_mse"]))
    print("mean MSE after k steps, k = 1, 2, 3:", final)
    assert final[0] > final[1] > final[2]
    assert t.seconds < 900


def _canonical(path):
    out = []
    for row in csv.reader(open(path, newline="")):
        canon = []
        for v in row:
            try:
                canon.append(float(v))
            except ValueError:
                canon.append(v)
        out.append(canon)
    return out


@pytest.mark.criterion(10, "determinism across repeats and worker counts")
def test_determinism(tmp_path):
    args = ["sine", "--seed", "5", "--set", "meta.iterations = 40", "--set", "test.n_tasks = 20",
            "--set", "meta.checkpoint_every = 20", "--set", "meta.meta_batch_size = 4"]
    for name, jobs in (("a", 1), ("b", 1), ("c", 4)):
        main([*args, "--out", str(tmp_path / name), "--jobs", str(jobs)])
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    assert len(files) == 3
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
        assert _canonical(tmp_path / "a" / f) == _canonical(tmp_path / "c" / f), f
    for f in ("checkpoints/final.json",):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.criterion(11, "gradient correctness gate exits 0")
def test_gradcheck_gate(tmp_path):
    with Timer() as t:
        code = main(["gradcheck", "--out", str(tmp_path)])
    assert code == 0
    assert t.seconds < 60
