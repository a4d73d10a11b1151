import numpy as np
import pytest

from vertiglm.attack import equicorrelated
from vertiglm.protocol import SessionConfig
from vertiglm.simulation import benchmark, generate_dataset, run_condition, split_blocks


def test_generated_signal_has_unit_variance_and_half_r2():
    data = generate_dataset(20_000, 6, 0.5, "gaussian", np.random.default_rng(0))
    eta = data.X.values @ data.beta
    assert data.beta @ equicorrelated(6, 0.5) @ data.beta == pytest.approx(1.0)
    assert np.var(eta) / np.var(data.y.values) == pytest.approx(0.5, abs=0.02)


def test_split_gives_intercept_to_initiator_for_glms():
    data = generate_dataset(100, 4, 0.1, "binomial", np.random.default_rng(1))
    a, b = split_blocks(data.X, [0, 1], "binomial")
    assert a.column_names == ("(Intercept)", "x0", "x1")
    assert b.column_names == ("x2", "x3")
    with pytest.raises(ValueError):
        split_blocks(data.X, range(4), "binomial")


def test_report_is_reproducible():
    r1 = run_condition(300, 6, 0.3, "binomial", 5)
    r2 = run_condition(300, 6, 0.3, "binomial", 5)
    np.testing.assert_array_equal(r1.coefficients, r2.coefficients)
    np.testing.assert_array_equal(r1.standard_errors, r2.standard_errors)
    assert r1.table().splitlines()[:-1] == r2.table().splitlines()[:-1]


def test_report_rows_and_csv(tmp_path):
    r = run_condition(300, 6, 0.3, "gaussian", 2, SessionConfig(seed=2))
    rows = r.rows()
    assert len(rows) == 6
    assert max(abs(row["coef_diff"]) for row in rows) < 1e-6
    r.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().startswith("party,column,coefficient")


def test_more_covariance_more_iterations():
    it = {cov: np.mean([run_condition(1000, 10, cov, "gaussian", s).iterations for s in range(3)])
          for cov in (0.1, 0.5)}
    assert it[0.5] > it[0.1]


def test_benchmark_reduced_grid_has_negligible_bias():
    rows = benchmark(["gaussian"], [10], [0.1], reps=5, n=500, seed=1)
    assert len(rows) == 5
    assert abs(np.mean([r["mean_rel_coef_bias"] for r in rows])) < 1e-5
    assert all(r["frac_se_within_3pct"] == 1.0 for r in rows)
