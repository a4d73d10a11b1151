import json
import os
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest
from sklearn.linear_model import LogisticRegression

from vertiglm import exceptions as exc
from vertiglm.cli import main
from vertiglm.glm import add_intercept, fit_full_glm
from vertiglm.ingest import ingest_csv

KEY = "ab" * 32


@pytest.fixture
def csvs(tmp_path):
    rng = np.random.default_rng(0)
    n = 300
    X = rng.standard_normal((n, 5))
    grp = rng.choice(["a", "b", "c"], n)
    eta = X @ [0.5, -0.3, 0.2, 0.1, 0.4] + (grp == "b") * 0.5
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(int)
    df = pd.DataFrame(X, columns=[f"v{i}" for i in range(5)])
    df["grp"] = grp
    df["y"] = y
    paths = {k: tmp_path / f"{k}.csv" for k in ("all", "a", "b", "b_rev")}
    df.to_csv(paths["all"], index=False)
    df[["v0", "v1", "grp", "y"]].to_csv(paths["a"], index=False)
    df[["v2", "v3", "v4", "y"]].to_csv(paths["b"], index=False)
    df[["v2", "v3", "v4", "y"]].iloc[::-1].to_csv(paths["b_rev"], index=False)
    return paths


def run_pair(tmp_path, a_csv, b_csv, key_a=KEY, key_b=KEY, extra=()):
    env_a = dict(os.environ, VERTIGLM_PSK=key_a)
    env_b = dict(os.environ, VERTIGLM_PSK=key_b)
    base = [sys.executable, "-m", "vertiglm.cli"]
    common = ["--target", "y", "--family", "binomial", "--timeout", "30", *extra]
    server = subprocess.Popen(
        base + ["serve", "--listen", "127.0.0.1:0", "--data", str(b_csv), "--output",
                str(tmp_path / "b_out.csv"), "--trace-export", str(tmp_path / "b_trace.npz"), *common],
        env=env_b, stderr=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
    port = None
    for line in server.stderr:
        if line.startswith("listening on port"):
            port = int(line.split()[-1])
            break
    assert port is not None
    client = subprocess.run(
        base + ["connect", "--peer", f"127.0.0.1:{port}", "--data", str(a_csv), "--output",
                str(tmp_path / "a_out.csv"), *common],
        env=env_a, capture_output=True, text=True, timeout=60)
    server_out, server_err = server.communicate(timeout=60)
    return client, (server.returncode, server_out, server_err)


def test_two_processes_match_the_pooled_fit(tmp_path, csvs):
    client, (rc_b, out_b, _) = run_pair(tmp_path, csvs["a"], csvs["b"])
    assert client.returncode == 0, client.stderr
    assert rc_b == 0
    assert json.loads(client.stdout)["converged"]
    got = pd.concat([pd.read_csv(tmp_path / "a_out.csv"), pd.read_csv(tmp_path / "b_out.csv")])
    # oracle: join the CSV and fit once
    block, y = ingest_csv(csvs["all"], "y", ["v0", "v1", "grp", "v2", "v3", "v4"], "binomial")
    full = fit_full_glm(add_intercept(block), y, "binomial", tol=1e-12)
    want = dict(zip(full.column_names, full.coefficients))
    for name, coef in zip(got["name"], got["coefficient"]):
        assert coef == pytest.approx(want[name], abs=1e-6)
    want_se = dict(zip(full.column_names, full.standard_errors))
    for name, se in zip(got["name"], got["std_error"]):
        assert se == pytest.approx(want_se[name], rel=1e-6)
    # slopes also agree with an unrelated solver on the raw data
    df = pd.read_csv(csvs["all"])
    raw = pd.get_dummies(df.drop(columns="y"), columns=["grp"], drop_first=True, dtype=float)
    ref = LogisticRegression(penalty=None, tol=1e-12, max_iter=10_000).fit(raw, df["y"])
    sk = dict(zip(raw.columns.str.replace(r"grp_(\w)", r"grp[\1]", regex=True), ref.coef_.ravel()))
    for name, coef in zip(got["name"], got["coefficient"]):
        if name != "(Intercept)":
            assert coef == pytest.approx(sk[name], abs=1e-4)


def test_mismatched_target_order_exit_code(tmp_path, csvs):
    client, (rc_b, _, _) = run_pair(tmp_path, csvs["a"], csvs["b_rev"])
    assert client.returncode == exc.DigestMismatch.exit_code
    assert rc_b == exc.DigestMismatch.exit_code


def test_wrong_psk_exit_code(tmp_path, csvs):
    client, (rc_b, _, _) = run_pair(tmp_path, csvs["a"], csvs["b"], key_b="cd" * 32)
    assert client.returncode == exc.AuthFailure.exit_code
    assert rc_b == exc.AuthFailure.exit_code


def test_trace_export_feeds_the_attack(tmp_path, csvs):
    client, _ = run_pair(tmp_path, csvs["a"], csvs["b"])
    assert client.returncode == 0
    # the responder attacks the initiator with its disclosed coefficients
    rc = main(["attack", "--trace", str(tmp_path / "b_trace.npz"), "--partner-output",
               str(tmp_path / "a_out.csv"), "--output", str(tmp_path / "xhat.csv")])
    assert rc == 0
    xhat = pd.read_csv(tmp_path / "xhat.csv")
    assert list(xhat.columns) == ["(Intercept)", "v0", "v1", "grp[b]", "grp[c]"]
    assert len(xhat) == 300


def test_missing_psk_is_usage_error(tmp_path, csvs, monkeypatch, capsys):
    monkeypatch.delenv("VERTIGLM_PSK", raising=False)
    with pytest.raises(SystemExit) as err:
        main(["connect", "--peer", "127.0.0.1:9", "--data", str(csvs["a"]), "--target", "y",
              "--output", str(tmp_path / "o.csv")])
    assert err.value.code == 2


def test_psk_file_validation(tmp_path, csvs):
    bad = tmp_path / "key"
    bad.write_text("abcd")
    with pytest.raises(SystemExit) as err:
        main(["connect", "--peer", "127.0.0.1:9", "--data", str(csvs["a"]), "--target", "y",
              "--psk-file", str(bad), "--output", str(tmp_path / "o.csv")])
    assert err.value.code == 2


def test_connect_refused_exit_code(tmp_path, csvs, monkeypatch):
    monkeypatch.setenv("VERTIGLM_PSK", KEY)
    rc = main(["connect", "--peer", "127.0.0.1:1", "--data", str(csvs["a"]), "--target", "y",
               "--family", "binomial", "--timeout", "2", "--output", str(tmp_path / "o.csv")])
    assert rc == exc.ConnectFailure.exit_code


def test_unknown_column_exit_code(tmp_path, csvs):
    rc = main(["simulate", "--data", str(csvs["all"]), "--target", "nope",
               "--output", str(tmp_path / "o.csv")])
    assert rc == exc.UnknownColumn.exit_code


def test_simulate_from_csv(tmp_path, csvs, capsys):
    out = tmp_path / "sim.csv"
    rc = main(["simulate", "--data", str(csvs["all"]), "--target", "y", "--family", "binomial",
               "--split", "v0,v1,grp[b]", "--output", str(out), "--seed", "1"])
    assert rc == 0
    report = pd.read_csv(out)
    assert report["coef_diff"].abs().max() < 1e-6
    assert report["se_rel_bias"].abs().max() < 1e-6
    assert "oracle coef" in capsys.readouterr().out


def test_simulate_is_deterministic(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"s{k}.csv"
        assert main(["simulate", "--n", "300", "--p", "6", "--seed", "4", "--output", str(out)]) == 0
        outs.append(out.read_text())
    assert outs[0] == outs[1]


def test_simulate_rejects_an_empty_party(tmp_path, csvs):
    with pytest.raises(SystemExit) as err:
        main(["simulate", "--data", str(csvs["all"]), "--target", "y",
              "--split", "v0,v1,v2,v3,v4,grp[b],grp[c]", "--output", str(tmp_path / "o.csv")])
    assert err.value.code == 2


@pytest.mark.filterwarnings("ignore::vertiglm.glm.ConvergenceWarning")
def test_simulate_not_converged_exit_code(tmp_path):
    rc = main(["simulate", "--n", "300", "--p", "6", "--covariance", "0.5", "--max-iterations", "2",
               "--output", str(tmp_path / "o.csv")])
    assert rc == exc.NotConverged.exit_code


def test_benchmark_writes_long_table(tmp_path):
    out = tmp_path / "bench.csv"
    rc = main(["benchmark", "--families", "gaussian", "--p-values", "4", "--covariances", "0.1,0.5",
               "--reps", "2", "--n", "200", "--output", str(out)])
    assert rc == 0
    df = pd.read_csv(out)
    assert len(df) == 4
    assert {"iterations", "max_abs_coef_diff", "max_abs_rel_se_bias", "protocol_seconds"} <= set(df.columns)


def test_attack_study(tmp_path):
    out = tmp_path / "att.jsonl"
    assert main(["attack", "--study", "--p-values", "4", "--reps", "5", "--output", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert {r["R_known"] for r in rows} == {1, 2, 4}


def test_exit_codes_are_distinct_and_cover_every_error():
    table = exc.exit_code_table()
    assert len(set(table.values())) == len(table)
    assert 0 not in table.values() and 2 not in table.values()
    names = {c.__name__ for c in vars(exc).values()
             if isinstance(c, type) and issubclass(c, exc.VertiGLMError)}
    assert names == set(table)
