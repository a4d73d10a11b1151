"""Local two-party runs and the Monte-Carlo benchmark against the
full-data fit.

Data follow the usual design: equicorrelated standard-normal features,
half of them at each party, and a Gaussian target at R^2 = 0.5 or a
Bernoulli target with a logit link.
"""
from __future__ import annotations

import csv
import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .attack import equicorrelated
from .glm import (
    DesignBlock,
    FullFit,
    TargetVector,
    add_intercept,
    center_block,
    fit_full_glm,
    get_family,
    make_target,
)
from .protocol import SessionConfig, run_party
from .transport import loopback_pair


@dataclass
class Dataset:
    X: DesignBlock
    y: TargetVector
    beta: np.ndarray


def generate_dataset(n, p, covariance, family="gaussian", rng=None, r2=0.5) -> Dataset:
    rng = np.random.default_rng(rng)
    fam = get_family(family)
    cov = equicorrelated(p, covariance)
    X = rng.multivariate_normal(np.zeros(p), cov, size=n, method="cholesky")
    beta = rng.standard_normal(p)
    beta /= np.sqrt(beta @ cov @ beta)  # unit signal variance
    eta = X @ beta
    if fam.is_gaussian:
        noise_var = (1.0 - r2) / r2
        y = eta + rng.normal(0.0, np.sqrt(noise_var), size=n)
    elif fam.family == "binomial":
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    else:
        y = rng.poisson(np.exp(eta)).astype(float)
    return Dataset(center_block(X), make_target(y, fam), beta)


def split_blocks(block: DesignBlock, first, family):
    """Column split into (initiator, responder) blocks.

    The initiator owns the intercept for non-Gaussian families.
    """
    idx = list(first)
    rest = [j for j in range(block.n_cols) if j not in idx]
    if not idx or not rest:
        raise ValueError("each party needs at least one column")

    def take(cols):
        return DesignBlock(block.values[:, cols], tuple(block.column_names[j] for j in cols),
                           centered=block.centered, column_means=block.column_means[cols],
                           column_scales=None if block.column_scales is None else block.column_scales[cols])

    a, b = take(idx), take(rest)
    if not get_family(family).is_gaussian:
        a = add_intercept(a)
    return a, b


def run_loopback(block_a, block_b, y, cfg_a: SessionConfig, cfg_b: Optional[SessionConfig] = None,
                 tap=None, mangle=None, psk_b=None):
    """Run both parties concurrently over an in-process channel.

    Returns ``((result_a, trace_a), (result_b, trace_b))``.
    """
    cfg_b = cfg_a if cfg_b is None else cfg_b
    ch_a, ch_b = loopback_pair(cfg_a.psk, cfg_a.session_id, psk_responder=psk_b or cfg_b.psk,
                               tap=tap, mangle=mangle)

    def party(block, cfg, role, ch):
        try:
            return run_party(block, y, cfg, role, ch)
        finally:
            ch.close()

    with ThreadPoolExecutor(max_workers=2) as pool:
        fa = pool.submit(party, block_a, cfg_a, "initiator", ch_a)
        fb = pool.submit(party, block_b, cfg_b, "responder", ch_b)
        errors = []
        out = []
        for f in (fa, fb):
            try:
                out.append(f.result())
            except Exception as err:  # surfaced below, initiator first
                errors.append(err)
        if errors:
            raise errors[0]
    return out[0], out[1]


@dataclass
class SimulationReport:
    family: str
    results: tuple
    traces: tuple
    oracle: FullFit
    wall_time: float
    oracle_time: float
    column_names: tuple = ()
    extras: dict = field(default_factory=dict)

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([r.local_coefficients for r in self.results])

    @property
    def standard_errors(self) -> np.ndarray:
        return np.concatenate([r.local_standard_errors for r in self.results])

    @property
    def iterations(self) -> int:
        return self.results[0].iterations_used

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.results)

    @property
    def max_abs_coef_diff(self) -> float:
        return float(np.max(np.abs(self.coefficients - self.oracle.coefficients)))

    @property
    def relative_se_bias(self) -> np.ndarray:
        return self.standard_errors / self.oracle.standard_errors - 1.0

    def rows(self):
        out = []
        offset = 0
        for party, res in zip(("initiator", "responder"), self.results):
            for j, name in enumerate(res.column_names):
                k = offset + j
                out.append({
                    "party": party, "column": name,
                    "coefficient": res.local_coefficients[j],
                    "std_error": res.local_standard_errors[j],
                    "oracle_coefficient": self.oracle.coefficients[k],
                    "oracle_std_error": self.oracle.standard_errors[k],
                    "coef_diff": res.local_coefficients[j] - self.oracle.coefficients[k],
                    "se_rel_bias": res.local_standard_errors[j] / self.oracle.standard_errors[k] - 1.0,
                })
            offset += len(res.column_names)
        return out

    def table(self) -> str:
        rows = self.rows()
        head = f"{'party':<10} {'column':<16} {'coef':>12} {'se':>10} {'oracle coef':>12} {'oracle se':>10}"
        lines = [head, "-" * len(head)]
        for r in rows:
            lines.append(f"{r['party']:<10} {r['column'][:16]:<16} {r['coefficient']:>12.6f} "
                         f"{r['std_error']:>10.6f} {r['oracle_coefficient']:>12.6f} {r['oracle_std_error']:>10.6f}")
        lines.append("")
        lines.append(f"family={self.family} iterations={self.iterations} converged={self.converged} "
                     f"max|coef diff|={self.max_abs_coef_diff:.3g} "
                     f"max|se bias|={np.nanmax(np.abs(self.relative_se_bias)):.3g} "
                     f"protocol {self.wall_time:.2f}s oracle {self.oracle_time:.2f}s")
        return "\n".join(lines)

    def write_csv(self, path):
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            for r in rows:
                writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                                 for k, v in r.items()})


def simulate(block_a, block_b, y, cfg: SessionConfig, cfg_b=None, tap=None) -> SimulationReport:
    """Both parties over loopback, plus the full-data fit for comparison."""
    t0 = time.perf_counter()
    (ra, ta), (rb, tb) = run_loopback(block_a, block_b, y, cfg, cfg_b, tap=tap)
    wall = time.perf_counter() - t0
    t0 = time.perf_counter()
    oracle = fit_full_glm([block_a, block_b], y, cfg.family)
    oracle_time = time.perf_counter() - t0
    return SimulationReport(cfg.family.family, (ra, rb), (ta, tb), oracle, wall, oracle_time,
                            block_a.column_names + block_b.column_names)


def run_condition(n, p, covariance, family, seed, cfg: Optional[SessionConfig] = None):
    """Generate one dataset, split it in half and simulate."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    data_ss, party_ss = ss.spawn(2)
    data = generate_dataset(n, p, covariance, family, np.random.default_rng(data_ss))
    a, b = split_blocks(data.X, range(p // 2), family)
    party_seed = int(party_ss.generate_state(1)[0])
    if cfg is None:
        cfg = SessionConfig(family=family, seed=party_seed)
    else:
        cfg = replace(cfg, family=get_family(family), seed=party_seed if cfg.seed is None else cfg.seed)
    return simulate(a, b, data.y, cfg)


def benchmark(families=("gaussian", "binomial"), p_values=(10, 50, 100), covariances=(0.1, 0.5),
              reps=100, n=1000, seed=0, cfg=None, keep_reports=False):
    """Long-format results: one row per replication and condition."""
    rows, reports = [], []
    for (family, p, cov), rep in itertools.product(
            itertools.product(families, p_values, covariances), range(reps)):
        rep_seed = [seed, ["gaussian", "binomial", "poisson"].index(family), p, int(cov * 1000), rep]
        ss = np.random.SeedSequence(rep_seed)
        report = run_condition(n, p, cov, family, ss, cfg)
        oracle = report.oracle
        coef_rel = (report.coefficients - oracle.coefficients) / np.maximum(np.abs(oracle.coefficients), 1e-12)
        rows.append({
            "family": family, "P": p, "covariance": cov, "replication": rep,
            "iterations": report.iterations, "converged": report.converged,
            "max_abs_coef_diff": report.max_abs_coef_diff,
            "mean_rel_coef_bias": float(np.mean(coef_rel)),
            "max_abs_rel_se_bias": float(np.nanmax(np.abs(report.relative_se_bias))),
            "frac_se_within_3pct": float(np.mean(np.abs(report.relative_se_bias) <= 0.03)),
            "protocol_seconds": report.wall_time, "oracle_seconds": report.oracle_time,
        })
        if keep_reports:
            reports.append(report)
    return (rows, reports) if keep_reports else rows


def write_rows(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
