"""Generalized linear models on vertically partitioned data.

Two parties hold different feature columns for the same subjects and a
shared target.  They fit the joint model by block coordinate descent,
exchanging only length-N prediction vectors over an authenticated channel.
"""
from .exceptions import VertiGLMError, exit_code_table
from .glm import (
    BINOMIAL,
    GAUSSIAN,
    POISSON,
    DesignBlock,
    FamilySpec,
    FullFit,
    TargetVector,
    add_intercept,
    center_block,
    fit_full_glm,
    get_family,
    make_target,
)
from .bcd import DescentConfig, DescentResult, block_descent, cyclic_descent
from .transport import loopback_pair, open_channel
from .protocol import FitResult, SessionConfig, run_party
from .standard_errors import IterationTrace, recover_standard_errors
from .attack import AdversaryView, Mitigation, expected_mse, reconstruct, revealed_fraction
from .ingest import export_block, ingest_csv
from .simulation import benchmark, generate_dataset, run_loopback, simulate, split_blocks
from .estimators import BlockCenterer, FullDataGLM, VerticalGLM

__version__ = "0.1.0"

__all__ = [
    "VertiGLMError", "exit_code_table",
    "GAUSSIAN", "BINOMIAL", "POISSON", "FamilySpec", "DesignBlock", "TargetVector", "FullFit",
    "add_intercept", "center_block", "fit_full_glm", "get_family", "make_target",
    "DescentConfig", "DescentResult", "block_descent", "cyclic_descent",
    "loopback_pair", "open_channel",
    "FitResult", "SessionConfig", "run_party",
    "IterationTrace", "recover_standard_errors",
    "AdversaryView", "Mitigation", "expected_mse", "reconstruct", "revealed_fraction",
    "export_block", "ingest_csv",
    "benchmark", "generate_dataset", "run_loopback", "simulate", "split_blocks",
    "BlockCenterer", "FullDataGLM", "VerticalGLM",
]
