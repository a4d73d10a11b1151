"""CSV in, design block and target out (and back again)."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .exceptions import ConstantColumn, DataError, EmptyData, MissingValue, UnknownColumn
from .glm import DesignBlock, get_family, make_target


def _is_categorical(series: pd.Series) -> bool:
    return not pd.api.types.is_numeric_dtype(series) or pd.api.types.is_bool_dtype(series)


def _dummies(series: pd.Series):
    # reference coding: levels in lexical order, first one dropped
    levels = sorted(series.astype(str).unique())
    codes = series.astype(str).to_numpy()
    cols = [(codes == lev).astype(float) for lev in levels[1:]]
    names = [f"{series.name}[{lev}]" for lev in levels[1:]]
    return cols, names


def ingest_frame(df: pd.DataFrame, target_column: str, feature_columns: Optional[Sequence[str]] = None,
                 family="gaussian", standardize=False):
    """Turn a data frame into ``(DesignBlock, TargetVector)``.

    Categorical columns become indicator columns; every column is centered
    and continuous ones are scaled to unit variance when ``standardize``.
    """
    fam = get_family(family)
    if df.shape[0] == 0:
        raise EmptyData("no data rows")
    cols = list(df.columns)
    if target_column not in cols:
        raise UnknownColumn(f"target column {target_column!r} not found")
    if feature_columns is None:
        feature_columns = [c for c in cols if c != target_column]
    else:
        feature_columns = list(feature_columns)
        missing = [c for c in feature_columns if c not in cols]
        if missing:
            raise UnknownColumn(f"feature column(s) {missing} not found")
    if not feature_columns:
        raise EmptyData("no feature columns selected")

    used = df[[target_column] + [c for c in feature_columns if c != target_column]]
    na = used.isna().to_numpy()
    if na.any():
        row, j = np.argwhere(na)[0]
        col = used.columns[j]
        raise MissingValue(int(row), col)

    values, names, continuous = [], [], []
    for c in feature_columns:
        s = df[c]
        if _is_categorical(s):
            dcols, dnames = _dummies(s)
            values += dcols
            names += dnames
            continuous += [False] * len(dcols)
        else:
            values.append(s.to_numpy(dtype=float))
            names.append(str(c))
            continuous.append(True)
    if not values:
        raise EmptyData("categorical features have a single level and produce no columns")
    X = np.column_stack(values)
    means = X.mean(axis=0)
    Xc = X - means
    scales = None
    if standardize:
        scales = np.ones(X.shape[1])
        for j in np.flatnonzero(continuous):
            sd = Xc[:, j].std(ddof=1)
            if sd <= 1e-12 * max(1.0, abs(means[j])):
                raise ConstantColumn(f"column {names[j]!r} has zero variance", column=names[j])
            scales[j] = sd
        Xc = Xc / scales
    block = DesignBlock(Xc, tuple(names), centered=True, column_means=means, column_scales=scales)

    y = df[target_column]
    if _is_categorical(y):
        levels = sorted(y.astype(str).unique())
        if fam.family != "binomial" or len(levels) != 2:
            raise DataError(f"target {target_column!r} is not numeric")
        y = (y.astype(str) == levels[1]).astype(float)
    target = make_target(y.to_numpy(dtype=float), fam)
    return block, target


def ingest_csv(path, target_column, feature_columns=None, family="gaussian", standardize=False):
    """Read ``path`` and return ``(DesignBlock, TargetVector)``.

    Rows must be complete; the first missing cell is reported with its
    0-based data-row index.
    """
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise EmptyData(f"{path} is empty") from None
    return ingest_frame(df, target_column, feature_columns, family, standardize)


def export_block(block: DesignBlock, path=None, uncenter=False):
    """Undo standardization (and optionally centering) and write a CSV.

    Returns the exported frame.
    """
    X = np.array(block.values)
    if block.column_scales is not None:
        X = X * block.column_scales
    if uncenter:
        X = X + block.column_means
    df = pd.DataFrame(X, columns=list(block.column_names))
    if path is not None:
        df.to_csv(path, index=False, float_format="%.17g")
    return df
