"""Dataset ingestion, covariate standardization and persisted outputs.

Tables are comma-separated with a fixed header and every float written with
17 significant digits, so two runs can be compared byte for byte. Scenario
and configuration files use a flat ``key = value`` format (``#`` starts a
comment).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import Dataset

FLOAT_FMT = "%.17g"
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "."})


class DataError(ValueError):
    """Base class for problems with user-supplied data or spec files."""

    code = "data_error"

    def to_dict(self) -> dict:
        out = {"error": self.code, "message": str(self)}
        for k, v in vars(self).items():
            if not k.startswith("_"):
                out[k] = v
        return out


class EmptyFileError(DataError):
    code = "empty_file"


class MissingColumnError(DataError):
    code = "missing_column"

    def __init__(self, column, available):
        super().__init__(f"column {column!r} not found; available columns: {', '.join(available)}")
        self.column = column
        self.available = list(available)


class NonNumericCellError(DataError):
    code = "non_numeric_cell"

    def __init__(self, column, line, value):
        super().__init__(f"non-numeric value {value!r} in column {column!r} at line {line}")
        self.column = column
        self.line = line
        self.value = value


class MissingValueError(DataError):
    code = "missing_values"

    def __init__(self, lines):
        shown = ", ".join(str(r) for r in lines[:20])
        more = "" if len(lines) <= 20 else f" (+{len(lines) - 20} more)"
        super().__init__(f"missing values at lines {shown}{more}")
        self.lines = list(lines)


class TreatmentValueError(DataError):
    code = "bad_treatment_value"

    def __init__(self, column, line, value):
        super().__init__(f"treatment column {column!r} must be 0/1, found {value!r} at line {line}")
        self.column = column
        self.line = line
        self.value = value


class OutcomeValueError(DataError):
    code = "bad_outcome_value"

    def __init__(self, column, line, value):
        super().__init__(f"binary outcome column {column!r} must be 0/1, found {value!r} at line {line}")
        self.column = column
        self.line = line
        self.value = value


class SingleArmError(DataError):
    code = "single_arm"

    def __init__(self, column, level):
        super().__init__(f"every subject has {column}={level}; both treatment arms are required")
        self.column = column
        self.level = level


class ZeroVarianceError(DataError):
    code = "zero_variance_covariate"

    def __init__(self, column):
        super().__init__(f"zero-variance covariate {column!r}")
        self.column = column


class SpecError(DataError):
    code = "bad_spec"


# --------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class Standardization:
    """Per-column transform applied to covariates before they enter the kernel.

    Continuous columns map ``x -> (x - center) / scale``. Binary columns
    (two distinct values) map the smaller value to 0 and the larger to 1,
    which is the same affine form with ``center = low`` and
    ``scale = high - low``.
    """

    columns: tuple
    kinds: tuple
    center: tuple
    scale: tuple

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return (X - np.asarray(self.center)) / np.asarray(self.scale)

    def invert(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        return Z * np.asarray(self.scale) + np.asarray(self.center)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "Standardization":
        return cls(**{k: tuple(d[k]) for k in ("columns", "kinds", "center", "scale")})


def standardize_covariates(X, columns=None) -> tuple[np.ndarray, Standardization]:
    """Standardize continuous columns to mean 0, SD 1 and recode two-valued columns to 0/1.

    The SD uses ``ddof=1``. A column with a single distinct value raises
    :class:`ZeroVarianceError`.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    columns = tuple(columns) if columns is not None else tuple(f"x{j + 1}" for j in range(X.shape[1]))
    kinds, center, scale = [], [], []
    for j, name in enumerate(columns):
        col = X[:, j]
        levels = np.unique(col)
        if levels.size < 2:
            raise ZeroVarianceError(name)
        if levels.size == 2:
            kinds.append("binary")
            center.append(float(levels[0]))
            scale.append(float(levels[1] - levels[0]))
        else:
            sd = float(np.std(col, ddof=1))
            if not sd > 0:
                raise ZeroVarianceError(name)
            kinds.append("continuous")
            center.append(float(np.mean(col)))
            scale.append(sd)
    st = Standardization(columns, tuple(kinds), tuple(center), tuple(scale))
    return st.apply(X), st


# --------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class IngestResult:
    dataset: Dataset
    standardization: Standardization
    outcome: str
    treatment: str
    sha256: str
    path: str
    key: np.ndarray | None = None


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _parse_cell(text, column, line):
    try:
        val = float(text)
    except ValueError:
        raise NonNumericCellError(column, line, text) from None
    if not math.isfinite(val):
        raise NonNumericCellError(column, line, text)
    return val


def ingest_csv(path, outcome: str, treatment: str, covariates=None, kind: str = "continuous",
               key: str | None = None) -> IngestResult:
    """Read a headed CSV into a standardized :class:`Dataset`.

    Parameters
    ----------
    path : path-like
    outcome, treatment : str
        Column names. Treatment must be coded 0/1, as must the outcome when
        ``kind == "binary"``.
    covariates : sequence of str, optional
        Defaults to every other column (excluding ``key``).
    key : str, optional
        Column carried along as the per-subject ordering key (e.g. a
        propensity score); never used by the model.

    Raises
    ------
    DataError
        A specific subclass per failure: empty file, missing column,
        non-numeric cell, missing values (with line numbers), bad
        treatment or outcome value, single arm, zero-variance covariate.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    # keep physical line numbers (1-based) for error messages
    rows = [(i + 1, r) for i, r in enumerate(rows) if any(c.strip() for c in r)]
    if not rows:
        raise EmptyFileError(f"{path} is empty")
    header = [h.strip() for h in rows[0][1]]
    body = rows[1:]
    if not body:
        raise EmptyFileError(f"{path} has a header but no data rows")
    if covariates is None:
        covariates = [h for h in header if h not in (outcome, treatment, key)]
    covariates = list(covariates)
    if not covariates:
        raise DataError("no covariate columns selected")
    wanted = [outcome, treatment, *covariates] + ([key] if key else [])
    for name in wanted:
        if name not in header:
            raise MissingColumnError(name, header)
    idx = [header.index(name) for name in wanted]

    missing, values, lines = [], [], []
    for line, row in body:
        cells = [row[i].strip() if i < len(row) else "" for i in idx]
        if any(c.lower() in MISSING_TOKENS for c in cells):
            missing.append(line)
            continue
        values.append([_parse_cell(c, name, line) for c, name in zip(cells, wanted)])
        lines.append((line, cells))
    if missing:
        raise MissingValueError(missing)
    M = np.asarray(values, dtype=float)
    y, a = M[:, 0], M[:, 1]
    X = M[:, 2 : 2 + len(covariates)]

    for (line, cells), v in zip(lines, a):
        if v not in (0.0, 1.0):
            raise TreatmentValueError(treatment, line, cells[1])
    if a.min() == a.max():
        raise SingleArmError(treatment, int(a[0]))
    if kind == "binary":
        for (line, cells), v in zip(lines, y):
            if v not in (0.0, 1.0):
                raise OutcomeValueError(outcome, line, cells[0])
    Z, st = standardize_covariates(X, covariates)
    ds = Dataset(y, a, Z, kind)
    return IngestResult(
        dataset=ds,
        standardization=st,
        outcome=outcome,
        treatment=treatment,
        sha256=file_digest(path),
        path=str(path),
        key=M[:, -1].copy() if key else None,
    )


# --------------------------------------------------------------------------
# tables and key-value files


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % float(v)
    return str(v)


def write_table(path, header, rows) -> None:
    """Write a CSV with ``\\n`` line endings and 17-significant-digit floats."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])


def read_table(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def parse_kv(text: str, source: str = "<spec>") -> dict:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise SpecError(f"{source}:{lineno}: empty key")
        if k in out:
            raise SpecError(f"{source}:{lineno}: duplicate key {k!r}")
        out[k] = v
    return out


def read_kv(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SpecError(f"cannot read spec file {path}: {exc.strerror}") from None
    return parse_kv(text, str(path))


# --------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    """Everything needed to repeat a run: inputs, settings, seed and software version.

    Diagnostics and timings are recorded for information; they do not
    influence a rerun.
    """

    command: str
    version: str
    settings: dict
    input: dict = field(default_factory=dict)
    standardization: dict | None = None
    chains: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SpecError(f"cannot read manifest {path}: {exc}") from None
        return cls(**d)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    if isinstance(o, os.PathLike):
        return os.fspath(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
