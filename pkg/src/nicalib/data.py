"""Subject-level trial data and CSV ingestion.

CSV layout: header ``subject_id,trial,arm,outcome`` followed by any number of
covariate columns. ``trial`` is ``H`` (historical) or ``C`` (current), ``arm``
is ``0`` or ``1``. Arm 0 is the comparator whose effect is being measured
against: placebo in the historical trial, the active control in the current
trial, so arm0-vs-arm1 contrasts give mu_CP and mu_TC respectively.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import DimensionMismatchError, IngestError, ValidationError

REQUIRED_COLUMNS = ("subject_id", "trial", "arm", "outcome")
TRIAL_CODES = ("H", "C")


class SubjectRecord(NamedTuple):
    subject_id: str
    trial: str
    arm: int
    outcome: float
    covariates: tuple[float, ...]


@dataclass(frozen=True)
class PooledDataset:
    """Column-oriented, read-only collection of subject records.

    Historical-only data are allowed here; operations that need both trials
    call :meth:`require_pooled`.
    """

    subject_id: np.ndarray
    trial: np.ndarray
    arm: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    covariate_labels: tuple[str, ...]

    def __post_init__(self):
        sid = np.array(self.subject_id, dtype=object).reshape(-1)
        trial = np.array(self.trial, dtype=str).reshape(-1)
        arm = np.array(self.arm, dtype=np.int64).reshape(-1)
        outcome = np.array(self.outcome, dtype=float).reshape(-1)
        n = sid.shape[0]
        cov = np.array(self.covariates, dtype=float)
        if cov.size == 0 and cov.ndim != 2:
            cov = cov.reshape(n, 0)
        labels = tuple(self.covariate_labels)
        if cov.ndim != 2 or cov.shape[1] != len(labels):
            raise DimensionMismatchError("covariate matrix does not match its labels")
        if len(set(labels)) != len(labels):
            raise ValidationError(f"duplicate covariate labels {labels}")
        for name, a in (("trial", trial), ("arm", arm), ("outcome", outcome), ("covariates", cov)):
            if a.shape[0] != n:
                raise DimensionMismatchError(f"{name} has {a.shape[0]} rows, expected {n}")
        if not np.all(np.isin(trial, TRIAL_CODES)):
            raise ValidationError("trial codes must be 'H' or 'C'")
        if not np.all((arm == 0) | (arm == 1)):
            raise ValidationError("arm codes must be 0 or 1")
        for name, a in (("subject_id", sid), ("trial", trial), ("arm", arm), ("outcome", outcome), ("covariates", cov)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "covariate_labels", labels)

    @classmethod
    def from_arrays(cls, trial, arm, outcome, covariates: dict | None = None, subject_id=None):
        n = len(trial)
        covariates = covariates or {}
        if subject_id is None:
            subject_id = [f"s{i + 1}" for i in range(n)]
        labels = tuple(covariates)
        cov = np.column_stack([np.asarray(v, dtype=float) for v in covariates.values()]) if labels else np.empty((n, 0))
        return cls(subject_id, trial, arm, outcome, cov, labels)

    def __len__(self) -> int:
        return self.subject_id.shape[0]

    @property
    def is_current(self) -> np.ndarray:
        return self.trial == "C"

    @property
    def is_historical(self) -> np.ndarray:
        return self.trial == "H"

    @property
    def n_historical(self) -> int:
        return int(np.sum(self.is_historical))

    @property
    def n_current(self) -> int:
        return int(np.sum(self.is_current))

    @property
    def outcome_is_binary(self) -> bool:
        return bool(np.all((self.outcome == 0) | (self.outcome == 1)))

    def covariate(self, name: str) -> np.ndarray:
        try:
            return self.covariates[:, self.covariate_labels.index(name)]
        except ValueError:
            raise ValidationError(
                f"unknown covariate {name!r}; available: {', '.join(self.covariate_labels) or 'none'}"
            ) from None

    def take(self, index) -> "PooledDataset":
        return PooledDataset(
            self.subject_id[index],
            self.trial[index],
            self.arm[index],
            self.outcome[index],
            self.covariates[index],
            self.covariate_labels,
        )

    def historical(self) -> "PooledDataset":
        return self.take(self.is_historical)

    def current(self) -> "PooledDataset":
        return self.take(self.is_current)

    def require_pooled(self) -> None:
        if self.n_historical < 1 or self.n_current < 1:
            raise ValidationError(
                f"pooled data need both trials (historical {self.n_historical}, current {self.n_current})"
            )

    def records(self) -> Iterator[SubjectRecord]:
        for i in range(len(self)):
            yield SubjectRecord(
                str(self.subject_id[i]),
                str(self.trial[i]),
                int(self.arm[i]),
                float(self.outcome[i]),
                tuple(float(v) for v in self.covariates[i]),
            )

    def tallies(self) -> dict:
        """Subject and event counts per trial and arm."""
        out = {"n_rows": len(self), "covariates": list(self.covariate_labels), "cells": {}}
        for t in TRIAL_CODES:
            for a in (0, 1):
                m = (self.trial == t) & (self.arm == a)
                if np.any(m):
                    out["cells"][f"{t}{a}"] = {
                        "n": int(np.sum(m)),
                        "outcome_sum": float(np.sum(self.outcome[m])),
                    }
        return out

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(REQUIRED_COLUMNS) + list(self.covariate_labels))
        for rec in self.records():
            writer.writerow(
                [rec.subject_id, rec.trial, rec.arm, _fmt(rec.outcome)] + [_fmt(v) for v in rec.covariates]
            )
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def concat(parts: Sequence[PooledDataset]) -> PooledDataset:
    labels = parts[0].covariate_labels
    for p in parts[1:]:
        if p.covariate_labels != labels:
            raise ValidationError("covariate schema differs between datasets")
    return PooledDataset(
        np.concatenate([p.subject_id for p in parts]),
        np.concatenate([p.trial for p in parts]),
        np.concatenate([p.arm for p in parts]),
        np.concatenate([p.outcome for p in parts]),
        np.concatenate([p.covariates for p in parts]),
        labels,
    )


def ingest(path: str | Path, family: str | None = "bernoulli", columns: Sequence[str] | None = None) -> PooledDataset:
    """Read and validate a trial CSV.

    ``family='bernoulli'`` requires 0/1 outcomes; ``'gaussian'`` or ``None``
    accept any real outcome. ``columns`` restricts which covariates are
    parsed (and so which must be free of missing cells).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8-sig")
    except UnicodeDecodeError as exc:
        raise IngestError(f"{path} is not valid UTF-8") from exc
    return parse_csv(text, family=family, columns=columns)


def parse_csv(text: str, family: str | None = "bernoulli", columns: Sequence[str] | None = None) -> PooledDataset:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or not any(h.strip() for h in header):
        raise IngestError("missing header row", row=1)
    header = [h.strip() for h in header]
    for col in REQUIRED_COLUMNS:
        if col not in header:
            raise IngestError(f"missing required column {col!r}", row=1)
    if len(set(header)) != len(header):
        raise IngestError("duplicate column names in header", row=1)
    cov_names = [h for h in header if h not in REQUIRED_COLUMNS]
    if columns is not None:
        missing = [c for c in columns if c not in cov_names]
        if missing:
            raise IngestError(f"missing covariate column(s) {', '.join(missing)}", row=1)
        cov_names = list(columns)
    idx = {h: i for i, h in enumerate(header)}

    ids, trials, arms, outcomes, covs = [], [], [], [], []
    seen: dict[str, int] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise IngestError(f"expected {len(header)} fields, found {len(row)}", row=lineno)

        def cell(name):
            v = row[idx[name]].strip()
            if v == "":
                raise IngestError(f"missing value in column {name!r}", row=lineno)
            return v

        sid = cell("subject_id")
        if sid in seen:
            raise IngestError(f"duplicate subject_id {sid!r} (first seen on row {seen[sid]})", row=lineno)
        seen[sid] = lineno
        trial = cell("trial").upper()
        if trial not in TRIAL_CODES:
            raise IngestError(f"unknown trial code {cell('trial')!r} (expected H or C)", row=lineno)
        arm_raw = cell("arm")
        if arm_raw not in ("0", "1"):
            raise IngestError(f"unknown arm code {arm_raw!r} (expected 0 or 1)", row=lineno)
        y = _number(cell("outcome"), "outcome", lineno)
        if family == "bernoulli" and y not in (0.0, 1.0):
            raise IngestError(f"outcome {cell('outcome')!r} is not binary (0/1)", row=lineno)
        ids.append(sid)
        trials.append(trial)
        arms.append(int(arm_raw))
        outcomes.append(y)
        covs.append([_number(cell(c), c, lineno) for c in cov_names])

    n = len(ids)
    cov = np.array(covs, dtype=float).reshape(n, len(cov_names))
    return PooledDataset(np.array(ids, dtype=object), trials, arms, outcomes, cov, tuple(cov_names))


def _number(raw: str, column: str, lineno: int) -> float:
    try:
        v = float(raw)
    except ValueError:
        raise IngestError(f"non-numeric value {raw!r} in column {column!r}", row=lineno) from None
    if not math.isfinite(v):
        raise IngestError(f"non-finite value {raw!r} in column {column!r}", row=lineno)
    return v


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
