"""Stage file formats: CSV matrices, JSON records, TSV plot data."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np


class InputFileError(ValueError):
    """A stage input file is missing or malformed."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config_dict: dict) -> str:
    return hashlib.sha256(canonical_json(config_dict).encode("utf-8")).hexdigest()[:16]


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, payload: dict, cfg_hash: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(payload)
    if cfg_hash is not None:
        body["config_hash"] = cfg_hash
    path.write_text(json.dumps(_clean(body), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputFileError(f"missing input file {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputFileError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc


def write_matrix_csv(path, M, row_names: Sequence[str], col_names: Sequence[str] | None = None, corner: str = "task") -> Path:
    """Matrix with a header row of column names and the row name first."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    M = np.asarray(M, dtype=np.float64)
    col_names = list(col_names) if col_names is not None else list(row_names)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([corner] + col_names)
        for name, row in zip(row_names, M):
            w.writerow([name] + [repr(float(v)) for v in row])
    return path


def read_matrix_csv(path) -> tuple[np.ndarray, list[str], list[str]]:
    path = Path(path)
    if not path.exists():
        raise InputFileError(f"missing input file {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputFileError(f"{path}: empty file")
    header = rows[0][1:]
    names, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header) + 1:
            raise InputFileError(f"{path}:{lineno}: expected {len(header) + 1} fields, got {len(row)}")
        names.append(row[0])
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise InputFileError(f"{path}:{lineno}: {exc}") from exc
    return np.asarray(values, dtype=np.float64).reshape(len(names), len(header)), names, header


def write_tsv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_tsv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise InputFileError(f"missing input file {path}")
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def curves_rows(curves: dict[str, Sequence[float]], label: str = ""):
    for key, curve in curves.items():
        for epoch, loss in enumerate(curve):
            yield (label, key, epoch, float(loss))
