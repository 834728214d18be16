"""CSV data and JSON model files."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .gam import Dataset, GamModel
from .nested import NestedModel
from .splines import SplineFunction


class DataError(ValueError):
    """Unreadable or invalid input data."""


def read_table(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Header and numeric body of a comma-separated UTF-8 file."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError("duplicate column names")
    body = rows[1:]
    if not body:
        raise DataError(f"{path} has no data rows")
    try:
        values = np.array([[float(cell) for cell in r] for r in body], dtype=float)
    except ValueError as exc:
        raise DataError(f"non-numeric entry in {path}: {exc}") from exc
    if values.ndim != 2 or values.shape[1] != len(header):
        raise DataError("ragged rows: every row needs one value per header column")
    return header, values


def _columns(header: list[str], names: Sequence[str]) -> list[int]:
    missing = [c for c in names if c not in header]
    if missing:
        raise DataError(f"unknown column(s): {', '.join(missing)}")
    return [header.index(c) for c in names]


def read_dataset(path: str | Path, response: str, covariates: Sequence[str]) -> Dataset:
    header, values = read_table(path)
    yi = _columns(header, [response])[0]
    xi = _columns(header, covariates)
    try:
        return Dataset(values[:, xi], values[:, yi])
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def read_covariates(path: str | Path, covariates: Sequence[str]) -> np.ndarray:
    header, values = read_table(path)
    x = values[:, _columns(header, covariates)]
    if not np.all(np.isfinite(x)):
        raise DataError("missing or non-finite covariate values")
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise DataError("covariates must lie in [0, 1]")
    return x


def write_predictions(path: str | Path, yhat: np.ndarray, clamps: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prediction", "clamped"])
        for v, c in zip(yhat, clamps):
            w.writerow([repr(float(v)), int(c)])


# -- models -------------------------------------------------------------------

def gam_to_dict(model: GamModel, k: int) -> dict:
    return {
        "link": model.link.to_dict(),
        "components": [m.to_dict() for m in model.components],
        "norming": model.norming,
        "k": int(k),
        "meta": _plain(model.meta),
    }


def gam_from_dict(d: dict) -> tuple[GamModel, int]:
    model = GamModel(
        SplineFunction.from_dict(d["link"]),
        [SplineFunction.from_dict(m) for m in d["components"]],
        d.get("norming", "raw"),
        dict(d.get("meta", {})),
    )
    return model, int(d.get("k", 2))


def _plain(meta: dict) -> dict:
    out = {}
    for key, v in meta.items():
        if isinstance(v, (np.generic,)):
            v = v.item()
        if isinstance(v, (str, int, float, bool)) or v is None:
            out[key] = v
        elif isinstance(v, (list, tuple)) and all(isinstance(e, (str, int, float, bool)) for e in v):
            out[key] = list(v)
    return out


def save_model(model: GamModel | NestedModel, path: str | Path, k: int = 2) -> None:
    if isinstance(model, NestedModel):
        d = model.to_dict()
        d["kind"] = "nested"
    else:
        d = gam_to_dict(model, k)
        d["kind"] = "gam"
    Path(path).write_text(json.dumps(d, indent=1))


def load_model(path: str | Path) -> GamModel | NestedModel:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc
    try:
        if d.get("kind") == "nested" or "root" in d:
            return NestedModel.from_dict(d)
        return gam_from_dict(d)[0]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model file {path}: {exc}") from exc
