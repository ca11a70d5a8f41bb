"""On-disk formats: dataset manifests, fit results, edge and score tables.

A dataset directory holds ``manifest.json`` plus one matrix file per subject
(T x R), optional structural vectors (one per group, length L*R^2) and an
optional L*R^2 x L*R^2 smoothing matrix.  Matrix files are raw little-endian
float64 in row-major order with the shape declared by the manifest; files
ending in ``.csv`` are read as comma-separated text instead.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path

import numpy as np

from .data import (SmoothingMatrix, StructuralPrior, StudyDataset, ValidationError,
                   index_table, n_coefficients)
from .metrics import SCORE_FIELDS, SelectionScore, mse, score_selection
from .vb import FitResult

log = logging.getLogger(__name__)

MANIFEST_VERSION = "effconn-manifest/1"
MANIFEST_NAME = "manifest.json"
EDGE_COLUMNS = ["group", "lag", "source_roi", "target_roi", "mpp", "strength", "sign", "sharing"]


# -- matrices ----------------------------------------------------------------

def write_matrix(path: Path, a: np.ndarray):
    path = Path(path)
    a = np.asarray(a, dtype=float)
    if path.suffix == ".csv":
        np.savetxt(path, np.atleast_2d(a), delimiter=",", fmt="%.17g")
    else:
        a.astype("<f8").tofile(path)


def read_matrix(path: Path, shape: tuple) -> np.ndarray:
    """Read a binary or CSV matrix and check it against ``shape``."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: file not found")
    if path.suffix == ".csv":
        a = _read_csv_matrix(path)
    else:
        raw = np.fromfile(path, dtype="<f8")
        if -1 not in shape and raw.size != int(np.prod(shape)):
            raise ValidationError(
                f"{path}: holds {raw.size} values, expected {int(np.prod(shape))} for shape {shape}")
        a = raw
    try:
        return a.reshape(shape)
    except ValueError:
        raise ValidationError(f"{path}: shape {a.shape} does not match declared {shape}") from None


def _read_csv_matrix(path: Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: non-numeric entry") from None
            if len(rows[-1]) != len(rows[0]):
                raise ValidationError(
                    f"{path}:{lineno}: {len(rows[-1])} columns, expected {len(rows[0])}")
    if not rows:
        raise ValidationError(f"{path}: empty matrix file")
    return np.array(rows)


# -- datasets ----------------------------------------------------------------

def write_dataset(directory, dataset: StudyDataset, prior: StructuralPrior | None = None,
                  smoothing: SmoothingMatrix | None = None, fmt: str = "bin") -> Path:
    """Write a dataset directory and return the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ext = ".csv" if fmt == "csv" else ".bin"
    subjects = []
    for s in range(dataset.n):
        name = f"subject_{s + 1:03d}{ext}"
        write_matrix(d / name, dataset.series[:, :, s])
        subjects.append(name)
    manifest = {
        "version": MANIFEST_VERSION,
        "T": dataset.T, "R": dataset.R, "n": dataset.n, "G": dataset.n_groups, "L": dataset.lag,
        "roi_names": list(dataset.roi_names),
        "group_labels": dataset.group_labels.tolist(),
        "subjects": subjects,
    }
    if prior is not None:
        manifest["structural"] = []
        for g, v in enumerate(prior.vectors):
            name = f"structural_{g + 1}{ext}"
            write_matrix(d / name, v)
            manifest["structural"].append(name)
    if smoothing is not None:
        write_matrix(d / f"smoothing{ext}", smoothing.S)
        manifest["smoothing"] = f"smoothing{ext}"
    path = d / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(path):
    """Load a manifest (or its directory) into (dataset, prior or None, smoothing)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ValidationError(f"{path}: manifest not found")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ValidationError(f"{path}:{err.lineno}: invalid JSON ({err.msg})") from None
    for key in ("T", "R", "n", "G", "L", "group_labels", "subjects"):
        if key not in m:
            raise ValidationError(f"{path}: manifest lacks required field {key!r}")
    if m.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise ValidationError(f"{path}: unsupported manifest version {m['version']!r}")
    T, R, n, G, L = (int(m[k]) for k in ("T", "R", "n", "G", "L"))
    K = n_coefficients(R, L)
    if len(m["subjects"]) != n:
        raise ValidationError(f"{path}: {len(m['subjects'])} subject files listed for n={n}")
    base = path.parent
    x = np.stack([read_matrix(base / f, (T, R)) for f in m["subjects"]], axis=2)
    dataset = StudyDataset(series=x, group_labels=np.asarray(m["group_labels"]), n_groups=G,
                           lag=L, roi_names=m.get("roi_names"))
    prior = None
    if m.get("structural"):
        refs = m["structural"]
        if len(refs) != G:
            raise ValidationError(f"{path}: {len(refs)} structural files for G={G} groups")
        vecs = []
        for f in refs:
            raw = read_matrix(base / f, (-1,))
            if raw.size != K:
                raise ValidationError(
                    f"{base / f}: structural vector has length {raw.size}, expected {K} (L*R^2)")
            vecs.append(raw)
        prior = StructuralPrior(np.stack(vecs))
    if m.get("smoothing"):
        smoothing = SmoothingMatrix(read_matrix(base / m["smoothing"], (K, K)))
    else:
        log.info("no smoothing matrix in %s; using the identity", path)
        smoothing = SmoothingMatrix.identity(K)
    return dataset, prior, smoothing


# -- fit results --------------------------------------------------------------

def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_fit(path, result: FitResult):
    """Deterministic FitResult JSON; wall time is kept out of it."""
    Path(path).write_text(dumps(result.to_dict(include_timing=False)))


def read_fit(path) -> FitResult:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: fit result not found")
    try:
        return FitResult.from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError) as err:
        raise ValidationError(f"{path}: not a fit result ({err})") from None


def read_truth(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: truth file not found")
    d = json.loads(path.read_text())
    if "gamma" not in d or "omega" not in d:
        raise ValidationError(f"{path}: truth file needs 'gamma' and 'omega'")
    return d


# -- edges --------------------------------------------------------------------

def sharing_tag(groups: tuple, n_groups: int) -> str:
    """'unique' for one group, 'shared' for all, otherwise e.g. 'groups:1+3'."""
    if len(groups) == 1 and n_groups > 1:
        return "unique"
    if len(groups) == n_groups:
        return "shared"
    return "groups:" + "+".join(str(g) for g in groups)


def edge_records(results, roi_names=None, mode: str = "all") -> list[dict]:
    """One record per selected edge per group, ordered by group, lag, source, target.

    ``results`` is one FitResult or a sequence whose groups are concatenated.
    ``mode`` keeps all edges, only ``unique`` or ``shared`` ones, or one
    ``groups:i+j`` combination.
    """
    if isinstance(results, FitResult):
        results = [results]
    results = list(results)
    if not results:
        raise ValidationError("need at least one fit result to export")
    R, L = results[0].R, results[0].L
    for r in results[1:]:
        if (r.R, r.L) != (R, L):
            raise ValidationError(f"inconsistent R/L across fits: {(R, L)} vs {(r.R, r.L)}")
    mpp = np.concatenate([r.mpp for r in results])
    strength = np.concatenate([r.omega_hat for r in results])
    selected = np.concatenate([r.selected for r in results])
    G = mpp.shape[0]
    names = roi_names or results[0].config.get("roi_names") or [f"ROI_{i + 1}" for i in range(R)]
    if len(names) != R:
        raise ValidationError(f"{len(names)} ROI names for R={R}")
    idx = index_table(R, L)
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))     # lag, source, target
    rows = []
    for g in range(G):
        for k in order:
            if not selected[g, k]:
                continue
            tag = sharing_tag(tuple(int(h) + 1 for h in np.flatnonzero(selected[:, k])), G)
            if mode != "all" and tag != mode:
                continue
            w = float(strength[g, k])
            rows.append({"group": g + 1, "lag": int(idx[k, 0]) + 1,
                         "source_roi": names[idx[k, 1]], "target_roi": names[idx[k, 2]],
                         "mpp": float(mpp[g, k]), "strength": w,
                         "sign": int(np.sign(w)), "sharing": tag})
    return rows


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def export_edges(path, results, roi_names=None, mode: str = "all") -> int:
    rows = edge_records(results, roi_names, mode)
    Path(path).write_text(_csv_text(EDGE_COLUMNS, rows))
    return len(rows)


# -- scores -------------------------------------------------------------------

def score_rows(result: FitResult, truth: dict) -> list[dict]:
    gamma = np.asarray(truth["gamma"], dtype=bool)
    omega = np.asarray(truth["omega"], dtype=float)
    if gamma.shape != result.mpp.shape:
        raise ValidationError(f"truth has shape {gamma.shape}, fit has {result.mpp.shape}")
    rows = []
    for g in range(gamma.shape[0]):
        sc: SelectionScore = score_selection(result.selected[g], gamma[g])
        rows.append({"group": g + 1, **sc.as_dict(),
                     "mse": mse(result.coefficient_estimate[g], omega[g])})
    return rows


def write_scores(path, rows):
    Path(path).write_text(_csv_text(["group", *SCORE_FIELDS, "mse"], rows))
