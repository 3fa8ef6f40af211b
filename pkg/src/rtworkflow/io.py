"""Reading and writing data, draws and reports.

Every file is written to a temporary sibling and renamed into place, so a
crashed run never leaves a half-written output behind.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataParseError
from .hmc import PosteriorDraws
from .model import Dataset, ExperimentDesign

DRAWS_FORMAT_VERSION = 1
DATA_COLUMNS = ("subj", "item", "so", "rt")


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _clean(obj):
    # JSON has no NaN/inf; numpy scalars and arrays become plain values
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def fmt(v) -> str:
    """Shortest round-tripping text for a float (repr), integers as integers."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------------------
# data files


def parse_data(path, require_balance: bool = False):
    """Read a ``subj,item,so,rt`` CSV into a Dataset.

    Subject and item labels may be arbitrary strings; they are re-indexed
    densely in order of first appearance. Returns ``(dataset, mapping)`` where
    ``mapping`` holds the original labels per dense index.
    """
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DataParseError("file is empty; expected a header subj,item,so,rt", line=1)
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    missing = [c for c in DATA_COLUMNS if c not in header]
    if missing:
        raise DataParseError(f"missing column(s) {', '.join(missing)}; header must contain subj,item,so,rt",
                             line=1)
    col = {c: header.index(c) for c in DATA_COLUMNS}
    subj_ids, item_ids = {}, {}
    subj, item, so, rt = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise DataParseError(f"expected {len(header)} fields, found {len(row)}", line=lineno)
        s, i = row[col["subj"]].strip(), row[col["item"]].strip()
        try:
            code = float(row[col["so"]])
        except ValueError:
            raise DataParseError(f"so must be -1 or 1, got {row[col['so']]!r}", line=lineno) from None
        if code not in (-1.0, 1.0):
            raise DataParseError(
                f"so must be sum-coded as -1 (subject relative) or 1 (object relative), got {row[col['so']]!r}; "
                "recode 0/1 treatment coding as -1/1", line=lineno)
        try:
            r = float(row[col["rt"]])
        except ValueError:
            raise DataParseError(f"rt is not numeric: {row[col['rt']]!r}", line=lineno) from None
        if not (math.isfinite(r) and r > 0):
            raise DataParseError(f"rt must be a positive number of milliseconds, got {row[col['rt']]!r}",
                                 line=lineno)
        subj.append(subj_ids.setdefault(s, len(subj_ids)))
        item.append(item_ids.setdefault(i, len(item_ids)))
        so.append(int(code))
        rt.append(r)
    if not rt:
        raise DataParseError("no data rows after the header", line=2)
    design = ExperimentDesign(len(subj_ids), len(item_ids), np.array(subj), np.array(item), np.array(so),
                              require_balance=require_balance)
    mapping = {"subj": list(subj_ids), "item": list(item_ids)}
    return Dataset(design, np.array(rt)), mapping


def write_data(path, data: Dataset, mapping=None) -> Path:
    d = data.design
    sl = mapping["subj"] if mapping else [str(s + 1) for s in range(d.n_subjects)]
    il = mapping["item"] if mapping else [str(i + 1) for i in range(d.n_items)]
    rows = ((sl[s], il[i], int(c), float(r)) for s, i, c, r in zip(d.subject, d.item, d.so, data.rt_ms))
    return write_csv(path, DATA_COLUMNS, rows)


def write_mapping(path, mapping) -> Path:
    rows = [("subj", k, lab) for k, lab in enumerate(mapping["subj"])]
    rows += [("item", k, lab) for k, lab in enumerate(mapping["item"])]
    return write_csv(path, ("kind", "index", "label"), rows)


# ---------------------------------------------------------------------------
# draws


def persist_draws(draws: PosteriorDraws, path) -> Path:
    """Write ``chain,iter,<params>,divergent`` CSV plus a JSON sidecar with metadata."""
    path = Path(path)
    rows = []
    for c in range(draws.n_chains):
        for t in range(draws.n_iter):
            rows.append([c, int(draws.iteration_index[t])] + [float(v) for v in draws.draws[c, t]]
                        + [int(draws.divergent[c, t])])
    write_csv(path, ["chain", "iter", *draws.param_names, "divergent"], rows)
    meta = {
        "format_version": DRAWS_FORMAT_VERSION,
        "n_chains": draws.n_chains,
        "n_iter": draws.n_iter,
        "param_names": list(draws.param_names),
        "step_size": [float(v) for v in np.ravel(draws.step_size)],
        "inv_metric": np.asarray(draws.inv_metric).tolist(),
        "adapt_delta": draws.adapt_delta,
        "max_tree_depth": draws.max_tree_depth,
        "retries": draws.retries,
        "remediation": list(draws.remediation),
        "thin": draws.thin,
    }
    write_json(sidecar_path(path), meta)
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_draws(path) -> PosteriorDraws:
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise DataParseError(f"metadata sidecar {side} not found")
    meta = json.loads(side.read_text())
    version = meta.get("format_version")
    if version != DRAWS_FORMAT_VERSION:
        raise DataParseError(f"draws format version {version!r} is not supported (expected {DRAWS_FORMAT_VERSION})")
    names = meta["param_names"]
    n_chains, n_iter = meta["n_chains"], meta["n_iter"]
    lines = path.read_text().splitlines()
    if not lines:
        raise DataParseError("draws file is empty (corrupt or truncated)", line=1)
    header = lines[0].split(",")
    if header != ["chain", "iter", *names, "divergent"]:
        raise DataParseError("draws header does not match the sidecar parameter names", line=1)
    expected = n_chains * n_iter
    if len(lines) - 1 != expected:
        raise DataParseError(f"draws file is corrupt or truncated: {len(lines) - 1} rows, expected {expected}",
                             line=len(lines))
    vals = np.empty((expected, len(names)))
    div = np.zeros(expected, dtype=bool)
    iters = np.empty(expected, dtype=np.int64)
    for k, line in enumerate(lines[1:]):
        parts = line.split(",")
        if len(parts) != len(header):
            raise DataParseError(f"draws file is corrupt: {len(parts)} fields, expected {len(header)}", line=k + 2)
        try:
            iters[k] = int(parts[1])
            vals[k] = [float(v) for v in parts[2:-1]]
            div[k] = bool(int(parts[-1]))
        except ValueError as exc:
            raise DataParseError(f"draws file is corrupt: {exc}", line=k + 2) from None
    return PosteriorDraws(
        param_names=list(names),
        draws=vals.reshape(n_chains, n_iter, len(names)),
        divergent=div.reshape(n_chains, n_iter),
        step_size=np.array(meta["step_size"]),
        inv_metric=np.array(meta["inv_metric"]),
        adapt_delta=meta["adapt_delta"],
        max_tree_depth=meta["max_tree_depth"],
        retries=meta["retries"],
        remediation=list(meta.get("remediation", [])),
        thin=meta["thin"],
        iteration_index=iters[:n_iter].copy(),
    )
