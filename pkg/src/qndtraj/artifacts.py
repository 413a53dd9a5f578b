"""CSV and JSON artifacts.

Floats are written with 17 significant digits so that every value round
trips exactly, and JSON is emitted with sorted keys, which makes artifacts
byte-identical for identical inputs.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .qdyn import MeasurementRecord


class SchemaError(ValueError):
    """A CSV artifact is missing columns or is malformed."""


def fmt(x) -> str:
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def write_csv(path, header, columns):
    """Write equal-length ``columns`` under ``header``; integer columns stay integers."""
    cols = [np.asarray(c) for c in columns]
    rows = cols[0].shape[0]
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    fmts = [(lambda v: str(int(v))) if np.issubdtype(c.dtype, np.integer) else fmt for c in cols]
    for k in range(rows):
        buf.write(",".join(f(c[k]) for f, c in zip(fmts, cols)) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_csv(path):
    """Return ``(header, float array)``."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return header, np.array(rows)


def trajectory_header(dim, n_diffusive, n_counting):
    return (
        ["t"]
        + [f"q_{a}" for a in range(dim)]
        + [f"y_{i}" for i in range(n_diffusive)]
        + [f"N_{n_diffusive + j}" for j in range(n_counting)]
        + [f"dy_{i}" for i in range(n_diffusive)]
    )


def write_trajectory(path, traj, meta: dict):
    """Write a population trajectory and its record, plus a JSON sidecar."""
    rec = traj.record
    K = rec.n_steps
    stride = traj.stride
    idx = np.rint(traj.times / rec.dt).astype(np.int64)
    y = rec.y()[idx]
    N = rec.counts()[idx]
    # exact per-row increments; differencing the cumulative y would round
    dy = np.zeros_like(y)
    if stride == 1:
        dy[1:] = rec.dy[idx[1:] - 1]
    else:
        dy[1:] = np.diff(y, axis=0)
    d = traj.q.shape[1]
    header = trajectory_header(d, y.shape[1], N.shape[1])
    cols = [traj.times] + [traj.q[:, a] for a in range(d)]
    cols += [y[:, i] for i in range(y.shape[1])] + [N[:, j] for j in range(N.shape[1])]
    cols += [dy[:, i] for i in range(dy.shape[1])]
    write_csv(path, header, cols)
    side = dict(meta)
    side.update({
        "dt": rec.dt, "T": K * rec.dt, "seed": traj.seed, "index": traj.index,
        "stride": stride, "clips": traj.clips, "repairs": traj.repairs,
    })
    write_json(Path(path).with_suffix(".json"), side)


def read_record(path, dim, n_diffusive, n_counting, dt=None):
    """Rebuild populations and a :class:`MeasurementRecord` from a trajectory CSV.

    The file must hold every step (stride 1) so the increments can be
    recovered.  The exact ``dy_i`` columns are used when present; otherwise
    the increments are differenced from the cumulative ``y_i``.
    """
    header, data = read_csv(path)
    expected = [h for h in trajectory_header(dim, n_diffusive, n_counting) if not h.startswith("dy_")]
    missing = [h for h in expected if h not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    col = {h: header.index(h) for h in expected}
    t = data[:, col["t"]]
    if t.size < 2 or t[0] != 0.0:
        raise SchemaError(f"{path}: time column must start at 0 with at least two rows")
    steps = np.diff(t)
    side = Path(path).with_suffix(".json")
    if side.exists():
        try:
            meta = json.loads(side.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{side}: {exc}") from None
        if meta.get("stride", 1) != 1:
            raise SchemaError(f"{path}: stored with stride {meta['stride']}; replay needs stride 1")
        if dt is None and "dt" in meta:
            dt = float(meta["dt"])
    if dt is None:
        dt = float(steps[0])
    if np.max(np.abs(steps - dt)) > 1e-9 * max(dt, 1.0):
        raise SchemaError(f"{path}: rows are not on a uniform grid with step {dt}; replay needs stride 1")
    q = data[:, [col[f"q_{a}"] for a in range(dim)]]
    y = data[:, [col[f"y_{i}"] for i in range(n_diffusive)]]
    N = data[:, [col[f"N_{n_diffusive + j}"] for j in range(n_counting)]]
    if all(f"dy_{i}" in header for i in range(n_diffusive)):
        dy = data[1:, [header.index(f"dy_{i}") for i in range(n_diffusive)]]
        # rows dropped from the file would leave dy out of step with y
        if np.any(np.abs(np.diff(y, axis=0) - dy) > 1e-9 * (1.0 + np.abs(y[1:]))):
            raise SchemaError(f"{path}: dy columns disagree with y; rows missing or edited")
    else:
        dy = np.diff(y, axis=0)
    dN = np.diff(N, axis=0)
    if np.any((dN != 0) & (dN != 1)):
        raise SchemaError(f"{path}: counts must increase by 0 or 1 per step")
    jumps = dN.astype(np.uint8)
    return t, q, MeasurementRecord(dt, np.ascontiguousarray(dy), np.ascontiguousarray(jumps))
