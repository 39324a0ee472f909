"""File formats: cloud CSV, PLY, GMM and transform CSVs.

Floats are written with ``repr`` (shortest round-trip form), so writing and
reading back is exact and output bytes are reproducible.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import plyfile

from .core import (
    GmmModel,
    NotPSD,
    ObservedCloud,
    ParseError,
    RigidTransform,
    check_psd,
    cov_from_upper,
    cov_to_upper,
)

CLOUD_COLUMNS = ("x", "y", "z", "sxx", "syy", "szz", "sxy", "sxz", "syz")
GMM_COLUMNS = ("mu_x", "mu_y", "mu_z", "sigma2", "weight")
TRANSFORM_COLUMNS = tuple(f"r{i}{j}" for i in range(3) for j in range(3)) + ("tx", "ty", "tz")


def _fmt(v):
    return repr(float(v))


def _write_rows(path, header, rows):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def _read_numeric(path, required, optional=()):
    """Read a headed numeric CSV; returns (columns present, float array)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file (header required)", line=1) from None
        allowed = list(required) + list(optional)
        if header[:len(required)] != list(required) or any(h not in allowed for h in header):
            raise ParseError(f"bad header {header}; expected {list(required)} "
                             f"optionally followed by {list(optional)}", line=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not all(np.isfinite(vals)):
                raise ParseError("non-finite value", line=lineno)
            rows.append(vals)
    return header, np.array(rows, dtype=float).reshape(-1, len(header))


def parse_cloud_csv(path, cloud_id=None):
    """Read ``x,y,z,sxx,syy,szz[,sxy,sxz,syz]`` rows into an ObservedCloud."""
    header, data = _read_numeric(path, CLOUD_COLUMNS[:6], CLOUD_COLUMNS[6:])
    if len(data) == 0:
        raise ParseError("no data rows")
    upper = np.zeros((len(data), 6))
    for c, name in enumerate(header):
        if name in CLOUD_COLUMNS[3:]:
            upper[:, CLOUD_COLUMNS.index(name) - 3] = data[:, c]
    covs = cov_from_upper(upper)
    for i, cov in enumerate(covs):
        try:
            check_psd(cov)
        except NotPSD:
            raise NotPSD(f"row {i}: noise covariance is not PSD", index=i) from None
    points = data[:, [header.index("x"), header.index("y"), header.index("z")]]
    return ObservedCloud(cloud_id or Path(path).stem, points, covs)


def write_cloud_csv(cloud, path):
    upper = cov_to_upper(cloud.noise_covs)
    rows = (list(p) + list(u) for p, u in zip(cloud.points, upper))
    return _write_rows(path, CLOUD_COLUMNS, rows)


def parse_ply(path, with_faces=False):
    """Vertex positions of an ASCII or binary PLY file; other properties are
    ignored. With ``with_faces`` also returns the triangle index array (or
    ``None`` when the file has no faces)."""
    try:
        ply = plyfile.PlyData.read(str(path))
        vertex = ply["vertex"]
        pts = np.column_stack([np.asarray(vertex[a], dtype=float) for a in "xyz"])
    except (plyfile.PlyParseError, KeyError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not with_faces:
        return pts
    faces = None
    if "face" in ply:
        face = ply["face"]
        name = "vertex_indices" if "vertex_indices" in face.data.dtype.names else "vertex_index"
        polys = face[name]
        tris = [np.asarray(p)[[0, i, i + 1]] for p in polys for i in range(1, len(p) - 1)]
        faces = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    return pts, faces


def write_ply(points, path, text=False):
    """Positions-only PLY (binary little-endian by default)."""
    pts = np.asarray(points, dtype=float)
    v = np.empty(len(pts), dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
    v["x"], v["y"], v["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    el = plyfile.PlyElement.describe(v, "vertex")
    plyfile.PlyData([el], text=text, byte_order="<").write(str(path))
    return Path(path)


def export_gmm(gmm, path):
    rows = (list(m) + [s, w] for m, s, w in zip(gmm.means, gmm.variances, gmm.weights[:-1]))
    return _write_rows(path, GMM_COLUMNS, rows)


def parse_gmm(path, hull_volume, variance_floor=0.0):
    """Inverse of :func:`export_gmm`. The outlier weight is ``1 - sum(weights)``;
    the hull volume is not part of the file and must be supplied."""
    _, data = _read_numeric(path, GMM_COLUMNS)
    if len(data) == 0:
        raise ParseError("no components")
    w = data[:, 4]
    weights = np.append(w, max(0.0, 1.0 - w.sum()))
    return GmmModel(data[:, :3], data[:, 3], weights, hull_volume, variance_floor)


def export_transforms(transforms, path):
    return _write_rows(path, TRANSFORM_COLUMNS, (t.as_row() for t in transforms))


def parse_transforms(path):
    _, data = _read_numeric(path, TRANSFORM_COLUMNS)
    return [RigidTransform(row[:9].reshape(3, 3), row[9:]) for row in data]
