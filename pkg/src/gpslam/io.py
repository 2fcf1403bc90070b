"""Point-cloud and trajectory files.

Clouds: ASCII ``x y z`` lists (``.xyz``/``.txt``/``.asc``) and PCD files
(ascii or binary). Trajectories: one ``timestamp tx ty tz qx qy qz qw`` line
per pose. All coordinates are in a right-handed, z-up frame.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gpslam.geometry import Pose

log = logging.getLogger(__name__)


class CloudParseError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass
class CloudReadReport:
    points: np.ndarray
    rejected: int = 0
    ignored_fields: list = field(default_factory=list)


_PCD_TYPES = {("F", 4): "f4", ("F", 8): "f8", ("I", 1): "i1", ("I", 2): "i2", ("I", 4): "i4", ("I", 8): "i8",
              ("U", 1): "u1", ("U", 2): "u2", ("U", 4): "u4", ("U", 8): "u8"}


def _finite_rows(path, pts: np.ndarray, report: CloudReadReport) -> np.ndarray:
    ok = np.all(np.isfinite(pts), axis=1)
    report.rejected = int((~ok).sum())
    if report.rejected:
        warnings.warn(f"{path}: rejected {report.rejected} record(s) with non-finite coordinates", stacklevel=3)
    return pts[ok]


def _read_xyz(path: Path) -> CloudReadReport:
    report = CloudReadReport(np.zeros((0, 3)))
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.replace(",", " ").split()
            try:
                vals = [float(v) for v in parts]
            except ValueError:
                raise CloudParseError(path, lineno, f"non-numeric record {text!r}") from None
            if len(vals) < 3:
                raise CloudParseError(path, lineno, f"expected at least 3 values, got {len(vals)}")
            if width is None:
                width = len(vals)
                if width > 3:
                    report.ignored_fields = [f"column{k}" for k in range(4, width + 1)]
                    warnings.warn(f"{path}: ignoring {width - 3} extra column(s)", stacklevel=3)
            rows.append(vals[:3])
    if not rows:
        warnings.warn(f"{path}: empty cloud", stacklevel=3)
        return report
    report.points = _finite_rows(path, np.array(rows, dtype=float), report)
    return report


def _read_pcd(path: Path) -> CloudReadReport:
    report = CloudReadReport(np.zeros((0, 3)))
    with open(path, "rb") as fh:
        raw = fh.read()
    header = {}
    offset = 0
    lineno = 0
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise CloudParseError(path, lineno + 1, "header ended before DATA line")
        lineno += 1
        line = raw[offset:end].decode("ascii", errors="replace").strip()
        offset = end + 1
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        header[key.upper()] = rest.split()
        if key.upper() == "DATA":
            break
    try:
        fields = header["FIELDS"]
        sizes = [int(v) for v in header.get("SIZE", ["4"] * len(fields))]
        types = header.get("TYPE", ["F"] * len(fields))
        counts = [int(v) for v in header.get("COUNT", ["1"] * len(fields))]
        n_points = int(header["POINTS"][0]) if "POINTS" in header else int(header["WIDTH"][0]) * int(header["HEIGHT"][0])
        data_kind = header["DATA"][0].lower()
    except (KeyError, IndexError, ValueError) as exc:
        raise CloudParseError(path, lineno, f"malformed header ({exc})") from None
    if not (len(fields) == len(sizes) == len(types) == len(counts)):
        raise CloudParseError(path, lineno, "FIELDS/SIZE/TYPE/COUNT lengths differ")
    missing = {"x", "y", "z"} - set(fields)
    if missing:
        raise CloudParseError(path, lineno, f"missing field(s) {sorted(missing)}")
    report.ignored_fields = [f for f in fields if f not in ("x", "y", "z")]
    if report.ignored_fields:
        warnings.warn(f"{path}: ignoring field(s) {report.ignored_fields}", stacklevel=3)

    cols = []
    for name, size, typ, count in zip(fields, sizes, types, counts):
        try:
            base = _PCD_TYPES[(typ.upper(), size)]
        except KeyError:
            raise CloudParseError(path, lineno, f"unsupported TYPE/SIZE {typ}/{size}") from None
        cols.append((name, "<" + base) if count == 1 else (name, "<" + base, (count,)))
    if data_kind == "ascii":
        flat_width = sum(counts)
        text_lines = raw[offset:].decode("ascii", errors="replace").splitlines()
        values = []
        for k, line in enumerate(text_lines):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != flat_width:
                raise CloudParseError(path, lineno + k + 1, f"expected {flat_width} values, got {len(parts)}")
            try:
                values.append([float(v) for v in parts])
            except ValueError:
                raise CloudParseError(path, lineno + k + 1, "non-numeric record") from None
        if len(values) != n_points:
            raise CloudParseError(path, lineno, f"header declares {n_points} points, found {len(values)}")
        arr = np.array(values, dtype=float).reshape(-1, flat_width)
        starts = np.cumsum([0] + counts[:-1])
        pts = np.column_stack([arr[:, starts[fields.index(c)]] for c in "xyz"]) if len(arr) else np.zeros((0, 3))
    elif data_kind == "binary":
        dtype = np.dtype(cols)
        need = dtype.itemsize * n_points
        if len(raw) - offset < need:
            raise CloudParseError(path, lineno, f"binary payload truncated ({len(raw) - offset} of {need} bytes)")
        rec = np.frombuffer(raw, dtype=dtype, count=n_points, offset=offset)
        pts = np.column_stack([rec[c].astype(float) for c in "xyz"]) if n_points else np.zeros((0, 3))
    else:
        raise CloudParseError(path, lineno, f"unsupported DATA kind {data_kind!r}")
    if n_points == 0:
        warnings.warn(f"{path}: empty cloud", stacklevel=3)
        return report
    report.points = _finite_rows(path, pts, report)
    return report


def read_cloud(path) -> CloudReadReport:
    """Load a cloud and report rejected records and ignored fields."""
    path = Path(path)
    if path.suffix.lower() == ".pcd":
        return _read_pcd(path)
    return _read_xyz(path)


def load_cloud(path) -> np.ndarray:
    return read_cloud(path).points


def save_cloud(points, path, binary: bool = True):
    """Write an (N, 3) cloud; ``.pcd`` paths get a PCD file, anything else ``x y z`` text."""
    path = Path(path)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if path.suffix.lower() != ".pcd":
        np.savetxt(path, pts, fmt="%.9g", header="x y z", comments="# ")
        return
    header = (
        "# .PCD v0.7 - Point Cloud Data file format\n"
        "VERSION 0.7\nFIELDS x y z\nSIZE 8 8 8\nTYPE F F F\nCOUNT 1 1 1\n"
        f"WIDTH {len(pts)}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {len(pts)}\n"
        f"DATA {'binary' if binary else 'ascii'}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(pts, dtype="<f8").tobytes())
        else:
            for p in pts:
                fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n".encode("ascii"))


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.translation for p in self.poses])


def save_trajectory(traj: Trajectory, path):
    """Write ``timestamp tx ty tz qx qy qz qw`` lines."""
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, p in zip(traj.timestamps, traj.poses):
            w, x, y, z = p.quat
            tx, ty, tz = p.translation
            fh.write(f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")


def load_trajectory(path) -> Trajectory:
    stamps, poses = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 8:
                raise CloudParseError(path, lineno, f"expected 8 values, got {len(parts)}")
            try:
                t, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts)
            except ValueError:
                raise CloudParseError(path, lineno, "non-numeric record") from None
            stamps.append(t)
            poses.append(Pose([qw, qx, qy, qz], [tx, ty, tz]))
    return Trajectory(np.array(stamps), poses)


def write_timing_report(rows, path):
    """Per-frame ``seq t_preprocess_ms t_match_ms t_align_ms t_update_ms`` lines."""
    with open(path, "w") as fh:
        fh.write("# seq t_preprocess_ms t_match_ms t_align_ms t_update_ms\n")
        for r in rows:
            fh.write(f"{r.seq} {r.preprocess_ms:.3f} {r.match_ms:.3f} {r.align_ms:.3f} {r.update_ms:.3f}\n")


CLOUD_SUFFIXES = (".pcd", ".xyz", ".txt", ".asc")
_SIDECARS = ("timestamps.txt", "groundtruth.txt")


def load_timestamps(path) -> np.ndarray:
    return np.atleast_1d(np.loadtxt(path, comments="#", dtype=float))


def save_timestamps(stamps, path):
    np.savetxt(path, np.asarray(stamps, dtype=float), fmt="%.6f", header="timestamp_s", comments="# ")


def load_scan_sequence(path, dt: float = 0.1):
    """Scans of a directory (sorted by file name) or a single cloud file.

    Timestamps come from ``timestamps.txt`` next to the scans when present,
    otherwise frames are spaced ``dt`` seconds apart.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in CLOUD_SUFFIXES and p.name not in _SIDECARS)
        stamp_file = path / "timestamps.txt"
    else:
        files = [path]
        stamp_file = path.parent / "timestamps.txt"
    if not files:
        raise FileNotFoundError(f"no point-cloud files in {path}")
    scans = [load_cloud(f) for f in files]
    if path.is_dir() and stamp_file.exists():
        stamps = load_timestamps(stamp_file)
        if len(stamps) != len(scans):
            raise ValueError(f"{stamp_file}: {len(stamps)} timestamps for {len(scans)} scans")
    else:
        stamps = dt * np.arange(len(scans))
    return scans, stamps, files
