"""Raw vehicle tracks and lane centerlines: types and CSV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FRAME_MS = 100
TRACK_COLUMNS = ("track_id", "frame_ms", "x", "y", "vx", "vy", "psi", "length", "width")


class TrackFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RawTrack:
    track_id: int
    frame_ms: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    psi: np.ndarray
    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise TrackFormatError(f"track {self.track_id}: non-positive vehicle size")
        steps = np.diff(self.frame_ms)
        if np.any(steps != FRAME_MS):
            bad = int(np.flatnonzero(steps != FRAME_MS)[0])
            raise TrackFormatError(
                f"track {self.track_id}: frame gap {int(steps[bad])} ms at "
                f"{int(self.frame_ms[bad])} ms, expected {FRAME_MS} ms"
            )

    def __len__(self):
        return len(self.frame_ms)

    @property
    def positions(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    @property
    def velocities(self) -> np.ndarray:
        return np.column_stack([self.vx, self.vy])


@dataclass(frozen=True)
class Centerline:
    points: np.ndarray  # (n, 2)
    arclength: np.ndarray  # (n,)
    vertex_normals: np.ndarray  # (n, 2), unit, left of travel

    @classmethod
    def from_points(cls, points) -> "Centerline":
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("centerline needs at least two 2-D points")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg <= 0):
            raise ValueError("centerline has repeated consecutive points")
        d = np.diff(pts, axis=0) / seg[:, None]
        seg_n = np.column_stack([-d[:, 1], d[:, 0]])
        vn = np.empty_like(pts)
        vn[0], vn[-1] = seg_n[0], seg_n[-1]
        vn[1:-1] = seg_n[:-1] + seg_n[1:]
        vn /= np.linalg.norm(vn, axis=1, keepdims=True)
        return cls(pts, np.concatenate([[0.0], np.cumsum(seg)]), vn)

    @property
    def length(self) -> float:
        return float(self.arclength[-1])


def load_tracks(path) -> list[RawTrack]:
    """Parse a track CSV into tracks grouped by id, frames sorted by time."""
    rows: dict[int, list[tuple]] = {}
    sizes: dict[int, tuple[float, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in TRACK_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise TrackFormatError(f"{path}: missing columns {missing}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                tid = int(rec["track_id"])
                frame = int(rec["frame_ms"])
                vals = tuple(float(rec[c]) for c in ("x", "y", "vx", "vy", "psi"))
                size = (float(rec["length"]), float(rec["width"]))
            except (TypeError, ValueError) as exc:
                raise TrackFormatError(f"{path}:{lineno}: malformed row ({exc})") from exc
            rows.setdefault(tid, []).append((frame, *vals))
            sizes.setdefault(tid, size)
    tracks = []
    for tid in sorted(rows):
        arr = np.array(sorted(rows[tid]), dtype=np.float64)
        frames = arr[:, 0].astype(np.int64)
        if np.any(np.diff(frames) <= 0):
            raise TrackFormatError(f"track {tid}: duplicate timestamps")
        tracks.append(
            RawTrack(tid, frames, *(arr[:, i].copy() for i in range(1, 6)), *sizes[tid])
        )
    return tracks


def save_tracks(tracks, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACK_COLUMNS)
        for tr in tracks:
            for i in range(len(tr)):
                w.writerow(
                    [tr.track_id, int(tr.frame_ms[i])]
                    + [repr(float(v[i])) for v in (tr.x, tr.y, tr.vx, tr.vy, tr.psi)]
                    + [repr(float(tr.length)), repr(float(tr.width))]
                )


def load_centerline(path) -> Centerline:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "y"} <= set(reader.fieldnames):
            raise TrackFormatError(f"{path}: centerline needs x,y columns")
        pts = [(float(r["x"]), float(r["y"])) for r in reader]
    return Centerline.from_points(pts)


def save_centerline(centerline: Centerline, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in centerline.points:
            w.writerow([repr(float(x)), repr(float(y))])


def load_centerlines(paths) -> list[Centerline]:
    return [load_centerline(Path(p)) for p in paths]
