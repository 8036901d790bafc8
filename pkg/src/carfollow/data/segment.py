"""Lane assignment and extraction of car-following episodes from raw tracks."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .episodes import DT, MAX_HEADWAY, MIN_DURATION, Episode, FeatureError, compute_features
from .frenet import ProjectionError, project_frenet
from .tracks import Centerline, RawTrack

log = logging.getLogger(__name__)

LANE_WIDTH = 3.5


@dataclass
class LaneTrack:
    """A track in Frenet coordinates of every lane (NaN where not projectable)."""

    track: RawTrack
    s: np.ndarray  # (n_lanes, n_frames)
    l: np.ndarray
    vs: np.ndarray
    lane: np.ndarray  # (n_frames,) nearest lane, -1 if none


def frenet_track(track: RawTrack, centerlines, max_offset: float = 10.0) -> LaneTrack | None:
    nl, n = len(centerlines), len(track)
    s = np.full((nl, n), np.nan)
    l = np.full((nl, n), np.nan)
    vs = np.full((nl, n), np.nan)
    pos, vel = track.positions, track.velocities
    for j, cl in enumerate(centerlines):
        for k in range(n):
            try:
                f = project_frenet(pos[k], vel[k], cl, max_offset)
            except ProjectionError:
                continue
            s[j, k], l[j, k], vs[j, k] = f.s, f.l, f.vs
    absl = np.where(np.isnan(l), np.inf, np.abs(l))
    lane = np.where(np.isfinite(absl.min(axis=0)), absl.argmin(axis=0), -1)
    if np.all(lane < 0):
        return None
    return LaneTrack(track, s, l, vs, lane)


def _runs(keys):
    """Maximal runs of equal, non-None keys as (start, stop, key)."""
    out = []
    start = None
    for i in range(len(keys) + 1):
        k = keys[i] if i < len(keys) else None
        if start is not None and k != keys[start]:
            out.append((start, i, keys[start]))
            start = None
        if k is not None and start is None:
            start = i
    return out


def segment_episodes(tracks, centerlines, lane_width: float = LANE_WIDTH, max_headway: float = MAX_HEADWAY,
                     min_duration: float = MIN_DURATION) -> list[Episode]:
    """Maximal windows in which each ego follows one lead in its own lane.

    A frame qualifies when the ego is within ``lane_width / 2`` of its
    nearest centerline, the closest vehicle ahead in that lane is within
    ``max_headway`` (bumper to bumper), and the headway is positive. Runs of
    qualifying frames with a constant (lane, lead) pair become episodes if they
    last at least ``min_duration``.
    """
    centerlines = list(centerlines)
    ftracks: list[LaneTrack] = []
    for tr in tracks:
        ft = frenet_track(tr, centerlines)
        if ft is None:
            log.warning("track %s is not covered by any centerline; skipped", tr.track_id)
            continue
        ftracks.append(ft)

    by_time: dict[int, list[tuple[int, int]]] = {}
    for ti, ft in enumerate(ftracks):
        for k, ms in enumerate(ft.track.frame_ms):
            by_time.setdefault(int(ms), []).append((ti, k))

    episodes = []
    for ti, ego in enumerate(ftracks):
        n = len(ego.track)
        keys: list = [None] * n
        for k in range(n):
            lane = int(ego.lane[k])
            if lane < 0 or abs(ego.l[lane, k]) >= 0.5 * lane_width:
                continue
            s_ego = ego.s[lane, k]
            lead = None
            for tj, kj in by_time[int(ego.track.frame_ms[k])]:
                if tj == ti or ftracks[tj].lane[kj] != lane:
                    continue
                s_other = ftracks[tj].s[lane, kj]
                if s_other > s_ego and (lead is None or s_other < lead[2]):
                    lead = (tj, kj, s_other)
            if lead is None:
                continue
            other = ftracks[lead[0]].track
            d = (lead[2] - 0.5 * other.length) - (s_ego + 0.5 * ego.track.length)
            if 0 < d <= max_headway:
                keys[k] = (lane, lead[0])
        for start, stop, (lane, tj) in _runs(keys):
            if (stop - start - 1) * DT < min_duration - 1e-9:
                continue
            lead_ft = ftracks[tj]
            frames = ego.track.frame_ms[start:stop]
            idx = np.searchsorted(lead_ft.track.frame_ms, frames)
            try:
                f = compute_features(
                    ego.s[lane, start:stop], ego.vs[lane, start:stop],
                    lead_ft.s[lane, idx], lead_ft.vs[lane, idx],
                    ego.track.length, lead_ft.track.length, lead_ft.track.width,
                )
            except FeatureError as exc:
                log.warning("ego %s: rejected window (%s)", ego.track.track_id, exc)
                continue
            episodes.append(
                Episode(
                    ego_id=int(ego.track.track_id), lead_id=int(lead_ft.track.track_id), **f,
                    lead_width=float(lead_ft.track.width), lead_length=float(lead_ft.track.length),
                    ego_length=float(ego.track.length), lane=lane, s0=float(ego.s[lane, start]),
                    meta={"start_ms": int(frames[0])},
                )
            )
    return episodes
