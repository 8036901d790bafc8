"""Car-following episodes: feature computation and the on-disk episode archive."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DT = 0.1
MIN_DURATION = 5.0
MAX_HEADWAY = 60.0
EPISODE_COLUMNS = ("t", "d", "dv", "tau_inv", "v", "a", "action_id")


class FeatureError(ValueError):
    pass


def inverse_tau(d, dv, width):
    """Looming rate -d(theta)/dt / theta of a lead of ``width`` at gap ``d``.

    ``theta = 2 arctan(w / 2d)`` is the visual angle and ``dd/dt = dv`` with
    ``dv = v_lead - v_ego``, so the result has the sign of ``dv`` and tends to
    ``dv / d`` as the angle shrinks.
    """
    d = np.asarray(d, dtype=np.float64)
    dv = np.asarray(dv, dtype=np.float64)
    half = 0.5 * width
    return dv * width / ((d * d + half * half) * 2.0 * np.arctan(half / d))


def compute_features(ego_s, ego_v, lead_s, lead_v, ego_length, lead_length, lead_width) -> dict:
    """Per-step features from time-aligned Frenet positions/speeds (vehicle centers).

    Returns arrays ``d, dv, tau_inv, v, a`` of length ``T - 1``: the last frame
    is dropped because acceleration is a forward difference.
    """
    ego_s, ego_v, lead_s, lead_v = (np.asarray(x, dtype=np.float64) for x in (ego_s, ego_v, lead_s, lead_v))
    d = (lead_s - 0.5 * lead_length) - (ego_s + 0.5 * ego_length)
    if np.any(d <= 0):
        raise FeatureError(f"non-positive headway at frame {int(np.flatnonzero(d <= 0)[0])}")
    dv = lead_v - ego_v
    a = np.diff(ego_v) / DT
    return {
        "d": d[:-1],
        "dv": dv[:-1],
        "tau_inv": inverse_tau(d[:-1], dv[:-1], lead_width),
        "v": ego_v[:-1],
        "a": a,
    }


@dataclass(frozen=True)
class Episode:
    """One ego/lead car-following window sampled at 10 Hz.

    ``s0`` is the ego center arclength at the first frame; ego positions are
    reconstructed from speeds with the same semi-implicit rule the simulator
    uses, so replaying ``a`` through the simulator reproduces them.
    """

    ego_id: int
    lead_id: int
    d: np.ndarray
    dv: np.ndarray
    tau_inv: np.ndarray
    v: np.ndarray
    a: np.ndarray
    lead_width: float = 1.8
    lead_length: float = 4.5
    ego_length: float = 4.5
    lane: int = 0
    s0: float = 0.0
    action_id: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = len(self.d)
        for name in ("dv", "tau_inv", "v", "a"):
            if len(getattr(self, name)) != n:
                raise FeatureError(f"episode field {name} has length {len(getattr(self, name))} != {n}")
        if self.action_id is not None and len(self.action_id) != n:
            raise FeatureError("action_id length mismatch")
        if n and np.any(self.d <= 0):
            raise FeatureError("episode has non-positive headway")

    def __len__(self):
        return len(self.d)

    @property
    def duration(self) -> float:
        return len(self) * DT

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self)) * DT

    def observations(self) -> np.ndarray:
        """(T, 3) array of (d, dv, tau_inv)."""
        return np.column_stack([self.d, self.dv, self.tau_inv])

    def lead_speeds(self) -> np.ndarray:
        return self.v + self.dv

    def ego_positions(self) -> np.ndarray:
        s = np.empty(len(self))
        s[0] = self.s0
        s[1:] = self.s0 + np.cumsum(self.v[1:] * DT)
        return s

    def lead_positions(self) -> np.ndarray:
        return self.ego_positions() + 0.5 * self.ego_length + self.d + 0.5 * self.lead_length

    def with_actions(self, action_id) -> "Episode":
        return replace(self, action_id=np.asarray(action_id, dtype=np.int64))

    def window(self, start: int, stop: int) -> "Episode":
        s = self.ego_positions()[start]
        sl = slice(start, stop)
        ids = None if self.action_id is None else self.action_id[sl]
        return replace(
            self,
            d=self.d[sl], dv=self.dv[sl], tau_inv=self.tau_inv[sl], v=self.v[sl], a=self.a[sl],
            s0=float(s), action_id=ids,
        )


def save_episodes(episodes, directory) -> list[Path]:
    """Write one CSV plus a JSON metadata sidecar per episode."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, ep in enumerate(episodes):
        p = out / f"episode_{i:05d}.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(EPISODE_COLUMNS)
            for k in range(len(ep)):
                aid = "" if ep.action_id is None else int(ep.action_id[k])
                w.writerow(
                    [repr(round(k * DT, 10))]
                    + [repr(float(x[k])) for x in (ep.d, ep.dv, ep.tau_inv, ep.v, ep.a)]
                    + [aid]
                )
        meta = {
            "ego_id": ep.ego_id,
            "lead_id": ep.lead_id,
            "lead_width": ep.lead_width,
            "lead_length": ep.lead_length,
            "ego_length": ep.ego_length,
            "lane": ep.lane,
            "s0": ep.s0,
            "dt": DT,
            **ep.meta,
        }
        p.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        paths.append(p)
    return paths


def load_episode(path) -> Episode:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    cols: dict[str, list] = {c: [] for c in EPISODE_COLUMNS}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            for c in EPISODE_COLUMNS:
                cols[c].append(rec[c])
    ids = None
    if cols["action_id"] and all(x != "" for x in cols["action_id"]):
        ids = np.array([int(x) for x in cols["action_id"]], dtype=np.int64)
    known = {"ego_id", "lead_id", "lead_width", "lead_length", "ego_length", "lane", "s0", "dt"}
    return Episode(
        ego_id=int(meta["ego_id"]),
        lead_id=int(meta["lead_id"]),
        **{c: np.array([float(x) for x in cols[c]]) for c in ("d", "dv", "tau_inv", "v", "a")},
        lead_width=float(meta["lead_width"]),
        lead_length=float(meta["lead_length"]),
        ego_length=float(meta["ego_length"]),
        lane=int(meta["lane"]),
        s0=float(meta["s0"]),
        action_id=ids,
        meta={k: v for k, v in meta.items() if k not in known},
    )


def load_episodes(directory) -> list[Episode]:
    return [load_episode(p) for p in sorted(Path(directory).glob("episode_*.csv"))]
