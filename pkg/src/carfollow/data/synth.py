"""Synthetic car-following data from an IDM-controlled ego behind scripted leads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..idm import A_MAX, A_MIN, IdmParams, accel_mean, desired_gap
from .episodes import DT, Episode, compute_features
from .tracks import RawTrack

EGO_LENGTH = 4.5
LEAD_LENGTH = 4.5
LEAD_WIDTH = 1.8
MAX_ATTEMPTS = 5


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class LeadProfile:
    """Lead speed as a mean plus two sinusoids, floored at ``v_min``."""

    v_mean: float
    amp1: float = 0.0
    period1: float = 10.0
    phase1: float = 0.0
    amp2: float = 0.0
    period2: float = 5.0
    phase2: float = 0.0
    duration: float = 15.0
    v_min: float = 1.0

    def speeds(self) -> np.ndarray:
        t = np.arange(int(round(self.duration / DT)) + 1) * DT
        v = (
            self.v_mean
            + self.amp1 * np.sin(2 * np.pi * t / self.period1 + self.phase1)
            + self.amp2 * np.sin(2 * np.pi * t / self.period2 + self.phase2)
        )
        return np.maximum(v, self.v_min)


def random_profiles(n: int, rng: np.random.Generator, duration: float = 15.0) -> list[LeadProfile]:
    return [
        LeadProfile(
            v_mean=rng.uniform(6.0, 18.0),
            amp1=rng.uniform(0.5, 3.0),
            period1=rng.uniform(8.0, 20.0),
            phase1=rng.uniform(0, 2 * np.pi),
            amp2=rng.uniform(0.0, 1.5),
            period2=rng.uniform(3.0, 8.0),
            phase2=rng.uniform(0, 2 * np.pi),
            duration=duration,
        )
        for _ in range(n)
    ]


def equilibrium_gap(v: float, p: IdmParams) -> float:
    """Headway at which the IDM commands zero acceleration at speed ``v`` with dv = 0."""
    free = 1.0 - (v / p.v_des) ** 4
    if free <= 0:
        raise SynthError(f"no equilibrium gap at v={v} >= desired speed {p.v_des}")
    return float(desired_gap(v, 0.0, p) / np.sqrt(free))


@dataclass
class SynthDataset:
    episodes: list[Episode]
    params: IdmParams
    noise_std: float
    seed: int
    profiles: list[LeadProfile]


def simulate_follower(profile: LeadProfile, p: IdmParams, noise_std: float, rng, v0=None, gap_scale=1.0):
    """Integrate an IDM follower; returns frame arrays (ego_s, ego_v, lead_s, lead_v).

    Semi-implicit Euler at 10 Hz: ``v' = max(0, v + a dt)``, ``s' = s + v' dt``.
    """
    lead_v = profile.speeds()
    n = len(lead_v)
    v_start = lead_v[0] if v0 is None else v0
    gap0 = gap_scale * equilibrium_gap(v_start, p)
    ego_s = np.empty(n)
    ego_v = np.empty(n)
    lead_s = np.empty(n)
    ego_s[0], ego_v[0] = 0.0, v_start
    lead_s[0] = 0.5 * EGO_LENGTH + gap0 + 0.5 * LEAD_LENGTH
    for k in range(n - 1):
        lead_s[k + 1] = lead_s[k] + lead_v[k + 1] * DT
        d = lead_s[k] - 0.5 * LEAD_LENGTH - ego_s[k] - 0.5 * EGO_LENGTH
        if d <= 0:
            return None
        a = accel_mean(ego_v[k], lead_v[k] - ego_v[k], d, p)
        if noise_std > 0:
            a = a + noise_std * rng.standard_normal()
        a = min(max(a, A_MIN), A_MAX)
        ego_v[k + 1] = max(0.0, ego_v[k] + a * DT)
        ego_s[k + 1] = ego_s[k] + ego_v[k + 1] * DT
    d_last = lead_s[-1] - 0.5 * LEAD_LENGTH - ego_s[-1] - 0.5 * EGO_LENGTH
    if d_last <= 0:
        return None
    return ego_s, ego_v, lead_s, lead_v


def synth_generate(params: IdmParams, profiles, noise_std: float, n: int | None = None, seed: int = 0,
                   init_jitter: bool = True) -> SynthDataset:
    """Simulate one episode per lead profile.

    With ``init_jitter`` the ego starts up to 2 m/s off the lead speed and at
    0.8-1.3x the equilibrium gap so that episodes contain transients. A
    simulated collision triggers a retry with a 1.5x larger initial gap, at
    most ``MAX_ATTEMPTS`` times.
    """
    rng = np.random.default_rng(seed)
    if isinstance(profiles, LeadProfile):
        profiles = [profiles] * (n or 1)
    profiles = list(profiles)
    if n is not None:
        if len(profiles) < n:
            raise SynthError(f"need {n} profiles, got {len(profiles)}")
        profiles = profiles[:n]
    episodes = []
    for i, prof in enumerate(profiles):
        if prof.duration < 10.0:
            raise SynthError("lead profiles must last at least 10 s")
        if init_jitter:
            v0 = float(prof.speeds()[0] + rng.uniform(-2.0, 2.0))
            v0 = max(v0, 0.5)
            scale = float(rng.uniform(0.8, 1.3))
        else:
            v0, scale = None, 1.0
        for _ in range(MAX_ATTEMPTS):
            sim = simulate_follower(prof, params, noise_std, rng, v0=v0, gap_scale=scale)
            if sim is not None:
                break
            scale *= 1.5
        else:
            raise SynthError(f"episode {i}: collision after {MAX_ATTEMPTS} attempts")
        ego_s, ego_v, lead_s, lead_v = sim
        f = compute_features(ego_s, ego_v, lead_s, lead_v, EGO_LENGTH, LEAD_LENGTH, LEAD_WIDTH)
        episodes.append(
            Episode(
                ego_id=2 * i + 1, lead_id=2 * i, **f,
                lead_width=LEAD_WIDTH, lead_length=LEAD_LENGTH, ego_length=EGO_LENGTH,
                lane=0, s0=float(ego_s[0]),
            )
        )
    return SynthDataset(episodes, params, noise_std, seed, profiles)


def episode_to_tracks(ep: Episode, ego_id: int, lead_id: int, t0_ms: int = 0, y: float = 0.0,
                      x0: float = 0.0) -> tuple[RawTrack, RawTrack]:
    """Raw tracks along a straight +x lane that reproduce ``ep``.

    One extra frame is appended so that differencing recovers every
    acceleration.
    """
    n = len(ep) + 1
    v = np.append(ep.v, ep.v[-1] + ep.a[-1] * DT)
    s = np.empty(n)
    s[0] = ep.s0
    s[1:] = ep.s0 + np.cumsum(v[1:] * DT)
    lead_v = np.append(ep.lead_speeds(), np.nan)
    lead_s = np.append(ep.lead_positions(), np.nan)
    lead_v[-1] = lead_v[-2]
    lead_s[-1] = lead_s[-2] + lead_v[-1] * DT
    frames = t0_ms + 100 * np.arange(n, dtype=np.int64)
    zeros = np.zeros(n)
    ego = RawTrack(ego_id, frames, x0 + s, zeros + y, v, zeros.copy(), zeros.copy(), ep.ego_length, 1.8)
    lead = RawTrack(lead_id, frames.copy(), x0 + lead_s, zeros + y, lead_v, zeros.copy(), zeros.copy(),
                    ep.lead_length, ep.lead_width)
    return ego, lead


def synth_tracks(dataset: SynthDataset, lane_y=(0.0,), gap_ms: int = 0):
    """All episodes of ``dataset`` laid out as raw tracks, one lane per episode
    in round-robin over ``lane_y``, each pair in its own time slot."""
    tracks = []
    t0 = 0
    for i, ep in enumerate(dataset.episodes):
        y = lane_y[i % len(lane_y)]
        ego, lead = episode_to_tracks(ep, 2 * i + 1, 2 * i, t0_ms=t0, y=y)
        tracks.extend([lead, ego])
        t0 += 100 * (len(ep) + 1) + gap_ms
    return tracks
