"""Closed-loop longitudinal simulation with lead playback, plus a CEM planner."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import aida as aida_mod
from .data.codebook import ActionCodebook
from .data.episodes import DT, Episode, inverse_tau
from .idm import A_MAX, A_MIN, IdmParams, accel_mean

TRACE_COLUMNS = ("t", "s_ego", "v_ego", "a_ego", "s_lead", "v_lead", "d", "dv", "tau_inv", "collision_flag")


@dataclass(frozen=True)
class SimState:
    s: float
    v: float
    s_lead: float
    v_lead: float
    k: int = 0
    ego_length: float = 4.5
    lead_length: float = 4.5
    lead_width: float = 1.8

    @property
    def t(self) -> float:
        return self.k * DT

    @property
    def gap(self) -> float:
        return (self.s_lead - 0.5 * self.lead_length) - (self.s + 0.5 * self.ego_length)

    def features(self) -> np.ndarray:
        d = self.gap
        dv = self.v_lead - self.v
        return np.array([d, dv, float(inverse_tau(d, dv, self.lead_width))])


def step(state: SimState, a: float, s_lead=None, v_lead=None) -> SimState:
    """Semi-implicit Euler; the lead moves to the supplied playback values (or
    at constant speed when none are given)."""
    v = max(0.0, state.v + a * DT)
    if v_lead is None:
        v_lead = state.v_lead
    if s_lead is None:
        s_lead = state.s_lead + v_lead * DT
    return replace(state, s=state.s + v * DT, v=v, s_lead=float(s_lead), v_lead=float(v_lead), k=state.k + 1)


def collision_check(state: SimState) -> bool:
    return state.gap <= 0.0


# ---------------------------------------------------------------------------
# controllers


class Controller:
    """Maps the current feature triple (and its own history) to an acceleration."""

    name = "controller"

    def reset(self, episode: Episode, rng: np.random.Generator) -> None:
        self.rng = rng

    def __call__(self, k: int, obs: np.ndarray, state: SimState) -> float:
        raise NotImplementedError


class ReplayController(Controller):
    name = "replay"

    def reset(self, episode, rng):
        self.a = episode.a
        self.rng = rng

    def __call__(self, k, obs, state):
        return float(self.a[k])


class ConstantController(Controller):
    def __init__(self, a: float):
        self.a = float(a)
        self.name = f"constant({a})"

    def __call__(self, k, obs, state):
        return self.a


class IdmController(Controller):
    name = "idm"

    def __init__(self, params: IdmParams, stochastic: bool = True):
        self.params = params
        self.stochastic = stochastic

    def __call__(self, k, obs, state):
        a = float(accel_mean(state.v, obs[1], obs[0], self.params))
        if self.stochastic:
            a += self.params.sigma * self.rng.standard_normal()
        return a


class BcController(Controller):
    def __init__(self, policy, codebook: ActionCodebook):
        from . import bc

        self._bc = bc
        self.policy = policy
        self.codebook = codebook
        self.name = f"bc-{policy.arch}"

    def reset(self, episode, rng):
        self.rng = rng
        if self.policy.arch == "gru":
            self.h = self.policy.initial_state()

    def __call__(self, k, obs, state):
        if self.policy.arch == "gru":
            lp, self.h = self.policy.step(obs, self.h)
        else:
            lp = self.policy.forward(obs)
        return self._bc.sample_from_logprobs(lp, self.codebook, self.rng)


class AidaController(Controller):
    """Filters beliefs with its own previous discrete action and samples from
    the horizon-mixture policy."""

    name = "aida"

    def __init__(self, params: aida_mod.AidaParams, codebook: ActionCodebook):
        self.agent = aida_mod.AidaAgent(params, codebook)

    def reset(self, episode, rng):
        self.rng = rng
        self.agent.reset()
        self.prev = None
        self.beliefs = []

    def __call__(self, k, obs, state):
        self.agent.observe(obs, self.prev)
        self.beliefs.append(self.agent.belief)
        self.prev, a = self.agent.sample_action(self.rng)
        return a


# ---------------------------------------------------------------------------
# CEM model-predictive control


@dataclass(frozen=True)
class CemConfig:
    horizon: int = 6
    n_samples: int = 50
    n_elites: int = 5
    iterations: int = 20
    init_std: float = 2.0
    min_std: float = 1e-3

    def __post_init__(self):
        if min(self.horizon, self.n_samples, self.n_elites, self.iterations) <= 0 or self.init_std <= 0:
            raise ValueError("CEM settings must be positive")
        if self.n_elites > self.n_samples:
            raise ValueError("n_elites must not exceed n_samples")


@dataclass
class CemResult:
    action: float
    mean: np.ndarray
    std: np.ndarray
    elite_rewards: list[float] = field(default_factory=list)  # best elite-set mean per iteration


def rollout_observations(d0: float, dv0: float, actions: np.ndarray) -> np.ndarray:
    """Linear lookahead with a constant-speed lead, dv = v_lead - v_ego.

    Returns (N, H, 3) predicted (d, dv, dv/d) after each action.
    """
    actions = np.atleast_2d(actions)
    dv = dv0 - DT * np.cumsum(actions, axis=1)
    d = d0 + DT * np.cumsum(dv, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau_inv = dv / d
    return np.stack([d, dv, tau_inv], axis=-1)


def preference_reward(params: aida_mod.AidaParams):
    def reward(actions, observations):
        r = aida_mod.preference_logprob(observations, params)
        r = np.where(np.isfinite(r) & (observations[..., 0] > 0), r, -1e6)
        return r.sum(axis=1)

    return reward


def cem_optimize(d: float, dv: float, reward_fn, config: CemConfig = CemConfig(), rng=None) -> CemResult:
    """Cross-entropy search over action sequences.

    The previous elites are carried into each new candidate pool, so the
    elite reward never decreases for a deterministic ``reward_fn``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    H = config.horizon
    mean = np.zeros(H)
    std = np.full(H, config.init_std)
    elites = np.empty((0, H))
    history = []
    for _ in range(config.iterations):
        cand = np.clip(mean + std * rng.standard_normal((config.n_samples, H)), A_MIN, A_MAX)
        pool = np.concatenate([cand, elites])
        r = np.asarray(reward_fn(pool, rollout_observations(d, dv, pool)), dtype=np.float64)
        order = np.argsort(-r, kind="stable")[: config.n_elites]
        elites = pool[order]
        history.append(float(r[order].mean()))
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), config.min_std)
    return CemResult(float(np.clip(mean[0], A_MIN, A_MAX)), mean, std, history)


def cem_plan(state_or_obs, params: aida_mod.AidaParams | None = None, config: CemConfig = CemConfig(), rng=None,
             reward_fn=None) -> float:
    if isinstance(state_or_obs, SimState):
        d, dv = state_or_obs.gap, state_or_obs.v_lead - state_or_obs.v
    else:
        d, dv = float(state_or_obs[0]), float(state_or_obs[1])
    if reward_fn is None:
        if params is None:
            raise ValueError("either AIDA parameters or a reward function is required")
        reward_fn = preference_reward(params)
    return cem_optimize(d, dv, reward_fn, config, rng).action


class AidaMpcController(Controller):
    name = "aida-mpc"

    def __init__(self, params: aida_mod.AidaParams, config: CemConfig = CemConfig()):
        self.reward = preference_reward(params)
        self.config = config

    def __call__(self, k, obs, state):
        return cem_optimize(obs[0], obs[1], self.reward, self.config, self.rng).action


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class SimTrace:
    t: np.ndarray
    s_ego: np.ndarray
    v_ego: np.ndarray
    a_ego: np.ndarray
    s_lead: np.ndarray
    v_lead: np.ndarray
    d: np.ndarray
    dv: np.ndarray
    tau_inv: np.ndarray
    collision_flag: np.ndarray
    events: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.t)

    @property
    def collided(self) -> bool:
        return bool(self.collision_flag.any())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for row in zip(*(getattr(self, c) for c in TRACE_COLUMNS)):
                w.writerow([repr(float(x)) if i < 9 else int(x) for i, x in enumerate(row)])

    @classmethod
    def from_csv(cls, path) -> "SimTrace":
        data = np.genfromtxt(path, delimiter=",", names=True, ndmin=1)
        cols = {c: np.asarray(data[c], dtype=np.float64) for c in TRACE_COLUMNS}
        cols["collision_flag"] = cols["collision_flag"].astype(bool)
        return cls(**cols)


def run_closed_loop(controller: Controller, episode: Episode, seed: int = 0, clamp=(A_MIN, A_MAX)) -> SimTrace:
    """Simulate ``controller`` as the ego behind the recorded lead.

    Stops at the end of the episode, at the first collision (recorded with
    its flag set) or when the controller returns a non-finite value.
    """
    rng = np.random.default_rng(seed)
    controller.reset(episode, rng)
    lead_s, lead_v = episode.lead_positions(), episode.lead_speeds()
    state = SimState(float(episode.ego_positions()[0]), float(episode.v[0]), float(lead_s[0]), float(lead_v[0]),
                     0, episode.ego_length, episode.lead_length, episode.lead_width)
    rows = []
    events = []
    n = len(episode)
    for k in range(n):
        if collision_check(state):
            rows.append((state, np.nan, np.array([state.gap, state.v_lead - state.v, np.nan]), True))
            events.append({"step": k, "kind": "collision"})
            break
        obs = state.features()
        a = controller(k, obs, state)
        if not np.isfinite(a):
            rows.append((state, np.nan, obs, False))
            events.append({"step": k, "kind": "error", "message": "non-finite controller output"})
            break
        a = float(np.clip(a, *clamp))
        rows.append((state, a, obs, False))
        if k + 1 < n:
            state = step(state, a, lead_s[k + 1], lead_v[k + 1])
    st = [r[0] for r in rows]
    obs = np.array([r[2] for r in rows])
    return SimTrace(
        t=np.array([x.t for x in st]), s_ego=np.array([x.s for x in st]), v_ego=np.array([x.v for x in st]),
        a_ego=np.array([r[1] for r in rows]), s_lead=np.array([x.s_lead for x in st]),
        v_lead=np.array([x.v_lead for x in st]), d=obs[:, 0], dv=obs[:, 1], tau_inv=obs[:, 2],
        collision_flag=np.array([r[3] for r in rows]), events=events,
    )
