"""Active inference driving agent.

A discrete-state POMDP with softmax-parameterized transitions and preferences
and diagonal-Gaussian observations. Beliefs are filtered exactly, the expected
free energy (EFE) is planned over with a soft QMDP backup, and the policy is a
Poisson-weighted mixture over planning horizons. Parameters are estimated by
maximizing the action likelihood of the filtered beliefs plus an observation
likelihood term.

Observations are modelled in a standardized space: ``(o - obs_shift) /
obs_scale`` with per-feature training statistics. Means and standard
deviations stored in :class:`AidaParams` live in that space.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import gammaln, logsumexp

from . import diffcore as dc
from .data.codebook import ActionCodebook

log = logging.getLogger(__name__)

N_STATES = 20
N_ACTIONS = 15
H_MAX = 30
N_OBS = 3
LAMBDA1 = 1.0
LAMBDA2 = 0.1
SHOCK_LOGMASS = -700.0
LOG_2PI = math.log(2 * math.pi)
GAUSS_ENTROPY_CONST = 0.5 * N_OBS * (1.0 + LOG_2PI)
CHECKPOINT_VERSION = 1
PARAM_KEYS = ("trans_logits", "pref_logits", "obs_mean", "obs_logstd", "log_rate")


class AidaError(RuntimeError):
    pass


@dataclass
class AidaParams:
    trans_logits: np.ndarray  # (S, A, S)
    pref_logits: np.ndarray  # (S,)
    obs_mean: np.ndarray  # (S, 3)
    obs_logstd: np.ndarray  # (S, 3)
    log_rate: float = math.log(10.0)
    h_max: int = H_MAX
    obs_shift: np.ndarray = field(default_factory=lambda: np.zeros(N_OBS))
    obs_scale: np.ndarray = field(default_factory=lambda: np.ones(N_OBS))

    def __post_init__(self):
        self.trans_logits = np.asarray(self.trans_logits, dtype=np.float64)
        self.pref_logits = np.asarray(self.pref_logits, dtype=np.float64)
        self.obs_mean = np.asarray(self.obs_mean, dtype=np.float64)
        self.obs_logstd = np.asarray(self.obs_logstd, dtype=np.float64)
        self.log_rate = float(self.log_rate)
        s, a, s2 = self.trans_logits.shape
        if s != s2 or self.pref_logits.shape != (s,):
            raise AidaError("inconsistent state dimension")
        if self.obs_mean.shape != self.obs_logstd.shape or self.obs_mean.shape[0] != s:
            raise AidaError("observation parameters must be (S, d)")
        if self.h_max < 1:
            raise AidaError("h_max must be positive")

    @classmethod
    def uniform(cls, n_states=N_STATES, n_actions=N_ACTIONS, h_max=H_MAX, n_obs=N_OBS) -> "AidaParams":
        return cls(
            np.zeros((n_states, n_actions, n_states)), np.zeros(n_states),
            np.zeros((n_states, n_obs)), np.zeros((n_states, n_obs)), h_max=h_max,
            obs_shift=np.zeros(n_obs), obs_scale=np.ones(n_obs),
        )

    @property
    def n_states(self) -> int:
        return self.trans_logits.shape[0]

    @property
    def n_actions(self) -> int:
        return self.trans_logits.shape[1]

    @property
    def n_params(self) -> int:
        return int(sum(np.size(getattr(self, k)) for k in PARAM_KEYS))

    @property
    def trans(self) -> np.ndarray:
        return np.exp(self.log_trans)

    @property
    def log_trans(self) -> np.ndarray:
        return self.trans_logits - logsumexp(self.trans_logits, axis=-1, keepdims=True)

    @property
    def log_pref(self) -> np.ndarray:
        return self.pref_logits - logsumexp(self.pref_logits)

    @property
    def pref(self) -> np.ndarray:
        return np.exp(self.log_pref)

    @property
    def obs_std(self) -> np.ndarray:
        return np.exp(self.obs_logstd)

    @property
    def rate(self) -> float:
        return math.exp(self.log_rate)

    def horizon_logprobs(self) -> np.ndarray:
        """log P(H) for H = 1..h_max under a Poisson truncated to that range."""
        h = np.arange(1, self.h_max + 1)
        lp = h * self.log_rate - gammaln(h + 1)
        return lp - logsumexp(lp)

    def standardize(self, o) -> np.ndarray:
        return (np.asarray(o, dtype=np.float64) - self.obs_shift) / self.obs_scale

    def raw_means(self) -> np.ndarray:
        return self.obs_shift + self.obs_scale * self.obs_mean

    def raw_stds(self) -> np.ndarray:
        return self.obs_scale * self.obs_std

    def tensors(self) -> dict[str, np.ndarray]:
        return {k: np.array(getattr(self, k), dtype=np.float64) for k in PARAM_KEYS}

    def with_tensors(self, values) -> "AidaParams":
        v = {k: np.array(values[k], dtype=np.float64) for k in PARAM_KEYS}
        v["log_rate"] = float(v["log_rate"])
        return replace(self, **v)


def analytic_param_count(n_states=N_STATES, n_actions=N_ACTIONS, n_obs=N_OBS) -> int:
    return n_states * n_actions * n_states + n_states + 2 * n_states * n_obs + 1


# ---------------------------------------------------------------------------
# observation model and filtering


def obs_loglik_all(o, params: AidaParams) -> np.ndarray:
    """log P(o | s) for every state, shape ``o.shape[:-1] + (S,)``. ``o`` is raw."""
    z = (params.standardize(o)[..., None, :] - params.obs_mean) / params.obs_std
    ll = -0.5 * z * z - params.obs_logstd - 0.5 * LOG_2PI
    return ll.sum(axis=-1) - np.log(params.obs_scale).sum()


def obs_loglik(o, s: int, params: AidaParams) -> float:
    return float(obs_loglik_all(o, params)[..., s])


def prior_predictive(b, a: int, params: AidaParams) -> np.ndarray:
    return np.asarray(b, dtype=np.float64) @ params.trans[:, a, :]


def _log_prior(log_b, a, params):
    return logsumexp(log_b[:, None] + params.log_trans[:, a, :], axis=0)


@dataclass(frozen=True)
class BeliefStep:
    belief: np.ndarray
    log_evidence: float  # log P(o_t | history)
    shock: bool


def belief_update_log(log_prior: np.ndarray, ll: np.ndarray) -> BeliefStep:
    joint = ll + log_prior
    z = float(logsumexp(joint))
    if not np.isfinite(z) or z < SHOCK_LOGMASS:
        b = np.exp(log_prior - logsumexp(log_prior))
        return BeliefStep(b / b.sum(), z, True)
    b = np.exp(joint - z)
    return BeliefStep(b / b.sum(), z, False)


def belief_update(b_prev, a_prev, o, params: AidaParams) -> BeliefStep:
    """Bayes update of ``b_prev`` after action ``a_prev`` and raw observation ``o``.

    ``a_prev=None`` treats ``b_prev`` itself as the prior (first step).
    Falls back to the prior predictive with ``shock=True`` when the
    observation has negligible mass under every state.
    """
    b_prev = np.asarray(b_prev, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_b = np.log(b_prev)
    log_prior = log_b if a_prev is None else _log_prior(log_b, int(a_prev), params)
    return belief_update_log(log_prior, obs_loglik_all(o, params))


def filter_beliefs(obs, actions, params: AidaParams, b0=None):
    """Beliefs (T, S), log evidence (T,) and shock flags (T,) over a sequence.

    ``actions[t]`` is the discrete action taken after observing ``obs[t]``.
    """
    obs = np.atleast_2d(obs)
    S = params.n_states
    lls = obs_loglik_all(obs, params)
    log_prior = np.full(S, -math.log(S)) if b0 is None else np.log(b0)
    beliefs, ev, shock = [], [], []
    for t in range(len(obs)):
        if t > 0:
            log_prior = _log_prior(np.log(np.maximum(beliefs[-1], 1e-300)), int(actions[t - 1]), params)
        step = belief_update_log(log_prior, lls[t])
        beliefs.append(step.belief)
        ev.append(step.log_evidence)
        shock.append(step.shock)
    return np.array(beliefs), np.array(ev), np.array(shock)


# ---------------------------------------------------------------------------
# planning


def observation_entropy(params: AidaParams) -> np.ndarray:
    return GAUSS_ENTROPY_CONST + params.obs_logstd.sum(axis=-1)


def efe_table(params: AidaParams) -> np.ndarray:
    """EFE(s, a) for all pairs, shape (S, A)."""
    lt = params.log_trans
    t = np.exp(lt)
    kl = np.sum(t * (lt - params.log_pref), axis=-1)
    return kl + t @ observation_entropy(params)


def efe_state(s: int, a: int, params: AidaParams) -> float:
    return float(efe_table(params)[s, a])


@dataclass(frozen=True)
class SoftQmdp:
    """Backups for 1..H steps to go.

    ``q[h-1, s, a]`` is the soft action value with h steps to go (EFE of the
    current step plus the expected soft value of the successor), and
    ``v[h, s] = -logsumexp_a(-q[h-1, s, a])`` with ``v[0] = 0``. The optimal
    h-step policy is ``softmax(-q[h-1, s, :])`` and ``v[h]`` equals its
    expected cost including the ``log pi`` term.
    """

    q: np.ndarray
    v: np.ndarray

    @property
    def horizon(self) -> int:
        return self.q.shape[0]

    def state_policy(self, h: int) -> np.ndarray:
        x = -self.q[h - 1]
        return np.exp(x - logsumexp(x, axis=-1, keepdims=True))


def soft_qmdp(params: AidaParams, horizon: int | None = None) -> SoftQmdp:
    horizon = params.h_max if horizon is None else int(horizon)
    if not 1 <= horizon <= params.h_max:
        raise AidaError(f"horizon {horizon} outside 1..{params.h_max}")
    efe = efe_table(params)
    t = params.trans
    v = [np.zeros(params.n_states)]
    q = []
    for _ in range(horizon):
        qh = efe + t @ v[-1]
        q.append(qh)
        v.append(-logsumexp(-qh, axis=-1))
    return SoftQmdp(np.array(q), np.array(v))


def policy_logprobs(b, params: AidaParams, tables: SoftQmdp | None = None) -> np.ndarray:
    """log pi(a | b) of the horizon mixture, for one belief (S,) or a batch (..., S)."""
    if tables is None:
        tables = soft_qmdp(params)
    if tables.horizon != params.h_max:
        raise AidaError("tables must cover every horizon up to h_max")
    b = np.asarray(b, dtype=np.float64)
    logits = -np.einsum("...s,hsa->...ha", b, tables.q)
    per_h = logits - logsumexp(logits, axis=-1, keepdims=True)
    return logsumexp(per_h + params.horizon_logprobs()[:, None], axis=-2)


def policy(b, params: AidaParams, tables: SoftQmdp | None = None) -> np.ndarray:
    p = np.exp(policy_logprobs(b, params, tables))
    return p / p.sum(axis=-1, keepdims=True)


def horizon_policies(b, params: AidaParams, tables: SoftQmdp | None = None) -> np.ndarray:
    """Per-horizon policies (H, A) for one belief."""
    if tables is None:
        tables = soft_qmdp(params)
    logits = -np.einsum("s,hsa->ha", np.asarray(b, dtype=np.float64), tables.q)
    return np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# MAP objective as a differentiable graph


@dataclass
class Batch:
    obs: np.ndarray  # (B, T, 3), standardized
    actions: np.ndarray  # (B, T) int
    mask: np.ndarray  # (B, T)


def make_batch(episodes, params: AidaParams) -> Batch:
    if any(e.action_id is None for e in episodes):
        raise AidaError("episodes must be discretized with the action codebook")
    T = max(len(e) for e in episodes)
    B = len(episodes)
    obs = np.zeros((B, T, N_OBS))
    act = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T))
    for i, e in enumerate(episodes):
        n = len(e)
        o = params.standardize(e.observations())
        obs[i, :n], obs[i, n:] = o, o[-1]
        act[i, :n] = e.action_id
        mask[i, :n] = 1.0
    return Batch(obs, act, mask)


def _graph_loss(P, batch: Batch, h_max: int, log_scale_sum: float, lambda1: float, lambda2: float):
    S, A, _ = P["trans_logits"].shape
    log_t = dc.log_softmax(P["trans_logits"], axis=-1)
    t = dc.exp(log_t)
    log_pref = dc.log_softmax(P["pref_logits"])
    entropy = GAUSS_ENTROPY_CONST + dc.tsum(P["obs_logstd"], axis=-1)
    efe = dc.tsum(t * (log_t - log_pref), axis=-1) + t @ entropy

    q = [efe]
    for _ in range(h_max - 1):
        v = -dc.logsumexp(-q[-1], axis=-1)
        q.append(efe + t @ v)
    q = dc.stack(q, axis=0)  # (H, S, A)
    h = np.arange(1, h_max + 1)
    log_ph = dc.log_softmax(P["log_rate"] * h - gammaln(h + 1))

    B, T, _ = batch.obs.shape
    std = dc.exp(P["obs_logstd"])
    z = (batch.obs[:, :, None, :] - P["obs_mean"]) / std
    ll = dc.tsum(-0.5 * z * z - P["obs_logstd"], axis=-1) - (0.5 * N_OBS * LOG_2PI + log_scale_sum)

    log_t_by_action = dc.transpose(log_t, (1, 0, 2))  # (A, S, S)
    log_prior = dc.constant(np.full((B, S), -math.log(S)))
    log_b, log_ev = [], []
    for k in range(T):
        if k > 0:
            lt_a = log_t_by_action[batch.actions[:, k - 1]]  # (B, S, S)
            log_prior = dc.logsumexp(dc.reshape(log_b[-1], (B, S, 1)) + lt_a, axis=1)
        joint = ll[:, k] + log_prior
        z_k = dc.logsumexp(joint, axis=-1)
        post = joint - dc.reshape(z_k, (B, 1))
        shock = (z_k.value < SHOCK_LOGMASS)[:, None]
        if shock.any():
            post = dc.where(shock, log_prior - dc.logsumexp(log_prior, axis=-1, keepdims=True), post)
        log_b.append(post)
        log_ev.append(z_k)
    beliefs = dc.exp(dc.stack(log_b, axis=1))  # (B, T, S)
    logits = -dc.einsum("bts,hsa->btha", beliefs, q)
    per_h = dc.log_softmax(logits, axis=-1)
    mix = dc.logsumexp(per_h + dc.reshape(log_ph, (1, 1, h_max, 1)), axis=2)  # (B, T, A)
    bi, ti = np.meshgrid(np.arange(B), np.arange(T), indexing="ij")
    act_ll = dc.tsum(mix[bi, ti, batch.actions] * batch.mask) / batch.mask.sum()
    obs_ll = dc.tsum(dc.stack(log_ev, axis=1) * batch.mask) / batch.mask.sum()
    penalty = dc.tsum(dc.exp(4.0 * P["obs_logstd"]))
    return -(act_ll + lambda1 * obs_ll) + lambda2 * penalty


def map_objective_graph(params: AidaParams, batch: Batch, lambda1=LAMBDA1, lambda2=LAMBDA2):
    """Loss tensor together with the leaf tensors it depends on."""
    leaves = {k: dc.tensor(v, name=k) for k, v in params.tensors().items()}
    loss = _graph_loss(leaves, batch, params.h_max, float(np.log(params.obs_scale).sum()), lambda1, lambda2)
    return loss, leaves


def map_objective(params: AidaParams, episodes, lambda1=LAMBDA1, lambda2=LAMBDA2) -> float:
    batch = episodes if isinstance(episodes, Batch) else make_batch(episodes, params)
    loss, _ = map_objective_graph(params, batch, lambda1, lambda2)
    value = float(loss.value)
    if not np.isfinite(value):
        raise AidaError("non-finite MAP objective")
    return value


def map_objective_and_grad(params: AidaParams, batch: Batch, lambda1=LAMBDA1, lambda2=LAMBDA2):
    loss, leaves = map_objective_graph(params, batch, lambda1, lambda2)
    loss.backward()
    return float(loss.value), {k: leaves[k].grad for k in leaves}


# ---------------------------------------------------------------------------
# training


@dataclass
class AidaFit:
    params: AidaParams
    loss_curve: list[float]
    init_loss: float
    final_loss: float
    restarts: int


def init_params(episodes, seed=0, n_states=N_STATES, n_actions=N_ACTIONS, h_max=H_MAX) -> AidaParams:
    rng = np.random.default_rng(seed)
    obs = np.concatenate([e.observations() for e in episodes])
    shift = obs.mean(axis=0)
    scale = np.where(obs.std(axis=0) > 0, obs.std(axis=0), 1.0)
    z = (obs - shift) / scale
    means, _ = kmeans2(z, n_states, minit="++", seed=rng, iter=20)
    return AidaParams(
        trans_logits=0.1 * rng.standard_normal((n_states, n_actions, n_states)),
        pref_logits=0.1 * rng.standard_normal(n_states),
        obs_mean=means,
        obs_logstd=np.tile(np.log(z.std(axis=0)), (n_states, 1)),
        log_rate=math.log(10.0),
        h_max=h_max,
        obs_shift=shift,
        obs_scale=scale,
    )


def train(episodes, params: AidaParams | None = None, lambda1=LAMBDA1, lambda2=LAMBDA2, seed=0,
          steps=300, batch_size=32, lr=0.05, max_restarts=2, n_states=N_STATES, h_max=H_MAX,
          n_actions=N_ACTIONS) -> AidaFit:
    """Adam on the MAP objective over random mini-batches of episodes.

    A non-finite loss restarts from the initial parameters with half the step
    size, at most ``max_restarts`` times.
    """
    init = params if params is not None else init_params(episodes, seed, n_states, n_actions, h_max)
    full = make_batch(episodes, init)
    init_loss = map_objective(init, full, lambda1, lambda2)
    rng = np.random.default_rng(seed + 7919)
    for restart in range(max_restarts + 1):
        cur = init
        state = dc.OptimState(lr=lr * 0.5**restart)
        curve = []
        try:
            for _ in range(steps):
                idx = rng.choice(len(episodes), size=min(batch_size, len(episodes)), replace=False)
                loss, grads = map_objective_and_grad(cur, make_batch([episodes[i] for i in idx], cur),
                                                     lambda1, lambda2)
                if not np.isfinite(loss):
                    raise FloatingPointError("non-finite MAP objective")
                new, state = dc.opt_step(cur.tensors(), grads, state)
                cur = cur.with_tensors(new)
                curve.append(loss)
            final = map_objective(cur, full, lambda1, lambda2)
        except (FloatingPointError, AidaError) as exc:
            log.warning("AIDA training diverged (%s); restarting with step size %g", exc, lr * 0.5 ** (restart + 1))
            continue
        return AidaFit(cur, curve, init_loss, final, restart)
    raise AidaError(f"AIDA training diverged after {max_restarts} restarts")


# ---------------------------------------------------------------------------
# acting


class AidaAgent:
    """Online belief filter plus policy, usable step by step."""

    def __init__(self, params: AidaParams, codebook: ActionCodebook | None = None):
        self.params = params
        self.codebook = codebook
        self.tables = soft_qmdp(params)
        self.reset()

    def reset(self):
        self.belief = None
        self.last_shock = False

    def observe(self, o, a_prev=None) -> np.ndarray:
        S = self.params.n_states
        if self.belief is None:
            step = belief_update(np.full(S, 1.0 / S), None, o, self.params)
        else:
            if a_prev is None:
                raise AidaError("previous action required after the first step")
            step = belief_update(self.belief, a_prev, o, self.params)
        self.belief, self.last_shock = step.belief, step.shock
        return self.belief

    def action_probs(self) -> np.ndarray:
        return policy(self.belief, self.params, self.tables)

    def sample_action(self, rng, clamp=(-8.0, 5.0)) -> tuple[int, float]:
        p = self.action_probs()
        k = int(rng.choice(len(p), p=p))
        a = float(self.codebook.means[k] + self.codebook.stds[k] * rng.standard_normal())
        return k, float(np.clip(a, *clamp))


# ---------------------------------------------------------------------------
# interpretability samples and traces


def preference_logprob(o, params: AidaParams) -> np.ndarray:
    """log sum_s P~(s) P(o | s)."""
    return logsumexp(obs_loglik_all(o, params) + params.log_pref, axis=-1)


def sample_observations(params: AidaParams, n: int = 200, seed: int = 0) -> dict[str, np.ndarray]:
    """``n`` raw observations per state with state id, preference log
    probability and the greedy action of a uniform belief updated by the sample."""
    rng = np.random.default_rng(seed)
    S = params.n_states
    state = np.repeat(np.arange(S), n)
    z = params.obs_mean[state] + params.obs_std[state] * rng.standard_normal((S * n, params.obs_mean.shape[1]))
    o = params.obs_shift + params.obs_scale * z
    lls = obs_loglik_all(o, params)
    tables = soft_qmdp(params)
    beliefs = np.array([belief_update_log(np.full(S, -math.log(S)), ll).belief for ll in lls])
    action = policy_logprobs(beliefs, params, tables).argmax(axis=-1)
    return {"state": state, "obs": o, "pref_logprob": preference_logprob(o, params), "action": action}


def write_belief_trace(path, beliefs) -> None:
    beliefs = np.atleast_2d(beliefs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *[f"state_{i}" for i in range(beliefs.shape[1])]])
        for t, row in enumerate(beliefs):
            w.writerow([t, *(repr(float(x)) for x in row)])


def read_belief_trace(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(x) for x in r[1:]] for r in rows[1:]])


# ---------------------------------------------------------------------------
# checkpoints


def save_params(params: AidaParams, path, lambda1=LAMBDA1, lambda2=LAMBDA2, codebook: ActionCodebook | None = None,
                extra: dict | None = None) -> None:
    header = {
        "format": "carfollow-aida",
        "version": CHECKPOINT_VERSION,
        "n_states": params.n_states,
        "n_actions": params.n_actions,
        "h_max": params.h_max,
        "lambda1": lambda1,
        "lambda2": lambda2,
        "codebook": None if codebook is None else codebook.to_dict(),
        **(extra or {}),
    }
    np.savez(
        Path(path),
        header=np.array(json.dumps(header)),
        obs_shift=params.obs_shift,
        obs_scale=params.obs_scale,
        **params.tensors(),
    )


def load_params(path) -> tuple[AidaParams, dict]:
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "carfollow-aida" or header.get("version") != CHECKPOINT_VERSION:
            raise AidaError(f"unsupported checkpoint header {header}")
        p = AidaParams(
            **{k: z[k].copy() for k in PARAM_KEYS},
            h_max=int(header["h_max"]),
            obs_shift=z["obs_shift"].copy(),
            obs_scale=z["obs_scale"].copy(),
        )
    return p, header
