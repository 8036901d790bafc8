"""Behavior cloning over discrete actions: MLP and GRU+MLP policies.

Both policies read the feature triple (d, dv, tau_inv), standardized with
training-set statistics, and emit log-probabilities over the codebook actions.
Ego speed is deliberately not an input.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .data.codebook import ActionCodebook
from .idm import A_MAX, A_MIN

log = logging.getLogger(__name__)

N_FEATURES = 3
N_ACTIONS = 15
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


def _dense_init(rng, n_in, n_out):
    bound = np.sqrt(6.0 / n_in)  # He-uniform for rectifiers
    return rng.uniform(-bound, bound, size=(n_in, n_out)), np.zeros(n_out)


def _check_finite(obs):
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite input feature")


@dataclass
class MlpPolicy:
    params: dict[str, np.ndarray]
    feat_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    feat_std: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))
    hidden: tuple[int, ...] = (40, 40)
    arch = "mlp"

    @classmethod
    def init(cls, seed=0, hidden=(40, 40), n_actions=N_ACTIONS, zero=False) -> "MlpPolicy":
        rng = np.random.default_rng(seed)
        sizes = (N_FEATURES, *hidden, n_actions)
        params = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            w, bias = _dense_init(rng, a, b)
            params[f"W{i}"] = np.zeros_like(w) if zero else w
            params[f"b{i}"] = bias
        return cls(params, hidden=tuple(hidden))

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def set_normalization(self, obs):
        obs = np.asarray(obs, dtype=np.float64)
        self.feat_mean = obs.mean(axis=0)
        self.feat_std = np.where(obs.std(axis=0) > 0, obs.std(axis=0), 1.0)

    def graph(self, params, obs):
        """log-probabilities (..., K) as a diffcore expression of ``params``."""
        x = dc.constant((np.asarray(obs) - self.feat_mean) / self.feat_std)
        for i in range(self.n_layers):
            x = x @ params[f"W{i}"] + params[f"b{i}"]
            if i < self.n_layers - 1:
                x = dc.relu(x)
        return dc.log_softmax(x, axis=-1)

    def forward(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        _check_finite(obs)
        x = (obs - self.feat_mean) / self.feat_std
        for i in range(self.n_layers):
            x = x @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                x = np.maximum(x, 0.0)
        x = x - x.max(axis=-1, keepdims=True)
        return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))

    def sequence_logprobs(self, obs_seq) -> np.ndarray:
        return self.forward(obs_seq)


def mlp_forward(policy: MlpPolicy, o) -> np.ndarray:
    return policy.forward(o)


@dataclass
class GruPolicy:
    params: dict[str, np.ndarray]
    feat_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    feat_std: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))
    hidden_size: int = 30
    mlp_hidden: tuple[int, ...] = (30,)
    arch = "gru"

    @classmethod
    def init(cls, seed=0, hidden_size=30, mlp_hidden=(30,), n_actions=N_ACTIONS, zero=False) -> "GruPolicy":
        rng = np.random.default_rng(seed)
        h = hidden_size
        bound = 1.0 / np.sqrt(h)
        params = {}
        for gate in ("r", "z", "n"):
            params[f"Wi{gate}"] = rng.uniform(-bound, bound, (N_FEATURES, h))
            params[f"Wh{gate}"] = rng.uniform(-bound, bound, (h, h))
            params[f"bi{gate}"] = np.zeros(h)
            params[f"bh{gate}"] = np.zeros(h)
        sizes = (h, *mlp_hidden, n_actions)
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            w, bias = _dense_init(rng, a, b)
            params[f"W{i}"] = w
            params[f"b{i}"] = bias
        if zero:
            params = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(params, hidden_size=h, mlp_hidden=tuple(mlp_hidden))

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    set_normalization = MlpPolicy.set_normalization

    def _head(self, P, h, lib):
        n = len(self.mlp_hidden) + 1
        x = h
        for i in range(n):
            x = x @ P[f"W{i}"] + P[f"b{i}"]
            if i < n - 1:
                x = lib.relu(x)
        return lib.log_softmax(x)

    @staticmethod
    def _cell(P, x, h, lib):
        r = lib.sigmoid(x @ P["Wir"] + P["bir"] + h @ P["Whr"] + P["bhr"])
        z = lib.sigmoid(x @ P["Wiz"] + P["biz"] + h @ P["Whz"] + P["bhz"])
        n = lib.tanh(x @ P["Win"] + P["bin"] + r * (h @ P["Whn"] + P["bhn"]))
        return (1.0 - z) * n + z * h

    def graph(self, params, obs):
        """obs: (B, T, 3) array -> log-probabilities (B, T, K) as a diffcore expression."""
        x = (np.asarray(obs) - self.feat_mean) / self.feat_std
        B, T, _ = x.shape
        h = dc.constant(np.zeros((B, self.hidden_size)))
        outs = []
        for t in range(T):
            h = self._cell(params, dc.constant(x[:, t]), h, _DcLib)
            outs.append(h)
        hs = dc.stack(outs, axis=1)
        return self._head(params, hs, _DcLib)

    def initial_state(self, batch=None) -> np.ndarray:
        return np.zeros(self.hidden_size if batch is None else (batch, self.hidden_size))

    def step(self, o, h):
        """One recurrent step in plain numpy: returns (log-probs, new hidden)."""
        o = np.asarray(o, dtype=np.float64)
        _check_finite(o)
        x = (o - self.feat_mean) / self.feat_std
        h = self._cell(self.params, x, h, _NpLib)
        return self._head(self.params, h, _NpLib), h

    def forward(self, obs_seq) -> np.ndarray:
        obs_seq = np.asarray(obs_seq, dtype=np.float64)
        if len(obs_seq) == 0:
            raise ValueError("empty observation sequence")
        h = self.initial_state()
        out = []
        for o in obs_seq:
            lp, h = self.step(o, h)
            out.append(lp)
        return np.array(out)

    sequence_logprobs = forward


def gru_forward(policy: GruPolicy, o_seq) -> np.ndarray:
    return policy.forward(o_seq)


class _NpLib:
    @staticmethod
    def sigmoid(x):
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    tanh = staticmethod(np.tanh)

    @staticmethod
    def relu(x):
        return np.maximum(x, 0.0)

    @staticmethod
    def log_softmax(x):
        x = x - x.max(axis=-1, keepdims=True)
        return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


class _DcLib:
    sigmoid = staticmethod(dc.sigmoid)
    tanh = staticmethod(dc.tanh)
    relu = staticmethod(dc.relu)
    log_softmax = staticmethod(dc.log_softmax)


def analytic_param_count(arch: str, n_in=N_FEATURES, n_actions=N_ACTIONS) -> int:
    if arch == "mlp":
        sizes = (n_in, 40, 40, n_actions)
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if arch == "gru":
        h = 30
        gru = 3 * (n_in * h + h * h + 2 * h)
        return gru + (h * h + h) + (h * n_actions + n_actions)
    raise ValueError(arch)


PAPER_PARAM_COUNTS = {"idm": 6, "mlp": 4125, "gru": 6465, "aida": 7670}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    policy: object
    train_loss: list[float]
    val_loss: list[float]
    epochs: int


def _batch_nll(policy, params, episodes):
    if policy.arch == "mlp":
        obs = np.concatenate([e.observations() for e in episodes])
        ids = np.concatenate([e.action_id for e in episodes])
        lp = policy.graph(params, obs)
        return -dc.mean(lp[np.arange(len(ids)), ids])
    T = max(len(e) for e in episodes)
    B = len(episodes)
    obs = np.zeros((B, T, N_FEATURES))
    ids = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T))
    for i, e in enumerate(episodes):
        n = len(e)
        obs[i, :n] = e.observations()
        obs[i, n:] = e.observations()[-1]
        ids[i, :n] = e.action_id
        mask[i, :n] = 1.0
    lp = policy.graph(params, obs)
    bi, ti = np.meshgrid(np.arange(B), np.arange(T), indexing="ij")
    picked = lp[bi, ti, ids]
    return -dc.tsum(picked * mask) / mask.sum()


def episode_nll(policy, episodes) -> float:
    tot, n = 0.0, 0
    for e in episodes:
        lp = policy.sequence_logprobs(e.observations())
        tot -= lp[np.arange(len(e)), e.action_id].sum()
        n += len(e)
    return tot / n


def train(policy, episodes, epochs: int = 200, batch_size: int = 32, lr: float = 1e-3, patience: int = 10,
          val_fraction: float = 0.1, seed: int = 0) -> TrainResult:
    """Mini-batch maximum likelihood with early stopping on a validation plateau.

    Episodes must carry ``action_id``. Normalization constants are taken from
    the training episodes before the first step.
    """
    if any(e.action_id is None for e in episodes):
        raise TrainingError("episodes must be discretized before BC training")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(episodes))
    n_val = int(round(val_fraction * len(episodes))) if len(episodes) >= 10 else 0
    val = [episodes[i] for i in order[:n_val]]
    tr = [episodes[i] for i in order[n_val:]]
    policy.set_normalization(np.concatenate([e.observations() for e in tr]))
    state = dc.OptimState(lr=lr)
    params = dict(policy.params)
    train_curve, val_curve = [], []
    best = (np.inf, dict(params))
    stale = 0
    halved = False
    epoch = 0
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(tr))
        losses = []
        for start in range(0, len(tr), batch_size):
            batch = [tr[i] for i in perm[start:start + batch_size]]
            leaves = {k: dc.tensor(v, name=k) for k, v in params.items()}
            loss = _batch_nll(policy, leaves, batch)
            if not np.isfinite(loss.value):
                if halved:
                    raise TrainingError("non-finite BC loss after halving the step size")
                halved = True
                state.lr *= 0.5
                log.warning("non-finite BC loss; halving step size to %g", state.lr)
                continue
            loss.backward()
            grads = {k: leaves[k].grad for k in params}
            params, state = dc.opt_step(params, grads, state)
            losses.append(float(loss.value))
        policy.params = params
        train_curve.append(float(np.mean(losses)) if losses else float("nan"))
        if val:
            v = episode_nll(policy, val)
            val_curve.append(v)
            if v < best[0] - 1e-6:
                best, stale = (v, dict(params)), 0
            else:
                stale += 1
                if stale >= patience:
                    break
    if val:
        policy.params = best[1]
    return TrainResult(policy, train_curve, val_curve, epoch)


def predict_sample(policy, history, codebook: ActionCodebook, rng: np.random.Generator,
                   clamp=(A_MIN, A_MAX)) -> float:
    """Sample a discrete action from the policy output for the latest step of
    ``history`` (an observation sequence), then a value from that component."""
    history = np.atleast_2d(np.asarray(history, dtype=np.float64))
    lp = policy.forward(history[-1]) if policy.arch == "mlp" else policy.forward(history)[-1]
    return sample_from_logprobs(lp, codebook, rng, clamp)


def sample_from_logprobs(logp, codebook: ActionCodebook, rng, clamp=(A_MIN, A_MAX)) -> float:
    p = np.exp(logp - np.max(logp))
    p /= p.sum()
    k = int(rng.choice(len(p), p=p))
    a = float(codebook.means[k] + codebook.stds[k] * rng.standard_normal())
    return float(np.clip(a, *clamp)) if clamp is not None else a


# ---------------------------------------------------------------------------
# checkpoints


def save_policy(policy, path) -> None:
    header = {
        "format": "carfollow-bc",
        "version": CHECKPOINT_VERSION,
        "arch": policy.arch,
        "hidden": list(policy.hidden) if policy.arch == "mlp" else [policy.hidden_size, *policy.mlp_hidden],
    }
    np.savez(
        path,
        header=np.array(json.dumps(header)),
        feat_mean=policy.feat_mean,
        feat_std=policy.feat_std,
        **{f"p_{k}": v for k, v in policy.params.items()},
    )


def load_policy(path):
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "carfollow-bc" or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint header {header}")
        params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p_")}
        mean, std = z["feat_mean"].copy(), z["feat_std"].copy()
    if header["arch"] == "mlp":
        return MlpPolicy(params, mean, std, hidden=tuple(header["hidden"]))
    h, *mlp = header["hidden"]
    return GruPolicy(params, mean, std, hidden_size=h, mlp_hidden=tuple(mlp))
