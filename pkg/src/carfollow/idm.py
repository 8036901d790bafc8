"""Intelligent Driver Model: control rule, Gaussian policy and likelihood fitting.

All relative speeds follow the episode convention ``dv = v_lead - v_ego``
(negative while closing in). With that convention the desired gap
``d0 + v tau - v dv / (2 sqrt(a_max b))`` grows when the ego approaches the
lead, which is the usual IDM behaviour.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffcore as dc

log = logging.getLogger(__name__)

A_MIN, A_MAX = -8.0, 5.0
PARAM_NAMES = ("v_des", "d0", "tau", "a_max", "b", "sigma")


class IdmFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class IdmParams:
    v_des: float = 30.0
    d0: float = 2.0
    tau: float = 1.5
    a_max: float = 1.5
    b: float = 2.0
    sigma: float = 0.1

    def __post_init__(self):
        bad = [f.name for f in fields(self) if not getattr(self, f.name) > 0]
        if bad and bad != ["sigma"] or not self.sigma >= 0:
            raise ValueError(f"IDM parameters must be positive (sigma non-negative): {bad}")

    @property
    def n_params(self) -> int:
        return len(PARAM_NAMES)

    def to_text(self) -> str:
        return "".join(f"{k} = {getattr(self, k)!r}\n" for k in PARAM_NAMES)

    @classmethod
    def from_text(cls, text: str) -> "IdmParams":
        vals = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in PARAM_NAMES:
                raise ValueError(f"unknown IDM parameter {key!r}")
            vals[key] = float(val)
        return cls(**vals)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "IdmParams":
        with open(path) as fh:
            return cls.from_text(fh.read())


def desired_gap(v, dv, p: IdmParams, clamp: bool = False):
    """Desired headway for ego speed ``v`` and relative speed ``dv = v_lead - v_ego``.

    Not clamped at ``d0`` unless ``clamp`` is set.
    """
    gap = p.d0 + v * p.tau - v * dv / (2.0 * np.sqrt(p.a_max * p.b))
    return np.maximum(gap, p.d0) if clamp else gap


def accel_mean(v, dv, d, p: IdmParams, clamp_gap: bool = False):
    """IDM acceleration for ego speed ``v``, feature ``dv = v_lead - v_ego`` and gap ``d``."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("IDM needs a positive headway")
    gap = desired_gap(v, np.asarray(dv), p, clamp=clamp_gap)
    return p.a_max * (1.0 - (np.asarray(v) / p.v_des) ** 4 - (gap / d) ** 2)


def sample_action(v, dv, d, p: IdmParams, rng: np.random.Generator, clamp=(A_MIN, A_MAX)):
    """Draw from N(accel_mean, sigma^2), clipped to physical limits."""
    mu = accel_mean(v, dv, d, p)
    a = mu + p.sigma * rng.standard_normal(np.shape(mu))
    return np.clip(a, *clamp) if clamp is not None else a


# ---------------------------------------------------------------------------
# fitting

_FIT_KEYS = PARAM_NAMES[:5]
_DEFAULT_INIT = IdmParams(v_des=25.0, d0=3.0, tau=1.2, a_max=1.0, b=1.5, sigma=0.5)


@dataclass
class IdmFit:
    params: IdmParams
    loss_curve: list[float]
    rank_deficient: bool
    restarts: int = 0

    @property
    def n_params(self) -> int:
        return self.params.n_params


def _stack(episodes):
    v = np.concatenate([e.v for e in episodes])
    dv = np.concatenate([e.dv for e in episodes])
    d = np.concatenate([e.d for e in episodes])
    a = np.concatenate([e.a for e in episodes])
    return v, dv, d, a


def _nll_graph(v, dv, d, a):
    """Mean Gaussian negative log-likelihood as a function of log-parameters."""
    v_c, dv_c, d_c, a_c = (dc.constant(x) for x in (v, dv, d, a))

    def nll(logp):
        p = dc.exp(logp)
        v_des, d0, tau, a_max, b, sigma = (p[i] for i in range(6))
        gap = d0 + v_c * tau - v_c * dv_c / (2.0 * dc.sqrt(a_max * b))
        mu = a_max * (1.0 - (v_c / v_des) ** 4 - (gap / d_c) ** 2)
        r = (a_c - mu) / sigma
        return dc.mean(0.5 * r * r) + logp[5] + 0.5 * np.log(2 * np.pi)

    return nll


def _jacobian_rank_deficient(v, dv, d, p: IdmParams, tol=1e-6) -> bool:
    base = np.log([getattr(p, k) for k in _FIT_KEYS])
    cols = []
    for i in range(len(base)):
        h = 1e-6
        up, dn = base.copy(), base.copy()
        up[i] += h
        dn[i] -= h
        pu = IdmParams(**dict(zip(_FIT_KEYS, np.exp(up))), sigma=p.sigma)
        pd = IdmParams(**dict(zip(_FIT_KEYS, np.exp(dn))), sigma=p.sigma)
        cols.append((accel_mean(v, dv, d, pu) - accel_mean(v, dv, d, pd)) / (2 * h))
    sv = np.linalg.svd(np.column_stack(cols), compute_uv=False)
    return bool(sv[-1] <= tol * sv[0])


def fit(episodes, init: IdmParams | None = None, lr: float = 0.05, max_steps: int = 4000,
        tol: float = 1e-10, max_restarts: int = 3) -> IdmFit:
    """Maximum-likelihood IDM calibration by Adam on log-parameters.

    A step that raises the loss is rejected and the step size halved, so the
    recorded objective never gets worse. ``sigma`` is finally reset to the
    residual standard deviation at the optimum.
    """
    if not episodes:
        raise IdmFitError("fit needs at least one episode")
    v, dv, d, a = _stack(episodes)
    nll = _nll_graph(v, dv, d, a)
    start = init or _DEFAULT_INIT
    for restart in range(max_restarts + 1):
        logp = np.log([getattr(start, k) for k in PARAM_NAMES])
        state = dc.OptimState(lr=lr)
        curve: list[float] = []
        try:
            cur, grads = dc.value_and_grad(nll, {"logp": logp})
            if not np.isfinite(cur):
                raise FloatingPointError("non-finite IDM loss")
            curve.append(cur)
            for _ in range(max_steps):
                new, state = dc.opt_step({"logp": logp}, grads, state)
                val, new_grads = dc.value_and_grad(nll, new)
                if np.isfinite(val) and val <= cur:
                    improvement = cur - val
                    logp, cur, grads = new["logp"], val, new_grads
                    curve.append(cur)
                    if improvement < tol and state.lr < 1e-6:
                        break
                else:
                    state.lr *= 0.5
                    if state.lr < 1e-9:
                        break
            break
        except (FloatingPointError, OverflowError) as exc:
            log.warning("IDM fit diverged (%s); restarting from default init", exc)
            start = _DEFAULT_INIT
            lr *= 0.5
    else:
        raise IdmFitError("IDM fit diverged after all restarts")
    vals = {k: float(x) for k, x in zip(PARAM_NAMES, np.exp(logp))}
    p = IdmParams(**vals)
    resid = a - accel_mean(v, dv, d, p)
    sigma = float(np.sqrt(np.mean(resid**2)))
    p = IdmParams(**{**vals, "sigma": max(sigma, 1e-12)})
    return IdmFit(p, curve, _jacobian_rank_deficient(v, dv, d, p), restarts=restart)
