"""Gaussian-mixture discretization of continuous accelerations."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger(__name__)

MIN_WEIGHT = 1e-6
MIN_STD = 1e-4
MAX_REINIT = 5
LOG_2PI = np.log(2 * np.pi)


class CodebookError(RuntimeError):
    pass


@dataclass(frozen=True)
class ActionCodebook:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    bic: float = float("nan")

    def __post_init__(self):
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise CodebookError("codebook weights must sum to one")
        if np.any(self.stds <= 0):
            raise CodebookError("codebook standard deviations must be positive")

    @property
    def k(self) -> int:
        return len(self.means)

    def component_logpdf(self, a) -> np.ndarray:
        """log(w_k N(a | mu_k, sd_k)) with shape ``a.shape + (K,)``."""
        a = np.asarray(a, dtype=np.float64)[..., None]
        z = (a - self.means) / self.stds
        return np.log(self.weights) - 0.5 * z * z - np.log(self.stds) - 0.5 * LOG_2PI

    def loglik(self, a) -> float:
        return float(logsumexp(self.component_logpdf(a), axis=-1).sum())

    def discretize(self, a):
        return discretize(a, self)

    def sample(self, ids, rng: np.random.Generator):
        ids = np.asarray(ids)
        return self.means[ids] + self.stds[ids] * rng.standard_normal(ids.shape)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "bic": self.bic,
        }

    @classmethod
    def from_dict(cls, d) -> "ActionCodebook":
        return cls(
            np.asarray(d["weights"], dtype=np.float64),
            np.asarray(d["means"], dtype=np.float64),
            np.asarray(d["stds"], dtype=np.float64),
            float(d.get("bic", float("nan"))),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "ActionCodebook":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def discretize(a, codebook: ActionCodebook):
    """Most responsible component for each acceleration; ties go to the lower id."""
    ids = np.argmax(codebook.component_logpdf(a), axis=-1)
    return int(ids) if np.ndim(ids) == 0 else ids


def em_fit(x, k, max_iter=100, tol=1e-6, rng=None, trace=None):
    """EM for a 1-D ``k``-component mixture. Returns ``(weights, means, stds, loglik)``.

    Components initialise at the data quantiles. A component whose weight or
    spread collapses is re-seeded at a random sample, at most ``MAX_REINIT``
    times, after which :class:`CodebookError` is raised. ``trace``, when a
    list, receives the log-likelihood after every E-step.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    spread = float(x.std()) or 1.0
    rng = rng if rng is not None else np.random.default_rng(0)
    if k == 1:
        sd = max(spread if x.std() > 0 else MIN_STD, MIN_STD)
        w, mu, sd = np.ones(1), np.array([x.mean()]), np.array([sd])
        ll = float(np.sum(-0.5 * ((x - mu[0]) / sd[0]) ** 2 - np.log(sd[0]) - 0.5 * LOG_2PI))
        if trace is not None:
            trace.append(ll)
        return w, mu, sd, ll

    w = np.full(k, 1.0 / k)
    mu = np.quantile(x, (np.arange(k) + 0.5) / k)
    sd = np.full(k, max(spread / k, MIN_STD))
    reinits = 0
    prev = -np.inf
    ll = -np.inf
    for _ in range(max_iter):
        z = (x[:, None] - mu) / sd
        logp = np.log(w) - 0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI
        norm = logsumexp(logp, axis=1)
        ll = float(norm.sum())
        if trace is not None:
            trace.append(ll)
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        w_new = nk / n
        with np.errstate(invalid="ignore", divide="ignore"):
            mu_new = (resp * x[:, None]).sum(axis=0) / nk
            var = (resp * (x[:, None] - mu_new) ** 2).sum(axis=0) / nk
        sd_new = np.sqrt(var)
        bad = (w_new < MIN_WEIGHT) | ~(sd_new >= MIN_STD)
        if np.any(bad):
            reinits += 1
            if reinits > MAX_REINIT:
                raise CodebookError(f"EM with K={k}: degenerate component after {MAX_REINIT} re-initializations")
            nb = int(bad.sum())
            mu_new[bad] = rng.choice(x, size=nb, replace=False)
            sd_new[bad] = max(spread / k, MIN_STD)
            w_new[bad] = 1.0 / k
            w_new /= w_new.sum()
            prev = -np.inf
        w, mu, sd = w_new, mu_new, sd_new
        if abs(ll - prev) < tol:
            break
        prev = ll
    z = (x[:, None] - mu) / sd
    ll = float(logsumexp(np.log(w) - 0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI, axis=1).sum())
    return w, mu, sd, ll


def fit_action_codebook(accelerations, k_max: int = 15, max_iter: int = 100, tol: float = 1e-6, seed: int = 0) -> ActionCodebook:
    """Fit mixtures with 1..k_max components and keep the lowest-BIC one.

    BIC = -2 logL + (3K - 1) ln n. Components come back sorted by mean. A K
    whose EM degenerates is skipped (logged), matching the point-mass case
    where only K=1 is well posed.
    """
    x = np.asarray(accelerations, dtype=np.float64).ravel()
    n = len(x)
    if n < 10 * k_max:
        raise CodebookError(f"need at least {10 * k_max} samples for k_max={k_max}, got {n}")
    rng = np.random.default_rng(seed)
    best = None
    for k in range(1, k_max + 1):
        try:
            w, mu, sd, ll = em_fit(x, k, max_iter=max_iter, tol=tol, rng=rng)
        except CodebookError as exc:
            log.info("skipping K=%d: %s", k, exc)
            continue
        bic = -2.0 * ll + (3 * k - 1) * np.log(n)
        if best is None or bic < best[0]:
            best = (bic, w, mu, sd)
    if best is None:
        raise CodebookError("no mixture size could be fitted")
    bic, w, mu, sd = best
    order = np.argsort(mu, kind="stable")
    w = w[order] / w[order].sum()
    return ActionCodebook(w, mu[order], sd[order], float(bic))
