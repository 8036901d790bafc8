"""Independent reference computations used by the tests.

Nothing here calls the planning or filtering code under test; everything is
written as direct enumeration over states, actions and trajectories.
"""

import itertools
import math

import numpy as np

from carfollow.aida import AidaParams


def random_params(rng, S, A, h_max=3, spread=1.5, n_obs=3):
    return AidaParams(
        trans_logits=spread * rng.standard_normal((S, A, S)),
        pref_logits=spread * rng.standard_normal(S),
        obs_mean=rng.standard_normal((S, n_obs)),
        obs_logstd=0.3 * rng.standard_normal((S, n_obs)),
        log_rate=float(rng.uniform(-1, 2)),
        h_max=h_max,
    )


def softmax_rows(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def efe_enum(p: AidaParams):
    """EFE(s, a) term by term: KL to the preference plus expected Gaussian entropy."""
    S, A = p.trans_logits.shape[:2]
    T = softmax_rows(p.trans_logits)
    pref = softmax_rows(p.pref_logits)
    out = np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            for s2 in range(S):
                q = T[s, a, s2]
                h = sum(0.5 * (1 + math.log(2 * math.pi)) + p.obs_logstd[s2, j] for j in range(p.obs_logstd.shape[1]))
                out[s, a] += q * (math.log(q) - math.log(pref[s2])) + q * h
    return out


def expected_cost(s0, policies, T, efe):
    """Expected cumulative (EFE + log pi) of a time-varying policy by summing
    over every action/state path. ``policies[k]`` is (S, A) for step k."""
    S, A = efe.shape
    H = len(policies)
    total = 0.0
    for acts in itertools.product(range(A), repeat=H):
        for states in itertools.product(range(S), repeat=H - 1):
            path = (s0, *states)
            prob, cost = 1.0, 0.0
            for k in range(H):
                s, a = path[k], acts[k]
                pi = policies[k][s, a]
                prob *= pi
                cost += efe[s, a] + math.log(pi)
                if k + 1 < H:
                    prob *= T[s, a, path[k + 1]]
            total += prob * cost
    return total


def deterministic_value(s0, H, T, efe):
    """Optimal entropy-regularised cost for near-deterministic dynamics:
    -log sum over action sequences of exp(-total EFE)."""
    A = efe.shape[1]
    terms = []
    for acts in itertools.product(range(A), repeat=H):
        s, c = s0, 0.0
        for a in acts:
            c += efe[s, a]
            s = int(np.argmax(T[s, a]))
        terms.append(-c)
    m = max(terms)
    return -(m + math.log(sum(math.exp(t - m) for t in terms)))


def gauss_logpdf(x, mu, sd):
    return -0.5 * ((x - mu) / sd) ** 2 - math.log(sd) - 0.5 * math.log(2 * math.pi)


def bayes_enum(prior, lik):
    joint = [p * l for p, l in zip(prior, lik)]
    z = sum(joint)
    return [j / z for j in joint]


def mixture_policy(b, p: AidaParams):
    """Horizon-mixture policy recomputed from scratch: fixed-point backups,
    QMDP weighting, Poisson mixture."""
    S, A = p.trans_logits.shape[:2]
    T = softmax_rows(p.trans_logits)
    efe = efe_enum(p)
    v = np.zeros(S)
    per_h = []
    for _ in range(p.h_max):
        q = np.array([[efe[s, a] + sum(T[s, a, s2] * v[s2] for s2 in range(S)) for a in range(A)] for s in range(S)])
        pi = softmax_rows(-q)
        # the soft value is the expected cost of pi including its log pi term
        v = np.array([sum(pi[s, a] * (q[s, a] + math.log(pi[s, a])) for a in range(A)) for s in range(S)])
        per_h.append(softmax_rows(-(b @ q)))
    hs = np.arange(1, p.h_max + 1)
    w = np.array([math.exp(h * p.log_rate - math.lgamma(h + 1)) for h in hs])
    w /= w.sum()
    return sum(wi * ph for wi, ph in zip(w, per_h))
