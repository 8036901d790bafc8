import numpy as np
import pytest

from carfollow import idm
from carfollow.data import Episode, fit_action_codebook, random_profiles, synth_generate

GEN_PARAMS = idm.IdmParams(v_des=30.0, d0=2.0, tau=1.5, a_max=1.5, b=2.0, sigma=0.05)
NOISE = 0.05


def make_episode(d, dv, v=None, a=None, **kw):
    d = np.asarray(d, dtype=float)
    n = len(d)
    dv = np.broadcast_to(np.asarray(dv, dtype=float), (n,)).copy()
    v = np.full(n, 10.0) if v is None else np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()
    a = np.zeros(n) if a is None else np.asarray(a, dtype=float)
    return Episode(ego_id=kw.pop("ego_id", 1), lead_id=kw.pop("lead_id", 0), d=d, dv=dv, tau_inv=dv / d, v=v, a=a, **kw)


@pytest.fixture(scope="session")
def synth200():
    """The 200-episode IDM dataset used by the acceptance criteria."""
    rng = np.random.default_rng(0)
    return synth_generate(GEN_PARAMS, random_profiles(200, rng), NOISE, seed=0)


@pytest.fixture(scope="session")
def small_synth():
    rng = np.random.default_rng(5)
    return synth_generate(GEN_PARAMS, random_profiles(30, rng), NOISE, seed=5)


@pytest.fixture(scope="session")
def small_codebook(small_synth):
    return fit_action_codebook(np.concatenate([e.a for e in small_synth.episodes]), k_max=5)


@pytest.fixture(scope="session")
def small_discretized(small_synth, small_codebook):
    return [e.with_actions(small_codebook.discretize(e.a)) for e in small_synth.episodes]
