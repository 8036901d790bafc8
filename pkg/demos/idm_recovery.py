# %% [markdown]
# Fit an IDM to synthetic followers and compare against the generating parameters.

# %%
import numpy as np

from carfollow import idm
from carfollow.data import random_profiles, synth_generate

true = idm.IdmParams(v_des=30.0, d0=2.0, tau=1.5, a_max=1.5, b=2.0, sigma=0.05)
data = synth_generate(true, random_profiles(60, np.random.default_rng(1)), noise_std=0.05, seed=1)
print(len(data.episodes), "episodes,", sum(len(e) for e in data.episodes), "steps")

# %%
fit = idm.fit(data.episodes)
for name in ("v_des", "d0", "tau", "a_max", "b", "sigma"):
    print(f"{name:6s} true {getattr(true, name):7.3f}  fitted {getattr(fit.params, name):7.3f}")
print("final nll", fit.loss_curve[-1], "rank deficient:", fit.rank_deficient)
