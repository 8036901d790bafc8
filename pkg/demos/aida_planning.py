# %% [markdown]
# A three-state toy: belief filtering, soft QMDP backups and the horizon-mixture policy.

# %%
import numpy as np

from carfollow import aida
from carfollow.aida import AidaParams

# state 0 "closing", 1 "steady", 2 "opening"; action 0 brake, 1 hold, 2 accelerate
trans = np.full((3, 3, 3), -4.0)
trans[:, 0, :] = [[-4.0, 0.0, -4.0], [-4.0, -4.0, 0.0], [-4.0, -4.0, 0.0]]
trans[:, 1, :] = np.eye(3) * 4.0 - 4.0
trans[:, 2, :] = [[0.0, -4.0, -4.0], [0.0, -4.0, -4.0], [-4.0, 0.0, -4.0]]
p = AidaParams(
    trans_logits=trans,
    pref_logits=np.array([-3.0, 2.0, -1.0]),
    obs_mean=np.array([[-1.0, -1.0, -1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]),
    obs_logstd=np.full((3, 3), np.log(0.5)),
    h_max=8,
)

# %%
tab = aida.soft_qmdp(p)
print("EFE(s, a):\n", aida.efe_table(p).round(3))
print("8-step soft values:", tab.v[-1].round(3))
for s, name in enumerate(["closing", "steady", "opening"]):
    print(f"{name:8s} policy", aida.policy(np.eye(3)[s], p).round(3))

# %%
obs = np.array([[0.1, 0.0, 0.1], [-0.8, -1.1, -0.9], [-1.2, -0.9, -1.0], [0.0, 0.2, -0.1]])
beliefs, log_ev, shocks = aida.filter_beliefs(obs, [1, 1, 0, 0], p)
for o, b in zip(obs, beliefs):
    print(o, "->", b.round(3), "act", aida.policy(b, p).round(2))
