"""Offline and online metrics, robust aggregation, Welch tests and diagnostic exports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import betainc

from . import aida as aida_mod
from . import bc
from .data.codebook import ActionCodebook
from .idm import A_MAX, A_MIN, IdmParams, accel_mean

REPORT_COLUMNS = ("model", "condition", "seed", "metric", "value")


# ---------------------------------------------------------------------------
# offline prediction


def predict_offline(model, episode, codebook: ActionCodebook | None, rng: np.random.Generator,
                    clamp=(A_MIN, A_MAX)) -> np.ndarray:
    """One sampled acceleration per step, conditioned on the recorded history."""
    if isinstance(model, IdmParams):
        mu = accel_mean(episode.v, episode.dv, episode.d, model)
        return np.clip(mu + model.sigma * rng.standard_normal(len(episode)), *clamp)
    if isinstance(model, (bc.MlpPolicy, bc.GruPolicy)):
        logp = model.sequence_logprobs(episode.observations())
    elif isinstance(model, aida_mod.AidaParams):
        beliefs, _, _ = aida_mod.filter_beliefs(episode.observations(), episode.action_id, model)
        logp = aida_mod.policy_logprobs(beliefs, model)
    elif callable(model):
        return np.asarray(model(episode, rng), dtype=np.float64)
    else:
        raise TypeError(f"unsupported model {type(model).__name__}")
    return np.array([bc.sample_from_logprobs(lp, codebook, rng, clamp) for lp in logp])


def offline_mae(model, episodes, codebook: ActionCodebook | None = None, seed: int = 0,
                clamp=(A_MIN, A_MAX)) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.array([float(np.mean(np.abs(predict_offline(model, e, codebook, rng, clamp) - e.a)))
                     for e in episodes])


# ---------------------------------------------------------------------------
# online metrics


@dataclass(frozen=True)
class OnlineMetrics:
    ade: np.ndarray
    collisions: np.ndarray

    @property
    def collision_rate(self) -> float:
        return float(np.mean(self.collisions)) if len(self.collisions) else float("nan")


def online_metrics(traces, episodes) -> OnlineMetrics:
    """ADE over the simulated steps (truncated at a collision) and collision flags."""
    ade, col = [], []
    for tr, ep in zip(traces, episodes, strict=True):
        n = min(len(tr), len(ep))
        if len(tr) > len(ep) or (len(tr) < len(ep) and not tr.collided and not tr.events):
            raise ValueError(f"trace length {len(tr)} does not match episode length {len(ep)}")
        ade.append(float(np.mean(np.abs(tr.s_ego[:n] - ep.ego_positions()[:n]))))
        col.append(bool(tr.collided))
    return OnlineMetrics(np.array(ade), np.array(col))


# ---------------------------------------------------------------------------
# statistics


def iqm(values) -> float:
    """Mean of the middle values after dropping floor(n/4) from each end."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if len(x) < 4:
        raise ValueError("iqm needs at least 4 values")
    k = len(x) // 4
    return float(x[k:len(x) - k].mean())


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float

    @property
    def df_int(self) -> int:
        return int(math.floor(self.df))


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t via the regularized incomplete beta."""
    if not np.isfinite(t):
        return 0.0
    return float(betainc(0.5 * df, 0.5, df / (df + t * t)))


def welch(sample_a, sample_b) -> WelchResult:
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("welch needs at least two values per sample")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    if va + vb == 0:
        raise ValueError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return WelchResult(float(t), float(df), t_sf_two_sided(t, df))


# ---------------------------------------------------------------------------
# reports


def write_rows(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_trajectory_metrics(path, model, condition, seed, metrics: dict[str, np.ndarray]) -> None:
    names = list(metrics)
    n = len(next(iter(metrics.values())))
    rows = [[model, condition, seed, i, *(metrics[m][i] for m in names)] for i in range(n)]
    write_rows(path, ["model", "condition", "seed", "trajectory", *names], rows)


def summarize(per_traj: list[dict]) -> list[tuple]:
    """Rows (model, condition, seed, metric, value): IQM for continuous
    metrics, plain mean for collision flags."""
    out = []
    for rec in per_traj:
        for metric, vals in rec["metrics"].items():
            vals = np.asarray(vals, dtype=np.float64)
            if metric == "collision":
                out.append((rec["model"], rec["condition"], rec["seed"], "collision_rate", float(vals.mean())))
            else:
                out.append((rec["model"], rec["condition"], rec["seed"], f"{metric}_iqm", iqm(vals)))
    return out


def comparison_table(summary_rows, pairs) -> list[tuple]:
    """Welch tests between per-seed aggregates for each (model_a, model_b) pair."""
    by = {}
    for model, cond, seed, metric, value in summary_rows:
        by.setdefault((model, cond, metric), []).append(float(value))
    out = []
    for cond_metric in sorted({(c, m) for _, c, m in by}):
        for ma, mb in pairs:
            a, b = by.get((ma, *cond_metric)), by.get((mb, *cond_metric))
            if not a or not b or len(a) < 2 or len(b) < 2:
                continue
            try:
                w = welch(a, b)
            except ValueError:
                continue
            out.append((cond_metric[1], cond_metric[0], ma, mb, float(np.mean(a)), float(np.mean(b)),
                        w.t, w.df, w.df_int, w.p))
    return out


TEST_COLUMNS = ("metric", "condition", "model_a", "model_b", "mean_a", "mean_b", "t", "df", "df_int", "p")


# ---------------------------------------------------------------------------
# diagnostics


def state_order(params: aida_mod.AidaParams) -> np.ndarray:
    """States sorted by the raw mean of tau_inv."""
    return np.argsort(params.raw_means()[:, 2], kind="stable")


def export_diagnostics(params: aida_mod.AidaParams, codebook: ActionCodebook, episodes, out_dir, n_samples=200,
                       seed=0, traces=None) -> list[Path]:
    """Observation samples per state and per-trajectory belief/action traces.

    Trajectory files hold ``t, d, dv, tau_inv``, the true action one-hot
    (``true_k``), the predicted action distribution (``pred_k``) and the
    belief (``state_j``), states sorted by mean tau_inv and actions by mean
    acceleration. With ``traces`` the observed features come from the
    simulated runs and the filter uses the discretized simulated actions.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write diagnostics to {out}: {exc}") from exc
    written = []
    order = state_order(params)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    act_order = np.argsort(codebook.means, kind="stable")

    smp = aida_mod.sample_observations(params, n_samples, seed)
    p = out / "obs_samples.csv"
    write_rows(p, ["state", "state_rank", "d", "dv", "tau_inv", "pref_logprob", "action"],
               [[int(s), int(rank[s]), *map(repr, map(float, o)), repr(float(lp)), int(a)]
                for s, o, lp, a in zip(smp["state"], smp["obs"], smp["pref_logprob"], smp["action"])])
    written.append(p)

    meta = {"state_order": order.tolist(), "action_order": act_order.tolist(),
            "n_states": params.n_states, "n_actions": params.n_actions}
    p = out / "order.json"
    p.write_text(json.dumps(meta, indent=1))
    written.append(p)

    tables = aida_mod.soft_qmdp(params)
    K, S = params.n_actions, params.n_states
    for i, ep in enumerate(episodes):
        if traces is not None:
            tr = traces[i]
            n = int(np.sum(np.isfinite(tr.a_ego)))
            obs = np.column_stack([tr.d, tr.dv, tr.tau_inv])[:n]
            actions = codebook.discretize(tr.a_ego[:n])
        else:
            obs, actions = ep.observations(), ep.action_id
        beliefs, _, _ = aida_mod.filter_beliefs(obs, actions, params)
        pred = aida_mod.policy(beliefs, params, tables)
        onehot = np.eye(K)[actions]
        rows = []
        for t in range(len(obs)):
            rows.append([t, *map(repr, map(float, obs[t])),
                         *(int(x) for x in onehot[t, act_order]),
                         *(repr(float(x)) for x in pred[t, act_order]),
                         *(repr(float(x)) for x in beliefs[t, order])])
        header = ["t", "d", "dv", "tau_inv", *[f"true_{k}" for k in range(K)], *[f"pred_{k}" for k in range(K)],
                  *[f"state_{j}" for j in range(S)]]
        p = out / f"trajectory_{i:04d}.csv"
        write_rows(p, header, rows)
        written.append(p)
    return written


def refilter_trace(path, params: aida_mod.AidaParams, order_path=None) -> tuple[np.ndarray, np.ndarray]:
    """Re-run the filter on an exported trajectory; returns (exported, recomputed) beliefs in file order."""
    path = Path(path)
    meta = json.loads(Path(order_path or path.parent / "order.json").read_text())
    data = np.genfromtxt(path, delimiter=",", names=True, ndmin=1)
    K, S = meta["n_actions"], meta["n_states"]
    obs = np.column_stack([data["d"], data["dv"], data["tau_inv"]])
    onehot = np.column_stack([data[f"true_{k}"] for k in range(K)])
    actions = np.asarray(meta["action_order"])[onehot.argmax(axis=1)]
    exported = np.column_stack([data[f"state_{j}"] for j in range(S)])
    beliefs, _, _ = aida_mod.filter_beliefs(obs, actions, params)
    return exported, beliefs[:, meta["state_order"]]


# ---------------------------------------------------------------------------
# SVG rendering


def svg_scatter(path, x, y, color=None, xlabel="", ylabel="", size=420) -> None:
    """Minimal scatter plot; colors are taken from an integer or float per point."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    c = np.zeros(len(x)) if color is None else np.asarray(color, dtype=float)[ok]
    pad = 40
    span = lambda v: (v.min(), v.max() if v.max() > v.min() else v.min() + 1)  # noqa: E731
    (x0, x1), (y0, y1), (c0, c1) = span(x), span(y), span(c) if len(c) else (0, 1)
    px = pad + (x - x0) / (x1 - x0) * (size - 2 * pad)
    py = size - pad - (y - y0) / (y1 - y0) * (size - 2 * pad)
    hue = 240 * (1 - (c - c0) / (c1 - c0))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect x="{pad}" y="{pad}" width="{size - 2 * pad}" height="{size - 2 * pad}" fill="none" stroke="#888"/>',
             f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">{xlabel}</text>',
             f'<text x="12" y="{size / 2}" font-size="12" transform="rotate(-90 12 {size / 2})">{ylabel}</text>']
    parts += [f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2" fill="hsl({h:.0f},70%,45%)"/>' for a, b, h in zip(px, py, hue)]
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def svg_heatmap(path, matrix, cell=6) -> None:
    m = np.asarray(matrix, dtype=float)
    rows, cols = m.shape
    lo, hi = np.nanmin(m), np.nanmax(m)
    scale = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell}" height="{rows * cell}">']
    for i in range(rows):
        for j in range(cols):
            g = int(255 * (1 - scale[i, j]))
            parts.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
