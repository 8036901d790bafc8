import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from carfollow import bc, evaluation as ev, idm, sim

from conftest import make_episode
from oracles import random_params


def _gaussian_episodes(n_ep, T, p, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_ep):
        d = rng.uniform(20, 40, T)
        dv = rng.normal(0, 0.5, T)
        v = rng.uniform(8, 14, T)
        out.append(make_episode(d, dv, v=v, a=idm.accel_mean(v, dv, d, p)))
    return out


# --- offline ----------------------------------------------------------------


def test_offline_mae_examples():
    eps = [make_episode(np.full(20, 10.0), 0.0, a=np.ones(20)) for _ in range(3)]
    np.testing.assert_array_equal(ev.offline_mae(lambda e, rng: e.a, eps), 0.0)
    np.testing.assert_array_equal(ev.offline_mae(lambda e, rng: np.zeros(len(e)), eps), 1.0)


def test_offline_mae_half_normal():
    p = idm.IdmParams(sigma=0.5)
    eps = _gaussian_episodes(100, 1000, p)
    mae = ev.offline_mae(p, eps, seed=0)
    assert mae.mean() == pytest.approx(0.5 * math.sqrt(2 / math.pi), rel=0.02)


def test_offline_mae_reproducible(small_discretized, small_codebook):
    pol = bc.MlpPolicy.init(seed=0, n_actions=small_codebook.k)
    a = ev.offline_mae(pol, small_discretized[:4], small_codebook, seed=3)
    b = ev.offline_mae(pol, small_discretized[:4], small_codebook, seed=3)
    assert a.tobytes() == b.tobytes()
    p = random_params(np.random.default_rng(0), 4, small_codebook.k, h_max=4)
    m = ev.offline_mae(p, small_discretized[:2], small_codebook, seed=1)
    assert m.shape == (2,) and np.all(np.isfinite(m))
    with pytest.raises(TypeError):
        ev.offline_mae("idm", small_discretized[:1])


# --- online -----------------------------------------------------------------


def _trace_from(ep, offset=0.0, collide_at=None):
    n = len(ep) if collide_at is None else collide_at + 1
    s = ep.ego_positions()[:n] + offset
    flag = np.zeros(n, bool)
    if collide_at is not None:
        flag[-1] = True
    z = np.zeros(n)
    return sim.SimTrace(np.arange(n) * 0.1, s, z, z, z, z, z, z, z, flag)


def test_online_metrics_examples():
    ep = make_episode(np.full(30, 20.0), 0.0)
    assert ev.online_metrics([_trace_from(ep)], [ep]).ade[0] == 0.0
    assert ev.online_metrics([_trace_from(ep, 1.0)], [ep]).ade[0] == pytest.approx(1.0)
    traces = [_trace_from(ep, collide_at=5 if i < 3 else None) for i in range(75)]
    m = ev.online_metrics(traces, [ep] * 75)
    assert m.collision_rate == pytest.approx(0.04)


def test_online_length_mismatch():
    ep = make_episode(np.full(30, 20.0), 0.0)
    short = _trace_from(ep.window(0, 10))
    with pytest.raises(ValueError):
        ev.online_metrics([short], [ep])
    with pytest.raises(ValueError):
        ev.online_metrics([_trace_from(ep)], [ep, ep])


# --- statistics -------------------------------------------------------------


def test_iqm_examples():
    assert ev.iqm([1, 2, 3, 4]) == 2.5
    assert ev.iqm(np.arange(1, 9)) == 4.5
    assert ev.iqm([5, 1, 100, 2, 3, -50, 4]) == pytest.approx(np.mean([1, 2, 3, 4, 5]))
    with pytest.raises(ValueError):
        ev.iqm([1, 2, 3])
    assert abs(ev.iqm(np.random.default_rng(0).standard_normal(10_000))) < 0.05


@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=40), st.integers(0, 39), st.floats(0, 100), st.randoms())
@settings(max_examples=200)
def test_iqm_properties(values, idx, bump, rnd):
    base = ev.iqm(values)
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert ev.iqm(shuffled) == pytest.approx(base, rel=1e-12, abs=1e-9)
    raised = list(values)
    raised[idx % len(values)] += bump
    assert ev.iqm(raised) >= base - 1e-9


def test_welch_reference():
    a, b = [1, 2, 3, 4, 5], [2, 3, 4, 5, 6]
    w = ev.welch(a, b)
    ref = stats.ttest_ind(a, b, equal_var=False)
    assert w.t == pytest.approx(ref.statistic, abs=1e-6)
    assert w.p == pytest.approx(ref.pvalue, abs=1e-6)
    # textbook Welch-Satterthwaite with equal variances 2.5 and n = 5
    assert w.df == pytest.approx(8.0, abs=1e-6)
    assert w.df_int == 8


def test_welch_examples():
    w = ev.welch([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert w.t == 0 and w.p == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    a = 1e-3 * rng.standard_normal(15)
    assert ev.welch(a, a + 10 * 1e-3 * 3).p < 1e-6
    with pytest.raises(ValueError):
        ev.welch([1.0, 1.0], [2.0, 2.0])
    with pytest.raises(ValueError):
        ev.welch([1.0], [2.0, 3.0])


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=15), st.lists(st.floats(-10, 10), min_size=2, max_size=15))
@settings(max_examples=100)
def test_welch_antisymmetric(a, b):
    if np.var(a) + np.var(b) < 1e-6:
        return
    ab, ba = ev.welch(a, b), ev.welch(b, a)
    assert ab.t == pytest.approx(-ba.t, abs=1e-12)
    assert ab.p == pytest.approx(ba.p, abs=1e-12)
    ref = stats.ttest_ind(a, b, equal_var=False)
    assert ab.p == pytest.approx(ref.pvalue, abs=1e-9)


def test_summary_and_comparison():
    rng = np.random.default_rng(0)
    per = []
    for seed in range(5):
        per.append({"model": "aida", "condition": "same", "seed": seed,
                    "metrics": {"mae": rng.normal(1, 0.1, 20), "collision": np.array([0, 1, 0, 0])}})
        per.append({"model": "idm", "condition": "same", "seed": seed,
                    "metrics": {"mae": rng.normal(2, 0.1, 20), "collision": np.zeros(4)}})
    rows = ev.summarize(per)
    assert ("aida", "same", 0, "collision_rate", 0.25) in rows
    tests = ev.comparison_table(rows, [("aida", "idm")])
    by_metric = {r[0]: r for r in tests}
    assert by_metric["mae_iqm"][6] < 0 and by_metric["mae_iqm"][9] < 1e-6
    assert len(tests[0]) == len(ev.TEST_COLUMNS)


def test_rows_round_trip(tmp_path):
    ev.write_trajectory_metrics(tmp_path / "m.csv", "idm", "same", 0, {"mae": np.array([0.5, 0.25])})
    rows = ev.read_rows(tmp_path / "m.csv")
    assert [float(r["mae"]) for r in rows] == [0.5, 0.25]


# --- diagnostics ------------------------------------------------------------


def test_export_diagnostics(tmp_path, small_discretized, small_codebook):
    p = random_params(np.random.default_rng(1), 5, small_codebook.k, h_max=4)
    obs = np.concatenate([e.observations() for e in small_discretized])
    p.obs_shift, p.obs_scale = obs.mean(axis=0), obs.std(axis=0)
    eps = small_discretized[:3]
    files = ev.export_diagnostics(p, small_codebook, eps, tmp_path / "diag")
    names = {f.name for f in files}
    assert {"obs_samples.csv", "order.json", "trajectory_0000.csv"} <= names
    samples = ev.read_rows(tmp_path / "diag" / "obs_samples.csv")
    counts = np.bincount([int(r["state"]) for r in samples])
    np.testing.assert_array_equal(counts, 200)
    for i in range(3):
        path = tmp_path / "diag" / f"trajectory_{i:04d}.csv"
        exported, recomputed = ev.refilter_trace(path, p)
        np.testing.assert_allclose(exported.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(exported, recomputed, atol=1e-9)
    order = ev.state_order(p)
    assert np.all(np.diff(p.raw_means()[order, 2]) >= 0)


def test_export_from_traces(tmp_path, small_discretized, small_codebook):
    p = random_params(np.random.default_rng(2), 3, small_codebook.k, h_max=3)
    ep = small_discretized[0]
    tr = sim.run_closed_loop(sim.ReplayController(), ep)
    ev.export_diagnostics(p, small_codebook, [ep], tmp_path, n_samples=10, traces=[tr])
    exported, recomputed = ev.refilter_trace(tmp_path / "trajectory_0000.csv", p)
    np.testing.assert_allclose(exported, recomputed, atol=1e-9)


def test_export_unwritable(tmp_path, small_codebook):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    p = random_params(np.random.default_rng(0), 3, small_codebook.k)
    with pytest.raises(OSError):
        ev.export_diagnostics(p, small_codebook, [], blocker / "sub")


def test_svg(tmp_path):
    ev.svg_scatter(tmp_path / "a.svg", [0, 1, 2], [2, 1, 0], color=[0, 1, 2], xlabel="d", ylabel="dv")
    ev.svg_heatmap(tmp_path / "b.svg", np.eye(3))
    assert (tmp_path / "a.svg").read_text().count("<circle") == 3
    assert (tmp_path / "b.svg").read_text().count("<rect") == 9
