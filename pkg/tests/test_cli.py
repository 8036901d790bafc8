import json

import numpy as np
import pytest

from carfollow import aida, cli, idm
from carfollow.config import ConfigError, RunConfig, load_config, parse_config_text
from carfollow.data import Centerline, save_centerline, save_tracks
from carfollow.evaluation import REPORT_COLUMNS, read_rows

from test_data import _track

SMALL = [
    "--n-episodes", "24", "--episode-duration", "10", "--seeds", "0-1", "--n-states", "4", "--h-max", "5",
    "--aida-steps", "4", "--bc-epochs", "2", "--cem-iterations", "2", "--n-samples", "20", "--diag-trajectories", "2",
    "--k-codebook", "4",
]


def run(tmp, *args):
    return cli.main([*args, "--out-dir", str(tmp), *SMALL])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    assert run(root, "synth") == 0
    return root


def test_config_defaults():
    cfg = RunConfig()
    assert (cfg.n_states, cfg.n_actions, cfg.h_max, cfg.k_codebook) == (20, 15, 30, 15)
    assert cfg.seed_list() == list(range(15))
    assert (cfg.lambda1, cfg.lambda2, cfg.split_ratio) == (1.0, 0.1, 0.7)


def test_config_parsing(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nmodel = idm\nseeds = 1,3-4\nlambda1 = 0.5\n")
    cfg = load_config(p, {"n_states": "7"})
    assert cfg.model == "idm" and cfg.seed_list() == [1, 3, 4] and cfg.lambda1 == 0.5 and cfg.n_states == 7
    assert load_config(cfg.write(tmp_path / "out")) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        parse_config_text("lamda1 = 1\n")
    with pytest.raises(ConfigError):
        parse_config_text("n_states = many\n")
    with pytest.raises(ConfigError):
        RunConfig(model="gpt")
    with pytest.raises(ConfigError):
        RunConfig(seeds="")


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["fly"])
    assert exc.value.code == cli.EXIT_USAGE
    bad = tmp_path / "bad.txt"
    bad.write_text("no_such_key = 3\n")
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_USAGE
    assert cli.main(["ingest", "--out-dir", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["train", "--model", "aida-mpc", "--out-dir", str(tmp_path)]) == cli.EXIT_USAGE


def test_data_errors(tmp_path):
    assert cli.main(["train", "--out-dir", str(tmp_path / "empty")]) == cli.EXIT_DATA
    assert cli.main(["ingest", "--tracks", str(tmp_path / "nope.csv"), "--centerlines", "x.csv",
                     "--out-dir", str(tmp_path)]) == cli.EXIT_DATA
    assert cli.main(["report", "--out-dir", str(tmp_path)]) == cli.EXIT_DATA


def test_training_failure_exit_code(workspace, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise idm.IdmFitError("diverged")

    monkeypatch.setattr(idm, "fit", boom)
    import shutil

    ws = tmp_path / "ws"
    shutil.copytree(workspace, ws)
    assert cli.main(["train", "--model", "idm", "--seeds", "0", "--out-dir", str(ws)]) == cli.EXIT_TRAIN


def test_synth_manifest(workspace, tmp_path):
    man = json.loads((workspace / "manifest.json").read_text())
    assert man["n_episodes"] == 24
    assert abs(man["n_train"] - 0.7 * (man["n_train"] + man["n_same_lane_test"])) <= 1
    assert (workspace / "config.txt").exists()
    # same seed, same bytes
    assert run(tmp_path, "synth") == 0
    assert (tmp_path / "manifest.json").read_text() == (workspace / "manifest.json").read_text()
    assert (tmp_path / "tracks.csv").read_bytes() == (workspace / "tracks.csv").read_bytes()


def test_ingest_reproduces_synth(workspace, tmp_path):
    cfg = (workspace / "config.txt").read_text()
    tracks = [line.split("=", 1)[1].strip() for line in cfg.splitlines() if line.startswith("tracks")][0]
    cls = [line.split("=", 1)[1].strip() for line in cfg.splitlines() if line.startswith("centerlines")][0]
    assert run(tmp_path, "ingest", "--tracks", tracks, "--centerlines", cls) == 0
    a = json.loads((tmp_path / "manifest.json").read_text())
    b = json.loads((workspace / "manifest.json").read_text())
    assert a == b


def _three_tracks(tmp_path):
    t = np.arange(201) * 0.1
    tracks = [_track(0, 60 + 10 * t), _track(1, 30 + 10 * t + 0.5 * np.sin(t)), _track(2, 10 * t)]
    save_tracks(tracks, tmp_path / "tracks.csv")
    save_centerline(Centerline.from_points([[-50.0, 0.0], [500.0, 0.0]]), tmp_path / "cl.csv")
    return str(tmp_path / "tracks.csv"), str(tmp_path / "cl.csv")


def test_ingest_three_tracks_deterministic(tmp_path):
    tr, cl = _three_tracks(tmp_path)
    out = []
    for i in range(2):
        d = tmp_path / f"run{i}"
        assert cli.main(["ingest", "--tracks", tr, "--centerlines", cl, "--out-dir", str(d), "--k-codebook", "3"]) == 0
        out.append((d / "manifest.json").read_text())
    assert out[0] == out[1]
    assert json.loads(out[0])["n_episodes"] == 2


def test_test_set_caps(tmp_path):
    d = tmp_path / "caps"
    assert cli.main(["synth", "--out-dir", str(d), "--n-episodes", "40", "--episode-duration", "10",
                     "--same-lane-cap", "5", "--new-lanes", "1", "--new-lane-cap", "3", "--k-codebook", "4"]) == 0
    man = json.loads((d / "manifest.json").read_text())
    assert man["n_same_lane_test"] == 5 and man["n_new_lane_test"] == 3


def test_train_evaluate_report(workspace):
    for model in ("idm", "bc-mlp", "bc-rnn", "aida"):
        assert run(workspace, "train", "--model", model) == 0
    p = idm.IdmParams.load(workspace / "models" / "idm" / "seed_0.txt")
    assert p.n_params == 6
    _, header = aida.load_params(workspace / "models" / "aida" / "seed_1.npz")
    assert header["lambda1"] == 1.0 and header["lambda2"] == 0.1
    assert (workspace / "models" / "aida" / "loss_seed_0.csv").exists()

    for model in ("idm", "bc-mlp", "bc-rnn", "aida", "aida-mpc"):
        assert run(workspace, "evaluate", "--model", model) == 0
        rows = read_rows(workspace / "eval" / model / "summary.csv")
        assert tuple(rows[0]) == REPORT_COLUMNS
        assert (workspace / "eval" / model / "config.txt").exists()
    mpc = read_rows(workspace / "eval" / "aida-mpc" / "same_lane_seed0.csv")
    assert {"ade", "collision"} <= set(mpc[0])

    assert run(workspace, "diagnose") == 0
    diag = workspace / "diagnostics" / "seed_0"
    assert (diag / "scatter_d_dv_state.svg").exists() and (diag / "trajectory_0000.beliefs.svg").exists()

    assert run(workspace, "report") == 0
    tests = read_rows(workspace / "report" / "tests.csv")
    assert {t["model_b"] for t in tests} >= {"idm"}
    counts = {r["model"]: r for r in read_rows(workspace / "report" / "param_counts.csv")}
    assert counts["idm"]["analytic"] == counts["idm"]["published"] == "6"
    assert (workspace / "report" / "config.txt").exists()


def test_train_is_deterministic(workspace, tmp_path):
    import shutil

    ws = tmp_path / "again"
    shutil.copytree(workspace, ws, ignore=shutil.ignore_patterns("models", "eval", "report", "diagnostics"))
    for model in ("aida", "bc-mlp"):
        assert run(ws, "train", "--model", model, "--seeds", "0") == 0
        assert run(workspace, "train", "--model", model, "--seeds", "0") == 0
        a = np.load(ws / "models" / model / "seed_0.npz")
        b = np.load(workspace / "models" / model / "seed_0.npz")
        for k in a.files:
            assert a[k].tobytes() == b[k].tobytes()
        assert (ws / "models" / model / "loss_seed_0.csv").read_bytes() == \
            (workspace / "models" / model / "loss_seed_0.csv").read_bytes()


def test_missing_checkpoint(tmp_path, workspace):
    import shutil

    ws = tmp_path / "nockpt"
    shutil.copytree(workspace, ws, ignore=shutil.ignore_patterns("models"))
    assert run(ws, "evaluate", "--model", "idm") == cli.EXIT_DATA
