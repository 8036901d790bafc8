"""Command-line front end: ``carfollow {ingest,synth,train,evaluate,diagnose,report}``.

Everything lives under ``out_dir``::

    episodes/  codebook.json  split.json  manifest.json     (ingest)
    tracks.csv  centerline_*.csv  generator.txt            (synth)
    models/<model>/seed_<k>.*  loss_seed_<k>.csv           (train)
    eval/<model>/<condition>_seed<k>.csv  summary.csv      (evaluate)
    diagnostics/seed_<k>/                                  (diagnose)
    report/summary.csv  tests.csv  param_counts.csv        (report)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import aida, bc, evaluation, idm, sim
from .config import ConfigError, RunConfig, load_config
from .data import (
    DatasetSplit,
    FeatureError,
    TrackFormatError,
    fit_action_codebook,
    load_centerline,
    load_episodes,
    load_tracks,
    random_profiles,
    save_centerline,
    save_episodes,
    save_tracks,
    segment_episodes,
    split_episodes,
    synth_generate,
    synth_tracks,
)
from .data.codebook import ActionCodebook, CodebookError
from .data.synth import SynthError
from .data.tracks import Centerline

log = logging.getLogger("carfollow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3
CONDITIONS = ("same_lane", "new_lane")
SPLIT_PART = {"same_lane": "same_lane_test", "new_lane": "new_lane_test"}


class DataError(RuntimeError):
    pass


class TrainFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# workspace helpers


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir)


def _load_workspace(cfg: RunConfig):
    root = _out(cfg)
    try:
        episodes = load_episodes(root / "episodes")
        codebook = ActionCodebook.load(root / "codebook.json")
        split = DatasetSplit.from_json((root / "split.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"missing ingest output ({exc}); run 'ingest' or 'synth' first") from exc
    if not episodes:
        raise DataError(f"no episodes under {root / 'episodes'}")
    return episodes, codebook, split


def _checkpoint_path(cfg: RunConfig, model: str, seed: int) -> Path:
    suffix = {"idm": ".txt", "bc-mlp": ".npz", "bc-rnn": ".npz", "aida": ".npz"}[model]
    return _out(cfg) / "models" / model / f"seed_{seed}{suffix}"


def load_model(cfg: RunConfig, model: str, seed: int):
    base = "aida" if model == "aida-mpc" else model
    path = _checkpoint_path(cfg, base, seed)
    if not path.exists():
        raise DataError(f"missing checkpoint for seed {seed}: {path}")
    if base == "idm":
        return idm.IdmParams.load(path)
    if base == "aida":
        return aida.load_params(path)[0]
    return bc.load_policy(path)


# ---------------------------------------------------------------------------
# ingest / synth


def ingest_episodes(cfg: RunConfig, episodes, root: Path) -> dict:
    if not episodes:
        raise DataError("no episodes left after filtering")
    split = split_episodes(
        episodes, cfg.split_ratio, cfg.split_seed, cfg.new_lane_ids(),
        same_lane_cap=cfg.same_lane_cap or None, new_lane_cap=cfg.new_lane_cap or None,
    )
    acc = np.concatenate([e.a for e in split.select(episodes, "train")])
    k_max = min(cfg.k_codebook, len(acc) // 10)
    if k_max < 1:
        raise DataError(f"only {len(acc)} training frames; too few to fit the action codebook")
    codebook = fit_action_codebook(acc, k_max=k_max, seed=cfg.split_seed)
    episodes = [e.with_actions(codebook.discretize(e.a)) for e in episodes]
    root.mkdir(parents=True, exist_ok=True)
    for old in (root / "episodes").glob("episode_*"):
        old.unlink()
    save_episodes(episodes, root / "episodes")
    codebook.save(root / "codebook.json")
    (root / "split.json").write_text(split.to_json())
    manifest = {
        "n_episodes": len(episodes),
        "n_train": len(split.train),
        "n_same_lane_test": len(split.same_lane_test),
        "n_new_lane_test": len(split.new_lane_test),
        "n_frames": int(sum(len(e) for e in episodes)),
        "mean_duration_s": float(np.mean([e.duration for e in episodes])),
        "codebook_k": codebook.k,
        "codebook_bic": codebook.bic,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    cfg.write(root)
    return manifest


def cmd_ingest(cfg: RunConfig) -> int:
    if not cfg.tracks or not cfg.centerline_paths():
        raise ConfigError("ingest needs 'tracks' and 'centerlines'")
    tracks = load_tracks(cfg.tracks)
    centerlines = [load_centerline(p) for p in cfg.centerline_paths()]
    episodes = segment_episodes(tracks, centerlines, cfg.lane_width, cfg.max_headway, cfg.min_duration)
    manifest = ingest_episodes(cfg, episodes, _out(cfg))
    print(json.dumps(manifest, indent=1))
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    """IDM-generated episodes laid out as raw tracks on straight parallel lanes."""
    root = _out(cfg)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.synth_seed)
    gen = idm.IdmParams(sigma=cfg.noise_std) if cfg.noise_std > 0 else idm.IdmParams()
    profiles = random_profiles(cfg.n_episodes, rng, cfg.episode_duration)
    ds = synth_generate(gen, profiles, cfg.noise_std, seed=cfg.synth_seed)
    lanes = tuple(cfg.lane_width * i for i in range(max(1, cfg.synth_lanes)))
    tracks = synth_tracks(ds, lane_y=lanes)
    save_tracks(tracks, root / "tracks.csv")
    x_max = max(float(t.x.max()) for t in tracks) + 100.0
    paths = []
    for i, y in enumerate(lanes):
        p = root / f"centerline_{i}.csv"
        save_centerline(Centerline.from_points([[-100.0, y], [x_max, y]]), p)
        paths.append(str(p))
    gen.save(root / "generator.txt")
    cfg.tracks = str(root / "tracks.csv")
    cfg.centerlines = ",".join(paths)
    # episodes come straight from the generator: the straight-lane projection is
    # exact, so running the Frenet pipeline would reproduce them
    eps = [replace(e, lane=i % len(lanes)) for i, e in enumerate(ds.episodes)]
    manifest = ingest_episodes(cfg, eps, root)
    print(json.dumps(manifest, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _train_one(cfg: RunConfig, model: str, seed: int, train_eps, codebook: ActionCodebook) -> dict:
    path = _checkpoint_path(cfg, model, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        if model == "idm":
            fit = idm.fit(train_eps)
            fit.params.save(path)
            curve = fit.loss_curve
        elif model in ("bc-mlp", "bc-rnn"):
            cls = bc.MlpPolicy if model == "bc-mlp" else bc.GruPolicy
            policy = cls.init(seed, n_actions=codebook.k)
            res = bc.train(policy, train_eps, epochs=cfg.bc_epochs, lr=cfg.bc_lr, seed=seed)
            bc.save_policy(res.policy, path)
            curve = res.train_loss
        else:
            fit = aida.train(train_eps, lambda1=cfg.lambda1, lambda2=cfg.lambda2, seed=seed, steps=cfg.aida_steps,
                             lr=cfg.aida_lr, n_states=cfg.n_states, h_max=cfg.h_max, n_actions=codebook.k)
            aida.save_params(fit.params, path, cfg.lambda1, cfg.lambda2, codebook, {"seed": seed})
            curve = fit.loss_curve
    except (bc.TrainingError, aida.AidaError, idm.IdmFitError, FloatingPointError) as exc:
        raise TrainFailure(f"seed {seed}: {exc}") from exc
    evaluation.write_rows(path.parent / f"loss_seed_{seed}.csv", ["step", "loss"], list(enumerate(curve)))
    return {"seed": seed, "checkpoint": str(path), "final_loss": float(curve[-1]) if len(curve) else None}


def _run_seeds(cfg: RunConfig, fn, model: str, seeds, *rest) -> list:
    """``fn(cfg, model, seed, *rest)`` for every seed, in worker processes when configured."""
    if cfg.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            futures = [pool.submit(fn, cfg, model, s, *rest) for s in seeds]
            return [f.result() for f in futures]
    return [fn(cfg, model, s, *rest) for s in seeds]


def cmd_train(cfg: RunConfig) -> int:
    if cfg.model == "aida-mpc":
        raise ConfigError("aida-mpc reuses the aida checkpoints; train 'aida' instead")
    episodes, codebook, split = _load_workspace(cfg)
    if cfg.model == "aida" and codebook.k != cfg.n_actions:
        log.info("action dimension follows the codebook: %d components (n_actions = %d)", codebook.k, cfg.n_actions)
    train_eps = split.select(episodes, "train")
    results = _run_seeds(cfg, _train_one, cfg.model, cfg.seed_list(), train_eps, codebook)
    cfg.write(_out(cfg) / "models" / cfg.model)
    for r in results:
        print(f"seed {r['seed']}: loss {r['final_loss']:.6g} -> {r['checkpoint']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def make_controller(cfg: RunConfig, model: str, obj, codebook):
    if model == "idm":
        return sim.IdmController(obj)
    if model in ("bc-mlp", "bc-rnn"):
        return sim.BcController(obj, codebook)
    if model == "aida":
        return sim.AidaController(obj, codebook)
    cem = sim.CemConfig(cfg.cem_horizon, cfg.cem_samples, cfg.cem_elites, cfg.cem_iterations)
    return sim.AidaMpcController(obj, cem)


def _evaluate_one(cfg: RunConfig, model: str, seed: int, tests: dict, codebook) -> list[dict]:
    obj = load_model(cfg, model, seed)
    suites = {s.strip() for s in cfg.suites.split(",")}
    out_dir = _out(cfg) / "eval" / model
    records = []
    for cond, eps in tests.items():
        metrics = {}
        if "offline" in suites and model != "aida-mpc":
            metrics["mae"] = evaluation.offline_mae(obj, eps, codebook, seed, (cfg.a_min, cfg.a_max))
        if "online" in suites:
            ctrl = make_controller(cfg, model, obj, codebook)
            traces = [sim.run_closed_loop(ctrl, e, seed * 100003 + i, (cfg.a_min, cfg.a_max)) for i, e in enumerate(eps)]
            om = evaluation.online_metrics(traces, eps)
            metrics["ade"], metrics["collision"] = om.ade, om.collisions.astype(float)
        if metrics:
            evaluation.write_trajectory_metrics(out_dir / f"{cond}_seed{seed}.csv", model, cond, seed, metrics)
            records.append({"model": model, "condition": cond, "seed": seed, "metrics": metrics})
    return records


def cmd_evaluate(cfg: RunConfig) -> int:
    episodes, codebook, split = _load_workspace(cfg)
    tests = {c: split.select(episodes, SPLIT_PART[c]) for c in CONDITIONS}
    tests = {c: e for c, e in tests.items() if len(e) >= 4}
    if not tests:
        raise DataError("test sets are empty")
    seeds = cfg.seed_list()
    for s in seeds:
        load_model(cfg, cfg.model, s)  # fail fast on a missing checkpoint
    per = _run_seeds(cfg, _evaluate_one, cfg.model, seeds, tests, codebook)
    records = [r for group in per for r in group]
    rows = evaluation.summarize(records)
    out_dir = _out(cfg) / "eval" / cfg.model
    evaluation.write_rows(out_dir / "summary.csv", evaluation.REPORT_COLUMNS, rows)
    cfg.write(out_dir)
    for model, cond, seed, metric, value in rows:
        print(f"{model:9s} {cond:10s} seed {seed:2d} {metric:15s} {value:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose / report


def cmd_diagnose(cfg: RunConfig) -> int:
    episodes, codebook, split = _load_workspace(cfg)
    tests = split.select(episodes, "same_lane_test")[: cfg.diag_trajectories]
    for seed in cfg.seed_list():
        params = load_model(cfg, "aida", seed)
        out = _out(cfg) / "diagnostics" / f"seed_{seed}"
        files = evaluation.export_diagnostics(params, codebook, tests, out, cfg.n_samples, seed)
        smp = evaluation.read_rows(out / "obs_samples.csv")
        cols = {k: np.array([float(r[k]) for r in smp]) for k in ("d", "dv", "tau_inv", "pref_logprob", "action")}
        state = np.array([int(r["state_rank"]) for r in smp])
        for x, y in (("d", "dv"), ("dv", "tau_inv"), ("d", "tau_inv")):
            evaluation.svg_scatter(out / f"scatter_{x}_{y}_state.svg", cols[x], cols[y], state, x, y)
            evaluation.svg_scatter(out / f"scatter_{x}_{y}_pref.svg", cols[x], cols[y], cols["pref_logprob"], x, y)
            evaluation.svg_scatter(out / f"scatter_{x}_{y}_action.svg", cols[x], cols[y], cols["action"], x, y)
        for p in files:
            if p.name.startswith("trajectory_"):
                rows = evaluation.read_rows(p)
                b = np.array([[float(r[f"state_{j}"]) for j in range(params.n_states)] for r in rows])
                evaluation.svg_heatmap(p.with_suffix(".beliefs.svg"), b.T)
        cfg.write(out)
        print(f"seed {seed}: {len(files)} files in {out}")
    return EXIT_OK


def param_counts(codebook_k: int = 15) -> list[tuple]:
    return [
        ("idm", idm.IdmParams().n_params, bc.PAPER_PARAM_COUNTS["idm"], ""),
        ("bc-mlp", bc.analytic_param_count("mlp", n_actions=codebook_k), bc.PAPER_PARAM_COUNTS["mlp"],
         "stated layer sizes do not reproduce the published count"),
        ("bc-rnn", bc.analytic_param_count("gru", n_actions=codebook_k), bc.PAPER_PARAM_COUNTS["gru"],
         "stated layer sizes do not reproduce the published count"),
        ("aida", aida.analytic_param_count(n_actions=codebook_k), bc.PAPER_PARAM_COUNTS["aida"],
         "published count includes a normalizing-flow observation network not built here"),
    ]


def cmd_report(cfg: RunConfig) -> int:
    root = _out(cfg)
    rows = []
    for path in sorted((root / "eval").glob("*/summary.csv")):
        rows += [(r["model"], r["condition"], int(r["seed"]), r["metric"], float(r["value"]))
                 for r in evaluation.read_rows(path)]
    if not rows:
        raise DataError("no evaluation summaries found; run 'evaluate' first")
    out = root / "report"
    evaluation.write_rows(out / "summary.csv", evaluation.REPORT_COLUMNS, rows)
    tests = evaluation.comparison_table(rows, cfg.model_pairs())
    evaluation.write_rows(out / "tests.csv", evaluation.TEST_COLUMNS, tests)
    evaluation.write_rows(out / "param_counts.csv", ["model", "analytic", "published", "note"], param_counts(cfg.n_actions))
    agg = {}
    for model, cond, _, metric, value in rows:
        agg.setdefault((model, cond, metric), []).append(value)
    table = [(m, c, k, float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0, len(v))
             for (m, c, k), v in sorted(agg.items())]
    evaluation.write_rows(out / "table.csv", ["model", "condition", "metric", "mean", "std", "n_seeds"], table)
    cfg.write(out)
    for m, c, k, mu, sd, n in table:
        print(f"{m:9s} {c:10s} {k:15s} {mu:.4f} +/- {sd:.4f} (n={n})")
    for t in tests:
        print(f"{t[1]:10s} {t[0]:15s} {t[2]} vs {t[3]}: t={t[6]:.3f} df={t[7]:.2f} p={t[9]:.4g}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="carfollow", description="Car-following model pipeline.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat 'key = value' configuration file")
    parser.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar=f.type.upper())
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"carfollow: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TrackFormatError, FeatureError, CodebookError, SynthError, FileNotFoundError,
            ValueError) as exc:
        print(f"carfollow: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainFailure as exc:
        print(f"carfollow: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
