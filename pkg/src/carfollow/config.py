"""Flat ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

MODEL_KINDS = ("idm", "bc-mlp", "bc-rnn", "aida", "aida-mpc")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    tracks: str = ""
    centerlines: str = ""
    out_dir: str = "run"
    # data
    lane_width: float = 3.5
    max_headway: float = 60.0
    min_duration: float = 5.0
    k_codebook: int = 15
    split_ratio: float = 0.7
    split_seed: int = 0
    new_lanes: str = ""
    same_lane_cap: int = 100
    new_lane_cap: int = 75
    # synthetic data
    n_episodes: int = 200
    episode_duration: float = 15.0
    noise_std: float = 0.05
    synth_seed: int = 0
    synth_lanes: int = 2
    # models
    model: str = "aida"
    seeds: str = "0-14"
    lambda1: float = 1.0
    lambda2: float = 0.1
    n_states: int = 20
    n_actions: int = 15
    h_max: int = 30
    aida_steps: int = 300
    aida_lr: float = 0.05
    bc_epochs: int = 200
    bc_lr: float = 1e-3
    a_min: float = -8.0
    a_max: float = 5.0
    # evaluation
    suites: str = "offline,online"
    cem_horizon: int = 6
    cem_samples: int = 50
    cem_elites: int = 5
    cem_iterations: int = 20
    n_samples: int = 200
    diag_trajectories: int = 5
    pairs: str = "aida:idm,aida:bc-mlp,aida:bc-rnn"
    workers: int = 1

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {', '.join(MODEL_KINDS)}; got {self.model!r}")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if self.a_min >= self.a_max:
            raise ConfigError("a_min must be below a_max")
        self.seed_list()

    def seed_list(self) -> list[int]:
        out = []
        for part in filter(None, (p.strip() for p in str(self.seeds).split(","))):
            lo, sep, hi = part.partition("-")
            try:
                out.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
            except ValueError:
                raise ConfigError(f"bad seed list {self.seeds!r}") from None
        if not out:
            raise ConfigError("empty seed list")
        return out

    def new_lane_ids(self) -> list[int]:
        return [int(x) for x in str(self.new_lanes).split(",") if x.strip()]

    def centerline_paths(self) -> list[str]:
        return [x.strip() for x in self.centerlines.split(",") if x.strip()]

    def model_pairs(self) -> list[tuple[str, str]]:
        out = []
        for p in filter(None, (x.strip() for x in self.pairs.split(","))):
            a, _, b = p.partition(":")
            if not b:
                raise ConfigError(f"bad model pair {p!r}")
            out.append((a, b))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    def write(self, directory) -> Path:
        path = Path(directory) / "config.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, value: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from None
    return value.strip()


def parse_config_text(text: str) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected 'key = value'")
        values[key.strip()] = coerce(key.strip(), value.strip())
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, str(v))
    return RunConfig(**values)
