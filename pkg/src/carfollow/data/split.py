"""Train / same-lane test / new-lane test partition of episodes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .episodes import Episode


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    same_lane_test: tuple[int, ...]
    new_lane_test: tuple[int, ...]

    def __post_init__(self):
        a, b, c = set(self.train), set(self.same_lane_test), set(self.new_lane_test)
        if a & b or a & c or b & c:
            raise ValueError("split partitions overlap")

    def to_json(self) -> str:
        return json.dumps({k: list(v) for k, v in asdict(self).items()}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        d = json.loads(text)
        return cls(tuple(d["train"]), tuple(d["same_lane_test"]), tuple(d["new_lane_test"]))

    def select(self, episodes, part: str) -> list[Episode]:
        return [episodes[i] for i in getattr(self, part)]


def split_episodes(
    episodes,
    train_ratio: float = 0.7,
    seed: int = 0,
    new_lanes=(),
    same_lane_cap: int | None = None,
    new_lane_cap: int | None = None,
    same_lane_min_duration: float = 0.0,
    new_lane_min_duration: float = 0.0,
) -> DatasetSplit:
    """Shuffle same-lane episodes into train/test at ``train_ratio``.

    Episodes in ``new_lanes`` form the new-lane test set. The caps and minimum
    durations only thin out the test sets (the held-out remainder is unused).
    """
    rng = np.random.default_rng(seed)
    new_lanes = set(new_lanes)
    same = [i for i, e in enumerate(episodes) if e.lane not in new_lanes]
    new = [i for i, e in enumerate(episodes) if e.lane in new_lanes]
    same = [same[i] for i in rng.permutation(len(same))]
    n_train = int(round(train_ratio * len(same)))
    train, test = same[:n_train], same[n_train:]

    def thin(ids, min_dur, cap):
        ids = [i for i in ids if episodes[i].duration >= min_dur - 1e-9]
        if cap is not None and len(ids) > cap:
            ids = [ids[i] for i in sorted(rng.choice(len(ids), size=cap, replace=False))]
        return ids

    test = thin(test, same_lane_min_duration, same_lane_cap)
    new = thin([new[i] for i in rng.permutation(len(new))], new_lane_min_duration, new_lane_cap)
    return DatasetSplit(tuple(sorted(train)), tuple(sorted(test)), tuple(sorted(new)))
