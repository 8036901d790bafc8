"""Trajectory ingestion, features, episodes, action codebook and synthetic data."""

from .codebook import ActionCodebook, CodebookError, discretize, fit_action_codebook
from .episodes import (
    DT,
    Episode,
    FeatureError,
    compute_features,
    inverse_tau,
    load_episodes,
    save_episodes,
)
from .frenet import FrenetState, ProjectionError, project_frenet, reconstruct
from .segment import segment_episodes
from .split import DatasetSplit, split_episodes
from .synth import LeadProfile, SynthDataset, random_profiles, synth_generate, synth_tracks
from .tracks import Centerline, RawTrack, TrackFormatError, load_centerline, load_tracks, save_centerline, save_tracks

__all__ = [
    "ActionCodebook", "CodebookError", "discretize", "fit_action_codebook",
    "DT", "Episode", "FeatureError", "compute_features", "inverse_tau", "load_episodes", "save_episodes",
    "FrenetState", "ProjectionError", "project_frenet", "reconstruct",
    "segment_episodes", "DatasetSplit", "split_episodes",
    "LeadProfile", "SynthDataset", "random_profiles", "synth_generate", "synth_tracks",
    "Centerline", "RawTrack", "TrackFormatError", "load_centerline", "load_tracks", "save_centerline", "save_tracks",
]
