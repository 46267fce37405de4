"""Propensity-caliper cross-domain matching with an online consistency trainer."""

from .core import EmbeddingSet, Filtered, MatchRecord, OkapiError, load_embeddings, save_embeddings
from .matcher import CaliperParams, brute_force_nn, caliper_nn, matched_samples
from .propensity import PropensityModel, fit_offline, score

__version__ = "0.1.0"
