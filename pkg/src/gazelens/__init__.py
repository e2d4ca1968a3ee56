"""Scanpath images and CNNs for predicting perceived relevance from eye movements."""

__version__ = "0.1.0"

from .core import Fixation, GazeSample, RelevanceLabel, Scanpath, TrialRecord  # noqa: E402
from .errors import GazeLensError  # noqa: E402

__all__ = ["Fixation", "GazeSample", "GazeLensError", "RelevanceLabel", "Scanpath", "TrialRecord", "__version__"]
