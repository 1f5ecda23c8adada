"""Observation-driven correction of gridded NWP surface winds.

A set-based attention model ingests the latest irregular in-situ wind
observations paired with their forecast values, and emits corrected winds
at arbitrary query coordinates.  The package also ships the colocation
pipeline, a synthetic verification world, training, evaluation, and a CLI.
"""

__version__ = "0.1.0"

from .types import GeoCoord, PlatformType, TimeStamp, WindVector

__all__ = ["GeoCoord", "PlatformType", "TimeStamp", "WindVector", "__version__"]
