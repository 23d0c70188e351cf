"""Activity-based mobility demand generation from OpenStreetMap data."""

__version__ = "0.1.0"

PURPOSES = ("home", "work", "school", "shopping", "other")
