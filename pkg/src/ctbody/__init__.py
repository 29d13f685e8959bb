"""Body mesh reconstruction from a CT volume (shape) and a top-view depth map (pose)."""

__version__ = "0.1.0"
