"""Few-shot sound event detection: episodic dataset synthesis, window-level
and proposal-based detectors, and the matching evaluation protocol."""

__version__ = "0.1.0"
