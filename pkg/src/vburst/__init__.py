"""Multi-task vocal burst analysis toolkit.

Raw-waveform CNN embedders trained from scratch on numpy, zero-frequency
filtering for excitation analysis, feed-forward multi-task heads for joint
emotion intensity, age, and country prediction, and challenge-style scoring.
"""

__version__ = "0.1.0"
