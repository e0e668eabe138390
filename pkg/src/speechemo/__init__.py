"""Speech emotion recognition from scratch: cleaning, features, HMM and CNN classifiers."""

__version__ = "0.1.0"
