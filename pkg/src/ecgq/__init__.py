"""ECG beat classification with tabular Q-learning over P-wave/PR-interval classes."""

__version__ = "0.1.0"
