"""TSAR: per-synapse regulation for continual learning."""

__version__ = "0.1.0"
