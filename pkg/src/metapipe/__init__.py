"""Run-time configuration of modular pipelines with contextual bandits."""

__version__ = "0.1.0"
