"""Datamodel-based training-data selection for imitation learning."""

__version__ = "0.1.0"
