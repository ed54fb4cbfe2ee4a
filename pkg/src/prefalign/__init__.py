"""Preference-guided cross-modal embedding alignment at desk scale."""

__version__ = "0.1.0"
