"""Test package for the Neuro-Vesicles engine."""
