"""Principled Bayesian workflow for a hierarchical lognormal reading-time model."""
