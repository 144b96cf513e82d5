"""Koopman / autoencoder models and MPC for a two-turbine wind farm."""

__version__ = "0.1.0"
