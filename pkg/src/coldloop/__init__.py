"""Feedback cooling of a sideband-unresolved optomechanical resonator: loop
model, time-domain simulator, spectral inference and sideband thermometry."""

__version__ = "0.1.0"
