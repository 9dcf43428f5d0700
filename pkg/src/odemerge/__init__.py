"""Continual model merging along barrier-aware ODE trajectories."""
