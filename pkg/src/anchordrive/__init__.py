"""Belief-conditioned anchor-diffusion trajectory planner and its
closed-loop desk benchmark."""

__version__ = "0.1.0"
