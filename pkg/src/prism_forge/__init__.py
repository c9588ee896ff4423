"""Desk-scale real-to-sim manipulation pipeline: scene grounding, pose
refinement, projection-relationship reward learning, and BC-regularized
actor-critic training, all deterministic from a single master seed."""

__version__ = "0.1.0"
