"""Planar hand-manipulation learning testbed: a reinforcement-learned
tracker scoped by adaptive termination envelopes against imperfect
demonstrations, distilled into a partial-observation latent-skill
controller."""

__version__ = "0.1.0"
