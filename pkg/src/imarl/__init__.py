"""Inverse multi-agent reinforcement learning laboratory.

Recovers reward functions and policies from demonstration trajectories
using max-entropy guided cost learning on top of an off-policy
actor-critic with remember-and-forget experience replay. Ships a 3-D
zonal swarm model for multi-agent milling experiments and analytic toy
environments for single-agent validation.
"""

__version__ = "0.1.0"
