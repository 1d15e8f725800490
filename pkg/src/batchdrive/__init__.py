"""Offline RL on small driving simulators: batch-constrained Q-learning with
noisy perturbation networks and a jointly learned Lyapunov certificate."""

__version__ = "0.1.0"
