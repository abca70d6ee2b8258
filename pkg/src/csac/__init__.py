"""Cooperative Soft Actor-Critic for sequential subtasks, with a multi-room maze."""

__version__ = "0.1.0"
