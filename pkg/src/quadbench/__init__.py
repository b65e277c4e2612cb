"""Quadrotor action-space benchmark: simulator, actuation layers, trajectory
generation, a batched RL environment, PPO, MPC baselines and the experiment
harness."""

from __future__ import annotations

__version__ = "0.1.0"
