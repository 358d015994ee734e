"""Desk-scale environments, softmax policy and PPO."""

from .envs import ENVIRONMENTS, ToyEnv, make_env, reencode
from .policy import SoftmaxPolicy

__all__ = ["ENVIRONMENTS", "SoftmaxPolicy", "ToyEnv", "make_env", "reencode"]
