"""Pipeline stages; importing the package registers every stage."""

from . import bbn, dense_dqn, generate, reward_filter  # noqa: F401
from .base import BaseStage, RunContext, StageName, StageResult
from .registry import stages

__all__ = ["BaseStage", "RunContext", "StageName", "StageResult", "stages"]
