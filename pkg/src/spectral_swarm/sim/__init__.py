from .channel import Channel, broadcast_round
from .config import ConfigError, Placement, PROFILES, PROFILE_SHAPES, SimConfig, profile_config
from .engine import RunResult, majority_vote, run
from .led import led_color
from .motion import MotionParams, MotionState, advance, run_and_tumble_step

__all__ = ["Channel", "broadcast_round", "ConfigError", "Placement", "PROFILES", "PROFILE_SHAPES",
           "SimConfig", "profile_config", "RunResult", "majority_vote", "run", "led_color",
           "MotionParams", "MotionState", "advance", "run_and_tumble_step"]
