"""LED color an agent displays in each stage."""
from __future__ import annotations

from ..geometry import ShapeKind
from ..protocol import UNCLASSIFIED, Stage

MOTION_COLORS = {0: "green", 1: "red"}  # run / tumble


def led_color(stage: Stage, *, tumbling: bool = False, s: float = 0.0, pre_diffusion: bool = False,
              shape: ShapeKind | str | None = None) -> str:
    """``s`` is the state of the first diffusion session; ``shape`` the current classification."""
    if stage in (Stage.SEEDING, Stage.SHORT_WALK):
        return "red" if tumbling else "green"
    if stage is Stage.PRE_DIFFUSION or (stage is Stage.DIFFUSION and pre_diffusion):
        return "white"
    if stage is Stage.DIFFUSION:
        if s > 0:
            return "blue"
        if s < 0:
            return "red"
        return "grey"
    if stage in (Stage.CONSENSUS, Stage.DONE):
        if shape is None or shape == UNCLASSIFIED:
            return "off"
        return ShapeKind.parse(shape).color
    return "off"
