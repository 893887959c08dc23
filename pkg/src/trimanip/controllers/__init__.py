"""The three structured controllers plus shared helpers.

Each controller follows the same episode-facing protocol: a wrapper object
with a `control_rate_hz` attribute, `reset(obs)` called once on the first
observation, and `tick(obs) -> torque (9,)` called at the declared rate.
"""

from .common import resolve_grasp
from .cpc import CpcController, CpcParams
from .cic import CicController, CicParams
from .mp import MpController, MpParams

__all__ = [
    "resolve_grasp",
    "CpcController",
    "CpcParams",
    "CicController",
    "CicParams",
    "MpController",
    "MpParams",
]
