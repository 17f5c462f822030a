"""Two-locus mutation-modifier dynamics under rapidly fluctuating selection.

Subpackages cover the shared data model and SDE coefficients (`model`), the
pre-limit simulator with exact telegraph-environment embedding (`prelimit`),
the limiting diffusion with fixation and consistency estimators (`limit`),
closed-form fixation corrections (`theory`), neutral moments with a
coalescent oracle (`moments`), the function-valued dual jump process
(`duality`), and the command-line front end (`cli`).
"""

from .model import (ConfigurationError, FluctselError, InitialCondition,
                    ModelParams, SimplexState, Trajectory)

__all__ = [
    "ConfigurationError",
    "FluctselError",
    "InitialCondition",
    "ModelParams",
    "SimplexState",
    "Trajectory",
]

__version__ = "0.1.0"
