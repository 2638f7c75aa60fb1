"""Desk-scale fan-beam CT simulation and reconstruction toolkit.

Implements the nonlinear mean-count model ``gain_blur(exp(-project(x)))``,
filtered backprojection, and diffusion posterior sampling in both a baseline
form and a stabilized form (jumpstart initialization, identity Jacobian
shortcut, multi-step ordered-subset likelihood updates with Adam).  Prior
score models are analytic (Gaussian / Gaussian mixture) so every sampler
component can be checked against closed forms.
"""

from deskct.grid import ImageGrid
from deskct.geometry import FanBeamGeometry, FanBeamProjector, GainBlurOperator
from deskct.forward import Measurement, SubsetPartition
from deskct.schedule import NoiseSchedule, make_linear_schedule
from deskct.scores import GaussianPrior, GmmPrior
from deskct.samplers import SamplerConfig, RunEnsemble

__version__ = "0.1.0"

__all__ = [
    "ImageGrid",
    "FanBeamGeometry",
    "FanBeamProjector",
    "GainBlurOperator",
    "Measurement",
    "SubsetPartition",
    "NoiseSchedule",
    "make_linear_schedule",
    "GaussianPrior",
    "GmmPrior",
    "SamplerConfig",
    "RunEnsemble",
]
