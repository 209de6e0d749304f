"""Differentiable MPM simulation and material parameter identification.

Modules
-------
tensor3      3-vector / 3x3 linear algebra, rotation-variant SVD, duals
materials    constitutive laws, return mappings, friction composition
mpm          the forward simulator (particles, grids, staged time step)
sensitivity  forward-mode parameter gradients through full rollouts
lifting      observations -> simulation-ready interior particles
observe      cameras, silhouettes, chamfer / EMD / mask metrics
losses       the geometry-aligned identification objective
sysid        Adam fitting stages, curriculum, resync, material swaps
bench        synthetic scene generation and evaluation
cli          the `mpmfit` command-line interface
"""

__version__ = "0.1.0"

from . import bench, formats, lifting, losses, materials, mpm, observe, sensitivity, sysid, tensor3  # noqa: F401
from .losses import LossConfig, ObservationSet, loss_id  # noqa: F401
from .materials import MaterialFamily, MaterialParams  # noqa: F401
from .mpm import ObjectGrid, ParticleSet, SimConfig, WorldState, rollout, step  # noqa: F401
from .sysid import Curriculum, FitConfig, FitResult, fit_params, fit_velocity, identify, swap_materials  # noqa: F401
