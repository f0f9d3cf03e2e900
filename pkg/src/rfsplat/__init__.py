"""Differentiable complex-valued Gaussian splatting for RF scenes.

Learns a primitive-based RF scene representation from (transmitter
position, received signal) samples and synthesizes spatial power spectra,
RSSI, and complex channel responses at new transmitter positions. Training
uses hand-derived analytic gradients throughout.
"""

import os as _os
import sys as _sys

# The compiled kernels honor a per-call worker count up to numba's thread
# pool size, which is fixed at pool launch. Raise the ceiling above the core
# count (oversubscription is allowed) unless numba is already configured.
if "numba" not in _sys.modules:
    _os.environ.setdefault(
        "NUMBA_NUM_THREADS", str(max(16, _os.cpu_count() or 1))
    )

from . import _kernels  # noqa: E402  (fixes numba config before first compile)
from .errors import (  # noqa: E402
    ConfigError,
    ContractViolationError,
    DataError,
    DegenerateCovarianceError,
    GeometryError,
    NonFiniteGradientError,
    RFSplatError,
    ShapeError,
)
from .scene import (  # noqa: E402
    Box,
    GaussianPrimitive,
    RFScene,
    SceneDefaults,
    covariance,
    cube_init,
    gaussian_density,
)

__all__ = [
    "Box",
    "GaussianPrimitive",
    "RFScene",
    "SceneDefaults",
    "covariance",
    "cube_init",
    "gaussian_density",
    "RFSplatError",
    "ConfigError",
    "ContractViolationError",
    "DataError",
    "DegenerateCovarianceError",
    "GeometryError",
    "NonFiniteGradientError",
    "ShapeError",
]

__version__ = "0.1.0"
