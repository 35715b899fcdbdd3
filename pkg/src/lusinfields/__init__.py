"""Vector fields with exactly prescribed divergence, and diffeomorphisms with
exactly prescribed Jacobian determinant, on large compact pieces of singular
measures, with certified Lipschitz and sup-norm bounds."""

__version__ = "0.1.0"

from .geometry import (
    Box,
    Cone,
    DirectionNet,
    Subspace,
    build_direction_net,
    c_alpha,
    subspace_transverse,
    verify_net,
)

__all__ = [
    "Box",
    "Cone",
    "DirectionNet",
    "Subspace",
    "build_direction_net",
    "c_alpha",
    "subspace_transverse",
    "verify_net",
]
