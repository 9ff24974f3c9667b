"""Rigid multi-body docking as a cooperative game.

Equilibria are computed either by Riemannian gradient play on a (surrogate)
potential or by reverse diffusion over the chains' roto-translation actions.
"""

from .geom import RigidAction, TangentVector, apply_action, complex_rmsd, kabsch_align, tm_score
from .structio import AssemblyState, ChainStructure, DecoySet

__all__ = [
    "AssemblyState",
    "ChainStructure",
    "DecoySet",
    "RigidAction",
    "TangentVector",
    "apply_action",
    "complex_rmsd",
    "kabsch_align",
    "tm_score",
]
__version__ = "0.1.0"
