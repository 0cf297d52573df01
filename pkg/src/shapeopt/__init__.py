"""Shape differentiation and shape optimization on 2D triangular meshes."""

from . import cli, fem, linalg, mesh, optimize, shapecalc, symbolic, verify

__all__ = ["cli", "fem", "linalg", "mesh", "optimize", "shapecalc", "symbolic",
           "verify"]
__version__ = "0.1.0"
