"""Certified two-sided eigenvalue enclosures for -Delta + V with Coulomb potentials.

The package builds graded simplicial meshes on truncated domains, assembles
conforming P1 and nonconforming enriched Crouzeix-Raviart discretizations,
evaluates every explicit constant of the lower-bound chain, and emits
certified enclosures L_k <= lambda_k <= U_k together with convergence and
spectral-separation reports.
"""

from cecrbound.geometry import (
    Domain,
    GradingSpec,
    Mesh,
    build_ball_mesh_3d,
    build_graded_box_mesh_3d,
    build_graded_mesh_2d,
    mesh_quality,
)

__all__ = [
    "Domain",
    "Mesh",
    "GradingSpec",
    "build_graded_mesh_2d",
    "build_ball_mesh_3d",
    "build_graded_box_mesh_3d",
    "mesh_quality",
]

__version__ = "0.1.0"
