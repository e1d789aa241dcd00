"""Sparse assembly of the conforming P1 and enriched Crouzeix-Raviart systems.

The nonconforming space is per-element P1 enriched with the cell bubble,
with degrees of freedom given by face averages and the cell average, so the
face-mean continuity constraint is enforced by sharing face DOFs and the
projected mass/reaction matrices are diagonal in the cell DOFs.  All local
matrices are integrated exactly through the factorial formula for
barycentric monomials and mapped affinely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from cecrbound.geometry import Mesh
from cecrbound.potential import (
    CellField,
    PotentialSpec,
    _batch_diams,
    _batch_measures,
    _batch_point_distances,
    _batch_refine,
    _gl,
    _tri_rule,
    simplex_quad_points,
)

__all__ = [
    "DiscreteSystem",
    "assemble_p1",
    "assemble_ecr",
    "shifted_cecr_matrix",
    "element_face_ids",
    "boundary_vertices",
    "ecr_face_jump_means",
    "ecr_eval_on_element",
]


@dataclass
class DiscreteSystem:
    """Assembled sparse symmetric matrices for one discretization.

    For the ECR space, ``K`` is the broken-gradient stiffness, ``M`` the full
    mass, ``M0`` the projected mass (cell-average slots) and ``C0`` the
    projected reaction for the attached cell field.  For P1, ``CP1`` holds
    the potential matrix with singular quadrature and boundary DOFs are
    eliminated when ``bc == "dirichlet"``.
    """

    space: str                      # "P1" | "ECR"
    bc: str                         # "dirichlet" | "neumann"
    K: sp.csr_matrix
    M: sp.csr_matrix
    M0: sp.csr_matrix | None = None
    C0: sp.csr_matrix | None = None
    CP1: sp.csr_matrix | None = None

    @property
    def n_dof(self) -> int:
        return self.K.shape[0]


# ----------------------------------------------------------------------------
# exact reference integrals
# ----------------------------------------------------------------------------

def _bary_integral(alpha, d: int) -> float:
    """Integral over the unit-volume d-simplex of prod lambda_i^alpha_i."""
    num = math.factorial(d)
    for a in alpha:
        num *= math.factorial(a)
    return num / math.factorial(sum(alpha) + d)


class _Poly:
    """Polynomial in barycentric coordinates as {exponent tuple: coeff}."""

    def __init__(self, terms=None):
        self.terms = dict(terms or {})

    @staticmethod
    def mono(alpha, c=1.0):
        return _Poly({tuple(alpha): c})

    def __add__(self, other):
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out.get(k, 0.0) + v
        return _Poly(out)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _Poly({k: v * other for k, v in self.terms.items()})
        out = {}
        for k1, v1 in self.terms.items():
            for k2, v2 in other.terms.items():
                k = tuple(a + b for a, b in zip(k1, k2))
                out[k] = out.get(k, 0.0) + v1 * v2
        return _Poly(out)

    __rmul__ = __mul__

    def integral(self, d: int) -> float:
        return sum(c * _bary_integral(k, d) for k, c in self.terms.items())


@lru_cache(maxsize=None)
def _ecr_reference(d: int):
    """Reference quantities for the ECR element in dimension d.

    Basis: face functions 1 - d*lambda_i - c_d * bubble and the cell
    function s_d * bubble, where the bubble is the product of all
    barycentric coordinates.  Returns the mass matrix, the stiffness
    coefficient tensor T[i, j, a, b] with
    K_loc = |K| * sum_ab g_ab T[:, :, a, b], and the basis polynomials.
    """
    nv = d + 1
    n_loc = d + 2
    zero = tuple(0 for _ in range(nv))
    one = _Poly.mono(zero)
    lam = [_Poly.mono(tuple(1 if j == i else 0 for j in range(nv))) for i in range(nv)]
    bubble = one
    for i in range(nv):
        bubble = bubble * lam[i]
    bubble_mean = bubble.integral(d)
    c_d = (1.0 / nv) / bubble_mean
    s_d = 1.0 / bubble_mean

    basis = []
    for i in range(nv):
        basis.append(one + (-float(d)) * lam[i] + (-c_d) * bubble)
    basis.append(s_d * bubble)

    # gradient decomposition: grad(phi) = sum_a P[a](lambda) grad(lambda_a)
    bubble_partial = []
    for a in range(nv):
        p = one
        for m in range(nv):
            if m != a:
                p = p * lam[m]
        bubble_partial.append(p)
    grads = []
    for i in range(nv):
        row = []
        for a in range(nv):
            p = (-c_d) * bubble_partial[a]
            if a == i:
                p = p + (-float(d)) * one
            row.append(p)
        grads.append(row)
    grads.append([s_d * bubble_partial[a] for a in range(nv)])

    mass = np.empty((n_loc, n_loc))
    for i in range(n_loc):
        for j in range(n_loc):
            mass[i, j] = (basis[i] * basis[j]).integral(d)
    stiff_T = np.empty((n_loc, n_loc, nv, nv))
    for i in range(n_loc):
        for j in range(n_loc):
            for a in range(nv):
                for b in range(nv):
                    stiff_T[i, j, a, b] = (grads[i][a] * grads[j][b]).integral(d)
    return mass, stiff_T


@lru_cache(maxsize=None)
def _p1_reference(d: int):
    nv = d + 1
    mass = (np.ones((nv, nv)) + np.eye(nv)) * (
        math.factorial(d) / math.factorial(d + 2)
    )
    return mass


def _barycentric_gradients(mesh: Mesh):
    """Per-element gradients of the barycentric coordinates, (ne, d+1, d)."""
    coords = mesh.element_coords()
    d = mesh.dim
    edges = coords[:, 1:, :] - coords[:, :1, :]  # (ne, d, d) rows v_i - v_0
    inv = np.linalg.inv(edges)  # columns are gradients of lambda_1..lambda_d
    grads = np.transpose(inv, (0, 2, 1))  # (ne, d, d): row k = grad lambda_{k+1}
    g0 = -grads.sum(axis=1, keepdims=True)
    return np.concatenate([g0, grads], axis=1)


def element_face_ids(mesh: Mesh) -> np.ndarray:
    """Global face index of the face opposite each local vertex, (ne, d+1)."""
    lookup = {tuple(f): i for i, f in enumerate(np.asarray(mesh.faces))}
    ne, n_loc = mesh.elements.shape
    out = np.empty((ne, n_loc), dtype=np.int64)
    elems = mesh.elements
    for i in range(n_loc):
        sub = np.sort(np.delete(elems, i, axis=1), axis=1)
        for e in range(ne):
            out[e, i] = lookup[tuple(sub[e])]
    return out


def _scatter(rows, cols, vals, n):
    A = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n))
    return A.tocsr()


# ----------------------------------------------------------------------------
# ECR assembly
# ----------------------------------------------------------------------------

def assemble_ecr(mesh: Mesh, ch: CellField) -> "DiscreteSystem":
    """Assemble the enriched Crouzeix-Raviart system for the cell field ch.

    DOFs are interior+boundary face averages followed by cell averages; no
    boundary elimination (natural conditions).  The projected mass and
    reaction act on the cell-average DOFs only, hence are diagonal.
    """
    if ch.mesh is not mesh and len(ch.values) != mesh.num_elements:
        raise ValueError("cell field does not match the mesh")
    d = mesh.dim
    nv = d + 1
    n_loc = d + 2
    nf = mesh.num_faces
    ne = mesh.num_elements
    n = nf + ne

    mass_ref, stiff_T = _ecr_reference(d)
    grads = _barycentric_gradients(mesh)
    gram = np.einsum("ead,ebd->eab", grads, grads)
    k_loc = np.einsum("eab,ijab->eij", gram, stiff_T) * mesh.volume_K[:, None, None]
    m_loc = mass_ref[None, :, :] * mesh.volume_K[:, None, None]

    efids = element_face_ids(mesh)
    dofs = np.concatenate([efids, nf + np.arange(ne, dtype=np.int64)[:, None]], axis=1)
    rows = np.repeat(dofs, n_loc, axis=1)
    cols = np.tile(dofs, (1, n_loc))
    K = _scatter(rows, cols, k_loc, n)
    M = _scatter(rows, cols, m_loc, n)

    cell_ids = nf + np.arange(ne)
    M0 = sp.coo_matrix((mesh.volume_K, (cell_ids, cell_ids)), shape=(n, n)).tocsr()
    C0 = sp.coo_matrix(
        (ch.values * mesh.volume_K, (cell_ids, cell_ids)), shape=(n, n)
    ).tocsr()

    sys = DiscreteSystem(space="ECR", bc="neumann", K=K, M=M, M0=M0, C0=C0)
    sys.mesh = mesh
    sys.ch = ch
    sys.face_offset = 0
    sys.cell_offset = nf
    sys.element_dofs = dofs
    return sys


def shifted_cecr_matrix(sys: DiscreteSystem, sigma: float) -> sp.csr_matrix:
    """K + C0 + sigma * M0 (reaction-slot shift)."""
    if sys.space != "ECR":
        raise ValueError("shifted form is defined for the ECR system")
    return (sys.K + sys.C0 + sigma * sys.M0).tocsr()


# ----------------------------------------------------------------------------
# P1 assembly
# ----------------------------------------------------------------------------

def _p1_potential_local(mesh: Mesh, pot: PotentialSpec) -> np.ndarray:
    """Per-element integrals of V * lambda_i * lambda_j, (ne, d+1, d+1).

    Far elements use tensor Gauss rules tiered by the distance ratio,
    elements touching a center use the radial reduction (the 1/r weight is
    absorbed by the volume element), and the remaining near elements use
    deterministic distance-based subdivision.
    """
    d = mesh.dim
    nv = d + 1
    coords = mesh.element_coords()
    ne = mesh.num_elements
    out = np.zeros((ne, nv, nv))
    from cecrbound.geometry import _point_simplex_distance

    for a, Z in zip(pot.centers_array(), pot.charges):
        vdist = np.linalg.norm(coords - a, axis=2).min(axis=1)
        singular = vdist <= 1e-12 * np.maximum(mesh.h_K, 1.0)
        r = _point_simplex_distance(a, mesh.vertices, mesh.elements)
        near = (~singular) & (r < 2.0 * mesh.h_K)
        ratio = r / np.maximum(mesh.h_K, 1e-300)
        mid = (~singular) & (~near) & (ratio < 4.0)
        far = (~singular) & (~near) & (ratio >= 4.0)

        for mask, order in ((mid, 8), (far, 5)):
            if not np.any(mask):
                continue
            idx = np.nonzero(mask)[0]
            lam, w = _bary_rule(d, order)
            pts = np.einsum("pl,eld->epd", lam, coords[idx])
            vv = w[None, :] / np.linalg.norm(pts - a, axis=2)
            lamlam = np.einsum("pi,pj->pij", lam, lam)
            out[idx] -= Z * np.einsum("ep,pij->eij", vv, lamlam) * mesh.volume_K[idx, None, None]

        if np.any(singular):
            for e in np.nonzero(singular)[0]:
                out[e] -= Z * _singular_weighted_p1(coords[e], a, mesh.volume_K[e])
        if np.any(near):
            for e in np.nonzero(near)[0]:
                out[e] -= Z * _near_weighted_p1(coords[e], a)
    return out


@lru_cache(maxsize=None)
def _bary_rule(d: int, n: int):
    """Barycentric points and normalized weights of the collapsed tensor rule."""
    if d == 2:
        l1, l2, w = _tri_rule(n)
        lam = np.column_stack([1.0 - l1 - l2, l1, l2])
        return lam, w
    from cecrbound.potential import _tet_rule

    l1, l2, l3, w = _tet_rule(n)
    lam = np.column_stack([1.0 - l1 - l2 - l3, l1, l2, l3])
    return lam, w


def _singular_weighted_p1(coords: np.ndarray, a: np.ndarray, vol: float,
                          n_rad: int = 12, n_face: int = 10) -> np.ndarray:
    """Integrals of lambda_i lambda_j / |x-a| for an element with a vertex at a.

    Radial map x = a + t (y - a) with y on the opposite facet; the volume
    element supplies t^(d-1), which cancels the singular weight down to a
    smooth integrand.
    """
    d = coords.shape[1]
    k = int(np.argmin(np.linalg.norm(coords - a, axis=1)))
    others = [i for i in range(d + 1) if i != k]
    facet = coords[others]
    t, wt = _gl(n_rad)
    if d == 2:
        s, ws = _gl(n_face)
        mu = np.column_stack([1.0 - s, s])
        wf = ws
    else:
        l1, l2, wf = _tri_rule(n_face)
        mu = np.column_stack([1.0 - l1 - l2, l1, l2])
    ypts = mu @ facet
    ydist = np.linalg.norm(ypts - a, axis=1)
    # barycentric coordinates of x = a + t(y-a): lam_k = 1-t, lam_others = t*mu
    lam_t = np.zeros((len(t), len(mu), d + 1))
    lam_t[:, :, k] = (1.0 - t)[:, None]
    for col, o in enumerate(others):
        lam_t[:, :, o] = t[:, None] * mu[:, col]
    # the volume element t^(d-1) absorbs the 1/(t |y-a|) weight down to t^(d-2)
    weight = (wt * t ** (d - 2))[:, None] * wf[None, :] / ydist[None, :]
    lamlam = np.einsum("tfi,tfj->tfij", lam_t, lam_t)
    return float(d) * vol * np.einsum("tf,tfij->ij", weight, lamlam)


def _near_weighted_p1(coords: np.ndarray, a: np.ndarray, order: int = 6,
                      max_depth: int = 24) -> np.ndarray:
    """Distance-based subdivision for near elements, with P1 weights of the parent."""
    d = coords.shape[1]
    nv = d + 1
    # affine map to parent barycentric coordinates
    T = (coords[1:] - coords[0]).T
    Tinv = np.linalg.inv(T)
    v0 = coords[0]

    def parent_lambda(pts):
        loc = (pts - v0) @ Tinv.T
        lam0 = 1.0 - loc.sum(axis=-1, keepdims=True)
        return np.concatenate([lam0, loc], axis=-1)

    active = coords[None, :, :]
    out = np.zeros((nv, nv))
    for depth in range(max_depth + 1):
        if len(active) == 0:
            break
        diam = _batch_diams(active)
        dists = _batch_point_distances(a, active)
        far = (dists >= 2.0 * diam) | (depth == max_depth)
        if np.any(far):
            batch = active[far]
            meas = _batch_measures(batch)
            pts, w = simplex_quad_points(batch, order)
            lam = parent_lambda(pts)
            vv = w[None, :] / np.linalg.norm(pts - a, axis=2)
            out += np.einsum(
                "ep,epi,epj,e->ij", vv, lam, lam, meas
            )
        active = active[~far]
        if len(active):
            active = _batch_refine(active)
    return out


def boundary_vertices(mesh: Mesh) -> np.ndarray:
    return np.unique(mesh.faces[mesh.boundary_face_flags])


def assemble_p1(mesh: Mesh, pot: PotentialSpec | None, bc: str = "dirichlet") -> DiscreteSystem:
    """Conforming P1 system for -Delta + V with the requested boundary condition.

    Dirichlet eliminates boundary-vertex DOFs by row/column deletion; the
    potential matrix uses the same singular quadrature machinery as the cell
    averages.  Pass ``pot=None`` for the pure Laplacian.
    """
    if bc not in ("dirichlet", "neumann"):
        raise ValueError("bc must be 'dirichlet' or 'neumann'")
    d = mesh.dim
    nv_loc = d + 1
    grads = _barycentric_gradients(mesh)
    gram = np.einsum("ead,ebd->eab", grads, grads)
    k_loc = gram * mesh.volume_K[:, None, None]
    m_loc = _p1_reference(d)[None, :, :] * mesh.volume_K[:, None, None]

    n = mesh.num_vertices
    dofs = mesh.elements
    rows = np.repeat(dofs, nv_loc, axis=1)
    cols = np.tile(dofs, (1, nv_loc))
    K = _scatter(rows, cols, k_loc, n)
    M = _scatter(rows, cols, m_loc, n)
    CP1 = None
    if pot is not None:
        cp_loc = _p1_potential_local(mesh, pot)
        CP1 = _scatter(rows, cols, cp_loc, n)

    keep = np.arange(n)
    if bc == "dirichlet":
        drop = boundary_vertices(mesh)
        mask = np.ones(n, dtype=bool)
        mask[drop] = False
        keep = np.nonzero(mask)[0]
        K = K[keep][:, keep].tocsr()
        M = M[keep][:, keep].tocsr()
        if CP1 is not None:
            CP1 = CP1[keep][:, keep].tocsr()

    sys = DiscreteSystem(space="P1", bc=bc, K=K, M=M, CP1=CP1)
    sys.mesh = mesh
    sys.vertex_dofs = keep
    return sys


# ----------------------------------------------------------------------------
# diagnostics used by the property tests
# ----------------------------------------------------------------------------

def ecr_face_jump_means(sys: DiscreteSystem, coeffs: np.ndarray, n_gauss: int = 6) -> np.ndarray:
    """Mean of the inter-element jump over each interior face for an ECR function."""
    mesh = sys.mesh
    d = mesh.dim
    interior = ~mesh.boundary_face_flags
    face_ids = np.nonzero(interior)[0]
    out = np.zeros(len(face_ids))
    for pos, f in enumerate(face_ids):
        e1, e2 = sys.mesh.face_elems[f]
        m1 = _face_mean_on_element(sys, coeffs, f, e1, n_gauss)
        m2 = _face_mean_on_element(sys, coeffs, f, e2, n_gauss)
        out[pos] = m1 - m2
    return out


def ecr_eval_on_element(sys: DiscreteSystem, coeffs: np.ndarray, e: int, lam: np.ndarray) -> np.ndarray:
    """Evaluate an ECR coefficient vector on element e at barycentric points."""
    d = sys.mesh.dim
    nv = d + 1
    c_d = {2: 20.0, 3: 210.0}[d]
    s_d = {2: 60.0, 3: 840.0}[d]
    bubble = np.prod(lam, axis=1)
    vals = np.zeros(len(lam))
    dofs = sys.element_dofs[e]
    for i in range(nv):
        phi = 1.0 - d * lam[:, i] - c_d * bubble
        vals += coeffs[dofs[i]] * phi
    vals += coeffs[dofs[nv]] * s_d * bubble
    return vals


def _face_mean_on_element(sys, coeffs, f, e, n_gauss):
    mesh = sys.mesh
    d = mesh.dim
    face = mesh.faces[f]
    elem = mesh.elements[e]
    # barycentric coordinates of the face vertices within the element
    loc = np.zeros((d, d + 1))
    for i, v in enumerate(face):
        loc[i, list(elem).index(v)] = 1.0
    if d == 2:
        s, w = _gl(n_gauss)
        lam = (1.0 - s)[:, None] * loc[0][None, :] + s[:, None] * loc[1][None, :]
    else:
        l1, l2, w = _tri_rule(n_gauss)
        lam = (
            (1.0 - l1 - l2)[:, None] * loc[0][None, :]
            + l1[:, None] * loc[1][None, :]
            + l2[:, None] * loc[2][None, :]
        )
    vals = ecr_eval_on_element(sys, coeffs, e, lam)
    return float((w * vals).sum() / w.sum())
