"""Graded simplicial meshes on truncated domains.

Three generators cover the benchmark families: a ring-graded Delaunay
triangulation for rectangles (2D), a structured icosahedron-shell mesh for
balls (3D), and an octree-seeded template tetrahedralization for boxes (3D).
Every Coulomb center is placed as an exact mesh vertex, and the grading
assumptions (linear grading away from the singularity, small singular patch)
are re-audited on the generated mesh rather than trusted by construction.

All generators are deterministic for a fixed ``GradingSpec`` and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import Delaunay

__all__ = [
    "Domain",
    "GradingSpec",
    "Mesh",
    "QualityReport",
    "build_graded_mesh_2d",
    "build_ball_mesh_3d",
    "build_graded_box_mesh_3d",
    "mesh_quality",
    "save_mesh",
    "load_mesh",
]


# ----------------------------------------------------------------------------
# domain descriptors
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Domain:
    """Axis-aligned rectangle/box or an origin-centered ball.

    ``bounds`` has shape (dim, 2) for rectangles and boxes; ``radius`` is set
    for balls.  The descriptor is carried by generated meshes so that audits
    and the confinement check know the exact truncation geometry.
    """

    kind: str  # "rect" | "box" | "ball"
    bounds: tuple | None = None
    radius: float | None = None

    @staticmethod
    def rect(x0, x1, y0, y1) -> "Domain":
        return Domain("rect", bounds=((float(x0), float(x1)), (float(y0), float(y1))))

    @staticmethod
    def box(x0, x1, y0, y1, z0, z1) -> "Domain":
        return Domain(
            "box",
            bounds=(
                (float(x0), float(x1)),
                (float(y0), float(y1)),
                (float(z0), float(z1)),
            ),
        )

    @staticmethod
    def ball(radius) -> "Domain":
        return Domain("ball", radius=float(radius))

    @property
    def dim(self) -> int:
        if self.kind == "rect":
            return 2
        return 3

    def bounds_array(self) -> np.ndarray:
        if self.bounds is None:
            raise ValueError("domain has no rectangular bounds")
        return np.asarray(self.bounds, dtype=float)

    def side_lengths(self) -> np.ndarray:
        b = self.bounds_array()
        return b[:, 1] - b[:, 0]

    def contains(self, x: np.ndarray, margin: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "ball":
            return np.linalg.norm(x, axis=1) <= self.radius - margin
        b = self.bounds_array()
        ok = np.ones(len(x), dtype=bool)
        for d in range(b.shape[0]):
            ok &= (x[:, d] >= b[d, 0] + margin) & (x[:, d] <= b[d, 1] - margin)
        return ok

    def distance_to_boundary(self, x: np.ndarray) -> np.ndarray:
        """Distance from interior points to the boundary (0 outside)."""
        x = np.atleast_2d(x)
        if self.kind == "ball":
            return np.maximum(self.radius - np.linalg.norm(x, axis=1), 0.0)
        b = self.bounds_array()
        d = np.full(len(x), np.inf)
        for k in range(b.shape[0]):
            d = np.minimum(d, x[:, k] - b[k, 0])
            d = np.minimum(d, b[k, 1] - x[:, k])
        return np.maximum(d, 0.0)

    def boundary_measure(self) -> float:
        """Perimeter (2D) or surface area (3D box); faceted value for balls is mesh-dependent."""
        if self.kind == "rect":
            sx, sy = self.side_lengths()
            return 2.0 * (sx + sy)
        if self.kind == "box":
            sx, sy, sz = self.side_lengths()
            return 2.0 * (sx * sy + sy * sz + sz * sx)
        raise ValueError("boundary measure of a faceted ball is mesh-dependent")

    def inradius(self, center: np.ndarray | None = None) -> float:
        if self.kind == "ball":
            r = float(self.radius)
            if center is not None:
                r -= float(np.linalg.norm(center))
            return r
        b = self.bounds_array()
        if center is None:
            center = b.mean(axis=1)
        center = np.asarray(center, dtype=float)
        return float(min(min(center[d] - b[d, 0], b[d, 1] - center[d]) for d in range(b.shape[0])))


# ----------------------------------------------------------------------------
# grading specification
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class GradingSpec:
    """Mesh-family parameters for the graded generators.

    ``h`` is the dimensionless family parameter, ``vartheta`` the grading
    slope of the linear-grading law h_K <= vartheta*h*r_K, and
    ``patch_radius_rule`` one of ``("fixed", rho)``, ``("power", beta,
    gamma_p)`` or ``("optimal",)``.  The optimal rule seeds the first ring
    with a power law (beta, gamma_p) = (0.004, 4) in 2D and (0.015, 2) in 3D;
    the estimator then optimizes the patch split radius on the generated mesh.
    """

    h: float
    vartheta: float = 1.0
    patch_radius_rule: tuple = ("optimal",)
    centers: tuple = ()
    seed: int = 0
    ring_gain: float = 0.45     # ring spacing = ring_gain * vartheta * h * r
    far_factor: float = 0.95    # far-field point spacing = far_factor * h

    def __post_init__(self):
        if not (self.h > 0):
            raise ValueError("mesh parameter h must be positive")
        if not (self.vartheta > 0):
            raise ValueError("grading slope vartheta must be positive")
        rule = self.patch_radius_rule
        if rule[0] == "fixed":
            if not (len(rule) == 2 and rule[1] > 0):
                raise ValueError("fixed patch rule needs a positive radius")
        elif rule[0] == "power":
            if not (len(rule) == 3 and rule[1] > 0 and rule[2] > 0):
                raise ValueError("power patch rule needs beta > 0 and gamma_p > 0")
        elif rule[0] != "optimal":
            raise ValueError(f"unknown patch radius rule {rule[0]!r}")

    def centers_array(self, dim: int) -> np.ndarray:
        if len(self.centers) == 0:
            return np.zeros((0, dim))
        arr = np.asarray(self.centers, dtype=float)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.shape[1] != dim:
            raise ValueError("center coordinates do not match the domain dimension")
        return arr

    def first_ring_radius(self, dim: int) -> float:
        rule = self.patch_radius_rule
        if rule[0] == "fixed":
            return float(rule[1])
        if rule[0] == "power":
            return float(rule[1]) * self.h ** float(rule[2])
        if dim == 2:
            return 0.004 * self.h ** 4
        return 0.015 * self.h ** 2


# ----------------------------------------------------------------------------
# mesh container
# ----------------------------------------------------------------------------

@dataclass
class Mesh:
    """Immutable simplicial mesh with per-element metadata.

    Faces are stored once each; ``face_elems[f]`` lists the one or two
    adjacent element indices (-1 marks the missing side of boundary faces).
    ``r_K`` is the exact minimum distance from element K to the nearest
    Coulomb center (0 on elements touching a center) and ``h_K`` the maximum
    pairwise vertex distance.
    """

    dim: int
    vertices: np.ndarray            # (nv, dim)
    elements: np.ndarray            # (ne, dim+1) int
    faces: np.ndarray               # (nf, dim) int
    face_elems: np.ndarray          # (nf, 2) int, -1 for boundary side
    boundary_face_flags: np.ndarray  # (nf,) bool
    nucleus_vertex_ids: np.ndarray  # (nc,) int
    h_K: np.ndarray                 # (ne,)
    r_K: np.ndarray                 # (ne,)
    volume_K: np.ndarray            # (ne,)
    domain: Domain | None = None
    family_h: float | None = None
    seed: int | None = None

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_elements(self) -> int:
        return len(self.elements)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def h_max(self) -> float:
        return float(self.h_K.max())

    @property
    def h_min(self) -> float:
        return float(self.h_K.min())

    def centers(self) -> np.ndarray:
        return self.vertices[self.nucleus_vertex_ids]

    def element_coords(self) -> np.ndarray:
        """(ne, dim+1, dim) array of element vertex coordinates."""
        return self.vertices[self.elements]

    def patch_element_mask(self) -> np.ndarray:
        """Elements touching a center vertex (singular patch union)."""
        mask = np.zeros(self.num_elements, dtype=bool)
        for vid in self.nucleus_vertex_ids:
            mask |= np.any(self.elements == vid, axis=1)
        return mask


def _simplex_volumes(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    coords = vertices[elements]
    edges = coords[:, 1:, :] - coords[:, :1, :]
    dim = vertices.shape[1]
    det = np.linalg.det(edges)
    return det / math.factorial(dim)


def _fix_orientation(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    vol = _simplex_volumes(vertices, elements)
    flip = vol < 0
    if np.any(flip):
        elements = elements.copy()
        elements[flip, 0], elements[flip, 1] = (
            elements[flip, 1].copy(),
            elements[flip, 0].copy(),
        )
    return elements


def _element_diameters(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    coords = vertices[elements]
    n_loc = elements.shape[1]
    h = np.zeros(len(elements))
    for i in range(n_loc):
        for j in range(i + 1, n_loc):
            d = np.linalg.norm(coords[:, i, :] - coords[:, j, :], axis=1)
            np.maximum(h, d, out=h)
    return h


def _extract_faces(elements: np.ndarray, dim: int):
    ne, n_loc = elements.shape
    local_faces = [tuple(j for j in range(n_loc) if j != i) for i in range(n_loc)]
    all_faces = np.concatenate([elements[:, lf] for lf in local_faces], axis=0)
    owners = np.tile(np.arange(ne), n_loc)
    key = np.sort(all_faces, axis=1)
    order = np.lexsort(key.T[::-1])
    key_sorted = key[order]
    owners_sorted = owners[order]
    new_face = np.ones(len(key_sorted), dtype=bool)
    new_face[1:] = np.any(key_sorted[1:] != key_sorted[:-1], axis=1)
    face_ids = np.cumsum(new_face) - 1
    nf = face_ids[-1] + 1 if len(face_ids) else 0
    faces = key_sorted[new_face]
    face_elems = np.full((nf, 2), -1, dtype=np.int64)
    counts = np.zeros(nf, dtype=np.int64)
    for fid, owner in zip(face_ids, owners_sorted):
        c = counts[fid]
        if c > 1:
            raise ValueError("face shared by more than two elements")
        face_elems[fid, c] = owner
        counts[fid] = c + 1
    boundary = face_elems[:, 1] < 0
    return faces, face_elems, boundary


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized distance from point p to segments (a_i, b_i)."""
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.einsum("ij,ij->i", p - a, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(p - proj, axis=1)


def _point_triangle_distance_2d(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Distance from a fixed point to each 2D triangle (0 if inside)."""
    a, b, c = tri[:, 0, :], tri[:, 1, :], tri[:, 2, :]
    v0, v1, v2 = b - a, c - a, p - a
    den = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / den
    l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / den
    inside = (l1 >= 0) & (l2 >= 0) & (l1 + l2 <= 1)
    pp = np.broadcast_to(p, a.shape)
    d = np.minimum(
        _point_segment_distance(pp, a, b),
        np.minimum(_point_segment_distance(pp, b, c), _point_segment_distance(pp, c, a)),
    )
    return np.where(inside, 0.0, d)


def _point_triangle_distance_3d(p: np.ndarray, a, b, c) -> np.ndarray:
    """Distance from a fixed point to 3D triangles (a_i, b_i, c_i)."""
    n = np.cross(b - a, c - a)
    nn = np.einsum("ij,ij->i", n, n)
    nn_safe = np.where(nn > 0, nn, 1.0)
    t = np.einsum("ij,ij->i", p - a, n) / nn_safe
    proj = p - t[:, None] * n
    # barycentric test of the projection
    v0, v1, v2 = b - a, c - a, proj - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    den_safe = np.where(np.abs(den) > 0, den, 1.0)
    w1 = (d11 * d20 - d01 * d21) / den_safe
    w2 = (d00 * d21 - d01 * d20) / den_safe
    inside = (w1 >= 0) & (w2 >= 0) & (w1 + w2 <= 1) & (nn > 0)
    d_plane = np.abs(t) * np.sqrt(nn_safe)
    pp = np.broadcast_to(p, a.shape)
    d_edges = np.minimum(
        _point_segment_distance(pp, a, b),
        np.minimum(_point_segment_distance(pp, b, c), _point_segment_distance(pp, c, a)),
    )
    return np.where(inside, d_plane, d_edges)


def _point_simplex_distance(p: np.ndarray, vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    coords = vertices[elements]
    dim = vertices.shape[1]
    if dim == 2:
        return _point_triangle_distance_2d(p, coords)
    a, b, c, d = (coords[:, i, :] for i in range(4))
    # inside test via signed volumes against each face
    def svol(p0, p1, p2, p3):
        return np.einsum("ij,ij->i", np.cross(p1 - p0, p2 - p0), p3 - p0)

    pp = np.broadcast_to(p, a.shape)
    s0 = svol(a, b, c, d)
    inside = (
        (svol(a, b, c, pp) * s0 >= 0)
        & (svol(a, b, pp, d) * s0 >= 0)
        & (svol(a, pp, c, d) * s0 >= 0)
        & (svol(pp, b, c, d) * s0 >= 0)
    )
    dist = np.minimum.reduce(
        [
            _point_triangle_distance_3d(p, a, b, c),
            _point_triangle_distance_3d(p, a, b, d),
            _point_triangle_distance_3d(p, a, c, d),
            _point_triangle_distance_3d(p, b, c, d),
        ]
    )
    return np.where(inside, 0.0, dist)


def _min_center_distance(vertices: np.ndarray, elements: np.ndarray, centers: np.ndarray) -> np.ndarray:
    if len(centers) == 0:
        return np.full(len(elements), np.inf)
    r = np.full(len(elements), np.inf)
    for c in centers:
        r = np.minimum(r, _point_simplex_distance(c, vertices, elements))
    return r


def _build_mesh(
    dim: int,
    vertices: np.ndarray,
    elements: np.ndarray,
    centers: np.ndarray,
    domain: Domain | None,
    family_h: float | None,
    seed: int | None,
) -> Mesh:
    vertices = np.ascontiguousarray(vertices, dtype=float)
    elements = np.ascontiguousarray(elements, dtype=np.int64)
    elements = _fix_orientation(vertices, elements)
    vol = _simplex_volumes(vertices, elements)
    if np.any(vol <= 0):
        raise ValueError(f"{int(np.sum(vol <= 0))} degenerate elements after orientation fix")
    faces, face_elems, boundary = _extract_faces(elements, dim)
    nucleus_ids = []
    for c in centers:
        hits = np.nonzero(np.all(vertices == np.asarray(c, dtype=float), axis=1))[0]
        if len(hits) == 0:
            raise ValueError(f"center {c} is not an exact mesh vertex")
        nucleus_ids.append(hits[0])
    mesh = Mesh(
        dim=dim,
        vertices=vertices,
        elements=elements,
        faces=faces,
        face_elems=face_elems,
        boundary_face_flags=boundary,
        nucleus_vertex_ids=np.asarray(nucleus_ids, dtype=np.int64),
        h_K=_element_diameters(vertices, elements),
        r_K=_min_center_distance(vertices, elements, np.asarray(centers, dtype=float)),
        volume_K=vol,
        domain=domain,
        family_h=family_h,
        seed=seed,
    )
    return mesh


# ----------------------------------------------------------------------------
# 2D generator: graded rings + far-field grid + Delaunay
# ----------------------------------------------------------------------------

def _ring_points(center, radii, n_per_ring, rng, exclude_first_jitter=True):
    pts = []
    for j, r in enumerate(radii):
        n = n_per_ring
        offset = 0.5 * (j % 2) * 2 * math.pi / n
        theta = offset + 2 * math.pi * np.arange(n) / n
        if j == 0 and exclude_first_jitter:
            rr = np.full(n, r)
        else:
            rr = r * (1.0 + 2e-4 * (rng.random(n) - 0.5))
        theta = theta + 2e-4 * (rng.random(n) - 0.5) * 2 * math.pi / n
        pts.append(np.column_stack([center[0] + rr * np.cos(theta), center[1] + rr * np.sin(theta)]))
    if not pts:
        return np.zeros((0, 2))
    return np.concatenate(pts, axis=0)


def _rect_boundary_points(domain: Domain, spacing_fn, rng):
    """March along the rectangle boundary with an adaptive step; corners exact."""
    b = domain.bounds_array()
    (x0, x1), (y0, y1) = b
    corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    pts = [np.array(c) for c in corners]
    for k in range(4):
        a = np.array(corners[k])
        bb = np.array(corners[(k + 1) % 4])
        length = np.linalg.norm(bb - a)
        direction = (bb - a) / length
        # first pass: raw adaptive steps
        t_vals = [0.0]
        while t_vals[-1] < length:
            x = a + t_vals[-1] * direction
            t_vals.append(t_vals[-1] + spacing_fn(x))
        # rescale so the last point lands on the corner
        t_vals = np.asarray(t_vals)
        if len(t_vals) > 2:
            t_vals = t_vals * (length / t_vals[-1])
            interior_t = t_vals[1:-1]
            steps = np.diff(t_vals)
            jitter = 1e-3 * steps[:-1] * (rng.random(len(interior_t)) - 0.5)
            interior_t = interior_t + jitter
            for t in interior_t:
                pts.append(a + t * direction)
    return np.array(pts)


def _structural_ring_zone(center, rho0, r_outer, gain, n_spokes, base_index):
    """Fan plus concentric graded annuli around a center, triangulated explicitly.

    Ring radii grow geometrically from ``rho0`` to ``r_outer`` with a ratio
    adjusted so both endpoints are hit exactly.  Returns the local vertices
    (center first, outermost ring last), the triangle list in local indices
    offset by ``base_index``, and the slice of outer-ring indices.
    """
    n_rings = max(1, int(math.ceil(math.log(r_outer / rho0) / math.log1p(gain)))) + 1
    ratio = (r_outer / rho0) ** (1.0 / (n_rings - 1)) if n_rings > 1 else 1.0
    radii = rho0 * ratio ** np.arange(n_rings)
    radii[-1] = r_outer
    theta = 2.0 * math.pi * np.arange(n_spokes) / n_spokes
    cossin = np.column_stack([np.cos(theta), np.sin(theta)])
    verts = [np.asarray(center, dtype=float)[None, :]]
    for r in radii:
        verts.append(center + r * cossin)
    verts = np.concatenate(verts, axis=0)

    def vid(ring, k):
        return base_index + 1 + ring * n_spokes + (k % n_spokes)

    tris = []
    for k in range(n_spokes):
        tris.append((base_index, vid(0, k), vid(0, k + 1)))
    for j in range(n_rings - 1):
        for k in range(n_spokes):
            a, bq = vid(j, k), vid(j, k + 1)
            cq, d = vid(j + 1, k + 1), vid(j + 1, k)
            tris.append((a, bq, cq))
            tris.append((a, cq, d))
    outer = [vid(n_rings - 1, k) for k in range(n_spokes)]
    return verts, tris, outer


def build_graded_mesh_2d(domain: Domain, grading: GradingSpec) -> Mesh:
    """Ring-graded triangulation of a rectangle with exact center vertices.

    Around each center a structural zone of concentric rings realizes the
    linear-grading law h_K <~ vartheta*h*r down to the first-ring radius;
    the far field is a quasi-uniform grid at spacing ``far_factor*h``.  A
    Delaunay pass stitches grid, boundary and the outermost ring of each
    zone together, after which the structural zones are spliced into the
    polygonal holes they bound.
    """
    if domain.kind != "rect":
        raise ValueError("build_graded_mesh_2d needs a rectangular domain")
    h = grading.h
    centers = grading.centers_array(2)
    b = domain.bounds_array()
    rng = np.random.default_rng(grading.seed + 12345)
    far_spacing = grading.far_factor * h

    if len(centers) == 0:
        return build_uniform_rect_mesh(domain, h)

    if not np.all(domain.contains(centers, margin=1e-12)):
        raise ValueError("all centers must lie strictly inside the domain")
    rho0 = grading.first_ring_radius(2)
    d_bnd = domain.distance_to_boundary(centers)
    if rho0 >= d_bnd.min():
        raise ValueError("patch radius reaches the boundary; grading infeasible")

    gain = min(grading.ring_gain * grading.vartheta * h, 0.9)
    n_spokes = max(12, int(round(2 * math.pi / gain)))

    # structural zone outer radius: where ring spacing reaches the grid spacing,
    # capped away from other centers and from the boundary
    if len(centers) > 1:
        dc = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
        np.fill_diagonal(dc, np.inf)
        min_cdist = dc.min()
    else:
        min_cdist = np.inf
    r_outer = np.minimum(
        0.85 * far_spacing / gain,
        np.minimum(0.46 * min_cdist, 0.8 * d_bnd),
    )
    r_outer = np.maximum(r_outer, rho0 * (1 + gain))
    if np.any(r_outer >= d_bnd):
        raise ValueError("graded zone reaches the boundary; h too large for this domain")

    def local_spacing(x):
        x = np.atleast_2d(x)
        r = np.min(np.linalg.norm(x[:, None, :] - centers[None, :, :], axis=2), axis=1)
        return np.minimum(far_spacing, np.maximum(gain * r, 1e-300))

    zones = []
    cloud_parts = []
    outer_rings = []
    for ci, c in enumerate(centers):
        verts, tris, outer = _structural_ring_zone(c, rho0, float(r_outer[ci]), gain, n_spokes, 0)
        zones.append((verts, tris))
        ring_pts = verts[-n_spokes:]
        outer_rings.append(ring_pts)

    # Delaunay cloud: outer rings, far grid, boundary
    for ring_pts in outer_rings:
        cloud_parts.append(ring_pts)

    # continuation rings keep the grading law alive where a structural zone
    # was capped short of the grid-spacing radius (close centers, boundaries)
    r_sat = 0.85 * far_spacing / gain
    for ci, c in enumerate(centers):
        radii = []
        r = float(r_outer[ci]) * (1.0 + gain)
        while r < r_sat:
            radii.append(r)
            r *= 1.0 + gain
        if not radii:
            continue
        ring_pts = _ring_points(c, radii, n_spokes, rng)
        keep = domain.contains(ring_pts, margin=0.0)
        keep &= domain.distance_to_boundary(ring_pts) >= 0.35 * local_spacing(ring_pts)
        d_own = np.linalg.norm(ring_pts - c, axis=1)
        for cj, other in enumerate(centers):
            if cj == ci:
                continue
            d_other = np.linalg.norm(ring_pts - other, axis=1)
            keep &= (d_own < d_other) | ((d_own == d_other) & (ci < cj))
        cloud_parts.append(ring_pts[keep])
    nx = max(2, int(math.ceil((b[0, 1] - b[0, 0]) / far_spacing)))
    ny = max(2, int(math.ceil((b[1, 1] - b[1, 0]) / far_spacing)))
    gx = np.linspace(b[0, 0], b[0, 1], nx + 1)[1:-1]
    gy = np.linspace(b[1, 0], b[1, 1], ny + 1)[1:-1]
    gpts = np.column_stack([m.ravel() for m in np.meshgrid(gx, gy)])
    if len(gpts) > 0:
        gpts = gpts + 1e-3 * far_spacing * (rng.random(gpts.shape) - 0.5)
        keep = domain.distance_to_boundary(gpts) >= 0.4 * far_spacing
        for ci, c in enumerate(centers):
            rr = np.linalg.norm(gpts - c, axis=1)
            keep &= rr >= min(max(r_sat / (1.0 + gain), r_outer[ci]) + 0.55 * far_spacing, r_sat + 0.55 * far_spacing)
        cloud_parts.append(gpts[keep])
    cloud_parts.append(
        _rect_boundary_points(domain, lambda x: float(local_spacing(x)[0]), rng)
    )
    cloud = np.concatenate([p for p in cloud_parts if len(p) > 0], axis=0)
    tri = Delaunay(cloud)
    if len(tri.coplanar) > 0:
        raise ValueError("Delaunay dropped input points (degenerate cloud)")

    # remove the Delaunay triangles that fill each ring-zone hole: exactly
    # those whose three vertices all belong to the same outer ring (the ring
    # points are the first entries of the cloud, one contiguous block each)
    inside_hole = np.zeros(len(tri.simplices), dtype=bool)
    for ci in range(len(centers)):
        lo, hi = ci * n_spokes, (ci + 1) * n_spokes
        on_ring = np.all((tri.simplices >= lo) & (tri.simplices < hi), axis=1)
        if int(on_ring.sum()) != n_spokes - 2:
            raise ValueError("ring-zone hole was not cleanly triangulated")
        inside_hole |= on_ring
    keep_tris = tri.simplices[~inside_hole]

    # splice the structural zones; outer-ring points are deduplicated against
    # the cloud by exact coordinate match
    coord_index = {tuple(p): i for i, p in enumerate(cloud)}
    vertices = [cloud]
    elements = [keep_tris]
    next_id = len(cloud)
    for (verts, tris) in zones:
        local_ids = np.empty(len(verts), dtype=np.int64)
        new_pts = []
        for i, p in enumerate(verts):
            key = tuple(p)
            j = coord_index.get(key)
            if j is None:
                j = next_id
                coord_index[key] = j
                next_id += 1
                new_pts.append(p)
            local_ids[i] = j
        if new_pts:
            vertices.append(np.asarray(new_pts))
        elements.append(local_ids[np.asarray(tris, dtype=np.int64)])
    vertices = np.concatenate(vertices, axis=0)
    elements = np.concatenate(elements, axis=0)
    return _build_mesh(2, vertices, elements, centers, domain, h, grading.seed)


# ----------------------------------------------------------------------------
# 3D ball generator: concentric icosphere shells
# ----------------------------------------------------------------------------

def _icosphere(level: int):
    """Subdivided icosahedron directions with a deterministic vertex order."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int64,
    )
    verts = list(map(tuple, verts))
    for _ in range(level):
        midpoint = {}
        new_faces = []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                v = np.asarray(verts[i]) + np.asarray(verts[j])
                v /= np.linalg.norm(v)
                midpoint[key] = len(verts)
                verts.append(tuple(v))
            return midpoint[key]

        for (a, bb, c) in faces:
            ab, bc, ca = mid(a, bb), mid(bb, c), mid(c, a)
            new_faces += [(a, ab, ca), (bb, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.asarray(new_faces, dtype=np.int64)
    return np.asarray(verts, dtype=float), faces


def _split_prism(bot, top):
    """Split a triangular prism into 3 tets with globally consistent diagonals.

    Quad diagonals run through the smallest global vertex index of each quad,
    which makes adjacent prisms conform and always yields a valid split.
    """
    order = np.argsort(bot)
    a, b, c = (int(bot[i]) for i in order)
    a2, b2, c2 = (int(top[i]) for i in order)
    return [(a, b, c, c2), (a, b, c2, b2), (a, b2, c2, a2)]


def build_ball_mesh_3d(
    R: float,
    h: float,
    theta_ang: float = 0.15,
    n_sub: int | None = None,
    radial_gain: float = 0.4,
) -> Mesh:
    """Structured icosahedron-shell mesh of the ball B(0, R).

    The origin is an exact vertex, the first shell sits at radius
    ``h**2 / (10 R)``, shell radii grow geometrically with a cap that keeps
    every tetrahedron diameter below ``1.05 h``, and consecutive shells are
    joined by consistently split prisms.
    """
    if R <= 0 or h <= 0:
        raise ValueError("R and h must be positive")
    r1 = h * h / (10.0 * R)
    if r1 >= R:
        raise ValueError("first shell radius h^2/(10R) reaches the ball; h too large")

    chord0 = 4.0 / math.sqrt(10.0 + 2.0 * math.sqrt(5.0))  # icosahedron edge chord
    target = 1.05 * h
    if n_sub is None:
        k = 1
        while chord0 / 2**k > theta_ang or (chord0 / 2**k) * R > 0.75 * target:
            k += 1
            if k > 7:
                raise ValueError("cannot reach the angular resolution target")
        n_sub = k
    chord = chord0 / 2**n_sub
    if chord * R >= target:
        raise ValueError("angular subdivision too coarse for h_max < 1.05 h")

    for attempt in range(4):
        shrink = 0.9**attempt
        dr_cap = shrink * math.sqrt(max(target**2 * 0.96 - (chord * R) ** 2, 1e-12))
        radii = [r1]
        while True:
            r = radii[-1]
            step = min(radial_gain * shrink * r, dr_cap, h)
            if r + 1.5 * step >= R:
                break
            radii.append(r + step)
        rem = R - radii[-1]
        n_last = max(1, int(math.ceil(rem / min(dr_cap, h))))
        last = radii[-1]
        for i in range(1, n_last + 1):
            radii.append(last + rem * i / n_last)
        radii[-1] = R

        dirs, sphere_faces = _icosphere(n_sub)
        nv_shell = len(dirs)
        verts = [np.zeros(3)]
        for r in radii:
            verts.append(dirs * r)
        vertices = np.concatenate([verts[0][None, :]] + verts[1:], axis=0)

        def shell_vid(shell_idx, local):
            return 1 + shell_idx * nv_shell + local

        tets = []
        for (a, b, c) in sphere_faces:
            tets.append((0, shell_vid(0, a), shell_vid(0, b), shell_vid(0, c)))
        for s in range(len(radii) - 1):
            for (a, b, c) in sphere_faces:
                bot = np.array([shell_vid(s, a), shell_vid(s, b), shell_vid(s, c)])
                top = np.array([shell_vid(s + 1, a), shell_vid(s + 1, b), shell_vid(s + 1, c)])
                tets.extend(_split_prism(bot, top))
        elements = np.asarray(tets, dtype=np.int64)
        h_mesh = _element_diameters(vertices, elements).max()
        if h_mesh < 1.05 * h:
            mesh = _build_mesh(
                3, vertices, elements, np.zeros((1, 3)), Domain.ball(R), h, 0
            )
            return mesh
    raise ValueError("could not satisfy h_max < 1.05 h; refine the angular parameter")


# ----------------------------------------------------------------------------
# 3D box generator: graded octree with template tetrahedralization
# ----------------------------------------------------------------------------

def _octree_leaves(box: Domain, centers: np.ndarray, h: float, vartheta: float,
                   s_min: float, max_level: int = 24):
    """Balanced octree leaves keyed by (level, ix, iy, iz) on a nucleus-aligned lattice."""
    b = box.bounds_array()
    sides = b[:, 1] - b[:, 0]
    # base cell size: largest value <= cap dividing all sides with centers on the lattice
    cap = max(min(1.6 * h, sides.min()), s_min)
    n0 = np.maximum(np.ceil(sides / cap - 1e-12).astype(int), 1)
    # all sides must share the same base cell size to keep cells cubic
    s_candidates = sorted({sides[d] / k for d in range(3) for k in range(n0[d], n0[d] + 12)}, reverse=True)
    s0 = None
    for s in s_candidates:
        if s > cap *(1 + 1e-9) or s <= 0:
            continue
        counts = sides / s
        if not np.allclose(counts, np.round(counts), rtol=0, atol=1e-9):
            continue
        ok = True
        for c in centers:
            # center must be a lattice node at some refinement level
            rel = (c - b[:, 0]) / s
            lev_ok = False
            for lev in range(0, 12):
                scaled = rel * 2**lev
                if np.allclose(scaled, np.round(scaled), rtol=0, atol=1e-9):
                    lev_ok = True
                    break
            if not lev_ok:
                ok = False
                break
        if ok:
            s0 = s
            break
    if s0 is None:
        raise ValueError("cannot align an octree lattice with the box and centers")
    counts0 = np.round(sides / s0).astype(int)

    def cell_center(key):
        lev, i, j, k = key
        s = s0 / 2**lev
        return b[:, 0] + (np.array([i, j, k]) + 0.5) * s

    def cell_size(key):
        return s0 / 2 ** key[0]

    # sizing rule keyed to the fan-tet diameter 0.866*s: keep the predicted
    # grading ratio below 0.95*vartheta and the far-field diameter below 1.26*h
    def want_split(key):
        s = cell_size(key)
        if s <= s_min * (1 + 1e-12):
            return False
        diam = s  # fan tets contain whole cube edges
        if diam > 1.3 * h:
            return True
        if len(centers) == 0:
            return False
        cc = cell_center(key)
        r = np.min(np.linalg.norm(centers - cc, axis=1))
        return diam > 0.95 * vartheta * h * max(r - diam, 0.0)

    leaves = {}
    for i in range(counts0[0]):
        for j in range(counts0[1]):
            for k in range(counts0[2]):
                leaves[(0, i, j, k)] = True

    changed = True
    while changed:
        changed = False
        for key in list(leaves.keys()):
            if key not in leaves:
                continue
            if key[0] < max_level and want_split(key):
                del leaves[key]
                lev, i, j, k = key
                for di in range(2):
                    for dj in range(2):
                        for dk in range(2):
                            leaves[(lev + 1, 2 * i + di, 2 * j + dj, 2 * k + dk)] = True
                changed = True

    # 2:1 balance
    def neighbors_exist_coarser(key):
        lev, i, j, k = key
        out = []
        for axis in range(3):
            for d in (-1, 1):
                idx = [i, j, k]
                idx[axis] += d
                if idx[axis] < 0 or idx[axis] >= counts0[axis] * 2**lev:
                    continue
                out.append((lev, idx[0], idx[1], idx[2]))
        return out

    def find_leaf(key):
        lev, i, j, k = key
        up = (lev, i, j, k)
        while up[0] >= 0:
            if up in leaves:
                return up
            up = (up[0] - 1, up[1] // 2, up[2] // 2, up[3] // 2)
        return None

    changed = True
    while changed:
        changed = False
        for key in list(leaves.keys()):
            if key not in leaves:
                continue
            for nb in neighbors_exist_coarser(key):
                found = find_leaf(nb)
                if found is not None and key[0] - found[0] > 1:
                    del leaves[found]
                    lev, i, j, k = found
                    for di in range(2):
                        for dj in range(2):
                            for dk in range(2):
                                leaves[(lev + 1, 2 * i + di, 2 * j + dj, 2 * k + dk)] = True
                    changed = True
    return leaves, s0, counts0


def build_graded_box_mesh_3d(domain: Domain, grading: GradingSpec, oct_gain: float = 0.4) -> Mesh:
    """Distance-graded octree tetrahedralization of a box with exact nucleus vertices.

    Leaf cubes shrink linearly with the distance to the nearest center down
    to the patch size; each leaf is split into tetrahedra by connecting its
    center to the canonical triangulation of its faces, which conforms across
    the 2:1-balanced level jumps.  All vertex coordinates live on an integer
    lattice, so the construction is exact and deterministic.
    """
    if domain.kind != "box":
        raise ValueError("build_graded_box_mesh_3d needs a box domain")
    b = domain.bounds_array()
    sides = b[:, 1] - b[:, 0]
    if np.any(sides <= 0):
        raise ValueError("degenerate box")
    centers = grading.centers_array(3)
    if len(centers) > 0 and not np.all(domain.contains(centers, margin=1e-12)):
        raise ValueError("all centers must lie strictly inside the box")
    h = grading.h
    s_min = max(grading.first_ring_radius(3), 1e-6)

    leaves, s0, counts0 = _octree_leaves(domain, centers, h, grading.vartheta, s_min)
    max_lev = max(key[0] for key in leaves)
    # integer lattice at resolution s0 / 2**(max_lev+1): cube centers become lattice points
    unit = 2 ** (max_lev + 1)

    vert_index: dict[tuple, int] = {}
    vert_list: list[tuple] = []

    def vid(ix, iy, iz):
        key = (ix, iy, iz)
        idx = vert_index.get(key)
        if idx is None:
            idx = len(vert_list)
            vert_index[key] = idx
            vert_list.append(key)
        return idx

    leafset = leaves

    def find_leaf(lev, i, j, k):
        while lev >= 0:
            if (lev, i, j, k) in leafset:
                return lev
            lev, i, j, k = lev - 1, i // 2, j // 2, k // 2
        return None

    max_scale = unit  # lattice units of a level-0 cube

    def edge_is_split(p, axis_e, sc):
        """An edge of length sc is split iff some adjacent cell holds finer leaves."""
        lev_e = int(math.log2(max_scale // sc))
        a1, a2 = [ax for ax in range(3) if ax != axis_e]
        cell = [p[0] // sc, p[1] // sc, p[2] // sc]
        ncells_e = [c * 2**lev_e for c in counts0]
        for d1 in (-1, 0):
            for d2 in (-1, 0):
                cc = list(cell)
                cc[a1] += d1
                cc[a2] += d2
                if any(cc[ax] < 0 or cc[ax] >= ncells_e[ax] for ax in range(3)):
                    continue
                if find_leaf(lev_e, cc[0], cc[1], cc[2]) is None:
                    return True
        return False

    tets = []
    for (lev, i, j, k) in leaves:
        scale = unit >> lev  # lattice units per cube side
        base = (i * scale, j * scale, k * scale)
        cidx = vid(base[0] + scale // 2, base[1] + scale // 2, base[2] + scale // 2)
        ncells = [c * 2**lev for c in counts0]
        for axis in range(3):
            for side in (0, 1):
                idx = [i, j, k]
                idx[axis] += -1 if side == 0 else 1
                neighbor_finer = False
                if 0 <= idx[axis] < ncells[axis]:
                    if find_leaf(lev, *idx) is None:
                        neighbor_finer = True
                a1, a2 = [ax for ax in range(3) if ax != axis]
                fo = list(base)
                if side == 1:
                    fo[axis] += scale

                subfaces = []
                if neighbor_finer:
                    half = scale // 2
                    for du in (0, half):
                        for dv in (0, half):
                            o = list(fo)
                            o[a1] += du
                            o[a2] += dv
                            subfaces.append((tuple(o), half))
                else:
                    subfaces.append((tuple(fo), scale))

                # fan each (sub)face from its center to its edge segments so
                # that hanging edge midpoints conform automatically
                for (o, sc) in subfaces:
                    fc = list(o)
                    fc[a1] += sc // 2
                    fc[a2] += sc // 2
                    fidx = vid(*fc)
                    edges = []
                    for (ea, eb_axis) in (((0, 0), a1), ((0, sc), a1), ((0, 0), a2), ((sc, 0), a2)):
                        p = list(o)
                        if eb_axis == a1:
                            p[a2] += ea[1]
                        else:
                            p[a1] += ea[0]
                        q = list(p)
                        q[eb_axis] += sc
                        edges.append((tuple(p), tuple(q), eb_axis))
                    for (p, q, eax) in edges:
                        if edge_is_split(p, eax, sc):
                            m = list(p)
                            m[eax] += sc // 2
                            m = tuple(m)
                            segs = [(p, m), (m, q)]
                        else:
                            segs = [(p, q)]
                        for (sa, sb) in segs:
                            tets.append((cidx, fidx, vid(*sa), vid(*sb)))

    lattice = np.asarray(vert_list, dtype=float)
    vertices = b[:, 0][None, :] + lattice * (s0 / unit)
    # snap center coordinates to their exact configured values
    for c in centers:
        rel = np.round((c - b[:, 0]) / (s0 / unit)).astype(np.int64)
        idx = vert_index.get((int(rel[0]), int(rel[1]), int(rel[2])))
        if idx is None:
            raise ValueError(f"center {c} did not land on a mesh vertex")
        vertices[idx] = c
    elements = np.asarray(tets, dtype=np.int64)
    return _build_mesh(3, vertices, elements, centers, domain, h, grading.seed)


def build_uniform_rect_mesh(domain: Domain, h: float) -> Mesh:
    """Uniform fallback triangulation of a rectangle, every diameter <= h."""
    b = domain.bounds_array()
    s_target = h / math.sqrt(2.0)
    nx = max(1, int(math.ceil((b[0, 1] - b[0, 0]) / s_target)))
    ny = max(1, int(math.ceil((b[1, 1] - b[1, 0]) / s_target)))
    gx = np.linspace(b[0, 0], b[0, 1], nx + 1)
    gy = np.linspace(b[1, 0], b[1, 1], ny + 1)
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    verts = np.column_stack([xx.ravel(), yy.ravel()])

    def nid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            v00, v10, v01, v11 = nid(i, j), nid(i + 1, j), nid(i, j + 1), nid(i + 1, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return _build_mesh(2, verts, np.asarray(tris, dtype=np.int64), np.zeros((0, 2)), domain, h, 0)


def build_uniform_box_mesh(domain: Domain, n: int) -> Mesh:
    """Uniform Kuhn tetrahedralization of a box with n cells per axis (test helper)."""
    b = domain.bounds_array()
    grids = [np.linspace(b[d, 0], b[d, 1], n + 1) for d in range(3)]
    shape = (n + 1, n + 1, n + 1)
    verts = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, 3)

    def nid(i, j, k):
        return (i * shape[1] + j) * shape[2] + k

    kuhn = [
        (0, 1, 3, 7), (0, 1, 5, 7), (0, 4, 5, 7),
        (0, 2, 3, 7), (0, 2, 6, 7), (0, 4, 6, 7),
    ]
    corner_offsets = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0), (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)]
    tets = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                ids = [nid(i + di, j + dj, k + dk) for (di, dj, dk) in corner_offsets]
                for t in kuhn:
                    tets.append(tuple(ids[c] for c in t))
    return _build_mesh(3, verts, np.asarray(tets, dtype=np.int64), np.zeros((0, 3)), domain, None, 0)


# ----------------------------------------------------------------------------
# quality / grading audit
# ----------------------------------------------------------------------------

@dataclass
class QualityReport:
    h_max: float
    h_min: float
    min_quality: float
    grading_ratio_max: float
    patch_radii: tuple
    G1_ok: bool
    G2_ok: bool
    boundary_measure: float | None = None
    boundary_measure_exact: float | None = None

    def lines(self) -> list[str]:
        out = [
            f"h_max              {self.h_max:.6g}",
            f"h_min              {self.h_min:.6g}",
            f"min_quality        {self.min_quality:.6g}",
            f"grading_ratio_max  {self.grading_ratio_max:.6g}",
            f"patch_radii        {', '.join(f'{r:.6g}' for r in self.patch_radii) or '-'}",
            f"G1_ok              {self.G1_ok}",
            f"G2_ok              {self.G2_ok}",
        ]
        if self.boundary_measure is not None:
            out.append(f"boundary_measure   {self.boundary_measure:.12g}")
            out.append(f"boundary_exact     {self.boundary_measure_exact:.12g}")
        return out


def _shape_quality(mesh: Mesh) -> float:
    coords = mesh.element_coords()
    if mesh.dim == 2:
        # minimum angle over all triangles, in radians
        min_ang = np.inf
        for i in range(3):
            a = coords[:, i, :]
            b = coords[:, (i + 1) % 3, :]
            c = coords[:, (i + 2) % 3, :]
            u, v = b - a, c - a
            cosang = np.einsum("ij,ij->i", u, v) / (
                np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
            )
            ang = np.arccos(np.clip(cosang, -1, 1))
            min_ang = min(min_ang, ang.min())
        return float(min_ang)
    # 3D: normalized inradius-to-diameter ratio (1 for regular tet ~ 0.2041*h)
    areas = np.zeros(mesh.num_elements)
    for f in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        u = coords[:, f[1], :] - coords[:, f[0], :]
        v = coords[:, f[2], :] - coords[:, f[0], :]
        areas += 0.5 * np.linalg.norm(np.cross(u, v), axis=1)
    inradius = 3.0 * mesh.volume_K / areas
    ratio = inradius / mesh.h_K
    return float(ratio.min() / 0.2041241452)


def mesh_quality(mesh: Mesh, grading: GradingSpec | None = None) -> QualityReport:
    """Audit the generated mesh: sizes, shape quality, grading law, patch size.

    The grading ratio max_{off-patch K} h_K / (h * r_K) is computed with the
    exact element-to-center distances; G1 holds when it stays below the
    configured slope.  G2 compares the realized patch radius against the
    patch rule.  Both are vacuously true without centers.
    """
    patch = mesh.patch_element_mask()
    off = ~patch
    ratio = 0.0
    h_family = grading.h if grading is not None else (mesh.family_h or mesh.h_max)
    if np.any(off) and len(mesh.nucleus_vertex_ids) > 0:
        r = mesh.r_K[off]
        ratio = float(np.max(mesh.h_K[off] / (h_family * np.maximum(r, 1e-300))))
    patch_radii = []
    for vid in mesh.nucleus_vertex_ids:
        c = mesh.vertices[vid]
        touching = np.any(mesh.elements == vid, axis=1)
        if np.any(touching):
            pts = mesh.vertices[np.unique(mesh.elements[touching])]
            patch_radii.append(float(np.max(np.linalg.norm(pts - c, axis=1))))
    vartheta = grading.vartheta if grading is not None else 1.0
    g1 = ratio <= vartheta * (1 + 1e-9)
    g2 = True
    if grading is not None and len(patch_radii) > 0:
        rho0 = grading.first_ring_radius(mesh.dim)
        # every ring-1 element has diameter <= ~2*rho0 (chord + radius)
        g2 = max(patch_radii) <= 2.5 * rho0 + 1e-12
    bm = bme = None
    if mesh.domain is not None and mesh.domain.kind in ("rect", "box"):
        bfaces = mesh.faces[mesh.boundary_face_flags]
        coords = mesh.vertices[bfaces]
        if mesh.dim == 2:
            bm = float(np.sum(np.linalg.norm(coords[:, 1, :] - coords[:, 0, :], axis=1)))
        else:
            u = coords[:, 1, :] - coords[:, 0, :]
            v = coords[:, 2, :] - coords[:, 0, :]
            bm = float(np.sum(0.5 * np.linalg.norm(np.cross(u, v), axis=1)))
        bme = mesh.domain.boundary_measure()
    return QualityReport(
        h_max=mesh.h_max,
        h_min=mesh.h_min,
        min_quality=_shape_quality(mesh),
        grading_ratio_max=ratio,
        patch_radii=tuple(patch_radii),
        G1_ok=bool(g1),
        G2_ok=bool(g2),
        boundary_measure=bm,
        boundary_measure_exact=bme,
    )


# ----------------------------------------------------------------------------
# plain-text serialization
# ----------------------------------------------------------------------------

def save_mesh(mesh: Mesh, path: str) -> None:
    """Write the mesh in the plain-text exchange format.

    Header ``dim nv ne nf``, then vertex lines (full-precision coordinates),
    element lines (0-based vertex indices), and face lines (vertex indices
    plus a 0/1 boundary flag).
    """
    with open(path, "w") as f:
        f.write(f"{mesh.dim} {mesh.num_vertices} {mesh.num_elements} {mesh.num_faces}\n")
        for v in mesh.vertices:
            f.write(" ".join(repr(float(x)) for x in v) + "\n")
        for e in mesh.elements:
            f.write(" ".join(str(int(i)) for i in e) + "\n")
        for face, flag in zip(mesh.faces, mesh.boundary_face_flags):
            f.write(" ".join(str(int(i)) for i in face) + f" {int(flag)}\n")


def load_mesh(path: str, centers: Sequence | None = None, domain: Domain | None = None) -> Mesh:
    """Read a mesh written by :func:`save_mesh` (or produced externally).

    Faces and boundary flags are re-derived from the element list so that the
    topological invariants hold even for hand-written files; the stored face
    block is only used as a cross-check on counts.
    """
    with open(path) as f:
        dim, nv, ne, nf = (int(x) for x in f.readline().split())
        vertices = np.array(
            [[float(x) for x in f.readline().split()] for _ in range(nv)], dtype=float
        )
        elements = np.array(
            [[int(x) for x in f.readline().split()] for _ in range(ne)], dtype=np.int64
        )
        stored_faces = 0
        for _ in range(nf):
            line = f.readline()
            if line.strip():
                stored_faces += 1
    if stored_faces != nf:
        raise ValueError("face block truncated")
    c = np.asarray(centers, dtype=float) if centers is not None else np.zeros((0, dim))
    if c.ndim == 1 and len(c):
        c = c[None, :]
    return _build_mesh(dim, vertices, elements, c, domain, None, None)
