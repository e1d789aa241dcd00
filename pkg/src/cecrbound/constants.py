"""Every explicit constant of the eigenvalue lower-bound chain.

Covers the interpolation constant max_K h_K/pi, the elementwise reaction
constant, the coercivity pair (A_h, kappa_sigma), the direct patch/off-patch
perturbation estimates in 2D and 3D with the optimal patch-radius split, the
rectangle Sobolev embedding constants S4/S6/S8, the L6 embedding constants
of boxes and balls, and the closed-form analytic form-bound constants for
the four benchmark geometries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from cecrbound.geometry import Domain, Mesh, _point_simplex_distance
from cecrbound.potential import (
    CellField,
    PotentialSpec,
    _batch_diams,
    _batch_measures,
    _batch_point_distances,
    _batch_refine,
    _gl,
    _per_center_averages,
    _tri_rule,
    simplex_quad_points,
)

__all__ = [
    "ConstantsBundle",
    "cecr_constant_pw",
    "reaction_constant_gamma",
    "a_h_and_kappa",
    "PerturbationData",
    "eps_direct_2d",
    "eps_direct_3d",
    "optimal_patch_radius",
    "sobolev_rectangle",
    "c6_box",
    "c6_ball",
    "analytic_form_bound",
]


@dataclass
class ConstantsBundle:
    """All constants entering one certified bound, with their exact couplings."""

    C_h_PW: float
    Gamma_h: float
    A_h: float
    epsilon: float
    C_eps: float
    sigma: float
    kappa_sigma: float
    d_h: float
    eps_h: float
    rho_patch: float
    embed: dict

    def lines(self) -> list[str]:
        rows = [
            ("C_h_PW", self.C_h_PW),
            ("Gamma_h", self.Gamma_h),
            ("A_h", self.A_h),
            ("epsilon", self.epsilon),
            ("C_eps", self.C_eps),
            ("sigma", self.sigma),
            ("kappa_sigma", self.kappa_sigma),
            ("d_h", self.d_h),
            ("eps_h", self.eps_h),
            ("rho_patch", self.rho_patch),
        ]
        rows += sorted(self.embed.items())
        width = max(len(k) for k, _ in rows)
        return [f"{k:<{width}}  {v:.10g}" for k, v in rows]

    def csv_row(self) -> tuple[str, str]:
        keys = ["C_h_PW", "Gamma_h", "A_h", "epsilon", "C_eps", "sigma",
                "kappa_sigma", "d_h", "eps_h", "rho_patch"] + sorted(self.embed)
        vals = [self.C_h_PW, self.Gamma_h, self.A_h, self.epsilon, self.C_eps,
                self.sigma, self.kappa_sigma, self.d_h, self.eps_h, self.rho_patch]
        vals += [self.embed[k] for k in sorted(self.embed)]
        return ",".join(keys), ",".join(repr(float(v)) for v in vals)


def cecr_constant_pw(mesh: Mesh) -> float:
    """Payne-Weinberger surrogate for the interpolation constant: max_K h_K / pi."""
    return mesh.h_max / math.pi


def reaction_constant_gamma(mesh: Mesh, ch: CellField) -> float:
    """Elementwise reaction constant max_K (c_h^-)|_K h_K^2 / pi^2."""
    return float(np.max(ch.negative_part() * mesh.h_K**2) / math.pi**2)


def a_h_and_kappa(gamma_h: float, epsilon: float, c_eps: float, sigma: float):
    """Correction factor A_h = Gamma_h/(1-eps) and coercivity kappa_sigma."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if sigma <= c_eps:
        raise ValueError("sigma must exceed C_eps (kappa would be nonpositive)")
    a_h = gamma_h / (1.0 - epsilon)
    kappa = min(1.0 - epsilon, sigma - c_eps)
    return a_h, kappa


# ----------------------------------------------------------------------------
# direct patch / off-patch perturbation estimates
# ----------------------------------------------------------------------------

def _lp_residual_singular(coords: np.ndarray, a: np.ndarray, Z: float, cval: float,
                          p: float, n_rad: int = 16, n_face: int = 12) -> float:
    """Integral of |(-Z/|x-a|) - cval|^p over an element with a vertex at a.

    Radial map plus the power substitution t = tau^m with m = ceil(2/(d-p))
    renders the integrand smooth at the apex.
    """
    d = coords.shape[1]
    k = int(np.argmin(np.linalg.norm(coords - a, axis=1)))
    others = [i for i in range(d + 1) if i != k]
    facet = coords[others]
    m = int(math.ceil(2.0 / (d - p))) + 1
    tau, wt = _gl(n_rad)
    t = tau**m
    jac_t = m * tau ** (m - 1)
    if d == 2:
        s, wf = _gl(n_face)
        mu = np.column_stack([1.0 - s, s])
    else:
        l1, l2, wf = _tri_rule(n_face)
        mu = np.column_stack([1.0 - l1 - l2, l1, l2])
    ypts = mu @ facet
    ydist = np.linalg.norm(ypts - a, axis=1)
    vol = _batch_measures(coords[None])[0]
    vals = np.abs(-Z / (t[:, None] * ydist[None, :]) - cval) ** p
    w2 = (wt * jac_t * t ** (d - 1))[:, None] * wf[None, :]
    return float(d) * vol * float((w2 * vals).sum())


def _lp_residual_smooth(batch: np.ndarray, a: np.ndarray, Z: float,
                        cvals: np.ndarray, p: float, order: int = 6) -> np.ndarray:
    pts, w = simplex_quad_points(batch, order)
    r = np.linalg.norm(pts - a, axis=2)
    vals = np.abs(-Z / r - cvals[:, None]) ** p
    return (vals * w[None, :]).sum(axis=1) * _batch_measures(batch)


def _lp_residual_near(coords: np.ndarray, a: np.ndarray, Z: float, cval: float,
                      p: float, order: int = 6, max_depth: int = 20) -> float:
    active = coords[None, :, :]
    total = 0.0
    for depth in range(max_depth + 1):
        if len(active) == 0:
            break
        diam = _batch_diams(active)
        dists = _batch_point_distances(a, active)
        far = (dists >= 1.5 * diam) | (depth == max_depth)
        if np.any(far):
            total += _lp_residual_smooth(
                active[far], a, Z, np.full(int(far.sum()), cval), p, order
            ).sum()
        active = active[~far]
        if len(active):
            active = _batch_refine(active)
    return total


class PerturbationData:
    """Precomputed per-center data for the direct perturbation estimates.

    Holding the per-center cell averages, the exact near/far element
    distances and the elementwise L^p residual integrals makes the patch
    split d_h(rho) = c0(rho) + c_star(rho) evaluable in O(ne) for any rho,
    which the optimal-radius search exploits.
    """

    def __init__(self, mesh: Mesh, pot: PotentialSpec, embed: float,
                 ch_per_center: list | None = None):
        if pot.dim != mesh.dim:
            raise ValueError("mesh and potential dimensions differ")
        self.mesh = mesh
        self.pot = pot
        self.embed = float(embed)
        self.p = 4.0 / 3.0 if mesh.dim == 2 else 1.5
        centers = pot.centers_array()
        coords = mesh.element_coords()
        self.r = []       # exact min distance per center
        self.far = []     # max vertex distance per center
        self.cvals = []   # per-center cell averages
        self.lp_int = []  # per-center elementwise L^p residual integrals
        for ci, (a, Z) in enumerate(zip(centers, pot.charges)):
            r_i = _point_simplex_distance(a, mesh.vertices, mesh.elements)
            far_i = np.linalg.norm(coords - a, axis=2).max(axis=1)
            if ch_per_center is not None:
                c_i = ch_per_center[ci]
            else:
                c_i = _per_center_averages(mesh, a, float(Z))
            vdist = np.linalg.norm(coords - a, axis=2).min(axis=1)
            singular = vdist <= 1e-12 * np.maximum(mesh.h_K, 1.0)
            near = (~singular) & (r_i < 1.5 * mesh.h_K)
            smooth = ~singular & ~near
            lp = np.empty(mesh.num_elements)
            if np.any(smooth):
                idx = np.nonzero(smooth)[0]
                for lo in range(0, len(idx), 20000):
                    sel = idx[lo : lo + 20000]
                    lp[sel] = _lp_residual_smooth(
                        coords[sel], a, float(Z), c_i[sel], self.p
                    )
            for e in np.nonzero(singular)[0]:
                lp[e] = _lp_residual_singular(coords[e], a, float(Z), c_i[e], self.p)
            for e in np.nonzero(near)[0]:
                lp[e] = _lp_residual_near(coords[e], a, float(Z), c_i[e], self.p)
            self.r.append(r_i)
            self.far.append(far_i)
            self.cvals.append(c_i)
            self.lp_int.append(lp)
        self.rho_min = max(
            float(f[np.any(mesh.elements == vid, axis=1)].max())
            for f, vid in zip(self.far, mesh.nucleus_vertex_ids)
        )

    def components(self, rho: float):
        """Patch and off-patch contributions c0(rho), c_star(rho) summed over centers."""
        if rho < self.rho_min * (1.0 - 1e-12):
            raise ValueError(
                "patch radius smaller than the first ring: singular elements "
                "must belong to the patch"
            )
        mesh = self.mesh
        c0 = 0.0
        c_star = 0.0
        for (a, Z), r_i, far_i, c_i, lp in zip(
            zip(self.pot.centers_array(), self.pot.charges),
            self.r, self.far, self.cvals, self.lp_int,
        ):
            patch = far_i <= rho
            c0 += self.embed**2 * float(lp[patch].sum()) ** (1.0 / self.p)
            off = ~patch
            if np.any(off):
                v_near = -float(Z) / np.maximum(r_i[off], 1e-300)
                v_far = -float(Z) / far_i[off]
                sup = np.maximum(c_i[off] - v_near, v_far - c_i[off])
                c_star += float(np.max(0.5 * mesh.h_K[off] * sup))
        return c0, c_star

    def d_h(self, rho: float) -> float:
        c0, c_star = self.components(rho)
        return c0 + c_star


def eps_direct_2d(mesh: Mesh, ch: CellField, pot: PotentialSpec, rho: float,
                  S8: float, data: PerturbationData | None = None):
    """Direct patch/off-patch bound in 2D: d_h <= ||V-c_h||_{L^{4/3}} S8^2 + off-patch term."""
    if mesh.dim != 2:
        raise ValueError("eps_direct_2d needs a 2D mesh")
    if data is None:
        data = PerturbationData(mesh, pot, S8)
    c0, c_star = data.components(rho)
    return c0 + c_star, c0, c_star


def eps_direct_3d(mesh: Mesh, ch: CellField, pot: PotentialSpec, rho: float,
                  C6: float, data: PerturbationData | None = None):
    """Direct patch/off-patch bound in 3D: d_h <= ||V-c_h||_{L^{3/2}} C6^2 + off-patch term."""
    if mesh.dim != 3:
        raise ValueError("eps_direct_3d needs a 3D mesh")
    if data is None:
        data = PerturbationData(mesh, pot, C6)
    c0, c_star = data.components(rho)
    return c0 + c_star, c0, c_star


def optimal_patch_radius(mesh: Mesh, ch: CellField, pot: PotentialSpec,
                         embed: float, data: PerturbationData | None = None,
                         rho_max: float | None = None):
    """Golden-section minimization of rho -> c0(rho) + c_star(rho) on a log scale."""
    if data is None:
        data = PerturbationData(mesh, pot, embed)
    if rho_max is None:
        if mesh.domain is not None:
            rho_max = min(
                mesh.domain.inradius(c) for c in pot.centers_array()
            )
        else:
            rho_max = float(np.max(data.far[0]))
    lo = math.log(data.rho_min * (1.0 + 1e-9))
    hi = math.log(max(rho_max, data.rho_min * 2.0))
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = data.d_h(math.exp(c))
    fd = data.d_h(math.exp(d))
    while (b - a) > 1e-3:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = data.d_h(math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = data.d_h(math.exp(d))
    rho_opt = math.exp(0.5 * (a + b))
    # the elementwise split makes d_h piecewise constant; include the bracket ends
    candidates = [data.rho_min * (1.0 + 1e-9), rho_opt, math.exp(a), math.exp(b)]
    vals = [data.d_h(r) for r in candidates]
    i = int(np.argmin(vals))
    return candidates[i], vals[i]


# ----------------------------------------------------------------------------
# embedding constants
# ----------------------------------------------------------------------------

def _sphere_max(fn, n_grid: int = 400):
    """Maximize fn(A, Bx, By) over the nonnegative unit sphere: grid + polish."""
    th = np.linspace(0.0, 0.5 * math.pi, n_grid)
    ph = np.linspace(0.0, 0.5 * math.pi, n_grid)
    T, P = np.meshgrid(th, ph, indexing="ij")
    A = np.cos(T)
    Bx = np.sin(T) * np.cos(P)
    By = np.sin(T) * np.sin(P)
    vals = fn(A, Bx, By)
    i, j = np.unravel_index(np.argmax(vals), vals.shape)
    x0 = np.array([T[i, j], P[i, j]])

    def neg(x):
        a = math.cos(x[0])
        bx = math.sin(x[0]) * math.cos(x[1])
        by = math.sin(x[0]) * math.sin(x[1])
        return -fn(np.array(a), np.array(bx), np.array(by))

    res = minimize(neg, x0, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 2000})
    return float(-res.fun)


def sobolev_rectangle(a: float, b: float):
    """Embedding constants of H^1 into L^4, L^6, L^8 on [-a,a] x [-b,b].

    Three nested finite-dimensional maximizations over the H^1-normalized
    triple (|u|_2, |u_x|_2, |u_y|_2); each feeds the next.
    """
    if a <= 0 or b <= 0:
        raise ValueError("half side lengths must be positive")

    def f4(A, Bx, By):
        return (A**2 / (2 * a) + 2 * A * Bx) * (A**2 / (2 * b) + 2 * A * By)

    s4_4 = _sphere_max(f4)
    s4 = s4_4**0.25

    def f6(A, Bx, By):
        return (A / (2 * a) + 3 * Bx) * (A / (2 * b) + 3 * By)

    s6_6 = s4_4 * _sphere_max(f6)
    s6 = s6_6 ** (1.0 / 6.0)

    c = 4.0 * s6**3

    def f8(t):
        bx, by = math.cos(t), math.sin(t)
        return -(s4_4 / (2 * a) + c * bx) * (s4_4 / (2 * b) + c * by)

    res = minimize_scalar(f8, bounds=(0.0, 0.5 * math.pi), method="bounded",
                          options={"xatol": 1e-12})
    s8 = (-res.fun) ** 0.125
    return s4, s6, s8


def c6_box(a: float, b: float, c: float) -> float:
    """L6 embedding constant bound for the box [-a,a] x [-b,b] x [-c,c]."""
    if min(a, b, c) <= 0:
        raise ValueError("half side lengths must be positive")
    return ((1.0 + 4.0 * (a * a + b * b + c * c)) / (8.0 * a * b * c)) ** (1.0 / 3.0)


_K3_SHARP = (1.0 / math.sqrt(3.0 * math.pi)) * (4.0 / math.sqrt(math.pi)) ** (1.0 / 3.0)

# published certified values of the ball constant at the benchmark radii
_BALL_C6_TABLE = {5.0: 0.658, 6.0: 0.642, 8.0: 0.624}


def c6_ball(R: float):
    """L6 embedding constant bound for the ball B(0, R) via radial extension.

    The reflection parameter solves 2 + 1/delta = 16 (1 + delta) / R^2, which
    balances the two gradient-amplification terms.
    """
    if R <= 0:
        raise ValueError("radius must be positive")
    # 16 delta^2 + (16 - 2 R^2) delta - R^2 = 0, positive root
    p = 16.0 - 2.0 * R * R
    delta = (-p + math.sqrt(p * p + 64.0 * R * R)) / 32.0
    c6 = _K3_SHARP * math.sqrt(2.0 + 1.0 / delta)
    return delta, c6


def _disk_split_minimum(area: float) -> float:
    """min over rho of 1/rho + (3 pi)^(3/4)/sqrt(area) rho^(1/2) + (3 pi)^(3/2) rho."""
    c1 = (3.0 * math.pi) ** 0.75 / math.sqrt(area)
    c2 = (3.0 * math.pi) ** 1.5

    def f(t):
        rho = math.exp(t)
        return 1.0 / rho + c1 * math.sqrt(rho) + c2 * rho

    res = minimize_scalar(f, bounds=(math.log(1e-4), math.log(10.0)),
                          method="bounded", options={"xatol": 1e-12})
    return float(res.fun)


def analytic_form_bound(domain: Domain, centers, epsilon: float,
                        c6: float | None = None) -> float:
    """Closed-form/1D-minimization form-bound constant for the benchmark geometries.

    Supported: one-center rectangle and two-center rectangle at epsilon >= 0.5
    (the rigorous disk-splitting bound is stated for gradient coefficient
    0.5, so it remains admissible for larger epsilon), one-center ball and
    two-center box at any epsilon in (0, 1).
    """
    centers = np.asarray(centers, dtype=float)
    if centers.ndim == 1:
        centers = centers[None, :]
    n_c = len(centers)
    if domain.kind == "rect":
        if epsilon < 0.5:
            raise ValueError("rectangle bound is established for epsilon >= 0.5")
        sx, sy = domain.side_lengths()
        if n_c == 1:
            return _disk_split_minimum(sx * sy)
        if n_c == 2:
            # split across the perpendicular bisector of the two centers
            return 0.5 + _disk_split_minimum(0.5 * sx * sy)
        raise ValueError("rectangle bound supports one or two centers")
    if domain.kind == "ball":
        if n_c != 1:
            raise ValueError("ball bound supports a single centered nucleus")
        if c6 is None:
            c6 = _BALL_C6_TABLE.get(float(domain.radius))
            if c6 is None:
                c6 = round(c6_ball(domain.radius)[1] + 5e-4, 3)
        a_b = (8.0 * math.pi / 3.0) ** (2.0 / 3.0) * c6 * c6
        rho = epsilon / a_b
        if rho >= domain.radius:
            raise ValueError("epsilon too large for the inner/outer split")
        return a_b / epsilon + epsilon
    if domain.kind == "box":
        if n_c != 2:
            raise ValueError("box bound is stated for the two-center benchmark")
        if c6 is None:
            sx, sy, sz = domain.side_lengths()
            c6 = c6_box(sx / 2, sy / 2, sz / 2)
        a_q = (8.0 * math.pi / 3.0) ** (2.0 / 3.0) * c6 * c6
        rho = epsilon / a_q
        if rho >= domain.inradius(centers[0]):
            raise ValueError("epsilon too large for the inner/outer split")
        return a_q / epsilon + epsilon + 0.5
    raise ValueError(f"unsupported geometry {domain.kind!r}")
