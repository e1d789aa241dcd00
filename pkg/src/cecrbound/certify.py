"""Certified eigenvalue enclosures from the assembled pieces.

The lower-bound chain: nonconforming Ritz values of the coercively shifted
system feed the convergent projection bound, which the perturbation
correction transfers from the averaged potential to the true one; the upper
bound is the conforming Dirichlet Ritz value.  Every Ritz value entering a
lower bound is first reduced by its residual certificate, and every upper
bound is inflated by its own, so solver error is hedged without interval
arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from cecrbound.assembly import (
    DiscreteSystem,
    assemble_ecr,
    assemble_p1,
    shifted_cecr_matrix,
)
from cecrbound.constants import (
    ConstantsBundle,
    PerturbationData,
    a_h_and_kappa,
    cecr_constant_pw,
    optimal_patch_radius,
    reaction_constant_gamma,
)
from cecrbound.eigen import EigenResult, cg_path_eigenpairs, dense_oracle, smallest_eigenpairs
from cecrbound.geometry import Domain, Mesh
from cecrbound.potential import CellField, PotentialSpec, _per_center_averages

__all__ = [
    "CertificationError",
    "Enclosure",
    "LevelCertification",
    "cecr_lower_bound_positive",
    "cecr_lower_bound_gamma_shift",
    "cecr_lower_bound_convergent",
    "perturbation_correct",
    "confinement_check",
    "min_ball_radius",
    "ceps_diagnostic_p1",
    "certified_ceps_rigorous",
    "eoc",
    "spectral_separation",
    "certify_level",
]


class CertificationError(RuntimeError):
    """Raised when a hypothesis of the certified chain fails (exit code 4)."""


# ----------------------------------------------------------------------------
# bound formulas
# ----------------------------------------------------------------------------

def cecr_lower_bound_positive(mu_kh: float, C_h: float) -> float:
    """mu_k >= mu_kh / (1 + C_h^2 mu_kh), valid for positive cell fields."""
    if mu_kh <= 0:
        raise ValueError("positive-case bound needs a positive Ritz value")
    return mu_kh / (1.0 + C_h * C_h * mu_kh)


def cecr_lower_bound_gamma_shift(mu_kh: float, gamma_h: float, C_h: float) -> float:
    """Classical sup-norm shift baseline (diverges under refinement for Coulomb)."""
    A = mu_kh + gamma_h
    if A <= 0:
        raise ValueError("shifted Ritz value must be positive")
    return A / (1.0 + A * C_h * C_h) - gamma_h


def cecr_lower_bound_convergent(mu_sigma: float, C_h: float, A_h: float, sigma: float) -> float:
    """Convergent lower bound mu_sigma / ((1+A_h)(1+C_h^2 mu_sigma)) - sigma."""
    if mu_sigma <= 0:
        raise CertificationError(
            "shifted system is not positive definite (admissibility failed)"
        )
    return mu_sigma / ((1.0 + A_h) * (1.0 + C_h * C_h * mu_sigma)) - sigma


def perturbation_correct(L_mu_sigma: float, eps_h: float, sigma: float) -> float:
    """Transfer the averaged-potential bound to the true potential."""
    if not 0.0 <= eps_h <= 1.0:
        raise CertificationError("perturbation ratio above 1: certification refused")
    return (1.0 - eps_h) * (L_mu_sigma + sigma) - sigma


# ----------------------------------------------------------------------------
# confinement
# ----------------------------------------------------------------------------

def _boundary_minimum(pot: PotentialSpec, domain: Domain) -> float:
    """Exact-to-solver-precision minimum of V over the domain boundary."""
    centers = pot.centers_array()

    def V(x):
        return float(pot(np.asarray(x, dtype=float)[None, :])[0])

    best = np.inf
    if domain.kind == "ball":
        R = domain.radius
        if pot.dim == 2:
            th = np.linspace(0, 2 * math.pi, 721)
            pts = R * np.column_stack([np.cos(th), np.sin(th)])
            vals = pot(pts)
            i = int(np.argmin(vals))
            res = minimize(lambda t: V(R * np.array([math.cos(t[0]), math.sin(t[0])])),
                           [th[i]], method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15})
            return float(res.fun)
        th = np.linspace(0, math.pi, 181)
        ph = np.linspace(0, 2 * math.pi, 361)
        T, P = np.meshgrid(th, ph, indexing="ij")
        pts = R * np.column_stack(
            [np.sin(T).ravel() * np.cos(P).ravel(),
             np.sin(T).ravel() * np.sin(P).ravel(),
             np.cos(T).ravel()]
        )
        vals = pot(pts)
        i = int(np.argmin(vals))
        x0 = [T.ravel()[i], P.ravel()[i]]
        res = minimize(
            lambda t: V(R * np.array([math.sin(t[0]) * math.cos(t[1]),
                                      math.sin(t[0]) * math.sin(t[1]),
                                      math.cos(t[0])])),
            x0, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15},
        )
        return float(res.fun)

    b = domain.bounds_array()
    dim = b.shape[0]
    for axis in range(dim):
        for side in (0, 1):
            others = [d for d in range(dim) if d != axis]

            def face_point(t):
                x = np.empty(dim)
                x[axis] = b[axis, side]
                for c_, d_ in zip(t, others):
                    x[d_] = min(max(c_, b[d_, 0]), b[d_, 1])
                return x

            grids = [np.linspace(b[d, 0], b[d, 1], 161) for d in others]
            mesh_pts = np.meshgrid(*grids, indexing="ij")
            flat = np.column_stack([m.ravel() for m in mesh_pts])
            pts = np.empty((len(flat), dim))
            pts[:, axis] = b[axis, side]
            for j, d_ in enumerate(others):
                pts[:, d_] = flat[:, j]
            vals = pot(pts)
            i = int(np.argmin(vals))
            res = minimize(lambda t: V(face_point(t)), flat[i],
                           method="Nelder-Mead",
                           options={"xatol": 1e-13, "fatol": 1e-15, "maxiter": 4000})
            best = min(best, float(res.fun))
    return best


def confinement_check(pot: PotentialSpec, domain: Domain, lambda1_upper: float):
    """Exterior potential minimum and the confinement verdict.

    The potential is harmonic away from its centers and tends to zero at
    infinity, so the exterior infimum is attained on the domain boundary;
    the check passes when it exceeds the supplied upper bound for the
    ground state.
    """
    centers = pot.centers_array()
    if not np.all(domain.contains(centers, margin=0.0)):
        raise ValueError("all centers must lie inside the domain")
    sigma_ext = _boundary_minimum(pot, domain)
    return sigma_ext, bool(sigma_ext > lambda1_upper)


def min_ball_radius(pot: PotentialSpec, lambda1: float) -> float:
    """Smallest ball radius with a confined ground state: A + Z_tot/|lambda_1|."""
    if lambda1 >= 0:
        raise ValueError("needs a negative ground-state energy")
    Z = float(sum(pot.charges))
    A = float(np.max(np.linalg.norm(pot.centers_array(), axis=1)))
    if len(pot.charges) == 1 and A == 0.0:
        return Z / abs(lambda1)
    return A + Z / abs(lambda1)


# ----------------------------------------------------------------------------
# certified form-bound constants
# ----------------------------------------------------------------------------

def _p1_neg_reaction(mesh: Mesh, ch: CellField) -> sp.csr_matrix:
    from cecrbound.assembly import _p1_reference, _scatter

    d = mesh.dim
    neg = ch.negative_part()
    m_loc = _p1_reference(d)[None, :, :] * (neg * mesh.volume_K)[:, None, None]
    dofs = mesh.elements
    rows = np.repeat(dofs, d + 1, axis=1)
    cols = np.tile(dofs, (1, d + 1))
    return _scatter(rows, cols, m_loc, mesh.num_vertices)


def ceps_diagnostic_p1(mesh: Mesh, ch: CellField, epsilon: float,
                       p1sys: DiscreteSystem | None = None,
                       shift: float | None = None) -> float:
    """Numerically sharp (non-rigorous) form constant from the P1 Rayleigh quotient.

    Smallest eigenvalue eta_h of eps*grad-grad minus the negative cell
    averages over the Neumann P1 space; the optimal constant is -eta.  The
    Ritz value overestimates eta, so this diagnostic underestimates the
    sharp constant and is reported as a diagnostic, not a certificate.
    ``shift`` should be a lower bound for eta; any admissible analytic
    form constant gives one via eta >= -C_eps.
    """
    if p1sys is None:
        p1sys = assemble_p1(mesh, None, bc="neumann")
    A = (epsilon * p1sys.K - _p1_neg_reaction(mesh, ch)).tocsr()
    if A.shape[0] <= 1500:
        r = dense_oracle(A, p1sys.M, 1)
    else:
        r = smallest_eigenpairs(A, p1sys.M, 1, shift=shift)
    return max(0.0, -float(r.values[0]))


def certified_ceps_rigorous(
    mesh: Mesh,
    ch: CellField,
    epsilon: float,
    alpha: float,
    C_alpha: float,
    sigma_star: float | None = None,
    ecr_sys: DiscreteSystem | None = None,
    max_retries: int = 5,
    solver: str = "auto",
) -> float:
    """Rigorous upper bound for the sharp form constant via an auxiliary solve.

    The scaled reaction field -c_h^-/epsilon defines an auxiliary operator
    whose first eigenvalue is bounded from below by the convergent
    projection bound, using the preliminary admissible pair (alpha, C_alpha)
    with alpha < epsilon for coercivity of the shifted auxiliary form.
    """
    if not 0.0 < alpha < epsilon:
        raise ValueError("need 0 < alpha < epsilon for the preliminary form bound")
    eps_star = alpha / epsilon
    c_star = C_alpha / epsilon
    if sigma_star is None:
        sigma_star = c_star + 0.75
    if ecr_sys is None:
        ecr_sys = assemble_ecr(mesh, ch)
    neg = ch.negative_part()
    n = ecr_sys.n_dof
    cell_ids = ecr_sys.cell_offset + np.arange(mesh.num_elements)
    Cneg = sp.coo_matrix(
        (neg * mesh.volume_K, (cell_ids, cell_ids)), shape=(n, n)
    ).tocsr()
    gamma_star = reaction_constant_gamma(mesh, ch) / epsilon
    a_star = gamma_star / (1.0 - eps_star)
    c_tilde = cecr_constant_pw(mesh)
    for attempt in range(max_retries):
        A = (ecr_sys.K - (1.0 / epsilon) * Cneg + sigma_star * ecr_sys.M0).tocsr()
        res = _solve_smallest(A, ecr_sys.M, 1, solver)
        nu = res.value_lower(0)
        if nu > 0:
            nu_lower = nu / ((1.0 + a_star) * (1.0 + c_tilde**2 * nu)) - sigma_star
            eta_lower = epsilon * nu_lower
            return max(0.0, -eta_lower)
        sigma_star = 1.5 * sigma_star + 1.0
    raise CertificationError("auxiliary shifted system never became positive definite")


# ----------------------------------------------------------------------------
# convergence and separation reporting
# ----------------------------------------------------------------------------

def eoc(values, hs):
    """Local empirical orders log(g_i/g_{i+1}) / log(h_i/h_{i+1})."""
    out = []
    for i in range(len(values) - 1):
        g0, g1 = values[i], values[i + 1]
        if g0 <= 0 or g1 <= 0:
            out.append(None)
            continue
        out.append(math.log(g0 / g1) / math.log(hs[i] / hs[i + 1]))
    return out


def spectral_separation(enclosures):
    """Per-index verdicts: separated (with certified gap) or overlapping."""
    out = []
    for k in range(len(enclosures) - 1):
        u_k = enclosures[k].U
        l_next = enclosures[k + 1].L
        if u_k < l_next:
            out.append({"k": k + 1, "separated": True, "gap": l_next - u_k})
        else:
            out.append({"k": k + 1, "separated": False, "gap": 0.0})
    return out


# ----------------------------------------------------------------------------
# per-level certification pipeline
# ----------------------------------------------------------------------------

@dataclass
class Enclosure:
    k: int
    mu_sigma: float
    L_mu_sigma: float
    L: float
    U: float
    constants: ConstantsBundle
    admissible: bool
    confinement_ok: bool
    sigma_used: float


@dataclass
class LevelCertification:
    h: float
    n_elements: int
    h_max: float
    gamma_h: float
    a_h: float
    eps_star: float
    ceps_diag: float
    ceps_rig: float | None
    rho_opt: float
    sigma_rough: float
    sigma_opt: float | None
    enclosures_rough: list
    enclosures_opt: list | None
    gamma_baseline: list | None
    sigma_ext: float
    confinement_ok: bool
    bundle: ConstantsBundle
    solver_tags: dict = field(default_factory=dict)

    def best_enclosures(self):
        return self.enclosures_opt if self.enclosures_opt else self.enclosures_rough


def _solve_smallest(A, B, k, solver="auto", n_direct_limit_2dlike=400_000,
                    n_direct_limit_3d=90_000, dim=2, tol=1e-9, shift=0.0):
    """Dispatch by size: dense, shift-invert, or the preconditioned iterative path.

    ``shift`` must be a lower bound for the smallest eigenvalue; the SPD
    systems of the pipeline use 0, the indefinite ones pass their rigorous
    form-bound shifts.
    """
    A = A.tocsr()
    B = B.tocsr()
    n = A.shape[0]
    if solver == "dense" or (solver == "auto" and n <= 900):
        return dense_oracle(A, B, k)
    limit = n_direct_limit_2dlike if dim == 2 else n_direct_limit_3d
    if solver == "direct" or (solver == "auto" and n <= limit) or shift != 0.0:
        return smallest_eigenpairs(A, B, k, shift=shift, tol=tol)
    return cg_path_eigenpairs(A, B, k, tol=tol)


def certify_level(
    mesh: Mesh,
    pot: PotentialSpec,
    epsilon: float,
    C_eps: float,
    sigma: float,
    embed: float,
    k_max: int = 3,
    kappa_target: float | None = None,
    compute_gamma_baseline: bool | None = None,
    compute_rigorous_ceps: bool = False,
    rigorous_alpha: float | None = None,
    rigorous_C_alpha: float | None = None,
    solver: str = "auto",
    eig_tol: float = 1e-9,
) -> LevelCertification:
    """Run the full certified pipeline on one mesh level.

    Returns the rough-shift enclosures, the optimal-shift rerun driven by the
    sharp form-constant diagnostic, the sup-norm-shift baseline (2D default),
    and the confinement verdict.  Raises CertificationError when epsilon_h
    exceeds one or the shifted system is not positive definite.
    """
    dim = mesh.dim
    if compute_gamma_baseline is None:
        compute_gamma_baseline = dim == 2

    ch_pc = [
        _per_center_averages(mesh, a, float(Z))
        for a, Z in zip(pot.centers_array(), pot.charges)
    ]
    ch = CellField(np.sum(ch_pc, axis=0), mesh)

    C_h = cecr_constant_pw(mesh)
    gamma_h = reaction_constant_gamma(mesh, ch)
    a_h, kappa = a_h_and_kappa(gamma_h, epsilon, C_eps, sigma)
    if kappa_target is None:
        kappa_target = kappa

    data = PerturbationData(mesh, pot, embed, ch_per_center=ch_pc)
    rho_opt, d_opt = optimal_patch_radius(mesh, ch, pot, embed, data=data)
    eps_star = d_opt / kappa

    ecr = assemble_ecr(mesh, ch)
    A_sigma = shifted_cecr_matrix(ecr, sigma)
    sol = _solve_smallest(A_sigma, ecr.M, k_max, solver, dim=dim, tol=eig_tol)
    admissible = sol.value_lower(0) > 0.0

    # the analytic form bound makes -C_eps a rigorous spectral lower bound for
    # the conforming operator and the diagnostic quotient alike
    p1 = assemble_p1(mesh, pot, bc="dirichlet")
    solU = _solve_smallest(
        (p1.K + p1.CP1).tocsr(), p1.M, k_max, solver, dim=dim, tol=eig_tol,
        shift=-(C_eps + 1.0),
    )
    uppers = [solU.value_upper(k) for k in range(k_max)]

    p1n = assemble_p1(mesh, None, bc="neumann")
    ceps_diag = ceps_diagnostic_p1(mesh, ch, epsilon, p1sys=p1n, shift=-(C_eps + 1.0))
    ceps_rig = None
    if compute_rigorous_ceps:
        alpha = rigorous_alpha if rigorous_alpha is not None else 0.75 * epsilon
        c_alpha = rigorous_C_alpha if rigorous_C_alpha is not None else C_eps
        ceps_rig = certified_ceps_rigorous(
            mesh, ch, epsilon, alpha, c_alpha, ecr_sys=ecr, solver=solver
        )

    bundle = ConstantsBundle(
        C_h_PW=C_h, Gamma_h=gamma_h, A_h=a_h, epsilon=epsilon, C_eps=C_eps,
        sigma=sigma, kappa_sigma=kappa, d_h=d_opt, eps_h=eps_star,
        rho_patch=rho_opt, embed={"embed": embed},
    )

    sigma_ext, conf_ok = (math.nan, False)
    if mesh.domain is not None:
        sigma_ext, conf_ok = confinement_check(pot, mesh.domain, uppers[0])

    def build_enclosures(solx, sig, eps_h, kappa_x, a_hx, bundle_x):
        out = []
        for k in range(k_max):
            mu = solx.value_lower(k)
            Lmu = cecr_lower_bound_convergent(mu, C_h, a_hx, sig)
            L = perturbation_correct(Lmu, eps_h, sig)
            U = uppers[k]
            if L > U:
                raise CertificationError(
                    f"lower bound {L} above upper bound {U} for k={k + 1}: "
                    "hypothesis violated or assembly bug"
                )
            out.append(
                Enclosure(
                    k=k + 1, mu_sigma=float(solx.values[k]), L_mu_sigma=Lmu, L=L,
                    U=U, constants=bundle_x, admissible=admissible,
                    confinement_ok=conf_ok, sigma_used=sig,
                )
            )
        return out

    enclosures_rough = build_enclosures(sol, sigma, eps_star, kappa, a_h, bundle)

    # optimal-shift rerun driven by the sharp form-constant diagnostic
    ceps_for_opt = ceps_rig if ceps_rig is not None else ceps_diag
    sigma_opt = ceps_for_opt + kappa_target
    enclosures_opt = None
    if sigma_opt < sigma:
        try:
            a_h_opt, kappa_opt = a_h_and_kappa(gamma_h, epsilon, ceps_for_opt, sigma_opt)
            eps_opt = d_opt / kappa_opt
            A_opt = shifted_cecr_matrix(ecr, sigma_opt)
            sol_opt = _solve_smallest(A_opt, ecr.M, k_max, solver, dim=dim, tol=eig_tol)
            if sol_opt.value_lower(0) > 0.0:
                bundle_opt = ConstantsBundle(
                    C_h_PW=C_h, Gamma_h=gamma_h, A_h=a_h_opt, epsilon=epsilon,
                    C_eps=ceps_for_opt, sigma=sigma_opt, kappa_sigma=kappa_opt,
                    d_h=d_opt, eps_h=eps_opt, rho_patch=rho_opt,
                    embed={"embed": embed},
                )
                enclosures_opt = build_enclosures(
                    sol_opt, sigma_opt, eps_opt, kappa_opt, a_h_opt, bundle_opt
                )
        except CertificationError:
            enclosures_opt = None  # keep the rough enclosure

    gamma_baseline = None
    if compute_gamma_baseline:
        # the raw Ritz values sit near the physical spectrum; the form bound
        # supplies a practical lower bound for the shift (guarded downstream)
        raw_sys = (ecr.K + ecr.C0).tocsr()
        raw = smallest_eigenpairs(
            raw_sys, ecr.M, k_max, shift=-(C_eps + 2.0) / (1.0 - epsilon)
        )
        gamma_sup = float(np.max(ch.negative_part()))
        gamma_baseline = [
            cecr_lower_bound_gamma_shift(raw.value_lower(k), gamma_sup, C_h)
            for k in range(k_max)
        ]

    return LevelCertification(
        h=mesh.family_h if mesh.family_h is not None else mesh.h_max,
        n_elements=mesh.num_elements,
        h_max=mesh.h_max,
        gamma_h=gamma_h,
        a_h=a_h,
        eps_star=eps_star,
        ceps_diag=ceps_diag,
        ceps_rig=ceps_rig,
        rho_opt=rho_opt,
        sigma_rough=sigma,
        sigma_opt=sigma_opt if enclosures_opt else None,
        enclosures_rough=enclosures_rough,
        enclosures_opt=enclosures_opt,
        gamma_baseline=gamma_baseline,
        sigma_ext=sigma_ext,
        confinement_ok=conf_ok,
        bundle=bundle,
        solver_tags={"cecr": sol.solver_tag, "p1": solU.solver_tag},
    )
