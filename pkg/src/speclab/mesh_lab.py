"""Discrete potential theory on a perturbed warped surface.

The surface carries the metric dr^2 + f(r, θ)^2 dθ^2 with
f = h(r) (1 + δ χ(r) cos mθ), where h is the warping of a two-dimensional
model and χ is a C^2 bump.  Vertices sit on a polar grid r_i = i Δr,
θ_j = j Δθ, with a single pole vertex at r = 0.  The Laplacian is the
finite-volume five-point operator in divergence form, assembled as a
symmetric stiffness matrix A with Δu = -A u / vol.

Band and level integrals use the quadrilateral cells between rings i and
i+1.  Each cell contributes the fraction of its corner range of the field
that falls inside the band, which keeps the band sums second order without
extracting contours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pyamg
from numpy.polynomial import Polynomial
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg

from .errors import (
    BadWindow,
    CurvatureViolation,
    EmptyBand,
    NonmonotoneExhaustion,
    OutOfRange,
    SolverFailure,
)
from . import model_geometry as mg

SOLVER_RTOL = 1e-10
POLE_RINGS = 4            # log splice inside 4 Δr
CONVERGENCE_TOL = 5e-3    # relative change of the corrected kernel between the last two levels
INNER_RING = 1.0
THIN_BAND = 4             # thin bands are 4 grid spacings wide
FIELD_CSV_HEADER = "r,theta,f,K,G,b,gradb"
IDENTITY_KEYS = ("coarea_err", "flux_err", "deltab_resid", "max_gradb", "I_plus", "I_minus", "clamped_fraction")

# C^2 bump on [0, 1] with unit maximum
_BUMP = 64 * Polynomial([0, 1]) ** 3 * Polynomial([1, -1]) ** 3


@dataclass(frozen=True)
class Perturbation:
    delta: float = 0.0
    r_lo: float = 3.0
    r_hi: float = 6.0
    mode_m: int = 3

    def chi(self, r, deriv: int = 0):
        r = np.asarray(r, dtype=float)
        w = self.r_hi - self.r_lo
        y = (r - self.r_lo) / w
        out = np.zeros_like(r)
        inside = (y > 0) & (y < 1)
        out[inside] = _BUMP.deriv(deriv)(y[inside]) / w**deriv
        return out


@dataclass(frozen=True, eq=False)
class DiscreteManifold:
    """Polar-grid surface; vertex arrays have shape (Nr+1, Ntheta), row 0 is the pole."""

    Nr: int
    Ntheta: int
    R_max: float
    perturbation: Perturbation
    geom: mg.ModelGeometry      # n = 2 model re-solved on the half grid, Green kernel filled
    f: np.ndarray               # vertices
    f_rface: np.ndarray         # (Nr, Ntheta) at r_{i+1/2}, θ_j
    f_tface: np.ndarray         # (Nr+1, Ntheta) at r_i, θ_{j+1/2}
    f_cell: np.ndarray          # (Nr, Ntheta) at r_{i+1/2}, θ_{j+1/2}
    K: np.ndarray               # Gauss curvature at vertices
    K_cell: np.ndarray          # Gauss curvature at cell centres
    H_eff: np.ndarray           # per cell ring: max_θ max(-K, 1)
    H_env: np.ndarray           # non-increasing majorant of H_eff
    comparison: mg.ModelGeometry    # model whose H bounds the curvature from below; b is measured against it
    h_vertex: np.ndarray        # unperturbed warping at r_i
    h_face: np.ndarray          # unperturbed warping at r_{i+1/2}
    envelope: float | None = None

    @property
    def delta(self) -> float:
        return self.perturbation.delta

    @property
    def dr(self) -> float:
        return self.R_max / self.Nr

    @property
    def dtheta(self) -> float:
        return 2 * math.pi / self.Ntheta

    @property
    def r(self):
        return self.dr * np.arange(self.Nr + 1)

    @property
    def theta(self):
        return self.dtheta * np.arange(self.Ntheta)

    @property
    def r_cell(self):
        return self.dr * (np.arange(self.Nr) + 0.5)

    @property
    def size(self) -> int:
        return 1 + self.Nr * self.Ntheta

    @property
    def cell_volumes(self):
        """Finite-volume weight per vertex (flat, pole first)."""
        v = self.__dict__.get("_vol")
        if v is None:
            v = np.empty(self.size)
            v[0] = math.pi * (0.5 * self.dr) ** 2
            v[1:] = (self.f[1:] * self.dr * self.dtheta).ravel()
            object.__setattr__(self, "_vol", v)
        return v

    @property
    def quad_areas(self):
        """Area of each quadrilateral cell between rings i and i+1."""
        return self.f_cell * self.dr * self.dtheta

    @property
    def laplacian_stencil(self) -> sparse.csr_matrix:
        """Symmetric stiffness matrix A with (-Δu) = A u / vol."""
        A = self.__dict__.get("_A")
        if A is None:
            A = _assemble(self)
            object.__setattr__(self, "_A", A)
        return A

    def flat(self, u):
        """(Nr+1, Ntheta) vertex array to the flat unknown vector."""
        u = np.asarray(u)
        return np.concatenate([[u[0, 0]], u[1:].ravel()])

    def grid(self, x):
        """Flat vector back to a (Nr+1, Ntheta) array, pole row repeated."""
        x = np.asarray(x)
        out = np.empty((self.Nr + 1, self.Ntheta), dtype=x.dtype)
        out[0] = x[0]
        out[1:] = x[1:].reshape(self.Nr, self.Ntheta)
        return out

    def apply_laplacian(self, u):
        """Δu at every vertex for a flat vector u (rows at the outer ring are not meaningful)."""
        return -(self.laplacian_stencil @ u) / self.cell_volumes


def _assemble(mesh: DiscreteManifold) -> sparse.csr_matrix:
    Nr, Nt = mesh.Nr, mesh.Ntheta
    dr, dt = mesh.dr, mesh.dtheta
    idx = np.empty((Nr + 1, Nt), dtype=np.int64)
    idx[0] = 0
    idx[1:] = 1 + np.arange(Nr * Nt).reshape(Nr, Nt)
    # radial faces between rings i and i+1 (ring 0 is the pole)
    wr = mesh.f_rface * dt / dr
    a_r, b_r = idx[:-1].ravel(), idx[1:].ravel()
    # angular faces on rings 1..Nr
    wt = dr / (mesh.f_tface[1:] * dt)
    a_t = idx[1:].ravel()
    b_t = np.roll(idx[1:], -1, axis=1).ravel()
    a = np.concatenate([a_r, a_t])
    b = np.concatenate([b_r, b_t])
    w = np.concatenate([wr.ravel(), wt.ravel()])
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([a, b, b, a])
    vals = np.concatenate([w, w, -w, -w])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(mesh.size, mesh.size))


# ---------------------------------------------------------------- build mesh

def build_mesh(geom: mg.ModelGeometry, perturbation: Perturbation | dict | None = None,
               Nr: int = 600, Ntheta: int = 256, R_max: float = 12.0,
               envelope: float | None = None) -> DiscreteManifold:
    """Polar grid for f = h (1 + δ χ cos mθ) on [0, R_max].

    ``envelope`` declares a constant curvature budget; -K above it raises
    CurvatureViolation.  The measured non-increasing envelope H_env is
    always reported.
    """
    if geom.n != 2:
        raise BadWindow(f"meshes are two-dimensional, got n = {geom.n}")
    p = perturbation if isinstance(perturbation, Perturbation) else Perturbation(**(perturbation or {}))
    if p.delta < 0 or p.delta >= 1:
        raise BadWindow(f"need 0 <= delta < 1, got {p.delta}")
    if p.delta > 0 and not (1 < p.r_lo < p.r_hi < R_max - 2):
        raise BadWindow(f"perturbation support [{p.r_lo}, {p.r_hi}] not inside (1, R_max - 2)")
    if Ntheta < 16 * max(p.mode_m, 1):
        raise BadWindow(f"Ntheta = {Ntheta} does not resolve mode {p.mode_m} (need >= 16 m)")
    if Nr < 8:
        raise BadWindow("need Nr >= 8")
    dr = R_max / Nr
    # half-grid model: every vertex and face radius is a node
    g = mg.build_geometry(geom.profile, 2, R_max + 1.0, dr=0.5 * dr)
    g = mg.green_kernel_model(g)
    theta = 2 * math.pi / Ntheta * np.arange(Ntheta)
    th_half = theta + math.pi / Ntheta

    def warp(k_nodes, th):
        rr = g.r[k_nodes]
        hh = np.exp(g.log_h[k_nodes])
        hh[rr == 0] = 0.0
        mod = 1 + p.delta * p.chi(rr)[:, None] * np.cos(p.mode_m * th)[None, :]
        return hh[:, None] * mod

    kv = 2 * np.arange(Nr + 1)
    kh = 2 * np.arange(Nr) + 1
    f = warp(kv, theta)
    f_rface = warp(kh, theta)
    f_tface = warp(kv, th_half)
    f_cell = warp(kh, th_half)
    K = _gauss_curvature(g, p, kv, theta)
    Kc = _gauss_curvature(g, p, kh, th_half)
    H_eff = np.maximum(np.max(-Kc, axis=1), 1.0)
    H_env = np.maximum.accumulate(H_eff[::-1])[::-1]
    if envelope is not None and np.any(-Kc > envelope):
        raise CurvatureViolation(f"-K reaches {np.max(-Kc):.6g} above the declared envelope {envelope}")
    comp = g if p.delta == 0 else _comparison_model(g, dr, H_env, R_max)
    h = np.exp(g.log_h)
    h[0] = 0.0
    return DiscreteManifold(Nr, Ntheta, float(R_max), p, g, f, f_rface, f_tface, f_cell,
                            K, Kc, H_eff, H_env, comp, h[kv], h[kh], envelope)


def _comparison_model(g, dr, H_env, R_max):
    """Model for the tabulated envelope, joined to the base profile beyond the mesh."""
    rc = dr * (np.arange(H_env.size) + 0.5)
    base = g.profile
    r_tab = np.concatenate([[0.0], rc, [R_max + 1.0]])
    H_tab = np.concatenate([[H_env[0]], H_env, [float(base.evaluate(np.array([R_max + 1.0]))[0])]])
    prof = mg.tabulated(r_tab, H_tab)
    # the tabulated class is not integrable; the tail is the base one
    object.__setattr__(prof, "asymptotic_class", base.asymptotic_class)
    object.__setattr__(prof, "limit", base.limit)
    cg_ = mg.build_geometry(prof, 2, R_max + 1.0, dr=0.5 * dr)
    return mg.green_kernel_model(cg_)


def _gauss_curvature(g, p, k_nodes, th):
    """K = -f_rr / f from h'' = H h, h' = φ h and the bump derivatives."""
    rr = g.r[k_nodes]
    H = g.profile.evaluate(rr)
    phi = g.phi[k_nodes]
    c = np.cos(p.mode_m * th)[None, :]
    d = p.delta
    c0, c1, c2 = (p.chi(rr, k)[:, None] for k in range(3))
    with np.errstate(invalid="ignore"):
        num = H[:, None] * (1 + d * c0 * c) + 2 * phi[:, None] * d * c1 * c + d * c2 * c
        K = -num / (1 + d * c0 * c)
    K[rr == 0] = -H[rr == 0][:, None] * np.ones_like(c)   # perturbation vanishes near the pole
    return K


# --------------------------------------------------------------- green kernel

@dataclass(eq=False)
class DiscreteGreenKernel:
    G: np.ndarray                 # (Nr+1, Ntheta), final level, log-spliced near the pole
    levels: list                  # flat raw solutions G_j (zero beyond their ring)
    radii: list                   # exhaustion radii as realised on the grid
    rings: list
    pole_radius: float
    ell_estimate: float
    window_valid: tuple
    tail_shift: float             # model kernel at the last radius
    residuals: list = field(default_factory=list)

    @property
    def G_corrected(self):
        """Final kernel plus the model tail beyond the last Dirichlet ring."""
        return self.G + self.tail_shift


class RadialPreconditioner:
    """Exact inverse of the unperturbed operator on the disc of ring I.

    With f = h(r) the operator commutes with rotations, so an FFT in θ
    leaves one tridiagonal system in r per Fourier mode.  Only the mean
    mode touches the pole; it is solved for q = Ntheta * p, which keeps
    that system symmetric.
    """

    def __init__(self, mesh: DiscreteManifold, I: int):
        Nt, dr, dt = mesh.Ntheta, mesh.dr, mesh.dtheta
        self.Nt, self.I = Nt, I
        K = Nt // 2 + 1
        wr = mesh.h_face[:I] * dt / dr               # faces r_{1/2} .. r_{I-1/2}
        wt = dr / (mesh.h_vertex[1:I] * dt)          # rings 1..I-1
        lam = 2 - 2 * np.cos(dt * np.arange(K))
        diag = np.empty((I, K))
        lower = np.zeros((I, K))
        upper = np.zeros((I, K))
        diag[0] = 1.0
        diag[0, 0] = wr[0]
        upper[0, 0] = -wr[0]
        diag[1:] = (wr[:-1] + wr[1:])[:, None] + wt[:, None] * lam[None, :]
        lower[1, 0] = -wr[0]
        lower[2:] = -wr[1:-1, None]
        upper[1:-1] = -wr[1:-1, None]
        # forward elimination once; the rhs sweep is repeated per call
        c = np.zeros((I, K))
        d = np.empty((I, K))
        d[0] = diag[0]
        c[0] = upper[0] / d[0]
        for i in range(1, I):
            d[i] = diag[i] - lower[i] * c[i - 1]
            c[i] = upper[i] / d[i]
        self.lower, self.c, self.d = lower, c, d

    def solve(self, x):
        Nt, I = self.Nt, self.I
        y = np.zeros((I, Nt // 2 + 1), dtype=complex)
        y[0, 0] = x[0]
        y[1:] = np.fft.rfft(x[1:].reshape(I - 1, Nt), axis=1)
        lower, c, d = self.lower, self.c, self.d
        y[0] = y[0] / d[0]
        for i in range(1, I):
            y[i] = (y[i] - lower[i] * y[i - 1]) / d[i]
        for i in range(I - 2, -1, -1):
            y[i] -= c[i] * y[i + 1]
        out = np.empty_like(x)
        out[0] = y[0, 0].real / Nt
        out[1:] = np.fft.irfft(y[1:], n=Nt, axis=1).ravel()
        return out

    def operator(self):
        n = 1 + (self.I - 1) * self.Nt
        return LinearOperator((n, n), matvec=self.solve, dtype=float)


def _solve_level(mesh, I, preconditioner="radial"):
    m = 1 + (I - 1) * mesh.Ntheta
    A_sub = mesh.laplacian_stencil[:m, :m].tocsr()
    rhs = np.zeros(m)
    rhs[0] = 1.0
    if preconditioner == "radial":
        M = RadialPreconditioner(mesh, I).operator()
    elif preconditioner == "amg":
        M = pyamg.smoothed_aggregation_solver(A_sub, symmetry="symmetric", max_coarse=500).aspreconditioner()
    else:
        raise BadWindow(f"unknown preconditioner {preconditioner!r}")
    x, info = cg(A_sub, rhs, rtol=SOLVER_RTOL, atol=0.0, maxiter=2000, M=M)
    res = float(np.linalg.norm(rhs - A_sub @ x) / np.linalg.norm(rhs))
    if info != 0 or not res < 10 * SOLVER_RTOL:
        raise SolverFailure(f"linear solve stopped with relative residual {res:.3g} (info {info})")
    return x, res


def solve_green(mesh: DiscreteManifold, exhaustion_radii=None, convergence_tol: float = CONVERGENCE_TOL,
                inner_ring: float = INNER_RING, preconditioner: str = "radial",
                extrapolate: bool = True) -> DiscreteGreenKernel:
    """Dirichlet Green kernels with a unit source at the pole on increasing discs.

    Each level j is zero on the ring nearest R_j.  The reported kernel is
    the last level with the model tail added back and, by default, one
    Richardson step across the last two levels.  It is spliced with the
    two-dimensional log asymptotic inside POLE_RINGS Δr.  G is stored
    without the tail shift, so it vanishes on the last Dirichlet ring.
    """
    if exhaustion_radii is None:
        exhaustion_radii = (mesh.R_max - 3.0, mesh.R_max - 1.5, mesh.R_max)
    radii = [float(x) for x in exhaustion_radii]
    if len(radii) < 2 or any(b <= a for a, b in zip(radii[:-1], radii[1:])):
        raise BadWindow("need at least two increasing exhaustion radii")
    if radii[-1] > mesh.R_max + 1e-12 or radii[0] <= inner_ring + 1:
        raise BadWindow(f"exhaustion radii must lie in ({inner_ring + 1}, R_max]")
    rings = [int(round(R / mesh.dr)) for R in radii]
    if len(set(rings)) != len(rings):
        raise BadWindow("exhaustion radii collide on the grid")
    Nt = mesh.Ntheta
    levels, residuals = [], []
    prev = None
    for I in rings:
        m = 1 + (I - 1) * Nt
        x, res = _solve_level(mesh, I, preconditioner)
        full = np.zeros(mesh.size)
        full[:m] = x
        if np.min(x) < -1e-9 * x[0]:
            raise NonmonotoneExhaustion(f"negative kernel value {np.min(x):.3g} at ring {I}")
        if prev is not None and np.any(full - prev < -1e-8 * x[0]):
            raise NonmonotoneExhaustion(f"level at ring {I} below the previous level")
        levels.append(full)
        residuals.append(res)
        prev = full
    geom = mesh.geom
    # beyond the perturbation the radial mode of the full kernel exceeds a
    # level by exactly the model kernel at its radius
    gR = [float(np.exp(geom.log_green[2 * I])) for I in rings]
    Gc = [mesh.grid(L) + g for L, g in zip(levels, gR)]
    tail = gR[-1]
    # convergence window from the tail-corrected last two levels
    I1 = rings[-2]
    rel = np.max(np.abs(Gc[-1][1:I1] - Gc[-2][1:I1]) / Gc[-1][1:I1], axis=1)
    bad = np.nonzero(rel > convergence_tol)[0]
    r_out = mesh.dr * (bad[0] if bad.size else I1 - 1)
    if r_out <= inner_ring:
        raise SolverFailure("exhaustion has not converged on any window")
    final = Gc[-1].copy()
    if extrapolate:
        # the remaining truncation error scales like the model kernel at the
        # Dirichlet radius; eliminate it between the last two levels
        w = gR[-1] / (gR[-2] - gR[-1])
        final[:I1] += w * (Gc[-1][:I1] - Gc[-2][:I1])
    G = final - tail
    # log splice near the pole
    k = POLE_RINGS
    rk = k * mesh.dr
    G[1:k] = G[k][None, :] - np.log(mesh.r[1:k] / rk)[:, None] / (2 * math.pi)
    G[0] = np.inf
    # monitoring ring one unit inside the last Dirichlet ring
    mon = int(round((radii[-1] - 1.0) / mesh.dr))
    ell = float(np.max(G[mon])) + tail
    return DiscreteGreenKernel(G=G, levels=levels, radii=[mesh.dr * I for I in rings], rings=rings,
                               pole_radius=rk, ell_estimate=ell, window_valid=(inner_ring, r_out),
                               tail_shift=tail, residuals=residuals)


# ------------------------------------------------------------- fake distance

@dataclass(eq=False)
class FakeDistanceField:
    b: np.ndarray                 # (Nr+1, Ntheta); nan where the kernel is not representable
    grad_norm: np.ndarray         # (Nr, Ntheta) per quadrilateral cell
    grad_vertex: np.ndarray       # (Nr+1, Ntheta) central differences, nan on the pole and outer ring
    laplacian_b: np.ndarray       # (Nr+1, Ntheta)
    window_valid: tuple
    mesh: DiscreteManifold
    kernel: DiscreteGreenKernel
    model: mg.ModelGeometry       # the model kernel that b reparametrises
    checks: dict = field(default_factory=dict)

    def window_cells(self):
        lo, hi = self.window_valid
        rc = self.mesh.r_cell
        return (rc > lo) & (rc < hi)

    def window_vertices(self):
        lo, hi = self.window_valid
        r = self.mesh.r
        return (r > lo) & (r < hi)


def _cell_gradient_sq(mesh, u):
    """|∇u|^2 at cell centres from the four corner values."""
    u0, u1 = u[:-1], u[1:]
    u0n, u1n = np.roll(u0, -1, axis=1), np.roll(u1, -1, axis=1)
    with np.errstate(invalid="ignore"):     # masked vertices propagate as nan
        ur = 0.5 * ((u1 + u1n) - (u0 + u0n)) / mesh.dr
        ut = 0.5 * ((u0n + u1n) - (u0 + u1)) / mesh.dtheta
        return ur * ur + (ut / mesh.f_cell) ** 2


def _vertex_gradient_sq(mesh, u):
    out = np.full(u.shape, np.nan)
    ur = (u[2:] - u[:-2]) / (2 * mesh.dr)
    ut = (np.roll(u[1:-1], -1, axis=1) - np.roll(u[1:-1], 1, axis=1)) / (2 * mesh.dtheta)
    out[1:-1] = ur * ur + (ut / mesh.f[1:-1]) ** 2
    return out


def _corners(u):
    u0, u1 = u[:-1], u[1:]
    return np.stack([u0, np.roll(u0, -1, axis=1), u1, np.roll(u1, -1, axis=1)])


def band_fraction(u, lo, hi):
    """Fraction of each cell with lo <= u <= hi, assuming u spread uniformly over its corner range."""
    c = _corners(u)
    umin, umax = c.min(axis=0), c.max(axis=0)
    span = umax - umin
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = (np.minimum(umax, hi) - np.maximum(umin, lo)) / span
    flat = span <= 0
    frac[flat] = ((umin[flat] >= lo) & (umin[flat] <= hi)).astype(float)
    frac = np.clip(np.nan_to_num(frac, nan=0.0), 0.0, 1.0)
    return frac


def fake_distance(mesh: DiscreteManifold, kernel: DiscreteGreenKernel, geom: mg.ModelGeometry | None = None,
                  grad_margin: float = 0.02, deltab_tol: float = 0.05, radial_tol: float = 0.02) -> FakeDistanceField:
    """b = G_H^{-1}(G + G_H(R_last)) per vertex, with |∇b| and Δb.

    The model kernel at the last radius is added back before inversion, so
    the truncated kernel is compared with the full model kernel rather than
    with one that vanishes on the Dirichlet ring.  Vertices whose kernel
    value is not representable (the pole) are masked with nan.
    """
    g = mesh.comparison if geom is None else mg.green_kernel_model(geom) if geom.log_green is None else geom
    Gc = kernel.G_corrected
    I = kernel.rings[-1]
    b = np.full(Gc.shape, np.nan)
    ok = np.isfinite(Gc) & (Gc > 0)
    ok[I:] = False
    with np.errstate(divide="ignore"):
        ok &= np.log(np.where(ok, Gc, 1.0)) <= g.log_green[1]
    b[ok] = mg.inverse_green(g, Gc[ok])
    b[0] = 0.0
    grad = np.sqrt(_cell_gradient_sq(mesh, b))
    gv = _vertex_gradient_sq(mesh, b)
    lap = mesh.grid(mesh.apply_laplacian(np.nan_to_num(mesh.flat(b))))
    lap[I:] = np.nan
    fld = FakeDistanceField(b=b, grad_norm=grad, grad_vertex=np.sqrt(gv), laplacian_b=lap,
                            window_valid=kernel.window_valid, mesh=mesh, kernel=kernel, model=g)
    fld.checks = {
        "max_gradb": max_gradient(fld),
        "deltab_resid": deltab_residual(fld, g),
        "radial_dev": radial_deviation(fld),
    }
    fld.checks["gradient_ok"] = fld.checks["max_gradb"] <= 1 + grad_margin
    fld.checks["deltab_ok"] = fld.checks["deltab_resid"] <= deltab_tol
    fld.checks["radial_ok"] = mesh.delta > 0 or fld.checks["radial_dev"] <= radial_tol
    return fld


def max_gradient(fld: FakeDistanceField) -> float:
    return float(np.max(fld.grad_norm[fld.window_cells()]))


def radial_deviation(fld: FakeDistanceField) -> float:
    """max |b - r| / r over the converged window."""
    sel = fld.window_vertices()
    r = fld.mesh.r[sel][:, None]
    return float(np.max(np.abs(fld.b[sel] - r) / r))


def deltab_residual(fld: FakeDistanceField, geom: mg.ModelGeometry | None = None) -> float:
    """Relative L^2 residual of Δb - (v'/v)(b) |∇b|^2 over the window, volume weighted."""
    g = fld.model if geom is None else geom
    sel = fld.window_vertices()
    b = fld.b[sel]
    target = g.phi_at(b.ravel()).reshape(b.shape) * fld.grad_vertex[sel] ** 2
    w = fld.mesh.f[sel]
    diff = fld.laplacian_b[sel] - target
    return float(np.sqrt(np.sum(w * diff * diff) / np.sum(w * target * target)))


# ------------------------------------------------------------ band integrals

def _check_band(fld, lo, hi):
    a, b = fld.window_valid
    if lo < a or hi > b:
        raise OutOfRange(f"band [{lo}, {hi}] outside the converged window ({a:.4g}, {b:.4g})")


def _window_areas(fld):
    """Cell areas inside the converged window, zero elsewhere."""
    sel = fld.window_cells()[:, None] & np.isfinite(fld.grad_norm)
    return np.where(sel, fld.mesh.quad_areas, 0.0)


def _finite(x):
    return np.nan_to_num(x, nan=0.0, posinf=0.0, neginf=0.0)


def level_identities(fld: FakeDistanceField, geom: mg.ModelGeometry | None, s: float, t: float) -> dict:
    """Band and sphere forms of the level identities of b on [s, t]."""
    g = fld.model if geom is None else geom
    _check_band(fld, s, t)
    if t < s:
        raise BadWindow("need s <= t")
    if t == s:
        return {"band": 0.0, "band_exact": 0.0, "band_err": 0.0, "sphere": {}, "sphere_err": 0.0}
    area = _window_areas(fld)
    frac = band_fraction(fld.b, s, t)
    if not np.any(frac * area > 0):
        raise EmptyBand(f"no cells with {s} <= b <= {t}")
    band = float(np.sum(frac * area * _finite(fld.grad_norm**2)))
    exact = float(np.exp(g.log_V_at(t)) - np.exp(g.log_V_at(s)))
    w = THIN_BAND * fld.mesh.dr
    sphere = {}
    for x in (s, t):
        lo, hi = max(x - w / 2, fld.window_valid[0]), min(x + w / 2, fld.window_valid[1])
        fr = band_fraction(fld.b, lo, hi)
        val = float(np.sum(fr * area * _finite(fld.grad_norm**2))) / (hi - lo)
        sphere[x] = (val, float(np.exp(g.log_v_at(x))))
    sphere_err = max(abs(v / e - 1) for v, e in sphere.values())
    return {"band": band, "band_exact": exact, "band_err": abs(band / exact - 1),
            "sphere": sphere, "sphere_err": sphere_err}


def kernel_coarea(fld: FakeDistanceField, geom, b_lo: float, b_hi: float) -> dict:
    """∫_{t1 <= G <= t2} |∇G|^2 against t2 - t1, plus thin-band fluxes.

    The levels are t1 = G_H(b_hi), t2 = G_H(b_lo).  The flux through a
    level τ is the thin-band average of |∇G|^2 over a band of width
    |G_H'| THIN_BAND Δr around τ.
    """
    g = fld.model if geom is None else geom
    _check_band(fld, b_lo, b_hi)
    mesh = fld.mesh
    Gc = np.where(np.isfinite(fld.b), fld.kernel.G_corrected, np.nan)
    gsq = _cell_gradient_sq(mesh, Gc)
    area = _window_areas(fld)
    area = np.where(np.isfinite(gsq), area, 0.0)
    gsq = np.nan_to_num(gsq)

    def G_H(x):
        return float(np.exp(g.log_green_at(x)))

    t1, t2 = G_H(b_hi), G_H(b_lo)
    frac = band_fraction(Gc, t1, t2)
    if not np.any(frac * area > 0):
        raise EmptyBand("no cells in the kernel band")
    co = float(np.sum(frac * area * gsq))
    fluxes = []
    for x in np.linspace(b_lo, b_hi, 5):
        w = THIN_BAND * mesh.dr
        lo_b, hi_b = max(x - w / 2, fld.window_valid[0]), min(x + w / 2, fld.window_valid[1])
        tl, th = G_H(hi_b), G_H(lo_b)
        fr = band_fraction(Gc, tl, th)
        fluxes.append(float(np.sum(fr * area * gsq)) / (th - tl))
    fluxes = np.array(fluxes)
    return {"coarea": co, "coarea_exact": t2 - t1, "coarea_err": abs(co / (t2 - t1) - 1),
            "fluxes": fluxes, "flux_err": float(np.max(np.abs(fluxes - 1)))}


def lemma_integrals(fld: FakeDistanceField, geom, t: float, s: float, inner_ring: float = INNER_RING) -> dict:
    """Weighted integrals of (1 - |∇b|^2)^+ over {t <= b <= s} for n = 2.

    I_plus uses the weight G^2 e^{b}, I_minus the weight e^{-b}.  The
    negative part of 1 - |∇b|^2 is clamped and its mass reported.
    """
    if not t > inner_ring + 1:
        raise BadWindow(f"need t > {inner_ring + 1}")
    if s < t:
        raise BadWindow("need t <= s")
    _check_band(fld, t, s)
    area = _window_areas(fld)
    frac = band_fraction(fld.b, t, s)
    w = frac * area
    if not np.any(w > 0):
        raise EmptyBand(f"no cells with {t} <= b <= {s}")
    bc = _corners(fld.b).mean(axis=0)
    Gc = _corners(np.where(np.isfinite(fld.b), fld.kernel.G_corrected, np.nan)).mean(axis=0)
    defect = 1 - fld.grad_norm**2
    pos = np.maximum(defect, 0.0)
    sel = w > 0
    Gc, bc, pos = Gc[sel], bc[sel], pos[sel]
    w, defect = w[sel], defect[sel]
    I_plus = float(np.sum(w * Gc**2 * np.exp(bc) * pos))
    I_minus = float(np.sum(w * np.exp(-bc) * pos))
    vol = float(np.sum(w))
    clamped = float(np.sum(w * np.maximum(-defect, 0.0)))
    ratio = float(np.max(Gc**2 * np.exp(2 * bc)))
    return {"I_plus": I_plus, "I_minus": I_minus, "band_volume": vol,
            "clamped_mass": clamped, "clamped_fraction": clamped / vol,
            "weight_ratio": ratio, "I_ratio": I_plus / I_minus if I_minus > 0 else math.nan}


def identity_report(fld: FakeDistanceField, geom=None, band=(2.0, 8.0), lemma_window=(3.0, 9.0)) -> dict:
    """The report keys of the mesh identity checks."""
    co = kernel_coarea(fld, geom, *band)
    lem = lemma_integrals(fld, geom, *lemma_window)
    return {
        "coarea_err": co["coarea_err"],
        "flux_err": co["flux_err"],
        "deltab_resid": fld.checks["deltab_resid"],
        "max_gradb": fld.checks["max_gradb"],
        "I_plus": lem["I_plus"],
        "I_minus": lem["I_minus"],
        "clamped_fraction": lem["clamped_fraction"],
    }


def field_rows(fld: FakeDistanceField):
    """Rows r, theta, f, K, G, b, gradb; the pole once, then row-major in r then θ."""
    mesh = fld.mesh
    G = fld.kernel.G
    rows = [(0.0, 0.0, 0.0, float(mesh.K[0, 0]), math.inf, 0.0, math.nan)]
    r, th = mesh.r, mesh.theta
    for i in range(1, mesh.Nr + 1):
        for j in range(mesh.Ntheta):
            rows.append((r[i], th[j], mesh.f[i, j], mesh.K[i, j], G[i, j], fld.b[i, j], fld.grad_vertex[i, j]))
    return rows
