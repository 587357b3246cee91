"""Approximate eigenfunctions u = psi(b) eta(b) and their Weyl quotients.

For an energy lam above the threshold (n-1)^2/4 the radial oscillation
psi(r) = exp(i beta r) / sqrt(v(r)) solves the reduced equation up to the
potential a(r).  Cutting it off smoothly on a window [t-1, S] gives a test
function whose quotient ||Delta u + lam u||^2 / ||u||^2 decays as the window
grows.  On exact models everything reduces to 1-D quadrature; on a discrete
surface the same construction is applied through the fake distance field.

Complex fields are carried as (real, imag) pairs.  On models every quantity
is multiplied by sqrt(v), which removes the exponential volume growth from
the arithmetic.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial
from scipy import integrate

from .errors import BadWindow, OutOfRange, WindowExceedsGrid, WindowTouchesBoundary
from .model_geometry import ModelGeometry, schrodinger_potential

T0 = 5.0
SMOOTHSTEP_ORDER = 5
# max over [0,1] of |P'| + |P''| for P = 6y^5 - 15y^4 + 10y^3, attained at the
# root y ~ 0.2401394 of 2y^3 + 3y^2 - 5y + 1
SMOOTHSTEP5_C0 = 6.688974673411219
POINTS_PER_UNIT = 64
BAND_INTERVALS = 1024   # floor per transition band, where the integrand is a degree-6 polynomial
EPSILONS = (1e-1, 1e-2, 1e-3)


# ------------------------------------------------------------------- cutoffs

def smoothstep(order: int) -> Polynomial:
    """Odd-degree smoothstep P on [0,1] with P(0)=0, P(1)=1.

    Degree ``order = 2k+1`` makes the first k derivatives vanish at both
    ends, so η built from it is C^k.  Orders below 5 are not C^2 and are
    rejected.
    """
    if order < 5 or order % 2 == 0:
        raise BadWindow(f"smoothstep order must be odd and >= 5, got {order}")
    k = (order - 1) // 2
    y = Polynomial([0.0, 1.0])
    P = Polynomial([0.0])
    for j in range(k + 1):
        P = P + math.comb(k + j, j) * (1 - y) ** j
    return P * y ** (k + 1)


def smoothstep_bound(order: int) -> float:
    """max over [0,1] of |P'| + |P''|, from the critical points of each sign branch."""
    if order == 5:
        return SMOOTHSTEP5_C0
    P = smoothstep(order)
    d1, d2 = P.deriv(1), P.deriv(2)
    cuts = [0.0, 1.0] + [float(z.real) for z in d2.roots()
                         if abs(z.imag) < 1e-12 and 0 < z.real < 1]
    cuts = sorted(cuts)
    best = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        sgn = 1.0 if d2(0.5 * (lo + hi)) >= 0 else -1.0
        g = d1 + sgn * d2   # P' >= 0 on [0,1]
        cand = [lo, hi] + [float(z.real) for z in g.deriv().roots()
                           if abs(z.imag) < 1e-12 and lo <= z.real <= hi]
        best = max(best, max(float(g(c)) for c in cand))
    return best


@dataclass(frozen=True)
class CutoffSpec:
    """Window [t-1, S] with η = 1 on [t, s] and smoothstep transitions.

    The near band [t-1, t] has unit width.  The far band [s, S] is the same
    polynomial stretched to width S-s, so its derivative bound is C0/(S-s).
    """

    t: float
    s: float
    S: float
    C0: float
    order: int = SMOOTHSTEP_ORDER
    t0: float = T0

    @property
    def support(self):
        return (self.t - 1.0, self.S)

    @property
    def far_width(self) -> float:
        return self.S - self.s

    def _poly(self):
        P = self.__dict__.get("_P")
        if P is None:
            P = smoothstep(self.order)
            P = (P, P.deriv(1), P.deriv(2))
            object.__setattr__(self, "_P", P)
        return P

    def eta(self, r, deriv: int = 0):
        """η or its first/second derivative at r."""
        r = np.asarray(r, dtype=float)
        P = self._poly()[deriv]
        out = np.zeros_like(r)
        near = (r > self.t - 1) & (r < self.t)
        out[near] = P(r[near] - (self.t - 1))
        w = self.far_width
        far = (r > self.s) & (r < self.S)
        out[far] = P((self.S - r[far]) / w) * (-1.0 / w) ** deriv
        if deriv == 0:
            out[(r >= self.t) & (r <= self.s)] = 1.0
        return out

    def bound(self, r):
        """Declared bound on |η'| + |η''| at r (zero off the bands)."""
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        out[(r >= self.t - 1) & (r <= self.t)] = self.C0
        out[(r >= self.s) & (r <= self.S)] = self.C0 / self.far_width
        return out


def build_cutoff(t, s, S=None, smoothstep_order: int = SMOOTHSTEP_ORDER, t0: float = T0) -> CutoffSpec:
    """Cutoff for the window t0+1 < t < s <= S-1 (S defaults to s+1)."""
    S = s + 1.0 if S is None else S
    t, s, S = float(t), float(s), float(S)
    if not (t0 + 1 < t < s <= S - 1):
        raise BadWindow(f"need {t0}+1 < t < s <= S-1, got t={t}, s={s}, S={S}")
    return CutoffSpec(t, s, S, smoothstep_bound(smoothstep_order), smoothstep_order, t0)


# ------------------------------------------------------------------- reports

@dataclass
class WeylReport:
    lam: float
    beta: float
    quotient: float
    terms: dict
    F_t: float
    mu_measures: dict
    norm_lower: float
    t: float
    s: float
    S: float
    norm: float = math.nan          # ||u||^2
    residual: float = math.nan      # ||Delta u + lam u||^2
    C3: float = math.nan            # ||u||^2 / (s - t)
    bound_constant: float = math.nan
    identity_error: float = math.nan
    extra: dict = field(default_factory=dict)

    @property
    def term_sum(self) -> float:
        return float(sum(self.terms.values()))

    def to_json(self) -> dict:
        return {
            "lambda": self.lam,
            "beta": self.beta,
            "quotient": self.quotient,
            "terms": dict(self.terms),
            "F_t": self.F_t,
            "mu_measures": dict(self.mu_measures),
            "norm_lower": self.norm_lower,
        }

    def csv_row(self):
        m = self.mu_measures
        return [self.lam, self.t, self.s, self.S, self.quotient, self.F_t,
                m["mu_tmS"], m["mu_sS"], m["mu_t1t"], self.norm_lower]


CSV_HEADER = "lambda,t,s,S,quotient,F_t,mu_tmS,mu_sS,mu_t1t,norm_lower"


def bound_constant(beta: float, C0: float) -> float:
    """C with ||Delta u + lam u||^2 <= C * (sum of the four terms) on models.

    From |R|^2 <= 2 a^2 η^2 + max(2, 4 beta^2) (|η'| + |η''|)^2.
    """
    return max(2.0, max(2.0, 4 * beta * beta) * C0 * C0)


def _threshold(n: int) -> float:
    return (n - 1) ** 2 / 4.0


def _beta(n: int, lam: float) -> float:
    thr = _threshold(n)
    if not lam > thr:
        raise OutOfRange(f"lambda = {lam} not above the threshold {thr}")
    return math.sqrt(lam - thr)


def sup_potential_squared(geom: ModelGeometry, t: float) -> float:
    """F(t) = sup of a^2 over (t-1, r_max], from samples and the left end."""
    a = geom.a[1:][geom.r[1:] > t - 1]
    a0 = schrodinger_potential(geom, t - 1.0)
    return float(max(np.max(a * a, initial=0.0), a0 * a0))


def _simpson_nodes(lo, hi, ppu, floor=2):
    m = max(floor, 2 * int(math.ceil(0.5 * (hi - lo) * ppu)))
    return np.linspace(lo, hi, m + 1)


def _model_residual(geom, lam, beta, cut, r, potential):
    """sqrt(v) (Delta u + lam u) and sqrt(v) u at radii r, as (re, im) pairs."""
    e0, e1, e2 = cut.eta(r, 0), cut.eta(r, 1), cut.eta(r, 2)
    p = (geom.n - 1) * geom.phi_at(r)
    a = schrodinger_potential(geom, r) if potential else np.zeros_like(r)
    c, sn = np.cos(beta * r), np.sin(beta * r)
    # sqrt(v) psi = E;  sqrt(v) psi' = E (i beta - p/2);
    # sqrt(v) psi'' = E ((a - lam) - p (i beta - p/2))  from the reduced equation
    d1 = (-0.5 * p, beta)
    d2 = ((a - lam) + 0.5 * p * p, -p * beta)

    def cmul(x, y):
        return x[0] * y[0] - x[1] * y[1], x[0] * y[1] + x[1] * y[0]

    E = (c, sn)
    Ep, Epp = cmul(E, d1), cmul(E, d2)
    re = e2 * c + 2 * e1 * Ep[0] + e0 * Epp[0] + p * (e1 * c + e0 * Ep[0]) + lam * e0 * c
    im = e2 * sn + 2 * e1 * Ep[1] + e0 * Epp[1] + p * (e1 * sn + e0 * Ep[1]) + lam * e0 * sn
    return (re, im), (e0 * c, e0 * sn), a


def weyl_quotient_model(geom: ModelGeometry, lam: float, cutoff: CutoffSpec,
                        potential: bool = True, points_per_unit: int = POINTS_PER_UNIT) -> WeylReport:
    """Weyl quotient of u = psi(r) η(r) on the model, by banded Simpson quadrature.

    ``potential=False`` sets a = 0, leaving only the cutoff contributions.
    """
    beta = _beta(geom.n, lam)
    t, s, S = cutoff.t, cutoff.s, cutoff.S
    if S + 1 > geom.r_max:
        raise WindowExceedsGrid(f"window end S+1 = {S + 1} beyond r_max = {geom.r_max}")
    res = norm = 0.0
    ident = 0.0
    for lo, hi in ((t - 1, t), (t, s), (s, S)):
        r = _simpson_nodes(lo, hi, points_per_unit, 2 if lo == t else BAND_INTERVALS)
        (re, im), (ur, ui), a = _model_residual(geom, lam, beta, cutoff, r, potential)
        res += integrate.simpson(re * re + im * im, x=r)
        norm += integrate.simpson(ur * ur + ui * ui, x=r)
        if lo == t:
            # on the plateau Delta u + lam u = a η psi
            ident = float(np.max(np.hypot(re - a * ur, im - a * ui)))
    F = sup_potential_squared(geom, t) if potential else 0.0
    # radial coarea with |grad b| = 1: mu(A_{x,y}) = y - x
    mu = {"mu_tmS": S - (t - 1), "mu_sS": S - s, "mu_t1t": 1.0}
    terms = {
        "gradient_defect": 0.0,
        "potential": F * mu["mu_tmS"],
        "far_band": mu["mu_sS"] / (S - s) ** 2,
        "near_band": mu["mu_t1t"],
    }
    return WeylReport(
        lam=float(lam), beta=beta, quotient=float(res / norm), terms=terms, F_t=F,
        mu_measures=mu, norm_lower=s - t, t=t, s=s, S=S, norm=float(norm),
        residual=float(res), C3=float(norm / (s - t)),
        bound_constant=bound_constant(beta, cutoff.C0), identity_error=ident,
    )


# ---------------------------------------------------------------------- scan

@dataclass
class DecayScan:
    lam: float
    t_grid: np.ndarray
    L_grid: np.ndarray
    reports: list            # reports[i][j] for (t_i, L_j)
    quotient: np.ndarray
    F_t: np.ndarray
    row_inf: np.ndarray      # min over L for each t
    col_inf: np.ndarray      # min over t for each L
    rows_decreasing: bool
    cols_decreasing: bool
    selection: list          # one entry per epsilon

    @property
    def minimum(self) -> float:
        return float(np.min(self.quotient))


def _non_increasing(x, rel=1e-12) -> bool:
    x = np.asarray(x, dtype=float)
    return bool(np.all(x[1:] <= x[:-1] * (1 + rel) + 1e-300))


def diagonal_selection(quotient: np.ndarray, t_grid, L_grid, epsilons=EPSILONS):
    """Pick (t_i, s_j) realising quotient < eps along the table diagonal.

    i is the first row from which every later row infimum is below eps/2;
    j is the first column from which that row stays below eps.  Entries
    that cannot be realised on the finite table are None.
    """
    row_inf = quotient.min(axis=1)
    out = []
    for eps in epsilons:
        ok = row_inf < eps / 2
        tail_ok = np.flip(np.logical_and.accumulate(np.flip(ok)))
        if not tail_ok.any():
            out.append({"epsilon": eps, "t": None, "s": None, "quotient": None})
            continue
        i = int(np.argmax(tail_ok))
        row = quotient[i] < eps
        row_ok = np.flip(np.logical_and.accumulate(np.flip(row)))
        j = int(np.argmax(row_ok))
        out.append({"epsilon": eps, "t": float(t_grid[i]), "s": float(t_grid[i] + L_grid[j]),
                    "quotient": float(quotient[i, j])})
    return out


def decay_scan(geom: ModelGeometry, lam: float, t_grid, L_grid, far_width: float = 1.0,
               smoothstep_order: int = SMOOTHSTEP_ORDER, t0: float = T0,
               epsilons=EPSILONS, workers: int = 1, **kw) -> DecayScan:
    """Quotient table over windows s = t + L, S = s + far_width."""
    t_grid = np.asarray(t_grid, dtype=float)
    L_grid = np.asarray(L_grid, dtype=float)
    cells = [(ti, Lj) for ti in t_grid for Lj in L_grid]

    def one(cell):
        ti, Lj = cell
        cut = build_cutoff(ti, ti + Lj, ti + Lj + far_width, smoothstep_order, t0)
        return weyl_quotient_model(geom, lam, cut, **kw)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            flat = list(ex.map(one, cells))
    else:
        flat = [one(c) for c in cells]
    nt, nl = len(t_grid), len(L_grid)
    reports = [flat[i * nl:(i + 1) * nl] for i in range(nt)]
    q = np.array([[r.quotient for r in row] for row in reports])
    F = np.array([row[0].F_t for row in reports])
    row_inf, col_inf = q.min(axis=1), q.min(axis=0)
    return DecayScan(
        lam=float(lam), t_grid=t_grid, L_grid=L_grid, reports=reports, quotient=q, F_t=F,
        row_inf=row_inf, col_inf=col_inf,
        rows_decreasing=_non_increasing(row_inf), cols_decreasing=_non_increasing(col_inf),
        selection=diagonal_selection(q, t_grid, L_grid, epsilons),
    )


# ---------------------------------------------------------------------- mesh

def weyl_quotient_mesh(mesh, b_field, lam: float, cutoff: CutoffSpec) -> WeylReport:
    """Weyl quotient of u = psi(b) η(b) on a discrete surface.

    Δu comes from the five-point stencil and the norms from the vertex
    volumes.  The band measures use dμ = dx / v(b) on the cells, with the
    fraction of each cell inside the band.
    """
    from . import mesh_lab as ml

    geom = b_field.model
    beta = _beta(geom.n, lam)
    t, s, S = cutoff.t, cutoff.s, cutoff.S
    b = b_field.b
    # the support {b < S} must close up inside the converged window, which
    # itself ends before the Dirichlet ring
    iw = int(math.floor(b_field.window_valid[1] / mesh.dr + 1e-9))
    edge = b[iw]
    if not np.all(np.isfinite(edge)) or S >= np.min(edge):
        raise WindowTouchesBoundary(
            f"window end S = {S} not below min b = {np.nanmin(edge):.6g} on the last converged ring")
    flat_b = mesh.flat(np.nan_to_num(b, nan=np.inf))
    eta = cutoff.eta(np.where(np.isfinite(flat_b), flat_b, S + 1.0))
    on = eta > 0
    ur, ui = np.zeros_like(flat_b), np.zeros_like(flat_b)
    amp = eta[on] * np.exp(-0.5 * geom.log_v_at(flat_b[on]))
    ur[on], ui[on] = amp * np.cos(beta * flat_b[on]), amp * np.sin(beta * flat_b[on])
    rr = mesh.apply_laplacian(ur) + lam * ur
    ri = mesh.apply_laplacian(ui) + lam * ui
    vol = mesh.cell_volumes
    res = float(np.sum(vol * (rr * rr + ri * ri)))
    norm = float(np.sum(vol * (ur * ur + ui * ui)))

    area = ml._window_areas(b_field)
    bc = ml._corners(b).mean(axis=0)
    with np.errstate(invalid="ignore"):
        dmu = np.where(area > 0, area * np.exp(-geom.log_v_at(np.clip(np.nan_to_num(bc, nan=1.0), geom.r[1], geom.r_max))), 0.0)

    def mu(lo, hi):
        return float(np.sum(ml.band_fraction(b, lo, hi) * dmu))

    mu_all = {"mu_tmS": mu(t - 1, S), "mu_sS": mu(s, S), "mu_t1t": mu(t - 1, t)}
    defect = np.maximum(1 - ml._finite(b_field.grad_norm**2), 0.0)
    F = sup_potential_squared(geom, t)
    terms = {
        "gradient_defect": float(np.sum(ml.band_fraction(b, t - 1, S) * dmu * defect)),
        "potential": F * mu_all["mu_tmS"],
        "far_band": mu_all["mu_sS"] / (S - s) ** 2,
        "near_band": mu_all["mu_t1t"],
    }
    mu_ts = mu(t, s)
    return WeylReport(
        lam=float(lam), beta=beta, quotient=res / norm, terms=terms, F_t=F, mu_measures=mu_all,
        norm_lower=mu_ts, t=t, s=s, S=S, norm=norm, residual=res, C3=norm / (s - t),
        extra={"mu_ts": mu_ts, "mesh": (mesh.Nr, mesh.Ntheta, mesh.R_max, mesh.delta)},
    )
