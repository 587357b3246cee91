"""One-dimensional geometry of rotationally symmetric model manifolds.

The model ``M_H`` carries the metric ``dr^2 + h(r)^2 g_S`` where ``h`` solves
the Jacobi problem ``h'' = H h``, ``h(0) = 0``, ``h'(0) = 1``.  Everything is
tabulated on a uniform radial grid.  Because ``h`` grows like ``e^r`` and the
Weyl windows reach radii of order 10^3, the table stores ``log h``,
``log V`` and ``log G`` rather than the raw values.

The Jacobi problem is linear, so a fixed-step Dormand-Prince step is itself a
2x2 linear map.  All step maps are built at once with numpy and only the
scalar Riccati recursion for ``phi = h'/h`` runs sequentially.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate, optimize
from scipy.interpolate import CubicHermiteSpline
from scipy.special import gammaln, logsumexp

from .errors import (
    InvalidProfile,
    NonconvergentIntegration,
    NoPlateau,
    NotPinching,
    OutOfRange,
    ParabolicModel,
    SingularOrigin,
)
from .profiles import (  # noqa: F401  re-exported
    AsymptoticClass,
    CurvatureProfile,
    check_hypotheses,
    constant,
    exp_decay,
    make_profile,
    parse_profile,
    power_decay,
    tabulated,
    wigner,
)

R0_SERIES = 1e-4
S_FLOOR = 1e-3
MAX_SUBSTEPS = 128

# Dormand-Prince 5(4) tableau, fifth-order weights.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])

_GL_X, _GL_W = leggauss(5)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


def sphere_area(n: int) -> float:
    """|S^{n-1}| = 2 pi^{n/2} / Gamma(n/2)."""
    return math.exp(math.log(2.0) + 0.5 * n * math.log(math.pi) - gammaln(0.5 * n))


def log_sinh(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return x + np.log(-np.expm1(-2.0 * x)) - math.log(2.0)


def _sinh_ratio(a, b):
    """sinh(a)/sinh(b) without overflow, for 0 < a, b."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.exp(a - b) * np.expm1(-2.0 * a) / np.expm1(-2.0 * b)


def _csch2(x):
    e = np.exp(-2.0 * np.asarray(x, dtype=float))
    with np.errstate(divide="ignore"):
        return 4.0 * e / (1.0 - e) ** 2


def _jacobi_maps(r0, rho, Hfun):
    """Dormand-Prince step map of y' = [[0, 1], [H, 0]] y for each (r0, rho).

    Returns ``M - I`` as an array of shape (N, 2, 2); keeping the identity
    out preserves the small increments to full relative precision.  Also
    returns the minimum H seen at the stage abscissae.
    """
    N = r0.size
    K = []
    Hmin = np.inf
    eye = np.broadcast_to(np.eye(2), (N, 2, 2))
    for i in range(6):
        Y = eye.copy()
        for j, a in enumerate(_A[i]):
            Y = Y + (rho * a)[:, None, None] * K[j]
        H = Hfun(r0 + _C[i] * rho)
        Hmin = min(Hmin, float(np.min(H)))
        # A @ Y with A = [[0, 1], [H, 0]]
        KY = np.empty_like(Y)
        KY[:, 0, :] = Y[:, 1, :]
        KY[:, 1, :] = H[:, None] * Y[:, 0, :]
        K.append(KY)
    D = np.zeros((N, 2, 2))
    for i in range(6):
        if _B[i]:
            D += (rho * _B[i])[:, None, None] * K[i]
    return D, Hmin


def _march(profile: CurvatureProfile, n: int, coarse: np.ndarray, n_sub: int, H0: float):
    """Integrate on ``coarse`` (starting at R0_SERIES) with ``n_sub`` substeps per interval.

    Returns per-coarse-node arrays (log h, phi, log V, zeta) and per-interval
    log of the integral of 1/v.
    """
    width = np.diff(coarse)
    rho = np.repeat(width / n_sub, n_sub)
    left = (coarse[:-1, None] + width[:, None] * (np.arange(n_sub) / n_sub)).ravel()
    Hfun = profile.evaluate

    M, Hmin = _jacobi_maps(left, rho, Hfun)
    if Hmin < 0:
        raise InvalidProfile(f"{profile.spec} has H < 0 (min {Hmin:.3g}) on the integration range")

    r0 = coarse[0]
    h0 = r0 + H0 * r0**3 / 6.0
    phi = np.empty(left.size + 1)
    phi[0] = (1.0 + 0.5 * H0 * r0**2) / h0
    d00, d01, d10, d11 = (M[:, i, j].tolist() for i, j in ((0, 0), (0, 1), (1, 0), (1, 1)))
    p = phi[0]
    out = phi.tolist()
    for j in range(left.size):
        den = 1.0 + d00[j] + d01[j] * p
        p = (d10[j] + (1.0 + d11[j]) * p) / den
        out[j + 1] = p
    phi = np.asarray(out)
    ph = phi[:-1]
    gm1 = M[:, 0, 0] + M[:, 0, 1] * ph  # h_{j+1}/h_j - 1
    if np.any(gm1 <= -1):
        raise NonconvergentIntegration("warping solution lost positivity")
    log_growth = np.log1p(gm1)
    growth = 1.0 + gm1
    K = coarse.size - 1
    lg2 = log_growth.reshape(K, n_sub)
    tot = lg2.sum(axis=1)  # log h_{k+1} - log h_k
    off = np.cumsum(lg2, axis=1) - lg2  # fine left node relative to coarse left node
    # extended precision keeps the running sum exact to ~1e-13 over 10^6 steps
    acc = np.cumsum(tot.astype(np.longdouble))
    log_h = np.concatenate([[math.log(h0)], (math.log(h0) + acc).astype(float)])

    # h at Gauss nodes relative to h at the left fine node
    ng = _GL_X.size
    G_left = np.repeat(left, ng)
    G_rho = np.repeat(rho, ng) * np.tile(_GL_X, left.size)
    Mg, Hmin_g = _jacobi_maps(G_left, G_rho, Hfun)
    if Hmin_g < 0:
        raise InvalidProfile(f"{profile.spec} has H < 0 on the integration range")
    rel_m1 = (Mg[:, 0, 0] + Mg[:, 0, 1] * np.repeat(ph, ng)).reshape(left.size, ng)
    if np.any(rel_m1 <= -1):
        raise NonconvergentIntegration("warping solution lost positivity")
    log_rel = np.log1p(rel_m1)
    rel = 1.0 + rel_m1
    m = n - 1

    # log h at Gauss nodes relative to the coarse left node, shape (K, n_sub*ng)
    loc = (off[:, :, None] + log_rel.reshape(K, n_sub, ng)).reshape(K, -1)
    wq = (rho.reshape(K, n_sub)[:, :, None] * _GL_W).reshape(K, -1)
    # increment of V divided by v at the right node, and of 1/v times v at the left node
    log_dV_rel = logsumexp(m * (loc - tot[:, None]), b=wq, axis=1)
    log_dJv = logsumexp(-m * loc, b=wq, axis=1)

    # zeta from (h sinh zeta)' = (H - 1) h sinh
    rg = (G_left + G_rho).reshape(left.size, ng)
    right = left + rho
    ex = profile.excess(rg.ravel()).reshape(left.size, ng)
    src = rho * np.sum(
        _GL_W * ex * rel / growth[:, None] * _sinh_ratio(rg, right[:, None]), axis=1
    )
    decay = _sinh_ratio(left, right) / growth
    zk = (H0 - 1.0) * r0 / 3.0
    zl = [zk] * (left.size + 1)
    for j, (A, B) in enumerate(zip(decay.tolist(), src.tolist())):
        zk = A * zk + B
        zl[j + 1] = zk
    z = np.asarray(zl)[::n_sub]

    # q = V / v is bounded, so march it instead of V
    shrink = np.exp(-m * tot).tolist()
    dq = np.exp(log_dV_rel).tolist()
    qk = r0 / n
    ql = [qk] * (K + 1)
    for k in range(K):
        qk = qk * shrink[k] + dq[k]
        ql[k + 1] = qk
    log_om = math.log(sphere_area(n))
    log_V = np.log(ql) + log_om + m * log_h
    return log_h, phi[::n_sub], log_V, z, log_dJv


@dataclass(frozen=True)
class ModelGeometry:
    """Tabulated model manifold.

    Node 0 is the pole ``r = 0``; its entries carry the limiting values
    (``log h = -inf``, ``phi = inf``, ``G = inf``, ``a = nan``).

    Attributes
    ----------
    log_dJv : ndarray
        per grid interval ``[r_k, r_{k+1}]``, log of ``v(r_k)`` times the
        integral of 1/v over the interval (entry 0 is ``inf``).
    log_green : ndarray or None
        log of the Green kernel, filled by :func:`green_kernel_model`.
    log_tail_scale : float
        log of ``(h/h_lim)^{n-1}`` at ``r_max``, the factor applied to the
        analytic tail beyond the grid.
    """

    n: int
    profile: CurvatureProfile
    r: np.ndarray
    log_h: np.ndarray
    phi: np.ndarray
    log_V: np.ndarray
    zeta: np.ndarray
    a: np.ndarray
    log_dJv: np.ndarray
    substeps: int
    integration_error: float
    log_green: Optional[np.ndarray] = None
    log_tail_scale: float = 0.0

    @property
    def r_max(self) -> float:
        return float(self.r[-1])

    @property
    def dr(self) -> float:
        return float(self.r[1] - self.r[0])

    @property
    def omega(self) -> float:
        return sphere_area(self.n)

    @property
    def log_v(self):
        with np.errstate(invalid="ignore"):
            return math.log(self.omega) + (self.n - 1) * self.log_h

    @property
    def h(self):
        return np.exp(self.log_h)

    @property
    def h_prime(self):
        with np.errstate(invalid="ignore", over="ignore"):
            out = self.phi * self.h
        out[0] = 1.0
        return out

    @property
    def v(self):
        return np.exp(self.log_v)

    @property
    def V(self):
        return np.exp(self.log_V)

    @property
    def green(self):
        if self.log_green is None:
            raise ParabolicModel("green kernel not available; call green_kernel_model")
        return np.exp(self.log_green)

    @property
    def H(self):
        return self.profile.evaluate(self.r)

    @property
    def pinch_constant(self) -> float:
        return float(math.exp(self.log_h[-1] - log_sinh(self.r[-1])))

    # interpolants on (0, r_max]; cubic Hermite with exact derivatives
    def _spline(self, name):
        cache = self.__dict__.setdefault("_splines", {})
        if name in cache:
            return cache[name]
        r = self.r[1:]
        if name == "log_h":
            sp = CubicHermiteSpline(r, self.log_h[1:], self.phi[1:])
        elif name == "phi":
            sp = CubicHermiteSpline(r, self.phi[1:], self.profile.evaluate(r) - self.phi[1:] ** 2)
        elif name == "log_V":
            sp = CubicHermiteSpline(r, self.log_V[1:], np.exp(self.log_v[1:] - self.log_V[1:]))
        elif name == "zeta":
            rr = self.r
            H0 = float(self.profile.evaluate(np.array([0.0]))[0])
            dz = np.empty(rr.size)
            dz[0] = (H0 - 1.0) / 3.0
            dz[1:] = self.profile.excess(r) - self.zeta[1:] * (self.phi[1:] + 1.0 / np.tanh(r))
            sp = CubicHermiteSpline(rr, self.zeta, dz)
        elif name == "log_G":
            lg = self.log_green[1:]
            sp = CubicHermiteSpline(r, lg, -np.exp(-self.log_v[1:] - lg))
        elif name == "logr_of_logG":
            lg = self.log_green[1:]
            # log r is nearly linear in log G at the pole, where r itself is not;
            # reversed so abscissae increase
            slope = -np.exp(self.log_v[1:] + lg) / r
            sp = CubicHermiteSpline(lg[::-1], np.log(r)[::-1], slope[::-1])
        else:
            raise KeyError(name)
        cache[name] = sp
        return sp

    def _check_r(self, r):
        r = np.asarray(r, dtype=float)
        if np.any(r < self.r[1]) or np.any(r > self.r[-1]):
            raise OutOfRange(f"radius outside tabulated range [{self.r[1]}, {self.r[-1]}]")
        return r

    def log_h_at(self, r):
        return self._spline("log_h")(self._check_r(r))

    def phi_at(self, r):
        return self._spline("phi")(self._check_r(r))

    def log_v_at(self, r):
        return math.log(self.omega) + (self.n - 1) * self.log_h_at(r)

    def log_V_at(self, r):
        return self._spline("log_V")(self._check_r(r))

    def log_green_at(self, r):
        if self.log_green is None:
            raise ParabolicModel("green kernel not available")
        return self._spline("log_G")(self._check_r(r))

    def with_(self, **kw) -> "ModelGeometry":
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d.update(kw)
        return ModelGeometry(**d)


def _coarse_grid(r_max: float, dr: float):
    K = int(math.ceil(r_max / dr - 1e-9))
    r = dr * np.arange(K + 1)
    coarse = r.copy()
    coarse[0] = R0_SERIES
    return r, coarse


def solve_warping(
    profile: CurvatureProfile, n: int, r_max: float, tol: float = 1e-10, dr: float = 0.05
) -> ModelGeometry:
    """Solve ``h'' = H h`` on ``[0, r_max]`` and tabulate h, h', v, V, zeta, a.

    The solution is started at ``r = 1e-4`` from its series and advanced with a
    fixed-step fifth-order Dormand-Prince map, ``n_sub`` substeps per grid
    interval.  ``n_sub`` is doubled until two successive solutions agree to
    ``tol`` in ``log h``, ``phi``, ``log V`` and ``log G`` increments.

    Raises
    ------
    InvalidProfile
        when H is negative somewhere on the range.
    NonconvergentIntegration
        when step-halving does not reach ``tol``.
    """
    if n < 2 or int(n) != n:
        raise InvalidProfile(f"dimension must be an integer >= 2, got {n}")
    if not r_max > 0 or not tol > 0 or not dr > 0 or dr > r_max:
        raise InvalidProfile("need r_max > 0, tol > 0 and 0 < dr <= r_max")
    n = int(n)
    H0 = float(profile.evaluate(np.array([0.0]))[0])
    if H0 < 0:
        raise InvalidProfile(f"{profile.spec} has H(0) < 0")
    r, coarse = _coarse_grid(r_max, dr)

    prev = None
    n_sub = 1
    err = np.inf
    while n_sub <= MAX_SUBSTEPS:
        cur = _march(profile, n, coarse, n_sub, H0)
        if prev is not None:
            lh, ph, lV, z, lJ = cur
            plh, pph, plV, pz, plJ = prev
            err = max(
                np.max(np.abs(lh - plh)),
                np.max(np.abs(ph[1:] - pph[1:]) / np.abs(ph[1:])),
                np.max(np.abs(lV - plV)),
                np.max(np.abs(lJ[1:] - plJ[1:])),
            )
            if err < tol:
                break
        prev = cur
        n_sub *= 2
    else:
        raise NonconvergentIntegration(
            f"step-halving disagreement {err:.3g} above tol {tol:.3g} at {MAX_SUBSTEPS} substeps"
        )

    lh, ph, lV, z, lJ = cur
    lh = lh.copy()
    ph = ph.copy()
    lV = lV.copy()
    z = z.copy()
    lJ = lJ.copy()
    # node 0 is the pole
    lh[0] = -np.inf
    ph[0] = np.inf
    lV[0] = -np.inf
    z[0] = 0.0
    lJ[0] = np.inf
    a = np.full(r.size, np.nan)
    a[1:] = _potential(n, r[1:], profile.excess(r[1:]), z[1:])
    return ModelGeometry(
        n=n, profile=profile, r=r, log_h=lh, phi=ph, log_V=lV, zeta=z, a=a,
        log_dJv=lJ, substeps=n_sub, integration_error=float(err),
    )


def _potential(n, s, excess, zeta):
    """a(s) written so that the large terms cancel analytically.

    With phi = coth + zeta, the defining combination
    (n-1)^2/4 + (v'/v)^2/4 - v''/(2v) reduces to
    -(n-1)(n-3)/4 (csch^2 + 2 zeta coth + zeta^2) - (n-1)(H-1)/2.
    """
    X = _csch2(s) + 2.0 * zeta / np.tanh(s) + zeta**2
    return -(n - 1) * (n - 3) / 4.0 * X - (n - 1) * excess / 2.0


# ---------------------------------------------------------------- Green kernel

def _log_h_limit(k: float, r):
    r = np.asarray(r, dtype=float)
    if k == 0:
        return np.log(r)
    sk = math.sqrt(k)
    return log_sinh(sk * r) - math.log(sk)


def _log_int_csch_pow(m: int, Y: float) -> float:
    """log of the integral of sinh(u)^(-m) over [Y, inf)."""
    if Y >= 1.0:
        j = np.arange(80)
        logc = gammaln(m + j) - gammaln(j + 1) - gammaln(m) - np.log(m + 2 * j) - 2 * j * Y
        return m * math.log(2.0) - m * Y + float(logsumexp(logc))
    val, _ = integrate.quad(lambda u: math.exp(-m * float(log_sinh(u))), Y, 1.0,
                            epsabs=0, epsrel=1e-13, limit=200)
    return float(np.logaddexp(math.log(val), _log_int_csch_pow(m, 1.0)))


def _log_tail(k: float, m: int, X: float) -> float:
    """log of the integral of h_lim(s)^(-m) over [X, inf), h_lim the constant-curvature warping."""
    if k == 0:
        if m <= 1:
            raise ParabolicModel("the integral of 1/v diverges: model is parabolic")
        return (1 - m) * math.log(X) - math.log(m - 1)
    sk = math.sqrt(k)
    return m * math.log(sk) - math.log(sk) + _log_int_csch_pow(m, sk * X)


def check_nonparabolic(geom: ModelGeometry) -> bool:
    """Whether the integral of 1/v converges under the constant-curvature tail model."""
    k = geom.profile.limit
    return bool(k > 0 or geom.n >= 3)


def green_kernel_model(geom: ModelGeometry) -> ModelGeometry:
    """Fill the Green kernel ``G(r)`` = integral of ds/v over [r, inf).

    The grid part is summed from the per-interval Gauss-Legendre increments;
    beyond ``r_max`` the warping is replaced by the constant-curvature one
    for ``H(inf)``, scaled to match ``h(r_max)``.
    """
    if not check_nonparabolic(geom):
        raise ParabolicModel(f"{geom.profile.spec} with n={geom.n} is parabolic")
    k = geom.profile.limit
    m = geom.n - 1
    R = geom.r_max
    log_scale = m * (geom.log_h[-1] - float(_log_h_limit(k, R)))
    log_tail = _log_tail(k, m, R) - math.log(geom.omega) - log_scale
    # p = G v is bounded: p_k = p_{k+1} v_k / v_{k+1} + v_k * integral of 1/v on [r_k, r_{k+1}]
    lv = geom.log_v
    shrink = np.exp(-(lv[2:] - lv[1:-1])).tolist()
    dp = np.exp(geom.log_dJv[1:]).tolist()
    pk = math.exp(log_tail + lv[-1])
    pl = [pk] * (geom.r.size - 1)
    for k in range(len(dp) - 1, -1, -1):
        pk = pk * shrink[k] + dp[k]
        pl[k] = pk
    lg = np.empty(geom.r.size)
    lg[1:] = np.log(pl) - lv[1:]
    lg[0] = np.inf
    return geom.with_(log_green=lg, log_tail_scale=float(log_scale))


def log_green_tail(geom: ModelGeometry, r):
    """log G(r) for r >= r_max from the analytic tail."""
    k = geom.profile.limit
    m = geom.n - 1
    return np.array([
        _log_tail(k, m, float(x)) - math.log(geom.omega) - geom.log_tail_scale
        for x in np.atleast_1d(r)
    ])


def green_decay_constant(geom: ModelGeometry) -> float:
    """max over r >= 1 of G(r) e^{(n-1) r}; finite when G <= C e^{-(n-1) r}."""
    sel = geom.r >= 1.0
    return float(np.exp(np.max(geom.log_green[sel] + (geom.n - 1) * geom.r[sel])))


def inverse_green(geom: ModelGeometry, g):
    """Radius r with G(r) = g.

    Values below ``G(r_max)`` are inverted through the analytic tail and give
    radii beyond ``r_max``.  Raises OutOfRange when ``g`` exceeds ``G(r_1)``.
    """
    if geom.log_green is None:
        raise ParabolicModel("green kernel not available")
    g = np.asarray(g, dtype=float)
    scalar = g.ndim == 0
    g = np.atleast_1d(g)
    if np.any(~(g > 0)):
        raise OutOfRange("kernel values must be positive")
    with np.errstate(divide="ignore"):
        lg = np.log(g)
    if np.any(lg > geom.log_green[1]):
        raise OutOfRange(f"kernel value above G(r_1) = {math.exp(geom.log_green[1]):.6g}")
    out = np.empty_like(lg)
    inside = lg >= geom.log_green[-1]
    out[inside] = np.exp(geom._spline("logr_of_logG")(lg[inside]))
    for i in np.nonzero(~inside)[0]:
        target = lg[i]
        f = lambda x: log_green_tail(geom, x)[0] - target  # noqa: E731
        lo, hi = geom.r_max, geom.r_max + 1.0
        while f(hi) > 0:
            lo, hi = hi, hi + 2 * (hi - geom.r_max)
        out[i] = optimize.brentq(f, lo, hi, xtol=1e-13, rtol=1e-15)
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------- derived data

def schrodinger_potential(geom: ModelGeometry, s=None, s_floor: float = S_FLOOR):
    """Potential a(s) of the radial reduction.

    Evaluated from the exact algebraic form, no differentiation of samples.
    With ``s`` omitted returns the grid samples (node 0 is nan).  Off-grid
    radii use a Hermite interpolant of zeta, which is small and smooth down
    to the pole, so the singular csch^2 part stays exact.
    """
    if s is None:
        return geom.a
    s = np.asarray(s, dtype=float)
    if np.any(s < s_floor):
        raise SingularOrigin(f"potential requested at s < {s_floor}")
    if np.any(s > geom.r_max):
        raise OutOfRange(f"potential requested beyond r_max = {geom.r_max}")
    zeta = geom._spline("zeta")(s)
    return _potential(geom.n, s, geom.profile.excess(s), zeta)


def comparison_functions(geom: ModelGeometry, zeta_tol: float = 1e-14):
    """zeta samples, the pinching constant and the sandwich constants.

    Returns
    -------
    dict
        ``zeta``, ``pinch_constant``, ``sandwich`` = (min, max) of v/sinh^{n-1}
        on [1, r_max], ``zeta_integral`` (the integral of zeta to r at each
        node, equal to log(h/sinh)) and ``zeta_tail``, the Cauchy increment of
        that integral over the last quarter of the grid.
    """
    if not geom.profile.is_integrable:
        raise InvalidProfile(
            f"{geom.profile.spec} is {geom.profile.asymptotic_class.value}; comparison needs H-1 in L1"
        )
    z = geom.zeta
    if np.any(z < -zeta_tol):
        raise NotPinching(f"zeta < 0 (min {z.min():.3g}); the profile violates H >= 1")
    r = geom.r
    m = geom.n - 1
    with np.errstate(invalid="ignore"):
        log_ratio = geom.log_h - log_sinh(r)
    log_ratio[0] = 0.0
    sel = r >= 1.0
    lv = math.log(geom.omega) + m * log_ratio[sel]
    q = len(r) * 3 // 4
    return {
        "zeta": z,
        "pinch_constant": float(math.exp(log_ratio[-1])),
        "sandwich": (float(np.exp(lv.min())), float(np.exp(lv.max()))),
        "zeta_integral": log_ratio,
        "zeta_tail": float(abs(log_ratio[-1] - log_ratio[q])),
    }


def ricci_eigenvalues(geom: ModelGeometry, r):
    """Radial and tangential Ricci eigenvalues of the model at radius r."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise SingularOrigin("Ricci eigenvalues are not defined at the pole")
    n = geom.n
    H = geom.profile.evaluate(r)
    ex = H - 1.0
    phi = geom.phi_at(r)
    log_h = geom.log_h_at(r)
    zeta = phi - 1.0 / np.tanh(r)
    X = _csch2(r) + 2.0 * zeta / np.tanh(r) + zeta**2
    # H + (1 - h'^2)/h^2 = H - phi^2 + 1/h^2 = (H - 1) - X + 1/h^2
    bracket = ex - X + np.exp(-2.0 * log_h)
    radial = -(n - 1) * H
    return radial, radial + (n - 2) * bracket


def brooks_upper_bound(geom: ModelGeometry, agree: float = 1e-3):
    """Quarter of the squared exponential volume growth rate.

    The growth rate is the least-squares slope of log V over the last quarter
    of the grid, accepted once it agrees with the slope over the previous
    quarter within ``agree``.  Polynomial growth (stable log-log slope with a
    vanishing linear slope) returns 0.
    """
    r = geom.r
    K = r.size - 1
    q = K // 4
    if q < 4:
        raise NoPlateau("grid too short for plateau detection")
    last = slice(K - q, K + 1)
    prev = slice(K - 2 * q, K - q + 1)
    lV = geom.log_V
    s1 = np.polyfit(r[last], lV[last], 1)[0]
    s0 = np.polyfit(r[prev], lV[prev], 1)[0]
    if abs(s1 - s0) <= agree * max(abs(s1), 1.0):
        return 0.25 * s1**2
    p1 = np.polyfit(np.log(r[last]), lV[last], 1)[0]
    p0 = np.polyfit(np.log(r[prev]), lV[prev], 1)[0]
    if abs(p1 - p0) <= 1e-2 * abs(p1) and s1 < s0:
        return 0.0
    raise NoPlateau(f"log V slope not stable: {s0:.6g} vs {s1:.6g}")


def build_geometry(profile, n: int, r_max: float, tol: float = 1e-10, dr: float = 0.05):
    """solve_warping followed by green_kernel_model when the model is non-parabolic."""
    if isinstance(profile, str):
        profile = parse_profile(profile)
    geom = solve_warping(profile, n, r_max, tol=tol, dr=dr)
    if check_nonparabolic(geom):
        geom = green_kernel_model(geom)
    return geom


def table(geom: ModelGeometry):
    """Rows ``r,h,hp,v,V,G,a,zeta`` for export."""
    with np.errstate(over="ignore"):
        G = geom.green if geom.log_green is not None else np.full(geom.r.size, np.nan)
        return np.column_stack([geom.r, geom.h, geom.h_prime, geom.v, geom.V, G, geom.a, geom.zeta])
