"""Radial Laplacian of a model in Schrodinger form.

With ``phi = sqrt(v) u`` the radial eigenvalue equation
``u'' + (v'/v) u' + lam u = 0`` becomes ``-phi'' + Q phi = lam phi`` with
``Q = (n-1)^2/4 - a``.  Dirichlet spectra are computed two ways: a
second-order finite-difference matrix and Numerov shooting with an
oscillation count.  The Numerov recursion is a product of 2x2 transfer
matrices, evaluated as a parallel prefix product so that whole solutions
come out of a few vectorised passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import Nonmonotone, OutOfRange, ResolutionTooCoarse
from .model_geometry import ModelGeometry, schrodinger_potential

S_MIN = 0.01
DS = 0.005
BISECTION_CAP = 60


class Method(str, Enum):
    SHOOTING = "SHOOTING"
    MATRIX = "MATRIX"


class Verdict(str, Enum):
    NOT_EMBEDDED = "NOT_EMBEDDED"
    CANDIDATE_EIGENVALUE = "CANDIDATE_EIGENVALUE"
    BELOW_THRESHOLD = "BELOW_THRESHOLD"
    INCONCLUSIVE = "INCONCLUSIVE"


@dataclass(frozen=True)
class SchrodingerForm:
    """``-phi'' + Q phi`` on uniform nodes ``s`` with Dirichlet data at both ends."""

    s: np.ndarray
    Q: np.ndarray
    threshold: float
    n: Optional[int] = None
    geom: Optional[ModelGeometry] = field(default=None, repr=False, compare=False)

    @property
    def ds(self) -> float:
        return float(self.s[1] - self.s[0])

    @property
    def length(self) -> float:
        return float(self.s[-1] - self.s[0])

    def shifted(self, c: float) -> "SchrodingerForm":
        return SchrodingerForm(self.s, self.Q + c, self.threshold + c, self.n, self.geom)

    def coarsened(self) -> "SchrodingerForm":
        """Every other node; needs an even number of intervals."""
        return SchrodingerForm(self.s[::2], self.Q[::2], self.threshold, self.n, self.geom)

    def truncated(self, s_max: float) -> "SchrodingerForm":
        m = int(np.searchsorted(self.s, s_max + 1e-12))
        m -= (m - 1) % 2  # keep an even number of intervals
        return SchrodingerForm(self.s[:m], self.Q[:m], self.threshold, self.n, self.geom)


def _uniform(s_min, s_max, ds):
    N = int(round((s_max - s_min) / ds))
    N += N % 2
    return np.linspace(s_min, s_max, N + 1)


def schrodinger_form(geom: ModelGeometry, s_max: Optional[float] = None,
                     s_min: float = S_MIN, ds: float = DS) -> SchrodingerForm:
    """Schrodinger form of the model's radial Laplacian on ``[s_min, s_max]``."""
    s_max = geom.r_max if s_max is None else float(s_max)
    if s_max > geom.r_max + 1e-12:
        raise OutOfRange(f"s_max = {s_max} beyond tabulated r_max = {geom.r_max}")
    s = _uniform(s_min, s_max, ds)
    thr = (geom.n - 1) ** 2 / 4.0
    Q = thr - schrodinger_potential(geom, s)
    return SchrodingerForm(s, Q, thr, geom.n, geom)


def from_potential(s, Q, threshold: float = 0.0) -> SchrodingerForm:
    s = np.asarray(s, dtype=float)
    Q = np.broadcast_to(np.asarray(Q, dtype=float), s.shape).copy()
    d = np.diff(s)
    if np.any(d <= 0) or np.ptp(d) > 1e-9 * d.mean():
        raise ValueError("nodes must be uniform and increasing")
    return SchrodingerForm(s, Q, float(threshold))


# ---------------------------------------------------------------- matrix method

def _fd_eigs(form: SchrodingerForm, k: int, vectors: bool = False):
    h = form.ds
    d = 2.0 / h**2 + form.Q[1:-1]
    e = np.full(d.size - 1, -1.0 / h**2)
    k = min(k, d.size)
    return eigh_tridiagonal(d, e, eigvals_only=not vectors, select="i", select_range=(0, k - 1))


def _fd_eigs_window(form: SchrodingerForm, lo: float, hi: float):
    h = form.ds
    d = 2.0 / h**2 + form.Q[1:-1]
    e = np.full(d.size - 1, -1.0 / h**2)
    return eigh_tridiagonal(d, e, select="v", select_range=(lo, hi))


# ---------------------------------------------------------------- Numerov

def _numerov(form: SchrodingerForm, lam):
    """Numerov solutions with phi(s_0) = 0, phi'(s_0) = 1 for each energy in ``lam``.

    Returns ``(A, c)`` of shape (B, N+1) with ``phi_i = A_i exp(c_i)``.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    h = form.ds
    g = lam[:, None] - form.Q[None, :]
    w = 1.0 + h * h * g / 12.0
    B, Np1 = g.shape
    # transfer T_i maps (phi_i, d_i) to (phi_{i+1}, d_{i+1}) with the backward
    # difference d_i = (phi_i - phi_{i-1})/h; unlike (phi_i, phi_{i-1}) this
    # basis keeps T_i = I + O(h) and the long products well conditioned
    gi, gm, gp = g[:, 1:-1], g[:, :-2], g[:, 2:]
    wp = w[:, 2:]
    b = -w[:, :-2] / wp
    e = -h * (10.0 * gi + gm + gp) / (12.0 * wp)  # (a + b - 1)/h
    T = np.empty((B, Np1 - 2, 2, 2))
    T[:, :, 0, 0] = 1.0 + h * e
    T[:, :, 0, 1] = -b * h
    T[:, :, 1, 0] = e
    T[:, :, 1, 1] = -b
    c = np.zeros((B, Np1 - 2))
    P, c = _prefix_product(T, c)
    # regular start phi(h) = h - g h^3/6 + ..., with g averaged over the first cell
    phi1 = h * (1.0 - h * h * (g[:, 0] + g[:, 1]) / 12.0)
    A = np.empty((B, Np1))
    A[:, 0] = 0.0
    A[:, 1] = phi1
    A[:, 2:] = P[:, :, 0, 0] * phi1[:, None] + P[:, :, 0, 1] * (phi1 / h)[:, None]
    cc = np.zeros((B, Np1))
    cc[:, 2:] = c
    return A, cc


def _prefix_product(M, c):
    """Inclusive scan P_j = M_j M_{j-1} ... M_0 along axis 1 with log scales."""
    a, b, cc, dd = (M[..., i, j].copy() for i, j in ((0, 0), (0, 1), (1, 0), (1, 1)))
    c = c.copy()
    L = a.shape[1]
    d = 1
    while d < L:
        # explicit 2x2 products; np.matmul is slow on tiny blocks
        a1, b1, c1, d1 = a[:, d:], b[:, d:], cc[:, d:], dd[:, d:]
        a0, b0, c0, d0 = a[:, :-d], b[:, :-d], cc[:, :-d], dd[:, :-d]
        na = a1 * a0 + b1 * c0
        nb = a1 * b0 + b1 * d0
        nc = c1 * a0 + d1 * c0
        nd = c1 * b0 + d1 * d0
        sc = np.maximum(np.maximum(np.abs(na), np.abs(nb)), np.maximum(np.abs(nc), np.abs(nd)))
        sc[sc == 0] = 1.0
        c[:, d:] = c[:, d:] + c[:, :-d] + np.log(sc)
        a[:, d:], b[:, d:], cc[:, d:], dd[:, d:] = na / sc, nb / sc, nc / sc, nd / sc
        d *= 2
    out = np.empty(a.shape + (2, 2))
    out[..., 0, 0], out[..., 0, 1], out[..., 1, 0], out[..., 1, 1] = a, b, cc, dd
    return out, c


def _count_below(form: SchrodingerForm, lam):
    """Sign changes of the shooting solution on (s_0, s_N], one per eigenvalue below lam."""
    A, _ = _numerov(form, lam)
    sg = np.sign(A[:, 1:])
    # a zero landing exactly on a node counts once
    sg[sg == 0] = -1
    return np.sum(sg[:, 1:] != sg[:, :-1], axis=1)


def _shooting_eigs(form: SchrodingerForm, k: int):
    L = form.length
    lo = np.full(k, float(form.Q.min()))
    hi = np.full(k, float(form.Q.max()) + (np.arange(1, k + 1) * math.pi / L) ** 2 + 1.0)
    for _ in range(20):
        cnt = _count_below(form, hi)
        short = cnt < np.arange(1, k + 1)
        if not short.any():
            break
        hi[short] = hi[short] * 2 + 1
    target = np.arange(1, k + 1)
    for _ in range(BISECTION_CAP):
        mid = 0.5 * (lo + hi)
        cnt = _count_below(form, mid)
        above = cnt >= target
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.all(hi - lo <= 4e-16 * np.maximum(1.0, np.abs(hi))):
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------- reports

@dataclass
class SpectralReport:
    threshold: float
    eigenvalues: Optional[np.ndarray] = None
    errors: Optional[np.ndarray] = None
    method: Optional[Method] = None
    cross_check: Optional[np.ndarray] = None
    bottom_estimates: list = field(default_factory=list)
    fit: dict = field(default_factory=dict)
    classification: list = field(default_factory=list)

    def bottom_rows(self):
        """Rows ``lambda,R,lambda1,err``; lambda is the threshold (n-1)^2/4."""
        return [(self.threshold, R, lam, err) for R, lam, err in self.bottom_estimates]


def _solve(form, k, method):
    if (form.s.size - 1) % 2:
        raise ValueError("need an even number of intervals for the error estimate")
    fine_c = form.coarsened()
    if method is Method.MATRIX:
        lf = _fd_eigs(form, k)
        lc = _fd_eigs(fine_c, k)
        err = np.abs(lf - lc) / 3.0
    else:
        lf = _shooting_eigs(form, k)
        lc = _shooting_eigs(fine_c, k)
        err = np.abs(lf - lc) / 15.0
    # round-off floor of the eigensolvers
    err = np.maximum(err, 1e-12 * np.maximum(1.0, np.abs(lf)))
    return lf, err


def dirichlet_eigenvalues(form: SchrodingerForm, k: int = 5, method=Method.MATRIX,
                          cross_check: bool = True) -> SpectralReport:
    """First ``k`` Dirichlet eigenvalues with Richardson error estimates.

    With ``cross_check`` the other method also runs, and a disagreement
    beyond 10x the combined error raises ResolutionTooCoarse.
    """
    method = Method(method)
    if k < 1:
        raise ValueError("k >= 1")
    if 4 * k > (form.s.size - 1) // 2:
        raise ResolutionTooCoarse(f"{form.s.size - 1} intervals cannot resolve {k} eigenvalues")
    lam, err = _solve(form, k, method)
    if not np.all(np.diff(lam) > 0):
        raise ResolutionTooCoarse("eigenvalues not strictly increasing")
    other = None
    if cross_check:
        om = Method.SHOOTING if method is Method.MATRIX else Method.MATRIX
        other, oerr = _solve(form, k, om)
        gap = np.abs(lam - other)
        bad = gap > 10.0 * (err + oerr)
        if bad.any():
            j = int(np.argmax(bad))
            raise ResolutionTooCoarse(
                f"eigenvalue {j + 1}: {method.value} {lam[j]:.12g} vs {om.value} {other[j]:.12g} "
                f"(combined error {err[j] + oerr[j]:.3g})"
            )
    return SpectralReport(form.threshold, eigenvalues=lam, errors=err, method=method, cross_check=other)


def eigenfunctions(form: SchrodingerForm, k: int):
    """Eigenvalues and interior eigenvectors of the matrix discretisation."""
    return _fd_eigs(form, k, vectors=True)


def oscillation_count(form: SchrodingerForm, lam: float) -> int:
    """Number of Dirichlet eigenvalues below lam by the Sturm oscillation count."""
    return int(_count_below(form, lam)[0])


def bottom_spectrum_estimate(geom: ModelGeometry, R_list: Sequence[float], s_min: float = S_MIN,
                             ds: float = DS, cross_check: bool = True) -> SpectralReport:
    """lambda_1 on ``[s_min, R]`` for each R, with a fit ``lam_inf + c/R^2``.

    ``fit`` holds ``lam_inf`` and ``c`` from least squares over all radii,
    ``residual`` (rms), and ``richardson`` from the last two radii.
    """
    R_list = [float(R) for R in R_list]
    if len(R_list) < 3 or np.any(np.diff(R_list) <= 0):
        raise ValueError("R_list must be increasing with at least 3 radii")
    rows = []
    for R in R_list:
        rep = dirichlet_eigenvalues(schrodinger_form(geom, R, s_min, ds), 1, cross_check=cross_check)
        rows.append((R, float(rep.eigenvalues[0]), float(rep.errors[0])))
    lam = np.array([r[1] for r in rows])
    err = np.array([r[2] for r in rows])
    rise = np.diff(lam) > err[1:] + err[:-1]
    if rise.any():
        j = int(np.argmax(rise))
        raise Nonmonotone(f"lambda_1 rises from R={R_list[j]} to R={R_list[j + 1]}")
    R = np.array(R_list) - s_min
    A = np.column_stack([np.ones_like(R), R**-2])
    coef, *_ = np.linalg.lstsq(A, lam, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - lam) ** 2)))
    R1, R2 = R[-2], R[-1]
    rich = (R2**2 * lam[-1] - R1**2 * lam[-2]) / (R2**2 - R1**2)
    return SpectralReport(
        (geom.n - 1) ** 2 / 4.0, bottom_estimates=rows,
        fit={"lam_inf": float(coef[0]), "c": float(coef[1]), "residual": resid, "richardson": float(rich)},
    )


# ---------------------------------------------------------------- Prufer

@dataclass
class PruferResult:
    s: np.ndarray
    log_rho: np.ndarray
    beta: float
    growth_rate: float
    overflow_growth: bool

    @property
    def rho(self):
        return np.exp(self.log_rho - self.log_rho.max())


def prufer_amplitude(form: SchrodingerForm, lam: float, s_range=None,
                     growth_limit: float = 700.0) -> PruferResult:
    """Amplitude ``sqrt(phi^2 + (phi'/beta)^2)`` of the regular solution at energy lam.

    ``phi'`` uses the fourth-order Numerov-consistent difference.  Below the
    threshold ``beta`` is taken as ``sqrt(|lam - threshold|)`` and the fitted
    exponential growth is reported; ``overflow_growth`` flags growth beyond
    ``exp(growth_limit)``, which signals lam below the bottom of Q.
    """
    A, c = _numerov(form, lam)
    A, c = A[0], c[0]
    h = form.ds
    g = lam - form.Q
    i = np.arange(1, form.s.size - 1)
    # neighbours on the scale of node i
    Ap = A[i + 1] * np.exp(c[i + 1] - c[i])
    Am = A[i - 1] * np.exp(c[i - 1] - c[i])
    dphi = (Ap - Am + h * h / 6.0 * (g[i + 1] * Ap - g[i - 1] * Am)) / (2.0 * h)
    beta = math.sqrt(abs(lam - form.threshold)) or 1e-300
    with np.errstate(divide="ignore"):
        log_rho = 0.5 * np.log(A[i] ** 2 + (dphi / beta) ** 2) + c[i]
    s = form.s[i]
    if s_range is not None:
        sel = (s >= s_range[0]) & (s <= s_range[1])
        s, log_rho = s[sel], log_rho[sel]
    half = s >= s[0] + 0.5 * (s[-1] - s[0])
    rate = float(np.polyfit(s[half], log_rho[half], 1)[0])
    overflow = bool(log_rho.max() - log_rho[0] > growth_limit)
    return PruferResult(s, log_rho, beta, rate, overflow)


@dataclass(frozen=True)
class ClassificationRecord:
    lam: float
    verdict: Verdict
    amplitude_ratio: float

    def to_json(self):
        return {"lambda": self.lam, "verdict": self.verdict.value, "amplitude_ratio": self.amplitude_ratio}


def embedded_oracle(form: SchrodingerForm, lam: float, tol: float = 1e-3,
                    mass_fraction: float = 0.9) -> bool:
    """Dense truncated eigenproblem at ``s_max`` and ``0.75 s_max``.

    True when both truncations have an eigenvalue within ``tol`` of lam whose
    eigenvector keeps ``mass_fraction`` of its L2 mass in the inner half.
    """
    for R in (form.s[-1], form.s[0] + 0.75 * form.length):
        f = form.truncated(R)
        vals, vecs = _fd_eigs_window(f, lam - tol, lam + tol)
        if vals.size == 0:
            return False
        inner = f.s[1:-1] <= f.s[0] + 0.5 * f.length
        mass = np.sum(vecs[inner] ** 2, axis=0) / np.sum(vecs**2, axis=0)
        if not np.any(mass >= mass_fraction):
            return False
    return True


def classify_embedded(form: SchrodingerForm, lam: float, tol: float = 1e-3,
                      decay_factor: float = 1e3, stable_tol: float = 1e-2) -> ClassificationRecord:
    """Classify lam as below threshold, a candidate embedded eigenvalue, or not embedded.

    ``amplitude_ratio`` is max(rho) over the scan divided by max(rho) over
    the last tenth.  A candidate needs both ``amplitude_ratio >= decay_factor``
    and confirmation by :func:`embedded_oracle`.  NOT_EMBEDDED needs the mean
    amplitude over the last two tenths to agree within ``stable_tol``.  Any
    other outcome is INCONCLUSIVE.
    """
    lam = float(lam)
    if lam <= 0:
        raise ValueError("lam > 0")
    if lam < form.threshold - tol:
        pr = prufer_amplitude(form, lam)
        ratio = float(np.exp(pr.log_rho.max() - pr.log_rho[-max(1, pr.s.size // 10):].max()))
        return ClassificationRecord(lam, Verdict.BELOW_THRESHOLD, ratio)
    pr = prufer_amplitude(form, lam)
    s, lr = pr.s, pr.log_rho
    x = (s - s[0]) / (s[-1] - s[0])
    ratio = float(np.exp(lr.max() - lr[x >= 0.9].max()))
    if ratio >= decay_factor and embedded_oracle(form, lam, tol):
        return ClassificationRecord(lam, Verdict.CANDIDATE_EIGENVALUE, ratio)
    ref = lr.max()
    m1 = np.mean(np.exp(lr[(x >= 0.8) & (x < 0.9)] - ref))
    m2 = np.mean(np.exp(lr[x >= 0.9] - ref))
    if abs(m2 / m1 - 1.0) < stable_tol:
        return ClassificationRecord(lam, Verdict.NOT_EMBEDDED, ratio)
    return ClassificationRecord(lam, Verdict.INCONCLUSIVE, ratio)
