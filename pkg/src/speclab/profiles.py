"""Radial curvature profiles H(r).

A profile is stored through its excess ``H(r) - 1`` so that quantities which
depend on ``H - 1`` (the potential, the pinching function) never suffer the
cancellation of subtracting 1 from a number close to 1.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .errors import InvalidProfile

#: Level below which |H - 1| counts as negligible when locating the deviation support.
DEVIATION_ENVELOPE = 1e-12


class AsymptoticClass(str, Enum):
    L1_INTEGRABLE = "L1_INTEGRABLE"
    SLOWLY_DECAYING = "SLOWLY_DECAYING"
    CONSTANT = "CONSTANT"


@dataclass(frozen=True)
class CurvatureProfile:
    """Curvature magnitude H(r) of a rotationally symmetric model.

    ``limit`` is H(infinity); it selects the analytic warping used beyond the
    tabulated range (``sinh(sqrt(k) r)/sqrt(k)``, or ``r`` when ``k = 0``).
    """

    name: str
    params: tuple
    excess: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    asymptotic_class: AsymptoticClass
    limit: float = 1.0
    r_support_of_deviation: float = 0.0

    def evaluate(self, r):
        return 1.0 + self.excess(np.asarray(r, dtype=float))

    __call__ = evaluate

    @property
    def spec(self) -> str:
        return f"{self.name}({', '.join(format(p, 'g') for p in self.params)})"

    @property
    def is_integrable(self) -> bool:
        return self.asymptotic_class is AsymptoticClass.L1_INTEGRABLE


def constant(k: float) -> CurvatureProfile:
    k = float(k)
    if k < 0:
        raise InvalidProfile(f"constant({k}) has H < 0")
    cls = AsymptoticClass.L1_INTEGRABLE if k == 1.0 else AsymptoticClass.CONSTANT
    return CurvatureProfile(
        "constant", (k,), lambda r: np.full_like(r, k - 1.0, dtype=float), cls, limit=k
    )


def exp_decay(c: float, alpha: float) -> CurvatureProfile:
    """H = 1 + c exp(-alpha r)."""
    c, alpha = float(c), float(alpha)
    if alpha <= 0:
        raise InvalidProfile("exp_decay needs alpha > 0")
    if c < -1:
        raise InvalidProfile("exp_decay with c < -1 has H(0) < 0")
    support = math.log(abs(c) / DEVIATION_ENVELOPE) / alpha if c else 0.0
    cls = AsymptoticClass.L1_INTEGRABLE
    return CurvatureProfile(
        "exp_decay", (c, alpha), lambda r: c * np.exp(-alpha * r), cls,
        r_support_of_deviation=max(support, 0.0),
    )


def power_decay(c: float, p: float) -> CurvatureProfile:
    """H = 1 + c (1 + r)^(-p); integrable excess only for p > 1."""
    c, p = float(c), float(p)
    if p <= 0:
        raise InvalidProfile("power_decay needs p > 0")
    if c < -1:
        raise InvalidProfile("power_decay with c < -1 has H(0) < 0")
    cls = AsymptoticClass.L1_INTEGRABLE if p > 1 else AsymptoticClass.SLOWLY_DECAYING
    support = (abs(c) / DEVIATION_ENVELOPE) ** (1.0 / p) - 1.0 if c else 0.0
    return CurvatureProfile(
        "power_decay", (c, p), lambda r: c * (1.0 + r) ** (-p), cls,
        r_support_of_deviation=max(support, 0.0),
    )


def wigner(c: float, beta: float) -> CurvatureProfile:
    """H = 1 + c sin(2 beta r) / (1 + r), the oscillating Wigner-von Neumann type profile.

    The excess is not absolutely integrable, so the profile is SLOWLY_DECAYING.
    """
    c, beta = float(c), float(beta)
    if beta <= 0:
        raise InvalidProfile("wigner needs beta > 0")
    return CurvatureProfile(
        "wigner", (c, beta), lambda r: c * np.sin(2.0 * beta * r) / (1.0 + r),
        AsymptoticClass.SLOWLY_DECAYING,
        r_support_of_deviation=abs(c) / DEVIATION_ENVELOPE,
    )


def tabulated(r: Sequence[float], H: Sequence[float], name: str = "tabulated") -> CurvatureProfile:
    """Piecewise-linear profile through samples; constant beyond the last sample."""
    r = np.asarray(r, dtype=float)
    H = np.asarray(H, dtype=float)
    if r.ndim != 1 or r.shape != H.shape or np.any(np.diff(r) <= 0):
        raise InvalidProfile("tabulated profile needs strictly increasing radii")
    if np.any(H < 0):
        raise InvalidProfile("tabulated profile has H < 0")
    ex = H - 1.0
    tail = float(H[-1])
    if tail == 1.0 and np.all(H >= 1.0):
        cls = AsymptoticClass.L1_INTEGRABLE
    elif np.all(H == tail):
        cls = AsymptoticClass.CONSTANT
    else:
        cls = AsymptoticClass.SLOWLY_DECAYING
    nz = np.nonzero(np.abs(ex) > DEVIATION_ENVELOPE)[0]
    support = float(r[nz[-1] + 1]) if nz.size and nz[-1] + 1 < r.size else float(r[-1])
    return CurvatureProfile(
        name, (), lambda x: np.interp(x, r, ex), cls, limit=tail,
        r_support_of_deviation=support if nz.size else 0.0,
    )


_FACTORIES = {
    "constant": (constant, 1),
    "exp_decay": (exp_decay, 2),
    "power_decay": (power_decay, 2),
    "wigner": (wigner, 2),
}

_SPEC_RE = re.compile(r"^\s*([a-z_]+)\s*\(([^)]*)\)\s*$")


def make_profile(name: str, params: Sequence[float]) -> CurvatureProfile:
    try:
        factory, arity = _FACTORIES[name]
    except KeyError:
        raise InvalidProfile(f"unknown profile {name!r}; expected one of {sorted(_FACTORIES)}") from None
    if len(params) != arity:
        raise InvalidProfile(f"{name} takes {arity} parameter(s), got {len(params)}")
    return factory(*map(float, params))


def parse_profile(text: str) -> CurvatureProfile:
    """Parse ``"exp_decay(1, 1)"`` style declarations."""
    m = _SPEC_RE.match(text)
    if not m:
        raise InvalidProfile(f"cannot parse profile {text!r}")
    args = [a for a in m.group(2).split(",") if a.strip()]
    try:
        params = [float(a) for a in args]
    except ValueError:
        raise InvalidProfile(f"non-numeric parameter in {text!r}") from None
    return make_profile(m.group(1), params)


def check_hypotheses(profile: CurvatureProfile, r_max: float, dr: float = 0.05) -> dict:
    """Sample the standing hypotheses on [0, r_max].

    Returns flags for ``H >= 1``, ``H`` non-increasing, and the Cauchy tail of
    the integral of ``H - 1`` over the last quarter of the range.
    """
    r = np.arange(0.0, r_max + 0.5 * dr, dr)
    ex = profile.excess(r)
    tail = trapezoid(ex[3 * r.size // 4:], r[3 * r.size // 4:])
    return {
        "H_ge_1": bool(np.all(ex >= -1e-14)),
        "non_increasing": bool(np.all(np.diff(ex) <= 1e-14)),
        "excess_tail": float(tail),
        "H_min": float(1.0 + ex.min()),
    }
