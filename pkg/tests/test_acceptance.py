"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Each criterion collects named sub-checks, prints a single summary line and
fails with the list of sub-checks that did not hold.  Runtimes are part of
the criteria and are measured with ``time.perf_counter``.
"""
import math
import time

import numpy as np
import pytest
from scipy.integrate import simpson

from speclab import mesh_lab as ml
from speclab import model_geometry as mg
from speclab import radial_spectrum as rs
from speclab import weyl_engine as we

PERT = dict(delta=0.1, r_lo=3.0, r_hi=6.0, mode_m=3)


def report(capsys, k, title, checks, detail, elapsed):
    bad = [name for name, ok in checks.items() if not ok]
    status = "PASS" if not bad else "FAIL"
    line = f"[{status}] criterion {k}: {title} | {detail} | {elapsed:.2f} s"
    if bad:
        line += " | failed: " + ", ".join(bad)
    with capsys.disabled():
        print("\n" + line)
    assert not bad, line


def log_coth_half(r):
    return np.log1p(2.0 * np.exp(-r) / -np.expm1(-r))


def coth_minus_one(r):
    return 2.0 * np.exp(-2.0 * r) / -np.expm1(-2.0 * r)


def test_criterion_1_hyperbolic_closed_forms(capsys):
    t0 = time.perf_counter()
    errs = {}
    for n in (2, 3):
        g = mg.build_geometry(mg.constant(1), n, 20)
        r = g.r
        sel = (r >= 0.1) & (r <= 20)
        errs[f"h{n}"] = float(np.max(np.abs(np.exp(g.log_h[sel] - mg.log_sinh(r[sel])) - 1)))
        sel = (r >= 0.5) & (r <= 15)
        exact = log_coth_half(r[sel]) / (2 * math.pi) if n == 2 else coth_minus_one(r[sel]) / (4 * math.pi)
        errs[f"G{n}"] = float(np.max(np.abs(g.green[sel] / exact - 1)))
    elapsed = time.perf_counter() - t0
    checks = {
        "h vs sinh <= 1e-8": max(errs["h2"], errs["h3"]) <= 1e-8,
        "G vs closed form <= 1e-6": max(errs["G2"], errs["G3"]) <= 1e-6,
        "runtime < 1 s": elapsed < 1.0,
    }
    detail = ", ".join(f"{k} err {v:.2e}" for k, v in errs.items())
    report(capsys, 1, "hyperbolic closed forms", checks, detail, elapsed)


def test_criterion_2_sturm_comparison(capsys):
    t0 = time.perf_counter()
    checks, parts = {}, []
    for prof in (mg.exp_decay(1, 1), mg.exp_decay(0.5, 2)):
        for n in (2, 3):
            g = mg.build_geometry(prof, n, 60)
            r = g.r
            with np.errstate(invalid="ignore"):
                diff = g.log_h[1:] - mg.log_sinh(r[1:])
            mg.comparison_functions(g)
            # zeta >= 0, so the Cauchy tail beyond 40 is the integral itself
            sel = r >= 40.0
            tail = float(simpson(g.zeta[sel], x=r[sel]))
            key = f"{prof.spec} n={n}"
            checks[f"{key} h >= sinh"] = bool(np.all(diff >= 0))
            checks[f"{key} zeta >= 0"] = bool(np.all(g.zeta[1:] >= 0))
            checks[f"{key} zeta tail < 1e-6"] = tail < 1e-6
            parts.append(f"{key} tail {tail:.1e}")
    elapsed = time.perf_counter() - t0
    checks["runtime < 1 s"] = elapsed < 1.0
    report(capsys, 2, "Sturm comparison", checks, "; ".join(parts), elapsed)


def test_criterion_3_bottom_spectrum(capsys):
    t0 = time.perf_counter()
    checks, parts = {}, []
    for n in (3, 2):
        thr = (n - 1) ** 2 / 4
        g = mg.build_geometry(mg.constant(1), n, 30)
        rep = rs.bottom_spectrum_estimate(g, [15, 20, 25, 30])
        lam = {R: l for R, l, _ in rep.bottom_estimates}
        vals = [lam[R] for R in sorted(lam)]
        checks[f"n={n} non-increasing"] = bool(np.all(np.diff(vals) <= 0))
        checks[f"n={n} lambda1(25) in (thr, thr+0.02]"] = thr < lam[25.0] <= thr + 0.02
        checks[f"n={n} limit within 5e-3"] = abs(rep.fit["lam_inf"] - thr) <= 5e-3
        parts.append(f"n={n} lambda1(25) {lam[25.0]:.6f} limit {rep.fit['lam_inf']:.6f}")
    elapsed = time.perf_counter() - t0
    checks["runtime < 30 s"] = elapsed < 30
    report(capsys, 3, "bottom spectrum", checks, "; ".join(parts), elapsed)


def test_criterion_4_brooks_consistency(capsys):
    t0 = time.perf_counter()
    g = mg.build_geometry(mg.exp_decay(1, 1), 2, 40)
    brooks = mg.brooks_upper_bound(g)
    rep = rs.bottom_spectrum_estimate(g, [15, 20, 25, 30])
    lim = rep.fit["lam_inf"]
    elapsed = time.perf_counter() - t0
    checks = {
        "brooks 0.25 +- 0.01": abs(brooks - 0.25) <= 0.01,
        "extrapolation 0.25 +- 0.005": abs(lim - 0.25) <= 0.005,
        "agree within 0.015": abs(brooks - lim) <= 0.015,
        "runtime < 30 s": elapsed < 30,
    }
    report(capsys, 4, "Brooks consistency", checks, f"brooks {brooks:.6f}, extrapolated {lim:.6f}", elapsed)


def test_criterion_5_weyl_decay(capsys):
    t0 = time.perf_counter()
    Ls = (10, 100, 1000)
    hyp = mg.build_geometry(mg.constant(1), 2, 20 + max(Ls) + 3)
    qL = [we.weyl_quotient_model(hyp, 0.5, we.build_cutoff(20, 20 + L)).quotient for L in Ls]
    pin = mg.build_geometry(mg.exp_decay(1, 1), 3, 30 + 200 + 3)
    reps = [we.weyl_quotient_model(pin, 1.5, we.build_cutoff(t, t + 200)) for t in (10, 20, 30)]
    qt = [r.quotient for r in reps]
    F = [r.F_t for r in reps]
    elapsed = time.perf_counter() - t0
    minimum = min(qL + qt)
    checks = {
        "strictly decreasing in L": qL[0] > qL[1] > qL[2],
        "q(1000) <= q(10)/8": qL[2] <= qL[0] / 8,
        "decreasing in t": qt[0] > qt[1] > qt[2],
        "F non-increasing": F[0] >= F[1] >= F[2],
        "minimum < 1e-2": minimum < 1e-2,
        "runtime < 1 min": elapsed < 60,
    }
    detail = (f"q(L) {', '.join(f'{q:.4g}' for q in qL)}; q(t) {', '.join(f'{q:.10g}' for q in qt)}; "
              f"min {minimum:.4g}")
    report(capsys, 5, "Weyl decay", checks, detail, elapsed)


@pytest.fixture(scope="module")
def meshes():
    g = mg.build_geometry(mg.constant(1), 2, 13)
    out, times = {}, {}
    for key, delta, Nr, Nt in (("flat", 0.0, 600, 256), ("base", 0.1, 600, 256), ("fine", 0.1, 1200, 512)):
        t0 = time.perf_counter()
        mesh = ml.build_mesh(g, dict(PERT, delta=delta), Nr, Nt, 12.0)
        fld = ml.fake_distance(mesh, ml.solve_green(mesh))
        out[key] = fld
        times[key] = time.perf_counter() - t0
    return out, times


def test_criterion_6_mesh_identities(capsys, meshes):
    flds, times = meshes
    t0 = time.perf_counter()
    reps = {k: ml.identity_report(flds[k]) for k in ("base", "fine")}
    b, f = reps["base"], reps["fine"]
    flat = flds["flat"]
    elapsed = times["base"] + time.perf_counter() - t0
    checks = {
        "coarea <= 2%": b["coarea_err"] <= 0.02,
        "flux <= 2%": b["flux_err"] <= 0.02,
        "delta b <= 5%": b["deltab_resid"] <= 0.05,
        "max grad b <= 1.02": b["max_gradb"] <= 1.02,
        "coarea tightens": f["coarea_err"] <= b["coarea_err"],
        "flux tightens": f["flux_err"] <= b["flux_err"],
        "delta b tightens": f["deltab_resid"] <= b["deltab_resid"],
        "grad b excess tightens": max(f["max_gradb"] - 1, 0) <= max(b["max_gradb"] - 1, 0),
        "delta=0 |b-r|/r <= 2%": flat.checks["radial_dev"] <= 0.02,
        "runtime < 5 min": elapsed < 300,
    }
    detail = (f"coarea {b['coarea_err']:.2e}->{f['coarea_err']:.2e}, flux {b['flux_err']:.2e}->{f['flux_err']:.2e}, "
              f"delta b {b['deltab_resid']:.2e}->{f['deltab_resid']:.2e}, "
              f"grad b {b['max_gradb']:.6f}->{f['max_gradb']:.6f}, radial dev {flat.checks['radial_dev']:.1e}")
    report(capsys, 6, "mesh identities", checks, detail, elapsed)


def test_criterion_7_weighted_defect_bounds(capsys, meshes):
    flds, times = meshes
    t0 = time.perf_counter()
    base, fine, flat = flds["base"], flds["fine"], flds["flat"]
    i7 = ml.lemma_integrals(base, None, 3.0, 7.0)
    i9 = ml.lemma_integrals(base, None, 3.0, 9.0)
    j9 = ml.lemma_integrals(fine, None, 3.0, 9.0)
    z9 = ml.lemma_integrals(flat, None, 3.0, 9.0)
    elapsed = times["base"] + times["fine"] + times["flat"] + time.perf_counter() - t0
    drift = abs(j9["I_ratio"] / i9["I_ratio"] - 1)
    checks = {
        "I_minus[3,9] <= 1.1 I_minus[3,7]": i9["I_minus"] <= 1.1 * i7["I_minus"],
        "I_plus/I_minus stable within 5%": drift <= 0.05,
        "delta=0 I_plus <= 1e-3 vol": z9["I_plus"] <= 1e-3 * z9["band_volume"],
        "delta=0 I_minus <= 1e-3 vol": z9["I_minus"] <= 1e-3 * z9["band_volume"],
        "runtime < 5 min": elapsed < 300,
    }
    detail = (f"I_minus [3,7] {i7['I_minus']:.4f} [3,9] {i9['I_minus']:.4f}; "
              f"I_plus/I_minus {i9['I_ratio']:.6f}->{j9['I_ratio']:.6f} ({drift:.1e}); "
              f"delta=0 max I/vol {max(z9['I_plus'], z9['I_minus']) / z9['band_volume']:.1e}")
    report(capsys, 7, "weighted gradient-defect integrals", checks, detail, elapsed)


def test_criterion_8_embedded_controls(capsys):
    t0 = time.perf_counter()
    hyp = rs.schrodinger_form(mg.build_geometry(mg.constant(1), 2, 200), 200)
    checks, parts = {}, []
    for lam in (0.3, 0.5, 1.0):
        v = rs.classify_embedded(hyp, lam).verdict
        checks[f"H=1 lambda={lam} NOT_EMBEDDED"] = v is rs.Verdict.NOT_EMBEDDED
    checks["H=1 lambda=0.1 BELOW_THRESHOLD"] = rs.classify_embedded(hyp, 0.1).verdict is rs.Verdict.BELOW_THRESHOLD
    beta = 0.5
    for c in (0.5, 2.5, 5.0):
        form = rs.schrodinger_form(mg.build_geometry(mg.wigner(c, beta), 2, 200), 200)
        lam = 0.25 + beta**2
        verdict = rs.classify_embedded(form, lam).verdict
        oracle = rs.embedded_oracle(form, lam)
        checks[f"wigner({c}, {beta}) agrees with oracle"] = (verdict is rs.Verdict.CANDIDATE_EIGENVALUE) == oracle
        parts.append(f"wigner({c}) {verdict.value}/oracle {oracle}")
    elapsed = time.perf_counter() - t0
    checks["runtime < 1 min"] = elapsed < 60
    report(capsys, 8, "embedded-eigenvalue controls", checks, "; ".join(parts), elapsed)
