"""Config-driven runner for the laboratory.

Every task reads one YAML (or JSON) file with a strict schema.  Reports are
written as ``# key value`` header lines followed by the CSV or JSON body, so
bodies stay byte-identical across reruns while the header records the tool
version, the config hash and a timestamp.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from . import model_geometry as mg
from . import radial_spectrum as rs
from . import weyl_engine as we
from .errors import ConfigInvalid, LabError, WindowExceedsGrid, WindowTouchesBoundary

log = logging.getLogger("speclab")

TASKS = ("model", "spectrum", "weyl", "mesh", "explore")
SIG_DIGITS = 12
EXIT_OK, EXIT_MODULE, EXIT_CONFIG = 0, 1, 2


# ------------------------------------------------------------------ schema

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ProfileSpec(_Strict):
    name: Literal["constant", "exp_decay", "power_decay", "wigner"]
    params: list[float]

    @model_validator(mode="after")
    def _arity(self):
        want = 1 if self.name == "constant" else 2
        if len(self.params) != want:
            raise ValueError(f"{self.name} takes {want} parameter(s)")
        return self

    def build(self):
        return mg.make_profile(self.name, self.params)


class ModelParams(_Strict):
    r_max: float = Field(20.0, gt=0)
    dr: float = Field(0.05, gt=0)
    tol: float = Field(1e-10, gt=0)


class SpectrumParams(_Strict):
    R_list: list[float] = [15.0, 20.0, 25.0, 30.0]
    s_min: float = Field(rs.S_MIN, gt=0)
    ds: float = Field(rs.DS, gt=0)
    lambdas: list[float] = []
    cross_check: bool = True


class WeylParams(_Strict):
    lam: list[float] = [0.5]
    t: list[float] = [20.0]
    L: list[float] = [10.0, 100.0, 1000.0]
    far_width: float = Field(1.0, ge=1.0)
    smoothstep_order: int = 5
    t0: float = we.T0
    epsilons: list[float] = list(we.EPSILONS)
    r_max: Optional[float] = None


class MeshWindow(_Strict):
    t: float
    s: float
    S: Optional[float] = None


class MeshParams(_Strict):
    Nr: int = Field(600, ge=8)
    Ntheta: int = Field(256, ge=16)
    R_max: float = Field(12.0, gt=0)
    delta: float = Field(0.1, ge=0, lt=1)
    r_lo: float = 3.0
    r_hi: float = 6.0
    mode_m: int = Field(3, ge=1)
    envelope: Optional[float] = None
    exhaustion_radii: Optional[list[float]] = None
    preconditioner: Literal["radial", "amg"] = "radial"
    band: tuple[float, float] = (2.0, 8.0)
    lemma_window: tuple[float, float] = (3.0, 9.0)
    weyl_lam: list[float] = [0.5]
    weyl_windows: list[MeshWindow] = []
    dump_fields: bool = False


class ExploreParams(_Strict):
    lambdas: Optional[list[float]] = None
    lam_above: tuple[float, float, int] = (0.05, 1.0, 12)
    s_max: float = Field(200.0, gt=0)
    tol: float = Field(1e-3, gt=0)


class OutputSpec(_Strict):
    dir: str = "out"


class ExperimentConfig(_Strict):
    task: Optional[Literal["model", "spectrum", "weyl", "mesh", "explore"]] = None
    profile: ProfileSpec
    n: int = Field(ge=2)
    seed: int = 0
    output: OutputSpec = OutputSpec()
    model: ModelParams = ModelParams()
    spectrum: SpectrumParams = SpectrumParams()
    weyl: WeylParams = WeylParams()
    mesh: MeshParams = MeshParams()
    explore: ExploreParams = ExploreParams()

    @field_validator("profile", mode="before")
    @classmethod
    def _profile_text(cls, v):
        if isinstance(v, str):
            p = mg.parse_profile(v)
            return {"name": p.name, "params": list(p.params)}
        return v


def _loc(err) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a raw mapping; ConfigInvalid names the first offending key."""
    if not isinstance(data, dict):
        raise ConfigInvalid("config must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        e = exc.errors()[0]
        raise ConfigInvalid(f"{_loc(e)}: {e['msg']}") from None
    except LabError as exc:
        raise ConfigInvalid(f"profile: {exc}") from None


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"unparsable config: {exc}") from None
    data = dict(data or {})
    for key, val in (overrides or {}).items():
        if key == "output.dir":
            data["output"] = dict(data.get("output") or {}, dir=val)
        else:
            data[key] = val
    return parse_config(data)


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 of the resolved config; the output location does not enter."""
    canon = json.dumps(cfg.model_dump(mode="json", exclude={"output"}), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ------------------------------------------------------------------ output

def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), f".{SIG_DIGITS}g")
    return str(x)


def _round(obj):
    """Floats to 12 significant digits, non-finite values to null."""
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return float(format(x, f".{SIG_DIGITS}g")) if math.isfinite(x) else None
    if isinstance(obj, np.ndarray):
        return _round(obj.tolist())
    return obj


class ReportWriter:
    def __init__(self, out_dir, cfg: ExperimentConfig):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.header = (
            f"# tool speclab {__version__}\n"
            f"# config_sha256 {config_hash(cfg)}\n"
            f"# generated {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n"
        )
        self.written: list[Path] = []

    def _write(self, name, body):
        path = self.dir / name
        path.write_text(self.header + body)
        self.written.append(path)
        log.info("wrote %s", path)
        return path

    def csv(self, name, columns: str, rows):
        lines = [columns] + [",".join(fmt(v) for v in row) for row in rows]
        return self._write(name, "\n".join(lines) + "\n")

    def json(self, name, obj):
        return self._write(name, json.dumps(_round(obj), indent=2) + "\n")


def read_report(path):
    """Split a report into its header mapping and body text."""
    header, body = {}, []
    for line in Path(path).read_text().splitlines(keepends=True):
        if line.startswith("# ") and not body:
            key, _, val = line[2:].rstrip("\n").partition(" ")
            header[key] = val
        else:
            body.append(line)
    return header, "".join(body)


# ------------------------------------------------------------------- tasks

def _weyl_r_max(cfg: ExperimentConfig) -> float:
    w = cfg.weyl
    if w.r_max is not None:
        return w.r_max
    return max(w.t) + max(w.L) + w.far_width + 2.0


def _geometry(cfg, r_max):
    m = cfg.model
    return mg.build_geometry(cfg.profile.build(), cfg.n, r_max, tol=m.tol, dr=m.dr)


def run_model(cfg, out: ReportWriter, threads=1):
    geom = _geometry(cfg, cfg.model.r_max)
    out.csv("model.csv", "r,h,hp,v,V,G,a,zeta", mg.table(geom))
    summary = {"profile": cfg.profile.build().spec, "n": cfg.n, "r_max": geom.r_max,
               "nonparabolic": mg.check_nonparabolic(geom)}
    try:
        summary["brooks_upper_bound"] = mg.brooks_upper_bound(geom)
    except LabError as exc:
        summary["brooks_upper_bound"] = None
        summary["brooks_error"] = exc.code
    out.json("model_summary.json", summary)


def run_spectrum(cfg, out: ReportWriter, threads=1):
    sp = cfg.spectrum
    geom = _geometry(cfg, max(sp.R_list))
    rep = rs.bottom_spectrum_estimate(geom, sp.R_list, s_min=sp.s_min, ds=sp.ds, cross_check=sp.cross_check)
    out.csv("bottom.csv", "lambda,R,lambda1,err", rep.bottom_rows())
    fit = dict(rep.fit, threshold=rep.threshold)
    try:
        fit["brooks_upper_bound"] = mg.brooks_upper_bound(geom)
    except LabError as exc:
        fit["brooks_upper_bound"] = None
        fit["brooks_error"] = exc.code
    out.json("bottom_fit.json", fit)
    if sp.lambdas:
        form = rs.schrodinger_form(geom, max(sp.R_list), sp.s_min, sp.ds)
        out.json("classification.json", [rs.classify_embedded(form, lam).to_json() for lam in sp.lambdas])


def run_weyl(cfg, out: ReportWriter, threads=1):
    w = cfg.weyl
    profile = cfg.profile.build()
    if not profile.is_integrable:
        raise ConfigInvalid(f"profile: {profile.spec} is not L1_INTEGRABLE, the Weyl construction needs it")
    geom = _geometry(cfg, _weyl_r_max(cfg))
    rows, reports, selections = [], [], []
    for lam in w.lam:
        scan = we.decay_scan(geom, lam, w.t, w.L, far_width=w.far_width, smoothstep_order=w.smoothstep_order,
                             t0=w.t0, epsilons=w.epsilons, workers=threads)
        for row in scan.reports:
            for rep in row:
                rows.append(rep.csv_row())
                reports.append(rep.to_json())
        selections.append({"lambda": lam, "minimum": scan.minimum, "rows_decreasing": scan.rows_decreasing,
                           "cols_decreasing": scan.cols_decreasing, "selection": scan.selection})
    out.csv("weyl.csv", we.CSV_HEADER, rows)
    out.json("weyl.json", reports)
    out.json("weyl_selection.json", selections)


def _mesh_geometry(cfg):
    return _geometry(cfg, cfg.mesh.R_max + 1.0)


def _mesh_windows(cfg):
    return [we.build_cutoff(w.t, w.s, w.S, smoothstep_order=cfg.weyl.smoothstep_order, t0=cfg.weyl.t0)
            for w in cfg.mesh.weyl_windows]


def run_mesh(cfg, out: ReportWriter, threads=1):
    from . import mesh_lab as ml

    p = cfg.mesh
    pert = ml.Perturbation(p.delta, p.r_lo, p.r_hi, p.mode_m)
    mesh = ml.build_mesh(_mesh_geometry(cfg), pert, p.Nr, p.Ntheta, p.R_max, envelope=p.envelope)
    ker = ml.solve_green(mesh, p.exhaustion_radii, preconditioner=p.preconditioner)
    fld = ml.fake_distance(mesh, ker)
    out.json("identities.json", ml.identity_report(fld, band=p.band, lemma_window=p.lemma_window))

    rng = np.random.default_rng(cfg.seed)
    x, y = rng.standard_normal((2, mesh.size))
    vol = mesh.cell_volumes
    a, b = np.dot(vol * mesh.apply_laplacian(x), y), np.dot(x, vol * mesh.apply_laplacian(y))
    details = {
        "window_valid": list(fld.window_valid),
        "ell_estimate": ker.ell_estimate,
        "H_eff_max": float(mesh.H_eff.max()),
        "checks": fld.checks,
        "self_adjoint_err": abs(a - b) / max(abs(a), abs(b), 1e-300),
        "level_identities": ml.level_identities(fld, None, *p.band),
        "lemma": ml.lemma_integrals(fld, None, *p.lemma_window),
    }
    out.json("mesh_details.json", details)
    if p.weyl_windows:
        rows, reps = [], []
        for lam in p.weyl_lam:
            for cut in _mesh_windows(cfg):
                rep = we.weyl_quotient_mesh(mesh, fld, lam, cut)
                rows.append(rep.csv_row())
                reps.append(rep.to_json())
        out.csv("mesh_weyl.csv", we.CSV_HEADER, rows)
        out.json("mesh_weyl.json", reps)
    if p.dump_fields:
        out.csv("fields.csv", ml.FIELD_CSV_HEADER, ml.field_rows(fld)[1:])


def _explore_lambdas(cfg):
    e = cfg.explore
    if e.lambdas is not None:
        return list(e.lambdas)
    thr = (cfg.n - 1) ** 2 / 4.0
    lo, hi, k = e.lam_above
    return [thr + float(d) for d in np.linspace(lo, hi, int(k))]


def run_explore(cfg, out: ReportWriter, threads=1):
    e = cfg.explore
    geom = _geometry(cfg, e.s_max)
    form = rs.schrodinger_form(geom, e.s_max)
    lams = _explore_lambdas(cfg)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        recs = list(pool.map(lambda lam: rs.classify_embedded(form, lam, tol=e.tol), lams))
    out.json("explore.json", [r.to_json() for r in recs])
    hyp = mg.check_hypotheses(cfg.profile.build(), e.s_max)
    out.json("explore_hypotheses.json", dict(hyp, profile=cfg.profile.build().spec,
                                             candidates=sum(r.verdict is rs.Verdict.CANDIDATE_EIGENVALUE for r in recs)))


RUNNERS = {"model": run_model, "spectrum": run_spectrum, "weyl": run_weyl, "mesh": run_mesh, "explore": run_explore}


def run(cfg: ExperimentConfig, task: Optional[str] = None, out_dir=None, threads: int = 1) -> list:
    """Run one task; returns the paths written."""
    task = _resolve_task(cfg, task)
    out = ReportWriter(out_dir or cfg.output.dir, cfg)
    RUNNERS[task](cfg, out, threads)
    return out.written


def _resolve_task(cfg, task):
    if task is None:
        if cfg.task is None:
            raise ConfigInvalid("task: required when no subcommand names it")
        return cfg.task
    if cfg.task is not None and cfg.task != task:
        raise ConfigInvalid(f"task: config says {cfg.task!r} but subcommand is {task!r}")
    return task


# ---------------------------------------------------------------- validate

def _bytes(n_float):
    return int(8 * n_float)


def validate(cfg: ExperimentConfig, task: Optional[str] = None) -> list[str]:
    """Resolve grids and windows without computing; first line is OK or the refusal."""
    task = _resolve_task(cfg, task)
    profile = cfg.profile.build()
    lines = [f"profile {profile.spec} ({profile.asymptotic_class.value})", f"n {cfg.n}", f"seed {cfg.seed}",
             f"output {cfg.output.dir}"]
    problems = []
    dr = cfg.model.dr
    if task == "model":
        K = int(round(cfg.model.r_max / dr))
        lines += [f"r_max {fmt(cfg.model.r_max)}", f"nodes {K + 1}"]
        mem = _bytes(12 * (K + 1))
    elif task == "spectrum":
        sp = cfg.spectrum
        R = max(sp.R_list)
        if len(sp.R_list) < 3 or np.any(np.diff(sp.R_list) <= 0):
            raise ConfigInvalid("spectrum.R_list: need at least 3 increasing radii")
        nodes = int(round((R - sp.s_min) / sp.ds)) + 1
        lines += [f"R_list {[fmt(r) for r in sp.R_list]}", f"form nodes {nodes}", f"lambdas {len(sp.lambdas)}"]
        mem = _bytes(12 * R / dr + 10 * nodes)
    elif task == "weyl":
        w = cfg.weyl
        r_max = _weyl_r_max(cfg)
        if not profile.is_integrable:
            problems.append(f"NOT_L1_INTEGRABLE: {profile.spec} has a non-integrable curvature excess")
        for t in w.t:
            for L in w.L:
                try:
                    cut = we.build_cutoff(t, t + L, t + L + w.far_width, w.smoothstep_order, w.t0)
                except LabError as exc:
                    problems.append(f"t={fmt(t)} L={fmt(L)}: {exc}")
                    continue
                if cut.S + 1 > r_max:
                    problems.append(str(WindowExceedsGrid(f"t={fmt(t)} L={fmt(L)}: S+1 = {fmt(cut.S + 1)} > r_max = {fmt(r_max)}")))
        lines += [f"lambda {[fmt(x) for x in w.lam]}", f"t {[fmt(x) for x in w.t]}", f"L {[fmt(x) for x in w.L]}",
                  f"r_max {fmt(r_max)}", f"cells {len(w.lam) * len(w.t) * len(w.L)}"]
        mem = _bytes(12 * r_max / dr)
    elif task == "mesh":
        p = cfg.mesh
        if cfg.n != 2:
            problems.append("BAD_WINDOW: the mesh laboratory is two-dimensional, set n = 2")
        if p.Ntheta < 16 * p.mode_m:
            problems.append(f"BAD_WINDOW: Ntheta = {p.Ntheta} < 16 m = {16 * p.mode_m}")
        if not (1.0 < p.r_lo < p.r_hi < p.R_max - 2.0):
            problems.append(f"BAD_WINDOW: perturbation support [{fmt(p.r_lo)}, {fmt(p.r_hi)}] not inside (1, R_max - 2)")
        limit = p.R_max - 2.0
        for w in p.weyl_windows:
            S = w.s + 1.0 if w.S is None else w.S
            if S >= limit:
                problems.append(str(WindowTouchesBoundary(
                    f"window (t={fmt(w.t)}, s={fmt(w.s)}, S={fmt(S)}) reaches R_max - 2 = {fmt(limit)}")))
        size = 1 + p.Nr * p.Ntheta
        lines += [f"mesh {p.Nr} x {p.Ntheta}, R_max {fmt(p.R_max)}, delta {fmt(p.delta)}, m {p.mode_m}",
                  f"unknowns {size}", f"weyl windows {len(p.weyl_windows)}"]
        mem = _bytes(40 * size)
    else:
        e = cfg.explore
        nodes = int(round((e.s_max - rs.S_MIN) / rs.DS)) + 1
        lines += [f"lambdas {[fmt(x) for x in _explore_lambdas(cfg)]}", f"form nodes {nodes}"]
        mem = _bytes(12 * e.s_max / dr + 12 * nodes)
    lines.append(f"memory_estimate_mb {fmt(round(mem / 2**20, 1))}")
    head = ["REFUSED"] + [f"  {p}" for p in problems] if problems else ["OK"]
    return head + [f"task {task}"] + lines


# --------------------------------------------------------------------- main

def build_parser():
    ap = argparse.ArgumentParser(prog="speclab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"speclab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in TASKS + ("validate",):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output.dir"] = args.out
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "validate":
            lines = validate(cfg)
            print("\n".join(lines))
            return EXIT_OK if lines[0] == "OK" else EXIT_MODULE
        for path in run(cfg, args.command, threads=max(1, args.threads)):
            print(path)
        return EXIT_OK
    except ConfigInvalid as exc:
        print(f"speclab: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LabError as exc:
        print(f"speclab {args.command}: {exc}", file=sys.stderr)
        return EXIT_MODULE
