"""Configuration-driven stages: sieve, synth, detect, monodromy and run-all.

Layout of an output directory::

    sieve.csv
    spectrum/atlas.json, dataset.json, band.csv, rect_000.csv ...
    fits/fit_000.json ..., summary.csv
    monodromy/report.json, cover.svg
    run_manifest.json

Everything except ``run_manifest.json`` (which records timings) is a pure
function of the configuration, so repeated runs give identical hashes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .atlas_spectrum import (Annulus, AtlasError, AtlasSpec, Corrections, MaslovConsistencyError,
                             SpectrumDataset, ZERO_CORRECTIONS,
                             auto_loop_count, build_focus_focus_atlas, build_trivial_atlas,
                             check_offset_compatibility, loop_centers, synthesize_band)
from .classical_dynamics import build_model, good_value_sieve
from .config import ConfigError, RunConfig, check_regime
from .lattice_detect import (ChartFit, DetectionError, detect_basis, fit_chart, label_lattice,
                             overlap_center, rescale)
from .monodromy_core import (CechCocycle, IncompleteCoverError, MonodromyError, cocycle_check,
                             holonomy, is_trivial, kam_adjoint, transition)
from .svg import cover_svg, labeling_svg

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class StageFailure(RuntimeError):
    def __init__(self, message: str, exit_code: int = EXIT_NUMERIC):
        super().__init__(message)
        self.exit_code = exit_code


def _dump_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())
    return path


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class StageResult:
    name: str
    files: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# sieve
# ---------------------------------------------------------------------------

def _model_from_config(cfg: RunConfig):
    m = cfg.model
    if m.name == "linear_degenerate":
        return build_model(m.name, a1=m.a1, a2=m.a2)
    return build_model(m.name)


def stage_sieve(cfg: RunConfig, out: Path) -> StageResult:
    regime = check_regime(cfg)
    model = _model_from_config(cfg)
    res = good_value_sieve(model, cfg.model.energy, regime.alpha, regime.d, cfg.sieve.k_max,
                           cfg.sieve.n_samples, cfg.sieve.grid_n)
    rows = [[repr(v.G), repr(v.xi.xi1), repr(v.xi.xi2), repr(v.omega.omega1), repr(v.omega.omega2),
             repr(v.margin)] for v in res.values]
    path = _write_csv(out / "sieve.csv", ["G", "xi1", "xi2", "omega1", "omega2", "margin"], rows)
    warnings = list(res.flags)
    if not res.values:
        warnings.append("sieve retained no good values")
    for w in warnings:
        log.warning(w)
    return StageResult("sieve", [path], {"retained_fraction": res.retained_fraction,
                                         "n_good": len(res.values), "n_samples": res.n_samples,
                                         "excluded": res.excluded}, warnings)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def build_atlas(cfg: RunConfig, regime) -> AtlasSpec:
    a = cfg.atlas
    annulus = Annulus(tuple(a.center), a.r_min, a.r_max)
    corr = Corrections() if a.corrections == "default" else Corrections(dict(ZERO_CORRECTIONS))
    kw = dict(n_charts=a.n_charts, shear=a.shear, bilinear=a.bilinear, tau=a.tau, eta=a.eta, corrections=corr)
    if a.kind == "trivial":
        return build_trivial_atlas(annulus, regime, **kw)
    if a.kind == "focus_focus":
        return build_focus_focus_atlas(annulus, regime, **kw)
    atlas = AtlasSpec.from_dict(json.loads(Path(a.file).read_text()))
    atlas.validate()
    check_offset_compatibility(atlas, regime)
    return atlas


def loop_count(cfg: RunConfig, regime) -> int:
    if cfg.loop.count == "auto":
        return auto_loop_count(cfg.loop.radius, regime, cfg.loop.C1, cfg.loop.min_overlap)
    return int(cfg.loop.count)


def stage_synth(cfg: RunConfig, out: Path, workers: Optional[int] = None,
                blind: Optional[bool] = None) -> StageResult:
    regime = check_regime(cfg)
    atlas = build_atlas(cfg, regime)
    n = loop_count(cfg, regime)
    centers = loop_centers(atlas.base_topology, n, cfg.loop.radius, cfg.loop.phase)
    ds = synthesize_band(atlas, centers, regime, cfg.noise.kappa, cfg.noise.power, cfg.run.seed,
                         cfg.loop.C1, workers or cfg.run.workers)
    blind = cfg.run.blind if blind is None else blind
    sdir = out / "spectrum"
    sdir.mkdir(parents=True, exist_ok=True)
    files = [_dump_json(sdir / "atlas.json", atlas.to_dict())]
    ds.write(sdir / "band.csv", sdir / "dataset.json", blind=blind)
    files += [sdir / "band.csv", sdir / "dataset.json"]
    for r_i, rect in enumerate(ds.rectangles):
        sel = rect.contains_mu(ds.mu)
        sub = SpectrumDataset(ds.re[sel], ds.im[sel], regime,
                              None if blind else ds.source_chart[sel], None if blind else ds.k[sel])
        files.append(sub.write_csv(sdir / f"rect_{r_i:03d}.csv", blind=blind))
    warnings = []
    if ds.provenance.get("skipped"):
        warnings.append(f"{ds.provenance['skipped']} eigenvalues skipped (Newton did not converge)")
    return StageResult("synth", files, {"n_points": len(ds), "n_rectangles": len(ds.rectangles),
                                        "overlaps": [list(o) for o in ds.overlaps], "blind": blind,
                                        "atlas": atlas.name}, warnings)


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

def _load_spectrum_manifest(out: Path) -> dict:
    path = out / "spectrum" / "dataset.json"
    if not path.exists():
        raise FileNotFoundError(f"missing spectrum manifest {path}")
    return json.loads(path.read_text())


def stage_detect(cfg: RunConfig, out: Path) -> StageResult:
    man = _load_spectrum_manifest(out)
    dpath = out / "spectrum" / "dataset.json"
    det = cfg.detector
    fdir = out / "fits"
    fdir.mkdir(parents=True, exist_ok=True)
    for old in fdir.glob("fit_*.json"):
        old.unlink()
    files, rows, warnings = [], [], []
    n_rect = len(man["rectangles"])
    for r_i in range(n_rect):
        csv_path = out / "spectrum" / f"rect_{r_i:03d}.csv"
        if not csv_path.exists():
            raise FileNotFoundError(f"missing spectrum file {csv_path}")
        ds = SpectrumDataset.read(csv_path, dpath)
        rect = ds.rectangles[r_i]
        try:
            cloud = rescale(ds, rect)
            basis = detect_basis(cloud)
            lab = label_lattice(cloud, basis, det.reject_threshold, det.min_coverage)
            fit = fit_chart(cloud, lab, det.degree, ds.regime, det.fit_tolerance, det.min_coverage)
        except DetectionError as exc:
            msg = f"rectangle {r_i}: {type(exc).__name__}: {exc}"
            warnings.append(msg)
            log.warning(msg)
            rows.append([r_i, "failed", len(ds), "", "", "", type(exc).__name__])
            continue
        fit.meta.update({"rect_index": r_i, "coverage": lab.coverage,
                         "basis": np.asarray(lab.basis).tolist()})
        files.append(_dump_json(fdir / f"fit_{r_i:03d}.json", fit.to_dict()))
        rows.append([r_i, "ok", fit.n_points, repr(lab.coverage), repr(fit.residual_rms),
                     repr(fit.residual_max), ""])
        if cfg.run.debug_svg:
            svg = labeling_svg(cloud.points, lab.labels, lab.labeled, fit, f"rectangle {r_i}")
            p = fdir / f"labels_{r_i:03d}.svg"
            p.write_text(svg)
            files.append(p)
    files.append(_write_csv(fdir / "summary.csv",
                            ["rect", "status", "n_points", "coverage", "residual_rms_h", "residual_max_h", "error"],
                            rows))
    n_ok = sum(1 for r in rows if r[1] == "ok")
    return StageResult("detect", files, {"n_rectangles": n_rect, "n_fitted": n_ok}, warnings)


# ---------------------------------------------------------------------------
# monodromy
# ---------------------------------------------------------------------------

def load_fits(out: Path, n_rect: int) -> dict:
    fits = {}
    for r_i in range(n_rect):
        p = out / "fits" / f"fit_{r_i:03d}.json"
        if p.exists():
            fits[r_i] = ChartFit.from_dict(json.loads(p.read_text()))
    return fits


def _rects_overlap(fa: ChartFit, fb: ChartFit) -> bool:
    return bool(np.all(np.abs(fa.center - fb.center) < fa.scale + fb.scale))


def compute_cocycle(fits: dict, loop: list, eps: float, tol: float) -> tuple[CechCocycle, dict]:
    """Transitions on every overlapping pair of fitted rectangles, both directions computed independently."""
    for a, b in zip(loop, loop[1:] + loop[:1]):
        if a not in fits or b not in fits:
            missing = a if a not in fits else b
            raise IncompleteCoverError(f"no fit for rectangle {missing}: the loop does not close")
        if not _rects_overlap(fits[a], fits[b]):
            raise IncompleteCoverError(f"rectangles {a} and {b} do not overlap: the loop does not close")
    ids = sorted(fits)
    trans, centers = {}, {}
    for a in ids:
        for b in ids:
            if a == b or not _rects_overlap(fits[a], fits[b]):
                continue
            oc = overlap_center(fits[a].rect, fits[b].rect, eps)
            centers[(a, b)] = oc
            trans[(a, b)] = transition(fits[a], fits[b], oc, tol)
    return CechCocycle(tuple(loop), trans), centers


def stage_monodromy(cfg: RunConfig, out: Path) -> StageResult:
    man = _load_spectrum_manifest(out)
    eps = float(man["regime"]["eps"])
    n_rect = len(man["rectangles"])
    fits = load_fits(out, n_rect)
    loop = list(range(n_rect))
    cocycle, _ = compute_cocycle(fits, loop, eps, cfg.detector.transition_tolerance)
    report = cocycle_check(cocycle)
    hc = holonomy(cocycle, loop)
    kam = holonomy(cocycle.map(kam_adjoint), loop)
    errors = [t.rounding_error for t in cocycle.transitions.values()]
    doc = {
        "loop": loop,
        "orientation": "counterclockwise, product read left to right",
        "cocycle": cocycle.to_dict(),
        "cocycle_check": report.to_dict(),
        "holonomy": hc.to_dict(),
        "kam_holonomy": kam.to_dict(),
        "fingerprint": list(hc.fingerprint),
        "trivial": is_trivial(hc),
        "max_rounding_error": max(errors),
    }
    mdir = out / "monodromy"
    files = [_dump_json(mdir / "report.json", doc)]
    a = man.get("provenance", {})
    atlas_path = out / "spectrum" / "atlas.json"
    if atlas_path.exists():
        ad = json.loads(atlas_path.read_text())["annulus"]
        center, r_min, r_max = ad["center"], ad["r_min"], ad["r_max"]
    else:
        cs = np.array([f.center for f in fits.values()])
        center = cs.mean(axis=0)
        r_min, r_max = 0.0, float(np.linalg.norm(cs - center, axis=1).max() * 1.5)
    rects = [(fits[i].center, fits[i].scale) for i in loop]
    tlabels = {k: v.m.rows for k, v in cocycle.transitions.items()}
    svg = cover_svg(center, r_min, r_max, rects, tlabels,
                    f"holonomy {hc.representative.rows} fingerprint {hc.fingerprint}")
    (mdir / "cover.svg").write_text(svg)
    files.append(mdir / "cover.svg")
    warnings = [] if report.passed else ["cocycle check failed"]
    return StageResult("monodromy", files, {"fingerprint": list(hc.fingerprint), "trivial": is_trivial(hc),
                                            "max_rounding_error": max(errors), "cocycle_passed": report.passed,
                                            "atlas": a.get("atlas")}, warnings)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

STAGES = {"sieve": stage_sieve, "synth": stage_synth, "detect": stage_detect, "monodromy": stage_monodromy}
RUN_ALL = ("sieve", "synth", "detect", "monodromy")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageFailure):
        return exc.exit_code
    if isinstance(exc, (ConfigError, MaslovConsistencyError, AtlasError)):
        return EXIT_CONFIG
    if isinstance(exc, json.JSONDecodeError):
        return EXIT_IO
    if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError, OSError)):
        return EXIT_IO
    return EXIT_NUMERIC


def write_manifest(cfg: RunConfig, out: Path, results: list, failure: Optional[dict]) -> Path:
    files, fingerprint = {}, None
    for r in results:
        for p in r.files:
            p = Path(p)
            if p.exists():
                files[os.path.relpath(p, out)] = sha256(p)
        if r.name == "monodromy":
            fingerprint = r.summary.get("fingerprint")
    doc = {
        "version": __version__,
        "config": cfg.to_dict(),
        "stages": [{"name": r.name, "seconds": round(r.seconds, 4), "summary": r.summary,
                    "warnings": r.warnings} for r in results],
        "files": dict(sorted(files.items())),
        "fingerprint": fingerprint,
        "warnings": [w for r in results for w in r.warnings],
        "failure": failure,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    return _dump_json(out / "run_manifest.json", doc)


def run_stages(cfg: RunConfig, out, stages=RUN_ALL, workers: Optional[int] = None,
               blind: Optional[bool] = None) -> tuple[int, list, Optional[dict]]:
    """Run ``stages`` in order; stop at the first hard failure. The manifest is always written."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results, failure, code = [], None, EXIT_OK
    for name in stages:
        t0 = time.perf_counter()
        try:
            if name == "synth":
                res = stage_synth(cfg, out, workers, blind)
            else:
                res = STAGES[name](cfg, out)
        except Exception as exc:  # classified into exit codes below
            code = exit_code_for(exc)
            failure = {"stage": name, "error": type(exc).__name__, "message": str(exc), "exit_code": code}
            log.error("%s failed: %s: %s", name, type(exc).__name__, exc)
            break
        res.seconds = time.perf_counter() - t0
        results.append(res)
    write_manifest(cfg, out, results, failure)
    return code, results, failure
