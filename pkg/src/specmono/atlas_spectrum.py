"""Quantization atlases and synthetic spectra.

An atlas covers an annulus in the rescaled plane ``u = (Re mu, Im mu / eps)``
by angular sectors.  On chart ``j`` the quantization rule reads

    f_j(u) = tau + h * eta / 4 + g_j(Phi(u - u0)) in h Z^2,

where ``g_j`` is a branch of the (possibly multivalued) action map and
``Phi(w) = w + eps c1(w) + (h/eps) c2(w) + lambda c_lambda(w)`` carries the
planted higher-order terms.  Eigenvalues are the solutions ``u`` mapped back
by ``mu = u1 + i eps u2``.

``Phi`` is composed inside the branch (rather than added to it) so that the
solution set is the same in every chart of an overlap; see
:func:`check_offset_compatibility` for the matching condition on ``tau`` and
``eta``.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .classical_dynamics import DomainError, SemiclassicalRegime
from .monodromy_core import IDENTITY, CechCocycle, IntMatrix2, cocycle_check

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
NEWTON_MAX_ITER = 50
NEWTON_TOL = 1e-14
DEDUP_FACTOR = 1e-6


class MaslovConsistencyError(ValueError):
    """Offsets ``tau + h eta / 4`` incompatible with the planted transitions."""


class AtlasError(ValueError):
    pass


def wrap_angle(theta):
    """Map angles to ``(-pi, pi]``."""
    return np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), TWO_PI)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Annulus:
    center: tuple = (1.0, 0.4)
    r_min: float = 0.002
    r_max: float = 0.05

    def __post_init__(self):
        if not (0 < self.r_min < self.r_max):
            raise ValueError("annulus needs 0 < r_min < r_max")

    @property
    def u0(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "r_min": self.r_min, "r_max": self.r_max}

    @classmethod
    def from_dict(cls, d: dict) -> "Annulus":
        return cls(tuple(float(x) for x in d["center"]), float(d["r_min"]), float(d["r_max"]))


@dataclass(frozen=True)
class Sector:
    """Angular sector ``{r_min <= |w| <= r_max, |arg w - angle| <= half_width}`` of an annulus."""

    annulus: Annulus
    angle: float
    half_width: float

    def contains(self, u) -> np.ndarray:
        w = np.asarray(u, dtype=float) - self.annulus.u0
        r = np.hypot(w[..., 0], w[..., 1])
        dtheta = np.abs(wrap_angle(np.arctan2(w[..., 1], w[..., 0]) - self.angle))
        return (r >= self.annulus.r_min) & (r <= self.annulus.r_max) & (dtheta <= self.half_width)

    def overlaps(self, other: "Sector") -> bool:
        gap = abs(float(wrap_angle(self.angle - other.angle)))
        return gap < self.half_width + other.half_width

    def overlap_midangle(self, other: "Sector") -> float:
        a = self.angle
        b = a + float(wrap_angle(other.angle - a))
        lo = max(a - self.half_width, b - other.half_width)
        hi = min(a + self.half_width, b + other.half_width)
        if lo >= hi:
            raise AtlasError("sectors do not overlap")
        return 0.5 * (lo + hi)

    def to_dict(self) -> dict:
        return {"angle": self.angle, "half_width": self.half_width}


# ---------------------------------------------------------------------------
# branches and planted corrections
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShearBranch:
    """Single-valued ``g(w) = (w1, w2 + shear w1 + bilinear w1 w2)``; identity when both are 0."""

    shear: float = 0.0
    bilinear: float = 0.1
    kind: str = field(default="shear", init=False)

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        w1, w2 = w[..., 0], w[..., 1]
        return np.stack([w1, w2 + self.shear * w1 + self.bilinear * w1 * w2], axis=-1)

    def jacobian(self, w):
        w = np.asarray(w, dtype=float)
        J = np.zeros(w.shape + (2,))
        J[..., 0, 0] = 1.0
        J[..., 1, 0] = self.shear + self.bilinear * w[..., 1]
        J[..., 1, 1] = 1.0 + self.bilinear * w[..., 0]
        return J

    def validate_region(self, w) -> None:
        return None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shear": self.shear, "bilinear": self.bilinear}


@dataclass(frozen=True)
class FocusFocusBranch:
    """``g(w) = (w1, s(w) + theta(w) w1 / 2pi)`` with ``theta`` continuous in ``(ref - pi, ref + pi]``.

    ``s(w) = w2 + shear w1 + bilinear w1 w2``.  Going once around the origin
    adds ``(0, w1)`` to ``g``, i.e. multiplies it by ``[[1, 0], [1, 1]]``.
    """

    ref_angle: float
    shear: float = 0.0
    bilinear: float = 0.1
    kind: str = field(default="focus_focus", init=False)

    def theta(self, w):
        w = np.asarray(w, dtype=float)
        return self.ref_angle + wrap_angle(np.arctan2(w[..., 1], w[..., 0]) - self.ref_angle)

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        w1, w2 = w[..., 0], w[..., 1]
        s = w2 + self.shear * w1 + self.bilinear * w1 * w2
        return np.stack([w1, s + self.theta(w) * w1 / TWO_PI], axis=-1)

    def jacobian(self, w):
        w = np.asarray(w, dtype=float)
        w1, w2 = w[..., 0], w[..., 1]
        r2 = w1 * w1 + w2 * w2
        J = np.zeros(w.shape + (2,))
        J[..., 0, 0] = 1.0
        J[..., 1, 0] = self.shear + self.bilinear * w2 + (self.theta(w) - w1 * w2 / r2) / TWO_PI
        J[..., 1, 1] = 1.0 + self.bilinear * w1 + w1 * w1 / (r2 * TWO_PI)
        return J

    def validate_region(self, w) -> None:
        """The branch is smooth away from the origin and the ray opposite ``ref_angle``."""
        w = np.asarray(w, dtype=float)
        d = np.abs(wrap_angle(np.arctan2(w[..., 1], w[..., 0]) - self.ref_angle))
        if np.any(np.hypot(w[..., 0], w[..., 1]) == 0) or np.any(d > np.pi - 1e-3):
            raise DomainError("region meets the branch cut or the singular point")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ref_angle": self.ref_angle, "shear": self.shear,
                "bilinear": self.bilinear}


def branch_from_dict(d: dict):
    if d["kind"] == "shear":
        return ShearBranch(float(d["shear"]), float(d["bilinear"]))
    if d["kind"] == "focus_focus":
        return FocusFocusBranch(float(d["ref_angle"]), float(d["shear"]), float(d["bilinear"]))
    raise AtlasError(f"unknown branch kind {d['kind']!r}")


def _quad_monomials(w):
    w1, w2 = w[..., 0], w[..., 1]
    return np.stack([w1 * w1, w1 * w2, w2 * w2], axis=-1)


def _quad_monomials_jac(w):
    w1, w2 = w[..., 0], w[..., 1]
    z = np.zeros_like(w1)
    # d/dw1 and d/dw2 of (w1^2, w1 w2, w2^2)
    return np.stack([np.stack([2 * w1, w2, z], -1), np.stack([z, w1, 2 * w2], -1)], axis=-1)


DEFAULT_CORRECTIONS = {
    "eps": ((0.0, 0.05, 0.0), (0.05, 0.0, 0.0)),
    "h_over_eps": ((0.0, 0.0, 0.05), (0.0, 0.05, 0.0)),
    "lambda": ((0.05, 0.0, 0.0), (0.0, 0.0, 0.05)),
}
ZERO_CORRECTIONS = {k: ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)) for k in DEFAULT_CORRECTIONS}


@dataclass(frozen=True)
class Corrections:
    """Quadratic planted terms; each entry is a 2x3 table over ``(w1^2, w1 w2, w2^2)``."""

    coeffs: dict = field(default_factory=lambda: dict(DEFAULT_CORRECTIONS))

    def _weights(self, regime: SemiclassicalRegime) -> dict:
        return {"eps": regime.eps, "h_over_eps": regime.h / regime.eps, "lambda": regime.lam}

    def combined(self, regime: SemiclassicalRegime) -> np.ndarray:
        C = np.zeros((2, 3))
        for key, weight in self._weights(regime).items():
            if key in self.coeffs:
                C += weight * np.asarray(self.coeffs[key], dtype=float)
        return C

    def phi(self, w, regime: SemiclassicalRegime):
        w = np.asarray(w, dtype=float)
        return w + _quad_monomials(w) @ self.combined(regime).T

    def phi_jacobian(self, w, regime: SemiclassicalRegime):
        w = np.asarray(w, dtype=float)
        C = self.combined(regime)
        dm = _quad_monomials_jac(w)  # (..., 3, 2)
        return np.eye(2) + np.einsum("im,...mk->...ik", C, dm)

    def to_dict(self) -> dict:
        return {k: [list(r) for r in v] for k, v in self.coeffs.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Corrections":
        unknown = set(d) - set(DEFAULT_CORRECTIONS)
        if unknown:
            raise AtlasError(f"unknown correction keys {sorted(unknown)}")
        return cls({k: tuple(tuple(float(x) for x in r) for r in v) for k, v in d.items()})


# ---------------------------------------------------------------------------
# charts and atlases
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChartSpec:
    chart_id: int
    base_domain: Sector
    psi_inverse: object
    tau: tuple = (0.0, 0.0)
    eta: tuple = (0, 0)
    S_action: Optional[tuple] = None

    @property
    def ref_point(self) -> np.ndarray:
        a = self.base_domain.annulus
        r = 0.5 * (a.r_min + a.r_max)
        return a.u0 + r * np.array([math.cos(self.base_domain.angle), math.sin(self.base_domain.angle)])

    def action_integrals(self) -> tuple:
        """``S = 2 pi (tau + xi_ref)``, ``xi_ref`` being the branch value at the reference point."""
        if self.S_action is not None:
            return tuple(self.S_action)
        xi = self.psi_inverse(self.ref_point - self.base_domain.annulus.u0)
        return tuple(float(x) for x in TWO_PI * (np.asarray(self.tau) + xi))

    def offset(self, h: float) -> np.ndarray:
        return np.asarray(self.tau, dtype=float) + h * np.asarray(self.eta, dtype=float) / 4.0

    def to_dict(self) -> dict:
        return {"chart_id": self.chart_id, "sector": self.base_domain.to_dict(),
                "psi_inverse": self.psi_inverse.to_dict(), "tau": list(self.tau),
                "eta": list(self.eta), "S_action": list(self.action_integrals())}


@dataclass(frozen=True)
class AtlasSpec:
    name: str
    charts: tuple
    planted_transitions: dict
    base_topology: Annulus
    correction_coeffs: Corrections = field(default_factory=Corrections)

    def chart(self, chart_id: int) -> ChartSpec:
        for c in self.charts:
            if c.chart_id == chart_id:
                return c
        raise AtlasError(f"no chart {chart_id} in atlas {self.name!r}")

    @property
    def cover(self) -> tuple:
        return tuple(c.chart_id for c in self.charts)

    def cocycle(self) -> CechCocycle:
        return CechCocycle(self.cover, dict(self.planted_transitions), tuple(self.triple_overlaps()))

    def triple_overlaps(self) -> list:
        out = []
        n = len(self.charts)
        for a in range(n):
            for b in range(a + 1, n):
                for c in range(b + 1, n):
                    s = [self.charts[i].base_domain for i in (a, b, c)]
                    if _sectors_share_point(s):
                        out.append((self.charts[a].chart_id, self.charts[b].chart_id, self.charts[c].chart_id))
        return out

    def loop_product(self) -> IntMatrix2:
        cyc = self.cocycle()
        ids = list(self.cover)
        m = IDENTITY
        for a, b in zip(ids, ids[1:] + ids[:1]):
            m = m @ cyc.matrix(a, b)
        return m

    def chart_for_point(self, u) -> int:
        """Chart whose sector center is angularly closest to ``u`` (ties: lower id)."""
        w = np.asarray(u, dtype=float) - self.base_topology.u0
        ang = math.atan2(w[1], w[0])
        best = min(self.charts, key=lambda c: (abs(float(wrap_angle(ang - c.base_domain.angle))), c.chart_id))
        return best.chart_id

    def f_tilde(self, chart_id: int, u, regime: SemiclassicalRegime):
        chart = self.chart(chart_id)
        w = np.asarray(u, dtype=float) - self.base_topology.u0
        return chart.offset(regime.h) + chart.psi_inverse(self.correction_coeffs.phi(w, regime))

    def f_tilde_jacobian(self, chart_id: int, u, regime: SemiclassicalRegime):
        chart = self.chart(chart_id)
        w = np.asarray(u, dtype=float) - self.base_topology.u0
        z = self.correction_coeffs.phi(w, regime)
        return chart.psi_inverse.jacobian(z) @ self.correction_coeffs.phi_jacobian(w, regime)

    def validate(self, grid_n: int = 24) -> None:
        """Structural checks: cover, unimodularity, cocycle identity, invertible branches."""
        secs = [c.base_domain for c in self.charts]
        for a, b in zip(secs, secs[1:] + secs[:1]):
            if len(secs) > 1 and not a.overlaps(b):
                raise AtlasError("consecutive charts do not overlap")
        if sum(2 * s.half_width for s in secs) < TWO_PI:
            raise AtlasError("sectors do not cover the annulus")
        for key, m in self.planted_transitions.items():
            if not m.is_unimodular():
                raise AtlasError(f"planted transition {key} = {m} is not in GL(2, Z)")
        report = cocycle_check(self.cocycle())
        if not report.passed:
            raise AtlasError(f"planted transitions violate the cocycle identity: {report.to_dict()}")
        for c in self.charts:
            pts = _sector_grid(c.base_domain, grid_n)
            w = pts - self.base_topology.u0
            det = np.linalg.det(c.psi_inverse.jacobian(w))
            if not (np.all(det > 0) or np.all(det < 0)):
                raise AtlasError(f"chart {c.chart_id}: differential of psi^-1 is not invertible")
            img = c.psi_inverse(w)
            dist, _ = cKDTree(img).query(img, k=2)
            if np.any(dist[:, 1] == 0.0):
                raise AtlasError(f"chart {c.chart_id}: psi^-1 is not injective on the grid")
            S = np.asarray(c.action_integrals())
            xi_ref = c.psi_inverse(c.ref_point - self.base_topology.u0)
            if not np.allclose(S / TWO_PI - xi_ref, c.tau, atol=1e-12, rtol=0):
                raise AtlasError(f"chart {c.chart_id}: tau != S/2pi - xi")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "annulus": self.base_topology.to_dict(),
            "charts": [c.to_dict() for c in self.charts],
            "planted_transitions": [{"i": i, "j": j, "m": [list(r) for r in m.rows]}
                                    for (i, j), m in sorted(self.planted_transitions.items())],
            "corrections": self.correction_coeffs.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AtlasSpec":
        annulus = Annulus.from_dict(d["annulus"])
        charts = []
        for c in d["charts"]:
            sec = Sector(annulus, float(c["sector"]["angle"]), float(c["sector"]["half_width"]))
            charts.append(ChartSpec(int(c["chart_id"]), sec, branch_from_dict(c["psi_inverse"]),
                                    tuple(float(x) for x in c.get("tau", (0.0, 0.0))),
                                    tuple(int(x) for x in c.get("eta", (0, 0))),
                                    tuple(float(x) for x in c["S_action"]) if "S_action" in c else None))
        planted = {(int(t["i"]), int(t["j"])): IntMatrix2.from_rows(t["m"]) for t in d["planted_transitions"]}
        corr = Corrections.from_dict(d.get("corrections", DEFAULT_CORRECTIONS))
        return cls(d["name"], tuple(charts), planted, annulus, corr)


def _sector_grid(sec: Sector, n: int) -> np.ndarray:
    a = sec.annulus
    r = np.linspace(a.r_min, a.r_max, n)
    t = sec.angle + np.linspace(-sec.half_width, sec.half_width, n)
    R, T = np.meshgrid(r, t, indexing="ij")
    return a.u0 + np.stack([R * np.cos(T), R * np.sin(T)], axis=-1).reshape(-1, 2)


def _sectors_share_point(secs: Sequence[Sector]) -> bool:
    base = secs[0].angle
    lo, hi = -math.inf, math.inf
    for s in secs:
        c = base + float(wrap_angle(s.angle - base))
        lo, hi = max(lo, c - s.half_width), min(hi, c + s.half_width)
    return lo < hi


def _planted_from_branches(charts: Sequence[ChartSpec]) -> dict:
    """``M_ij = d(g_i o g_j^{-1})`` read from the branch angles on each overlap."""
    planted = {}
    n = len(charts)
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            ca, cb = charts[a], charts[b]
            if not ca.base_domain.overlaps(cb.base_domain):
                continue
            ga, gb = ca.psi_inverse, cb.psi_inverse
            if isinstance(ga, FocusFocusBranch) and isinstance(gb, FocusFocusBranch):
                ang = ca.base_domain.overlap_midangle(cb.base_domain)
                w = np.array([math.cos(ang), math.sin(ang)])
                turns = round(float(ga.theta(w) - gb.theta(w)) / TWO_PI)
                planted[(ca.chart_id, cb.chart_id)] = IntMatrix2(1, 0, turns, 1)
            else:
                planted[(ca.chart_id, cb.chart_id)] = IDENTITY
    return planted


def _sector_layout(annulus: Annulus, n_charts: int, overlap: float) -> list[Sector]:
    step = TWO_PI / n_charts
    return [Sector(annulus, j * step, step / 2 + overlap / 2) for j in range(n_charts)]


def build_trivial_atlas(annulus: Annulus = Annulus(), regime: Optional[SemiclassicalRegime] = None,
                        n_charts: int = 4, overlap: float = np.pi / 4, shear: float = 0.0,
                        bilinear: float = 0.1, tau=(0.0, 0.0), eta=(0, 0),
                        corrections: Optional[Corrections] = None) -> AtlasSpec:
    """Control atlas: one single-valued branch on every sector, all transitions identity."""
    branch = ShearBranch(shear, bilinear)
    charts = tuple(ChartSpec(j, sec, branch, tuple(tau), tuple(eta))
                   for j, sec in enumerate(_sector_layout(annulus, n_charts, overlap)))
    atlas = AtlasSpec("trivial", charts, _planted_from_branches(charts), annulus,
                      corrections if corrections is not None else Corrections())
    atlas.validate()
    return atlas


def build_focus_focus_atlas(annulus: Annulus = Annulus(), regime: Optional[SemiclassicalRegime] = None,
                            n_charts: int = 4, overlap: float = np.pi / 4, shear: float = 0.0,
                            bilinear: float = 0.1, tau=(0.0, 0.0), eta=(0, 0),
                            corrections: Optional[Corrections] = None) -> AtlasSpec:
    """Multivalued action around ``u0``: planted monodromy ``[[1, 0], [1, 1]]`` on the cut."""
    secs = _sector_layout(annulus, n_charts, overlap)
    charts = tuple(ChartSpec(j, sec, FocusFocusBranch(sec.angle, shear, bilinear), tuple(tau), tuple(eta))
                   for j, sec in enumerate(secs))
    atlas = AtlasSpec("focus_focus", charts, _planted_from_branches(charts), annulus,
                      corrections if corrections is not None else Corrections())
    atlas.validate()
    if regime is not None:
        check_offset_compatibility(atlas, regime)
    return atlas


def check_offset_compatibility(atlas: AtlasSpec, regime: SemiclassicalRegime, tol: float = 1e-9) -> None:
    """Require ``o_i - M_ij o_j in h Z^2`` for the offsets ``o = tau + h eta / 4``.

    Without it the planted spectrum would depend on which chart generated it.
    """
    h = regime.h
    for (i, j), m in atlas.planted_transitions.items():
        oi, oj = atlas.chart(i).offset(h), atlas.chart(j).offset(h)
        diff = (oi - m.to_array() @ oj) / h
        if np.abs(diff - np.rint(diff)).max() > tol:
            raise MaslovConsistencyError(
                f"offsets of charts {i},{j} are incompatible with transition {m}: "
                f"(tau + h eta/4) must satisfy o_i - M o_j in hZ^2 (eta_1 = 0 mod 4, tau_1 in hZ)")


# ---------------------------------------------------------------------------
# rectangles and datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GoodRectangle:
    """Window ``E + i eps K + [-a, a] + i [-b, b]`` in the spectral plane."""

    center: complex
    half_width_re: float
    half_width_im: float

    def rescaled(self, eps: float) -> tuple[np.ndarray, np.ndarray]:
        """Center and half widths in ``u`` coordinates."""
        c = np.array([self.center.real, self.center.imag / eps])
        return c, np.array([self.half_width_re, self.half_width_im / eps])

    def contains_u(self, u, eps: float, inflate: float = 0.0) -> np.ndarray:
        c, hw = self.rescaled(eps)
        return np.all(np.abs(np.asarray(u, dtype=float) - c) <= hw * (1 + inflate), axis=-1)

    def contains_mu(self, mu, inflate: float = 0.0) -> np.ndarray:
        mu = np.asarray(mu)
        return ((np.abs(mu.real - self.center.real) <= self.half_width_re * (1 + inflate))
                & (np.abs(mu.imag - self.center.imag) <= self.half_width_im * (1 + inflate)))

    def check(self, regime: SemiclassicalRegime, C_max: float = 100.0) -> None:
        s = regime.h ** regime.delta
        r1 = self.half_width_re / s
        r2 = self.half_width_im / (regime.eps * s)
        for r in (r1, r2):
            if not (1.0 / C_max - 1e-12 <= r <= 1.0 + 1e-12):
                raise ValueError(f"rectangle half-width ratio {r} outside [1/{C_max}, 1]")

    def to_dict(self) -> dict:
        return {"center": [self.center.real, self.center.imag],
                "half_width_re": self.half_width_re, "half_width_im": self.half_width_im}

    @classmethod
    def from_dict(cls, d: dict) -> "GoodRectangle":
        return cls(complex(float(d["center"][0]), float(d["center"][1])),
                   float(d["half_width_re"]), float(d["half_width_im"]))


def good_rectangle(center_E: float, center_K: float, regime: SemiclassicalRegime,
                   C1: float = 2.0) -> GoodRectangle:
    """Good rectangle around ``E + i eps K`` with half widths ``h^delta/C1`` and ``eps h^delta/C1``."""
    if C1 < 1:
        raise ValueError("C1 must be >= 1")
    s = regime.h ** regime.delta / C1
    return GoodRectangle(complex(center_E, regime.eps * center_K), s, regime.eps * s)


@dataclass(frozen=True)
class Eigenvalue:
    re: float
    im: float
    source_chart: Optional[int] = None
    k_label: Optional[tuple] = None


@dataclass
class SpectrumDataset:
    """Complex eigenvalues with optional ground truth (generating chart and lattice index)."""

    re: np.ndarray
    im: np.ndarray
    regime: SemiclassicalRegime
    source_chart: Optional[np.ndarray] = None
    k: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)
    rectangles: list = field(default_factory=list)
    rect_charts: list = field(default_factory=list)
    overlaps: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.re)

    @property
    def mu(self) -> np.ndarray:
        return self.re + 1j * self.im

    @property
    def blind(self) -> bool:
        return self.k is None

    def __iter__(self) -> Iterator[Eigenvalue]:
        for i in range(len(self)):
            if self.k is None:
                yield Eigenvalue(float(self.re[i]), float(self.im[i]))
            else:
                yield Eigenvalue(float(self.re[i]), float(self.im[i]), int(self.source_chart[i]),
                                 (int(self.k[i, 0]), int(self.k[i, 1])))

    def rescaled_points(self) -> np.ndarray:
        return np.column_stack([self.re, self.im / self.regime.eps])

    def strip(self) -> "SpectrumDataset":
        """Copy without ground-truth columns."""
        return SpectrumDataset(self.re.copy(), self.im.copy(), self.regime, None, None,
                               dict(self.provenance), list(self.rectangles), [], list(self.overlaps))

    def manifest(self) -> dict:
        return {
            "regime": self.regime.to_dict(),
            "provenance": {k: v for k, v in sorted(self.provenance.items())},
            "rectangles": [r.to_dict() for r in self.rectangles],
            "rect_charts": list(self.rect_charts),
            "overlaps": [list(o) for o in self.overlaps],
            "n_points": len(self),
            "blind": self.blind,
        }

    def write_csv(self, path, blind: bool = False) -> Path:
        path = Path(path)
        blind = blind or self.blind
        lines = ["re,im" if blind else "re,im,source_chart,k1,k2"]
        if blind:
            lines += [f"{a!r},{b!r}" for a, b in zip(self.re.tolist(), self.im.tolist())]
        else:
            lines += [f"{a!r},{b!r},{c},{k1},{k2}" for a, b, c, k1, k2 in
                      zip(self.re.tolist(), self.im.tolist(), self.source_chart.tolist(),
                          self.k[:, 0].tolist(), self.k[:, 1].tolist())]
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        return path

    def write(self, csv_path, json_path, blind: bool = False) -> None:
        self.write_csv(csv_path, blind)
        man = self.manifest()
        man["blind"] = blind or self.blind
        if man["blind"]:
            man["rect_charts"] = []
        Path(json_path).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, csv_path, json_path=None) -> "SpectrumDataset":
        csv_path = Path(csv_path)
        with open(csv_path) as fh:
            header = fh.readline().strip().split(",")
        if header[:2] != ["re", "im"] or header not in (["re", "im"], ["re", "im", "source_chart", "k1", "k2"]):
            raise ValueError(f"{csv_path}: unexpected header {header}")
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        man = json.loads(Path(json_path).read_text()) if json_path else {}
        if "regime" not in man:
            raise ValueError("dataset manifest with the regime is required")
        regime = SemiclassicalRegime.from_dict(man["regime"])
        source = k = None
        if len(header) == 5:
            source = data[:, 2].astype(int)
            k = data[:, 3:5].astype(int)
        return cls(data[:, 0].copy(), data[:, 1].copy(), regime, source, k,
                   man.get("provenance", {}),
                   [GoodRectangle.from_dict(r) for r in man.get("rectangles", [])],
                   list(man.get("rect_charts", [])), [tuple(o) for o in man.get("overlaps", [])])


# ---------------------------------------------------------------------------
# counter-based noise
# ---------------------------------------------------------------------------

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def counter_noise(seed: int, chart_id: int, k: np.ndarray, magnitude: float) -> np.ndarray:
    """Uniform noise in the disk of radius ``magnitude``, a pure function of ``(seed, chart, k)``."""
    k = np.asarray(k, dtype=np.int64).reshape(-1, 2)
    if magnitude == 0.0 or len(k) == 0:
        return np.zeros((len(k), 2))
    state = _splitmix64(np.full(len(k), np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
    state = _splitmix64(state ^ np.uint64(chart_id & 0xFFFFFFFF))
    state = _splitmix64(state ^ k[:, 0].view(np.uint64))
    state = _splitmix64(state ^ k[:, 1].view(np.uint64))
    u1 = (_splitmix64(state ^ np.uint64(1)) >> np.uint64(11)).astype(float) * 2.0 ** -53
    u2 = (_splitmix64(state ^ np.uint64(2)) >> np.uint64(11)).astype(float) * 2.0 ** -53
    r = magnitude * np.sqrt(u1)
    return np.column_stack([r * np.cos(TWO_PI * u2), r * np.sin(TWO_PI * u2)])


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

@dataclass
class _RectSolution:
    u: np.ndarray
    k: np.ndarray
    chart_id: int
    skipped: int


def _solve_rectangle(atlas: AtlasSpec, chart_id: int, rect: GoodRectangle,
                     regime: SemiclassicalRegime) -> _RectSolution:
    """Noiseless solutions of ``f_j(u) = h k`` inside ``rect`` (rescaled coordinates)."""
    chart = atlas.chart(chart_id)
    check_offset_compatibility(atlas, regime)
    h = regime.h
    c, hw = rect.rescaled(regime.eps)
    # boundary + interior grid bounds the label range for a near-affine map
    s = np.linspace(-1.0, 1.0, 33)
    grid = c + hw * np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1).reshape(-1, 2)
    if not np.any(chart.base_domain.contains(grid)):
        raise DomainError(f"rectangle centered at {c} does not meet chart {chart_id}")
    chart.psi_inverse.validate_region(grid - atlas.base_topology.u0)
    vals = atlas.f_tilde(chart_id, grid, regime) / h
    lo = np.floor(vals.min(axis=0)) - 2
    hi = np.ceil(vals.max(axis=0)) + 2
    K = np.stack(np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij"),
                 axis=-1).reshape(-1, 2)
    target = h * K
    Jc = atlas.f_tilde_jacobian(chart_id, c, regime)
    fc = atlas.f_tilde(chart_id, c, regime)
    u = c + np.linalg.solve(Jc, (target - fc).T).T
    # candidates whose affine guess lands far outside are never inside
    near = np.all(np.abs(u - c) <= 1.5 * hw + 4 * h, axis=1)
    u, K, target = u[near], K[near], target[near]
    converged = np.zeros(len(u), dtype=bool)
    res = np.full(len(u), np.inf)
    for _ in range(NEWTON_MAX_ITER):
        F = atlas.f_tilde(chart_id, u, regime) - target
        res = np.abs(F).max(axis=1)
        newly = res <= NEWTON_TOL
        if np.all(newly | converged):
            converged |= newly
            break
        J = atlas.f_tilde_jacobian(chart_id, u, regime)
        step = np.linalg.solve(J, F[..., None])[..., 0]
        # damp steps longer than a quarter of the window
        norm = np.abs(step).max(axis=1)
        damp = np.minimum(1.0, 0.25 * hw.min() / np.maximum(norm, 1e-300))
        u = u - damp[:, None] * step
        converged |= newly
    # one polishing step for the converged points
    F = atlas.f_tilde(chart_id, u, regime) - target
    J = atlas.f_tilde_jacobian(chart_id, u, regime)
    u = u - np.linalg.solve(J, F[..., None])[..., 0]
    res = np.abs(atlas.f_tilde(chart_id, u, regime) - target).max(axis=1)
    converged = res <= NEWTON_TOL * 10
    inside = np.all(np.abs(u - c) <= hw, axis=1)
    skipped = int((~converged & inside).sum())
    if skipped:
        log.warning("chart %d: %d Newton solves did not converge; points skipped", chart_id, skipped)
    keep = converged & inside
    return _RectSolution(u[keep], K[keep].astype(np.int64), chart_id, skipped)


def _noise_magnitude(regime: SemiclassicalRegime, kappa: float, power: float) -> float:
    return float(kappa) * regime.h ** float(power)


def _canonical_order(re: np.ndarray, im: np.ndarray) -> np.ndarray:
    return np.lexsort((im, re))


def synthesize_rectangle(atlas: AtlasSpec, chart_id: int, rect: GoodRectangle, regime: SemiclassicalRegime,
                         noise_kappa: float = 0.01, noise_power: float = 2.0, seed: int = 0) -> SpectrumDataset:
    """Eigenvalues in one good rectangle from the quantization rule of chart ``chart_id``."""
    sol = _solve_rectangle(atlas, chart_id, rect, regime)
    return _assemble(atlas, [rect], [sol], regime, noise_kappa, noise_power, seed)


def _assemble(atlas, rects, sols, regime, kappa, power, seed) -> SpectrumDataset:
    h = regime.h
    U = np.concatenate([s.u for s in sols]) if sols else np.zeros((0, 2))
    K = np.concatenate([s.k for s in sols]) if sols else np.zeros((0, 2), dtype=np.int64)
    C = np.concatenate([np.full(len(s.u), s.chart_id) for s in sols]).astype(int)
    # first occurrence wins: rectangles are processed in the listed order
    keep = np.ones(len(U), dtype=bool)
    if len(U):
        pairs = cKDTree(U).query_pairs(DEDUP_FACTOR * h, output_type="ndarray")
        if len(pairs):
            keep[np.maximum(pairs[:, 0], pairs[:, 1])] = False
    U, K, C = U[keep], K[keep], C[keep]
    overlaps = []
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            shared = int(np.sum(rects[i].contains_u(U, regime.eps) & rects[j].contains_u(U, regime.eps)))
            if shared:
                overlaps.append((i, j, shared))
    mag = _noise_magnitude(regime, kappa, power)
    noise = np.zeros_like(U)
    for cid in np.unique(C):
        sel = C == cid
        noise[sel] = counter_noise(seed, int(cid), K[sel], mag)
    V = U + noise
    re, im = V[:, 0], regime.eps * V[:, 1]
    order = _canonical_order(re, im)
    prov = {"atlas": atlas.name, "seed": int(seed), "noise_kappa": float(kappa),
            "noise_power": float(power), "noise_magnitude": mag,
            "skipped": int(sum(s.skipped for s in sols))}
    return SpectrumDataset(re[order], im[order], regime, C[order], K[order], prov,
                           list(rects), [s.chart_id for s in sols], overlaps)


def _solve_job(args):
    atlas, chart_id, rect, regime = args
    return _solve_rectangle(atlas, chart_id, rect, regime)


def loop_centers(annulus: Annulus, count: int, radius: float, phase: float = 0.0) -> list[tuple[float, float]]:
    """``count`` centers on a circle of ``radius`` around ``u0``, counterclockwise."""
    u0 = annulus.u0
    return [(float(u0[0] + radius * math.cos(phase + TWO_PI * n / count)),
             float(u0[1] + radius * math.sin(phase + TWO_PI * n / count))) for n in range(count)]


def auto_loop_count(radius: float, regime: SemiclassicalRegime, C1: float, min_overlap: float = 0.1,
                    multiple: int = 4) -> int:
    """Smallest count (multiple of ``multiple``) whose consecutive rectangles share ``min_overlap`` area."""
    a = 2 * regime.h ** regime.delta / C1
    n = multiple
    while n < 10_000:
        ok = True
        for m in range(n):
            t0, t1 = TWO_PI * m / n, TWO_PI * (m + 1) / n
            dx = abs(radius * (math.cos(t1) - math.cos(t0)))
            dy = abs(radius * (math.sin(t1) - math.sin(t0)))
            if max(a - dx, 0) * max(a - dy, 0) / (a * a) < min_overlap:
                ok = False
                break
        if ok:
            return n
        n += multiple
    raise ValueError("no loop count achieves the requested overlap")


def synthesize_band(atlas: AtlasSpec, centers: Sequence, regime: SemiclassicalRegime, noise_kappa: float = 0.01,
                    noise_power: float = 2.0, seed: int = 0, C1: float = 2.0, workers: int = 1,
                    chart_ids: Optional[Sequence[int]] = None) -> SpectrumDataset:
    """Union of rectangle syntheses around ``centers`` (rescaled ``(E, K)``), deduplicated on overlaps."""
    rects = []
    seen = set()
    for E, K in centers:
        key = (float(E), float(K))
        if key in seen:
            continue
        seen.add(key)
        rects.append(good_rectangle(E, K, regime, C1))
    if chart_ids is None:
        ids = [atlas.chart_for_point(r.rescaled(regime.eps)[0]) for r in rects]
    else:
        ids = list(chart_ids)
    for r, cid in zip(rects, ids):
        if not atlas.chart(cid).base_domain.contains(r.rescaled(regime.eps)[0]):
            raise DomainError(f"rectangle center {r.center} is not interior to chart {cid}")
    jobs = [(atlas, cid, r, regime) for r, cid in zip(rects, ids)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            sols = list(ex.map(_solve_job, jobs))
    else:
        sols = [_solve_job(j) for j in jobs]
    return _assemble(atlas, rects, sols, regime, noise_kappa, noise_power, seed)


def atlas_by_name(name: str, annulus: Annulus, regime: Optional[SemiclassicalRegime] = None, **kw) -> AtlasSpec:
    if name == "trivial":
        return build_trivial_atlas(annulus, regime, **kw)
    if name == "focus_focus":
        return build_focus_focus_atlas(annulus, regime, **kw)
    raise ValueError(f"unknown atlas {name!r}")
