"""Recover pseudo-lattice structure from a raw eigenvalue cloud.

Pipeline per good rectangle: select and rescale the points, detect two
lattice generators from nearest-neighbour differences, label every point by
an integer pair with a breadth-first sweep, then fit a low-degree polynomial
map ``f(u) ~ h * label`` whose Jacobian at the rectangle center is the
leading differential.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .atlas_spectrum import GoodRectangle, SpectrumDataset
from .classical_dynamics import SemiclassicalRegime

MIN_POINTS = 16
REJECT_THRESHOLD = 0.25
MIN_COVERAGE = 0.95


class DetectionError(RuntimeError):
    pass


class InsufficientDataError(DetectionError):
    pass


class BasisDetectionError(DetectionError):
    pass


class LabelingError(DetectionError):
    def __init__(self, message: str, coverage: float):
        super().__init__(message)
        self.coverage = coverage


class FitError(DetectionError):
    pass


@dataclass
class RescaledCloud:
    points: np.ndarray
    rect: GoodRectangle
    regime: SemiclassicalRegime
    index: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.points)

    @property
    def center(self) -> np.ndarray:
        return self.rect.rescaled(self.regime.eps)[0]

    @property
    def half_widths(self) -> np.ndarray:
        return self.rect.rescaled(self.regime.eps)[1]


def rescale(dataset: SpectrumDataset, rect: GoodRectangle) -> RescaledCloud:
    """Points of ``dataset`` inside ``rect`` as ``u = (Re mu, Im mu / eps)``."""
    eps = dataset.regime.eps
    if not eps > 0:
        raise ValueError("dataset regime needs eps > 0")
    sel = np.flatnonzero(rect.contains_mu(dataset.mu))
    if len(sel) < MIN_POINTS:
        raise InsufficientDataError(f"{len(sel)} points in rectangle, need at least {MIN_POINTS}")
    pts = np.column_stack([dataset.re[sel], dataset.im[sel] / eps])
    return RescaledCloud(pts, rect, dataset.regime, sel)


def cloud_from_points(points, regime: SemiclassicalRegime, rect: Optional[GoodRectangle] = None) -> RescaledCloud:
    """Wrap rescaled points directly; the rectangle defaults to their bounding box."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < MIN_POINTS:
        raise InsufficientDataError(f"{len(pts)} points, need at least {MIN_POINTS}")
    if rect is None:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        c, hw = 0.5 * (lo + hi), 0.5 * (hi - lo) + 1e-300
        rect = GoodRectangle(complex(c[0], regime.eps * c[1]), float(hw[0]), float(regime.eps * hw[1]))
    return RescaledCloud(pts, rect, regime)


# ---------------------------------------------------------------------------
# basis detection
# ---------------------------------------------------------------------------

def gauss_reduce(b1, b2, max_iter: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Lagrange-Gauss reduction: ``|b1| <= |b2|`` and ``|<b1, b2>| <= |b1|^2 / 2``."""
    b1, b2 = np.asarray(b1, dtype=float).copy(), np.asarray(b2, dtype=float).copy()
    if b1 @ b1 > b2 @ b2:
        b1, b2 = b2, b1
    for _ in range(max_iter):
        m = round(float(b1 @ b2) / float(b1 @ b1))
        b2 = b2 - m * b1
        if b2 @ b2 >= b1 @ b1:
            break
        b1, b2 = b2, b1
    return b1, b2


def _fold(v: np.ndarray) -> np.ndarray:
    """Representative of ``+-v`` with angle in ``[0, pi)``."""
    flip = (v[:, 1] < 0) | ((v[:, 1] == 0) & (v[:, 0] < 0))
    out = v.copy()
    out[flip] *= -1
    return out


def _cluster_mean(vecs: np.ndarray, seed: np.ndarray, rel: float = 0.25) -> tuple[np.ndarray, int]:
    d = np.linalg.norm(vecs - seed, axis=1)
    d2 = np.linalg.norm(vecs + seed, axis=1)
    near = np.minimum(d, d2) <= rel * np.linalg.norm(seed)
    aligned = np.where((d <= d2)[near, None], vecs[near], -vecs[near])
    return aligned.mean(axis=0), int(near.sum())


def detect_basis(cloud: RescaledCloud, n_sample: int = 200, k_neighbors: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Two reduced generators from clustered nearest-neighbour differences."""
    pts = cloud.points
    if len(pts) < MIN_POINTS:
        raise InsufficientDataError(f"{len(pts)} points, need at least {MIN_POINTS}")
    tree = cKDTree(pts)
    k_nn = min(k_neighbors + 1, len(pts))
    _, seeds = tree.query(cloud.center, k=min(n_sample, len(pts)))
    seeds = np.atleast_1d(seeds)
    _, nbr = tree.query(pts[seeds], k=k_nn)
    diffs = (pts[nbr[:, 1:]] - pts[seeds][:, None, :]).reshape(-1, 2)
    diffs = _fold(diffs[np.linalg.norm(diffs, axis=1) > 0])
    if len(diffs) < 4:
        raise BasisDetectionError("not enough neighbour differences")
    lengths = np.linalg.norm(diffs, axis=1)
    order = np.argsort(lengths)
    # shortest populated cluster first
    b1 = None
    min_pop = max(3, len(seeds) // 10)
    for idx in order:
        mean, pop = _cluster_mean(diffs, diffs[idx])
        if pop >= min_pop:
            b1 = mean
            break
    if b1 is None:
        raise BasisDetectionError("no populated difference cluster")
    n1 = np.linalg.norm(b1)
    b2 = None
    for idx in order:
        v = diffs[idx]
        sin = abs(b1[0] * v[1] - b1[1] * v[0]) / (n1 * np.linalg.norm(v))
        if sin < 0.2:
            continue
        mean, pop = _cluster_mean(diffs, v)
        if pop >= min_pop:
            b2 = mean
            break
    if b2 is None:
        raise BasisDetectionError("difference clusters are collinear")
    b1, b2 = gauss_reduce(b1, b2)
    if abs(b1[0] * b2[1] - b1[1] * b2[0]) < 1e-3 * (b1 @ b1):
        raise BasisDetectionError("detected generators are degenerate")
    return b1, b2


# ---------------------------------------------------------------------------
# labeling
# ---------------------------------------------------------------------------

@dataclass
class LatticeLabeling:
    """``labels[i]`` is the integer pair of point ``i`` (valid where ``labeled``); ``basis`` rows are generators."""

    labels: np.ndarray
    basis: np.ndarray
    anchor: int
    labeled: np.ndarray

    @property
    def coverage(self) -> float:
        return float(self.labeled.mean()) if len(self.labeled) else 0.0

    def as_dict(self) -> dict:
        return {int(i): (int(self.labels[i, 0]), int(self.labels[i, 1])) for i in np.flatnonzero(self.labeled)}

    def relabel(self, B, t=(0, 0)) -> "LatticeLabeling":
        """Labels ``k -> B k + t`` for integer ``B`` with ``det B = +-1``."""
        B = np.asarray(B, dtype=np.int64)
        if abs(round(np.linalg.det(B))) != 1:
            raise ValueError("relabeling matrix must be unimodular")
        new = self.labels @ B.T + np.asarray(t, dtype=np.int64)
        basis = np.linalg.inv(B).T @ self.basis
        return LatticeLabeling(new, basis, self.anchor, self.labeled.copy())


NEIGHBOR_STEPS = np.array([[1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [-1, -1], [1, -1], [-1, 1]])


def label_lattice(cloud: RescaledCloud, basis, threshold: float = REJECT_THRESHOLD,
                  min_coverage: float = MIN_COVERAGE) -> LatticeLabeling:
    """Breadth-first integer labeling seeded at the point nearest the center.

    Each labeled point carries a local basis (columns of ``B``) refreshed from
    labeled neighbours, so slowly varying lattices are followed across the
    rectangle.  A neighbour ``q`` of ``p`` gets label ``k_p + e`` when
    ``|B^-1 (q - p) - e|_inf <= threshold``.
    """
    pts = cloud.points
    n = len(pts)
    B0 = np.column_stack([np.asarray(basis[0], float), np.asarray(basis[1], float)])
    if abs(np.linalg.det(B0)) == 0:
        raise BasisDetectionError("singular basis")
    tree = cKDTree(pts)
    _, anchor = tree.query(cloud.center)
    anchor = int(anchor)
    labels = np.zeros((n, 2), dtype=np.int64)
    labeled = np.zeros(n, dtype=bool)
    local = np.zeros((n, 2, 2))
    labeled[anchor] = True
    local[anchor] = B0
    occupied = {(0, 0): anchor}
    front = np.array([anchor])
    scale = math.sqrt(abs(np.linalg.det(B0)))
    steps = NEIGHBOR_STEPS
    while len(front):
        # predicted positions of all neighbours of the front
        P = pts[front][:, None, :] + np.einsum("fij,sj->fsi", local[front], steps)
        dist, cand = tree.query(P.reshape(-1, 2), k=1)
        cand = cand.reshape(len(front), len(steps))
        src = np.repeat(front, len(steps)).reshape(len(front), len(steps))
        e = np.broadcast_to(steps, (len(front), len(steps), 2))
        ok = dist.reshape(len(front), len(steps)) <= threshold * scale * 2
        f_i, s_i = np.nonzero(ok)
        if len(f_i) == 0:
            break
        q = cand[f_i, s_i]
        p = src[f_i, s_i]
        d = pts[q] - pts[p]
        coords = np.linalg.solve(local[p], d[..., None])[..., 0]
        err = np.abs(coords - e[f_i, s_i]).max(axis=1)
        good = (err <= threshold) & ~labeled[q]
        new_front = []
        for qi, pi, ei in zip(q[good], p[good], e[f_i, s_i][good]):
            if labeled[qi]:
                continue
            key = (int(labels[pi, 0] + ei[0]), int(labels[pi, 1] + ei[1]))
            if key in occupied:
                continue
            occupied[key] = int(qi)
            labels[qi] = key
            labeled[qi] = True
            local[qi] = local[pi]
            new_front.append(qi)
        front = np.array(new_front, dtype=np.int64)
        if len(front):
            _refresh_bases(front, pts, labels, local, occupied)
    lab = LatticeLabeling(labels, B0.T.copy(), anchor, labeled)
    h = cloud.regime.h
    cell = abs(np.linalg.det(B0))
    if not (0.5 * h * h <= cell <= 2.0 * h * h):
        raise LabelingError(f"basis cell area {cell:.3g} is not within [h^2/2, 2 h^2]", lab.coverage)
    if lab.coverage < min_coverage:
        raise LabelingError(f"labeling covered {lab.coverage:.1%} of points (< {min_coverage:.0%})", lab.coverage)
    return lab


def _refresh_bases(front, pts, labels, local, occupied) -> None:
    for qi in front:
        k = labels[qi]
        for axis in range(2):
            e = np.zeros(2, dtype=np.int64)
            e[axis] = 1
            plus = occupied.get((int(k[0] + e[0]), int(k[1] + e[1])))
            minus = occupied.get((int(k[0] - e[0]), int(k[1] - e[1])))
            if plus is not None and minus is not None:
                local[qi][:, axis] = 0.5 * (pts[plus] - pts[minus])
            elif plus is not None:
                local[qi][:, axis] = pts[plus] - pts[qi]
            elif minus is not None:
                local[qi][:, axis] = pts[qi] - pts[minus]


# ---------------------------------------------------------------------------
# chart fitting
# ---------------------------------------------------------------------------

def _exponents(degree: int) -> list[tuple[int, int]]:
    return [(i, t - i) for t in range(degree + 1) for i in range(t, -1, -1)]


def _design(x: np.ndarray, exps) -> np.ndarray:
    return np.stack([x[:, 0] ** a * x[:, 1] ** b for a, b in exps], axis=1)


@dataclass
class ChartFit:
    """Polynomial map ``f(u) = sum_c coef[c] * x^a y^b`` with ``x = (u - center) / scale``."""

    center: np.ndarray
    scale: np.ndarray
    degree: int
    coef: np.ndarray
    h: float
    residual_rms: float
    residual_max: float
    n_points: int
    rect: Optional[GoodRectangle] = None
    meta: dict = field(default_factory=dict)

    @property
    def exponents(self):
        return _exponents(self.degree)

    def evaluate(self, u) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        return _design((u - self.center) / self.scale, self.exponents) @ self.coef

    def jacobian(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        x = (u - self.center) / self.scale
        J = np.zeros((2, 2))
        for (a, b), c in zip(self.exponents, self.coef):
            if a:
                J[:, 0] += c * a * x[0] ** (a - 1) * x[1] ** b / self.scale[0]
            if b:
                J[:, 1] += c * b * x[0] ** a * x[1] ** (b - 1) / self.scale[1]
        return J

    @property
    def f_affine(self) -> tuple[np.ndarray, np.ndarray]:
        """``(f(center), Df(center))``."""
        return self.coef[0].copy(), self.leading_differential

    @property
    def f_poly(self) -> np.ndarray:
        return self.coef[3:].copy()

    @property
    def leading_differential(self) -> np.ndarray:
        return self.jacobian(self.center)

    def to_dict(self) -> dict:
        d = {
            "center": self.center.tolist(), "scale": self.scale.tolist(), "degree": self.degree,
            "exponents": [list(e) for e in self.exponents], "coef": self.coef.tolist(), "h": self.h,
            "residual_rms": self.residual_rms, "residual_max": self.residual_max,
            "n_points": self.n_points, "leading_differential": self.leading_differential.tolist(),
            "meta": self.meta,
        }
        if self.rect is not None:
            d["rect"] = self.rect.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChartFit":
        return cls(np.asarray(d["center"], float), np.asarray(d["scale"], float), int(d["degree"]),
                   np.asarray(d["coef"], float), float(d["h"]), float(d["residual_rms"]),
                   float(d["residual_max"]), int(d["n_points"]),
                   GoodRectangle.from_dict(d["rect"]) if "rect" in d else None, dict(d.get("meta", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def fit_chart(cloud: RescaledCloud, labeling: LatticeLabeling, degree: int = 2,
              regime: Optional[SemiclassicalRegime] = None, tolerance: Optional[float] = None,
              min_coverage: float = MIN_COVERAGE) -> ChartFit:
    """Least-squares polynomial ``f`` with ``f(u_i) ~ h k_i``; residuals are reported in units of h.

    ``tolerance`` (units of h) bounds the max residual; None skips the check.
    """
    if degree not in (1, 2, 3):
        raise ValueError("degree must be 1, 2 or 3")
    regime = regime or cloud.regime
    if labeling.coverage < min_coverage:
        raise FitError(f"labeling coverage {labeling.coverage:.1%} below {min_coverage:.0%}")
    h = regime.h
    sel = labeling.labeled
    u = cloud.points[sel]
    target = h * labeling.labels[sel].astype(float)
    center, scale = cloud.center, cloud.half_widths
    exps = _exponents(degree)
    A = _design((u - center) / scale, exps)
    if len(u) < len(exps) or np.linalg.matrix_rank(A) < len(exps):
        raise FitError("normal equations are singular")
    # subtract the anchor label so the constant term stays O(h)
    shift = target[np.argmin(np.linalg.norm(u - center, axis=1))]
    coef, *_ = np.linalg.lstsq(A, target - shift, rcond=None)
    coef[0] += shift
    res = np.linalg.norm(A @ coef - target, axis=1) / h
    fit = ChartFit(np.asarray(center, float), np.asarray(scale, float), degree, coef, h,
                   float(np.sqrt(np.mean(res ** 2))), float(res.max()), int(sel.sum()), cloud.rect)
    det = np.linalg.det(fit.leading_differential)
    if not abs(det) > 1e-6:
        raise FitError(f"leading differential is singular (det {det:.3g})")
    if tolerance is not None and fit.residual_max > tolerance:
        raise FitError(f"max residual {fit.residual_max:.3g} h exceeds tolerance {tolerance} h")
    return fit


def overlap_center(rect_a: GoodRectangle, rect_b: GoodRectangle, eps: float) -> np.ndarray:
    """Center of the intersection of two rectangles, rescaled coordinates."""
    ca, ha = rect_a.rescaled(eps)
    cb, hb = rect_b.rescaled(eps)
    lo = np.maximum(ca - ha, cb - hb)
    hi = np.minimum(ca + ha, cb + hb)
    if np.any(lo >= hi):
        raise ValueError("rectangles do not overlap")
    return 0.5 * (lo + hi)


def detect_rectangle(dataset: SpectrumDataset, rect: GoodRectangle, degree: int = 2,
                     tolerance: Optional[float] = None, threshold: float = REJECT_THRESHOLD,
                     min_coverage: float = MIN_COVERAGE) -> tuple[ChartFit, LatticeLabeling, RescaledCloud]:
    cloud = rescale(dataset, rect)
    basis = detect_basis(cloud)
    lab = label_lattice(cloud, basis, threshold, min_coverage)
    fit = fit_chart(cloud, lab, degree, dataset.regime, tolerance, min_coverage)
    fit.meta.update({"coverage": lab.coverage, "basis": np.asarray(lab.basis).tolist()})
    return fit, lab, cloud
