"""Integrable models in action-angle coordinates and the classical machinery
needed to select good spectral windows: frequencies, rotation numbers,
Kolmogorov non-degeneracy, Diophantine tests, torus and time averages, and
the good-value sieve along an energy curve.

Array conventions: action points and angle points are arrays whose last axis
has length 2.  Model callables must broadcast over the leading axes, i.e.
``p(xi)`` maps ``(..., 2) -> (...)`` and ``q(x, xi)`` maps
``(..., 2), (..., 2) -> (...)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

TWO_PI = 2.0 * np.pi
GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0

FD_STEP_FACTOR = 1e-5
FD2_STEP_FACTOR = 1e-4


class DomainError(ValueError):
    """A point lies outside the model's action domain."""


class DegenerateTorusError(ValueError):
    """The frequency vanishes, so the rotation number is undefined."""


class NoCurveError(ValueError):
    """The energy level does not meet the action domain."""


class ActionPoint(NamedTuple):
    xi1: float
    xi2: float


class AnglePoint(NamedTuple):
    x1: float
    x2: float

    @classmethod
    def wrap(cls, x1: float, x2: float) -> "AnglePoint":
        """Canonical representative in [0, 2pi)^2."""
        return cls(float(np.mod(x1, TWO_PI)), float(np.mod(x2, TWO_PI)))


class FrequencyVector(NamedTuple):
    omega1: float
    omega2: float


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned rectangle ``[x_lo, x_hi] x [y_lo, y_hi]``."""

    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float

    def __post_init__(self):
        if not (self.x_lo < self.x_hi and self.y_lo < self.y_hi):
            raise ValueError(f"empty rectangle {self}")

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x_lo + self.x_hi) / 2, (self.y_lo + self.y_hi) / 2])

    @property
    def diameter(self) -> float:
        return math.hypot(self.x_hi - self.x_lo, self.y_hi - self.y_lo)

    def contains(self, pts, strict: bool = True) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        x, y = pts[..., 0], pts[..., 1]
        if strict:
            return (x > self.x_lo) & (x < self.x_hi) & (y > self.y_lo) & (y < self.y_hi)
        return (x >= self.x_lo) & (x <= self.x_hi) & (y >= self.y_lo) & (y <= self.y_hi)

    def inside(self, other: "Rectangle") -> bool:
        return (other.x_lo <= self.x_lo and self.x_hi <= other.x_hi
                and other.y_lo <= self.y_lo and self.y_hi <= other.y_hi)

    def grid(self, n: int) -> np.ndarray:
        xs = np.linspace(self.x_lo, self.x_hi, n)
        ys = np.linspace(self.y_lo, self.y_hi, n)
        return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)


def _monomial_key(i: int, j: int) -> str:
    return f"{i},{j}"


@dataclass(frozen=True)
class TrigPolynomial:
    """``q(x, xi) = sum_ij c_ij xi1^i xi2^j + sum amp * cos(m1 x1 + m2 x2 + phase)``.

    ``mean`` holds ``((i, j), c_ij)`` pairs for the angle-independent part and
    ``harmonics`` holds ``(m1, m2, amp, phase)`` tuples.  Harmonics with
    ``(m1, m2) == (0, 0)`` are rejected so that the torus average is exactly
    the polynomial part.
    """

    mean: tuple = (((0, 1), 1.0),)
    harmonics: tuple = ((1, 0, 1.0, 0.0),)

    def __post_init__(self):
        for m1, m2, _, _ in self.harmonics:
            if m1 == 0 and m2 == 0:
                raise ValueError("constant harmonics belong in `mean`")

    def __call__(self, x, xi):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        out = self.average(xi)
        for m1, m2, amp, phase in self.harmonics:
            out = out + amp * np.cos(m1 * x[..., 0] + m2 * x[..., 1] + phase)
        return out

    def average(self, xi):
        xi = np.asarray(xi, dtype=float)
        out = np.zeros(xi.shape[:-1])
        for (i, j), c in self.mean:
            out = out + c * xi[..., 0] ** i * xi[..., 1] ** j
        return out

    @property
    def bandwidth(self) -> int:
        if not self.harmonics:
            return 0
        return max(max(abs(m1), abs(m2)) for m1, m2, _, _ in self.harmonics)

    def to_dict(self) -> dict:
        return {
            "mean": [[i, j, c] for (i, j), c in self.mean],
            "harmonics": [list(hm) for hm in self.harmonics],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrigPolynomial":
        mean = tuple(((int(i), int(j)), float(c)) for i, j, c in data.get("mean", []))
        harmonics = tuple((int(m1), int(m2), float(a), float(ph))
                          for m1, m2, a, ph in data.get("harmonics", []))
        return cls(mean=mean, harmonics=harmonics)


@dataclass(frozen=True)
class IntegrableModel:
    """Integrable Hamiltonian ``p(xi)`` with perturbation directions ``q`` and ``p1``.

    ``grad_p``/``hess_p`` are optional exact derivatives; finite differences are
    used when they are absent.  ``energy_curve(E, t)`` optionally parametrizes
    ``{p = E}`` by ``t in [0, 1)``.  ``vertices`` lists singular values of the
    torus graph; the single-edge models of the catalog have none.
    """

    name: str
    p: Callable
    q: Callable
    action_domain: Rectangle
    p1: Optional[Callable] = None
    grad_p: Optional[Callable] = None
    hess_p: Optional[Callable] = None
    energy_curve: Optional[Callable] = None
    q_bandwidth: int = 4
    vertices: tuple = ()
    params: dict = field(default_factory=dict, compare=False)

    def p_lambda(self, x, xi, lam: float):
        """Nearly integrable Hamiltonian ``p + lam * p1``."""
        base = self.p(np.asarray(xi, dtype=float))
        if self.p1 is None or lam == 0.0:
            return base
        return base + lam * self.p1(np.asarray(x, dtype=float), np.asarray(xi, dtype=float))


# ---------------------------------------------------------------------------
# frequency map
# ---------------------------------------------------------------------------

def _check_domain(model: IntegrableModel, xi: np.ndarray) -> None:
    if not np.all(model.action_domain.contains(xi)):
        raise DomainError(f"action point(s) outside the domain of model {model.name!r}")


def _fd_step(model: IntegrableModel, factor: float = FD_STEP_FACTOR) -> float:
    return factor * model.action_domain.diameter


def gradient(model: IntegrableModel, xi) -> np.ndarray:
    """Vectorized ``dp/dxi`` for points of shape ``(..., 2)``."""
    xi = np.asarray(xi, dtype=float)
    _check_domain(model, xi)
    if model.grad_p is not None:
        return np.asarray(model.grad_p(xi), dtype=float)
    step = _fd_step(model)
    out = np.empty(xi.shape)
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        out[..., k] = (model.p(xi + e) - model.p(xi - e)) / (2 * step)
    return out


def hessian(model: IntegrableModel, xi) -> np.ndarray:
    """Vectorized Hessian of ``p``, shape ``(..., 2, 2)``."""
    xi = np.asarray(xi, dtype=float)
    _check_domain(model, xi)
    if model.hess_p is not None:
        return np.asarray(model.hess_p(xi), dtype=float)
    step = _fd_step(model, FD2_STEP_FACTOR)
    out = np.empty(xi.shape + (2,))
    e = np.eye(2) * step
    p = model.p
    for i in range(2):
        for j in range(i, 2):
            val = (p(xi + e[i] + e[j]) - p(xi + e[i] - e[j])
                   - p(xi - e[i] + e[j]) + p(xi - e[i] - e[j])) / (4 * step * step)
            out[..., i, j] = val
            out[..., j, i] = val
    return out


def frequency(model: IntegrableModel, xi) -> FrequencyVector:
    """Frequency ``omega(xi) = dp/dxi`` of the torus with actions ``xi``."""
    g = gradient(model, np.asarray(xi, dtype=float).reshape(2))
    return FrequencyVector(float(g[0]), float(g[1]))


def projective_representative(omega) -> np.ndarray:
    """Unit vector representing ``[w1 : w2]`` with first nonzero component positive."""
    w = np.asarray(omega, dtype=float)
    norm = np.hypot(w[..., 0], w[..., 1])
    if np.any(norm == 0.0):
        raise DegenerateTorusError("zero frequency: rotation number undefined")
    u = w / norm[..., None]
    flip = (u[..., 0] < 0) | ((u[..., 0] == 0) & (u[..., 1] < 0))
    return np.where(flip[..., None], -u, u)


def rotation_number(model: IntegrableModel, xi) -> np.ndarray:
    """Rotation number ``[w1 : w2]`` as a normalized point of the projective line."""
    return projective_representative(frequency(model, xi))


def kolmogorov_check(model: IntegrableModel, region: Rectangle, grid_n: int = 16,
                     threshold: float = 1e-8) -> tuple[bool, float]:
    """Non-degeneracy of the frequency map on ``region``.

    Evaluates ``det d^2p/dxi^2`` on a ``grid_n x grid_n`` grid and returns
    ``(min |det| > threshold, min |det|)``.
    """
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    if not region.inside(model.action_domain):
        raise DomainError("region is not contained in the action domain")
    # closed grid of an open domain: pull the boundary in by a hair
    shrink = 1e-9 * region.diameter
    inner = Rectangle(region.x_lo + shrink, region.x_hi - shrink,
                      region.y_lo + shrink, region.y_hi - shrink)
    H = hessian(model, inner.grid(grid_n))
    det = np.abs(np.linalg.det(H))
    min_det = float(det.min())
    return min_det > threshold, min_det


# ---------------------------------------------------------------------------
# Diophantine conditions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiophantineVerdict:
    """Outcome of the truncated ``(alpha, d)`` test.

    ``margin`` is ``min_k |<omega, k>| |k|^(1+d) - alpha`` over the tested
    modes (Euclidean ``|k|``) and ``worst_k`` is the mode attaining it.
    """

    is_diophantine: bool
    worst_k: tuple[int, int]
    margin: float
    k_max: int


def is_diophantine(omega, alpha: float, d: float, k_max: int = 1000) -> DiophantineVerdict:
    """Brute-force test of ``|<omega,k>| >= alpha / |k|^(1+d)`` over ``0 < |k|_inf <= k_max``.

    Only the half lattice ``k1 > 0`` or ``k1 == 0, k2 > 0`` is scanned; the
    pairing is odd in ``k``.  Ties between modes are broken by smaller ``|k|``.
    """
    if alpha <= 0 or d <= 0 or k_max < 1:
        raise ValueError("need alpha > 0, d > 0, k_max >= 1")
    w1, w2 = (float(c) for c in omega)
    k2 = np.arange(-k_max, k_max + 1, dtype=float)
    best = (math.inf, 0.0, (0, 0))
    # k1 = 0 row, k2 > 0
    rows = [(0, k2[k2 > 0])] + [(k1, k2) for k1 in range(1, k_max + 1)]
    for k1, col in rows:
        norm2 = k1 * k1 + col * col
        val = np.abs(w1 * k1 + w2 * col) * norm2 ** ((1.0 + d) / 2.0)
        i = int(np.argmin(val))
        # equal values: keep the smallest |k| in this row
        ties = np.flatnonzero(val <= val[i])
        i = int(ties[np.argmin(norm2[ties])])
        cand = (float(val[i]), float(norm2[i]), (k1, int(col[i])))
        if cand[0] < best[0] or (cand[0] == best[0] and cand[1] < best[1]):
            best = cand
    margin = best[0] - alpha
    return DiophantineVerdict(margin >= 0.0, best[2], margin, k_max)


def diophantine_margins(omegas, alpha: float, d: float, k_max: int,
                        chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized Diophantine verdicts for many frequencies.

    For each frequency only the near-resonant modes are examined: along the
    dominant axis ``a`` the integers next to ``-k_b w_b / w_a``.  Any other
    mode has ``|<w,k>| >= 1.5 |w_a|``, which can only violate the condition
    when ``alpha > 1.5 |w_a|``, and then the mode ``e_a`` already does.  The
    verdicts therefore coincide with :func:`is_diophantine`; the returned
    margins are minima over the near-resonant modes only.
    """
    W = np.atleast_2d(np.asarray(omegas, dtype=float))
    ok = np.empty(len(W), dtype=bool)
    margin = np.empty(len(W))
    kb = np.arange(-k_max, k_max + 1, dtype=float)
    expo = (1.0 + d) / 2.0
    for s in range(0, len(W), chunk):
        w = W[s:s + chunk]
        a = (np.abs(w[:, 1]) > np.abs(w[:, 0])).astype(int)
        wa = w[np.arange(len(w)), a]
        wb = w[np.arange(len(w)), 1 - a]
        zero = wa == 0.0
        safe_wa = np.where(zero, 1.0, wa)
        x = -kb[None, :] * wb[:, None] / safe_wa[:, None]
        r = np.rint(x)
        best = np.full(len(w), np.inf)
        for off in (-1.0, 0.0, 1.0):
            ka = r + off
            valid = (np.abs(ka) <= k_max) & ~((ka == 0) & (kb[None, :] == 0))
            pair = np.abs(wa[:, None] * ka + wb[:, None] * kb[None, :])
            val = pair * (ka * ka + kb[None, :] ** 2) ** expo
            val = np.where(valid, val, np.inf)
            best = np.minimum(best, val.min(axis=1))
        best = np.where(zero, 0.0, best)
        margin[s:s + chunk] = best - alpha
        ok[s:s + chunk] = best >= alpha
    return ok, margin


def _counter_uniforms(seed: int, n: int, block: int = 4096) -> np.ndarray:
    """``n x 2`` uniforms; block ``b`` comes from a Philox stream keyed by ``(seed, b)``."""
    out = np.empty((n, 2))
    for b, s in enumerate(range(0, n, block)):
        gen = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, b]))
        m = min(block, n - s)
        out[s:s + m] = gen.random((m, 2))
    return out


def diophantine_complement_measure(box: Rectangle, alpha: float, d: float, k_max: int,
                                   samples: int, seed: int = 0) -> float:
    """Monte-Carlo fraction of ``box`` (frequency space) violating the ``(alpha, d)`` condition."""
    if samples < 100:
        raise ValueError("samples must be >= 100")
    if alpha <= 0.0:
        return 0.0
    U = _counter_uniforms(seed, samples)
    W = np.column_stack([box.x_lo + U[:, 0] * (box.x_hi - box.x_lo),
                         box.y_lo + U[:, 1] * (box.y_hi - box.y_lo)])
    ok, _ = diophantine_margins(W, alpha, d, k_max)
    return float(1.0 - ok.mean())


# ---------------------------------------------------------------------------
# averages
# ---------------------------------------------------------------------------

def torus_grid(grid_n: int) -> np.ndarray:
    t = TWO_PI * np.arange(grid_n) / grid_n
    return np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1).reshape(-1, 2)


def torus_average(model: IntegrableModel, xi, grid_n: int = 64) -> float | np.ndarray:
    """Mean of ``q(., xi)`` over the torus by the uniform product rule.

    Exact for trigonometric polynomials of degree below ``grid_n``.  Accepts a
    single action point or an array of them.
    """
    if grid_n < 4:
        raise ValueError("grid_n must be >= 4")
    xi = np.asarray(xi, dtype=float)
    X = torus_grid(grid_n)
    vals = model.q(X.reshape((-1,) + (1,) * (xi.ndim - 1) + (2,)), xi[None, ...])
    vals = np.broadcast_to(vals, (len(X),) + xi.shape[:-1])
    avg = vals.mean(axis=0)
    return float(avg) if xi.ndim == 1 else avg


def time_average(model: IntegrableModel, xi, x0, T: float, nodes: int = 16) -> float:
    """Symmetric time average ``(1/T) int_{-T/2}^{T/2} q(x0 + t omega(xi), xi) dt``.

    Composite Gauss-Legendre; panels are short enough that every harmonic up to
    ``model.q_bandwidth`` turns by at most one radian per panel.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    xi = np.asarray(xi, dtype=float).reshape(2)
    omega = np.asarray(frequency(model, xi))
    x0 = np.asarray(x0, dtype=float).reshape(2)
    rate = max(float(np.abs(omega).sum()) * max(model.q_bandwidth, 1), 1e-12)
    n_panels = max(1, int(math.ceil(T * rate)))
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(-T / 2, T / 2, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    t = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
    w = (half[:, None] * gw[None, :]).ravel()
    x = x0[None, :] + t[:, None] * omega[None, :]
    vals = np.broadcast_to(model.q(x, xi[None, :]), t.shape)
    return float(np.dot(w, vals) / T)


# ---------------------------------------------------------------------------
# good values
# ---------------------------------------------------------------------------

def _generic_energy_curve(model: IntegrableModel, E: float, t: np.ndarray) -> np.ndarray:
    """Star-shaped parametrization of ``{p = E}`` around the domain center."""
    dom = model.action_domain
    c = dom.center
    out = np.full((len(t), 2), np.nan)
    for i, ti in enumerate(t):
        direction = np.array([math.cos(TWO_PI * ti), math.sin(TWO_PI * ti)])
        hits = []
        for comp, lo, hi in ((0, dom.x_lo, dom.x_hi), (1, dom.y_lo, dom.y_hi)):
            if direction[comp] > 0:
                hits.append((hi - c[comp]) / direction[comp])
            elif direction[comp] < 0:
                hits.append((lo - c[comp]) / direction[comp])
        r_max = min(hits) * (1 - 1e-9)
        rs = np.linspace(0.0, r_max, 65)
        vals = model.p(c[None, :] + rs[:, None] * direction[None, :]) - E
        sign = np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)
        if len(sign) == 0:
            continue
        j = int(sign[0])
        if vals[j] == 0.0:
            r = rs[j]
        else:
            r = brentq(lambda s: float(model.p(c + s * direction)) - E, rs[j], rs[j + 1], xtol=1e-14)
        out[i] = c + r * direction
    return out


@dataclass(frozen=True)
class GoodValue:
    G: float
    xi: ActionPoint
    omega: FrequencyVector
    margin: float


@dataclass
class SieveResult:
    """Good values on one energy curve with exclusion bookkeeping."""

    E: float
    values: list
    n_samples: int
    n_on_curve: int
    excluded: dict
    flags: list

    @property
    def retained_fraction(self) -> float:
        return len(self.values) / self.n_on_curve if self.n_on_curve else 0.0

    def pairs(self) -> list[tuple[float, ActionPoint]]:
        return [(v.G, v.xi) for v in self.values]


def good_value_sieve(model: IntegrableModel, E: float, alpha: float, d: float,
                     k_max: int, n_samples: int, grid_n: int = 64) -> SieveResult:
    """Sample ``{p = E}`` and keep the values ``G = <q>(xi)`` that survive the bad-value rules.

    A sample is excluded when its frequency is not ``(alpha, d)``-Diophantine,
    when ``|d<q>(xi)| < alpha``, or when ``|rho'| < alpha``, where ``rho'`` is
    the arc-length derivative of the projective rotation number taken by
    central differences along the curve tangent at that very sample (so the
    verdict for a given ``xi`` does not depend on ``n_samples``).
    """
    t = np.arange(n_samples) / n_samples
    if model.energy_curve is not None:
        xi = np.asarray(model.energy_curve(E, t), dtype=float)
    else:
        xi = _generic_energy_curve(model, E, t)
    on = np.all(np.isfinite(xi), axis=1) & model.action_domain.contains(np.nan_to_num(xi))
    if not on.any():
        raise NoCurveError(f"energy level E={E} does not meet the action domain")
    xi = xi[on]
    flags: list[str] = []
    if model.vertices:
        flags.append("model declares vertices; the dist(a, S) < alpha rule is not applied")

    omega = gradient(model, xi)
    dioph_ok, margin = diophantine_margins(omega, alpha, d, k_max)

    step = _fd_step(model)
    dq = np.empty_like(xi)
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        dq[:, k] = (torus_average(model, xi + e, grid_n) - torus_average(model, xi - e, grid_n)) / (2 * step)
    dq_ok = np.hypot(dq[:, 0], dq[:, 1]) >= alpha

    wn = np.hypot(omega[:, 0], omega[:, 1])
    regular = wn > 0
    tangent = np.column_stack([-omega[:, 1], omega[:, 0]]) / np.where(regular, wn, 1.0)[:, None]
    inside = (model.action_domain.contains(xi + step * tangent)
              & model.action_domain.contains(xi - step * tangent))
    if not np.all(inside):
        raise DomainError("energy curve runs too close to the domain boundary")
    w_plus = gradient(model, xi + step * tangent)
    w_minus = gradient(model, xi - step * tangent)
    cross = w_minus[:, 0] * w_plus[:, 1] - w_minus[:, 1] * w_plus[:, 0]
    dot = (w_minus * w_plus).sum(axis=1)
    rho_prime = np.arctan2(cross, dot) / (2 * step)
    rho_ok = regular & (np.abs(rho_prime) >= alpha)
    if not np.any(np.abs(rho_prime) >= alpha):
        flags.append("rotation number is constant along the energy curve (twist assumption violated)")

    G = torus_average(model, xi, grid_n)
    keep = dioph_ok & dq_ok & rho_ok
    values = [GoodValue(float(G[i]), ActionPoint(float(xi[i, 0]), float(xi[i, 1])),
                        FrequencyVector(float(omega[i, 0]), float(omega[i, 1])), float(margin[i]))
              for i in np.flatnonzero(keep)]
    excluded = {
        "not_diophantine": int((~dioph_ok).sum()),
        "small_dq": int((~dq_ok).sum()),
        "small_rho_prime": int((~rho_ok).sum()),
    }
    return SieveResult(E=E, values=values, n_samples=n_samples, n_on_curve=int(on.sum()),
                       excluded=excluded, flags=flags)


# ---------------------------------------------------------------------------
# semiclassical regime
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SemiclassicalRegime:
    """Parameter pack ``(h, eps, delta, lambda, alpha, d)``."""

    h: float
    eps: float
    delta: float
    lam: float = 0.0
    alpha: float = 1e-2
    d: float = 1.0

    @classmethod
    def from_delta(cls, h: float, delta: float, C: float = 1.0, **kw) -> "SemiclassicalRegime":
        return cls(h=h, eps=C * h ** delta, delta=delta, **kw)

    def halved(self, C: float = 1.0) -> "SemiclassicalRegime":
        """Same regime at ``h/2`` with ``eps = C (h/2)^delta``."""
        h = self.h / 2
        return SemiclassicalRegime(h, C * h ** self.delta, self.delta, self.lam, self.alpha, self.d)

    def to_dict(self) -> dict:
        return {"h": self.h, "eps": self.eps, "delta": self.delta,
                "lambda": self.lam, "alpha": self.alpha, "d": self.d}

    @classmethod
    def from_dict(cls, data: dict) -> "SemiclassicalRegime":
        return cls(h=float(data["h"]), eps=float(data["eps"]), delta=float(data["delta"]),
                   lam=float(data.get("lambda", 0.0)), alpha=float(data.get("alpha", 1e-2)),
                   d=float(data.get("d", 1.0)))


@dataclass(frozen=True)
class ConstraintCheck:
    name: str
    passed: bool
    slack: float


@dataclass(frozen=True)
class RegimeReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "checks": [{"name": c.name, "passed": c.passed, "slack": c.slack} for c in self.checks]}


def regime_check(params: SemiclassicalRegime, big_C: float = 1.0, rel_tol: float = 1e-12) -> RegimeReport:
    """Check ``0 < h < eps <= C h^delta``, ``0 < delta < 1``, ``0 <= lambda < alpha^2``.

    Slack is positive when a constraint holds.  ``eps <= C h^delta`` is compared
    with a relative tolerance so that ``eps = h^delta`` computed in floating
    point passes.
    """
    h, eps, delta, lam, alpha, d = (params.h, params.eps, params.delta,
                                    params.lam, params.alpha, params.d)
    bound = big_C * h ** delta if h > 0 else math.nan
    checks = [
        ConstraintCheck("h > 0", h > 0, h),
        ConstraintCheck("eps > 0", eps > 0, eps),
        ConstraintCheck("0 < delta < 1", 0 < delta < 1, min(delta, 1 - delta)),
        ConstraintCheck("h < eps", h < eps, eps - h),
        ConstraintCheck("eps <= C h^delta", bool(eps <= bound * (1 + rel_tol)), bound - eps),
        ConstraintCheck("lambda >= 0", lam >= 0, lam),
        ConstraintCheck("lambda < alpha^2", lam < alpha * alpha, alpha * alpha - lam),
        ConstraintCheck("alpha > 0", alpha > 0, alpha),
        ConstraintCheck("d > 0", d > 0, d),
    ]
    return RegimeReport(tuple(checks))


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

DEFAULT_DOMAIN = Rectangle(-2.0, 2.0, -2.0, 2.0)


def _default_p1(x, xi):
    return np.cos(x[..., 0] - x[..., 1]) * (1.0 + 0.0 * xi[..., 0])


def quadratic_model(q: Optional[TrigPolynomial] = None,
                    domain: Rectangle = DEFAULT_DOMAIN) -> IntegrableModel:
    """``p = (xi1^2 + xi2^2)/2``, so ``omega(xi) = xi``; energy curves are circles."""
    q = q or TrigPolynomial()

    def curve(E, t):
        r = math.sqrt(2 * E) if E > 0 else math.nan
        t = np.asarray(t, dtype=float)
        return np.column_stack([r * np.cos(TWO_PI * t), r * np.sin(TWO_PI * t)])

    return IntegrableModel(
        name="quadratic",
        p=lambda xi: 0.5 * (xi[..., 0] ** 2 + xi[..., 1] ** 2),
        grad_p=lambda xi: np.array(xi, dtype=float),
        hess_p=lambda xi: np.broadcast_to(np.eye(2), np.shape(xi)[:-1] + (2, 2)),
        q=q, p1=_default_p1, action_domain=domain, energy_curve=curve,
        q_bandwidth=max(q.bandwidth, 1), params={"q": q.to_dict()},
    )


def linear_model(a1: float = 1.0, a2: float = 2.0, q: Optional[TrigPolynomial] = None,
                 domain: Rectangle = DEFAULT_DOMAIN) -> IntegrableModel:
    """``p = a1 xi1 + a2 xi2``: constant frequency, Kolmogorov-degenerate."""
    q = q or TrigPolynomial()
    return IntegrableModel(
        name="linear_degenerate",
        p=lambda xi: a1 * xi[..., 0] + a2 * xi[..., 1],
        grad_p=lambda xi: np.broadcast_to(np.array([a1, a2], dtype=float), np.shape(xi)).copy(),
        hess_p=lambda xi: np.zeros(np.shape(xi)[:-1] + (2, 2)),
        q=q, p1=_default_p1, action_domain=domain,
        q_bandwidth=max(q.bandwidth, 1), params={"a1": a1, "a2": a2, "q": q.to_dict()},
    )


def mixed_model(q: Optional[TrigPolynomial] = None,
                domain: Rectangle = Rectangle(-10.0, 10.0, -10.0, 10.0)) -> IntegrableModel:
    """``p = xi1^2/2 + xi2``: rank-one Hessian."""
    q = q or TrigPolynomial()

    def hess(xi):
        H = np.zeros(np.shape(xi)[:-1] + (2, 2))
        H[..., 0, 0] = 1.0
        return H

    return IntegrableModel(
        name="mixed",
        p=lambda xi: 0.5 * xi[..., 0] ** 2 + xi[..., 1],
        grad_p=lambda xi: np.stack([np.asarray(xi)[..., 0], np.ones(np.shape(xi)[:-1])], axis=-1),
        hess_p=hess, q=q, p1=_default_p1, action_domain=domain,
        q_bandwidth=max(q.bandwidth, 1), params={"q": q.to_dict()},
    )


def trig_polynomial_model(p_coeffs: Sequence, q: TrigPolynomial,
                          domain: Rectangle = DEFAULT_DOMAIN) -> IntegrableModel:
    """Polynomial ``p = sum c_ij xi1^i xi2^j`` given as ``((i, j), c)`` pairs, with custom ``q``."""
    poly = TrigPolynomial(mean=tuple(((int(i), int(j)), float(c)) for (i, j), c in p_coeffs),
                          harmonics=())

    def grad(xi):
        xi = np.asarray(xi, dtype=float)
        g = np.zeros(xi.shape)
        for (i, j), c in poly.mean:
            if i:
                g[..., 0] += c * i * xi[..., 0] ** (i - 1) * xi[..., 1] ** j
            if j:
                g[..., 1] += c * j * xi[..., 0] ** i * xi[..., 1] ** (j - 1)
        return g

    return IntegrableModel(
        name="trig_polynomial", p=poly.average, grad_p=grad, q=q, p1=_default_p1,
        action_domain=domain, q_bandwidth=max(q.bandwidth, 1),
        params={"p": [[i, j, c] for (i, j), c in poly.mean], "q": q.to_dict()},
    )


MODEL_CATALOG = {
    "quadratic": quadratic_model,
    "linear_degenerate": linear_model,
    "mixed": mixed_model,
    "trig_polynomial": trig_polynomial_model,
}


def build_model(name: str, **params) -> IntegrableModel:
    """Instantiate a catalog model by name."""
    try:
        factory = MODEL_CATALOG[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_CATALOG)}") from None
    return factory(**params)
