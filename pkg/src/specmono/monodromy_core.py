"""Integer transition matrices, Cech cocycles on loop covers, and holonomy classes.

All arithmetic after rounding is exact: matrices are stored as Python ints.
Holonomy convention: loops run counterclockwise around the annulus center and
the representative is the left-to-right product ``M_{j0 j1} M_{j1 j2} ... M_{j_{L-1} j0}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np


class MonodromyError(ValueError):
    pass


class NonIntegerTransitionError(MonodromyError):
    def __init__(self, message: str, transition: "TransitionMatrix"):
        super().__init__(message)
        self.transition = transition


class NonUnimodularError(MonodromyError):
    pass


class IncompleteCoverError(MonodromyError):
    pass


@dataclass(frozen=True)
class IntMatrix2:
    """Exact integer 2x2 matrix ``[[a, b], [c, d]]``."""

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        for name in ("a", "b", "c", "d"):
            v = getattr(self, name)
            if not isinstance(v, int):
                object.__setattr__(self, name, _as_int(v))

    @classmethod
    def identity(cls) -> "IntMatrix2":
        return cls(1, 0, 0, 1)

    @classmethod
    def from_rows(cls, rows) -> "IntMatrix2":
        (a, b), (c, d) = rows
        return cls(_as_int(a), _as_int(b), _as_int(c), _as_int(d))

    @property
    def rows(self) -> tuple[tuple[int, int], tuple[int, int]]:
        return ((self.a, self.b), (self.c, self.d))

    def to_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float)

    @property
    def det(self) -> int:
        return self.a * self.d - self.b * self.c

    @property
    def trace(self) -> int:
        return self.a + self.d

    def is_unimodular(self) -> bool:
        return self.det in (1, -1)

    def __matmul__(self, other: "IntMatrix2") -> "IntMatrix2":
        return IntMatrix2(self.a * other.a + self.b * other.c, self.a * other.b + self.b * other.d,
                          self.c * other.a + self.d * other.c, self.c * other.b + self.d * other.d)

    def inverse(self) -> "IntMatrix2":
        det = self.det
        if det not in (1, -1):
            raise NonUnimodularError(f"{self} has determinant {det}")
        return IntMatrix2(det * self.d, -det * self.b, -det * self.c, det * self.a)

    def transpose(self) -> "IntMatrix2":
        return IntMatrix2(self.a, self.c, self.b, self.d)

    def __str__(self) -> str:
        return f"[[{self.a}, {self.b}], [{self.c}, {self.d}]]"


def _as_int(v) -> int:
    if isinstance(v, (int, np.integer)):
        return int(v)
    f = float(v)
    if not f.is_integer():
        raise ValueError(f"non-integer matrix entry {v!r}")
    return int(f)


IDENTITY = IntMatrix2.identity()
FOCUS_FOCUS_MONODROMY = IntMatrix2(1, 0, 1, 1)


def random_unimodular(rng: np.random.Generator, steps: int = 4, max_entry: int = 10) -> IntMatrix2:
    """Random element of GL(2, Z) from a short word in elementary moves, entries bounded."""
    while True:
        m = IDENTITY
        for _ in range(steps):
            kind = int(rng.integers(0, 3))
            n = int(rng.integers(-2, 3))
            if kind == 0:
                e = IntMatrix2(1, n, 0, 1)
            elif kind == 1:
                e = IntMatrix2(1, 0, n, 1)
            else:
                e = IntMatrix2(0, 1, 1, 0) if rng.random() < 0.5 else IntMatrix2(-1, 0, 0, 1)
            m = m @ e
        if max(abs(x) for row in m.rows for x in row) <= max_entry:
            return m


# ---------------------------------------------------------------------------
# transitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransitionMatrix:
    m: IntMatrix2
    raw: tuple
    rounding_error: float

    def to_dict(self) -> dict:
        return {"m": [list(r) for r in self.m.rows], "raw": [list(r) for r in self.raw],
                "rounding_error": self.rounding_error}

    @classmethod
    def from_dict(cls, data: dict) -> "TransitionMatrix":
        return cls(IntMatrix2.from_rows(data["m"]), tuple(tuple(float(x) for x in r) for r in data["raw"]),
                   float(data["rounding_error"]))


def round_transition(raw, tol: float = 0.1) -> TransitionMatrix:
    """Round a real 2x2 matrix to GL(2, Z), enforcing the entrywise tolerance."""
    raw = np.asarray(raw, dtype=float).reshape(2, 2)
    r = np.rint(raw)
    err = float(np.abs(raw - r).max())
    tm = TransitionMatrix(IntMatrix2.from_rows(r.astype(int).tolist()),
                          tuple(tuple(float(x) for x in row) for row in raw), err)
    if not err <= tol:
        raise NonIntegerTransitionError(f"transition {raw.tolist()} is {err:.3g} from integral (tol {tol})", tm)
    if not tm.m.is_unimodular():
        raise NonUnimodularError(f"rounded transition {tm.m} has determinant {tm.m.det}")
    return tm


def transition(fit_i, fit_j, overlap_center, tol: float = 0.1) -> TransitionMatrix:
    """``M_ij = D_i D_j^{-1}`` from the fitted chart Jacobians at ``overlap_center``.

    ``fit_i``/``fit_j`` only need a ``jacobian(u)`` method returning a 2x2 array.
    """
    p = np.asarray(overlap_center, dtype=float).reshape(2)
    Di = np.asarray(fit_i.jacobian(p), dtype=float)
    Dj = np.asarray(fit_j.jacobian(p), dtype=float)
    return round_transition(Di @ np.linalg.inv(Dj), tol)


# ---------------------------------------------------------------------------
# cocycles
# ---------------------------------------------------------------------------

def _matrix_of(entry) -> IntMatrix2:
    return entry.m if isinstance(entry, TransitionMatrix) else entry


@dataclass
class CechCocycle:
    """Integer transitions ``M_ij`` on the overlapping pairs of a cover.

    ``triples`` lists the triple overlaps ``(i, j, k)``; when omitted every
    triple whose three pairs are present is taken to overlap.
    """

    cover: tuple
    transitions: dict
    triples: Optional[tuple] = None

    def has(self, i, j) -> bool:
        return (i, j) in self.transitions or (j, i) in self.transitions

    def matrix(self, i, j) -> IntMatrix2:
        if i == j:
            return IDENTITY
        if (i, j) in self.transitions:
            return _matrix_of(self.transitions[(i, j)])
        if (j, i) in self.transitions:
            return _matrix_of(self.transitions[(j, i)]).inverse()
        raise IncompleteCoverError(f"no transition between charts {i} and {j}")

    def pairs(self) -> list:
        seen = []
        for (i, j) in self.transitions:
            key = (i, j) if (i, j) <= (j, i) else (j, i)
            if key not in seen:
                seen.append(key)
        return seen

    def triple_overlaps(self) -> list:
        if self.triples is not None:
            return [tuple(t) for t in self.triples]
        nodes = sorted({x for pair in self.transitions for x in pair}, key=repr)
        out = []
        for a in range(len(nodes)):
            for b in range(a + 1, len(nodes)):
                for c in range(b + 1, len(nodes)):
                    i, j, k = nodes[a], nodes[b], nodes[c]
                    if self.has(i, j) and self.has(j, k) and self.has(i, k):
                        out.append((i, j, k))
        return out

    def map(self, fn) -> "CechCocycle":
        """Apply ``fn`` to every stored integer matrix."""
        return CechCocycle(self.cover, {k: fn(_matrix_of(v)) for k, v in self.transitions.items()},
                           self.triples)

    def to_dict(self) -> dict:
        items = []
        for (i, j), v in self.transitions.items():
            entry = v.to_dict() if isinstance(v, TransitionMatrix) else {"m": [list(r) for r in v.rows]}
            items.append({"i": i, "j": j, **entry})
        return {"cover": list(self.cover), "transitions": items,
                "triples": [list(t) for t in self.triple_overlaps()]}


@dataclass
class CocycleReport:
    passed: bool
    inverse_violations: list = field(default_factory=list)
    triple_violations: list = field(default_factory=list)
    n_inverse_checked: int = 0
    n_triples_checked: int = 0

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "inverse_violations": [list(p) for p in self.inverse_violations],
                "triple_violations": [list(t) for t in self.triple_violations],
                "n_inverse_checked": self.n_inverse_checked,
                "n_triples_checked": self.n_triples_checked}


def cocycle_check(cocycle: CechCocycle) -> CocycleReport:
    """Exact checks of ``M_ji = M_ij^{-1}`` and ``M_ik = M_ij M_jk`` on triple overlaps."""
    inv_bad, n_inv = [], 0
    for (i, j) in cocycle.pairs():
        if (i, j) in cocycle.transitions and (j, i) in cocycle.transitions:
            n_inv += 1
            prod = _matrix_of(cocycle.transitions[(i, j)]) @ _matrix_of(cocycle.transitions[(j, i)])
            if prod != IDENTITY:
                inv_bad.append((i, j))
    tri_bad, n_tri = [], 0
    for (i, j, k) in cocycle.triple_overlaps():
        n_tri += 1
        # every ordering of the triple: catches a corrupted entry in either direction
        ok = True
        for a, b, c in permutations((i, j, k)):
            if cocycle.matrix(a, c) != cocycle.matrix(a, b) @ cocycle.matrix(b, c):
                ok = False
                break
        if not ok:
            tri_bad.append((i, j, k))
    return CocycleReport(not inv_bad and not tri_bad, inv_bad, tri_bad, n_inv, n_tri)


# ---------------------------------------------------------------------------
# holonomy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HolonomyClass:
    representative: IntMatrix2
    det: int
    trace: int
    parabolic_index: int
    parabolic: bool
    loop: tuple = ()

    @property
    def fingerprint(self) -> tuple[int, int, int]:
        return (self.det, abs(self.trace), self.parabolic_index)

    def to_dict(self) -> dict:
        return {"representative": [list(r) for r in self.representative.rows], "det": self.det,
                "trace": self.trace, "parabolic_index": self.parabolic_index,
                "parabolic": self.parabolic, "fingerprint": list(self.fingerprint),
                "trivial": is_trivial(self), "loop": list(self.loop)}


def _fingerprint_parts(m: IntMatrix2) -> tuple[int, int, int, bool]:
    if not m.is_unimodular():
        raise NonUnimodularError(f"{m} is not in GL(2, Z)")
    parabolic = m.det == 1 and m.trace == 2
    index = math.gcd(math.gcd(m.a - 1, m.b), math.gcd(m.c, m.d - 1)) if parabolic else 0
    return m.det, abs(m.trace), index, parabolic


def conjugacy_fingerprint(m: IntMatrix2) -> tuple[int, int, int]:
    """``(det, |trace|, parabolic_index)``; the index is ``gcd(M - I)`` for trace-2 classes, else 0."""
    det, tr, index, _ = _fingerprint_parts(m)
    return det, tr, index


def classify(m: IntMatrix2, loop: Sequence = ()) -> HolonomyClass:
    det, _, index, parabolic = _fingerprint_parts(m)
    return HolonomyClass(m, det, m.trace, index, parabolic, tuple(loop))


def holonomy(cocycle: CechCocycle, loop: Sequence) -> HolonomyClass:
    """Product of transitions along ``loop``; a trailing repeat of the base chart is optional."""
    loop = list(loop)
    if len(loop) < 2:
        raise ValueError("a loop needs at least two charts")
    if loop[-1] != loop[0]:
        loop.append(loop[0])
    rep = IDENTITY
    for a, b in zip(loop[:-1], loop[1:]):
        if a != b and not cocycle.has(a, b):
            raise IncompleteCoverError(f"charts {a} and {b} do not overlap: loop does not close")
        rep = rep @ cocycle.matrix(a, b)
    return classify(rep, loop)


def kam_adjoint(m: IntMatrix2) -> IntMatrix2:
    """Inverse transpose: the KAM bundle transition paired with a spectral transition."""
    return m.inverse().transpose()


def is_trivial(hc: HolonomyClass) -> bool:
    return hc.fingerprint == (1, 2, 0)


def relabel_cocycle(cocycle: CechCocycle, relabel: Mapping) -> CechCocycle:
    """Coboundary action ``M_ij -> B_i M_ij B_j^{-1}`` for chart-wise ``B``."""
    out = {}
    for (i, j), v in cocycle.transitions.items():
        out[(i, j)] = relabel[i] @ _matrix_of(v) @ relabel[j].inverse()
    return CechCocycle(cocycle.cover, out, cocycle.triples)


def loop_pairs(loop: Iterable) -> list:
    loop = list(loop)
    return list(zip(loop, loop[1:] + loop[:1]))
