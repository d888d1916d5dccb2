"""INI run configuration with strict key checking.

Grammar: standard ``configparser`` INI (``[section]`` headers, ``key = value``
lines, ``#``/``;`` comments).  Every section below is optional; every key has
a default; unknown sections or keys are errors.  Pairs are written ``a, b``.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .classical_dynamics import SemiclassicalRegime, regime_check


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None,
                 path: Optional[str] = None):
        loc = ""
        if path:
            loc += f"{path}:"
        if line is not None:
            loc += f"{line}:"
        if key:
            loc += f" [{key}]"
        super().__init__(f"{loc} {message}".strip())
        self.line = line
        self.key = key


def _pair(text: str, cast=float) -> tuple:
    parts = [p for p in re.split(r"[,\s]+", text.strip()) if p]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _count(text: str):
    return "auto" if text.strip().lower() == "auto" else int(text)


@dataclass(frozen=True)
class ModelSection:
    name: str = "quadratic"
    energy: float = 0.5
    a1: float = 1.0
    a2: float = 2.0


@dataclass(frozen=True)
class RegimeSection:
    h: float = 1e-4
    delta: float = 0.5
    C: float = 1.0
    eps: Optional[float] = None
    lam: float = 1e-6
    alpha: float = 1e-2
    d: float = 1.0

    def regime(self) -> SemiclassicalRegime:
        eps = self.eps if self.eps is not None else self.C * self.h ** self.delta
        return SemiclassicalRegime(self.h, eps, self.delta, self.lam, self.alpha, self.d)


@dataclass(frozen=True)
class SieveSection:
    k_max: int = 100
    n_samples: int = 256
    grid_n: int = 64


@dataclass(frozen=True)
class AtlasSection:
    kind: str = "focus_focus"
    file: str = ""
    center: tuple = (1.0, 0.4)
    r_min: float = 0.002
    r_max: float = 0.05
    n_charts: int = 4
    shear: float = 0.0
    bilinear: float = 0.1
    tau: tuple = (0.0, 0.0)
    eta: tuple = (0, 0)
    corrections: str = "default"


@dataclass(frozen=True)
class LoopSection:
    count: object = 8
    radius: float = 0.0115
    C1: float = 2.0
    phase: float = 0.0
    min_overlap: float = 0.1


@dataclass(frozen=True)
class NoiseSection:
    kappa: float = 0.01
    power: float = 2.0


@dataclass(frozen=True)
class DetectorSection:
    degree: int = 2
    fit_tolerance: float = 2.0
    reject_threshold: float = 0.25
    min_coverage: float = 0.95
    transition_tolerance: float = 0.1


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    workers: int = 1
    blind: bool = False
    out: str = "run"
    debug_svg: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    regime: RegimeSection = field(default_factory=RegimeSection)
    sieve: SieveSection = field(default_factory=SieveSection)
    atlas: AtlasSection = field(default_factory=AtlasSection)
    loop: LoopSection = field(default_factory=LoopSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    run: RunSection = field(default_factory=RunSection)

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(run={"seed": 3})`` returns a copy with those keys replaced."""
        new = self
        for name, values in sections.items():
            new = replace(new, **{name: replace(getattr(new, name), **values)})
        return new

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            sec = getattr(self, f.name)
            out[f.name] = {k.name: (list(v) if isinstance(v, tuple) else v)
                           for k in fields(sec) for v in [getattr(sec, k.name)]}
        return out

    def to_ini(self) -> str:
        lines = []
        for name, sec in self.to_dict().items():
            lines.append(f"[{name}]")
            for k, v in sec.items():
                key = _INI_ALIASES_REV.get((name, k), k)
                if v is None:
                    v = "auto"
                elif isinstance(v, list):
                    v = ", ".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                lines.append(f"{key} = {v}")
            lines.append("")
        return "\n".join(lines)

    def regime_params(self) -> SemiclassicalRegime:
        return self.regime.regime()


# INI spelling -> attribute name, where they differ
_INI_ALIASES = {("regime", "lambda"): "lam"}
_INI_ALIASES_REV = {(s, v): k for (s, k), v in _INI_ALIASES.items()}

_CASTS = {
    "model": {"name": str, "energy": float, "a1": float, "a2": float},
    "regime": {"h": float, "delta": float, "C": float, "eps": _opt_float, "lam": float,
               "alpha": float, "d": float},
    "sieve": {"k_max": int, "n_samples": int, "grid_n": int},
    "atlas": {"kind": str, "file": str, "center": _pair, "r_min": float, "r_max": float,
              "n_charts": int, "shear": float, "bilinear": float, "tau": _pair,
              "eta": lambda t: _pair(t, int), "corrections": str},
    "loop": {"count": _count, "radius": float, "C1": float, "phase": float, "min_overlap": float},
    "noise": {"kappa": float, "power": float},
    "detector": {"degree": int, "fit_tolerance": float, "reject_threshold": float,
                 "min_coverage": float, "transition_tolerance": float},
    "run": {"seed": int, "workers": int, "blind": _bool, "out": str, "debug_svg": _bool},
}

_CHOICES = {
    ("model", "name"): ("quadratic", "linear_degenerate", "mixed"),
    ("atlas", "kind"): ("trivial", "focus_focus", "file"),
    ("atlas", "corrections"): ("default", "none"),
}


def _key_lines(text: str) -> dict:
    """``(section, key) -> line number`` for diagnostics."""
    out, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            out[(section, None)] = no
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            out[(section, m.group(1).strip())] = no
    return out


def parse_config(text: str, path: Optional[str] = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError(f"syntax error: {exc.errors[0][1].strip() if exc.errors else exc}",
                          line, path=path) from None
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None), path=path) from None
    lines = _key_lines(text)
    sections = {}
    defaults = RunConfig()
    for sec in parser.sections():
        if sec not in _CASTS:
            raise ConfigError(f"unknown section [{sec}]", lines.get((sec, None)), path=path)
        values = {}
        for key, raw in parser.items(sec):
            attr = _INI_ALIASES.get((sec, key), key)
            line = lines.get((sec, key))
            if attr not in _CASTS[sec] or (sec, key) in _INI_ALIASES_REV:
                raise ConfigError(f"unknown key {key!r}", line, f"{sec}.{key}", path)
            try:
                value = _CASTS[sec][attr](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value {raw!r}: {exc}", line, f"{sec}.{key}", path) from None
            choices = _CHOICES.get((sec, attr))
            if choices and value not in choices:
                raise ConfigError(f"{value!r} not one of {choices}", line, f"{sec}.{key}", path)
            values[attr] = value
        sections[sec] = replace(getattr(defaults, sec), **values)
    cfg = replace(defaults, **sections)
    _semantic_checks(cfg, lines, path)
    return cfg


def _semantic_checks(cfg: RunConfig, lines: dict, path) -> None:
    def fail(sec, key, msg):
        raise ConfigError(msg, lines.get((sec, key)), f"{sec}.{key}", path)

    if cfg.detector.degree not in (1, 2, 3):
        fail("detector", "degree", "degree must be 1, 2 or 3")
    if cfg.loop.C1 < 1:
        fail("loop", "C1", "C1 must be >= 1")
    if cfg.loop.count != "auto" and cfg.loop.count < 3:
        fail("loop", "count", "a closed loop needs at least 3 rectangles")
    if cfg.loop.radius <= 0:
        fail("loop", "radius", "radius must be positive")
    if cfg.atlas.kind == "file" and not cfg.atlas.file:
        fail("atlas", "file", "atlas kind 'file' needs a file path")
    if cfg.run.workers < 1:
        fail("run", "workers", "workers must be >= 1")
    if cfg.sieve.n_samples < 1 or cfg.sieve.k_max < 1:
        fail("sieve", "n_samples", "sieve sizes must be positive")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError:
        raise
    return parse_config(text, str(path))


class RegimeError(ConfigError):
    pass


def check_regime(cfg: RunConfig) -> SemiclassicalRegime:
    regime = cfg.regime_params()
    report = regime_check(regime)
    if not report.passed:
        raise RegimeError("regime check failed: " + "; ".join(report.failures), key="regime")
    return regime
