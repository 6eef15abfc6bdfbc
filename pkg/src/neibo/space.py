"""Search-space definition, unit-cube encoding and initial designs."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import qmc

KINDS = ("continuous", "integer", "binary")

Candidate = dict  # name -> float; integers are whole floats, binaries 0.0/1.0


class InvalidCandidateError(ValueError):
    """Raised when an operation requires a candidate that validates."""


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str
    lower: float = 0.0
    upper: float = 1.0
    scale_note: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r} for {self.name}")
        if self.kind == "binary":
            object.__setattr__(self, "lower", 0.0)
            object.__setattr__(self, "upper", 1.0)
            return
        if not self.lower < self.upper:
            raise ValueError(f"{self.name}: lower must be < upper")
        if self.kind == "integer" and not (
            float(self.lower).is_integer() and float(self.upper).is_integer()
        ):
            raise ValueError(f"{self.name}: integer bounds must be whole numbers")

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True)
class ParamSpace:
    specs: tuple[ParamSpec, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        specs = tuple(self.specs)
        object.__setattr__(self, "specs", specs)
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    @property
    def dim(self) -> int:
        return len(self.specs)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def __getitem__(self, name: str) -> ParamSpec:
        return self.specs[self._index[name]]

    def __iter__(self):
        return iter(self.specs)

    def __len__(self):
        return len(self.specs)


@dataclass(frozen=True)
class Violation:
    name: str
    value: float | None
    lower: float
    upper: float
    reason: str

    def __str__(self):
        if self.value is None:
            return f"{self.name}: {self.reason}"
        return f"{self.name}: {self.value:g} {self.reason} [{self.lower:g}, {self.upper:g}]"


def validate(candidate: Mapping[str, float], space: ParamSpace) -> list[Violation]:
    """Check a candidate against the space.

    Returns an empty list when the candidate is valid, otherwise one
    `Violation` per offending parameter (missing, unknown, out of bounds,
    non-integral or non-binary).
    """
    out = []
    for spec in space:
        if spec.name not in candidate:
            out.append(Violation(spec.name, None, spec.lower, spec.upper, "missing"))
            continue
        v = float(candidate[spec.name])
        if not math.isfinite(v):
            out.append(Violation(spec.name, v, spec.lower, spec.upper, "not finite in"))
        elif spec.kind == "binary" and v not in (0.0, 1.0):
            out.append(Violation(spec.name, v, 0.0, 1.0, "not in"))
        elif v < spec.lower or v > spec.upper:
            out.append(Violation(spec.name, v, spec.lower, spec.upper, "not in"))
        elif spec.kind == "integer" and not v.is_integer():
            out.append(Violation(spec.name, v, spec.lower, spec.upper, "not integral in"))
    for name in candidate:
        if name not in space._index:
            out.append(Violation(name, None, math.nan, math.nan, "unknown parameter"))
    return out


def _require_valid(candidate, space):
    bad = validate(candidate, space)
    if bad:
        raise InvalidCandidateError("; ".join(str(v) for v in bad))


def encode(candidate: Mapping[str, float], space: ParamSpace) -> np.ndarray:
    """Map a valid candidate to the unit hypercube, in space order."""
    _require_valid(candidate, space)
    return np.array(
        [(float(candidate[s.name]) - s.lower) / s.width for s in space]
    )


def _round_half_up(x: float) -> float:
    return math.floor(x + 0.5)


def decode(u: Sequence[float], space: ParamSpace) -> Candidate:
    """Inverse of `encode`; integers are rounded half-up, binaries thresholded at 0.5."""
    u = np.asarray(u, dtype=float)
    if u.shape != (space.dim,):
        raise ValueError(f"expected a vector of length {space.dim}, got shape {u.shape}")
    if np.any(~np.isfinite(u)) or np.any(u < 0.0) or np.any(u > 1.0):
        raise ValueError("unit-vector components must lie in [0, 1]")
    out = {}
    for ui, spec in zip(u, space):
        if spec.kind == "binary":
            out[spec.name] = 1.0 if ui >= 0.5 else 0.0
            continue
        v = spec.lower + ui * spec.width
        if spec.kind == "integer":
            v = min(max(_round_half_up(v), spec.lower), spec.upper)
        else:
            # affine map can overshoot by an ulp
            v = min(max(v, spec.lower), spec.upper)
        out[spec.name] = float(v)
    return out


def snap(u: np.ndarray, space: ParamSpace) -> np.ndarray:
    """Encoded position of the candidate `u` decodes to (integer/binary snapping)."""
    return encode(decode(u, space), space)


def sobol_points(dim: int, n: int, seed: int, scramble: bool = True) -> np.ndarray:
    """`n` points of a (scrambled) Sobol sequence in [0, 1]^dim."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sampler = qmc.Sobol(d=dim, scramble=scramble, seed=np.random.default_rng(seed))
    m = max(0, math.ceil(math.log2(n)))
    # draw a full power-of-two block to keep the balance properties
    return sampler.random_base2(m)[:n]


def sobol_init(space: ParamSpace, n: int, seed: int) -> list[Candidate]:
    """Initial design: `n` decoded scrambled-Sobol points."""
    return [decode(u, space) for u in sobol_points(space.dim, n, seed)]


def default_n_init(space: ParamSpace) -> int:
    return max(2 * space.dim, 8)


def _parse_spec(name: str, section: Mapping[str, str]) -> ParamSpec:
    kind = section.get("kind", "continuous").strip()
    if kind == "binary":
        return ParamSpec(name, kind, scale_note=section.get("scale_note", ""))
    try:
        lower = float(section["lower"])
        upper = float(section["upper"])
    except KeyError as exc:
        raise ValueError(f"parameter {name} lacks {exc.args[0]}") from None
    return ParamSpec(name, kind, lower, upper, section.get("scale_note", ""))


def parse_space(text: str) -> ParamSpace:
    """Parse a space definition: one section per parameter, in order."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    return ParamSpace(tuple(_parse_spec(name, cp[name]) for name in cp.sections()))


def _resolve(path_or_name: str | Path, package_dir: str) -> str:
    p = Path(path_or_name)
    if p.exists():
        return p.read_text()
    name = p.name if p.suffix else f"{p.name}.conf"
    res = resources.files("neibo").joinpath(package_dir, name)
    if res.is_file():
        return res.read_text()
    raise FileNotFoundError(f"no such space file or shipped space: {path_or_name}")


def load_space(path_or_name: str | Path) -> ParamSpace:
    """Load a space from a file path, or by name from the shipped `spaces/`."""
    return parse_space(_resolve(path_or_name, "spaces"))


def dump_space(space: ParamSpace) -> str:
    lines = []
    for s in space:
        lines.append(f"[{s.name}]")
        lines.append(f"kind = {s.kind}")
        if s.kind != "binary":
            lines.append(f"lower = {s.lower!r}")
            lines.append(f"upper = {s.upper!r}")
        if s.scale_note:
            lines.append(f"scale_note = {s.scale_note}")
        lines.append("")
    return "\n".join(lines)


def reference_candidates() -> dict[str, Candidate]:
    """Published and BO-optimal settings for the shipped segmentation space."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(
        resources.files("neibo").joinpath("data", "reference_candidates.conf").read_text()
    )
    return {sec: {k: float(v) for k, v in cp[sec].items()} for sec in cp.sections()}


def clip_to_space(candidate: Mapping[str, float], space: ParamSpace) -> Candidate:
    """Clamp each value into its bounds (binaries thresholded, integers rounded)."""
    out = {}
    for s in space:
        v = float(candidate[s.name])
        if s.kind == "binary":
            out[s.name] = 1.0 if v >= 0.5 else 0.0
        else:
            v = min(max(v, s.lower), s.upper)
            out[s.name] = float(_round_half_up(v)) if s.kind == "integer" else v
    return out
