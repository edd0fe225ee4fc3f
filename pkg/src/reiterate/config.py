"""Key-value experiment configuration with strict schema validation.

Grammar: one ``key = value`` assignment per line; ``#`` starts a comment;
blank lines are ignored.  Numbers accept integers, decimals, fractions
like 3/4, and dyadic powers like 2^-5.  Lists are comma separated.  The
bvp.* values are arithmetic expressions in x1..xd.

The ladder law is one of two shapes: ``scales = s1, s2, ...`` fixes every
scale explicitly for a single run, or ``eps = e1, e2, ...`` sweeps the
power ladder eps^lambda_k with exponents from ``lambdas``.  Validation
collects every violation before reporting, each naming the offending key
and the expected form, and precomputes per-run grid feasibility (spacing
at most an eighth of the finest scale) with a memory estimate.
"""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, replace

import numpy as np

from .coeff import CoefficientField, CoefficientSpec, ScaleLadder, builtin_family
from .dirichlet import BVP
from .errors import ConfigError
from .expr import compile_expression
from .grid import Grid

MEMORY_LIMIT_BYTES = 8 << 30
_DYADIC = re.compile(r"^2\^(-?\d+)$")
_FRACTION = re.compile(r"^(-?\d+(?:\.\d+)?)\s*/\s*(\d+(?:\.\d+)?)$")


def parse_number(text: str) -> float:
    """Scalar literal: plain number, fraction a/b, or dyadic 2^k."""
    text = text.strip()
    m = _DYADIC.match(text)
    if m:
        return 2.0 ** int(m.group(1))
    m = _FRACTION.match(text)
    if m:
        return float(m.group(1)) / float(m.group(2))
    return float(text)


def parse_number_list(text: str) -> tuple[float, ...]:
    parts = [p for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(parse_number(p) for p in parts)


def parse_int(text: str) -> int:
    value = parse_number(text)
    if value != int(value):
        raise ValueError(f"{text.strip()!r} is not an integer")
    return int(value)


@dataclass(frozen=True)
class ProbeParams:
    p: float | None = None  # defaults to d + 1 at use sites
    theta: float = 1.0
    alpha: float = 0.5
    center: tuple | None = None  # defaults to the domain midpoint
    radius: float | None = None  # defaults to a quarter of the domain width
    rho: float = 0.5
    t: float | None = None  # calibrated when absent


@dataclass(frozen=True)
class Feasibility:
    """Derived solve size for one ladder of the sweep."""

    eps: float
    finest: float
    resolution: int
    spacing: float
    memory_bytes: int


# key -> (expected form, default shown in --help and error messages)
KNOWN_KEYS = {
    "field": "coefficient family, e.g. laminate1d(2+sin(2*pi*y1))",
    "dim": "1 or 2",
    "eps": "comma list of scale parameters in (0, 1)",
    "lambdas": "comma list of increasing exponents, one per fast slot",
    "scales": "comma list, strictly decreasing in (0, 1)",
    "separation_n": "integer >= 1",
    "domain": "two numbers lo, hi with lo < hi",
    "resolution": "cells per axis, integer >= 2",
    "cells_per_scale": "integer >= 8",
    "cell.resolution": "cells per axis for cell problems, integer >= 8",
    "cell.tol": "solver tolerance in (0, 1e-4]",
    "bvp.rhs": "expression in x1..xd",
    "bvp.boundary": "expression in x1..xd",
    "probe.p": "integrability exponent > dim",
    "probe.theta": "number in (0, 1]",
    "probe.alpha": "number in (0, 1]",
    "probe.center": "dim numbers inside the domain",
    "probe.radius": "number > 0",
    "probe.rho": "number > 0",
    "probe.t": "one of 1/16, 1/32, 1/64",
    "tol.solver": "solver tolerance in (0, 1e-4]",
    "out": "output directory path",
    "cache": "cache directory path",
    "seed": "integer",
    "jobs": "integer >= 1",
}

_T_CANDIDATES = (1 / 16, 1 / 32, 1 / 64)


@dataclass(frozen=True)
class ExperimentConfig:
    field_source: str
    field: CoefficientField
    d: int
    eps_values: tuple[float, ...]
    lambdas: tuple[float, ...] | None
    explicit_scales: tuple[float, ...] | None
    separation_n: int | None
    domain: tuple[float, float]
    resolution: int | None
    cells_per_scale: int
    cell_resolution: int | None
    cell_tol: float
    rhs_source: str
    boundary_source: str
    probe: ProbeParams
    solver_tol: float
    out: str
    cache_dir: str | None
    seed: int
    jobs: int
    feasibility: tuple[Feasibility, ...]
    items: tuple[tuple[str, str], ...]  # normalized pairs, hashed for the manifest

    def ladders(self) -> list[ScaleLadder]:
        if self.explicit_scales is not None:
            return [ScaleLadder(self.explicit_scales, N=self.separation_n)]
        return [ScaleLadder.power(e, self.lambdas, N=self.separation_n)
                for e in self.eps_values]

    def resolution_for(self, ladder: ScaleLadder) -> int:
        if self.resolution is not None:
            return self.resolution
        lo, hi = self.domain
        return int(np.ceil((hi - lo) * self.cells_per_scale / ladder.finest))

    def grid_for(self, ladder: ScaleLadder) -> Grid:
        lo, hi = self.domain
        n = self.resolution_for(ladder)
        return Grid.box((lo,) * self.d, (hi,) * self.d, n)

    def bvp_for(self, grid: Grid) -> BVP:
        names = [f"x{i + 1}" for i in range(self.d)]
        rhs = compile_expression(self.rhs_source, names)
        bnd = compile_expression(self.boundary_source, names)

        def as_pointwise(fn):
            def pointwise(pts):
                # constant expressions come back 0-d; broadcast to the nodes
                out = fn(**{names[i]: pts[..., i] for i in range(self.d)})
                return np.broadcast_to(out, pts.shape[:-1]).copy()
            return pointwise

        return BVP.on(grid, rhs=as_pointwise(rhs), boundary=as_pointwise(bnd))

    def probe_center(self) -> tuple:
        if self.probe.center is not None:
            return self.probe.center
        mid = 0.5 * (self.domain[0] + self.domain[1])
        return (mid,) * self.d

    def probe_radius(self) -> float:
        if self.probe.radius is not None:
            return self.probe.radius
        return 0.25 * (self.domain[1] - self.domain[0])

    def digest(self) -> str:
        payload = "\n".join(f"{k} = {v}" for k, v in self.items)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def with_overrides(self, out=None, cache=None, jobs=None) -> "ExperimentConfig":
        cfg = self
        if out is not None:
            cfg = replace(cfg, out=str(out))
        if cache is not None:
            cfg = replace(cfg, cache_dir=str(cache))
        if jobs is not None:
            cfg = replace(cfg, jobs=int(jobs))
        return cfg

    def resolved_cache_dir(self) -> str:
        # the environment overrides the config file; a --cache flag beats both
        return os.environ.get("REITERATE_CACHE") or self.cache_dir \
            or ".reiterate-cache"


def _read_pairs(path: str, errors: list[str]) -> dict[str, str]:
    pairs: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                errors.append(f"line {lineno}: {line!r} is not a 'key = value' "
                              "assignment")
                continue
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in KNOWN_KEYS:
                errors.append(f"key {key!r}: unknown (known keys: "
                              f"{', '.join(sorted(KNOWN_KEYS))})")
                continue
            if key in pairs:
                errors.append(f"key {key!r}: assigned twice (line {lineno})")
                continue
            pairs[key] = value
    return pairs


def _take(pairs, key, parser, errors, default=None):
    if key not in pairs:
        return default
    try:
        return parser(pairs[key])
    except (ValueError, ConfigError) as exc:
        errors.append(f"key {key!r}: {exc}; expected {KNOWN_KEYS[key]}")
        return default


def parse_config(path: str) -> ExperimentConfig:
    """Parse and validate; raises ConfigError listing every violation."""
    errors: list[str] = []
    try:
        pairs = _read_pairs(path, errors)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from None

    d = _take(pairs, "dim", parse_int, errors)
    if "dim" not in pairs:
        errors.append(f"key 'dim': required; expected {KNOWN_KEYS['dim']}")
    elif d is not None and d not in (1, 2):
        errors.append(f"key 'dim': got {d}; expected {KNOWN_KEYS['dim']}")
        d = None

    field = None
    field_source = pairs.get("field", "")
    if "field" not in pairs:
        errors.append(f"key 'field': required; expected {KNOWN_KEYS['field']}")
    elif d is not None:
        try:
            field = builtin_family(CoefficientSpec.parse(field_source), d)
        except (ValueError, ConfigError) as exc:
            errors.append(f"key 'field': {exc}; expected {KNOWN_KEYS['field']}")

    eps_values = _take(pairs, "eps", parse_number_list, errors)
    lambdas = _take(pairs, "lambdas", parse_number_list, errors)
    explicit = _take(pairs, "scales", parse_number_list, errors)
    separation_n = _take(pairs, "separation_n", parse_int, errors)

    if eps_values is not None and explicit is not None:
        errors.append("key 'scales': conflicts with 'eps'; give explicit scales "
                      "or a sweep, not both")
        explicit = None
    if eps_values is None and explicit is None and "eps" not in pairs \
            and "scales" not in pairs:
        errors.append("key 'eps': required unless 'scales' is given; expected "
                      f"{KNOWN_KEYS['eps']}")
    if eps_values is not None:
        bad = [e for e in eps_values if not 0.0 < e < 1.0]
        if bad:
            errors.append(f"key 'eps': values {bad} outside (0, 1); expected "
                          f"{KNOWN_KEYS['eps']}")
            eps_values = None
    if lambdas is not None:
        if explicit is not None:
            errors.append("key 'lambdas': meaningless with explicit 'scales'")
        elif list(lambdas) != sorted(lambdas) or lambdas[0] <= 0:
            errors.append(f"key 'lambdas': got {list(lambdas)}; expected "
                          f"{KNOWN_KEYS['lambdas']}")
            lambdas = None
    if eps_values is not None and lambdas is None and "lambdas" not in pairs:
        n_slots = field.n_scales if field is not None else 1
        lambdas = tuple(float(k) for k in range(1, max(n_slots, 1) + 1))

    ladders: list[ScaleLadder] = []
    if explicit is not None:
        try:
            ladders = [ScaleLadder(explicit, N=separation_n)]
        except ValueError as exc:
            errors.append(f"key 'scales': {exc}")
            explicit = None
    elif eps_values is not None and lambdas is not None:
        try:
            ladders = [ScaleLadder.power(e, lambdas, N=separation_n)
                       for e in eps_values]
        except ValueError as exc:
            errors.append(f"key 'eps': ladder eps^lambda_k invalid: {exc}")
            ladders = []
    if field is not None and field.n_scales > 0 and ladders:
        if ladders[0].n != field.n_scales:
            errors.append(f"key 'lambdas': ladder has {ladders[0].n} scales but "
                          f"the field has {field.n_scales} fast slots")
            ladders = []

    domain = _take(pairs, "domain", parse_number_list, errors, default=(0.0, 1.0))
    if domain is not None and (len(domain) != 2 or domain[0] >= domain[1]):
        errors.append(f"key 'domain': got {list(domain)}; expected "
                      f"{KNOWN_KEYS['domain']}")
        domain = (0.0, 1.0)

    resolution = _take(pairs, "resolution", parse_int, errors)
    if resolution is not None and resolution < 2:
        errors.append(f"key 'resolution': got {resolution}; expected "
                      f"{KNOWN_KEYS['resolution']}")
        resolution = None
    cells_per_scale = _take(pairs, "cells_per_scale", parse_int, errors, default=16)
    if cells_per_scale is not None and cells_per_scale < 8:
        errors.append(f"key 'cells_per_scale': got {cells_per_scale}; spacing "
                      "must not exceed an eighth of the finest scale; expected "
                      f"{KNOWN_KEYS['cells_per_scale']}")
        cells_per_scale = 16
    cell_resolution = _take(pairs, "cell.resolution", parse_int, errors)
    if cell_resolution is not None and cell_resolution < 8:
        errors.append(f"key 'cell.resolution': got {cell_resolution}; expected "
                      f"{KNOWN_KEYS['cell.resolution']}")
        cell_resolution = None
    cell_tol = _take(pairs, "cell.tol", parse_number, errors, default=1e-11)
    solver_tol = _take(pairs, "tol.solver", parse_number, errors, default=1e-10)
    for key, value in (("cell.tol", cell_tol), ("tol.solver", solver_tol)):
        if value is not None and not 0.0 < value <= 1e-4:
            errors.append(f"key {key!r}: got {value:g}; expected "
                          f"{KNOWN_KEYS[key]}")

    rhs_source = pairs.get("bvp.rhs", "1")
    boundary_source = pairs.get("bvp.boundary", "0")
    if d is not None:
        names = [f"x{i + 1}" for i in range(d)]
        for key, src in (("bvp.rhs", rhs_source), ("bvp.boundary", boundary_source)):
            try:
                compile_expression(src, names)
            except ConfigError as exc:
                errors.append(f"key {key!r}: {exc}; expected {KNOWN_KEYS[key]}")

    probe_p = _take(pairs, "probe.p", parse_number, errors)
    if probe_p is not None and d is not None and probe_p <= d:
        errors.append(f"key 'probe.p': got {probe_p:g}; expected "
                      f"{KNOWN_KEYS['probe.p']}")
        probe_p = None
    theta = _take(pairs, "probe.theta", parse_number, errors, default=1.0)
    alpha = _take(pairs, "probe.alpha", parse_number, errors, default=0.5)
    for key, value in (("probe.theta", theta), ("probe.alpha", alpha)):
        if value is not None and not 0.0 < value <= 1.0:
            errors.append(f"key {key!r}: got {value:g}; expected {KNOWN_KEYS[key]}")
    center = _take(pairs, "probe.center", parse_number_list, errors)
    if center is not None and d is not None:
        if len(center) != d or any(not domain[0] < c < domain[1] for c in center):
            errors.append(f"key 'probe.center': got {list(center)}; expected "
                          f"{KNOWN_KEYS['probe.center']}")
            center = None
    radius = _take(pairs, "probe.radius", parse_number, errors)
    if radius is not None and radius <= 0:
        errors.append(f"key 'probe.radius': got {radius:g}; expected "
                      f"{KNOWN_KEYS['probe.radius']}")
        radius = None
    rho = _take(pairs, "probe.rho", parse_number, errors, default=0.5)
    if rho is not None and rho <= 0:
        errors.append(f"key 'probe.rho': got {rho:g}; expected "
                      f"{KNOWN_KEYS['probe.rho']}")
        rho = 0.5
    t_shrink = _take(pairs, "probe.t", parse_number, errors)
    if t_shrink is not None and not any(abs(t_shrink - c) < 1e-12
                                        for c in _T_CANDIDATES):
        errors.append(f"key 'probe.t': got {t_shrink:g}; expected "
                      f"{KNOWN_KEYS['probe.t']}")
        t_shrink = None

    seed = _take(pairs, "seed", parse_int, errors, default=0)
    jobs = _take(pairs, "jobs", parse_int, errors, default=1)
    if jobs is not None and jobs < 1:
        errors.append(f"key 'jobs': got {jobs}; expected {KNOWN_KEYS['jobs']}")
        jobs = 1
    out = pairs.get("out", "runs")
    cache_dir = pairs.get("cache")

    feasibility: list[Feasibility] = []
    if d is not None and ladders and domain is not None:
        width = domain[1] - domain[0]
        for ladder in ladders:
            if resolution is not None:
                n = resolution
            else:
                n = int(np.ceil(width * cells_per_scale / ladder.finest))
            spacing = width / n
            if spacing > ladder.finest / 8 * (1 + 1e-12):
                needed = int(np.ceil(width * 8 / ladder.finest))
                errors.append(
                    f"key 'resolution': spacing {spacing:g} exceeds an eighth "
                    f"of the finest scale {ladder.finest:g}; need at least "
                    f"{needed} cells per axis")
                continue
            # node arrays for solution, rhs, boundary, coefficient, pcg workspace
            arrays = 4 + d * d
            memory = arrays * 8 * (n + 1) ** d
            if memory > MEMORY_LIMIT_BYTES:
                errors.append(
                    f"key 'resolution': {n} cells per axis in dimension {d} "
                    f"needs about {memory / 2**30:.1f} GiB, over the "
                    f"{MEMORY_LIMIT_BYTES / 2**30:.0f} GiB limit")
                continue
            feasibility.append(Feasibility(
                eps=ladder.scales[0], finest=ladder.finest, resolution=n,
                spacing=spacing, memory_bytes=memory))

    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))

    items = tuple(sorted(pairs.items()))
    return ExperimentConfig(
        field_source=field_source, field=field, d=d,
        eps_values=tuple(eps_values) if eps_values is not None else (),
        lambdas=tuple(lambdas) if lambdas is not None else None,
        explicit_scales=tuple(explicit) if explicit is not None else None,
        separation_n=separation_n, domain=(float(domain[0]), float(domain[1])),
        resolution=resolution, cells_per_scale=cells_per_scale,
        cell_resolution=cell_resolution, cell_tol=cell_tol,
        rhs_source=rhs_source, boundary_source=boundary_source,
        probe=ProbeParams(p=probe_p, theta=theta, alpha=alpha, center=center,
                          radius=radius, rho=rho, t=t_shrink),
        solver_tol=solver_tol, out=out, cache_dir=cache_dir, seed=seed,
        jobs=jobs, feasibility=tuple(feasibility), items=items)
