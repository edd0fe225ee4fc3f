"""Reiterated descent across well-separated scales.

Each descent step freezes the slower arguments of the coefficient on a
sample grid, solves the periodic cell problem in the fastest remaining
slot at every sample, and tabulates the resulting effective tensors.
Multilinear interpolation of that table is itself a coefficient field
with one slot fewer, so the recursion repeats until nothing oscillates;
the scale ladder never enters the solves, only the final bookkeeping.

Sample coordinates follow the slot-major layout of the coefficient
fields: d slow dimensions first (collapsed to a point when the field
ignores x), then d dimensions per remaining fast slot.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from itertools import product

import numpy as np

from .cell import (DEFAULT_RESOLUTION, CellProblem, EffectiveTensor,
                   effective_tensor, solve_corrector)
from .coeff import CoefficientField, ScaleLadder
from .grid import Grid


# ---------------------------------------------------------------------------
# tabulated tensors on a product of sample axes


@dataclass(frozen=True)
class Axis:
    """One sample dimension: uniform nodes, wrapped when periodic."""

    coords: np.ndarray
    periodic: bool

    @property
    def n(self) -> int:
        return self.coords.size

    @property
    def spacing(self) -> float:
        if self.n == 1:
            return 1.0
        if self.periodic:
            return float(self.coords[1] - self.coords[0])
        return float((self.coords[-1] - self.coords[0]) / (self.n - 1))


def point_axis() -> Axis:
    return Axis(np.zeros(1), periodic=False)


def periodic_axis(n: int) -> Axis:
    return Axis(np.arange(n) / n, periodic=True)


def box_axis(n: int, lo: float = 0.0, hi: float = 1.0) -> Axis:
    return Axis(np.linspace(lo, hi, n + 1), periodic=False)


def _axis_locate(axis: Axis, q: np.ndarray):
    """Bracketing indices and weight for linear interpolation along one axis."""
    n = axis.n
    h = axis.spacing
    if axis.periodic:
        t = (q - axis.coords[0]) / h
        base = np.floor(t)
        w = t - base
        i0 = base.astype(np.int64) % n
        i1 = (i0 + 1) % n
    else:
        t = np.clip((q - axis.coords[0]) / h, 0.0, n - 1.0)
        i0 = np.minimum(t.astype(np.int64), n - 2)
        w = t - i0
        i1 = i0 + 1
    return i0, i1, w


def multilinear(axes, values: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Interpolate values tabulated on a product of axes at query rows.

    values has one leading dimension per axis plus arbitrary trailing
    shape; queries is (m, len(axes)).  Point axes (size 1) cost nothing.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    m = queries.shape[0]
    trail = values.shape[len(axes):]
    zeros = np.zeros(m, dtype=np.int64)
    located = []
    for a, axis in enumerate(axes):
        if axis.n == 1:
            located.append(None)
        else:
            located.append(_axis_locate(axis, queries[:, a]))
    active = [a for a, loc in enumerate(located) if loc is not None]
    out = np.zeros((m,) + trail)
    for corner in product((0, 1), repeat=len(active)):
        weight = np.ones(m)
        idx = [zeros] * len(axes)
        for bit, a in zip(corner, active):
            i0, i1, w = located[a]
            idx[a] = i1 if bit else i0
            weight = weight * (w if bit else 1.0 - w)
        out += weight.reshape((m,) + (1,) * len(trail)) * values[tuple(idx)]
    return out


@dataclass(frozen=True)
class TensorField:
    """Effective tensors tabulated over (x, y_1..y_k) sample axes."""

    d: int
    n_slots: int
    axes: tuple
    values: np.ndarray  # (*axis dims, d, d)

    def __post_init__(self):
        if len(self.axes) != self.d * (1 + self.n_slots):
            raise ValueError("axis count must cover x and every remaining slot")

    def interpolate(self, flat: np.ndarray) -> np.ndarray:
        return multilinear(self.axes, self.values, flat)

    def evaluator(self, x, ys) -> np.ndarray:
        lead = x.shape[:-1]
        parts = [x.reshape(-1, self.d)]
        parts += [ys[k].reshape(-1, self.d) for k in range(self.n_slots)]
        flat = np.concatenate(parts, axis=1)
        return self.interpolate(flat).reshape(lead + (self.d, self.d))

    def lipschitz_estimate(self) -> float:
        """Sum of per-axis max slopes bounds the interpolant's Lipschitz norm."""
        total = 0.0
        for a, axis in enumerate(self.axes):
            if axis.n == 1:
                continue
            diff = np.diff(self.values, axis=a)
            if axis.periodic:
                wrap = np.take(self.values, [0], axis=a) - np.take(self.values, [-1], axis=a)
                diff = np.concatenate([diff, wrap], axis=a)
            total += float(np.max(np.abs(diff))) / axis.spacing
        return total

    def as_field(self, parent: CoefficientField, digest: str | None) -> CoefficientField:
        return CoefficientField(d=self.d, n_scales=self.n_slots, evaluator=self.evaluator,
                                mu=parent.mu, theta=parent.theta,
                                lipschitz=self.lipschitz_estimate(),
                                depends_on_x=parent.depends_on_x,
                                smooth_last=parent.smooth_last,
                                digest_override=digest)


@dataclass(frozen=True)
class CorrectorTable:
    """Finest-level correctors tabulated over the slower sample axes."""

    d: int
    level: int
    slower_axes: tuple
    cell_grid: Grid
    values: np.ndarray  # (*slower dims, *cell nodes, d)

    @classmethod
    def from_correctors(cls, correctors) -> "CorrectorTable":
        """Wrap a single cell solve as the n = 1 table (no slower arguments)."""
        grid = correctors.problem.grid
        d = grid.d
        return cls(d=d, level=1, slower_axes=tuple(point_axis() for _ in range(d)),
                   cell_grid=grid, values=correctors.chi.values[(None,) * d])

    def sample(self, x: np.ndarray, ladder: ScaleLadder) -> np.ndarray:
        """chi_j(x, x/eps_1, ..., x/eps_level) for each row of x, shape (m, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cell_axes = tuple(periodic_axis(n) for n in self.cell_grid.shape)
        parts = [x] + [x / ladder.scales[k] for k in range(self.level)]
        flat = np.concatenate(parts, axis=1)
        return multilinear(self.slower_axes + cell_axes, self.values, flat)


# ---------------------------------------------------------------------------
# descent


@dataclass(frozen=True)
class CascadeLevel:
    """Record of one descent step: solved slot, table, and solve statistics."""

    level: int
    tensor_field: TensorField
    field: CoefficientField = dc_field(repr=False)
    resolution: int
    samples: int
    cache_hits: int
    cache_misses: int
    iterations: int
    spectrum: tuple[float, float]
    constant: EffectiveTensor | None = None


def _descended_digest(parent: str | None, level: int, resolution: int, tol: float,
                      dims: tuple) -> str | None:
    if parent is None:
        return None
    text = f"{parent}|L{level}|res={resolution}|tol={tol:.17g}|dims={dims}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _slower_axes(field: CoefficientField, level: int, x_resolution: int,
                 slot_resolution: int) -> tuple:
    axes = []
    for _ in range(field.d):
        axes.append(box_axis(x_resolution) if field.depends_on_x else point_axis())
    for _ in range(level - 1):
        for _ in range(field.d):
            axes.append(periodic_axis(slot_resolution))
    return tuple(axes)


def descend(field: CoefficientField, *, resolution: int | None = None,
            tol: float = 1e-10, x_resolution: int | None = None,
            slot_resolution: int | None = None, cache=None, jobs: int = 1,
            retain_correctors: bool = False):
    """Integrate out the fastest slot of the field.

    Returns (coarser field, CascadeLevel, CorrectorTable or None).  The
    coarser field interpolates effective tensors multilinearly between
    samples; in d=1 the default sample density equals the cell resolution
    so downstream cell grids land exactly on table nodes.
    """
    level = field.n_scales
    if level < 1:
        raise ValueError("field has no fast slot left to integrate out")
    d = field.d
    resolution = resolution or DEFAULT_RESOLUTION[d]
    slot_resolution = slot_resolution or (resolution if d == 1 else 16)
    x_resolution = x_resolution or (256 if d == 1 else 32)

    axes = _slower_axes(field, level, x_resolution, slot_resolution)
    dims = tuple(a.n for a in axes)
    digest = field.digest()
    key_resolution = (resolution,) * d

    def solve_at(index):
        frozen = tuple(float(axes[a].coords[i]) for a, i in enumerate(index))
        if cache is not None and digest is not None:
            entry = cache.lookup(digest, level, frozen, key_resolution, tol, d)
            if entry is not None:
                chi, tensor, sidecar = entry
                return (tensor, tuple(sidecar["spectrum"]), chi.values,
                        sum(sidecar["iterations"]), True)

        def sampler(y, frozen=frozen):
            lead = y.shape[:-1]
            x = np.broadcast_to(np.array(frozen[:d]), lead + (d,))
            ys = [np.broadcast_to(np.array(frozen[d + k * d: d + (k + 1) * d]),
                                  lead + (d,)) for k in range(level - 1)]
            return field(x, ys + [y])

        problem = CellProblem.from_sampler(sampler, d=d, resolution=resolution,
                                           frozen=frozen, tol=tol)
        correctors = solve_corrector(problem)
        eff = effective_tensor(problem, correctors, mu=field.mu)
        if cache is not None and digest is not None:
            cache.store(digest, level, correctors, eff)
        return (eff.tensor, eff.spectrum, correctors.chi.values,
                sum(correctors.iterations), False)

    indices = list(np.ndindex(*dims))
    hits0 = getattr(cache, "hits", 0)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(solve_at, indices))
    else:
        results = [solve_at(i) for i in indices]
    hits = (getattr(cache, "hits", 0) - hits0) if cache is not None else 0

    values = np.empty(dims + (d, d))
    spectrum_lo, spectrum_hi = np.inf, -np.inf
    iterations = 0
    chi_table = None
    cell_grid = Grid.torus(d, resolution)
    if retain_correctors:
        chi_table = np.empty(dims + cell_grid.node_shape + (d,))
    for index, (tensor, spectrum, chi, iters, _) in zip(indices, results):
        values[index] = tensor
        spectrum_lo = min(spectrum_lo, spectrum[0])
        spectrum_hi = max(spectrum_hi, spectrum[1])
        iterations += iters
        if retain_correctors:
            chi_table[index] = chi

    table = TensorField(d=d, n_slots=level - 1, axes=axes, values=values)
    child_digest = _descended_digest(digest, level, resolution, tol, dims)
    child = table.as_field(field, child_digest)

    constant = None
    if len(indices) == 1:
        tensor = values[indices[0]]
        constant = EffectiveTensor(tensor=tensor, mu=field.mu,
                                   spectrum=(float(spectrum_lo), float(spectrum_hi)))

    record = CascadeLevel(level=level, tensor_field=table, field=child,
                          resolution=resolution, samples=len(indices),
                          cache_hits=hits, cache_misses=len(indices) - hits,
                          iterations=iterations,
                          spectrum=(float(spectrum_lo), float(spectrum_hi)),
                          constant=constant)
    corrector_table = None
    if retain_correctors:
        corrector_table = CorrectorTable(d=d, level=level, slower_axes=axes,
                                         cell_grid=cell_grid, values=chi_table)
    return child, record, corrector_table


@dataclass(frozen=True)
class CascadeResult:
    """Every descent level plus the fully homogenized coefficient."""

    ladder: ScaleLadder | None
    levels: tuple
    effective_field: CoefficientField = dc_field(repr=False)
    effective: EffectiveTensor | None
    corrector_table: CorrectorTable | None

    def summary(self) -> dict:
        out = {
            "levels": [{
                "level": lv.level,
                "resolution": lv.resolution,
                "samples": lv.samples,
                "cache_hits": lv.cache_hits,
                "cache_misses": lv.cache_misses,
                "iterations": lv.iterations,
                "spectrum": [lv.spectrum[0], lv.spectrum[1]],
            } for lv in self.levels],
            "scales": list(self.ladder.scales) if self.ladder else None,
        }
        if self.effective is not None:
            out["effective_tensor"] = self.effective.tensor.tolist()
            out["effective_spectrum"] = list(self.effective.spectrum)
        return out


def homogenize_all(field: CoefficientField, ladder: ScaleLadder | None = None, *,
                   resolution: int | None = None, tol: float = 1e-10,
                   x_resolution: int | None = None, slot_resolution: int | None = None,
                   cache=None, jobs: int = 1,
                   retain_correctors: bool = False) -> CascadeResult:
    """Run the full descent from the finest slot down to none."""
    if ladder is not None and field.n_scales not in (0, ladder.n):
        raise ValueError(f"field has {field.n_scales} fast slots but the ladder has {ladder.n}")
    levels = []
    corrector_table = None
    current = field
    finest = field.n_scales
    while current.n_scales > 0:
        keep = retain_correctors and current.n_scales == finest
        current, record, table = descend(
            current, resolution=resolution, tol=tol, x_resolution=x_resolution,
            slot_resolution=slot_resolution, cache=cache, jobs=jobs,
            retain_correctors=keep)
        levels.append(record)
        if keep:
            corrector_table = table

    effective = None
    if levels and levels[-1].constant is not None:
        effective = levels[-1].constant
    elif not levels and not field.depends_on_x:
        tensor = field(np.zeros((1, field.d)), [])[0]
        eigs = np.linalg.eigvalsh(tensor)
        effective = EffectiveTensor(tensor=tensor, mu=field.mu,
                                    spectrum=(float(eigs[0]), float(eigs[-1])))
    return CascadeResult(ladder=ladder, levels=tuple(levels), effective_field=current,
                         effective=effective, corrector_table=corrector_table)


def holder_check(result: CascadeResult, seed: int = 0) -> dict:
    """Sampled ellipticity, periodicity, and regularity reports per level."""
    reports = []
    for record in result.levels:
        child = record.field
        entry = {
            "level": record.level,
            "ellipticity": child.check_ellipticity(seed=seed),
            "hoelder": child.check_hoelder(seed=seed),
        }
        if child.n_scales > 0:
            entry["periodicity"] = child.check_periodicity(seed=seed)
        reports.append(entry)
    ok = all(block["ok"] for entry in reports for block in entry.values()
             if isinstance(block, dict))
    return {"seed": seed, "levels": reports, "ok": ok}
