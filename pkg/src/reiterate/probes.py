"""Empirical certification: convergence rates, excess decay, Lipschitz bounds.

Everything here measures discrete solutions and reports dimensionless
ratios against the behaviour the theory predicts.  Ball quantities use
node balls.  Affine competitors come from a least-squares fit whose
slope is then shrunk along its own ray by a golden-section search, which
is exact for the penalized objective in one dimension and exact up to
grid quantization in two, because the second-moment matrix of a ball is
isotropic.

Conventions used throughout: ratios with vanishing numerator and
denominator count as 0, never NaN; radius sequences are dyadic from the
top radius down to max(finest scale, 8h); the F-term exponent p defaults
to d + 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coeff import CoefficientField, ScaleLadder
from .cascade import homogenize_all
from .dirichlet import BVP, solve_homogenized, solve_multiscale
from .grid import Grid, GridFunction, ball_average, gradient, l2_norm

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _safe_ratio(num: float, den: float) -> float:
    if den == 0.0:
        return 0.0
    return num / den


def _denoise(value: float, noise: float) -> float:
    return 0.0 if value < noise else value


def dyadic_radii(top: float, floor: float) -> list[float]:
    """Halving sequence from top down to floor (top alone if floor > top)."""
    radii = [float(top)]
    r = top / 2
    while r >= floor * (1.0 - 1e-12):
        radii.append(float(r))
        r /= 2
    return radii


# ---------------------------------------------------------------------------
# homogenization rate sweeps


@dataclass(frozen=True)
class RateRow:
    eps: float
    rate_expr: float  # separation error scale: eps_1 + sum eps_{k+1}/eps_k
    resolution: int
    l2_error: float
    slope_so_far: float


@dataclass(frozen=True)
class RateSweep:
    rows: tuple
    exponent: float
    intercept: float
    warnings: tuple
    effective: np.ndarray

    def errors(self) -> np.ndarray:
        return np.array([row.l2_error for row in self.rows])


def separation_error_scale(ladder: ScaleLadder) -> float:
    scales = ladder.scales
    total = scales[0]
    for k in range(len(scales) - 1):
        total += scales[k + 1] / scales[k]
    return total


def rate_sweep(field: CoefficientField, eps_values, ladder_for, *,
               rhs=1.0, boundary=0.0, cells_per_scale: int = 16,
               max_resolution: int | None = None, tol: float = 1e-10,
               cache=None, jobs: int = 1) -> RateSweep:
    """L2 distance between the oscillating and homogenized solves per eps.

    ladder_for maps a bare eps to its ScaleLadder.  Scales whose required
    resolution exceeds max_resolution are dropped with a warning rather
    than solved badly.  The exponent is the log-log slope of the error
    against the separation error scale of each ladder; a fit over fewer
    than 4 surviving scales is flagged.
    """
    d = field.d
    if max_resolution is None:
        max_resolution = 65536 if d == 1 else 512
    effective = None
    rows: list[RateRow] = []
    warnings: list[str] = []
    for eps in eps_values:
        ladder = ladder_for(eps)
        needed = int(np.ceil(cells_per_scale / ladder.finest))
        if needed > max_resolution:
            warnings.append(
                f"eps={eps:g} needs {needed} cells per axis, over the cap "
                f"{max_resolution}; dropped")
            continue
        if effective is None:
            result = homogenize_all(field, ladder, tol=min(tol, 1e-11),
                                    cache=cache, jobs=jobs)
            effective = result.effective.tensor
        grid = Grid.box((0.0,) * d, (1.0,) * d, needed)
        bvp = BVP.on(grid, rhs=rhs, boundary=boundary)
        u_eps = solve_multiscale(bvp, field, ladder, tol=tol)
        u0 = solve_homogenized(bvp, effective, tol=tol)
        err = l2_norm(GridFunction(grid, u_eps.values - u0.values))
        rate_expr = separation_error_scale(ladder)
        if rows:
            prev = rows[-1]
            slope = _safe_ratio(math.log(_safe_ratio(prev.l2_error, err) or 1.0),
                                math.log(prev.rate_expr / rate_expr))
        else:
            slope = 0.0
        rows.append(RateRow(eps=eps, rate_expr=rate_expr, resolution=needed,
                            l2_error=float(err), slope_so_far=float(slope)))
    exponent = 0.0
    intercept = 0.0
    if len(rows) >= 2:
        xs = np.log([row.rate_expr for row in rows])
        ys = np.log([max(row.l2_error, 1e-300) for row in rows])
        exponent, intercept = (float(v) for v in np.polyfit(xs, ys, 1))
        if len(rows) < 4:
            warnings.append(f"exponent fitted over only {len(rows)} scales; "
                            "4 or more give a trustworthy slope")
    return RateSweep(rows=tuple(rows), exponent=exponent, intercept=intercept,
                     warnings=tuple(warnings), effective=effective)


# ---------------------------------------------------------------------------
# local approximation by the homogenized operator


def _aligned_subbox(grid: Grid, center, half_width: float):
    """Node slices of the concentric box of the given half width."""
    slices = []
    for axis in range(grid.d):
        h = grid.spacing[axis]
        c = int(round((center[axis] - grid.lo[axis]) / h))
        k = int(round(half_width / h))
        lo_i, hi_i = c - k, c + k
        if lo_i < 0 or hi_i > grid.shape[axis]:
            raise ValueError(
                f"box of half width {half_width:g} around {center} leaves the domain")
        slices.append(slice(lo_i, hi_i + 1))
    return tuple(slices)


def approximate_by_homogenized(field: CoefficientField, ladder: ScaleLadder, *,
                               r: float = 0.25, rho: float = 0.5, rhs=1.0,
                               boundary=0.0, cells_per_scale: int = 16,
                               tol: float = 1e-10, effective=None,
                               cache=None) -> dict:
    """Approximate u_eps on B_r by a homogenized solve fed with its trace.

    The limit operator is solved on the concentric box of half width
    3r/2 with boundary data read off the oscillating solution, and the
    two are compared on the ball of radius r.  bound_ratio divides the
    discrepancy by (eps_1/r)^rho * (rms of u_eps on B_2r + r^2 rms of F),
    the shape the local approximation estimate predicts; rho is an input
    exponent to test, not a derived constant.
    """
    d = field.d
    if ladder.scales[0] > r * (1 + 1e-12):
        raise ValueError(f"coarsest scale {ladder.scales[0]:g} exceeds the "
                         f"probe radius {r:g}")
    n = int(np.ceil(cells_per_scale / ladder.finest))
    if n % 2:
        n += 1  # keep the box center on a node
    grid = Grid.box((0.0,) * d, (1.0,) * d, n)
    center = tuple(0.5 for _ in range(d))
    bvp = BVP.on(grid, rhs=rhs, boundary=boundary)
    u_eps = solve_multiscale(bvp, field, ladder, tol=tol)
    if effective is None:
        result = homogenize_all(field, ladder, tol=min(tol, 1e-11), cache=cache)
        effective = result.effective
    slices = _aligned_subbox(grid, center, 1.5 * r)
    sub_cells = tuple(s.stop - s.start - 1 for s in slices)
    sub = Grid.box(tuple(grid.lo[a] + slices[a].start * grid.spacing[a] for a in range(d)),
                   tuple(grid.lo[a] + (slices[a].stop - 1) * grid.spacing[a] for a in range(d)),
                   sub_cells)
    local = BVP(grid=sub, rhs=GridFunction(sub, bvp.rhs.values[slices]),
                boundary=GridFunction(sub, u_eps.values[slices]))
    u0 = solve_homogenized(local, effective, tol=tol)
    defect = GridFunction(sub, u_eps.values[slices] - u0.values)
    discrepancy = ball_average(defect, center, r, p=2.0)
    size = ball_average(u_eps, center, 2 * r, p=2.0)
    f_term = (r**2) * ball_average(bvp.rhs, center, 2 * r, p=2.0)
    denom = (ladder.scales[0] / r) ** rho * (size + f_term)
    return {
        "eps": ladder.finest,
        "r": r,
        "rho": rho,
        "resolution": n,
        "discrepancy": discrepancy,
        "bound_ratio": _safe_ratio(discrepancy, denom),
    }


def approximation_sweep(field: CoefficientField, eps_values, ladder_for, **kw) -> dict:
    """Decay of the local approximation discrepancy across scales."""
    effective = kw.pop("effective", None)
    if effective is None and field.n_scales > 0:
        # effective tensors are scale free, so one cascade serves every eps
        effective = homogenize_all(field, ladder_for(eps_values[0]),
                                   tol=1e-11, cache=kw.get("cache")).effective
    reports = [approximate_by_homogenized(field, ladder_for(eps),
                                          effective=effective, **kw)
               for eps in eps_values]
    eps_arr = np.array([rep["eps"] for rep in reports])
    vals = np.array([max(rep["discrepancy"], 1e-300) for rep in reports])
    return {
        "reports": reports,
        "exponent": float(np.polyfit(np.log(eps_arr), np.log(vals), 1)[0]),
    }


# ---------------------------------------------------------------------------
# ball fits and excess functionals


@dataclass(frozen=True)
class BallFit:
    center: tuple
    radius: float
    constant: float
    slope: np.ndarray
    residual_l2: float  # root mean square over the ball nodes
    nodes: int


def _ball_mask(grid: Grid, center, r: float) -> np.ndarray:
    pts = grid.nodes()
    delta = pts - np.asarray(center, dtype=float)
    return np.sqrt(np.sum(delta**2, axis=-1)) <= r + 1e-12


def affine_fit(u: GridFunction, center, r: float) -> BallFit:
    """Least-squares affine fit over the node ball."""
    grid = u.grid
    mask = _ball_mask(grid, center, r)
    count = int(mask.sum())
    if count < 3 * grid.d:
        raise ValueError(f"ball of radius {r:g} holds only {count} nodes")
    pts = grid.nodes()[mask] - np.asarray(center, dtype=float)
    vals = u.values[mask]
    design = np.concatenate([np.ones((count, 1)), pts], axis=1)
    coef, *_ = np.linalg.lstsq(design, vals, rcond=None)
    residual = vals - design @ coef
    return BallFit(center=tuple(float(c) for c in center), radius=float(r),
                   constant=float(coef[0]), slope=coef[1:].copy(),
                   residual_l2=float(np.sqrt(np.mean(residual**2))), nodes=count)


def _golden_minimize(fn, lo: float, hi: float, iters: int = 60) -> float:
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def penalized_affine_excess(u: GridFunction, center, r: float, *,
                            vartheta: float, oscillation=None) -> tuple[float, float]:
    """(1/r) inf_P [rms(u - P) + r^(1+vartheta) |grad P|], slope of the infimum.

    P ranges over affines c + xi . (x - center), optionally corrected by
    the sampled oscillation profile (one column per slope component).
    The slope is shrunk along the least-squares ray; the constant is
    re-optimized in closed form for every candidate.
    """
    grid = u.grid
    mask = _ball_mask(grid, center, r)
    pts = grid.nodes()[mask] - np.asarray(center, dtype=float)
    vals = u.values[mask]
    if vals.size < 3 * grid.d:
        raise ValueError(f"ball of radius {r:g} holds only {vals.size} nodes")
    basis = pts.copy()
    if oscillation is not None:
        basis = basis + oscillation[mask]
    design = np.concatenate([np.ones((vals.size, 1)), basis], axis=1)
    coef, *_ = np.linalg.lstsq(design, vals, rcond=None)
    xi = coef[1:]
    slope_norm = float(np.linalg.norm(xi))
    v0 = vals - vals.mean()
    g = basis @ xi
    g = g - g.mean()
    penalty = r ** (1.0 + vartheta) * slope_norm

    def objective(t: float) -> float:
        return float(np.sqrt(np.mean((v0 - t * g) ** 2))) + t * penalty

    t_star = _golden_minimize(objective, 0.0, 1.0)
    if objective(0.0) <= objective(t_star):
        t_star = 0.0
    return objective(t_star) / r, t_star * slope_norm


def excess_rows(u: GridFunction, center, radii, *, theta: float = 1.0,
                p: float | None = None, forcing: GridFunction | None = None,
                oscillation=None) -> list[dict]:
    """Per-radius excess table: r, H, Phi, G, h.

    H penalizes corrected affines when an oscillation profile is given
    and plain affines otherwise; G always uses plain affines, so the two
    collapse to one number in the homogenized case.  Phi compares with
    constants only.  h is the least-squares slope magnitude.  Forcing
    adds r * (ball p-mean of |F|) to H, Phi, and G, with the regularity
    exponent capped at 1 - d/p.
    """
    grid = u.grid
    d = grid.d
    if p is None:
        p = d + 1.0
    vartheta = min(theta, 1.0 - d / p) if p > d else theta
    rows = []
    for r in radii:
        force_term = 0.0
        if forcing is not None:
            force_term = r * ball_average(forcing, center, r, p=p)
        H, _ = penalized_affine_excess(u, center, r, vartheta=vartheta,
                                       oscillation=oscillation)
        if oscillation is None:
            G = H
        else:
            G, _ = penalized_affine_excess(u, center, r, vartheta=vartheta)
        fit = affine_fit(u, center, r)
        mask = _ball_mask(grid, center, r)
        flat = float(np.sqrt(np.mean((u.values[mask] - u.values[mask].mean()) ** 2)))
        rows.append({
            "r": float(r),
            "H": H + force_term,
            "Phi": flat / r + force_term,
            "G": G + force_term,
            "h": float(np.linalg.norm(fit.slope)),
        })
    return rows


# ---------------------------------------------------------------------------
# Lipschitz certificates


def lipschitz_certificate(u: GridFunction, center, top_radius: float, *,
                          eps_floor: float = 0.0,
                          forcing: GridFunction | None = None,
                          p: float | None = None) -> dict:
    """max over dyadic r of the gradient ball rms against its top-radius bound.

    The numerator is (ball rms of |grad u|) at radius r; the denominator
    adds the forcing p-mean at the top radius, scaled by it.  Radii run
    dyadically from top_radius down to max(eps_floor, 8h).  Affine data
    with no forcing certifies to 1; zero slope certifies to 0.
    """
    grid = u.grid
    if p is None:
        p = grid.d + 1.0
    floor = max(eps_floor, 8.0 * max(grid.spacing))
    radii = dyadic_radii(top_radius, floor)
    grad = gradient(u)
    # slopes below the float noise of the data count as zero
    noise = 1e-12 * (ball_average(u, center, top_radius, p=2.0) / top_radius + 1.0)
    levels = {r: _denoise(ball_average(grad, center, r, p=2.0), noise)
              for r in radii}
    denom = levels[radii[0]]
    if forcing is not None:
        denom += top_radius * ball_average(forcing, center, top_radius, p=p)
    cert = max(_safe_ratio(levels[r], denom) for r in radii)
    return {"certificate": cert, "radii": radii, "levels": levels,
            "denominator": denom}


def boundary_lipschitz_flat(u: GridFunction, top_radius: float, *,
                            center=None, eps_floor: float = 0.0,
                            forcing: GridFunction | None = None,
                            face_data_norm: float = 0.0,
                            p: float | None = None) -> dict:
    """Half-ball gradient certificate at a point of the flat face x_d = lo.

    Z_r is the node ball around the face point clipped by the domain.
    The denominator carries the top-radius gradient average, the face
    data norm scaled by 1/R, and the forcing term; zero data on zero u
    certifies to 0 by convention.
    """
    grid = u.grid
    if p is None:
        p = grid.d + 1.0
    if center is None:
        mid = [(lo + hi) / 2 for lo, hi in zip(grid.lo, grid.hi)]
        mid[-1] = grid.lo[-1]
        center = tuple(mid)
    floor = max(eps_floor, 8.0 * max(grid.spacing))
    radii = dyadic_radii(top_radius, floor)
    grad = gradient(u)
    noise = 1e-12 * (ball_average(u, center, top_radius, p=2.0) / top_radius + 1.0)
    levels = {r: _denoise(ball_average(grad, center, r, p=2.0), noise)
              for r in radii}
    denom = levels[radii[0]] + face_data_norm / top_radius
    if forcing is not None:
        denom += top_radius * ball_average(forcing, center, top_radius, p=p)
    cert = max(_safe_ratio(levels[r], denom) for r in radii)
    return {"certificate": cert, "radii": radii, "levels": levels,
            "denominator": denom}


def face_data_norm_c1alpha(g, tangent_span, r: float, alpha: float,
                           samples: int = 512) -> float:
    """sup |g| + r sup |g'| + r^(1+alpha) [g']_alpha on a flat face segment."""
    lo, hi = tangent_span
    t = np.linspace(lo, hi, samples)
    vals = np.asarray(g(t), dtype=float)
    step = t[1] - t[0]
    grad = np.gradient(vals, step)
    sup = float(np.max(np.abs(vals)))
    sup_grad = float(np.max(np.abs(grad)))
    seminorm = 0.0
    for lag in (1, 2, 4, 8, 16):
        diff = np.abs(grad[lag:] - grad[:-lag])
        seminorm = max(seminorm, float(np.max(diff)) / (lag * step) ** alpha)
    return sup + r * sup_grad + r ** (1.0 + alpha) * seminorm


# ---------------------------------------------------------------------------
# excess iteration and shrink-factor calibration


def calibrate_t(corpus, radii, *, candidates=(1 / 16, 1 / 32, 1 / 64),
                theta: float = 1.0, p: float | None = None) -> dict:
    """Largest candidate shrink factor with G(t r) <= G(r)/2 on the corpus.

    The corpus holds homogenized solutions as (GridFunction, center)
    pairs; their excess carries no separation term, so the contraction
    must hold outright.  When no candidate contracts, ok is False and the
    worst ratio of the smallest testable candidate is reported.  A
    candidate whose shrunk ball falls under the grid resolution records
    a None ratio and cannot qualify.
    """
    report = {"ok": False, "t": None, "ratios": {}}
    for t in sorted(candidates, reverse=True):
        worst = 0.0
        for u, center in corpus:
            d = u.grid.d
            pp = p if p is not None else d + 1.0
            vartheta = min(theta, 1.0 - d / pp) if pp > d else theta
            for r in radii:
                try:
                    g_r, _ = penalized_affine_excess(u, center, r,
                                                     vartheta=vartheta)
                    g_tr, _ = penalized_affine_excess(u, center, t * r,
                                                      vartheta=vartheta)
                except ValueError:
                    worst = None
                    break
                worst = max(worst, _safe_ratio(g_tr, g_r))
            if worst is None:
                break
        report["ratios"][t] = worst
        if worst is not None and worst <= 0.5 and not report["ok"]:
            report.update(ok=True, t=t, worst_ratio=worst)
    if not report["ok"]:
        testable = {t: v for t, v in report["ratios"].items() if v is not None}
        report["worst_ratio"] = testable[min(testable)] if testable else None
    return report


def iteration_defects(u: GridFunction, center, radii, eps1: float, t: float, *,
                      theta: float = 1.0, p: float | None = None,
                      forcing: GridFunction | None = None,
                      oscillation=None) -> list[dict]:
    """Per-radius iteration defect [H(t r) - H(r)/2]_+ / Phi(2 r).

    The defect is what the separation term C (eps1/r)^rho must absorb; a
    zero driving excess with zero defect counts as 0.
    """
    rows = excess_rows(u, center,
                       list(radii) + [t * r for r in radii] + [2 * r for r in radii],
                       theta=theta, p=p, forcing=forcing, oscillation=oscillation)
    table = {row["r"]: row for row in rows}
    out = []
    for r in radii:
        lhs = table[float(t * r)]["H"]
        half = 0.5 * table[float(r)]["H"]
        phi = table[float(2 * r)]["Phi"]
        out.append({
            "r": float(r), "eps_over_r": eps1 / r, "H_tr": lhs, "H_r": 2 * half,
            "Phi_2r": phi, "defect": _safe_ratio(max(lhs - half, 0.0), phi),
        })
    return out


def fit_rho(defect_rows) -> float:
    """Exponent of the pooled defects against eps1/r; 0 when nothing drives."""
    pts = [(row["eps_over_r"], row["defect"]) for row in defect_rows
           if row["defect"] > 0.0]
    if len(pts) < 2:
        return 0.0
    xs = np.log([p[0] for p in pts])
    ys = np.log([p[1] for p in pts])
    if np.ptp(xs) == 0.0:
        return 0.0
    return float(np.polyfit(xs, ys, 1)[0])


def iteration_constant(defect_rows, rho: float) -> float:
    """Smallest C with defect <= C (eps1/r)^rho at every tested radius."""
    return max((_safe_ratio(row["defect"], row["eps_over_r"] ** rho)
                for row in defect_rows), default=0.0)
