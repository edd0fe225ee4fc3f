"""Periodic cell problems: correctors, effective tensors, and flux correctors.

For a frozen set of slow arguments, the cell problem solves

    -div_y( A (grad_y chi_j + e_j) ) = 0  on the unit torus,  mean(chi_j) = 0,

and the effective tensor column j is the mean flux of y_j + chi_j.  The
flux matrix B = A(I + grad chi) - A_eff is assembled from the same face
fluxes whose average defines the tensor, so mean(B) vanishes to machine
precision.  Flux correctors phi_kij = d_k f_ij - d_i f_kj come from
torus Poisson solves Delta f_ij = b_ij; their skew symmetry in (k, i) is
exact by construction, while the reconstruction sum_k d_k phi_kij = b_ij
holds up to a stencil commutator of order h^2 for smooth fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CompatibilityError, SolverFailure
from .grid import (
    FluxStencil,
    Grid,
    GridFunction,
    load_gridfunction,
    mean,
    pcg,
    save_gridfunction,
    solve_periodic_elliptic,
)

DEFAULT_RESOLUTION = {1: 256, 2: 128}


@dataclass(frozen=True)
class CellProblem:
    """Tabulated coefficient on a periodic grid with frozen slow arguments."""

    grid: Grid
    coefficient: GridFunction
    frozen: tuple = ()
    tol: float = 1e-10

    def __post_init__(self):
        if not self.grid.periodic:
            raise ValueError("cell problems live on periodic grids")
        if self.coefficient.component_shape != (self.grid.d,) * 2:
            raise ValueError("coefficient must be a matrix GridFunction")

    @classmethod
    def from_sampler(cls, sampler, d: int, resolution: int | None = None,
                     frozen: tuple = (), tol: float = 1e-10) -> "CellProblem":
        """Tabulate y -> A(y) (d x d) at the nodes of a fresh torus grid."""
        n = resolution or DEFAULT_RESOLUTION[d]
        grid = Grid.torus(d, n)
        pts = grid.nodes().reshape(-1, d)
        vals = np.asarray(sampler(pts), dtype=float).reshape(grid.node_shape + (d, d))
        return cls(grid=grid, coefficient=GridFunction(grid, vals), frozen=frozen, tol=tol)


@dataclass(frozen=True)
class CorrectorSet:
    """Zero-mean correctors chi_1..chi_d stored as one vector field."""

    problem: CellProblem
    chi: GridFunction  # vector components chi_j
    iterations: tuple[int, ...]
    energy: float  # max_j mean(|grad chi_j|^2 + chi_j^2), recorded constant

    def component(self, j: int) -> np.ndarray:
        return self.chi.values[..., j]


@dataclass(frozen=True)
class EffectiveTensor:
    tensor: np.ndarray
    mu: float
    spectrum: tuple[float, float]

    def __post_init__(self):
        asym = np.max(np.abs(self.tensor - self.tensor.T))
        if asym > 1e-8 * max(1.0, np.max(np.abs(self.tensor))):
            raise SolverFailure(f"effective tensor asymmetric by {asym:g}; refine the cell grid")


@dataclass(frozen=True)
class FluxData:
    """Flux matrix B, potentials f_ij, and correctors phi_kij with residual report."""

    B: GridFunction  # matrix components b_ij
    potentials: np.ndarray  # (d, d, *nodes)
    phi: np.ndarray  # (d, d, d, *nodes), phi[k, i, j]
    residuals: dict = field(compare=False)

    def phi_component(self, k: int, i: int, j: int, grid: Grid) -> GridFunction:
        return GridFunction(grid, self.phi[k, i, j])


def solve_corrector(problem: CellProblem) -> CorrectorSet:
    """Solve the d corrector problems of one cell."""
    grid = problem.grid
    stencil = FluxStencil(problem.coefficient)
    diag = stencil.diagonal()
    comps, iters = [], []
    energy = 0.0
    h = grid.spacing
    for j in range(grid.d):
        rhs = stencil.affine_rhs(j)
        chi, info = pcg(stencil.apply, rhs, diag, tol=problem.tol,
                        project=lambda v: v.__isub__(v.mean()))
        chi -= chi.mean()
        comps.append(chi)
        iters.append(info["iterations"])
        grad_sq = sum(((np.roll(chi, -1, axis=k) - chi) / h[k]) ** 2 for k in range(grid.d))
        energy = max(energy, float(np.mean(grad_sq + chi**2)))
    chi_field = GridFunction(grid, np.stack(comps, axis=-1))
    return CorrectorSet(problem=problem, chi=chi_field, iterations=tuple(iters), energy=energy)


def effective_tensor(problem: CellProblem, correctors: CorrectorSet,
                     mu: float | None = None) -> EffectiveTensor:
    """Mean-flux effective tensor; spectrum checked against [mu, 1/mu] when mu is given."""
    stencil = FluxStencil(problem.coefficient)
    d = problem.grid.d
    cols = [stencil.mean_flux(correctors.component(j), affine_axis=j) for j in range(d)]
    tensor = np.stack(cols, axis=-1)
    eigs = np.linalg.eigvalsh(0.5 * (tensor + tensor.T))
    spectrum = (float(eigs.min()), float(eigs.max()))
    if mu is not None:
        lo, hi = mu * (1 - 1e-8), (1.0 / mu) * (1 + 1e-8)
        if spectrum[0] < lo or spectrum[1] > hi:
            raise SolverFailure(
                f"effective spectrum {spectrum} escapes [{mu:g}, {1/mu:g}]; discretization failure")
    return EffectiveTensor(tensor=tensor, mu=mu if mu is not None else spectrum[0],
                           spectrum=spectrum)


def flux_matrix(problem: CellProblem, correctors: CorrectorSet,
                effective: EffectiveTensor) -> GridFunction:
    """Nodal B = A(I + grad chi) - A_eff, assembled from face fluxes (mean-free)."""
    stencil = FluxStencil(problem.coefficient)
    grid = problem.grid
    d = grid.d
    vals = np.empty(grid.node_shape + (d, d))
    for j in range(d):
        comps = stencil.flux(correctors.component(j), affine_axis=j)
        for i in range(d):
            vals[..., i, j] = comps[i] - effective.tensor[i, j]
    return GridFunction(grid, vals)


def flux_correctors(B: GridFunction, tol: float = 1e-10) -> FluxData:
    """Potentials and skew flux correctors for a mean-free flux matrix."""
    grid = B.grid
    d = grid.d
    h = grid.spacing
    means = mean(B)
    worst = float(np.max(np.abs(means)))
    if worst > max(tol, 1e-8):
        raise CompatibilityError(
            f"flux matrix has nonzero mean {worst:.3e}; not a valid flux decomposition")
    eye = GridFunction.constant(grid, np.eye(d))
    potentials = np.empty((d, d) + grid.node_shape)
    for i in range(d):
        for j in range(d):
            rhs = GridFunction(grid, -(B.values[..., i, j] - B.values[..., i, j].mean()))
            f = solve_periodic_elliptic(eye, rhs, tol=tol)  # -lap f = -b  =>  lap f = b
            potentials[i, j] = f.values

    def dc(arr, axis):
        return (np.roll(arr, -1, axis=axis) - np.roll(arr, 1, axis=axis)) / (2 * h[axis])

    phi = np.zeros((d, d, d) + grid.node_shape)
    for k in range(d):
        for i in range(d):
            for j in range(d):
                phi[k, i, j] = dc(potentials[i, j], k) - dc(potentials[k, j], i)

    recon = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            s = sum(dc(phi[k, i, j], k) for k in range(d))
            recon[i, j] = np.sqrt(np.mean((s - B.values[..., i, j]) ** 2))
    residuals = {
        "mean_abs_B": worst,
        "reconstruction_l2": recon,
        "max_reconstruction_l2": float(recon.max()),
        "skew_defect": 0.0,  # exact: phi_kij = -phi_ikj by construction
    }
    return FluxData(B=B, potentials=potentials, phi=phi, residuals=residuals)


def row_divergence_residual(B: GridFunction) -> float:
    """l2 size of sum_i d_i b_ij with the centered nodal divergence (order h^2)."""
    grid = B.grid
    h = grid.spacing
    worst = 0.0
    for j in range(grid.d):
        s = np.zeros(grid.node_shape)
        for i in range(grid.d):
            arr = B.values[..., i, j]
            s += (np.roll(arr, -1, axis=i) - np.roll(arr, 1, axis=i)) / (2 * h[i])
        worst = max(worst, float(np.sqrt(np.mean(s**2))))
    return worst


# ---------------------------------------------------------------------------
# persistence: one binary file per component plus a JSON sidecar


def save_correctors(correctors: CorrectorSet, tensor: EffectiveTensor, stem) -> None:
    save_gridfunction(correctors.chi, f"{stem}.bin")
    sidecar = {
        "frozen": [float(v) for v in correctors.problem.frozen],
        "tol": correctors.problem.tol,
        "resolution": list(correctors.problem.grid.shape),
        "iterations": list(correctors.iterations),
        "energy": correctors.energy,
        "tensor": tensor.tensor.tolist(),
        "spectrum": list(tensor.spectrum),
    }
    with open(f"{stem}.json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)


def load_correctors(stem, coefficient: GridFunction | None = None):
    chi = load_gridfunction(f"{stem}.bin")
    with open(f"{stem}.json") as fh:
        sidecar = json.load(fh)
    return chi, np.asarray(sidecar["tensor"]), sidecar
