"""One-dimensional linear Schrodinger equation and its Nelson diffusion.

The equation is ``i s2 dPsi/dt = -(s2^2 / 2) Psi'' + U Psi`` with
``s2 = sigma^2``.  A diffusion with constant ``sigma`` and gradient drift
``b = (R + S)'`` corresponds to ``Psi = exp((R + i S) / s2)``, where
``R = (s2 / 2) log p`` and ``S`` integrates the current velocity
``v = b - R'``; then ``|Psi|^2 = p``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import eigh_tridiagonal, solve_banded

from .errors import DomainError, GridTooCoarse, NodeInDomain, NotInLambdaSigmaG, PreconditionError, TooFewSamples
from .fields import FieldExpr, TabulatedField, evaluate, parse_field
from .process import (
    DiffusionModel,
    PathEnsemble,
    SdeSpec,
    Samples,
    eval_field,
    fmt,
    gaussian_kde,
    silverman_bandwidth,
)

THETA_THRESHOLD = 1e-6


@dataclass(frozen=True)
class SpatialGrid:
    x_min: float
    x_max: float
    m: int

    def __post_init__(self):
        if self.m < 16:
            raise ValueError("a spatial grid needs at least 16 points")
        if not self.x_max > self.x_min:
            raise ValueError("need x_min < x_max")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.m - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.m)

    def refined(self) -> "SpatialGrid":
        return SpatialGrid(self.x_min, self.x_max, 2 * self.m - 1)


@dataclass(frozen=True, eq=False)
class WaveFunction:
    """Complex values of ``Psi`` on a grid at time ``t``."""

    grid: SpatialGrid
    values: np.ndarray
    sigma2: float
    t: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=complex)
        if v.shape != (self.grid.m,):
            raise ValueError(f"expected {self.grid.m} values")
        if not np.all(np.isfinite(v)):
            raise DomainError("wave function has non-finite values")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def norm(self) -> float:
        return float(np.trapezoid(self.density, dx=self.grid.dx))

    def normalized(self) -> "WaveFunction":
        n = self.norm()
        if n <= 0:
            raise DomainError("cannot normalise the zero wave function")
        return WaveFunction(self.grid, self.values / np.sqrt(n), self.sigma2, self.t)

    def theta_mask(self, threshold: float = THETA_THRESHOLD) -> "ThetaMask":
        p = self.density
        return ThetaMask(p >= threshold * p.max(), threshold)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "re", "im", "density"])
            for x, v, p in zip(self.grid.x, self.values, self.density):
                w.writerow([fmt(x), fmt(v.real), fmt(v.imag), fmt(p)])


@dataclass(frozen=True, eq=False)
class ThetaMask:
    """``inside[j]`` is True where the density is at least ``threshold`` times its maximum."""

    inside: np.ndarray
    threshold: float = THETA_THRESHOLD

    @property
    def excluded(self) -> np.ndarray:
        return ~self.inside

    def components(self) -> list[tuple[int, int]]:
        """Maximal runs ``[start, stop)`` of inside points."""
        runs, start = [], None
        for j, flag in enumerate(self.inside):
            if flag and start is None:
                start = j
            elif not flag and start is not None:
                runs.append((start, j))
                start = None
        if start is not None:
            runs.append((start, self.inside.size))
        return runs


def _potential_values(U, x):
    if isinstance(U, str):
        U = parse_field(U, ("t", "x1"))
    if isinstance(U, (int, float)):
        return np.full(x.shape, float(U))
    if U.depends_on("t"):
        raise PreconditionError("time-dependent potentials are not supported")
    out = np.broadcast_to(evaluate(U, {"x1": x, "t": 0.0}), x.shape)
    if np.any(out.imag != 0):
        raise DomainError("potential must be real on the grid")
    return out.real.copy()


def _hamiltonian(U, grid: SpatialGrid, sigma2: float):
    """Diagonal and off-diagonal of ``-(s2^2/2) d^2 + U`` on the interior nodes."""
    x = grid.x[1:-1]
    kin = sigma2 ** 2 / (2 * grid.dx ** 2)
    diag = 2 * kin + _potential_values(U, x)
    off = np.full(x.size - 1, -kin)
    return diag, off


# --------------------------------------------------------------------------
# Eigenstates
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Eigenpair:
    n: int
    energy: float
    state: WaveFunction
    norm_check: float

    def to_dict(self) -> dict:
        return {"n": self.n, "energy": self.energy, "norm_check": self.norm_check}


def _lowest(U, grid, sigma2, k):
    diag, off = _hamiltonian(U, grid, sigma2)
    return eigh_tridiagonal(diag, off, select="i", select_range=(0, k - 1))


def solve_eigenstates(U, grid: SpatialGrid, sigma2: float = 1.0, k: int = 4, refine_tol: float | None = 1e-3):
    """Lowest ``k`` eigenpairs of the central-difference Hamiltonian with Dirichlet ends.

    Each state is real, normalised to one, and signed so that its leftmost
    significant lobe is positive.  Unless ``refine_tol`` is None the spectrum
    is recomputed on the grid with ``dx/2`` and :class:`GridTooCoarse` is
    raised when some eigenvalue moves by more than ``refine_tol`` times
    ``max(1, |E|)``.
    """
    if not 1 <= k <= 10:
        raise ValueError("k must lie in 1..10")
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    energies, vectors = _lowest(U, grid, sigma2, k)
    if refine_tol is not None:
        fine, _ = _lowest(U, grid.refined(), sigma2, k)
        shift = np.abs(fine - energies) / np.maximum(1.0, np.abs(energies))
        if np.any(shift > refine_tol):
            raise GridTooCoarse(f"eigenvalues moved by up to {shift.max():.3g} (relative) under dx -> dx/2")
    out = []
    for n in range(k):
        phi = np.zeros(grid.m)
        phi[1:-1] = vectors[:, n]
        big = np.flatnonzero(np.abs(phi) > 1e-3 * np.abs(phi).max())
        if phi[big[0]] < 0:
            phi = -phi
        psi = WaveFunction(grid, phi, sigma2).normalized()
        out.append(Eigenpair(n, float(energies[n]), psi, psi.norm()))
    return out


def eigenpairs_to_json(pairs, path=None) -> str:
    text = json.dumps([p.to_dict() for p in pairs], indent=2)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


# --------------------------------------------------------------------------
# Time evolution
# --------------------------------------------------------------------------

def evolve(psi0: WaveFunction, U, dt: float, steps: int) -> WaveFunction:
    """Crank-Nicolson steps ``(1 + i dt H / 2 s2) Psi' = (1 - i dt H / 2 s2) Psi``, Dirichlet ends."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if steps == 0:
        return psi0
    if abs(psi0.norm() - 1) > 1e-8:
        raise PreconditionError("initial wave function must be normalised")
    diag, off = _hamiltonian(U, psi0.grid, psi0.sigma2)
    c = 0.5j * dt / psi0.sigma2
    ab = np.zeros((3, diag.size), dtype=complex)
    ab[0, 1:] = c * off
    ab[1] = 1 + c * diag
    ab[2, :-1] = c * off
    psi = psi0.values[1:-1].copy()
    for _ in range(steps):
        rhs = (1 - c * diag) * psi
        rhs[:-1] -= c * off * psi[1:]
        rhs[1:] -= c * off * psi[:-1]
        psi = solve_banded((1, 1), ab, rhs, check_finite=False)
    full = np.zeros(psi0.grid.m, dtype=complex)
    full[1:-1] = psi
    return WaveFunction(psi0.grid, full, psi0.sigma2, psi0.t + steps * dt)


# --------------------------------------------------------------------------
# Wave function <-> diffusion
# --------------------------------------------------------------------------

def _node_splits(psi: WaveFunction, inside):
    """Split ``inside`` where the phase jumps across a near-zero of Psi."""
    v = psi.values
    amp = np.abs(v)
    ratio = v[1:] * np.conj(v[:-1])
    jump = (np.abs(np.angle(ratio)) > np.pi / 2) & (np.minimum(amp[1:], amp[:-1]) < 0.1 * amp.max())
    inside = inside.copy()
    for j in np.flatnonzero(jump):
        # cut at the smaller of the two neighbours
        inside[j if amp[j] <= amp[j + 1] else j + 1] = False
    return inside


def unwrapped_phase(psi: WaveFunction, start: int | None = None) -> np.ndarray:
    """Phase of Psi unwrapped outward from ``start`` (default: the density maximum)."""
    phase = np.angle(psi.values)
    start = int(np.argmax(psi.density)) if start is None else start
    out = np.empty_like(phase)
    out[start:] = np.unwrap(phase[start:])
    out[:start + 1] = np.unwrap(phase[:start + 1][::-1])[::-1]
    return out - out[start]


def nelson_map(psi: WaveFunction, threshold: float = THETA_THRESHOLD, restrict: bool = False,
               initial_samples: int = 100_000):
    """Nelson diffusion of a wave function: ``p = |Psi|^2``, ``b = (R + S)'``.

    ``R = (s2/2) log p`` and ``S = s2 * unwrapped phase``; derivatives are
    central differences on the grid.  The initial law is the set of
    ``initial_samples`` mid-point quantiles of ``p``.  When the support splits
    (a node of Psi inside the domain) :class:`NodeInDomain` is raised,
    unless ``restrict`` is set, in which case the largest component is kept
    (ties go to the rightmost one).

    Returns ``(model, mask)``.
    """
    mask = psi.theta_mask(threshold)
    inside = _node_splits(psi, mask.inside)
    comps = ThetaMask(inside, threshold).components()
    if not comps:
        raise DomainError("the wave function vanishes everywhere")
    if len(comps) > 1:
        x = psi.grid.x
        spans = [(float(x[a]), float(x[b - 1])) for a, b in comps]
        if not restrict:
            raise NodeInDomain(f"Psi vanishes inside the domain; components {spans}", spans)
        sizes = [b - a for a, b in comps]
        best = max(range(len(comps)), key=lambda i: (sizes[i], i))
        keep = np.zeros_like(inside)
        keep[slice(*comps[best])] = True
        inside = keep
    a, b = np.flatnonzero(inside)[[0, -1]]
    if b - a + 1 < 3:
        raise DomainError("the positive-density region is too small")
    s2 = psi.sigma2
    x = psi.grid.x[a:b + 1]
    p = psi.density[a:b + 1]
    p = p / np.trapezoid(p, x)
    R = 0.5 * s2 * np.log(p)
    S = s2 * unwrapped_phase(WaveFunction(SpatialGrid(x[0], x[-1], x.size), psi.values[a:b + 1], s2))
    drift = np.gradient(R + S, x, edge_order=2)
    cdf = np.concatenate([[0.0], cumulative_trapezoid(p, x)])
    cdf /= cdf[-1]
    q = (np.arange(initial_samples) + 0.5) / initial_samples
    init = Samples(np.interp(q, cdf, x)[:, None])
    spec = SdeSpec(1, (TabulatedField(x, drift, "b"),), float(np.sqrt(s2)), init)
    model = DiffusionModel(spec, TabulatedField(x, p, "p"), True, TabulatedField(x, R + S, "R+S"),
                           ((float(x[0]), float(x[-1])),), "nelson-map", default_time=psi.t, stationary=False)
    final = np.zeros(psi.grid.m, dtype=bool)
    final[a:b + 1] = inside[a:b + 1]
    return model, ThetaMask(final, threshold)


def psi_field(model: DiffusionModel) -> FieldExpr:
    """Symbolic ``Psi = exp((R + i S)/s2)`` for a symbolic gradient model, with ``S = Phi - R``."""
    _require_lambda_sigma_g(model)
    if not (isinstance(model.density, FieldExpr) and isinstance(model.gradient_potential, FieldExpr)):
        raise PreconditionError("psi_field needs symbolic density and potential")
    s2 = model.sigma2
    R = model.density.apply("log") * (0.5 * s2)
    S = model.gradient_potential.with_variables(R.variables) - R
    return ((R + S * 1j) / s2).apply("exp")


def _require_lambda_sigma_g(model):
    if not isinstance(model, DiffusionModel):
        raise NotInLambdaSigmaG("expected a diffusion model")
    if model.dim != 1:
        raise NotInLambdaSigmaG("the Schrodinger bridge is one-dimensional")
    if not model.is_constant_sigma:
        raise NotInLambdaSigmaG("diffusion coefficient is not constant")
    if not model.is_gradient_drift:
        raise NotInLambdaSigmaG("drift is not a gradient")
    if model.density is None:
        raise NotInLambdaSigmaG("model has no density")


# --------------------------------------------------------------------------
# Correspondence check
# --------------------------------------------------------------------------

@dataclass
class CorrespondenceReport:
    """Schrodinger residual of ``Psi_X`` on the positive-density region."""

    relative_residual: float
    max_abs_residual: float
    scale: float
    gauge_rate: float
    density_error: float
    masked_count: int
    t: float
    x: np.ndarray = field(repr=False)
    residual: np.ndarray = field(repr=False)
    inside: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "relative_residual": self.relative_residual,
            "max_abs_residual": self.max_abs_residual,
            "scale": self.scale,
            "gauge_rate": self.gauge_rate,
            "density_error": self.density_error,
            "masked_count": self.masked_count,
            "t": self.t,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "re", "im", "masked"])
            for x, r, ok in zip(self.x, self.residual, self.inside):
                w.writerow([fmt(x), fmt(r.real), fmt(r.imag), int(not ok)])


def _log_psi(model, t, x, ref):
    """``(R + i S)/s2`` on the grid with ``S(ref) = 0``."""
    s2 = model.sigma2
    p = eval_field(model.density, t, x[:, None])
    if np.any(p <= 0):
        p = np.where(p > 0, p, np.nan)
    R = 0.5 * s2 * np.log(p)
    u = np.gradient(R, x, edge_order=2)
    v = eval_field(model.spec.drift[0], t, x[:, None]) - u
    S = np.concatenate([[0.0], cumulative_trapezoid(v, x)])
    S -= np.interp(ref, x, S)
    return (R + 1j * S) / s2, p


def correspondence_check(model: DiffusionModel, U, window=None, m: int = 801, t: float | None = None,
                         dt: float = 1e-4, threshold: float = THETA_THRESHOLD) -> CorrespondenceReport:
    """Residual ``i s2 dPsi/dt + (s2^2/2) Psi'' - U Psi`` of ``Psi = exp((R + iS)/s2)``.

    ``S`` integrates ``v = b - R'`` from the density maximum.  Spatial
    derivatives are central differences on an ``m``-point grid over
    ``window`` (a tabulated model without ``window`` uses its own nodes); for
    non-stationary models ``dPsi/dt`` is a central difference
    with step ``dt``.  The time-dependent gauge of ``S`` is fixed by removing
    the density-weighted mean of ``Re(residual / Psi)``.  The relative
    residual divides the largest residual on the positive-density region by
    the largest of ``|U Psi|``, ``|(s2^2/2) Psi''|`` and ``|s2 dPsi/dt|``.
    """
    _require_lambda_sigma_g(model)
    s2 = model.sigma2
    t = model.default_time if t is None else t
    if window is None and isinstance(model.density, TabulatedField):
        # tabulated fields are piecewise linear between nodes: stay on the nodes
        grid = SpatialGrid(float(model.density.x[0]), float(model.density.x[-1]), model.density.x.size)
    else:
        lo, hi = window if window is not None else model.window[0]
        grid = SpatialGrid(lo, hi, m)
    x = grid.x
    p0 = eval_field(model.density, t, x[:, None])
    ref = float(x[np.argmax(p0)])
    logpsi, p = _log_psi(model, t, x, ref)
    inside = np.isfinite(logpsi) & (np.nan_to_num(p) >= threshold * np.nanmax(p))
    psi = np.exp(np.where(inside, logpsi, -np.inf + 0j))
    lap = np.zeros_like(psi)
    lap[1:-1] = (psi[2:] - 2 * psi[1:-1] + psi[:-2]) / grid.dx ** 2
    if model.stationary:
        dpsi = np.zeros_like(psi)
    else:
        lp_plus, _ = _log_psi(model, t + dt, x, ref)
        lp_minus, _ = _log_psi(model, t - dt, x, ref)
        dpsi = (np.exp(lp_plus) - np.exp(lp_minus)) / (2 * dt)
    Uv = _potential_values(U, x)
    # interior points whose stencil stays inside the positive-density region
    ok = inside.copy()
    ok[0] = ok[-1] = False
    ok[1:-1] &= inside[:-2] & inside[2:]
    kinetic = 0.5 * s2 ** 2 * lap
    temporal = 1j * s2 * dpsi
    residual = np.where(ok, temporal + kinetic - Uv * psi, 0)
    weights = np.where(ok, p, 0.0)
    weights = weights / weights.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        local = np.where(ok, residual / psi, 0)
    gauge = float(np.sum(weights * local.real))
    residual = np.where(ok, residual - gauge * psi, 0)
    scale = max(np.max(np.abs(Uv * psi)[ok]), np.max(np.abs(kinetic)[ok]), np.max(np.abs(temporal)[ok]))
    max_abs = float(np.max(np.abs(residual[ok])))
    dens_err = float(np.max(np.abs(np.abs(psi[ok]) ** 2 - p[ok])) / np.max(p[ok]))
    return CorrespondenceReport(max_abs / scale, max_abs, float(scale), gauge, dens_err,
                                int((~ok).sum()), t, x, residual, ok)


def density_match(ens: PathEnsemble, psi: WaveFunction, t_index: int, bandwidth="auto") -> float:
    """L1 distance between the kernel density of the ensemble at ``t_index`` and ``|Psi|^2``."""
    if ens.dim != 1:
        raise PreconditionError("density_match is one-dimensional")
    samples = ens.at(t_index)
    if samples.shape[0] < 100:
        raise TooFewSamples(f"need at least 100 samples, have {samples.shape[0]}")
    bw = silverman_bandwidth(samples) if bandwidth == "auto" else bandwidth
    x = psi.grid.x
    kde = gaussian_kde(samples, x[:, None], bw)
    return float(np.trapezoid(np.abs(kde - psi.density), x))
