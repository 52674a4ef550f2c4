"""Diffusion models, Euler-Maruyama path ensembles and density estimates."""

from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import (
    DimensionMismatch,
    DomainError,
    NonFinitePath,
    PreconditionError,
    TooFewSamples,
)
from .fields import FieldExpr, TabulatedField, evaluate, parse_field, spatial_vars

Field = Union[FieldExpr, TabulatedField]

BLOCK_SIZE = 2048
BLOWUP = 1e8
MAGIC = b"NELS1"


# --------------------------------------------------------------------------
# Grids and laws
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    a: float
    b: float
    n_steps: int

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"need a < b, got [{self.a}, {self.b}]")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")

    @property
    def dt(self) -> float:
        return (self.b - self.a) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.a + self.dt * np.arange(self.n_steps + 1)

    def index(self, t: float) -> int:
        k = int(round((t - self.a) / self.dt))
        if not 0 <= k <= self.n_steps or abs(self.a + k * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a grid point")
        return k


@dataclass(frozen=True)
class PointMass:
    x0: tuple[float, ...]


@dataclass(frozen=True)
class Gaussian:
    mean: tuple[float, ...]
    cov: tuple[tuple[float, ...], ...]

    def factor(self) -> np.ndarray:
        cov = np.asarray(self.cov, dtype=float)
        try:
            return np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            w, v = np.linalg.eigh(cov)
            if w.min() < -1e-12 * max(1.0, w.max()):
                raise ValueError("covariance is not positive semidefinite")
            return v * np.sqrt(np.clip(w, 0, None))


@dataclass(frozen=True, eq=False)
class Samples:
    """Empirical initial law.  Path ``i`` of ``N`` starts at a stored sample: the
    ``N`` paths are spread evenly over the samples when ``N`` is smaller, and
    cycle through them otherwise."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


InitialLaw = Union[PointMass, Gaussian, Samples]


def _law_dim(law: InitialLaw) -> int:
    if isinstance(law, PointMass):
        return len(law.x0)
    if isinstance(law, Gaussian):
        return len(law.mean)
    return law.values.shape[1]


# --------------------------------------------------------------------------
# Models
# --------------------------------------------------------------------------

def eval_field(f, t, x: np.ndarray) -> np.ndarray:
    """Evaluate a real field at times ``t`` and positions ``x`` of shape (n, d)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if isinstance(f, TabulatedField):
        return f(x[:, 0])
    if isinstance(f, (int, float)):
        return np.full(x.shape[0], float(f))
    env = {"t": t}
    env.update({name: x[:, k] for k, name in enumerate(spatial_vars(x.shape[1]))})
    out = evaluate(f, env)
    out = np.broadcast_to(out, (x.shape[0],))
    if np.any(out.imag != 0):
        raise DomainError(f"field {f} is not real-valued on real inputs")
    return out.real


@dataclass(frozen=True, eq=False)
class SdeSpec:
    """``dX = b(t, X) dt + sigma(t, X) dW``.

    ``sigma`` is a positive float (constant scalar coefficient) or a d x d
    nested sequence of fields.  ``lipschitz_K`` is declared metadata only.
    """

    dim: int
    drift: tuple
    sigma: object
    initial: InitialLaw
    lipschitz_K: float = 1.0

    def __post_init__(self):
        drift = tuple(self.drift)
        object.__setattr__(self, "drift", drift)
        if len(drift) != self.dim:
            raise DimensionMismatch(f"drift has {len(drift)} components, dim is {self.dim}")
        if _law_dim(self.initial) != self.dim:
            raise DimensionMismatch("initial law dimension differs from dim")
        if self.constant_sigma:
            if self.sigma < 0:
                raise ValueError("sigma must be nonnegative")
        else:
            sig = tuple(tuple(row) for row in self.sigma)
            if len(sig) != self.dim or any(len(row) != self.dim for row in sig):
                raise DimensionMismatch("sigma must be a d x d matrix")
            object.__setattr__(self, "sigma", sig)
        if self.lipschitz_K <= 0:
            raise ValueError("lipschitz_K must be positive")

    @property
    def constant_sigma(self) -> bool:
        return isinstance(self.sigma, (int, float))

    def diffusion_matrix(self):
        """``a = sigma sigma^T`` as a nested list of floats or fields."""
        d = self.dim
        if self.constant_sigma:
            s2 = float(self.sigma) ** 2
            return [[s2 if j == k else 0.0 for j in range(d)] for k in range(d)]
        a = []
        for k in range(d):
            row = []
            for j in range(d):
                total = 0
                for m in range(d):
                    total = self.sigma[k][m] * self.sigma[j][m] + total
                row.append(total)
            a.append(row)
        return a

    def drift_at(self, t, x):
        return np.stack([eval_field(b, t, x) for b in self.drift], axis=1)

    def sigma_at(self, t, x):
        n = x.shape[0]
        return np.stack([np.stack([eval_field(s, t, x) for s in row], axis=1) for row in self.sigma], axis=1).reshape(n, self.dim, self.dim)


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """A diffusion together with what is known about its law.

    ``density`` is an optional field ``p(t, x)``; ``gradient_potential`` an
    optional ``Phi`` with ``b = grad Phi``.  ``window`` bounds the spatial
    region used for quadrature and default sites.
    """

    spec: SdeSpec
    density: Field | None = None
    is_gradient_drift: bool = False
    gradient_potential: Field | None = None
    window: tuple = ((-10.0, 10.0),)
    name: str = "model"
    default_time: float = 0.0
    stationary: bool = False

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def is_constant_sigma(self) -> bool:
        return self.spec.constant_sigma

    @property
    def sigma2(self) -> float:
        if not self.is_constant_sigma:
            raise PreconditionError("model has a state-dependent diffusion coefficient")
        return float(self.spec.sigma) ** 2

    @property
    def symbolic(self) -> bool:
        return isinstance(self.density, FieldExpr) and all(isinstance(b, FieldExpr) for b in self.spec.drift)

    def density_at(self, t, x) -> np.ndarray:
        if self.density is None:
            raise PreconditionError("model has no density")
        return eval_field(self.density, t, x)

    def check_invariants(self, times: Sequence[float] = (), points: int = 2001, tol: float = 1e-6) -> dict:
        """Normalisation of the density and the gradient-drift identity at sampled times."""
        times = tuple(times) or (self.default_time,)
        out = {"normalization_error": 0.0, "gradient_error": 0.0}
        if self.density is not None:
            grid = _window_grid(self.window, points if self.dim == 1 else 301)
            for t in times:
                p = self.density_at(t, grid)
                out["normalization_error"] = max(out["normalization_error"], abs(_integrate(p, self.window, self.dim) - 1))
        if self.is_gradient_drift and isinstance(self.gradient_potential, FieldExpr):
            rng = np.random.default_rng(0)
            lo = np.array([w[0] for w in self.window])
            hi = np.array([w[1] for w in self.window])
            x = lo + (hi - lo) * rng.random((64, self.dim)) * 0.5 + (hi - lo) * 0.25
            for t in times:
                b = self.spec.drift_at(t, x)
                grad = np.stack([eval_field(self.gradient_potential.diff(v), t, x) for v in spatial_vars(self.dim)], axis=1)
                out["gradient_error"] = max(out["gradient_error"], float(np.max(np.abs(b - grad))))
        out["ok"] = out["normalization_error"] <= tol and out["gradient_error"] <= 1e-10
        return out


def _window_grid(window, points):
    axes = [np.linspace(lo, hi, points) for lo, hi in window]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _integrate(values, window, dim):
    n = round(values.size ** (1 / dim))
    vals = values.reshape((n,) * dim)
    for k in range(dim - 1, -1, -1):
        lo, hi = window[k]
        vals = np.trapezoid(vals, dx=(hi - lo) / (n - 1), axis=k)
    return float(vals)


def _xvars(d):
    return ("t",) + spatial_vars(d)


def _f(text, d=1):
    return parse_field(text, _xvars(d), d)


def ornstein_uhlenbeck(theta: float = 1.0, sigma: float = 1.0, dim: int = 1, rotation: float = 0.0) -> DiffusionModel:
    """Stationary OU process ``dX = -theta X dt + sigma dW`` started in its invariant law.

    With ``dim == 2`` and ``rotation = c`` the drift gains the divergence-free
    term ``c (-x2, x1)``; the invariant law stays ``N(0, sigma^2/(2 theta) I)``
    but the drift is no longer a gradient when ``c != 0``.
    """
    if dim != 2 and rotation:
        raise ValueError("rotation needs dim == 2")
    var = sigma ** 2 / (2 * theta)
    xs = spatial_vars(dim)
    drift = [f"-{theta!r}*{x}" for x in xs]
    if rotation:
        drift = [f"-{theta!r}*x1 - {rotation!r}*x2", f"-{theta!r}*x2 + {rotation!r}*x1"]
    sq = " + ".join(f"{x}^2" for x in xs)
    density = _f(f"exp(-({sq})/{2 * var!r} - {dim / 2!r}*log(2*pi*{var!r}))", dim)
    potential = _f(f"-{theta / 2!r}*({sq})", dim)
    spec = SdeSpec(
        dim,
        tuple(_f(b, dim) for b in drift),
        float(sigma),
        Gaussian((0.0,) * dim, tuple(tuple(var if i == j else 0.0 for j in range(dim)) for i in range(dim))),
        lipschitz_K=theta * (1 + abs(rotation)) + sigma,
    )
    half = 10 * math.sqrt(var)
    return DiffusionModel(
        spec,
        density,
        is_gradient_drift=rotation == 0,
        gradient_potential=potential if rotation == 0 else None,
        window=((-half, half),) * dim,
        name="ou-stationary" if not rotation else "ou-rotational",
        stationary=True,
    )


def brownian_motion(sigma: float = 1.0) -> DiffusionModel:
    """Brownian motion from the origin; density ``N(0, sigma^2 t)`` for t > 0."""
    s2 = float(sigma) ** 2
    density = _f(f"exp(-x1^2/(2*{s2!r}*t) - log(2*pi*{s2!r}*t)/2)")
    spec = SdeSpec(1, (_f("0"),), float(sigma), PointMass((0.0,)), lipschitz_K=max(sigma, 1e-12))
    return DiffusionModel(spec, density, True, _f("0"), ((-12.0 * sigma, 12.0 * sigma),), "brownian", default_time=1.0)


def free_gaussian_packet(s0: float = 1.0, sigma2: float = 1.0) -> DiffusionModel:
    """Nelson diffusion of a spreading free Gaussian wave packet.

    The width is ``s(t)^2 = s0^2 + sigma2^2 t^2 / (4 s0^2)``; the drift is the
    sum of the current velocity ``x s'/s`` and the osmotic velocity
    ``-(sigma2/2) x / s^2``.
    """
    c = sigma2 ** 2 / (4 * s0 ** 2)
    s2 = f"({s0 ** 2!r} + {c!r}*t^2)"
    drift = _f(f"x1*({c!r}*t - {sigma2 / 2!r})/{s2}")
    density = _f(f"exp(-x1^2/(2*{s2}) - log(2*pi*{s2})/2)")
    potential = _f(f"x1^2*({c!r}*t - {sigma2 / 2!r})/(2*{s2})")
    spec = SdeSpec(1, (drift,), math.sqrt(sigma2), Gaussian((0.0,), ((s0 ** 2,),)))
    return DiffusionModel(spec, density, True, potential, ((-15.0 * s0, 15.0 * s0),), "free-packet", default_time=0.0)


def excited_oscillator(sigma2: float = 1.0) -> DiffusionModel:
    """Nelson diffusion of the first excited harmonic state; its density vanishes at 0."""
    s2 = float(sigma2)
    density = _f(f"2*x1^2/{s2!r}*exp(-x1^2/{s2!r} - log(pi*{s2!r})/2)")
    drift = _f(f"{s2!r}/x1 - x1")
    spec = SdeSpec(1, (drift,), math.sqrt(s2), Gaussian((0.0,), ((s2 / 2,),)))
    return DiffusionModel(spec, density, True, _f(f"{s2!r}*log(x1^2)/2 - x1^2/2"), ((-8.0, 8.0),), "excited-oscillator",
                          stationary=True)


# --------------------------------------------------------------------------
# Path ensembles
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``paths[i, k, :]`` is path ``i`` at grid time ``t_k``; read-only."""

    grid: TimeGrid
    paths: np.ndarray
    seed: int
    scheme: str = "euler-maruyama"
    source: tuple | None = None
    substeps: int = 1

    def __post_init__(self):
        paths = np.asarray(self.paths, dtype=float)
        if paths.ndim != 3 or paths.shape[1] != self.grid.n_steps + 1:
            raise DimensionMismatch(f"paths must have shape (N, {self.grid.n_steps + 1}, d)")
        if not np.all(np.isfinite(paths)):
            raise DomainError("ensemble contains non-finite entries")
        if paths.flags.writeable:
            paths = paths.copy() if paths.base is not None else paths
            paths.setflags(write=False)
        object.__setattr__(self, "paths", paths)

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def dim(self) -> int:
        return self.paths.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def is_deterministic(self) -> bool:
        return self.scheme == "deterministic"

    def at(self, t_index: int) -> np.ndarray:
        return self.paths[:, t_index, :]


def _path_stream(seed: int, path: int) -> np.random.Generator:
    # path i owns the counter block whose top word is i; steps consume the low words
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, path]))


def _sample_index(paths, n_paths, n_samples):
    # spread paths evenly over the stored samples when there are fewer paths
    if n_paths <= n_samples:
        return ((2 * paths + 1) * n_samples) // (2 * n_paths)
    return paths % n_samples


def _simulate_block(spec: SdeSpec, grid: TimeGrid, seed: int, start: int, stop: int, substeps: int, out: np.ndarray):
    n_total = out.shape[0]
    d = spec.dim
    n_sub = grid.n_steps * substeps
    count = stop - start
    noise = np.empty((count, d + n_sub * d))
    for j, i in enumerate(range(start, stop)):
        noise[j] = _path_stream(seed, i).standard_normal(d + n_sub * d)
    law = spec.initial
    if isinstance(law, PointMass):
        x = np.tile(np.asarray(law.x0, dtype=float), (count, 1))
    elif isinstance(law, Gaussian):
        x = np.asarray(law.mean, dtype=float) + noise[:, :d] @ law.factor().T
    else:
        vals = law.values
        x = vals[_sample_index(np.arange(start, stop), n_total, vals.shape[0])].astype(float)
    steps = noise[:, d:].reshape(count, n_sub, d)
    out[start:stop, 0] = x
    h = grid.dt / substeps
    sq = math.sqrt(h)
    for k in range(grid.n_steps):
        for s in range(substeps):
            m = k * substeps + s
            t = grid.a + m * h
            b = spec.drift_at(t, x)
            if spec.constant_sigma:
                x = x + b * h + float(spec.sigma) * sq * steps[:, m]
            else:
                x = x + b * h + sq * np.einsum("nij,nj->ni", spec.sigma_at(t, x), steps[:, m])
            bad = ~np.isfinite(x) | (np.abs(x) > BLOWUP)
            if np.any(bad):
                row = int(np.argwhere(bad)[0][0])
                raise NonFinitePath(start + row, k + 1, float(x[row, np.argmax(bad[row])]))
        out[start:stop, k + 1] = x


def simulate(spec: SdeSpec, grid: TimeGrid, n_paths: int, seed: int, *, substeps: int = 1, workers: int = 1) -> PathEnsemble:
    """Euler-Maruyama path ensemble.

    Path ``i`` draws its Gaussian increments from a Philox stream keyed by
    ``seed`` with counter block ``i`` (first ``d`` normals for the initial
    draw, then ``d`` per sub-step), so every path is a pure function of
    ``(spec, grid, seed, i)``.  Work is split into fixed blocks of
    ``BLOCK_SIZE`` paths, which makes the output bit-identical for any
    ``workers``.
    """
    if n_paths < 1:
        raise ValueError("need at least one path")
    if not 0 <= int(seed) < 2 ** 64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    if substeps < 1:
        raise ValueError("substeps must be positive")
    out = np.empty((n_paths, grid.n_steps + 1, spec.dim))
    blocks = [(s, min(s + BLOCK_SIZE, n_paths)) for s in range(0, n_paths, BLOCK_SIZE)]
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_simulate_block, spec, grid, int(seed), s, e, substeps, out) for s, e in blocks]
            for fut in futures:
                fut.result()
    else:
        for s, e in blocks:
            _simulate_block(spec, grid, int(seed), s, e, substeps, out)
    return PathEnsemble(grid, out, int(seed), "euler-maruyama", None, substeps)


def embed_deterministic(f, grid: TimeGrid) -> PathEnsemble:
    """The injection of a deterministic function of time as a one-path ensemble."""
    comps = tuple(f) if isinstance(f, (list, tuple)) else (f,)
    for c in comps:
        if not isinstance(c, FieldExpr):
            raise TypeError("expected FieldExpr components")
        if c.free_variables() - {"t"}:
            raise PreconditionError(f"{c} depends on more than t")
    t = grid.times
    cols = []
    for c in comps:
        v = np.broadcast_to(evaluate(c, {"t": t}), t.shape)
        if np.any(v.imag != 0):
            raise DomainError(f"{c} is not real-valued")
        cols.append(v.real)
    paths = np.stack(cols, axis=1)[None, :, :]
    return PathEnsemble(grid, paths, 0, "deterministic", comps)


# --------------------------------------------------------------------------
# Density estimation
# --------------------------------------------------------------------------

def silverman_bandwidth(samples: np.ndarray) -> np.ndarray:
    """Silverman's rule of thumb per dimension with the robust scale min(std, IQR/1.349)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = samples.shape
    std = samples.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    q75, q25 = np.percentile(samples, [75, 25], axis=0)
    iqr = (q75 - q25) / 1.349
    scale = np.where(iqr > 0, np.minimum(std, iqr), std)
    floor = 1e-3 * np.maximum(1.0, np.abs(samples.mean(axis=0)))
    scale = np.where(scale > 0, scale, floor)
    factor = (4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4))
    return np.maximum(factor * scale, floor)


def _as_points(points, d):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None] if d == 1 else pts[None, :]
    if pts.shape[1] != d:
        raise DimensionMismatch(f"evaluation points must have {d} columns")
    return pts


def gaussian_kde(samples: np.ndarray, points: np.ndarray, bandwidth) -> np.ndarray:
    """Product-Gaussian kernel density estimate evaluated at ``points``."""
    samples = np.asarray(samples, dtype=float)
    n, d = samples.shape
    pts = _as_points(points, d)
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,))
    norm = n * np.prod(bw) * (2 * np.pi) ** (d / 2)
    out = np.empty(pts.shape[0])
    chunk = max(1, 4_000_000 // max(n, 1))
    for s in range(0, pts.shape[0], chunk):
        z = (pts[s:s + chunk, None, :] - samples[None, :, :]) / bw
        out[s:s + chunk] = np.exp(-0.5 * np.sum(z * z, axis=2)).sum(axis=1)
    return out / norm


def kde_density(ens: PathEnsemble, t_index: int, eval_points, bandwidth="auto") -> np.ndarray:
    """Gaussian KDE of the ensemble marginal at ``t_index``."""
    x = ens.at(t_index)
    if isinstance(bandwidth, str):
        if bandwidth != "auto":
            raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
        if ens.n_paths < 100:
            raise TooFewSamples(f"auto bandwidth needs at least 100 samples, have {ens.n_paths}")
        bandwidth = silverman_bandwidth(x)
    elif np.any(np.asarray(bandwidth) <= 0):
        raise ValueError("bandwidth must be positive")
    return gaussian_kde(x, eval_points, bandwidth)


def binned_density(samples: np.ndarray, bandwidth, bins: int = 512, pad: float = 4.0):
    """Binned Gaussian KDE on a regular mesh: returns (axes, density array)."""
    samples = np.asarray(samples, dtype=float)
    n, d = samples.shape
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,))
    lo = samples.min(axis=0) - pad * bw
    hi = samples.max(axis=0) + pad * bw
    edges = [np.linspace(lo[k], hi[k], bins + 1) for k in range(d)]
    counts, _ = np.histogramdd(samples, bins=edges)
    width = np.array([(hi[k] - lo[k]) / bins for k in range(d)])
    smooth = ndimage.gaussian_filter(counts, sigma=tuple(bw / width), mode="constant", truncate=5.0)
    dens = smooth / (n * np.prod(width))
    axes = [0.5 * (e[1:] + e[:-1]) for e in edges]
    return axes, dens


# --------------------------------------------------------------------------
# Sampled checks of the regularity conditions
# --------------------------------------------------------------------------

@dataclass
class LambdaReport:
    """Sampled, non-refuting diagnostics; never a membership proof."""

    model: str
    t: float
    sites: int
    max_abs: dict = field(default_factory=dict)
    singular_points: list = field(default_factory=list)

    @property
    def all_finite(self) -> bool:
        return not self.singular_points


def _safe_eval(f, t, x):
    """Vectorised evaluation, falling back to pointwise where the domain fails."""
    try:
        return eval_field(f, t, x), np.zeros(x.shape[0], dtype=bool)
    except DomainError:
        out = np.full(x.shape[0], np.nan)
        bad = np.zeros(x.shape[0], dtype=bool)
        for i in range(x.shape[0]):
            try:
                out[i] = eval_field(f, t, x[i:i + 1])[0]
            except DomainError:
                bad[i] = True
        return out, bad


def lambda_diagnostics(model: DiffusionModel, window=None, samples: int = 401, t: float | None = None,
                       density_floor: float = 1e-12, magnitude_cap: float = 1e8) -> LambdaReport:
    """Sample the drift, the osmotic term ``(1/p) d_j(a_kj p)`` and their derivatives.

    Points where the density is (numerically) zero, or where any quantity is
    non-finite or exceeds ``magnitude_cap``, are listed as singular.
    """
    if model.density is None:
        raise PreconditionError("lambda diagnostics need a density")
    if not model.symbolic:
        raise PreconditionError("lambda diagnostics need a symbolic model")
    t = model.default_time if t is None else t
    window = window or model.window
    d = model.dim
    x = _window_grid(window, samples if d == 1 else max(3, int(round(samples ** (1 / d)))))
    p, bad_p = _safe_eval(model.density, t, x)
    pmax = np.nanmax(np.abs(p))
    flagged = bad_p | ~(p > density_floor * pmax)
    xs = spatial_vars(d)
    a = model.spec.diffusion_matrix()
    quantities = {}
    for k in range(d):
        quantities[f"drift_{k + 1}"] = model.spec.drift[k]
        quantities[f"score_{k + 1}"] = model.density.diff(xs[k]) / model.density
        osm = 0
        for j in range(d):
            osm = (a[k][j] * model.density).diff(xs[j]) + osm if isinstance(a[k][j], FieldExpr) \
                else a[k][j] * model.density.diff(xs[j]) + osm
        quantities[f"osmotic_{k + 1}"] = osm / model.density
    for name in list(quantities):
        if name.startswith("score"):
            continue
        f = quantities[name]
        for j, v in enumerate(xs):
            df = f.diff(v)
            quantities[f"d{v}_{name}"] = df
            for v2 in xs[j:]:
                quantities[f"d{v}d{v2}_{name}"] = df.diff(v2)
    report = LambdaReport(model.name, t, x.shape[0])
    values = {}
    for name, f in quantities.items():
        vals, bad = _safe_eval(f, t, x)
        flagged |= bad | ~np.isfinite(vals) | (np.abs(np.nan_to_num(vals, nan=np.inf)) > magnitude_cap)
        values[name] = vals
    good = ~flagged
    for name, vals in values.items():
        report.max_abs[name] = float(np.max(np.abs(vals[good]))) if np.any(good) else math.nan
    report.singular_points = [tuple(map(float, row)) for row in x[flagged]]
    return report


# --------------------------------------------------------------------------
# Import / export
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<5sqqqddQ")


def write_ensemble(path, ens: PathEnsemble) -> None:
    """Binary container: header (magic, dim, N, n_steps, a, b, seed) then row-major float64."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, ens.dim, ens.n_paths, ens.grid.n_steps, ens.grid.a, ens.grid.b, ens.seed))
        fh.write(np.ascontiguousarray(ens.paths, dtype="<f8").tobytes())


def read_ensemble(path) -> PathEnsemble:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError("truncated ensemble header")
        magic, dim, n, n_steps, a, b, seed = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    expected = n * (n_steps + 1) * dim
    if data.size != expected:
        raise ValueError(f"expected {expected} values, found {data.size}")
    return PathEnsemble(TimeGrid(a, b, n_steps), data.reshape(n, n_steps + 1, dim).astype(float), seed)


def fmt(value: float) -> str:
    """Shortest round-trip float text; used by every CSV writer for byte-stable output."""
    return repr(float(value))


def write_ensemble_csv(path, ens: PathEnsemble) -> None:
    times = ens.times
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "t"] + [f"x{k + 1}" for k in range(ens.dim)])
        for i in range(ens.n_paths):
            for k, t in enumerate(times):
                w.writerow([i, fmt(t)] + [fmt(v) for v in ens.paths[i, k]])
