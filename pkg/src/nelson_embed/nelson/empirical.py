"""Ensemble estimators of forward, backward and complex derivatives.

Conditional expectations given the past (or future) are replaced by
conditional expectations given ``X_t`` (Markov conditioning) and computed by
Gaussian-kernel regression on the sampled paths.  Large samples are first
aggregated on a regular mesh whose cell width is a small fraction of the
kernel bandwidth; each cell keeps the count, the response sums and the
response cross-products, so every kernel sum (and every sandwich variance)
is computed with cell centres standing in for the samples.

Second-order quantities use a plug-in route: local-polynomial jets of the
current velocity ``v`` and of the score ``grad log p`` (local score
matching) are combined with the closed form of ``D_mu^2 X`` for a
constant diffusion matrix.  Time derivatives of the fields are not
estimated: the plug-in is frozen at the slice time, which is exact for
stationary laws.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from ..errors import MaskedSite, PreconditionError, TooFewSamples
from ..process import PathEnsemble, binned_density, silverman_bandwidth
from .samples import ComplexFieldSample, EstimatorConfig, _check_mu

MIN_BINS = {1: 2048, 2: 160, 3: 40}
MAX_CELLS = 4_000_000
_CHUNK = 4_000_000


# --------------------------------------------------------------------------
# Binned sufficient statistics
# --------------------------------------------------------------------------

@dataclass
class _Cells:
    """Aggregated samples: centres, counts, response sums and cross-products."""

    centers: np.ndarray
    count: np.ndarray
    ysum: np.ndarray | None
    ycross: np.ndarray | None
    total: int


def _mesh(lo, hi, bw, d):
    span = np.where(hi > lo, hi - lo, 1.0)
    bins = np.maximum(np.ceil(8.0 * span / bw).astype(int), MIN_BINS.get(d, 1))
    if d > 3 or np.prod(bins.astype(float)) > MAX_CELLS:
        return None
    return lo - 1e-9 * span, span * (1 + 2e-9) / bins, bins


def _aggregate(xs_iter, lo, hi, bw, q):
    """Accumulate ``(x, y)`` chunks into cells; ``None`` mesh means keep raw samples."""
    d = lo.shape[0]
    mesh = _mesh(lo, hi, bw, d)
    if mesh is None:
        xs, ys = zip(*xs_iter)
        x = np.concatenate(xs)
        y = np.concatenate(ys) if q else None
        cross = np.einsum("ni,nj->nij", y, y) if q else None
        return _Cells(x, np.ones(x.shape[0]), y, cross, x.shape[0])
    origin, width, bins = mesh
    size = int(np.prod(bins))
    count = np.zeros(size)
    ysum = np.zeros((size, q)) if q else None
    ycross = np.zeros((size, q, q)) if q else None
    total = 0
    for x, y in xs_iter:
        idx = np.clip(((x - origin) / width).astype(np.int64), 0, bins - 1)
        flat = np.ravel_multi_index(tuple(idx.T), tuple(bins))
        count += np.bincount(flat, minlength=size)
        total += x.shape[0]
        for i in range(q):
            ysum[:, i] += np.bincount(flat, weights=y[:, i], minlength=size)
            for j in range(i, q):
                ycross[:, i, j] += np.bincount(flat, weights=y[:, i] * y[:, j], minlength=size)
    keep = count > 0
    cells = np.stack(np.unravel_index(np.flatnonzero(keep), tuple(bins)), axis=1)
    centers = origin + (cells + 0.5) * width
    if q:
        ycross = ycross[keep]
        iu = np.triu_indices(q, 1)
        ycross[:, iu[1], iu[0]] = ycross[:, iu[0], iu[1]]
        ysum = ysum[keep]
    return _Cells(centers, count[keep], ysum, ycross, total)


def _slices(ens: PathEnsemble, t_index: int, cfg: EstimatorConfig, reach: int):
    """Slice indices pooled around ``t_index`` such that ``s +- reach`` stays on the grid."""
    n = ens.grid.n_steps
    if not 0 <= t_index <= n:
        raise ValueError(f"t_index {t_index} outside the grid")
    if t_index - reach < 0 or t_index + reach > n:
        raise ValueError(f"t +- {reach} steps leaves the grid [0, {n}]")
    w = cfg.window_steps(ens.dt)
    return np.arange(max(reach, t_index - w), min(n - reach, t_index + w) + 1)


def _pooled_cells(ens, ks, response, bw):
    """Cells of ``(X_s, response(s))`` over slices ``ks``; ``response`` may be None."""
    block = max(1, _CHUNK // max(ens.n_paths * ens.dim, 1))
    sub = ens.paths[:, ks[0]:ks[-1] + 1]
    lo, hi = sub.min(axis=(0, 1)), sub.max(axis=(0, 1))
    q = ens.dim if response is not None else 0

    def chunks():
        for s in range(0, len(ks), block):
            part = ks[s:s + block]
            x = ens.paths[:, part].transpose(1, 0, 2).reshape(-1, ens.dim)
            y = np.concatenate([response(k) for k in part]) if q else None
            yield x, y

    return _aggregate(chunks(), lo, hi, bw, q)


def _kernel(sites, centers, bw):
    z = (sites[:, None, :] - centers[None, :, :]) / bw
    return np.exp(-0.5 * np.einsum("mcd,mcd->mc", z, z))


def _site_chunks(m, c):
    step = max(1, _CHUNK // max(c, 1))
    for s in range(0, m, step):
        yield slice(s, min(m, s + step))


def _resolve_bandwidth(value, samples, label):
    if isinstance(value, str):
        if value != "auto":
            raise ValueError(f"unknown {label} rule {value!r}")
        if samples.shape[0] < 100:
            raise TooFewSamples(f"auto {label} needs at least 100 samples, have {samples.shape[0]}")
        return None
    bw = np.broadcast_to(np.asarray(value, dtype=float), (samples.shape[1],)).copy()
    if np.any(bw <= 0):
        raise ValueError(f"{label} must be positive")
    return bw


def _robust_scale(samples):
    std = samples.std(axis=0, ddof=1)
    q75, q25 = np.percentile(samples, [75, 25], axis=0)
    iqr = (q75 - q25) / 1.349
    return np.where(iqr > 0, np.minimum(std, iqr), std)


def _as_positions(eval_points, d):
    x = np.asarray(eval_points, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if d == 1 else x[None, :]
    if x.shape[1] != d:
        raise PreconditionError(f"eval points need {d} columns")
    return x


def _density_mask(ens, t_index, cfg, cells, sites, bw, weight_sums):
    """Mask sites with low estimated density relative to the slice maximum."""
    _, grid = binned_density(ens.at(t_index), bw)
    norm = cells.total * np.prod(bw) * (2 * np.pi) ** (ens.dim / 2)
    dens = weight_sums / norm
    return ~(dens >= cfg.min_local_mass * grid.max())


# --------------------------------------------------------------------------
# First-order estimators
# --------------------------------------------------------------------------

def _deterministic_quotients(ens, t_index, k):
    n = ens.grid.n_steps
    if t_index - k < 0 or t_index + k > n:
        raise ValueError(f"t +- {k} steps leaves the grid [0, {n}]")
    x = ens.paths[0]
    h = k * ens.dt
    fwd = (x[t_index + k] - x[t_index]) / h
    bwd = (x[t_index] - x[t_index - k]) / h
    return x[t_index], fwd, bwd


def _deterministic_sample(ens, t_index, values, label):
    x = ens.paths[0, t_index]
    pts = np.concatenate([[ens.times[t_index]], x])[None, :]
    vals = np.asarray(values, dtype=complex)[None, :]
    return ComplexFieldSample(pts, vals, np.zeros(1, dtype=bool), "empirical", np.zeros(vals.shape), label)


def nelson_estimate(ens: PathEnsemble, cfg: EstimatorConfig, direction: str, t_index: int,
                    eval_points=None) -> ComplexFieldSample:
    """Kernel estimate of ``D X`` (``direction="forward"``) or ``D_* X`` at ``eval_points``.

    The response is ``(X_{t+h} - X_t)/h`` (forward) or ``(X_t - X_{t-h})/h``
    (backward), regressed on ``X_t`` by Nadaraya-Watson with a Gaussian
    kernel.  Standard errors are the sandwich form
    ``sum w^2 (y - m)^2 / (sum w)^2``; with a pooled time window the
    slices are treated as independent, so those errors are nominal.

    Sites whose kernel density falls below ``min_local_mass`` times the
    slice maximum, or whose effective sample size ``(sum w)^2 / sum w^2`` is
    below ``min_effective_samples``, are masked.

    A deterministic ensemble returns the exact difference quotient at the
    single site ``(t, f(t))``.
    """
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    k = cfg.h_steps(ens.dt)
    h = k * ens.dt
    label = "DX" if direction == "forward" else "D*X"
    if ens.is_deterministic:
        _, fwd, bwd = _deterministic_quotients(ens, t_index, k)
        return _deterministic_sample(ens, t_index, fwd if direction == "forward" else bwd, label)
    d = ens.dim
    x_t = ens.at(t_index)
    bw = _resolve_bandwidth(cfg.bandwidth, x_t, "bandwidth")
    if bw is None:
        bw = silverman_bandwidth(x_t)
    sites = _as_positions(eval_points, d)
    paths = ens.paths
    if direction == "forward":
        n = ens.grid.n_steps
        if t_index + k > n:
            raise ValueError(f"t + {k} steps leaves the grid [0, {n}]")
        w = cfg.window_steps(ens.dt)
        ks = np.arange(max(0, t_index - w), min(n - k, t_index + w) + 1)

        def response(s):
            return (paths[:, s + k] - paths[:, s]) / h
    else:
        if t_index - k < 0:
            raise ValueError(f"t - {k} steps leaves the grid")
        w = cfg.window_steps(ens.dt)
        ks = np.arange(max(k, t_index - w), min(ens.grid.n_steps, t_index + w) + 1)

        def response(s):
            return (paths[:, s] - paths[:, s - k]) / h

    cells = _pooled_cells(ens, ks, response, bw)
    m = sites.shape[0]
    values = np.zeros((m, d))
    stderr = np.zeros((m, d))
    sw = np.zeros(m)
    neff = np.zeros(m)
    for sl in _site_chunks(m, cells.centers.shape[0]):
        K = _kernel(sites[sl], cells.centers, bw)
        wn = K * cells.count
        s0 = wn.sum(axis=1)
        s2 = (K * K * cells.count).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = (K @ cells.ysum) / s0[:, None]
            for j in range(d):
                q = K * K
                resid = q @ cells.ycross[:, j, j] - 2 * mean[:, j] * (q @ cells.ysum[:, j]) + mean[:, j] ** 2 * s2
                stderr[sl, j] = np.sqrt(np.maximum(resid, 0.0)) / s0
            neff[sl] = s0 ** 2 / s2
        values[sl] = mean
        sw[sl] = s0
    mask = _density_mask(ens, t_index, cfg, cells, sites, bw, sw)
    mask |= ~(neff >= cfg.min_effective_samples) | ~np.all(np.isfinite(values), axis=1)
    if np.all(mask):
        raise MaskedSite("every evaluation point was masked")
    values[mask] = np.nan
    stderr[mask] = np.nan
    pts = np.column_stack([np.full(m, ens.times[t_index]), sites])
    return ComplexFieldSample(pts, values, mask, "empirical", stderr, label)


def dmu_empirical(ens: PathEnsemble, cfg: EstimatorConfig, mu: int, t_index: int, eval_points=None) -> ComplexFieldSample:
    """``D_mu X = (D + D_*)/2 + i mu (D - D_*)/2`` from the two kernel estimates."""
    _check_mu(mu)
    fwd = nelson_estimate(ens, cfg, "forward", t_index, eval_points)
    bwd = nelson_estimate(ens, cfg, "backward", t_index, eval_points)
    mask = fwd.mask | bwd.mask
    vals = 0.5 * (fwd.real + bwd.real) + 0.5j * mu * (fwd.real - bwd.real)
    vals[mask] = np.nan
    se = 0.5 * np.sqrt(2 * (fwd.stderr ** 2 + bwd.stderr ** 2))
    return ComplexFieldSample(fwd.points, vals, mask, "empirical", se, f"D_{mu:+d} X")


def diffusion_matrix_estimate(ens: PathEnsemble, ks) -> np.ndarray:
    """Quadratic-variation estimate of ``a = sigma sigma^T`` from one-step increments."""
    ks = np.asarray(ks)
    ks = ks[ks < ens.grid.n_steps]
    if ks.size == 0:
        raise ValueError("no increments available")
    d = ens.dim
    acc = np.zeros((d, d))
    for k in ks:
        dx = ens.paths[:, k + 1] - ens.paths[:, k]
        acc += dx.T @ dx
    return acc / (ens.n_paths * ks.size * ens.dt)


# --------------------------------------------------------------------------
# Second-order plug-in
# --------------------------------------------------------------------------

def _exponents(d, degree):
    out = [tuple([0] * d)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(d), deg):
            e = [0] * d
            for c in combo:
                e[c] += 1
            out.append(tuple(e))
    return np.array(out, dtype=int)


def _monomials(z, exps):
    out = np.ones((z.shape[0], exps.shape[0]))
    for j, e in enumerate(exps):
        for k, p in enumerate(e):
            if p:
                out[:, j] *= z[:, k] ** p
    return out


def _monomial_derivative(z, exps, k):
    out = np.zeros((z.shape[0], exps.shape[0]))
    for j, e in enumerate(exps):
        if e[k] == 0:
            continue
        col = np.full(z.shape[0], float(e[k]))
        for i, p in enumerate(e):
            power = p - 1 if i == k else p
            if power:
                col *= z[:, i] ** power
        out[:, j] = col
    return out


class _Jets:
    """Index helpers turning polynomial coefficients into value, gradient and Hessian."""

    def __init__(self, d, exps):
        self.d = d
        self.p = exps.shape[0]
        index = {tuple(e): j for j, e in enumerate(exps)}
        self.grad = [index.get(tuple(np.eye(d, dtype=int)[k])) for k in range(d)]
        self.hess = [[index.get(tuple(np.eye(d, dtype=int)[j] + np.eye(d, dtype=int)[k])) for k in range(d)]
                     for j in range(d)]

    def split(self, coef):
        d = self.d
        val = coef[0]
        grad = np.array([coef[j] if j is not None else 0.0 for j in self.grad])
        hess = np.zeros((d, d), dtype=coef.dtype)
        for j in range(d):
            for k in range(d):
                idx = self.hess[j][k]
                if idx is not None:
                    hess[j, k] = coef[idx] * (2.0 if j == k else 1.0)
        return val, grad, hess


def _acceleration(params, jets, a, mu):
    """``D_mu^2 X`` from stacked coefficients of v (first half) and the score (second half)."""
    d, p = jets.d, jets.p
    vc = params[:d * p].reshape(d, p)
    sc = params[d * p:].reshape(d, p)
    v = [jets.split(vc[k]) for k in range(d)]
    s = [jets.split(sc[k]) for k in range(d)]
    sval = np.array([x[0] for x in s])
    sgrad = np.array([x[1] for x in s])
    shess = np.array([x[2] for x in s])
    uval = 0.5 * a @ sval
    ugrad = 0.5 * np.einsum("kj,jl->kl", a, sgrad)
    uhess = 0.5 * np.einsum("kj,jlm->klm", a, shess)
    vval = np.array([x[0] for x in v])
    vgrad = np.array([x[1] for x in v])
    vhess = np.array([x[2] for x in v])
    re = vgrad @ vval - ugrad @ uval - 0.5 * np.einsum("jl,kjl->k", a, uhess)
    im = mu * (ugrad @ vval + vgrad @ uval + 0.5 * np.einsum("jl,kjl->k", a, vhess))
    return np.concatenate([re, im])


def _fit_site(x0, cells_v, cells_s, bw, exps, jets, a, mu, min_eff):
    """Local-polynomial and score-matching fits at one site; returns (value, se) or None."""
    d, p = jets.d, jets.p
    zv = cells_v.centers - x0
    wv = np.exp(-0.5 * np.sum((zv / bw) ** 2, axis=1))
    keep = wv > 1e-14
    zv, wv = zv[keep], wv[keep]
    nv = cells_v.count[keep]
    phi = _monomials(zv, exps)
    wn = wv * nv
    if wn.sum() ** 2 / np.sum(wv * wv * nv) < min_eff:
        return None
    A = (phi * wn[:, None]).T @ phi
    rhs = phi.T @ (wv[:, None] * cells_v.ysum[keep])
    try:
        beta = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        return None
    fit = phi @ beta
    # sandwich meat: sum w^2 phi phi^T (y - f)(y - f)^T per cell, aggregated exactly
    ys = cells_v.ysum[keep]
    yc = cells_v.ycross[keep]
    r = yc - np.einsum("ci,cj->cij", ys, fit) - np.einsum("ci,cj->cij", fit, ys) \
        + nv[:, None, None] * np.einsum("ci,cj->cij", fit, fit)
    w2phi = phi * wv[:, None]
    meat_v = np.einsum("cp,cq,cij->ipjq", w2phi, w2phi, r).reshape(d * p, d * p)
    Ainv = np.linalg.inv(A)
    bread_v = np.kron(np.eye(d), Ainv)
    cov_v = bread_v @ meat_v @ bread_v.T

    zs = cells_s.centers - x0
    ws = np.exp(-0.5 * np.sum((zs / bw) ** 2, axis=1))
    keep = ws > 1e-14
    zs, ws, ns = zs[keep], ws[keep], cells_s.count[keep]
    phs = _monomials(zs, exps)
    As = (phs * (ws * ns)[:, None]).T @ phs
    try:
        As_inv = np.linalg.inv(As)
    except np.linalg.LinAlgError:
        return None
    theta = np.zeros((d, p))
    psi = np.zeros((zs.shape[0], d * p))
    for k in range(d):
        dphi = _monomial_derivative(zs, exps, k)
        dw = -zs[:, k] / bw[k] ** 2 * ws
        g = ws[:, None] * dphi + dw[:, None] * phs
        theta[k] = -As_inv @ (g.T @ ns)
        psi[:, k * p:(k + 1) * p] = ws[:, None] * phs * (phs @ theta[k])[:, None] + g
    meat_s = (psi * ns[:, None]).T @ psi
    bread_s = np.kron(np.eye(d), As_inv)
    cov_s = bread_s @ meat_s @ bread_s.T

    params = np.concatenate([beta.T.ravel(), theta.ravel()])
    out = _acceleration(params, jets, a, mu)
    cov = np.zeros((2 * d * p, 2 * d * p))
    cov[:d * p, :d * p] = cov_v
    cov[d * p:, d * p:] = cov_s
    step = 1e-6 * np.maximum(1.0, np.abs(params))
    J = np.empty((out.size, params.size))
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = step[i]
        J[:, i] = (_acceleration(params + e, jets, a, mu) - _acceleration(params - e, jets, a, mu)) / (2 * step[i])
    var = np.einsum("oi,ij,oj->o", J, cov, J)
    value = out[:d] + 1j * out[d:]
    se = np.sqrt(np.maximum(var[:d], 0) + np.maximum(var[d:], 0))
    return value, se


def _nested_deterministic(ens, t_index, k, mu):
    n = ens.grid.n_steps
    if t_index - 2 * k < 0 or t_index + 2 * k > n:
        raise ValueError(f"t +- {2 * k} steps leaves the grid [0, {n}]")
    x = ens.paths[0]
    h = k * ens.dt
    c = t_index
    mixed = (x[c + k] - 2 * x[c] + x[c - k]) / h ** 2
    fwd2 = (x[c + 2 * k] - 2 * x[c + k] + x[c]) / h ** 2
    bwd2 = (x[c] - 2 * x[c - k] + x[c - 2 * k]) / h ** 2
    return mixed + 0.5j * mu * (fwd2 - bwd2)


def second_derivative_empirical(ens: PathEnsemble, cfg: EstimatorConfig, mu: int, t_index: int,
                                eval_points=None) -> ComplexFieldSample:
    """Plug-in estimate of ``D_mu^2 X`` at ``eval_points``.

    With ``v`` the current velocity, ``u = (1/2) a grad log p`` the osmotic
    velocity and ``a`` constant,

    ``Re = (grad v) v - (grad u) u - (1/2) a : Hess u``
    ``Im = mu [(grad u) v + (grad v) u + (1/2) a : Hess v]``.

    ``v`` and its derivatives come from a local polynomial fit of the
    symmetric increments ``(X_{s+h} - X_{s-h}) / 2h`` on ``X_s``; the score
    from local score matching, which is exact for polynomial scores; ``a``
    from quadratic variation.  Slices within ``time_window`` of the target
    are pooled and time derivatives are neglected.  Standard errors come
    from sandwich covariances of both fits propagated to first order.

    A deterministic ensemble gets the nested difference quotients
    ``(D D_* + D_* D)/2 + i mu (D^2 - D_*^2)/2``.
    """
    _check_mu(mu)
    k = cfg.h_steps(ens.dt)
    if ens.is_deterministic:
        return _deterministic_sample(ens, t_index, _nested_deterministic(ens, t_index, k, mu), f"D_{mu:+d}^2 X")
    d = ens.dim
    x_t = ens.at(t_index)
    bw = _resolve_bandwidth(cfg.derivative_bandwidth, x_t, "derivative_bandwidth")
    if bw is None:
        if x_t.shape[0] < 100:
            raise TooFewSamples("auto derivative bandwidth needs at least 100 samples")
        bw = 1.5 * _robust_scale(x_t)
    mbw = _resolve_bandwidth(cfg.bandwidth, x_t, "bandwidth")
    if mbw is None:
        mbw = silverman_bandwidth(x_t)
    sites = _as_positions(eval_points, d)
    ks = _slices(ens, t_index, cfg, k)
    h = k * ens.dt
    paths = ens.paths

    def symmetric(s):
        return (paths[:, s + k] - paths[:, s - k]) / (2 * h)

    cells_v = _pooled_cells(ens, ks, symmetric, bw)
    cells_s = _Cells(cells_v.centers, cells_v.count, None, None, cells_v.total)
    a = diffusion_matrix_estimate(ens, np.arange(ks[0] - k, ks[-1] + k))
    exps = _exponents(d, cfg.degree)
    jets = _Jets(d, exps)

    m = sites.shape[0]
    values = np.full((m, d), np.nan + 0j)
    stderr = np.full((m, d), np.nan)
    mask = np.zeros(m, dtype=bool)
    dens_cells = _pooled_cells(ens, ks, None, mbw)
    sums = np.concatenate([(_kernel(sites[sl], dens_cells.centers, mbw) * dens_cells.count).sum(axis=1)
                           for sl in _site_chunks(m, dens_cells.centers.shape[0])])
    mask |= _density_mask(ens, t_index, cfg, dens_cells, sites, mbw, sums)
    for i in range(m):
        if mask[i]:
            continue
        fit = _fit_site(sites[i], cells_v, cells_s, bw, exps, jets, a, mu, cfg.min_effective_samples)
        if fit is None or not np.all(np.isfinite(fit[0])):
            mask[i] = True
            continue
        values[i], stderr[i] = fit
    if np.all(mask):
        raise MaskedSite("every evaluation point was masked")
    pts = np.column_stack([np.full(m, ens.times[t_index]), sites])
    return ComplexFieldSample(pts, values, mask, "empirical", stderr, f"D_{mu:+d}^2 X")


# --------------------------------------------------------------------------
# Nested cross-check
# --------------------------------------------------------------------------

def _nw_line(samples, response, grid, bw):
    """Nadaraya-Watson curve of ``response`` on ``samples`` (1-D) evaluated on ``grid``."""
    lo, hi = samples.min(), samples.max()
    cells = _aggregate(iter([(samples[:, None], response[:, None])]), np.array([lo]), np.array([hi]), bw, 1)
    K = _kernel(grid[:, None], cells.centers, bw)
    s0 = K @ cells.count
    s1 = K @ cells.ysum[:, 0]
    s2 = (K * K) @ cells.count
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s1 / s0
        var = ((K * K) @ cells.ycross[:, 0, 0] - 2 * mean * ((K * K) @ cells.ysum[:, 0]) + mean ** 2 * s2) / s0 ** 2
    return mean, np.sqrt(np.maximum(var, 0.0))


def _local_poly_value(cells, x0, bw, exps):
    z = cells.centers - x0
    w = np.exp(-0.5 * np.sum((z / bw) ** 2, axis=1)) * cells.count
    phi = _monomials(z, exps)
    A = (phi * w[:, None]).T @ phi
    coef = np.linalg.lstsq(A, phi.T @ (cells.ysum[:, 0] * w / cells.count), rcond=None)[0]
    return coef[0]


def nested_second_derivative(ens: PathEnsemble, cfg: EstimatorConfig, mu: int, t_index: int,
                             eval_points) -> ComplexFieldSample:
    """Cross-check of ``D_mu^2 X`` by nested conditional expectations (d = 1).

    ``b`` and ``b_*`` are tabulated once by local-polynomial regression at
    the derivative bandwidth, pooled over ``time_window`` and frozen in time; ``D b``, ``D_* b``, ``D b_*`` and
    ``D_* b_*`` are kernel regressions of the increments of those tables
    along the paths.  The variance grows like ``1/h``, so this is meant for a
    handful of sites only.  Standard errors ignore the first stage.
    """
    _check_mu(mu)
    if ens.dim != 1:
        raise PreconditionError("the nested estimator is one-dimensional")
    k = cfg.h_steps(ens.dt)
    if ens.is_deterministic:
        return _deterministic_sample(ens, t_index, _nested_deterministic(ens, t_index, k, mu), "nested D^2 X")
    n = ens.grid.n_steps
    if t_index - 2 * k < 0 or t_index + 2 * k > n:
        raise ValueError(f"t +- {2 * k} steps leaves the grid [0, {n}]")
    h = k * ens.dt
    X = ens.paths[:, :, 0]
    x_t = X[:, t_index]
    bw = _resolve_bandwidth(cfg.bandwidth, x_t[:, None], "bandwidth")
    bw = silverman_bandwidth(x_t[:, None]) if bw is None else bw
    dbw = _resolve_bandwidth(cfg.derivative_bandwidth, x_t[:, None], "derivative_bandwidth")
    dbw = 1.5 * _robust_scale(x_t[:, None]) if dbw is None else dbw
    lo, hi = np.percentile(X[:, t_index - 2 * k:t_index + 2 * k + 1], [0, 100])
    table = np.linspace(lo, hi, 512)
    ks = _slices(ens, t_index, cfg, k)
    exps = _exponents(1, cfg.degree)

    def tabulate(forward):
        def response(s):
            return (X[:, s + k] - X[:, s]) / h if forward else (X[:, s] - X[:, s - k]) / h
        cells = _pooled_cells(ens, ks, lambda s: response(s)[:, None], dbw)
        curve = np.array([_local_poly_value(cells, x0, dbw, exps) for x0 in table])
        return lambda x: np.interp(x, table, curve)

    b, bs = tabulate(True), tabulate(False)
    c = t_index
    sites = _as_positions(eval_points, 1)[:, 0]
    D_bs, se1 = _nw_line(x_t, (bs(X[:, c + k]) - bs(x_t)) / h, sites, bw)
    Ds_b, se2 = _nw_line(x_t, (b(x_t) - b(X[:, c - k])) / h, sites, bw)
    D_b, se3 = _nw_line(x_t, (b(X[:, c + k]) - b(x_t)) / h, sites, bw)
    Ds_bs, se4 = _nw_line(x_t, (bs(x_t) - bs(X[:, c - k])) / h, sites, bw)
    values = 0.5 * (D_bs + Ds_b) + 0.5j * mu * (D_b - Ds_bs)
    se = 0.5 * np.sqrt(se1 ** 2 + se2 ** 2 + se3 ** 2 + se4 ** 2)
    mask = ~np.isfinite(values)
    values = np.where(mask, np.nan, values)
    pts = np.column_stack([np.full(sites.shape[0], ens.times[t_index]), sites])
    return ComplexFieldSample(pts, values[:, None], mask, "empirical", se[:, None], "nested D^2 X")
