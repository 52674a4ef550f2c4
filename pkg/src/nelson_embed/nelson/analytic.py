"""Closed-form forward, backward and complex derivatives of diffusions.

For a diffusion with drift ``b``, diffusion matrix ``a = sigma sigma^T`` and
density ``p``::

    D X   = b
    D_* X = b - (1/p) d_j(a_kj p)
    D_mu X = (D + D_*)/2 + i mu (D - D_*)/2

and for a smooth ``f(t, x)``::

    D_mu f(t, X_t) = d_t f + D_mu X . grad f + (i mu / 2) a_jk d_jk f

All quantities are built symbolically and evaluated at sites.  A
deterministic ensemble (a function of time embedded as a process) is
handled as the degenerate case ``a = 0`` with ``D = D_* = f'``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import MaskedSite, MissingDensity, PreconditionError
from ..fields import FieldExpr, evaluate, spatial_vars
from ..process import DiffusionModel, PathEnsemble
from .samples import ComplexFieldSample, _check_mu

DENSITY_FLOOR = 1e-12


def _xvars(d):
    return ("t",) + spatial_vars(d)


@dataclass(frozen=True, eq=False)
class Kinematics:
    """Symbolic forward/backward drifts of a target, over ``(t, x1..xd)``."""

    dim: int
    forward: tuple
    backward: tuple
    a: tuple
    density: FieldExpr | None
    source: tuple | None = None

    @property
    def deterministic(self) -> bool:
        return self.source is not None

    def current(self):
        return tuple((b + bs) * 0.5 for b, bs in zip(self.forward, self.backward))

    def osmotic(self):
        return tuple((b - bs) * 0.5 for b, bs in zip(self.forward, self.backward))

    def dmu(self, mu: int = 1):
        _check_mu(mu)
        return tuple(v + u * (1j * mu) for v, u in zip(self.current(), self.osmotic()))

    def resolve(self, sites):
        """Split sites into ``(t, x, mask)``; deterministic targets take ``x = f(t)``."""
        sites = np.atleast_2d(np.asarray(sites, dtype=float))
        t = sites[:, 0]
        d = self.dim
        if self.deterministic:
            x = np.stack([np.broadcast_to(evaluate(f, {"t": t}), t.shape).real for f in self.source], axis=1)
            return t, x, np.zeros(t.shape, dtype=bool)
        if sites.shape[1] != d + 1:
            raise PreconditionError(f"sites need {d + 1} columns (t, x1..x{d})")
        x = sites[:, 1:]
        p = _evaluate(self.density, t, x).real
        mask = ~(p > DENSITY_FLOOR * np.max(p)) if np.max(p) > 0 else np.ones(t.shape, dtype=bool)
        if np.all(mask):
            raise MaskedSite("every site lies where the density vanishes")
        return t, x, mask


def _evaluate(f, t, x) -> np.ndarray:
    if not isinstance(f, FieldExpr):
        return np.full(t.shape, complex(f))
    env = {"t": t}
    env.update({name: x[:, k] for k, name in enumerate(spatial_vars(x.shape[1]))})
    return np.broadcast_to(evaluate(f, env), t.shape)


def kinematics(target) -> Kinematics:
    """Build the symbolic drifts of a diffusion model or a deterministic ensemble."""
    if isinstance(target, PathEnsemble):
        if not target.is_deterministic or target.source is None:
            raise PreconditionError("the analytic backend needs a model or a deterministic ensemble")
        d = target.dim
        deriv = tuple(f.diff("t").with_variables(_xvars(d)) if "t" in f.variables
                      else FieldExpr.constant(0.0, _xvars(d)) for f in target.source)
        zero = tuple(tuple(0.0 for _ in range(d)) for _ in range(d))
        return Kinematics(d, deriv, deriv, zero, None, tuple(target.source))
    if not isinstance(target, DiffusionModel):
        raise TypeError(f"unsupported target {type(target).__name__}")
    if target.density is None:
        raise MissingDensity(f"model {target.name!r} has no density")
    if not target.symbolic:
        raise MissingDensity(f"model {target.name!r} needs a symbolic density and drift for the analytic backend")
    d = target.dim
    xs = spatial_vars(d)
    p = target.density.with_variables(_xvars(d))
    a = target.spec.diffusion_matrix()
    forward = tuple(b.with_variables(_xvars(d)) for b in target.spec.drift)
    backward = []
    for k in range(d):
        div = 0
        for j in range(d):
            if isinstance(a[k][j], FieldExpr):
                term = (a[k][j].with_variables(_xvars(d)) * p).diff(xs[j])
            elif a[k][j] == 0:
                continue
            else:
                term = p.diff(xs[j]) * a[k][j]
            div = term + div
        backward.append(forward[k] - div / p if isinstance(div, FieldExpr) else forward[k])
    a = tuple(tuple(e.with_variables(_xvars(d)) if isinstance(e, FieldExpr) else float(e) for e in row) for row in a)
    return Kinematics(d, forward, tuple(backward), a, p)


def _as_tuple(f):
    return tuple(f) if isinstance(f, (list, tuple)) else (f,)


def _generator(kin: Kinematics, f: FieldExpr, drift, coef) -> FieldExpr:
    """``d_t f + drift . grad f + coef * a_jk d_jk f`` as a symbolic field."""
    d = kin.dim
    f = f.with_variables(_xvars(d)) if isinstance(f, FieldExpr) else FieldExpr.constant(f, _xvars(d))
    xs = spatial_vars(d)
    out = f.diff("t")
    grads = [f.diff(x) for x in xs]
    for k in range(d):
        out = out + drift[k] * grads[k]
    if coef != 0:
        for j in range(d):
            for k in range(d):
                ajk = kin.a[j][k]
                if isinstance(ajk, FieldExpr) or ajk != 0:
                    out = out + grads[j].diff(xs[k]) * ajk * coef
    return out


def _sample(kin, exprs, sites, label) -> ComplexFieldSample:
    t, x, mask = kin.resolve(sites)
    values = np.full((t.shape[0], len(exprs)), np.nan + 0j)
    keep = ~mask
    for m, e in enumerate(exprs):
        values[keep, m] = _evaluate(e, t[keep], x[keep])
    return ComplexFieldSample(np.column_stack([t, x]), values, mask, "analytic", None, label)


def forward_backward_analytic(target, sites):
    """Forward ``D X`` and backward ``D_* X`` fields at sites, as a pair of samples."""
    kin = kinematics(target)
    return _sample(kin, kin.forward, sites, "DX"), _sample(kin, kin.backward, sites, "D*X")


def dmu_analytic(target, mu: int = 1, sites=None) -> ComplexFieldSample:
    kin = kinematics(target)
    return _sample(kin, kin.dmu(mu), sites, f"D_{mu:+d} X")


def transport(target, f, mu: int = 1, sites=None) -> ComplexFieldSample:
    """``D_mu f(t, X_t)`` for a (possibly complex, possibly vector) field ``f``."""
    _check_mu(mu)
    kin = kinematics(target)
    g = kin.dmu(mu)
    exprs = tuple(_generator(kin, fk, g, 0.5j * mu) for fk in _as_tuple(f))
    return _sample(kin, exprs, sites, f"D_{mu:+d} f")


def apply_forward(target, f, sites) -> ComplexFieldSample:
    """``D f(t, X_t) = d_t f + b . grad f + (1/2) a_jk d_jk f``."""
    kin = kinematics(target)
    return _sample(kin, tuple(_generator(kin, fk, kin.forward, 0.5) for fk in _as_tuple(f)), sites, "D f")


def apply_backward(target, f, sites) -> ComplexFieldSample:
    """``D_* f(t, X_t) = d_t f + b_* . grad f - (1/2) a_jk d_jk f``."""
    kin = kinematics(target)
    return _sample(kin, tuple(_generator(kin, fk, kin.backward, -0.5) for fk in _as_tuple(f)), sites, "D* f")


def second_derivative_exprs(kin: Kinematics, mu: int = 1):
    g = kin.dmu(mu)
    return tuple(_generator(kin, gk, g, 0.5j * mu) for gk in g)


def second_derivative_analytic(target, mu: int = 1, sites=None) -> ComplexFieldSample:
    """``D_mu^2 X`` as the transport of the field ``D_mu X``.

    The real part is Nelson's mean acceleration ``(D D_* + D_* D) X / 2`` and
    the imaginary part ``mu (D^2 - D_*^2) X / 2``.
    """
    _check_mu(mu)
    kin = kinematics(target)
    return _sample(kin, second_derivative_exprs(kin, mu), sites, f"D_{mu:+d}^2 X")


def second_derivative_composed(target, mu: int = 1, sites=None) -> ComplexFieldSample:
    """``(D D_* + D_* D)/2 + i mu (D^2 - D_*^2)/2`` applied to X, composing first-order operators."""
    _check_mu(mu)
    kin = kinematics(target)
    exprs = []
    for b, bs in zip(kin.forward, kin.backward):
        dds = _generator(kin, bs, kin.forward, 0.5)
        dsd = _generator(kin, b, kin.backward, -0.5)
        dd = _generator(kin, b, kin.forward, 0.5)
        dsds = _generator(kin, bs, kin.backward, -0.5)
        exprs.append((dds + dsd) * 0.5 + (dd - dsds) * (0.5j * mu))
    return _sample(kin, tuple(exprs), sites, "composed D^2 X")
