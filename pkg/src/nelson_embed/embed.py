"""Stochastic embedding of differential operators, Lagrangian and Newton equations.

An operator acting on curves ``x(t)`` is written either as a sum

    O x = a_0(x, t) + a_1(x, t) dx/dt + ... + a_n(x, t) d^n x/dt^n

or in composed form ``O x = d/dt (a(x, t))``.  Its embedding replaces
``d/dt`` by ``D_mu``; the two writings of the same classical operator embed
to different stochastic operators, and :func:`functoriality_gap` measures
the difference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingDensity, NotAdmissible, OrderUnsupported, PreconditionError
from .fields import FieldExpr, check_admissible, evaluate, parse_field, spatial_vars, velocity_vars
from .nelson.analytic import Kinematics, _evaluate, _generator, kinematics, second_derivative_exprs
from .nelson.empirical import second_derivative_empirical
from .nelson.samples import ComplexFieldSample, EstimatorConfig, _check_mu
from .process import DiffusionModel, PathEnsemble, eval_field


def _xt_vars(d):
    return ("t",) + spatial_vars(d)


def _lift(f, d):
    if isinstance(f, FieldExpr):
        return f.with_variables(_xt_vars(d))
    return FieldExpr.constant(f, _xt_vars(d), d)


# --------------------------------------------------------------------------
# Operators
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DifferentialOperatorSpec:
    """``form="sum"`` with ``coefficients = (a_0, ..., a_n)`` or ``form="composed"`` with ``(a,)``.

    ``a_0`` is an additive term (a vector of ``dim`` fields when ``dim > 1``);
    ``a_1..a_n`` multiply the derivatives.  Coefficients are fields over
    ``(t, x1..xd)`` or plain numbers.
    """

    form: str
    coefficients: tuple
    dim: int = 1

    def __post_init__(self):
        if self.form not in ("sum", "composed"):
            raise ValueError("form must be 'sum' or 'composed'")
        coeffs = tuple(self.coefficients)
        if not coeffs:
            raise ValueError("at least one coefficient is required")
        if self.form == "composed" and len(coeffs) != 1:
            raise ValueError("composed form takes exactly one coefficient")
        d = self.dim
        lifted = []
        for i, c in enumerate(coeffs):
            if isinstance(c, (list, tuple)):
                if i != 0 and self.form == "sum" or len(c) != d:
                    raise ValueError("only a_0 (or the composed coefficient) may be a vector of dim fields")
                lifted.append(tuple(_lift(e, d) for e in c))
            else:
                lifted.append(_lift(c, d))
        for c in lifted:
            for e in (c if isinstance(c, tuple) else (c,)):
                if e.free_variables() - set(_xt_vars(d)):
                    raise ValueError(f"coefficient {e} depends on more than (t, x)")
        object.__setattr__(self, "coefficients", tuple(lifted))

    @property
    def order(self) -> int:
        if self.form == "composed":
            return 1
        n = len(self.coefficients) - 1
        while n > 0 and self.coefficients[n].is_constant() and evaluate(self.coefficients[n], {}) == 0:
            n -= 1
        return n

    @classmethod
    def parse(cls, form: str, coefficients, dim: int = 1) -> "DifferentialOperatorSpec":
        """Build from expression text; vectors are given as lists of strings."""
        vars_ = _xt_vars(dim)

        def conv(c):
            if isinstance(c, (list, tuple)):
                return tuple(parse_field(e, vars_, dim) for e in c)
            return parse_field(c, vars_, dim) if isinstance(c, str) else c

        return cls(form, tuple(conv(c) for c in coefficients), dim)


@dataclass(frozen=True, eq=False)
class EmbeddedOperator:
    """``a_0 + a_1 D_mu + ... + a_n D_mu^n`` or ``D_mu o a``; keeps the writing form."""

    spec: DifferentialOperatorSpec
    mu: int = 1

    @property
    def form(self) -> str:
        return self.spec.form

    @property
    def order(self) -> int:
        return self.spec.order

    def describe(self) -> str:
        d = "D" if self.mu == 1 else "conj(D)"
        if self.form == "composed":
            return f"{d} o ({self.spec.coefficients[0]})"
        terms = []
        for i, c in enumerate(self.spec.coefficients):
            text = f"({', '.join(map(str, c))})" if isinstance(c, tuple) else str(c)
            terms.append(text if i == 0 else f"({text}) {d}^{i}")
        return " + ".join(terms)


def embed_operator(op: DifferentialOperatorSpec, mu: int = 1) -> EmbeddedOperator:
    _check_mu(mu)
    return EmbeddedOperator(op, mu)


def _components(c, d):
    return c if isinstance(c, tuple) else (c,) * d


def _deterministic_derivative(kin: Kinematics, order: int):
    """Classical ``d^order f / dt^order`` of the embedded source, as fields in t."""
    out = []
    for f in kin.source:
        g = f
        for _ in range(order):
            g = g.diff("t")
        out.append(g.with_variables(_xt_vars(kin.dim)))
    return tuple(out)


def _operator_exprs(emb: EmbeddedOperator, kin: Kinematics):
    d = kin.dim
    if emb.form == "composed":
        a = emb.spec.coefficients[0]
        g = kin.dmu(emb.mu)
        return tuple(_generator(kin, ak, g, 0.5j * emb.mu) for ak in _components(a, d))
    order = emb.order
    if order >= 3 and not kin.deterministic:
        raise OrderUnsupported(f"order {order} embedded operators are only defined here for orders <= 2")
    derivs = {}
    for i in range(1, order + 1):
        if kin.deterministic:
            derivs[i] = _deterministic_derivative(kin, i)
        elif i == 1:
            derivs[i] = kin.dmu(emb.mu)
        else:
            derivs[i] = second_derivative_exprs(kin, emb.mu)
    out = []
    for k in range(d):
        term = _components(emb.spec.coefficients[0], d)[k]
        for i in range(1, order + 1):
            term = term + emb.spec.coefficients[i] * derivs[i][k]
        out.append(term)
    return tuple(out)


def _evaluate_exprs(kin, exprs, sites, label):
    t, x, mask = kin.resolve(sites)
    values = np.full((t.shape[0], len(exprs)), np.nan + 0j)
    keep = ~mask
    for m, e in enumerate(exprs):
        values[keep, m] = _evaluate(e, t[keep], x[keep])
    return ComplexFieldSample(np.column_stack([t, x]), values, mask, "analytic", None, label)


def apply_embedded(emb: EmbeddedOperator, target, sites=None) -> ComplexFieldSample:
    """Evaluate an embedded operator on a model (analytic backend) or a deterministic ensemble.

    Deterministic targets receive the classical operator; stochastic targets
    accept orders up to 2.
    """
    kin = kinematics(target)
    if sites is None:
        sites = default_sites(target)
    return _evaluate_exprs(kin, _operator_exprs(emb, kin), sites, emb.describe())


def functoriality_gap(a: FieldExpr, target, sites=None, mu: int = 1) -> ComplexFieldSample:
    """``D_mu(a(X_t)) - a'(X_t) D_mu X_t`` for a scalar ``a(x)`` (one dimension).

    For a constant-sigma diffusion the gap is ``(i mu sigma^2 / 2) a''(X_t)``;
    it vanishes on deterministic targets.
    """
    _check_mu(mu)
    kin = kinematics(target)
    if kin.dim != 1:
        raise PreconditionError("functoriality_gap is one-dimensional")
    a = _lift(a, 1)
    g = kin.dmu(mu)
    composed = _generator(kin, a, g, 0.5j * mu)
    chained = a.diff("x1") * g[0]
    if sites is None:
        sites = default_sites(target)
    return _evaluate_exprs(kin, (composed - chained,), sites, "functoriality gap")


# --------------------------------------------------------------------------
# Lagrangians
# --------------------------------------------------------------------------

def _lagrangian_vars(d):
    return spatial_vars(d) + velocity_vars(d)


@dataclass(frozen=True, eq=False)
class Lagrangian:
    """``L(x, y)`` over ``(x1..xd, y1..yd)``; ``potential`` set for natural ``L = |y|^2/2 - U(x)``."""

    L: FieldExpr
    dim: int = 1
    potential: FieldExpr | None = None
    report: object = field(default=None, compare=False)

    def __post_init__(self):
        L = self.L.with_variables(_lagrangian_vars(self.dim))
        extra = L.free_variables() - set(_lagrangian_vars(self.dim))
        if extra:
            raise ValueError(f"Lagrangian depends on {sorted(extra)}")
        object.__setattr__(self, "L", L)
        if self.report is None:
            object.__setattr__(self, "report", check_admissible(FieldExpr(L.ast, L.variables, self.dim)))
        if self.potential is not None:
            U = self.potential.with_variables(_lagrangian_vars(self.dim))
            object.__setattr__(self, "potential", U)
            if not self.natural_identity_holds():
                raise ValueError("L differs from |y|^2/2 - U")

    @classmethod
    def parse(cls, text: str, dim: int = 1) -> "Lagrangian":
        return cls(parse_field(text, _lagrangian_vars(dim), dim), dim)

    @classmethod
    def natural(cls, U, dim: int = 1) -> "Lagrangian":
        """``L = (1/2) sum y_k^2 - U(x)``."""
        if isinstance(U, str):
            U = parse_field(U, _lagrangian_vars(dim), dim)
        U = U.with_variables(_lagrangian_vars(dim))
        kinetic = FieldExpr.constant(0.0, _lagrangian_vars(dim), dim)
        for y in velocity_vars(dim):
            kinetic = kinetic + FieldExpr.variable(y, _lagrangian_vars(dim), dim) ** 2 * 0.5
        return cls(kinetic - U, dim, U)

    @property
    def admissible(self) -> bool:
        return bool(self.report)

    def natural_identity_holds(self, points: int = 20, seed: int = 0, tol: float = 1e-12) -> bool:
        """Check ``L - (|y|^2/2 - U) == 0`` at random real points."""
        if self.potential is None:
            return False
        rng = np.random.default_rng(seed)
        names = _lagrangian_vars(self.dim)
        env = {n: rng.normal(scale=2.0, size=points) for n in names}
        kinetic = 0.5 * sum(env[y] ** 2 for y in velocity_vars(self.dim))
        diff = evaluate(self.L, env) - (kinetic - evaluate(self.potential, env))
        return bool(np.all(np.abs(diff) <= tol * (1 + np.abs(kinetic))))


# --------------------------------------------------------------------------
# Residuals
# --------------------------------------------------------------------------

def _summary(values):
    if values.size == 0:
        return {"max_abs": float("nan"), "rms": float("nan")}
    per_site = np.sqrt(np.sum(np.abs(values) ** 2, axis=1))
    return {"max_abs": float(per_site.max()), "rms": float(np.sqrt(np.mean(per_site ** 2)))}


@dataclass(frozen=True, eq=False)
class ResidualReport:
    """Per-site residuals with summaries over unmasked sites.

    ``max_abs`` and ``rms`` use the Euclidean norm of the complex residual
    vector at each site; ``real`` and ``imag`` repeat them for each part.
    """

    equation: str
    backend: str
    sample: ComplexFieldSample

    @property
    def sites(self) -> np.ndarray:
        return self.sample.points

    @property
    def values(self) -> np.ndarray:
        return self.sample.values

    @property
    def mask(self) -> np.ndarray:
        return self.sample.mask

    @property
    def masked_count(self) -> int:
        return int(self.mask.sum())

    @property
    def max_abs(self) -> float:
        return _summary(self.sample.valid)["max_abs"]

    @property
    def rms(self) -> float:
        return _summary(self.sample.valid)["rms"]

    @property
    def real(self) -> dict:
        return _summary(self.sample.valid.real)

    @property
    def imag(self) -> dict:
        return _summary(self.sample.valid.imag)

    def to_dict(self) -> dict:
        def clean(a):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in a]

        return {
            "equation": self.equation,
            "backend": self.backend,
            "sites": [[float(v) for v in row] for row in self.sites],
            "residual_re": clean(self.values.real),
            "residual_im": clean(self.values.imag),
            "max_abs": self.max_abs,
            "rms": self.rms,
            "masked_count": self.masked_count,
            "real_part": self.real,
            "imag_part": self.imag,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def euler_lagrange_residual(lag: Lagrangian, target, mu: int = 1, sites=None) -> ResidualReport:
    """``D_mu (d_y L)(X_t, D_mu X_t) - (d_x L)(X_t, D_mu X_t)`` on the analytic backend.

    ``d_y L`` composed with the complex field ``g = D_mu X`` is a complex
    field ``F(t, x)``; its derivative along the process follows the
    transport formula, extended to complex fields by linearity.
    """
    _check_mu(mu)
    if not lag.admissible:
        raise NotAdmissible(f"Lagrangian {lag.L} failed the admissibility check: {lag.report.failures[:1]}")
    kin = kinematics(target)
    d = kin.dim
    if lag.dim != d:
        raise PreconditionError("Lagrangian and target dimensions differ")
    g = kin.dmu(mu)
    vars_ = _xt_vars(d) + velocity_vars(d)
    subs = dict(zip(velocity_vars(d), g))
    exprs = []
    for k in range(d):
        dy = lag.L.diff(velocity_vars(d)[k]).with_variables(vars_).substitute(subs)
        dx = lag.L.diff(spatial_vars(d)[k]).with_variables(vars_).substitute(subs)
        exprs.append(_generator(kin, dy, g, 0.5j * mu) - dx)
    if sites is None:
        sites = default_sites(target)
    return ResidualReport("euler-lagrange", "analytic", _evaluate_exprs(kin, tuple(exprs), sites, "ELS residual"))


def _grad(U, d):
    U = _lift(U, d)
    return tuple(U.diff(x) for x in spatial_vars(d))


def newton_residual(U, target, backend: str = "analytic", sites=None, cfg: EstimatorConfig | None = None,
                    *, ensemble: PathEnsemble | None = None, t_index: int | None = None, mu: int = 1) -> ResidualReport:
    """``D_mu^2 X + grad U(X)`` per site.

    The analytic backend works on a model or a deterministic ensemble.  The
    empirical backend needs a path ensemble (``target`` itself or
    ``ensemble``), a slice ``t_index`` and positions ``sites`` of shape
    ``(m, d)``; it returns the plug-in estimate with its standard errors.
    """
    _check_mu(mu)
    if backend == "analytic":
        kin = kinematics(target)
        d = kin.dim
        if isinstance(U, str):
            U = parse_field(U, _xt_vars(d), d)
        grad = _grad(U, d)
        acc = second_derivative_exprs(kin, mu)
        if sites is None:
            sites = default_sites(target)
        exprs = tuple(acc[k] + grad[k] for k in range(d))
        return ResidualReport("newton", "analytic", _evaluate_exprs(kin, exprs, sites, "Newton residual"))
    if backend != "empirical":
        raise ValueError("backend must be 'analytic' or 'empirical'")
    ens = target if isinstance(target, PathEnsemble) else ensemble
    if ens is None:
        raise PreconditionError("the empirical backend needs a path ensemble")
    if t_index is None:
        raise PreconditionError("the empirical backend needs t_index")
    d = ens.dim
    if isinstance(U, str):
        U = parse_field(U, _xt_vars(d), d)
    cfg = cfg or EstimatorConfig()
    est = second_derivative_empirical(ens, cfg, mu, t_index, sites)
    grad = _grad(U, d)
    t, x = est.t, est.x
    gvals = np.stack([np.broadcast_to(evaluate(gk, {"t": t, **{v: x[:, i] for i, v in enumerate(spatial_vars(d))}}),
                                      t.shape) for gk in grad], axis=1)
    values = est.values + gvals
    values[est.mask] = np.nan
    return ResidualReport("newton", "empirical", est.with_values(values, "Newton residual", est.stderr))


@dataclass(frozen=True, eq=False)
class ConjectureReport:
    """Magnitudes of ``Im D^2 X = (D^2 - D_*^2) X / 2``; exploratory, no verdict."""

    backend: str
    sample: ComplexFieldSample
    im_rms: float
    im_max: float
    re_rms: float

    def to_dict(self) -> dict:
        return {"backend": self.backend, "im_rms": self.im_rms, "im_max": self.im_max, "re_rms": self.re_rms,
                "sites": int((~self.sample.mask).sum())}


def conjecture_probe(target, sites=None, backend: str = "analytic", cfg: EstimatorConfig | None = None,
                     t_index: int | None = None) -> ConjectureReport:
    """Report the size of the imaginary part of ``D^2 X`` for a (possibly non-gradient) drift."""
    if backend == "analytic":
        kin = kinematics(target)
        if sites is None:
            sites = default_sites(target)
        sample = _evaluate_exprs(kin, second_derivative_exprs(kin, 1), sites, "D^2 X")
    elif backend == "empirical":
        if not isinstance(target, PathEnsemble):
            raise PreconditionError("the empirical probe needs a path ensemble")
        sample = second_derivative_empirical(target, cfg or EstimatorConfig(), 1,
                                             target.grid.n_steps if t_index is None else t_index, sites)
    else:
        raise ValueError("backend must be 'analytic' or 'empirical'")
    valid = sample.valid
    im = _summary(valid.imag)
    re = _summary(valid.real)
    return ConjectureReport(backend, sample, im["rms"], im["max_abs"], re["rms"])


# --------------------------------------------------------------------------
# Default sites
# --------------------------------------------------------------------------

def default_sites(target, points: int | None = None, mass: float = 0.99, t: float | None = None) -> np.ndarray:
    """Uniform grid over the central ``mass`` of each marginal of the model density.

    Deterministic ensembles get their interior grid times.
    """
    if isinstance(target, PathEnsemble):
        if not target.is_deterministic:
            raise PreconditionError("pass explicit sites for stochastic ensembles")
        times = target.times
        inner = times[(times >= times[0] + 0.25 * (times[-1] - times[0])) & (times <= times[0] + 0.75 * (times[-1] - times[0]))]
        return inner[:, None]
    if not isinstance(target, DiffusionModel):
        raise TypeError(f"unsupported target {type(target).__name__}")
    if target.density is None:
        raise MissingDensity(f"model {target.name!r} has no density")
    d = target.dim
    t = target.default_time if t is None else t
    points = points or (41 if d == 1 else 15)
    tail = 0.5 * (1 - mass)
    axes = []
    for k in range(d):
        lo, hi = target.window[k]
        grid = np.linspace(lo, hi, 4001)
        if d == 1:
            p = eval_field(target.density, t, grid[:, None])
        else:
            # marginal: integrate the other coordinates out on a coarse grid
            others = [np.linspace(*target.window[j], 201) for j in range(d) if j != k]
            mesh = np.meshgrid(grid, *others, indexing="ij")
            pts = np.zeros((mesh[0].size, d))
            pts[:, k] = mesh[0].ravel()
            cols = [j for j in range(d) if j != k]
            for j, m in zip(cols, mesh[1:]):
                pts[:, j] = m.ravel()
            p = eval_field(target.density, t, pts).reshape(mesh[0].shape)
            p = p.reshape(grid.size, -1).sum(axis=1)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(grid))])
        cdf /= cdf[-1]
        axes.append(np.linspace(np.interp(tail, cdf, grid), np.interp(1 - tail, cdf, grid), points))
    mesh = np.meshgrid(*axes, indexing="ij")
    x = np.stack([m.ravel() for m in mesh], axis=1)
    return np.column_stack([np.full(x.shape[0], t), x])
