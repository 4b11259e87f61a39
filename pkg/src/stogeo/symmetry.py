"""Prolongations of projectable vector fields and determining-equation residuals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import sympy

from .expr import T, lambdify_field, parse_expression, symbols

_C1 = ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0))


def _scaled_step(x, h):
    return h * np.maximum(1.0, np.abs(x))


def _dx(fun, t, x, h):
    """``out[..., *comp, j] = d_j fun``; relative step ``h`` per point."""
    x = np.asarray(x, float)
    d = x.shape[-1]
    cols = []
    for j in range(d):
        hj = _scaled_step(x[..., j], h)
        acc = 0.0
        for s, c in _C1:
            xs = x.copy()
            xs[..., j] += s * hj
            acc = acc + c * np.asarray(fun(t, xs), float)
        extra = acc.ndim - hj.ndim
        cols.append(acc / (12 * hj.reshape(hj.shape + (1,) * extra)))
    return np.stack(cols, axis=-1)


def _dt(fun, t, x, h):
    ht = h * max(1.0, abs(t))
    return sum(c * np.asarray(fun(t + s * ht, x), float) for s, c in _C1) / (12 * ht)


class ProjectableVectorField:
    """``V = V0(t) d_t + V^i(t, x) d_i``.

    Derivative callbacks are optional; missing ones fall back to 4th-order
    central differences with relative step ``h``.

    Parameters
    ----------
    V0 : callable ``t -> float``
    V : callable ``(t, x) -> (..., d)``
    V0_dot, dV_dt, dV_dx, d2V_dx2 : callables, optional
        ``dV_dx[..., i, j] = d_j V^i``, ``d2V_dx2[..., i, j, k] = d_j d_k V^i``.
    """

    def __init__(self, V0, V, dim, V0_dot=None, dV_dt=None, dV_dx=None, d2V_dx2=None, h=1e-5):
        self.dim = dim
        self._V0 = V0
        self._V = V
        self._V0_dot = V0_dot
        self._dV_dt = dV_dt
        self._dV_dx = dV_dx
        self._d2V = d2V_dx2
        self.h = h

    @classmethod
    def from_expressions(cls, V0, V, dim):
        """Build from grammar strings or sympy expressions with exact derivatives."""
        v0 = parse_expression(V0, dim) if not isinstance(V0, sympy.Basic) else V0
        if v0.free_symbols - {T}:
            raise ValueError("V0 must depend on t only")
        vs = [parse_expression(e, dim) if not isinstance(e, sympy.Basic) else e for e in V]
        xs = symbols(dim)
        f0 = sympy.lambdify(T, v0, "numpy")
        f0d = sympy.lambdify(T, sympy.diff(v0, T), "numpy")
        return cls(
            lambda t: float(f0(t)), lambdify_field(vs, dim), dim,
            V0_dot=lambda t: float(f0d(t)),
            dV_dt=lambdify_field([sympy.diff(e, T) for e in vs], dim),
            dV_dx=lambdify_field([[sympy.diff(e, xj) for xj in xs] for e in vs], dim),
            d2V_dx2=lambdify_field([[[sympy.diff(e, xj, xk) for xk in xs] for xj in xs]
                                    for e in vs], dim),
        )

    def V0(self, t):
        return float(self._V0(t))

    def V0_dot(self, t):
        if self._V0_dot is not None:
            return float(self._V0_dot(t))
        ht = self.h * max(1.0, abs(t))
        return sum(c * self._V0(t + s * ht) for s, c in _C1) / (12 * ht)

    def V(self, t, x):
        return np.asarray(self._V(t, x), float)

    def dV_dt(self, t, x):
        return np.asarray(self._dV_dt(t, x), float) if self._dV_dt else _dt(self._V, t, x, self.h)

    def dV_dx(self, t, x):
        return np.asarray(self._dV_dx(t, x), float) if self._dV_dx else _dx(self._V, t, x, self.h)

    def d2V_dx2(self, t, x):
        if self._d2V:
            return np.asarray(self._d2V(t, x), float)
        # nested differences amplify rounding as h^-2, so the outer step is coarser
        h2 = max(self.h, 1e-3)
        return _dx(lambda s, y: _dx(self._V, s, y, h2), t, x, h2)

    def __add__(self, other):
        return self.combine(1.0, other, 1.0)

    def combine(self, a, other, b):
        """``a V + b W`` with derivatives combined linearly."""
        return ProjectableVectorField(
            lambda t: a * self.V0(t) + b * other.V0(t),
            lambda t, x: a * self.V(t, x) + b * other.V(t, x), self.dim,
            V0_dot=lambda t: a * self.V0_dot(t) + b * other.V0_dot(t),
            dV_dt=lambda t, x: a * self.dV_dt(t, x) + b * other.dV_dt(t, x),
            dV_dx=lambda t, x: a * self.dV_dx(t, x) + b * other.dV_dx(t, x),
            d2V_dx2=lambda t, x: a * self.d2V_dx2(t, x) + b * other.d2V_dx2(t, x),
        )


class GeneratorFields:
    """Chart drift ``bb(t, x)`` and diffusion ``a(t, x)`` of an Ito SDE, with derivatives.

    ``db_dx[..., i, j] = d_j bb^i``; ``da_dx[..., j, k, i] = d_i a^{jk}``.
    """

    def __init__(self, drift, diffusion, dim, db_dt=None, db_dx=None, da_dt=None,
                 da_dx=None, h=1e-5):
        self.dim = dim
        self.drift = drift
        self.diffusion = diffusion
        self._db_dt, self._db_dx = db_dt, db_dx
        self._da_dt, self._da_dx = da_dt, da_dx
        self.h = h

    @classmethod
    def from_expressions(cls, drift, diffusion, dim):
        xs = symbols(dim)
        b = [parse_expression(e, dim) if not isinstance(e, sympy.Basic) else e for e in drift]
        a = [[parse_expression(e, dim) if not isinstance(e, sympy.Basic) else e for e in row]
             for row in diffusion]
        return cls(
            lambdify_field(b, dim), lambdify_field(a, dim), dim,
            db_dt=lambdify_field([sympy.diff(e, T) for e in b], dim),
            db_dx=lambdify_field([[sympy.diff(e, xj) for xj in xs] for e in b], dim),
            da_dt=lambdify_field([[sympy.diff(e, T) for e in row] for row in a], dim),
            da_dx=lambdify_field([[[sympy.diff(e, xi) for xi in xs] for e in row] for row in a],
                                 dim),
        )

    def db_dt(self, t, x):
        return self._db_dt(t, x) if self._db_dt else _dt(self.drift, t, x, self.h)

    def db_dx(self, t, x):
        return self._db_dx(t, x) if self._db_dx else _dx(self.drift, t, x, self.h)

    def da_dt(self, t, x):
        return self._da_dt(t, x) if self._da_dt else _dt(self.diffusion, t, x, self.h)

    def da_dx(self, t, x):
        return self._da_dx(t, x) if self._da_dx else _dx(self.diffusion, t, x, self.h)


def total_mean_derivative(V, t, x, Dx, Qx):
    """``(d_t + Dx^j d_j + 1/2 Qx^{jk} d_j d_k) V`` at a point."""
    return (V.dV_dt(t, x) + np.einsum("...ij,...j->...i", V.dV_dx(t, x), Dx)
            + 0.5 * np.einsum("...ijk,...jk->...i", V.d2V_dx2(t, x), Qx))


def prolong(V, t, x, Dx, Qx):
    """First and second prolongation coefficients ``(V1, V2)``."""
    x = np.asarray(x, float)
    Dx = np.asarray(Dx, float)
    Qx = np.asarray(Qx, float)
    V1 = total_mean_derivative(V, t, x, Dx, Qx) - V.V0_dot(t) * Dx
    J = V.dV_dx(t, x)      # J[i, j] = d_j V^i
    JQ = np.einsum("...ji,...ik->...jk", J, Qx)
    V2 = JQ + np.swapaxes(JQ, -1, -2) - V.V0_dot(t) * Qx
    return V1, V2


def prolong_nabla(V, model, t, x, Dnx, Qx):
    """``(d_t + Dnx^j d_j) V + 1/2 Q^{jk} [nabla^2_{jk} V + R(V, d_j) d_k] - V0' Dnx``."""
    x = model.check(np.asarray(x, float))
    Dnx = np.asarray(Dnx, float)
    Qx = np.asarray(Qx, float)
    v = V.V(t, x)
    J = V.dV_dx(t, x)
    H = V.d2V_dx2(t, x)
    G = model.christoffel(x)
    dG = model.christoffel_derivative(x)
    R = model.riemann(x)
    # (nabla_k V)^i = d_k V^i + G^i_{km} V^m
    cov = np.einsum("...ik->...ki", J) + np.einsum("...ikm,...m->...ki", G, v)
    # d_j (nabla_k V)^i
    dcov = (np.einsum("...ijk->...jki", H) + np.einsum("...jikm,...m->...jki", dG, v)
            + np.einsum("...ikm,...mj->...jki", G, J))
    hess = (dcov + np.einsum("...ijm,...km->...jki", G, cov)
            - np.einsum("...mjk,...mi->...jki", G, cov))
    # R(V, d_j) d_k = V^a R^i_{k a j} d_i
    curv = np.einsum("...ikaj,...a->...jki", R, v)
    bracket = 0.5 * np.einsum("...jk,...jki->...i", Qx, hess + curv)
    return (V.dV_dt(t, x) + np.einsum("...ij,...j->...i", J, Dnx) + bracket
            - V.V0_dot(t) * Dnx)


@dataclass
class DeterminingResidual:
    r1: np.ndarray        # (times, points, d)
    r2: np.ndarray        # (times, points, d, d)
    scale: float

    @property
    def r1_max(self):
        return float(np.max(np.abs(self.r1)))

    @property
    def r2_max(self):
        return float(np.max(np.abs(self.r2)))

    @property
    def r_max(self):
        return max(self.r1_max, self.r2_max)


def determining_residual(V, spec, points, times):
    """Residuals of the two determining equations on a sample lattice.

    ``scale`` is the largest magnitude of any individual term, used for
    relative tolerances.
    """
    pts = np.asarray(points, float).reshape(-1, spec.dim)
    r1s, r2s = [], []
    scale = 0.0
    for t in np.atleast_1d(times):
        t = float(t)
        b = np.asarray(spec.drift(t, pts), float)
        a = np.asarray(spec.diffusion(t, pts), float)
        v = V.V(t, pts)
        J = V.dV_dx(t, pts)
        H = V.d2V_dx2(t, pts)
        v0, v0d = V.V0(t), V.V0_dot(t)
        terms1 = [V.dV_dt(t, pts), np.einsum("nij,nj->ni", J, b),
                  0.5 * np.einsum("nijk,njk->ni", H, a), -v0d * b,
                  -v0 * spec.db_dt(t, pts), -np.einsum("nj,nij->ni", v, spec.db_dx(t, pts))]
        Ja = np.einsum("nji,nik->njk", J, a)
        terms2 = [Ja, np.swapaxes(Ja, 1, 2), -v0d * a, -v0 * spec.da_dt(t, pts),
                  -np.einsum("ni,njki->njk", v, spec.da_dx(t, pts))]
        r1s.append(sum(terms1))
        r2s.append(sum(terms2))
        scale = max([scale] + [float(np.max(np.abs(z))) for z in terms1 + terms2])
    return DeterminingResidual(np.array(r1s), np.array(r2s), scale)


@dataclass
class Classification:
    symmetry: bool
    residual: DeterminingResidual
    tol: float


def classify(V, spec, points, times, rel_tol=1e-8):
    """Decide whether ``V`` is a symmetry with tolerance ``rel_tol * scale``."""
    res = determining_residual(V, spec, points, times)
    tol = rel_tol * max(res.scale, 1.0)
    return Classification(res.r_max <= tol, res, tol)


def default_lattice(lo, hi, dim, n=32, T=1.0, nt=16):
    """``n^dim`` points in the box and ``nt`` times in ``(0, T]``."""
    axes = [np.linspace(lo, hi, n)] * dim
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    return pts, np.linspace(T / nt, T, nt)


def push_ensemble(ens, time_map, space_map):
    """Image of an ensemble under ``(t, x) -> (time_map(t), space_map(t, x))``.

    ``time_map`` must be increasing; the new ensemble lives on the mapped times.
    """
    from .diffusion import PathEnsemble

    new_times = np.array([time_map(t) for t in ens.times])
    paths = np.stack([space_map(t, ens.paths[:, k]) for k, t in enumerate(ens.times)], axis=1)
    return PathEnsemble(new_times, paths, ens.alive.copy(), ens.seed, ens.spec_digest,
                        dict(ens.metadata, pushed=True))
