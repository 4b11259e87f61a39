"""Second-order vectors and covectors, canonical lifts and Legendre transforms.

Conventions
-----------
A second-order vector ``(b, a)`` stands for the operator
``b^i d_i + 1/2 a^{jk} d_j d_k``.  A second-order covector ``(p, o)`` stores
``o`` as the plain coordinate Hessian of a function; pairings carry the
factor one half explicitly.

Scalar fields take ``(t, x)`` with ``x`` batched as ``(..., d)``, except the
classical Hamiltonian ``H0(x, p, t)`` and Lagrangian ``L0(t, x, xdot)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, NumericError, ShapeError
from .geometry import Euclidean


@dataclass(frozen=True)
class SecondOrderVector:
    first: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.first, float)
        s = np.asarray(self.second, float)
        d = f.shape[-1]
        if s.shape[-2:] != (d, d):
            raise ShapeError("second part must be d x d")
        object.__setattr__(self, "first", f)
        object.__setattr__(self, "second", 0.5 * (s + np.swapaxes(s, -1, -2)))


@dataclass(frozen=True)
class SecondOrderCovector:
    p: np.ndarray
    o: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, float)
        o = np.asarray(self.o, float)
        d = p.shape[-1]
        if o.shape[-2:] != (d, d):
            raise ShapeError("o must be d x d")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "o", 0.5 * (o + np.swapaxes(o, -1, -2)))

    def pair(self, A):
        """``<(p, o), (b, a)> = p_i b^i + 1/2 o_jk a^jk``."""
        return (np.einsum("...i,...i->...", self.p, A.first)
                + 0.5 * np.einsum("...jk,...jk->...", self.o, A.second))


def rho_nabla(model, x, A):
    """Tangent part ``b = first + 1/2 Gamma : second`` of a second-order vector."""
    x = np.asarray(x, float)
    if A.first.shape[-1] != model.dim or x.shape[-1] != model.dim:
        raise ShapeError("dimension mismatch")
    G = model.christoffel(x)
    return A.first + 0.5 * np.einsum("...ijk,...jk->...i", G, A.second)


def transform_vector(A, jacobian, hessian):
    """Push ``A`` through a chart change with the given derivatives.

    ``jacobian[i, j] = d y^i / d x^j``, ``hessian[i, j, k] = d^2 y^i / dx^j dx^k``.
    """
    J = np.asarray(jacobian, float)
    H = np.asarray(hessian, float)
    first = J @ A.first + 0.5 * np.einsum("ijk,jk->i", H, A.second)
    return SecondOrderVector(first, J @ A.second @ J.T)


# -- differentials -------------------------------------------------------------

_C1 = ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0))
_C2 = ((-2, -1.0), (-1, 16.0), (0, -30.0), (1, 16.0), (2, -1.0))


def fd_gradient(f, x, h=None):
    """4th-order central gradient of a scalar function of a d-vector."""
    x = np.asarray(x, float)
    h = 1e-3 * max(1.0, float(np.max(np.abs(x)))) if h is None else h
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = sum(c * f(x + s * e) for s, c in _C1) / (12 * h)
    return g


def fd_hessian(f, x, h=None):
    x = np.asarray(x, float)
    h = 1e-3 * max(1.0, float(np.max(np.abs(x)))) if h is None else h
    d = x.size
    H = np.zeros((d, d))
    E = np.eye(d) * h
    for i in range(d):
        H[i, i] = sum(c * f(x + s * E[i]) for s, c in _C2) / (12 * h * h)
        for j in range(i):
            acc = 0.0
            for s, cs in _C1:
                for r, cr in _C1:
                    acc += cs * cr * f(x + s * E[i] + r * E[j])
            H[i, j] = H[j, i] = acc / (144 * h * h)
    return H


def d2f(f, x, grad=None, hess=None):
    """Second differential of ``f`` at ``x``: ``(grad f, Hessian f)``.

    Analytic ``grad``/``hess`` callbacks are used when given.
    """
    x = np.atleast_1d(np.asarray(x, float))
    p = np.asarray(grad(x), float) if grad is not None else fd_gradient(f, x)
    o = np.asarray(hess(x), float) if hess is not None else fd_hessian(f, x)
    p = np.atleast_1d(p)
    o = np.reshape(o, (x.size, x.size))
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(o))):
        raise NumericError("non-finite derivative")
    return SecondOrderCovector(p, o)


def symmetric_product(omega, eta):
    """Symmetrized product ``1/2 (omega eta^T + eta omega^T)``."""
    w = np.asarray(omega, float)
    e = np.asarray(eta, float)
    if w.shape != e.shape:
        raise ShapeError("covectors must have equal dimension")
    return 0.5 * (np.multiply.outer(w, e) + np.multiply.outer(e, w))


# -- Hamiltonians and Lagrangians ---------------------------------------------

def _zero_field(t, x):
    return np.zeros(np.shape(x))


def _zero_scalar(t, x):
    return np.zeros(np.shape(x)[:-1])


class QuadraticFamily:
    """Data ``(model, b, F)`` of ``L0 = 1/2 |xdot - b|_g^2 - F``.

    Its Legendre dual is ``H0 = 1/2 |p|_{g^-1}^2 + <b, p> + F``.

    Parameters
    ----------
    model : ManifoldModel, default flat R^dim
    b : callable ``(t, x) -> (..., d)``, default zero
    F : callable ``(t, x) -> (...)``, default zero
    grad_F : callable, optional
        Analytic gradient of ``F``; central differences otherwise.
    time_dependent : bool
        Whether ``b`` or ``F`` depend on ``t``.
    """

    def __init__(self, model=None, b=None, F=None, grad_F=None, dim=1,
                 time_dependent=False, name="quadratic"):
        self.model = model if model is not None else Euclidean(dim)
        self.b = b if b is not None else _zero_field
        self.F = F if F is not None else _zero_scalar
        self._grad_F = grad_F
        self.has_drift = b is not None
        self.time_dependent = time_dependent
        self.name = name

    @property
    def dim(self):
        return self.model.dim

    def grad_F(self, t, x):
        if self._grad_F is not None:
            return np.asarray(self._grad_F(t, x), float)
        x = np.asarray(x, float)
        h = 1e-4
        out = np.zeros(x.shape)
        for k in range(x.shape[-1]):
            acc = 0.0
            for s, c in _C1:
                xs = x.copy()
                xs[..., k] += s * h
                acc = acc + c * np.asarray(self.F(t, xs), float)
            out[..., k] = acc / (12 * h)
        return out

    def hamiltonian(self):
        return ClassicalHamiltonian.from_family(self)

    def lagrangian(self):
        return Lagrangian.from_family(self)


class ClassicalHamiltonian:
    """``H0(x, p, t)`` with optional analytic ``dH/dp``."""

    def __init__(self, H, dH_dp=None, family=None):
        self._H = H
        self._dH_dp = dH_dp
        self.family = family

    @classmethod
    def from_family(cls, fam):
        model = fam.model

        def H(x, p, t):
            gi = model.inverse_metric(x)
            return (0.5 * np.einsum("...i,...ij,...j->...", p, gi, p)
                    + np.einsum("...i,...i->...", fam.b(t, x), p) + fam.F(t, x))

        def dH_dp(x, p, t):
            return np.einsum("...ij,...j->...i", model.inverse_metric(x), p) + fam.b(t, x)

        return cls(H, dH_dp, family=fam)

    def __call__(self, x, p, t=0.0):
        return self._H(np.asarray(x, float), np.asarray(p, float), t)

    def dH_dp(self, x, p, t=0.0):
        if self._dH_dp is not None:
            return self._dH_dp(np.asarray(x, float), np.asarray(p, float), t)
        return fd_gradient(lambda q: self._H(np.asarray(x, float), q, t), np.asarray(p, float))


class Lagrangian:
    """``L0(t, x, xdot)`` with optional analytic fiber derivative."""

    def __init__(self, L, dL_dxdot=None, family=None):
        self._L = L
        self._dL = dL_dxdot
        self.family = family

    @classmethod
    def from_family(cls, fam):
        model = fam.model

        def L(t, x, v):
            w = v - fam.b(t, x)
            return 0.5 * np.einsum("...i,...ij,...j->...", w, model.metric(x), w) - fam.F(t, x)

        def dL(t, x, v):
            return np.einsum("...ij,...j->...i", model.metric(x), v - fam.b(t, x))

        return cls(L, dL, family=fam)

    def __call__(self, t, x, xdot):
        return self._L(t, np.asarray(x, float), np.asarray(xdot, float))

    def dL_dxdot(self, t, x, xdot):
        if self._dL is not None:
            return self._dL(t, np.asarray(x, float), np.asarray(xdot, float))
        x = np.asarray(x, float)
        return fd_gradient(lambda v: self._L(t, x, v), np.asarray(xdot, float))


class SecondOrderHamiltonian:
    """Canonical lift ``H0 + (eps/2) g^{jk} (o_jk - Gamma^i_jk p_i)``."""

    def __init__(self, base, model, eps=1.0):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.base = base
        self.model = model
        self.eps = float(eps)

    @property
    def family(self):
        return self.base.family

    def __call__(self, x, p, o, t=0.0):
        x = np.asarray(x, float)
        p = np.asarray(p, float)
        o = np.asarray(o, float)
        gi = self.model.inverse_metric(x)
        G = self.model.christoffel(x)
        corr = o - np.einsum("...ijk,...i->...jk", G, p)
        return self.base(x, p, t) + 0.5 * self.eps * np.einsum("...jk,...jk->...", gi, corr)

    def dH_do(self, x):
        return 0.5 * self.eps * self.model.inverse_metric(np.asarray(x, float))

    def dH_dp(self, x, p, t=0.0):
        x = np.asarray(x, float)
        G = self.model.christoffel(x)
        gi = self.model.inverse_metric(x)
        return (self.base.dH_dp(x, p, t)
                - 0.5 * self.eps * np.einsum("...jk,...ijk->...i", gi, G))


def canonical_lift(H0, model, eps=1.0):
    return SecondOrderHamiltonian(H0, model, eps)


def o_hat(model, x, p):
    """``o_jk = Gamma^i_jk p_i``, where the lift reduces to ``H0``."""
    return np.einsum("...ijk,...i->...jk", model.christoffel(np.asarray(x, float)),
                     np.asarray(p, float))


# -- Legendre transforms -------------------------------------------------------

def legendre(L0, x, xdot, t=0.0):
    """Return ``(p, H0)`` with ``p = dL0/dxdot`` and ``H0 = p.xdot - L0``."""
    x = np.asarray(x, float)
    v = np.asarray(xdot, float)
    p = np.asarray(L0.dL_dxdot(t, x, v), float)
    return p, np.einsum("...i,...i->...", p, v) - L0(t, x, v)


def legendre_inverse(H0, x, p, t=0.0):
    """Return ``(xdot, L0)`` with ``xdot = dH0/dp`` and ``L0 = p.xdot - H0``."""
    x = np.asarray(x, float)
    p = np.asarray(p, float)
    v = np.asarray(H0.dH_dp(x, p, t), float)
    return v, np.einsum("...i,...i->...", p, v) - H0(x, p, t)


def solve_fiber(L0, x, p, t=0.0, maxiter=50, tol=1e-12):
    """Solve ``dL0/dxdot (xdot) = p`` for ``xdot`` at a single point.

    Quadratic families are inverted in closed form; anything else uses a
    damped Newton iteration with backtracking, started at ``xdot = p``.
    """
    x = np.asarray(x, float)
    p = np.asarray(p, float)
    fam = L0.family
    if fam is not None:
        return np.linalg.solve(fam.model.metric(x), p) + fam.b(t, x)

    def resid(v):
        return np.asarray(L0.dL_dxdot(t, x, v), float) - p

    v = p.copy()
    r = resid(v)
    for _ in range(maxiter):
        nr = np.linalg.norm(r)
        if nr <= tol * (1.0 + np.linalg.norm(p)):
            return v
        J = np.column_stack([fd_gradient(lambda w, i=i: resid(w)[i], v) for i in range(v.size)]).T
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("singular fiber Hessian") from exc
        lam = 1.0
        while lam > 1e-8:
            trial = v + lam * step
            rt = resid(trial)
            if np.linalg.norm(rt) < (1 - 1e-4 * lam) * nr:
                break
            lam *= 0.5
        v, r = trial, rt
    if np.linalg.norm(r) <= tol * (1.0 + np.linalg.norm(p)):
        return v
    raise ConvergenceError("Newton iteration for the Legendre transform did not converge")


def hamiltonian_value(L0, x, p, t=0.0):
    """``H0(x, p)`` obtained from ``L0`` alone; returns ``(xdot, H0)``."""
    v = solve_fiber(L0, x, p, t)
    return v, float(np.dot(p, v) - L0(t, x, v))


def classical_energy(L0, t, x, xdot):
    """``E0 = xdot . dL0/dxdot - L0``."""
    p, H = legendre(L0, x, xdot, t)
    return H


def energies(L0, S, model, t, x, xdot):
    """Classical and generalized energies ``(E0, E0 + 1/2 Lap S(t, x))``.

    ``S`` is a :class:`stogeo.pde.GridFunction` on a flat or periodic grid.
    """
    E0 = classical_energy(L0, t, x, xdot)
    lap = S.laplacian_at(t, x)
    return E0, E0 + 0.5 * lap


FAMILIES = ("quadratic", "harmonic", "euclidean-harmonic", "free")


def family_from_name(name, dim=1, model=None, b=None, F=None, grad_F=None,
                     time_dependent=False):
    """Registered Hamiltonian/Lagrangian families."""
    if name == "free":
        return QuadraticFamily(model, dim=dim, name=name)
    if name == "harmonic":
        return QuadraticFamily(model, F=lambda t, x: 0.5 * np.sum(x * x, axis=-1),
                               grad_F=lambda t, x: np.asarray(x, float), dim=dim, name=name)
    if name == "euclidean-harmonic":
        return QuadraticFamily(model, F=lambda t, x: -0.5 * np.sum(x * x, axis=-1),
                               grad_F=lambda t, x: -np.asarray(x, float), dim=dim, name=name)
    if name == "quadratic":
        return QuadraticFamily(model, b=b, F=F, grad_F=grad_F, dim=dim,
                               time_dependent=time_dependent, name=name)
    raise ValueError(f"unknown family '{name}'")
