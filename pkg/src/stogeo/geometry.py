"""Chart-based Riemannian models.

Every model works on batches: a point array of shape ``(..., d)`` gives
metrics of shape ``(..., d, d)``, Christoffel symbols ``(..., d, d, d)``
indexed ``[i, j, k] = Gamma^i_{jk}`` and Riemann tensors ``(..., d, d, d, d)``
indexed ``[i, j, k, l] = R^i_{jkl}`` with

    R(d_k, d_l) d_j = R^i_{jkl} d_i,
    R^i_{jkl} = d_k G^i_{lj} - d_l G^i_{kj} + G^i_{km} G^m_{lj} - G^i_{lm} G^m_{kj}.

Ricci is the contraction ``Ric_{ij} = R^k_{ikj}``.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NumericError, ShapeError

_FD4 = ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0))


def _fd4(fun, x, h):
    """4th-order central derivative of ``fun`` along every coordinate.

    Returns an array with a new axis inserted right after the batch axes:
    ``out[..., k, ...] = d_k fun(x)``.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    parts = []
    for k in range(d):
        acc = 0.0
        for s, c in _FD4:
            xs = x.copy()
            xs[..., k] += s * h
            acc = acc + c * fun(xs)
        parts.append(acc / (12.0 * h))
    return np.stack(parts, axis=x.ndim - 1)


class ManifoldModel:
    """Riemannian metric on an open box of R^d, possibly with periodic axes.

    Subclasses override the analytic hooks; the base class differentiates
    the metric with 4th-order central differences.

    Parameters
    ----------
    dim : int
    metric : callable, optional
        ``metric(x) -> (..., d, d)``. Required for the generic model.
    periods : sequence of float or None
        Period per coordinate, ``None`` for non-periodic axes.
    lower, upper : sequence of float, optional
        Chart box; periodic axes use ``[lower, lower + period)``.
    fd_step : float
        Step for metric finite differences.
    name : str
    """

    def __init__(self, dim, metric=None, periods=None, lower=None, upper=None,
                 fd_step=1e-4, name="custom"):
        if dim < 1:
            raise ShapeError("dimension must be positive")
        self.dim = int(dim)
        self._metric = metric
        self.periods = tuple(periods) if periods is not None else (None,) * dim
        if len(self.periods) != dim:
            raise ShapeError("periods must have one entry per coordinate")
        lo = np.full(dim, -np.inf) if lower is None else np.asarray(lower, float)
        hi = np.full(dim, np.inf) if upper is None else np.asarray(upper, float)
        for i, P in enumerate(self.periods):
            if P is not None:
                if not np.isfinite(lo[i]):
                    lo[i] = 0.0
                hi[i] = lo[i] + P
        self.lower = lo
        self.upper = hi
        self.fd_step = fd_step
        self.name = name

    # -- chart handling -------------------------------------------------
    @property
    def periodic_mask(self):
        return np.array([P is not None for P in self.periods])

    @property
    def is_flat(self):
        return False

    def normalize(self, x):
        """Wrap periodic coordinates into their fundamental interval."""
        x = np.array(x, dtype=float, copy=True)
        for i, P in enumerate(self.periods):
            if P is not None:
                x[..., i] = self.lower[i] + np.mod(x[..., i] - self.lower[i], P)
        return x

    def in_domain(self, x):
        """Boolean mask of points strictly inside the chart box."""
        x = np.asarray(x, dtype=float)
        ok = np.all(np.isfinite(x), axis=-1)
        for i, P in enumerate(self.periods):
            if P is None:
                ok &= (x[..., i] > self.lower[i]) & (x[..., i] < self.upper[i])
        return ok

    def check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"expected {self.dim} coordinates, got {x.shape[-1]}")
        if not np.all(self.in_domain(x)):
            raise DomainError(f"point outside chart domain of {self.name}")
        return x

    # -- tensors ----------------------------------------------------------
    def metric(self, x):
        if self._metric is None:
            raise NotImplementedError
        return np.asarray(self._metric(np.asarray(x, float)), dtype=float)

    def inverse_metric(self, x):
        g = self.metric(x)
        try:
            return np.linalg.inv(g)
        except np.linalg.LinAlgError as exc:
            raise NumericError("singular metric") from exc

    def metric_derivative(self, x):
        """``[..., k, i, j] = d_k g_ij``."""
        return _fd4(self.metric, x, self.fd_step)

    def christoffel(self, x):
        dg = self.metric_derivative(x)
        ginv = self.inverse_metric(x)
        # lowered symbols G_{l jk} = 1/2 (d_j g_lk + d_k g_jl - d_l g_jk)
        low = 0.5 * (np.einsum("...jlk->...ljk", dg) + np.einsum("...kjl->...ljk", dg)
                     - dg)
        return np.einsum("...il,...ljk->...ijk", ginv, low)

    def christoffel_derivative(self, x):
        """``[..., l, i, j, k] = d_l Gamma^i_{jk}``."""
        return _fd4(self.christoffel, x, self.fd_step)

    def riemann(self, x):
        G = self.christoffel(x)
        dG = self.christoffel_derivative(x)
        # d_k G^i_{lj} - d_l G^i_{kj}
        t1 = np.einsum("...kilj->...ijkl", dG)
        t2 = np.einsum("...likj->...ijkl", dG)
        t3 = np.einsum("...ikm,...mlj->...ijkl", G, G)
        t4 = np.einsum("...ilm,...mkj->...ijkl", G, G)
        return t1 - t2 + t3 - t4

    def ricci(self, x):
        return np.einsum("...kikj->...ij", self.riemann(x))

    def diagonal_brownian(self, x):
        """Fast path for Brownian motion of a diagonal metric.

        Returns ``(-1/2 Gamma : g^{-1}, sqrt(diag g^{-1}))`` or ``None`` when
        the model has no closed form.
        """
        return None


class Euclidean(ManifoldModel):
    def __init__(self, dim):
        super().__init__(dim, name=f"euclidean:{dim}")

    @property
    def is_flat(self):
        return True

    def metric(self, x):
        x = np.asarray(x, float)
        return np.broadcast_to(np.eye(self.dim), x.shape[:-1] + (self.dim, self.dim)).copy()

    inverse_metric = metric

    def metric_derivative(self, x):
        x = np.asarray(x, float)
        return np.zeros(x.shape[:-1] + (self.dim,) * 3)

    def christoffel(self, x):
        return self.metric_derivative(x)

    def christoffel_derivative(self, x):
        x = np.asarray(x, float)
        return np.zeros(x.shape[:-1] + (self.dim,) * 4)

    def riemann(self, x):
        return self.christoffel_derivative(x)

    def diagonal_brownian(self, x):
        x = np.asarray(x, float)
        return np.zeros(x.shape), np.ones(x.shape)


class FlatTorus(Euclidean):
    """Flat torus (circle for d = 1) with the given period on every axis."""

    def __init__(self, dim, period=2 * np.pi):
        ManifoldModel.__init__(self, dim, periods=(period,) * dim,
                               name="circle" if dim == 1 else f"torus:{dim}")


class Sphere2(ManifoldModel):
    """Unit sphere in the (theta, phi) chart, ``g = diag(1, sin^2 theta)``.

    Points closer than ``pole_exclusion`` to a pole count as outside the
    chart.  ``normalize`` maps theta back into ``[0, pi]`` by the sphere's
    own identification ``(theta, phi) ~ (-theta, phi + pi)``.
    """

    def __init__(self, pole_exclusion=1e-3):
        super().__init__(2, periods=(None, 2 * np.pi), lower=(0.0, 0.0),
                         upper=(np.pi, 2 * np.pi), name="sphere2")
        self.pole_exclusion = float(pole_exclusion)

    def normalize(self, x):
        x = np.array(x, dtype=float, copy=True)
        th = np.mod(x[..., 0], 2 * np.pi)
        flip = th > np.pi
        x[..., 0] = np.where(flip, 2 * np.pi - th, th)
        x[..., 1] = np.mod(x[..., 1] + np.where(flip, np.pi, 0.0), 2 * np.pi)
        return x

    def in_domain(self, x):
        x = np.asarray(x, float)
        th = x[..., 0]
        e = self.pole_exclusion
        return np.isfinite(x).all(axis=-1) & (th > e) & (th < np.pi - e)

    def metric(self, x):
        x = np.asarray(x, float)
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = 1.0
        g[..., 1, 1] = np.sin(x[..., 0]) ** 2
        return g

    def inverse_metric(self, x):
        x = np.asarray(x, float)
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = 1.0
        g[..., 1, 1] = 1.0 / np.sin(x[..., 0]) ** 2
        return g

    def metric_derivative(self, x):
        x = np.asarray(x, float)
        dg = np.zeros(x.shape[:-1] + (2, 2, 2))
        dg[..., 0, 1, 1] = np.sin(2 * x[..., 0])
        return dg

    def christoffel(self, x):
        x = np.asarray(x, float)
        th = x[..., 0]
        G = np.zeros(x.shape[:-1] + (2, 2, 2))
        G[..., 0, 1, 1] = -np.sin(th) * np.cos(th)
        cot = np.cos(th) / np.sin(th)
        G[..., 1, 0, 1] = cot
        G[..., 1, 1, 0] = cot
        return G

    def diagonal_brownian(self, x):
        x = np.asarray(x, float)
        th = x[..., 0]
        corr = np.zeros(x.shape)
        corr[..., 0] = 0.5 * np.cos(th) / np.sin(th)
        sig = np.ones(x.shape)
        sig[..., 1] = 1.0 / np.abs(np.sin(th))
        return corr, sig

    def christoffel_derivative(self, x):
        x = np.asarray(x, float)
        th = x[..., 0]
        dG = np.zeros(x.shape[:-1] + (2, 2, 2, 2))
        dG[..., 0, 0, 1, 1] = -np.cos(2 * th)
        dG[..., 0, 1, 0, 1] = -1.0 / np.sin(th) ** 2
        dG[..., 0, 1, 1, 0] = -1.0 / np.sin(th) ** 2
        return dG


def conformal(phi, dim=1, periods=None, lower=None, upper=None, name="conformal"):
    """Conformally flat model ``g = exp(2 phi(x)) I`` with ``phi(x)`` batched."""
    eye = np.eye(dim)

    def metric(x):
        w = np.exp(2.0 * np.asarray(phi(x), float))
        return w[..., None, None] * eye

    return ManifoldModel(dim, metric=metric, periods=periods, lower=lower,
                         upper=upper, name=name)


def model_from_id(model_id, expressions=None):
    """Build a model from its config string id.

    ``"conformal1d:<name>"`` looks ``name`` up in ``expressions``, a mapping
    of names to callables ``phi(x)`` on batched points.
    """
    kind, _, arg = model_id.partition(":")
    if kind == "euclidean":
        return Euclidean(int(arg or 1))
    if kind == "circle":
        return FlatTorus(1)
    if kind == "torus":
        return FlatTorus(int(arg or 2))
    if kind == "sphere2":
        return Sphere2()
    if kind == "conformal1d":
        if not expressions or arg not in expressions:
            raise DomainError(f"unknown conformal factor expression '{arg}'")
        return conformal(expressions[arg], 1, name=model_id)
    raise DomainError(f"unknown model id '{model_id}'")


# -- module-level operations -------------------------------------------------

def christoffel(model, x):
    """Levi-Civita symbols ``Gamma^i_{jk}`` at ``x`` (domain checked)."""
    return model.christoffel(model.check(x))


def curvature(model, x):
    """Return ``(riemann, ricci)`` at ``x``."""
    x = model.check(x)
    R = model.riemann(x)
    return R, np.einsum("...kikj->...ij", R)


def sectional_curvature(model, x):
    """Gaussian curvature of a 2D model, ``R_{0101} / det g``."""
    x = model.check(x)
    g = model.metric(x)
    R = model.riemann(x)
    R_low = np.einsum("...im,...mjkl->...ijkl", g, R)
    return R_low[..., 0, 1, 0, 1] / np.linalg.det(g)


def metric_sqrt(model, x):
    """SPD root ``sigma`` of the inverse metric, ``sigma sigma^T = g^{-1}``."""
    x = model.check(x)
    return spd_sqrt(model.inverse_metric(x))


def spd_sqrt(a):
    """Symmetric PSD square root by eigendecomposition (batched)."""
    a = np.asarray(a, float)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    diag = np.diagonal(a, axis1=-2, axis2=-1)
    if np.all(a == diag[..., None] * np.eye(a.shape[-1])):
        if np.any(diag < 0):
            raise NumericError("matrix is not positive semi-definite")
        return np.sqrt(diag)[..., None] * np.eye(a.shape[-1])
    w, v = np.linalg.eigh(a)
    scale = np.max(np.abs(w), axis=-1, keepdims=True) + 1e-300
    if np.any(w < -1e-12 * scale):
        raise NumericError("matrix is not positive semi-definite")
    w = np.clip(w, 0.0, None)
    return np.einsum("...ij,...j,...kj->...ik", v, np.sqrt(w), v)
