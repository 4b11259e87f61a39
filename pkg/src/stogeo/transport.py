"""Stochastic parallel and damped parallel displacement along sampled paths."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class TransportedFrame:
    times: np.ndarray
    path: np.ndarray
    values: np.ndarray
    kind: str            # "parallel" or "damped"
    variance: str        # "vector" or "covector"
    aborted: bool = False
    abort_step: int = -1

    def norms(self, model):
        """Length in the metric (inverse metric for covectors)."""
        n = len(self.values)
        x = self.path[:n]
        G = model.inverse_metric(x) if self.variance == "covector" else model.metric(x)
        return np.sqrt(np.einsum("ki,kij,kj->k", self.values, G, self.values))

    def to_csv(self, model, path=None):
        d = self.values.shape[1]
        out = io.StringIO()
        out.write("step,t," + ",".join(f"v{i}" for i in range(d)) + ",norm\n")
        for k, (t, v, nv) in enumerate(zip(self.times, self.values, self.norms(model))):
            out.write(",".join([str(k)] + [f"{z:.17g}" for z in (t, *v, nv)]) + "\n")
        text = out.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _increment(model, a, b):
    d = b - a
    for i, P in enumerate(model.periods):
        if P is not None:
            d[..., i] -= P * np.round(d[..., i] / P)
    return d


def _quad_at(Q, model, k, t, x):
    if Q is None:
        return model.inverse_metric(x)
    if callable(Q):
        return np.asarray(Q(t, x), float)
    Q = np.asarray(Q, float)
    return Q if Q.ndim == 2 else Q[k]


def _transport(model, path, v0, covector, times, Q, damped):
    path = np.asarray(path, float)
    K = path.shape[0] - 1
    if damped and times is None:
        raise ValueError("damped transport needs the sample times")
    times = np.arange(K + 1, dtype=float) if times is None else np.asarray(times, float)
    vals = np.empty_like(path)
    vals[0] = v = np.asarray(v0, float).copy()
    for k in range(K):
        x0 = path[k]
        dX = _increment(model, x0, path[k + 1])
        mid = x0 + 0.5 * dX
        if not (model.in_domain(x0) and model.in_domain(model.normalize(mid))
                and model.in_domain(path[k + 1])):
            return TransportedFrame(times[:k + 1], path, vals[:k + 1],
                                    "damped" if damped else "parallel",
                                    "covector" if covector else "vector", True, k)
        A0 = np.einsum("ijk,k->ij", model.christoffel(x0), dX)
        Am = np.einsum("ijk,k->ij", model.christoffel(model.normalize(mid)), dX)
        if covector:
            pred = v + A0.T @ v
            new = v + Am.T @ (0.5 * (v + pred))
        else:
            pred = v - A0 @ v
            new = v - Am @ (0.5 * (v + pred))
        if damped:
            dt = times[k + 1] - times[k]
            R = model.riemann(x0)
            Qk = _quad_at(Q, model, k, times[k], x0)
            if covector:
                new = new + 0.5 * dt * np.einsum("ikjl,i,kl->j", R, v, Qk)
            else:
                new = new - 0.5 * dt * np.einsum("ikjl,j,kl->i", R, v, Qk)
        vals[k + 1] = v = new
    return TransportedFrame(times, path, vals, "damped" if damped else "parallel",
                            "covector" if covector else "vector")


def parallel_transport(model, path, v0, covector=False, times=None):
    """Stratonovich parallel displacement of a vector (or covector) along ``path``.

    Heun predictor-corrector: the predictor uses the Christoffel symbols at
    ``X(t_k)``, the corrector those at the chart midpoint, both against the
    increment ``X(t_{k+1}) - X(t_k)``.  Leaving the chart aborts with a flag.
    """
    return _transport(model, path, v0, covector, times, None, False)


def damped_transport(model, path, v0, Q=None, covector=False, times=None):
    """Parallel displacement plus the curvature drift ``-1/2 R^i_{kjl} V^j Q^{kl} dt``.

    ``Q`` is a constant matrix, an array per step, a callable ``Q(t, x)`` or
    ``None`` for the inverse metric.  Covectors get the opposite sign.
    """
    return _transport(model, path, v0, covector, times, Q, True)


# -- mean covariant derivative --------------------------------------------------

_C1 = ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0))
_C2 = ((-2, -1.0), (-1, 16.0), (0, -30.0), (1, 16.0), (2, -1.0))


def _jet(fun, t, x, h):
    """Value, first and second x-derivatives, and t-derivative of ``fun(t, x)``."""
    x = np.asarray(x, float)
    d = x.shape[-1]
    f0 = np.asarray(fun(t, x), float)
    D1 = np.zeros(f0.shape + (d,))
    D2 = np.zeros(f0.shape + (d, d))
    E = np.eye(d) * h
    for a in range(d):
        D1[..., a] = sum(c * fun(t, x + s * E[a]) for s, c in _C1) / (12 * h)
        D2[..., a, a] = sum(c * fun(t, x + s * E[a]) for s, c in _C2) / (12 * h * h)
        for b in range(a):
            acc = 0.0
            for s, cs in _C1:
                for r, cr in _C1:
                    acc = acc + cs * cr * fun(t, x + s * E[a] + r * E[b])
            D2[..., a, b] = D2[..., b, a] = acc / (144 * h * h)
    Dt = sum(c * fun(t + s * h, x) for s, c in _C1) / (12 * h)
    return f0, D1, D2, Dt


def damped_mean_cov_derivative(model, eta, drift, Q, t, x, h=1e-4):
    """``d_t eta + nabla_{D X} eta + 1/2 Q^{ij} (nabla^2_{ij} eta - R(eta, d_j) d_i)``.

    Parameters
    ----------
    eta : callable ``(t, x) -> (..., d)``
        Covector field, differentiated with 4th-order central differences.
    drift, Q : callables ``(t, x)`` or arrays broadcastable to the points
        ``D_nabla X`` and ``Q X``; ``Q=None`` means the inverse metric.
    x : array ``(..., d)``
    """
    x = np.asarray(x, float)
    pts = np.concatenate([x + s * h * e for e in np.eye(x.shape[-1]) for s in (-2, 2)])
    if not np.all(model.in_domain(pts)):
        raise DomainError("difference stencil leaves the chart")
    eta0, dE, ddE, dtE = _jet(eta, t, x, h)
    b = np.asarray(drift(t, x) if callable(drift) else drift, float)
    Qv = model.inverse_metric(x) if Q is None else np.asarray(Q(t, x) if callable(Q) else Q, float)
    G = model.christoffel(x)
    dG = model.christoffel_derivative(x)
    R = model.riemann(x)
    g = model.metric(x)
    gi = model.inverse_metric(x)
    # (nabla_k eta)_i = d_k eta_i - G^m_{ki} eta_m
    cov1 = np.einsum("...ik->...ki", dE) - np.einsum("...mki,...m->...ki", G, eta0)
    # d_j (nabla_k eta)_i
    d_cov1 = (np.einsum("...ikj->...jki", ddE)
              - np.einsum("...jmki,...m->...jki", dG, eta0)
              - np.einsum("...mki,...mj->...jki", G, dE))
    hess = (d_cov1
            - np.einsum("...mjk,...mi->...jki", G, cov1)
            - np.einsum("...mji,...km->...jki", G, cov1))
    eta_up = np.einsum("...ab,...b->...a", gi, eta0)
    # R(eta^#, d_j) d_i = eta^a R^m_{i a j} d_m, lowered with g
    curv = np.einsum("...lm,...miaj,...a->...jil", g, R, eta_up)
    transport = np.einsum("...k,...ki->...i", b, cov1)
    second = 0.5 * np.einsum("...ij,...jil->...l", Qv, np.einsum("...jki->...jki", hess) - curv)
    return dtE + transport + second
