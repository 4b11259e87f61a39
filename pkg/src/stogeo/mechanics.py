"""Stochastic Hamiltonian and Lagrangian mechanics on grids and path ensembles.

The pipeline is always the same: solve the linear backward equation for
``u``, take ``S = eps ln u``, differentiate to get the horizontal field
``(p, o) = (grad S, Hess S)`` and drive an Euler-Maruyama ensemble with the
drift ``b + grad S``.  Residual checks (HJB, Euler-Lagrange, Newton, Noether)
are evaluated either on the grid or by kernel regression on the ensemble.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import sympy

from .diffusion import DiffusionSpec, integrate_sde, kernel_regression, sample_mean_se, silverman
from .errors import (DomainError, EstimationError, InconsistentFieldError,
                     PreconditionError, UnsupportedFormError)
from .pde import (GridFunction, _stencil_valid, born_marginal, diff1, dual_initial, gradient,
                  hjb_from_u, hjb_residual, laplacian, solve_backward, solve_forward)
from .secondorder import QuadraticFamily, SecondOrderHamiltonian

# -- grid helpers ------------------------------------------------------------------


def _jac(P, grid):
    """``out[..., i, j] = d_j P_i`` for component-last data ``P[lead, *shape, d]``."""
    return np.stack([np.stack([diff1(P[..., i], grid, j) for j in range(grid.dim)], axis=-1)
                     for i in range(P.shape[-1])], axis=-2)


def _lap_vec(P, grid):
    return np.stack([laplacian(P[..., i], grid) for i in range(P.shape[-1])], axis=-1)


def _field_on_grid(fun, grid, times, shape_tail):
    pts = grid.points().reshape(-1, grid.dim)
    out = np.empty((len(times),) + grid.shape + shape_tail)
    for k, t in enumerate(times):
        out[k] = np.asarray(fun(t, pts), float).reshape(grid.shape + shape_tail)
    return out


def _require_flat(model, what):
    if model is not None and not getattr(model, "is_flat", False):
        raise UnsupportedFormError(f"{what} runs on flat or periodic grids only")


# -- horizontal fields -------------------------------------------------------------

@dataclass
class HorizontalField:
    """The pair ``(p, o)`` of momentum and conjugate diffusivity fields.

    With ``source == "from_S"`` the fields are ``p = grad S`` and
    ``o = grad p`` (nested centred differences) and ``S`` (and ``u`` when known) are kept alongside.
    """

    p: GridFunction
    o: GridFunction
    source: str = "direct"
    S: GridFunction = None
    u: GridFunction = None
    eps: float = 1.0

    @classmethod
    def from_S(cls, S, u=None, eps=1.0):
        p = S.gradient("p")
        # o as the difference Jacobian of p keeps the Maxwell relations exact
        J = _jac(p.values, S.grid)
        o = GridFunction(S.grid, 0.5 * (J + np.swapaxes(J, -1, -2)), "o", S.times,
                         S.valid.copy())
        return cls(p, o, "from_S", S, u, eps)

    @property
    def grid(self):
        return self.p.grid

    @property
    def times(self):
        return self.p.times

    def valid(self, reach=3):
        return _stencil_valid(self.p.valid, self.grid, reach)

    def maxwell_defect(self, margin=3):
        """Largest ``|o_ij - d_j p_i|`` plus asymmetry of ``o``, relative to ``1 + max|o|``.

        Evaluated on nodes whose stencil is valid, away from bounded edges.
        """
        g = self.grid
        dp = _jac(self.p.values, g)
        o = self.o.values
        mask = self.valid() & g.interior_mask(margin)[None]
        d1 = np.abs(o - dp)
        d2 = np.abs(o - np.swapaxes(o, -1, -2))
        sel = mask.reshape(mask.shape + (1, 1))
        worst = float(np.max(np.where(sel, np.maximum(d1, d2), 0.0)))
        scale = 1.0 + float(np.max(np.where(sel, np.abs(o), 0.0)))
        return worst / scale

    def sample(self, times, paths, alive=None):
        """``p(t_k, X_n(t_k))`` and ``o(t_k, X_n(t_k))`` along paths ``(N, len(times), d)``."""
        paths = np.asarray(paths, float)
        N, K, d = paths.shape
        p = np.full((N, K, d), np.nan)
        o = np.full((N, K, d, d), np.nan)
        for k, t in enumerate(times):
            ok = np.ones(N, bool) if alive is None else alive[:, k]
            ok &= _inside(self.grid, paths[:, k])
            if np.any(ok):
                p[ok, k] = self.p.interpolate(t, paths[ok, k])
                o[ok, k] = self.o.interpolate(t, paths[ok, k])
        return p, o


def _inside(grid, x):
    ok = np.all(np.isfinite(x), axis=-1)
    for i, a in enumerate(grid.axes):
        if not a.periodic:
            ok &= (x[:, i] >= a.lo) & (x[:, i] <= a.hi)
    return ok


# -- Bernstein bridge and the stochastic Hamilton system -----------------------------

class BridgeRun(NamedTuple):
    spec: DiffusionSpec
    field: HorizontalField
    ensemble: object


def _terminal_u(grid, S_T, u_T, eps):
    if u_T is not None:
        return u_T
    if S_T is None:
        return np.ones(grid.shape)
    if callable(S_T):
        S_T = np.asarray(S_T(grid.points()), float).reshape(grid.shape)
    return np.exp(np.asarray(S_T, float).reshape(grid.shape) / eps)


def _initial_sampler(mu0, grid):
    """Point, density on the grid, or sampler ``(rng, N) -> (N, d)``."""
    if callable(mu0):
        return mu0
    m = np.asarray(mu0, float)
    if m.shape == grid.shape and m.size > grid.dim:
        w = np.clip(m, 0.0, None).ravel()
        w = w / w.sum()
        pts = grid.points().reshape(-1, grid.dim)
        dx = grid.dx

        def sample(rng, N):
            idx = rng.choice(w.size, size=N, p=w)
            return pts[idx] + (rng.random((N, grid.dim)) - 0.5) * dx

        return sample
    return m.reshape(grid.dim)


def bernstein_bridge(model, b, F, mu0, S_T, grid, N=10000, seed=0, eps=1.0, u_T=None,
                     sim_steps=None, threads=1, save=None, positivity_floor=0.0,
                     smoothing_steps=0, autonomous=None, simulate=True):
    """Bernstein (reciprocal) process built from ``u`` and the reference drift ``b``.

    Parameters
    ----------
    model : flat or periodic ManifoldModel
    b, F : callables or None
        Reference drift and potential of the family ``H0 = 1/2 |p|^2 + <b, p> + F``.
    mu0 : point, density array on ``grid`` or sampler
    S_T : array, callable on grid points, or None
        Terminal value of ``S``; ``u_T = exp(S_T / eps)``.
    u_T : array, optional
        Terminal ``u`` given directly, e.g. a narrow Gaussian for an endpoint.
    eps : float
        Noise level; diffusion ``eps * I`` and ``S = eps ln u``.
    sim_steps : int, optional
        Euler-Maruyama steps on ``[0, T]``; defaults to the grid's steps.

    Returns
    -------
    BridgeRun
        ``(spec, field, ensemble)``; ``ensemble`` is None with ``simulate=False``.
    """
    _require_flat(model, "bernstein_bridge")
    uT = _terminal_u(grid, S_T, u_T, eps)
    Fe = None if F is None else (lambda t, x: np.asarray(F(t, x), float) / eps)
    u = solve_backward(b, Fe, uT, grid, diffusivity=eps, smoothing_steps=smoothing_steps,
                       positivity_floor=positivity_floor, autonomous=autonomous)
    S = hjb_from_u(u, eps)
    hf = HorizontalField.from_S(S, u, eps)
    pfield = hf.p

    def drift(t, x):
        # NaN outside the box stops the path in the simulator
        x = np.asarray(x, float)
        v = np.full(x.shape, np.nan)
        ok = _inside(grid, x)
        if np.any(ok):
            v[ok] = pfield.interpolate(t, x[ok])
        return v if b is None else v + np.asarray(b(t, x), float)

    d = grid.dim
    spec = DiffusionSpec(model, drift,
                         None if eps == 1.0 else (lambda t, x: eps * np.broadcast_to(
                             np.eye(d), np.shape(x)[:-1] + (d, d))),
                         name="bernstein", params={"eps": eps, "grid": repr(grid.describe())})
    ens = None
    if simulate:
        steps = grid.steps if sim_steps is None else int(sim_steps)
        times = np.linspace(0.0, grid.T, steps + 1)
        ens = integrate_sde(spec, _initial_sampler(mu0, grid), times, N, seed,
                            threads=threads, save=save)
    return BridgeRun(spec, hf, ens)


def bridge_marginals(run, mu0_density, b=None):
    """Born-formula marginals ``u v`` with ``v`` from the forward dual equation."""
    u = run.field.u
    v0 = dual_initial(mu0_density, u)
    v = solve_forward(v0, b, u.grid, diffusivity=run.field.eps)
    return born_marginal(u, v)


@dataclass
class HamiltonRun:
    ensemble: object
    p: np.ndarray          # (N, saved, d)
    o: np.ndarray          # (N, saved, d, d)
    field: HorizontalField
    spec: DiffusionSpec
    hamiltonian: SecondOrderHamiltonian
    meta: dict = field(default_factory=dict)


def _family_of(Hbar):
    if not isinstance(Hbar, SecondOrderHamiltonian):
        raise UnsupportedFormError("only canonical lifts are supported")
    fam = Hbar.family
    if not isinstance(fam, QuadraticFamily):
        raise UnsupportedFormError("the classical part must be a quadratic family")
    return fam


def stochastic_hamilton_run(Hbar, mu0, S_T, grid, N=10000, seed=0, u_T=None, **kw):
    """MDE-PDE form of the stochastic Hamilton equations for a canonical lift.

    ``S`` is obtained from the linear ``u`` equation, ``(p, o) = (grad S,
    Hess S)`` and the forward pair is integrated with drift ``dH/dp`` and
    diffusion ``2 dH/do``.  ``p`` and ``o`` are sampled along the saved steps.
    """
    fam = _family_of(Hbar)
    b = fam.b if fam.has_drift else None
    F = fam.F
    run = bernstein_bridge(fam.model, b, F, mu0, S_T, grid, N=N, seed=seed, eps=Hbar.eps,
                           u_T=u_T, **kw)
    ens = run.ensemble
    p, o = run.field.sample(ens.times, ens.paths, ens.alive)
    return HamiltonRun(ens, p, o, run.field, run.spec, Hbar)


# -- Newton-type law -------------------------------------------------------------------

@dataclass
class NewtonResult:
    points: np.ndarray
    Dp: np.ndarray          # kernel estimate of D[p(t, X(t))]
    force: np.ndarray       # -grad F at the points
    se: np.ndarray
    mask: np.ndarray
    sup: float
    slope: float            # weighted LS slope of Dp on x (1D)
    slope_se: float


def _newton_samples(run, force, pairs, control_variate):
    """Pooled ``(x, Delta p / Delta t - force)`` over saved-index pairs."""
    ens = run.ensemble
    xs, ys = [], []
    for k0, k1 in pairs:
        t0 = ens.times[k0]
        dt = ens.times[k1] - t0
        ok = (ens.alive[:, k1] & np.all(np.isfinite(run.p[:, k0]), -1)
              & np.all(np.isfinite(run.p[:, k1]), -1))
        x = ens.paths[ok, k0]
        dp = run.p[ok, k1] - run.p[ok, k0]
        if control_variate:
            # o (dX - drift dt) has zero conditional mean; removing it
            # strips the martingale part of dp to leading order
            noise = ens.paths[ok, k1] - x - np.asarray(run.spec.drift(t0, x), float) * dt
            dp = dp - np.einsum("nij,nj->ni", run.o[ok, k0], noise)
        xs.append(x)
        ys.append(dp / dt - np.asarray(force(t0, x), float))
    x = np.concatenate(xs)
    if x.shape[0] < 10:
        raise EstimationError("too few live increments")
    return x, np.concatenate(ys)


def newton_residual(run, force, pairs=None, eval_grid=None, bandwidth=None, min_eff=200.0,
                    control_variate=True):
    """Kernel estimate of ``D[p(t, X(t))]`` against ``force = -grad F``.

    Parameters
    ----------
    run : HamiltonRun
    force : callable ``(t, x) -> (..., d)``
    pairs : list of ``(k0, k1)`` saved-index pairs, consecutive saved steps by default
        Increments are pooled over pairs; each is compared with the force
        at its own starting point, so the kernel regression sees the residual.
    eval_grid : array ``(G, d)``, default 41 points between the 5 and 95 percentiles
    control_variate : bool
        Subtract ``o (dX - drift dt)``, which leaves the conditional mean unchanged.

    Returns
    -------
    NewtonResult
        ``Dp`` is the estimate at the first pair's time; ``slope`` (1D) is the
        inverse-variance weighted fit of ``Dp`` on ``x`` over usable cells.
    """
    ens = run.ensemble
    d = ens.dim
    if pairs is None:
        pairs = [(k, k + 1) for k in range(len(ens.times) - 1)]
    x, y = _newton_samples(run, force, pairs, control_variate)
    if eval_grid is None:
        lo, hi = np.percentile(x, [5, 95], axis=0)
        eval_grid = np.linspace(lo, hi, 41)
    pts = np.asarray(eval_grid, float).reshape(-1, d)
    h = silverman(x) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, float), (d,))
    mean, var, n_eff = kernel_regression(x, y, pts, h)
    mask = np.nan_to_num(n_eff) >= min_eff
    if not np.any(mask):
        raise EstimationError("no evaluation cell has enough samples")
    se = np.sqrt(var / np.maximum(n_eff, 1.0)[:, None])
    frc = np.asarray(force(ens.times[pairs[0][0]], pts), float)
    Dp = mean + frc
    sup = float(np.max(np.abs(mean[mask])))
    slope, slope_se = np.nan, np.nan
    if d == 1:
        w = 1.0 / np.maximum(se[mask, 0], 1e-300) ** 2
        xx = pts[mask, 0]
        A = np.stack([np.ones_like(xx), xx], 1)
        cov = np.linalg.inv(A.T @ (w[:, None] * A))
        coef = cov @ (A.T @ (w * Dp[mask, 0]))
        slope, slope_se = float(coef[1]), float(np.sqrt(cov[1, 1]))
    return NewtonResult(pts, Dp, frc, se, mask, sup, slope, slope_se)


def increment_slope(run, pairs, control_variate=True):
    """Least-squares slope of ``D[p(t, X(t))]`` samples on ``x`` (1D), pooled over pairs.

    Returns ``(slope, se, intercept)``.
    """
    x, y = _newton_samples(run, lambda t, z: np.zeros_like(z), pairs, control_variate)
    x, y = x[:, 0], y[:, 0]
    A = np.stack([np.ones_like(x), x], 1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    r = y - A @ coef
    cov = (r @ r / (len(y) - 2)) * np.linalg.inv(A.T @ A)
    return float(coef[1]), float(np.sqrt(cov[1, 1])), float(coef[0])


# -- stochastic Euler-Lagrange -------------------------------------------------------

def sel_residual(L0, hf, model=None, grid=None, margin=4, maxwell_tol=1e-3):
    """Grid residual of ``(D/dt)(d_xdot L0) - d_x L0`` for a quadratic family.

    On a flat grid ``d_xdot L0 = p`` and the damped mean covariant derivative
    reduces to ``d_t p + (p + b) . grad p + (eps/2) Lap p``; the force side is
    ``-(grad b)^T p - grad F``.  Returned at half time steps like the HJB
    residual.
    """
    fam = getattr(L0, "family", None)
    if not isinstance(fam, QuadraticFamily):
        raise UnsupportedFormError("sel_residual needs a quadratic-family Lagrangian")
    _require_flat(model if model is not None else fam.model, "sel_residual")
    grid = hf.grid if grid is None else grid
    defect = hf.maxwell_defect()
    if defect > maxwell_tol:
        raise InconsistentFieldError(f"Maxwell relations violated by {defect:.3g}")
    eps = hf.eps
    times = hf.times
    P = hf.p.values
    J = _jac(P, grid)                                  # J[..., i, j] = d_j p_i
    lapP = _lap_vec(P, grid)
    bvals = _field_on_grid(fam.b, grid, times, (grid.dim,))
    gradF = _field_on_grid(fam.grad_F, grid, times, (grid.dim,))
    db = _jac(bvals, grid)                             # db[..., j, i] = d_i b_j
    space = (np.einsum("...ij,...j->...i", J, P + bvals) + 0.5 * eps * lapP
             + np.einsum("...ji,...j->...i", db, P) + gradF)
    dt = np.diff(times).reshape((-1,) + (1,) * (grid.dim + 1))
    r = (P[1:] - P[:-1]) / dt + 0.5 * (space[1:] + space[:-1])
    tm = 0.5 * (times[1:] + times[:-1])
    ok = hf.valid(reach=4)
    mask = ok[1:] & ok[:-1] & grid.interior_mask(margin)[None]
    mask &= np.all(np.isfinite(r), axis=-1)
    return GridFunction(grid, r, "sel_residual", tm, mask)


def masked_sup(gf, region=None, t_range=None):
    """Sup norm of a residual GridFunction over its valid mask (and optional region)."""
    mask = gf.valid.copy()
    if region is not None:
        mask &= np.asarray(region(gf.grid.points()), bool)[None]
    if t_range is not None:
        sel = (gf.times >= t_range[0]) & (gf.times <= t_range[1])
        mask &= sel.reshape((-1,) + (1,) * gf.grid.dim)
    if not np.any(mask):
        raise DomainError("empty region for the residual norm")
    v = np.abs(gf.values)
    if v.ndim > mask.ndim:
        v = v.reshape(v.shape[:mask.ndim] + (-1,)).max(axis=-1)
    return float(np.max(v[mask]))


# -- action ------------------------------------------------------------------------

def action(L0, ensemble, drift, t_max=None):
    """Monte-Carlo action ``(1/N) sum_n sum_k L0(t_k, X_n, D X_n) dt``.

    Left-point rule over steps with ``t_k < t_max``; dead paths and
    non-finite integrands are dropped with a warning.  Returns ``(value, se)``.
    """
    times = ensemble.times
    K = len(times) - 1 if t_max is None else int(np.searchsorted(times, t_max - 1e-12))
    N = ensemble.N
    acc = np.zeros(N)
    good = np.ones(N, bool)
    for k in range(K):
        x = ensemble.paths[:, k]
        dt = times[k + 1] - times[k]
        val = np.asarray(L0(times[k], x, np.asarray(drift(times[k], x), float)), float)
        good &= ensemble.alive[:, k + 1] & np.isfinite(val)
        acc += np.where(np.isfinite(val), val, 0.0) * dt
    if not np.all(good):
        warnings.warn(f"{int((~good).sum())} paths masked in the action", RuntimeWarning,
                      stacklevel=2)
    m, se = sample_mean_se(acc[good])
    return float(m), float(se)


# -- energy ------------------------------------------------------------------------

@dataclass
class EnergyReport:
    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    max_deviation: float
    slope: float            # d E[H] / dt
    slope_se: float
    per_step: float         # slope * dt
    conserved: bool


def energy_conservation_check(run, k_sigma=3.0, t_range=None):
    """Time profile of ``E[H(X, p(t, X), o(t, X), t)]`` along a Hamilton run.

    The slope is the mean over paths of per-path least-squares slopes,
    with its standard error taken across paths.
    """
    ens = run.ensemble
    H = run.hamiltonian
    times = ens.times
    sel = np.ones(len(times), bool)
    if t_range is not None:
        sel = (times >= t_range[0]) & (times <= t_range[1])
    idx = np.nonzero(sel)[0]
    vals = np.empty((ens.N, len(idx)))
    for j, k in enumerate(idx):
        vals[:, j] = H(ens.paths[:, k], run.p[:, k], run.o[:, k], times[k])
    ok = np.all(np.isfinite(vals), axis=1) & ens.alive[:, idx[-1]]
    vals = vals[ok]
    mean, se = sample_mean_se(vals)
    tt = times[idx] - times[idx].mean()
    slopes = vals @ tt / (tt @ tt)
    s, s_se = sample_mean_se(slopes)
    dt = times[1] - times[0]
    return EnergyReport(times[idx], mean, se, float(np.max(np.abs(mean - mean.mean()))),
                        float(s), float(s_se), float(s * dt), bool(abs(s) <= k_sigma * s_se))


# -- Noether charges ---------------------------------------------------------------

@dataclass
class NoetherData:
    V0: object              # t -> float
    V: object               # (t, x) -> (..., d)
    Phi: object = None      # (t, x) -> (...)


@dataclass
class NoetherResult:
    J: GridFunction
    residual: GridFunction
    sup: float
    hjb_sup: float


def noether_residual(nd, L0, S, model=None, grid=None, margin=4, hjb_tol=1e-2, b=None,
                     eps=1.0, region=None):
    """Charge ``J = V . d_xdot L0 - V0 E - Phi`` and its total mean derivative on the grid.

    ``xdot = grad S + b`` and ``E = E0 + (eps/2) Lap S``.  The residual is
    ``d_t J + xdot . grad J + (eps/2) Lap J`` at half steps.  ``S`` must
    solve the HJB equation of ``L0``; a residual above ``hjb_tol`` on the
    interior raises a precondition error.
    """
    fam = getattr(L0, "family", None)
    if not isinstance(fam, QuadraticFamily):
        raise UnsupportedFormError("noether_residual needs a quadratic-family Lagrangian")
    _require_flat(model if model is not None else fam.model, "noether_residual")
    grid = S.grid if grid is None else grid
    bf = fam.b if b is None else b

    def Hbar(x, p, o, t):
        return (0.5 * np.sum(p * p, -1) + np.sum(np.asarray(bf(t, x), float) * p, -1)
                + np.asarray(fam.F(t, x), float) + 0.5 * eps * np.trace(o, axis1=-2, axis2=-1))

    pts = grid.points()
    hjb = hjb_residual(S, Hbar, grid, margin=margin, region=region)
    if hjb.sup > hjb_tol:
        raise PreconditionError(f"S does not solve the HJB equation (residual {hjb.sup:.3g})")
    times = S.times
    Sv = S.values
    p = gradient(Sv, grid)
    lapS = laplacian(Sv, grid)
    flat = pts.reshape(-1, grid.dim)
    J = np.empty(Sv.shape)
    xdot = np.empty(p.shape)
    for k, t in enumerate(times):
        bk = np.asarray(bf(t, flat), float).reshape(grid.shape + (grid.dim,))
        xd = p[k] + bk
        xdot[k] = xd
        dL = np.asarray(L0.dL_dxdot(t, pts, xd), float)
        E0 = np.sum(xd * dL, -1) - np.asarray(L0(t, pts, xd), float)
        E = E0 + 0.5 * eps * lapS[k]
        V = np.asarray(nd.V(t, flat), float).reshape(grid.shape + (grid.dim,))
        Phi = 0.0 if nd.Phi is None else np.asarray(nd.Phi(t, flat), float).reshape(grid.shape)
        J[k] = np.sum(V * dL, -1) - float(nd.V0(t)) * E - Phi
    gJ = gradient(J, grid)
    space = np.sum(xdot * gJ, -1) + 0.5 * eps * laplacian(J, grid)
    dt = np.diff(times).reshape((-1,) + (1,) * grid.dim)
    r = (J[1:] - J[:-1]) / dt + 0.5 * (space[1:] + space[:-1])
    tm = 0.5 * (times[1:] + times[:-1])
    ok = _stencil_valid(S.valid, grid, reach=4)
    mask = ok[1:] & ok[:-1] & grid.interior_mask(margin)[None] & np.isfinite(r)
    if region is not None:
        mask &= np.asarray(region(pts), bool)[None]
    res = GridFunction(grid, r, "noether_residual", tm, mask)
    Jgf = GridFunction(grid, J, "J", times, S.valid.copy())
    return NoetherResult(Jgf, res, float(np.max(np.abs(r[mask]))), hjb.sup)


# -- canonical transformations -------------------------------------------------------

x_, p_, o_, y_, P_, O_, t_ = sympy.symbols("x p o y P O t", real=True)
CT_SYMBOLS = {"x": x_, "p": p_, "o": o_, "y": y_, "P": P_, "O": O_, "t": t_}


@dataclass
class CanonicalExample:
    """Inputs of :func:`canonical_transform_check`.

    ``kind`` selects the relation family: ``"type1"`` uses ``G(x, y, t)``,
    ``"type3"`` uses ``G3(y, p, t)`` (with ``x = -dG3/dp``, ``P = -dG3/dy``),
    ``"sde"`` uses the Stratonovich form ``p dx - H dt = P dy - K dF0 + dG``
    with ``y(x, t)`` and ``P(x, p, t)`` maps.  ``maps`` expresses every
    coordinate needed by the relations in terms of the sampled variables.
    """

    name: str
    kind: str
    G: sympy.Expr
    F0: sympy.Expr
    H: sympy.Expr
    K: sympy.Expr
    maps: dict
    sample: object          # rng, n -> dict of symbol -> array
    extra: dict = field(default_factory=dict)


def _relations(ex):
    G, F0 = ex.G, ex.F0
    F0dot = sympy.diff(F0, t_)
    if ex.kind == "type1":
        return {
            "p": p_ - sympy.diff(G, x_),
            "o": o_ - sympy.diff(G, x_, 2),
            "P": P_ + sympy.diff(G, y_),
            "O": O_ + sympy.diff(G, y_, 2),
            "H": (ex.K - 1) * F0dot - ex.H + 1 - sympy.diff(G, t_),
        }
    if ex.kind == "type3":
        G3 = G
        dxdy = -sympy.diff(G3, p_, y_) / (1 + sympy.diff(G3, p_, 2) * o_)
        return {
            "x": x_ + sympy.diff(G3, p_),
            "P": P_ + sympy.diff(G3, y_),
            "O": O_ - (-sympy.diff(G3, y_, 2) - sympy.diff(G3, y_, p_) * o_ * dxdy),
            "H": ex.K * F0dot - ex.H - sympy.diff(G3, t_),
        }
    if ex.kind == "sde":
        ymap, Pmap = ex.extra["y"], ex.extra["P"]
        Gy = sympy.diff(G, y_).subs(y_, ymap)
        Gx = sympy.diff(G, x_).subs(y_, ymap)
        Gt = sympy.diff(G, t_).subs(y_, ymap)
        return {
            # coefficients of the dx and dt differentials
            "dx": p_ - (Pmap + Gy) * sympy.diff(ymap, x_) - Gx,
            "dt": -ex.H + ex.K * F0dot - (Pmap + Gy) * sympy.diff(ymap, t_) - Gt,
        }
    raise ValueError(f"unknown generating-function kind '{ex.kind}'")


def canonical_transform_check(example, n=100, seed=0, degeneracy_tol=1e-8):
    """Max residual of each generating-function relation over ``n`` random samples.

    Returns a dict ``{relation: max |residual|}``.  A (near-)singular mixed
    second derivative of the generating function triggers a warning.
    """
    rng = np.random.default_rng(seed)
    samp = example.sample(rng, n)
    env = {s: np.asarray(v, float) for s, v in samp.items()}
    order = list(env)

    def evaluate(expr):
        e = sympy.sympify(expr)
        # substitute maps until only sampled symbols remain
        for _ in range(4):
            e = e.subs(example.maps)
        f = sympy.lambdify(order, e, "numpy")
        return np.broadcast_to(np.asarray(f(*[env[s] for s in order]), float), (n,))

    mixed = {"type1": sympy.diff(example.G, x_, y_), "type3": sympy.diff(example.G, p_, y_)}
    if example.kind in mixed:
        m = evaluate(mixed[example.kind])
        if np.any(np.abs(m) < degeneracy_tol):
            warnings.warn("degenerate generating function at some samples", RuntimeWarning,
                          stacklevel=2)
    out = {}
    for name, rel in _relations(example).items():
        out[name] = float(np.max(np.abs(evaluate(rel))))
    return out


def oscillator_example():
    """Time-independent ``G = -x^2 cot(y) / 2`` for ``H = (p^2 + x^2)/2 + o/2``.

    Samples are drawn in the new chart ``(y, P)``; ``O`` is placed on the
    field, ``O = -G_yy``, and ``(x, p, o)`` come from the inverse maps.
    The new Hamiltonian uses the transformed metric ``cos^2(y)/(2P)`` and
    its connection coefficient ``2 tan(y)``.
    """
    G = -x_ ** 2 * sympy.cot(y_) / 2
    xmap = sympy.sqrt(-2 * P_) * sympy.sin(y_)
    maps = {
        x_: xmap,
        p_: -sympy.sqrt(-2 * P_) * sympy.cos(y_),
        o_: O_ * sympy.cos(y_) ** 2 / (2 * P_) - sympy.sin(y_) * sympy.cos(y_),
    }
    O_field = -sympy.diff(G, y_, 2).subs(x_, xmap)
    gt = sympy.cos(y_) ** 2 / (2 * P_)
    K = -P_ + gt * (O_ - 2 * sympy.tan(y_) * P_) / 2
    H = (p_ ** 2 + x_ ** 2) / 2 + o_ / 2
    Of = sympy.lambdify((y_, P_), O_field, "numpy")

    def sample(rng, n):
        y = rng.uniform(0.2, np.pi / 2 - 0.2, n)
        P = -rng.uniform(0.2, 3.0, n)
        return {y_: y, P_: P, O_: Of(y, P)}

    return CanonicalExample("oscillator", "type1", G, t_, H, K, maps, sample)


def linear_potential_example():
    """Translation ``y = x + t^2/2``, ``P = p + t`` with ``G = -t (y - t^2/2)``.

    The new Hamiltonian is ``P^2/2 - y + t^2 + O/2``; the intermediate form
    written in the old momentum is ``H + p t - y + 3 t^2 / 2``.
    """
    G = -t_ * (y_ - t_ ** 2 / 2)
    ymap = x_ + t_ ** 2 / 2
    Pmap = p_ + t_
    H = p_ ** 2 / 2 + o_ / 2
    K = (P_ ** 2 / 2 - y_ + t_ ** 2 + O_ / 2)
    maps = {y_: ymap, P_: Pmap, O_: o_}

    def sample(rng, n):
        return {x_: rng.uniform(-3, 3, n), p_: rng.uniform(-3, 3, n),
                o_: rng.uniform(-2, 2, n), t_: rng.uniform(0, 1, n)}

    return CanonicalExample("linear-potential", "sde", G, t_, H, K, maps, sample,
                            {"y": ymap, "P": Pmap})


def time_change_example():
    """``y = x / sqrt(1 - t^2)``, ``P = p sqrt(1 - t^2) + y t``, ``s = artanh t``."""
    r = sympy.sqrt(1 - t_ ** 2)
    G3 = -p_ * y_ * r - y_ ** 2 * t_ / 2
    H = p_ ** 2 / 2 + o_ / 2
    K = P_ ** 2 / 2 - y_ ** 2 / 2 + O_ / 2 - t_ / 2
    ymap = x_ / r
    maps = {y_: ymap, P_: p_ * r + y_ * t_, O_: (1 - t_ ** 2) * o_ + t_}

    def sample(rng, n):
        return {x_: rng.uniform(-3, 3, n), p_: rng.uniform(-3, 3, n),
                o_: rng.uniform(-2, 2, n), t_: rng.uniform(-0.9, 0.9, n)}

    return CanonicalExample("time-change", "type3", G3, sympy.atanh(t_), H, K, maps, sample)


CANONICAL_EXAMPLES = {
    "oscillator": oscillator_example,
    "linear-potential": linear_potential_example,
    "time-change": time_change_example,
}


# -- small-noise limit -------------------------------------------------------------

@dataclass
class SmallNoiseLevel:
    eps: float
    times: np.ndarray
    mean: np.ndarray
    sup_distance: float
    endpoint_rms: float
    endpoint_mean_error: float


def small_noise_study(family, x0, S_T, grid, eps_values, classical, N=20000, seed=0,
                      sim_steps=None):
    """Mean paths of ``eps``-scaled Hamilton runs against a classical path.

    Every level reuses the same seed, so the noise realizations are common
    across ``eps``.  ``classical`` maps times to the classical trajectory.
    """
    out = []
    for eps in eps_values:
        H = SecondOrderHamiltonian(family.hamiltonian(), family.model, eps)
        fam = _family_of(H)
        run = bernstein_bridge(fam.model, fam.b if fam.has_drift else None, fam.F, x0, S_T,
                               grid, N=N, seed=seed, eps=eps, sim_steps=sim_steps)
        ens = run.ensemble
        live = ens.alive[:, -1]
        xs = ens.paths[live]
        mean = xs.mean(axis=0)
        cl = np.asarray(classical(ens.times), float).reshape(len(ens.times), -1)
        dist = np.linalg.norm(mean - cl, axis=-1)
        endpoint = xs[:, -1] - cl[-1]
        out.append(SmallNoiseLevel(float(eps), ens.times, mean, float(dist.max()),
                                   float(np.sqrt(np.mean(np.sum(endpoint ** 2, -1)))),
                                   float(dist[-1])))
    return out


__all__ = [
    "HorizontalField", "BridgeRun", "bernstein_bridge", "bridge_marginals", "HamiltonRun",
    "stochastic_hamilton_run", "NewtonResult", "newton_residual", "increment_slope",
    "sel_residual", "masked_sup", "action", "EnergyReport", "energy_conservation_check",
    "NoetherData", "NoetherResult", "noether_residual", "CanonicalExample",
    "canonical_transform_check", "oscillator_example", "linear_potential_example",
    "time_change_example", "CANONICAL_EXAMPLES", "small_noise_study", "SmallNoiseLevel",
]
