"""Finite-difference solvers on rectangular, optionally periodic grids.

Periodic axes use nodes ``lo + i*dx``; bounded axes are cell-centred,
``lo + (i + 1/2) dx``, with homogeneous Neumann conditions imposed through
mirrored ghost cells.  Both layouts have uniform cell volumes.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import DomainError, NumericError, PositivityError, SchemeError, ShapeError


@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    n: int
    periodic: bool = False

    def __post_init__(self):
        if self.n < 8:
            raise ShapeError("at least 8 cells per dimension")
        if not self.hi > self.lo:
            raise ShapeError("empty axis")

    @property
    def dx(self):
        return (self.hi - self.lo) / self.n

    @property
    def nodes(self):
        i = np.arange(self.n)
        return self.lo + (i if self.periodic else i + 0.5) * self.dx

    @property
    def period(self):
        return self.hi - self.lo if self.periodic else None


class Grid:
    """Space-time grid: a list of axes and a uniform time grid on ``[0, T]``."""

    def __init__(self, axes, T, steps):
        axes = [a if isinstance(a, Axis) else Axis(*a) for a in axes]
        if not 1 <= len(axes) <= 2:
            raise ShapeError("grids have one or two space dimensions")
        if steps < 1 or T <= 0:
            raise ShapeError("need T > 0 and at least one step")
        self.axes = axes
        self.T = float(T)
        self.steps = int(steps)

    @classmethod
    def line(cls, lo, hi, n, T, steps, periodic=False):
        return cls([Axis(lo, hi, n, periodic)], T, steps)

    @property
    def dim(self):
        return len(self.axes)

    @property
    def shape(self):
        return tuple(a.n for a in self.axes)

    @property
    def dt(self):
        return self.T / self.steps

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.steps + 1)

    @property
    def dx(self):
        return np.array([a.dx for a in self.axes])

    @property
    def cell_volume(self):
        return float(np.prod(self.dx))

    @property
    def periods(self):
        return tuple(a.period for a in self.axes)

    def points(self):
        """Node coordinates, shape ``(*shape, d)``."""
        mesh = np.meshgrid(*[a.nodes for a in self.axes], indexing="ij")
        return np.stack(mesh, axis=-1)

    def refine(self, factor=2):
        return Grid([Axis(a.lo, a.hi, a.n * factor, a.periodic) for a in self.axes],
                    self.T, self.steps * factor)

    def describe(self):
        return {
            "axes": [{"lo": a.lo, "hi": a.hi, "n": a.n,
                      "boundary": "periodic" if a.periodic else "neumann"} for a in self.axes],
            "T": self.T,
            "steps": self.steps,
        }

    def interior_mask(self, margin=2):
        m = np.ones(self.shape, bool)
        for ax, a in enumerate(self.axes):
            if not a.periodic and margin > 0:
                idx = [slice(None)] * self.dim
                idx[ax] = slice(0, margin)
                m[tuple(idx)] = False
                idx[ax] = slice(a.n - margin, a.n)
                m[tuple(idx)] = False
        return m


# -- differences ---------------------------------------------------------------

def diff1(f, grid, axis):
    """Centred first difference along a space axis of ``f[..., *shape]``-aligned data.

    ``axis`` is the space axis index; data axes are located from the end of
    the grid block, i.e. ``f`` has shape ``(*lead, *grid.shape)``.
    """
    a = grid.axes[axis]
    ax = f.ndim - grid.dim + axis
    if a.periodic:
        return (np.roll(f, -1, ax) - np.roll(f, 1, ax)) / (2 * a.dx)
    return np.gradient(f, a.dx, axis=ax, edge_order=2)


def diff2(f, grid, axis):
    a = grid.axes[axis]
    ax = f.ndim - grid.dim + axis
    if a.periodic:
        return (np.roll(f, -1, ax) - 2 * f + np.roll(f, 1, ax)) / a.dx ** 2
    out = np.empty_like(f)
    sl = lambda s: tuple(slice(None) if i != ax else s for i in range(f.ndim))  # noqa: E731
    out[sl(slice(1, -1))] = (f[sl(slice(2, None))] - 2 * f[sl(slice(1, -1))]
                             + f[sl(slice(None, -2))]) / a.dx ** 2
    out[sl(0)] = (2 * f[sl(0)] - 5 * f[sl(1)] + 4 * f[sl(2)] - f[sl(3)]) / a.dx ** 2
    out[sl(-1)] = (2 * f[sl(-1)] - 5 * f[sl(-2)] + 4 * f[sl(-3)] - f[sl(-4)]) / a.dx ** 2
    return out


def gradient(f, grid):
    """Stack of first differences, components last."""
    return np.stack([diff1(f, grid, i) for i in range(grid.dim)], axis=-1)


def hessian(f, grid):
    d = grid.dim
    H = np.empty(f.shape + (d, d))
    for i in range(d):
        H[..., i, i] = diff2(f, grid, i)
        for j in range(i):
            H[..., i, j] = H[..., j, i] = diff1(diff1(f, grid, i), grid, j)
    return H


def laplacian(f, grid):
    return sum(diff2(f, grid, i) for i in range(grid.dim))


# -- grid functions -------------------------------------------------------------

@dataclass
class GridFunction:
    """Time-indexed field on a grid.

    ``values`` has shape ``(len(times), *grid.shape, *components)``.
    ``valid`` marks nodes where the field is numerically meaningful.
    """

    grid: Grid
    values: np.ndarray
    name: str = "u"
    times: np.ndarray = None
    valid: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.times is None:
            self.times = self.grid.times
        self.times = np.asarray(self.times, float)
        if self.values.shape[0] != len(self.times):
            raise ShapeError("one value slice per time required")
        if self.valid is None:
            self.valid = np.ones((len(self.times),) + self.grid.shape, bool)

    @property
    def components(self):
        return self.values.shape[1 + self.grid.dim:]

    def index(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise DomainError(f"time {t} is not a grid time of {self.name}")
        return k

    def at(self, t):
        return self.values[self.index(t)]

    def map(self, fun, name):
        return GridFunction(self.grid, fun(self.values), name, self.times, self.valid.copy())

    def gradient(self, name=None):
        return GridFunction(self.grid, gradient(self.values, self.grid), name or f"d{self.name}",
                            self.times, self.valid.copy())

    def hessian(self, name=None):
        return GridFunction(self.grid, hessian(self.values, self.grid), name or f"dd{self.name}",
                            self.times, self.valid.copy())

    def interpolate(self, t, x):
        """Multilinear interpolation in space, linear in time.

        Points outside a bounded axis raise a domain error.
        """
        x = np.asarray(x, float)
        tk = np.clip(t, self.times[0], self.times[-1])
        k = int(np.searchsorted(self.times, tk, side="right") - 1)
        k = min(max(k, 0), len(self.times) - 2) if len(self.times) > 1 else 0
        if len(self.times) == 1:
            return interp_space(self.grid, self.values[0], x)
        t0, t1 = self.times[k], self.times[k + 1]
        w = (tk - t0) / (t1 - t0)
        if w <= 1e-12:
            return interp_space(self.grid, self.values[k], x)
        if w >= 1 - 1e-12:
            return interp_space(self.grid, self.values[k + 1], x)
        return ((1 - w) * interp_space(self.grid, self.values[k], x)
                + w * interp_space(self.grid, self.values[k + 1], x))

    def laplacian_at(self, t, x):
        lap = laplacian(self.values[self.index(t)], self.grid)
        return float(interp_space(self.grid, lap, np.asarray(x, float)[None])[0])

    def header(self):
        return {"field": self.name, "grid": self.grid.describe(),
                "components": list(self.components), "times": len(self.times)}

    def to_csv(self, path=None, every=1):
        """``t,x0[,x1],value[,value1...]`` rows with 17 significant digits."""
        pts = self.grid.points().reshape(-1, self.grid.dim)
        ncomp = int(np.prod(self.components)) if self.components else 1
        cols = ["t"] + [f"x{i}" for i in range(self.grid.dim)]
        cols += ["value"] if ncomp == 1 else [f"value{i}" for i in range(ncomp)]
        out = io.StringIO()
        out.write(",".join(cols) + "\n")
        for k in range(0, len(self.times), every):
            vals = self.values[k].reshape(pts.shape[0], ncomp)
            for p, v in zip(pts, vals):
                out.write(",".join(f"{z:.17g}" for z in (self.times[k], *p, *v)) + "\n")
        text = out.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
            with open(str(path) + ".json", "w") as fh:
                json.dump(self.header(), fh, indent=2, sort_keys=True)
        return text


def interp_space(grid, values, x):
    """Multilinear interpolation of ``values[*shape, *comp]`` at points ``x (N, d)``."""
    x = np.asarray(x, float)
    N = x.shape[0]
    comp = values.shape[grid.dim:]
    idx0 = []
    wts = []
    for i, a in enumerate(grid.axes):
        if a.periodic:
            s = np.mod(x[:, i] - a.lo, a.hi - a.lo) / a.dx
            j = np.floor(s).astype(int)
            w = s - j
            j0 = np.mod(j, a.n)
            j1 = np.mod(j + 1, a.n)
        else:
            if np.any((x[:, i] < a.lo) | (x[:, i] > a.hi)):
                raise DomainError("point outside the grid box")
            s = (x[:, i] - a.lo) / a.dx - 0.5
            s = np.clip(s, 0.0, a.n - 1.0)
            j0 = np.minimum(np.floor(s).astype(int), a.n - 2)
            w = s - j0
            j1 = j0 + 1
        idx0.append((j0, j1))
        wts.append(w)
    out = np.zeros((N,) + comp)
    for corner in range(2 ** grid.dim):
        ind = []
        wt = np.ones(N)
        for i in range(grid.dim):
            bit = (corner >> i) & 1
            ind.append(idx0[i][bit])
            wt = wt * (wts[i] if bit else 1 - wts[i])
        v = values[tuple(ind)]
        out += wt.reshape((N,) + (1,) * len(comp)) * v
    return out


def gaussian_surrogate(grid, center, width=None, normalize=True):
    """Narrow Gaussian standing in for a Dirac mass; default width ``2 max(dx)``."""
    width = 2.0 * float(np.max(grid.dx)) if width is None else float(width)
    if not width > 0:
        raise ValueError("surrogate width must be positive")
    c = np.broadcast_to(np.asarray(center, float), (grid.dim,))
    pts = grid.points()
    diff = pts - c
    for i, P in enumerate(grid.periods):
        if P is not None:
            diff[..., i] -= P * np.round(diff[..., i] / P)
    g = np.exp(-0.5 * np.sum(diff ** 2, axis=-1) / width ** 2)
    if normalize:
        g /= g.sum() * grid.cell_volume
    return g


# -- operator assembly -----------------------------------------------------------

def _axis_ops(a):
    """Sparse centred first and second difference matrices with the axis' boundary."""
    n, h = a.n, a.dx
    D1 = sp.lil_matrix((n, n))
    D2 = sp.lil_matrix((n, n))
    for i in range(n):
        lo, hi = i - 1, i + 1
        if a.periodic:
            lo %= n
            hi %= n
        else:
            lo = max(lo, 0)       # mirrored ghost u_{-1} = u_0
            hi = min(hi, n - 1)
        D1[i, hi] += 1 / (2 * h)
        D1[i, lo] -= 1 / (2 * h)
        D2[i, hi] += 1 / h ** 2
        D2[i, lo] += 1 / h ** 2
        D2[i, i] -= 2 / h ** 2
    return D1.tocsr(), D2.tocsr()


def _embed(M, grid, axis):
    mats = [sp.identity(a.n, format="csr") for a in grid.axes]
    mats[axis] = M
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


class _BackwardOperator:
    """``L_axis u = b_axis d_axis u + (D/2) d_axis^2 u + F u / dim`` per split axis."""

    def __init__(self, grid, b, F, diffusivity):
        self.grid = grid
        self.b = b
        self.F = F
        self.D = diffusivity
        self.pts = grid.points().reshape(-1, grid.dim)
        self.ops = [_axis_ops(a) for a in grid.axes]
        self.D1 = [_embed(o[0], grid, i) for i, o in enumerate(self.ops)]
        self.D2 = [_embed(o[1], grid, i) for i, o in enumerate(self.ops)]
        self.m_matrix = True

    def parts(self, t):
        d = self.grid.dim
        bv = None if self.b is None else np.asarray(self.b(t, self.pts), float).reshape(-1, d)
        Fv = None if self.F is None else np.broadcast_to(
            np.asarray(self.F(t, self.pts), float), (self.pts.shape[0],))
        out = []
        for i in range(d):
            L = 0.5 * self.D * self.D2[i]
            if bv is not None:
                L = L + sp.diags(bv[:, i]) @ self.D1[i]
                if np.any(np.abs(bv[:, i]) * self.grid.axes[i].dx > self.D):
                    self.m_matrix = False
            if Fv is not None:
                L = L + sp.diags(Fv / d)
            out.append(sp.csc_matrix(L))
        return out


def _cn_solve(L_new, L_old, u, dt, theta=0.5):
    n = u.size
    Id = sp.identity(n, format="csc")
    A = Id - theta * dt * L_new
    rhs = u + (1 - theta) * dt * (L_old @ u)
    return splu(sp.csc_matrix(A)).solve(rhs)


def _split_step(op_new, op_old, u, dt, theta):
    """One time step; Strang splitting over axes in 2D."""
    if len(op_new) == 1:
        return _cn_solve(op_new[0], op_old[0], u, dt, theta)
    u = _cn_solve(op_new[0], op_old[0], u, 0.5 * dt, theta)
    u = _cn_solve(op_new[1], op_old[1], u, dt, theta)
    return _cn_solve(op_new[0], op_old[0], u, 0.5 * dt, theta)


def _as_values(grid, data):
    if isinstance(data, GridFunction):
        return np.array(data.values[-1], float)
    if callable(data):
        return np.asarray(data(grid.points()), float).reshape(grid.shape)
    return np.asarray(data, float).reshape(grid.shape)


def solve_backward(b, F, u_T, grid, diffusivity=1.0, smoothing_steps=0,
                   positivity_floor=0.0, autonomous=None):
    """Crank-Nicolson solve of ``du/dt + <b, grad u> + (D/2) Lap u + F u = 0``.

    Parameters
    ----------
    b : callable ``(t, x) -> (..., d)`` or None
    F : callable ``(t, x) -> (...)`` or None
    u_T : array, callable on points, or GridFunction
        Terminal data.
    grid : Grid
    diffusivity : float
        ``D``; 1 gives the standard ``1/2 Lap``.
    smoothing_steps : int
        Number of initial steps (from ``T``) replaced by two implicit Euler
        half steps each, which damps the grid-scale content of rough data.
    positivity_floor : float
        Nodes with ``|u| <= floor * max u`` count as numerical underflow and
        are flagged invalid instead of raising.  ``0`` is strict.
    autonomous : bool, optional
        Skip re-assembly when ``b`` and ``F`` do not depend on time.

    Returns
    -------
    GridFunction
        ``values[k]`` is ``u(t_k)``.
    """
    uT = _as_values(grid, u_T)
    _check_positive(uT, positivity_floor, "terminal data")
    op = _BackwardOperator(grid, b, F, diffusivity)
    times = grid.times
    K = grid.steps
    dt = grid.dt
    vals = np.empty((K + 1,) + grid.shape)
    vals[K] = uT
    u = uT.ravel().copy()
    cache = {}

    def ops(t):
        if autonomous:
            if "L" not in cache:
                cache["L"] = op.parts(t)
            return cache["L"]
        return op.parts(t)

    for k in range(K - 1, -1, -1):
        t_new, t_old = times[k], times[k + 1]
        if K - 1 - k < smoothing_steps:
            tm = 0.5 * (t_new + t_old)
            u = _split_step(ops(tm), ops(tm), u, 0.5 * dt, 1.0)
            u = _split_step(ops(t_new), ops(t_new), u, 0.5 * dt, 1.0)
        else:
            u = _split_step(ops(t_new), ops(t_old), u, dt, 0.5)
        _check_positive(u, positivity_floor, f"u at t={t_new:.6g}")
        vals[k] = u.reshape(grid.shape)
    valid = vals > positivity_floor * np.max(vals, axis=tuple(range(1, vals.ndim)), keepdims=True)
    gf = GridFunction(grid, vals, "u", times, valid)
    gf.meta["m_matrix"] = op.m_matrix
    return gf


def _check_positive(u, floor, what):
    if not np.all(np.isfinite(u)):
        raise NumericError(f"non-finite values in {what}")
    top = np.max(u)
    if top <= 0:
        raise PositivityError(f"{what} is not positive")
    bad = (u <= 0) & (np.abs(u) > floor * top)
    if np.any(bad):
        raise PositivityError(f"{what} has {int(bad.sum())} nonpositive nodes")


# -- forward equation ------------------------------------------------------------

class _ForwardOperator:
    """Conservative flux form of ``-div(mu v) + (D/2) Lap mu`` per axis."""

    def __init__(self, grid, v, diffusivity):
        self.grid = grid
        self.v = v
        self.D = diffusivity
        self.pts = grid.points()

    def parts(self, t):
        g = self.grid
        out = []
        for i, a in enumerate(g.axes):
            n, h = a.n, a.dx
            faces = self.pts.copy()
            faces[..., i] += 0.5 * h          # face i+1/2 of each cell
            if self.v is None:
                vf = np.zeros(g.shape)
            else:
                vf = np.asarray(self.v(t, faces.reshape(-1, g.dim)), float).reshape(
                    g.shape + (g.dim,))[..., i]
            # face flux F_{i+1/2} = vf (mu_i + mu_{i+1})/2 - D/2 (mu_{i+1} - mu_i)/h
            cL = 0.5 * vf + 0.5 * self.D / h
            cR = 0.5 * vf - 0.5 * self.D / h
            if not a.periodic:
                last = [slice(None)] * g.dim
                last[i] = n - 1
                cL[tuple(last)] = 0.0
                cR[tuple(last)] = 0.0
            idx = np.arange(np.prod(g.shape)).reshape(g.shape)
            right = np.roll(idx, -1, axis=i)
            if not a.periodic:
                last = [slice(None)] * g.dim
                last[i] = n - 1
                right[tuple(last)] = idx[tuple(last)]
            rows, cols, data = [], [], []
            me, nb = idx.ravel(), right.ravel()
            cl, cr = cL.ravel() / h, cR.ravel() / h
            # cell `me` loses flux F_{me+1/2}; cell `nb` gains it
            rows += [me, me, nb, nb]
            cols += [me, nb, me, nb]
            data += [-cl, -cr, cl, cr]
            M = sp.csc_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(me.size, me.size))
            out.append(M)
        return out


def solve_forward(mu0, v, grid, diffusivity=1.0, smoothing_steps=0, autonomous=None,
                  renormalize=True):
    """Crank-Nicolson solve of ``dmu/dt + div(mu v) - (D/2) Lap mu = 0``.

    Mass is conserved by construction; residual drift (rounding) is removed
    by rescaling to the initial mass each step, and the total correction is
    stored in ``meta["mass_correction"]``.
    """
    m = _as_values(grid, mu0)
    vol = grid.cell_volume
    if np.any(m * vol < -1e-10):
        raise SchemeError("negative initial mass")
    mass0 = m.sum() * vol
    if mass0 <= 0:
        raise SchemeError("initial mass must be positive")
    op = _ForwardOperator(grid, v, diffusivity)
    times = grid.times
    vals = np.empty((grid.steps + 1,) + grid.shape)
    vals[0] = m
    u = m.ravel().copy()
    corr = 0.0
    cache = {}

    def ops(t):
        if autonomous or v is None:
            if "L" not in cache:
                cache["L"] = op.parts(t)
            return cache["L"]
        return op.parts(t)

    for k in range(grid.steps):
        t_old, t_new = times[k], times[k + 1]
        if k < smoothing_steps:
            tm = 0.5 * (t_old + t_new)
            u = _split_step(ops(tm), ops(tm), u, 0.5 * grid.dt, 1.0)
            u = _split_step(ops(t_new), ops(t_new), u, 0.5 * grid.dt, 1.0)
        else:
            u = _split_step(ops(t_new), ops(t_old), u, grid.dt, 0.5)
        if np.any(u * vol < -1e-10):
            raise SchemeError(f"negative cell mass at t={t_new:.6g}")
        mass = u.sum() * vol
        drift = mass / mass0 - 1.0
        if abs(drift) > 1e-8:
            raise SchemeError(f"mass drift {drift:.3g} in one step")
        if renormalize:
            u = u / (1.0 + drift)
            corr += abs(drift)
        vals[k + 1] = u.reshape(grid.shape)
    gf = GridFunction(grid, vals, "mu", times)
    gf.meta["mass_correction"] = corr
    return gf


# -- log transform and HJB residual ----------------------------------------------------

def hjb_from_u(u, eps=1.0):
    """``S = eps ln u`` on valid nodes (NaN elsewhere)."""
    bad = u.valid & ~(u.values > 0)
    if np.any(bad):
        raise PositivityError("u is not positive where the log is taken")
    with np.errstate(divide="ignore", invalid="ignore"):
        S = np.where(u.valid, eps * np.log(np.where(u.valid, u.values, 1.0)), np.nan)
    return GridFunction(u.grid, S, "S", u.times, u.valid.copy())


@dataclass
class HJBResidual:
    field: GridFunction      # residual at half steps
    sup: float
    l2: float
    mask: np.ndarray


def _stencil_valid(valid, grid, reach=2):
    """Nodes whose ``reach``-neighbourhood is valid."""
    ok = valid.copy()
    for i, a in enumerate(grid.axes):
        ax = 1 + i
        for s in range(1, reach + 1):
            for sgn in (1, -1):
                sh = np.roll(valid, sgn * s, axis=ax)
                if not a.periodic:
                    idx = [slice(None)] * valid.ndim
                    idx[ax] = slice(0, s) if sgn > 0 else slice(-s, None)
                    sh[tuple(idx)] = True
                ok &= sh
    return ok


def hjb_residual(S, H, grid=None, margin=2, region=None, t_range=None):
    """Residual ``dS/dt + H(x, grad S, Hess S, t)`` at half time steps.

    The time difference is forward, ``(S^{k+1} - S^k)/dt``, paired with the
    average of the Hamiltonian over the two levels, so the residual is
    centred at ``t_{k+1/2}``.

    Parameters
    ----------
    S : GridFunction
    H : callable ``H(x, p, o, t)`` on batched arrays
    margin : int
        Nodes dropped next to bounded edges.
    region : callable ``x -> bool mask``, optional
        Further restricts the interior.
    t_range : (float, float), optional
        Half-step times kept in the sup and L2 norms.
    """
    grid = S.grid if grid is None else grid
    pts = grid.points()
    vals = S.values
    p = gradient(vals, grid)
    o = hessian(vals, grid)
    Hv = np.empty(vals.shape)
    for k, t in enumerate(S.times):
        Hv[k] = H(pts, p[k], o[k], t)
    dt = np.diff(S.times)
    shape = (-1,) + (1,) * grid.dim
    r = (vals[1:] - vals[:-1]) / dt.reshape(shape) + 0.5 * (Hv[1:] + Hv[:-1])
    tm = 0.5 * (S.times[1:] + S.times[:-1])
    ok = _stencil_valid(S.valid, grid)
    mask = (ok[1:] & ok[:-1]) & grid.interior_mask(margin)[None]
    if region is not None:
        mask &= np.asarray(region(pts), bool)[None]
    if t_range is not None:
        mask &= ((tm >= t_range[0]) & (tm <= t_range[1])).reshape(shape)
    mask &= np.isfinite(r)
    if not np.any(mask):
        raise DomainError("empty interior for the residual")
    rr = np.where(mask, r, 0.0)
    sup = float(np.max(np.abs(rr)))
    l2 = float(np.sqrt(np.sum(rr ** 2) * grid.cell_volume * grid.dt))
    return HJBResidual(GridFunction(grid, r, "hjb_residual", tm, mask), sup, l2, mask)


def born_marginal(u, v):
    """``mu_t = u v`` normalized at each time."""
    if u.values.shape != v.values.shape:
        raise ShapeError("u and v must share the grid")
    prod = u.values * v.values
    mass = prod.reshape(prod.shape[0], -1).sum(axis=1) * u.grid.cell_volume
    if np.any(~(mass > 0)):
        raise NumericError("Born marginal has nonpositive mass")
    mu = prod / mass.reshape((-1,) + (1,) * u.grid.dim)
    return GridFunction(u.grid, mu, "mu", u.times)


def dual_initial(mu0, u):
    """Initial value ``v(0) = mu0 / u(0)`` of the forward dual equation."""
    m = _as_values(u.grid, mu0)
    return np.where(m > 0, m / u.values[0], 0.0)


def moments(mu, t):
    """Mean and covariance of a density slice on its grid."""
    g = mu.grid
    dens = mu.at(t)
    pts = g.points()
    w = dens * g.cell_volume
    m = np.tensordot(w, pts, axes=(tuple(range(g.dim)), tuple(range(g.dim)))) / w.sum()
    c = (pts - m).reshape(-1, g.dim)
    cov = np.einsum("ni,nj,n->ij", c, c, w.ravel()) / w.sum()
    return m, cov
