"""Euler-Maruyama integration in a chart and mean-derivative estimation."""

from __future__ import annotations

import hashlib
import io
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, EstimationError, ShapeError
from .geometry import spd_sqrt

BLOCK = 4096  # paths per work unit; fixed so results never depend on threads
MAGIC = b"SGPE"
VERSION = 1


class DiffusionSpec:
    """Generator data of an MDE system.

    Parameters
    ----------
    model : ManifoldModel
    drift : callable ``(t, x) -> (..., d)``
        Tangent drift ``b`` (the value of ``D_nabla X``).
    diffusion : callable ``(t, x) -> (..., d, d)``, optional
        ``a = sigma sigma^T``; the inverse metric if omitted.
    name : str
        Identifies the diffusion in digests; change it whenever the callables change.
    params : dict
        Extra digest material.
    """

    def __init__(self, model, drift=None, diffusion=None, name="spec", params=None):
        self.model = model
        self.drift = drift if drift is not None else (lambda t, x: np.zeros(np.shape(x)))
        self._diffusion = diffusion
        self.name = name
        self.params = dict(params or {})

    def diffusion(self, t, x):
        if self._diffusion is None:
            return self.model.inverse_metric(x)
        return np.asarray(self._diffusion(t, x), float)

    def chart_drift(self, t, x):
        """Modified drift ``b - 1/2 Gamma : a`` used by the Ito scheme."""
        b = np.asarray(self.drift(t, x), float)
        if getattr(self.model, "is_flat", False):
            return b
        a = self.diffusion(t, x)
        return b - 0.5 * np.einsum("...ijk,...jk->...i", self.model.christoffel(x), a)

    def sigma(self, t, x):
        if self._diffusion is None and hasattr(self.model, "inverse_metric"):
            if getattr(self.model, "is_flat", False):
                return self.model.inverse_metric(x)
        return spd_sqrt(self.diffusion(t, x))

    def digest(self):
        text = repr((self.name, self.model.name, sorted(self.params.items())))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class PathEnsemble:
    """``N`` sampled paths on a common time grid.

    ``paths[n, k]`` is the chart position at ``times[k]``; ``alive[n, k]``
    flags paths not yet stopped by the chart exclusion zone.
    """

    times: np.ndarray
    paths: np.ndarray
    alive: np.ndarray
    seed: int
    spec_digest: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.paths.shape[0]

    @property
    def K(self):
        return self.paths.shape[1] - 1

    @property
    def dim(self):
        return self.paths.shape[2]

    def time_index(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise DomainError(f"time {t} not on the ensemble grid")
        return k

    # -- serialization ----------------------------------------------------------
    def to_bytes(self):
        """Header ``magic, version, N, K, d, seed`` then row-major doubles:
        times, paths, alive flags (0.0 / 1.0)."""
        head = MAGIC + struct.pack("<IQQQq", VERSION, self.N, self.K, self.dim, int(self.seed))
        body = np.concatenate([
            self.times.astype("<f8").ravel(),
            self.paths.astype("<f8").ravel(),
            self.alive.astype("<f8").ravel(),
        ])
        return head + body.tobytes()

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != MAGIC:
            raise ValueError("not a path-ensemble file")
        version, N, K, d, seed = struct.unpack("<IQQQq", data[4:40])
        if version != VERSION:
            raise ValueError(f"unsupported version {version}")
        arr = np.frombuffer(data[40:], dtype="<f8")
        nt = K + 1
        times = arr[:nt].copy()
        paths = arr[nt:nt + N * nt * d].reshape(N, nt, d).copy()
        alive = arr[nt + N * nt * d:].reshape(N, nt).astype(bool)
        return cls(times, paths, alive, seed)

    def to_csv(self, path_or_buffer=None):
        d = self.dim
        out = io.StringIO()
        out.write("path,step,t," + ",".join(f"x{i}" for i in range(d)) + ",alive\n")
        for n in range(self.N):
            for k in range(self.K + 1):
                xs = ",".join(f"{v:.17g}" for v in self.paths[n, k])
                out.write(f"{n},{k},{self.times[k]:.17g},{xs},{int(self.alive[n, k])}\n")
        text = out.getvalue()
        if path_or_buffer is not None:
            with open(path_or_buffer, "w", newline="") as fh:
                fh.write(text)
        return text


def _noise(seed, step, n0, n1, d):
    """Standard normals for paths ``n0..n1-1`` at ``step``.

    A Philox stream keyed by ``(seed, step)``; path ``n`` always reads the
    same ``d`` variates at offset ``n*d``, whatever the block layout.
    """
    bg = np.random.Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF, step], dtype=np.uint64))
    # Philox emits 4 uint64 per counter increment; advance to the block start
    # in whole increments and drop the remainder.  Uniforms go through the
    # inverse normal CDF so the variate count per path is fixed.
    start = n0 * d
    skip, rem = divmod(start, 4)
    bg.advance(skip)
    count = (n1 - n0) * d
    raw = bg.random_raw(rem + count)[rem:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
    from scipy.special import ndtri
    return ndtri(u).reshape(n1 - n0, d)


def _simulate_block(spec, x0, times, seed, n0, n1, save):
    model = spec.model
    d = model.dim
    nt = len(times)
    x = model.normalize(np.array(x0[n0:n1], float))
    alive = model.in_domain(x)
    out = np.empty((n1 - n0, len(save), d))
    out_alive = np.empty((n1 - n0, len(save)), bool)
    slot = {k: i for i, k in enumerate(save)}
    if 0 in slot:
        out[:, slot[0]] = x
        out_alive[:, slot[0]] = alive
    for k in range(nt - 1):
        t = times[k]
        dt = times[k + 1] - times[k]
        xi = _noise(seed, k, n0, n1, d)
        idx = np.nonzero(alive)[0]
        if idx.size:
            xa = x[idx]
            fast = model.diagonal_brownian(xa) if spec._diffusion is None else None
            if fast is not None:
                drift = np.asarray(spec.drift(t, xa), float) + fast[0]
                noise = fast[1] * xi[idx]
            else:
                drift = spec.chart_drift(t, xa)
                noise = np.einsum("nij,nj->ni", spec.sigma(t, xa), xi[idx])
            step = drift * dt + np.sqrt(dt) * noise
            xn = model.normalize(xa + step)
            ok = model.in_domain(xn)
            # stopped paths keep their last valid position
            x[idx[ok]] = xn[ok]
            alive[idx[~ok]] = False
        if k + 1 in slot:
            out[:, slot[k + 1]] = x
            out_alive[:, slot[k + 1]] = alive
    return out, out_alive


def integrate_sde(spec, init, times, N, seed, threads=1, save=None):
    """Simulate ``N`` Euler-Maruyama paths of ``spec``.

    Parameters
    ----------
    spec : DiffusionSpec
    init : array ``(d,)`` or ``(N, d)``, or callable ``(rng, N) -> (N, d)``
        Start point(s). A sampler receives a generator seeded from ``seed``.
    times : array
        Uniform time grid ``t_0 < ... < t_K``.
    N : int
    seed : int
    threads : int
        Worker count; has no influence on the result.
    save : sequence of int, optional
        Step indices to keep (default all). Useful for large ``N * K``.

    Returns
    -------
    PathEnsemble
    """
    times = np.asarray(times, float)
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
        raise ShapeError("times must be strictly increasing")
    dts = np.diff(times)
    if np.ptp(dts) > 1e-9 * dts[0]:
        raise ShapeError("time grid must be uniform")
    if N < 1:
        raise ShapeError("N must be positive")
    d = spec.model.dim
    if callable(init):
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, 2**63], dtype=np.uint64)))
        x0 = np.asarray(init(rng, N), float).reshape(N, d)
    else:
        x0 = np.asarray(init, float)
        x0 = np.broadcast_to(x0.reshape(-1, d) if x0.ndim > 1 else x0, (N, d))
    if not np.all(spec.model.in_domain(spec.model.normalize(x0))):
        raise DomainError("initial point outside chart domain")
    save = list(range(len(times))) if save is None else sorted(set(int(s) for s in save))
    blocks = [(n0, min(n0 + BLOCK, N)) for n0 in range(0, N, BLOCK)]

    def run(bl):
        return _simulate_block(spec, x0, times, seed, bl[0], bl[1], save)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(b) for b in blocks]
    paths = np.concatenate([r[0] for r in results])
    alive = np.concatenate([r[1] for r in results])
    meta = {}
    killed = float(np.mean(~alive[:, -1]))
    meta["killed_fraction"] = killed
    if killed > 0.5:
        meta["quality_warning"] = "more than half of the paths were stopped"
        warnings.warn(meta["quality_warning"], RuntimeWarning, stacklevel=2)
    return PathEnsemble(times[save], paths, alive, seed, spec.digest(), meta)


# -- mean derivatives ------------------------------------------------------------

@dataclass
class MeanDerivativeField:
    points: np.ndarray       # (G, d)
    DX: np.ndarray           # (G, d)
    QX: np.ndarray           # (G, d, d)
    DnablaX: np.ndarray      # (G, d)
    bandwidth: np.ndarray    # (d,)
    n_eff: np.ndarray        # (G,)
    mask: np.ndarray         # (G,) usable cells
    DX_se: np.ndarray        # (G, d)
    QX_se: np.ndarray        # (G, d, d)


def _increments(ens, k, model):
    dt = ens.times[k + 1] - ens.times[k]
    ok = ens.alive[:, k + 1]
    x = ens.paths[ok, k]
    dx = ens.paths[ok, k + 1] - x
    if model is not None:
        for i, P in enumerate(model.periods):
            if P is not None:
                dx[:, i] -= P * np.round(dx[:, i] / P)
    return x, dx, dt


def silverman(x):
    n = x.shape[0]
    return 1.06 * np.std(x, axis=0) * n ** (-0.2)


def kernel_regression(x, y, points, bandwidth, periods=None):
    """Nadaraya-Watson estimate of ``E[y | x]`` with a Gaussian kernel.

    Returns ``(mean, second_moment_about_mean_diag_free, n_eff, sum_w)``
    where the variance is of ``y`` itself, for standard errors.  Sums are
    accumulated over fixed path blocks in index order.
    """
    points = np.asarray(points, float)
    G = points.shape[0]
    m = y.shape[1]
    S0 = np.zeros(G)
    S00 = np.zeros(G)
    S1 = np.zeros((G, m))
    S2 = np.zeros((G, m))
    h = np.asarray(bandwidth, float)
    for n0 in range(0, x.shape[0], BLOCK):
        xb = x[n0:n0 + BLOCK]
        diff = points[:, None, :] - xb[None, :, :]
        if periods is not None:
            for i, P in enumerate(periods):
                if P is not None:
                    diff[..., i] -= P * np.round(diff[..., i] / P)
        w = np.exp(-0.5 * np.sum((diff / h) ** 2, axis=-1))
        yb = y[n0:n0 + BLOCK]
        S0 += w.sum(axis=1)
        S00 += (w * w).sum(axis=1)
        S1 += w @ yb
        S2 += w @ (yb * yb)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = S1 / S0[:, None]
        var = np.maximum(S2 / S0[:, None] - mean ** 2, 0.0)
        n_eff = S0 ** 2 / S00
    return mean, var, n_eff


def estimate_mean_derivatives(ens, t, eval_grid, bandwidth=None, model=None, min_eff=30.0):
    """Kernel-regression estimates of ``DX``, ``QX`` and ``D_nabla X`` at time ``t``.

    Parameters
    ----------
    ens : PathEnsemble
    t : float
        Must be a grid time with a successor on the grid.
    eval_grid : array ``(G, d)`` or ``(G,)``
    bandwidth : float or array, optional
        Silverman's rule per dimension by default.
    model : ManifoldModel, optional
        Needed for periodic increments and the Christoffel term; flat
        Euclidean if omitted.
    """
    k = ens.time_index(t)
    if k + 1 >= len(ens.times):
        raise DomainError("t has no successor on the ensemble grid")
    x, dx, dt = _increments(ens, k, model)
    d = ens.dim
    if x.shape[0] < 2:
        raise EstimationError("fewer than two live paths")
    pts = np.asarray(eval_grid, float).reshape(-1, d)
    h = silverman(x) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, float), (d,))
    if np.any(~(h > 0)):
        raise EstimationError("bandwidth must be positive")
    y = np.concatenate([dx / dt, (dx[:, :, None] * dx[:, None, :]).reshape(-1, d * d) / dt], axis=1)
    periods = model.periods if model is not None else None
    mean, var, n_eff = kernel_regression(x, y, pts, h, periods)
    mask = np.nan_to_num(n_eff) >= min_eff
    if not np.any(mask):
        raise EstimationError("no evaluation cell has enough samples")
    DX = mean[:, :d]
    QX = mean[:, d:].reshape(-1, d, d)
    QX = 0.5 * (QX + np.swapaxes(QX, 1, 2))
    se = np.sqrt(var / np.maximum(n_eff, 1.0)[:, None])
    if model is not None and not getattr(model, "is_flat", False):
        Gm = np.zeros((pts.shape[0], d, d, d))
        ok = model.in_domain(pts)
        Gm[ok] = model.christoffel(pts[ok])
        DnX = DX + 0.5 * np.einsum("gijk,gjk->gi", Gm, QX)
    else:
        DnX = DX.copy()
    return MeanDerivativeField(pts, DX, QX, DnX, np.asarray(h), n_eff, mask,
                               se[:, :d], se[:, d:].reshape(-1, d, d))


@dataclass
class GeneratorResidual:
    drift_residual: float
    diffusion_residual: float
    drift_se: float
    diffusion_se: float
    n_eff_min: float
    field: MeanDerivativeField

    @property
    def consistent(self):
        return (self.drift_residual <= 5 * self.drift_se
                and self.diffusion_residual <= 5 * self.diffusion_se)


def generator_residual(ens, spec, t, eval_grid, bandwidth=None):
    """Compare estimated ``(DX, QX)`` with the diffusion's own ``(chart drift, a)``.

    Standard errors are reported at the cell attaining each sup.
    """
    f = estimate_mean_derivatives(ens, t, eval_grid, bandwidth, model=spec.model)
    pts = f.points[f.mask]
    bb = spec.chart_drift(t, pts)
    a = spec.diffusion(t, pts)
    rD = np.abs(f.DX[f.mask] - bb)
    rQ = np.abs(f.QX[f.mask] - a)
    iD = np.unravel_index(np.argmax(rD), rD.shape)
    iQ = np.unravel_index(np.argmax(rQ), rQ.shape)
    return GeneratorResidual(float(rD[iD]), float(rQ[iQ]),
                             float(f.DX_se[f.mask][iD]), float(f.QX_se[f.mask][iQ]),
                             float(np.min(f.n_eff[f.mask])), f)


def sample_mean_se(values, axis=0):
    values = np.asarray(values, float)
    n = values.shape[axis]
    return values.mean(axis=axis), values.std(axis=axis, ddof=1) / np.sqrt(n)
