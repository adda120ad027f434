"""Coarse graining of event ensembles and the acausal variety expansion.

The normalized acausal variety of an ensemble with density ``rho`` and
shell cutoffs ``a(z) = (N rho)^(-1/d)``, ``R = r a`` expands as

    V = constant - int rho |grad rho / rho|^2 + O(N^(-2/d)),

whose middle term is the Fisher information that generates the Bohm
potential. This module estimates ``rho`` from samples, evaluates the
discrete pair sum, the continuum terms, and runs convergence studies.

Two sampling schemes are supported. ``random`` draws i.i.d. samples and is
unbiased for the continuum integral but noisy. ``stratified`` places samples
and past events on interleaved quantile lattices (1-D only). It has no
sampling noise, and its Fisher coefficient is exactly half the continuum
one, which the scheme's ``Z_V`` compensates for. Shell membership there is
decided by the exact lattice label ``1 <= |s| <= r`` and the shell width is
the lattice site count, so non-integer ``r`` is handled consistently.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import fft as sfft
from scipy import signal
from scipy.spatial import cKDTree

from . import kernels
from .errors import FitError, InvalidConfigError, ResolutionError, ShapeError
from .models import DensityModel
from .rng import substream

log = logging.getLogger(__name__)

SCHEMES = ("continuum", "random", "stratified")


class ClippedMassWarning(UserWarning):
    """More than 0.1% of the sample mass fell outside the grid."""


class EmptyShellWarning(UserWarning):
    """No pair separation fell inside the cutoff shell."""


# ----------------------------------------------------------------------
# grids and states
@dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid.

    Nodes sit at ``lower + i h``. Periodic axes exclude the upper end
    (``h = (upper - lower) / n``); open axes include it
    (``h = (upper - lower) / (n - 1)``).
    """

    lower: tuple
    upper: tuple
    shape: tuple
    periodic: bool = False

    def __post_init__(self) -> None:
        lo = tuple(float(x) for x in np.atleast_1d(self.lower))
        hi = tuple(float(x) for x in np.atleast_1d(self.upper))
        shp = tuple(int(x) for x in np.atleast_1d(self.shape))
        if not (len(lo) == len(hi) == len(shp)):
            raise ShapeError("lower, upper and shape need one entry per axis")
        if any(h <= l for l, h in zip(lo, hi)) or any(n < 3 for n in shp):
            raise InvalidConfigError("grid needs upper > lower and at least 3 points per axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "shape", shp)

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> tuple:
        return tuple(
            (h - l) / (n if self.periodic else n - 1) for l, h, n in zip(self.lower, self.upper, self.shape)
        )

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def lengths(self) -> tuple:
        return tuple(h - l for l, h in zip(self.lower, self.upper))

    def axes(self) -> list[np.ndarray]:
        return [l + h * np.arange(n) for l, h, n in zip(self.lower, self.spacing, self.shape)]

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``shape + (d,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def integrate(self, f: np.ndarray) -> float:
        return float(np.sum(f) * self.cell_volume)


@dataclass
class CoarseState:
    """Gridded density ``rho`` and phase ``S`` for an ensemble of ``N`` events."""

    grid: Grid
    rho: np.ndarray
    S: np.ndarray | None = None
    N: int = 1
    mass: float = 1.0

    def __post_init__(self) -> None:
        self.rho = np.asarray(self.rho, dtype=float).reshape(self.grid.shape)
        self.S = np.zeros(self.grid.shape) if self.S is None else np.asarray(self.S, dtype=float).reshape(self.grid.shape)
        if self.N < 1:
            raise InvalidConfigError("N must be >= 1")

    def validate(self, tol: float = 1e-8) -> None:
        if np.any(self.rho < 0):
            raise InvalidConfigError("density must be non-negative")
        total = self.grid.integrate(self.rho)
        if abs(total - self.mass) > tol * max(1.0, self.mass):
            raise InvalidConfigError(f"density integrates to {total!r}, expected {self.mass}")

    @classmethod
    def from_model(cls, model: DensityModel, grid: Grid, N: int = 1, normalize: bool = True) -> CoarseState:
        pts = grid.points()
        rho = model.pdf_nd(pts.reshape(-1, grid.d)).reshape(grid.shape)
        if normalize:
            rho = rho / grid.integrate(rho)
        return cls(grid, rho, None, N)


def silverman_bandwidth(x: np.ndarray) -> np.ndarray:
    """Silverman's rule-of-thumb bandwidth per axis, samples of shape (n, d)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    sd = x.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    if d == 1:
        q75, q25 = np.percentile(x[:, 0], [75, 25])
        spread = min(sd[0], (q75 - q25) / 1.34) if q75 > q25 else sd[0]
        return np.array([0.9 * spread * n ** (-0.2)])
    return sd * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def estimate_density(
    samples: np.ndarray,
    grid: Grid,
    N: int | None = None,
    bandwidth: str | float | Sequence[float] = "silverman",
    method: str = "kde",
    min_samples: int = 100,
) -> CoarseState:
    """Kernel density estimate on ``grid``, normalized to unit mass.

    Samples are linearly binned onto the grid and convolved with a Gaussian
    kernel by FFT (exactly periodic on periodic grids). The bandwidth is
    floored at one grid spacing. ``method="histogram"`` skips the smoothing.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != grid.d:
        raise ShapeError(f"samples have dimension {x.shape[1]}, grid has {grid.d}")
    n = x.shape[0]
    if n < min_samples:
        raise InvalidConfigError(f"density estimation needs at least {min_samples} samples, got {n}")
    h = np.array(grid.spacing)
    lo = np.array(grid.lower)
    shape = np.array(grid.shape)
    pos = (x - lo) / h
    if grid.periodic:
        pos = np.mod(pos, shape)
        inside = np.ones(n, dtype=bool)
    else:
        inside = np.all((pos >= 0) & (pos <= shape - 1), axis=1)
    clipped = 1.0 - inside.mean()
    if clipped > 1e-3:
        warnings.warn(f"{100 * clipped:.2f}% of the sample mass lies outside the grid", ClippedMassWarning, stacklevel=2)
    pos = pos[inside]
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    counts = np.zeros(grid.shape)
    for corner in range(2 ** grid.d):
        offs = np.array([(corner >> k) & 1 for k in range(grid.d)])
        w = np.prod(np.where(offs, frac, 1.0 - frac), axis=1)
        idx = base + offs
        if grid.periodic:
            idx = np.mod(idx, shape)
        else:
            idx = np.minimum(idx, shape - 1)
        np.add.at(counts, tuple(idx.T), w)
    rho = counts / (n * grid.cell_volume)
    if method == "kde":
        if isinstance(bandwidth, str):
            if bandwidth != "silverman":
                raise InvalidConfigError(f"unknown bandwidth rule {bandwidth!r}")
            bw = silverman_bandwidth(x)
        else:
            bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (grid.d,)).copy()
        bw = np.maximum(bw, h)
        rho = _gaussian_smooth(rho, bw / h, grid.periodic)
    elif method != "histogram":
        raise InvalidConfigError(f"unknown density method {method!r}")
    rho = np.maximum(rho, 0.0)
    rho /= grid.integrate(rho)
    return CoarseState(grid, rho, None, int(N if N is not None else n))


def _gaussian_smooth(f: np.ndarray, width: np.ndarray, periodic: bool) -> np.ndarray:
    """Convolve with a unit-mass Gaussian of per-axis ``width`` grid cells."""
    if periodic:
        spec = sfft.rfftn(f)
        for ax, (n, s) in enumerate(zip(f.shape, width)):
            k = 2 * np.pi * (np.fft.rfftfreq(n) if ax == f.ndim - 1 else np.fft.fftfreq(n))
            shape = [1] * f.ndim
            shape[ax] = k.size
            spec = spec * np.exp(-0.5 * (k * s) ** 2).reshape(shape)
        return sfft.irfftn(spec, s=f.shape)
    out = f
    for ax, s in enumerate(width):
        half = int(math.ceil(6 * s))
        t = np.arange(-half, half + 1)
        ker = np.exp(-0.5 * (t / s) ** 2)
        ker /= ker.sum()
        shape = [1] * f.ndim
        shape[ax] = ker.size
        out = signal.fftconvolve(out, ker.reshape(shape), mode="same")
    return out


# ----------------------------------------------------------------------
# cutoffs and normalization constants
def unit_ball_volume(d: int) -> float:
    """Volume of the unit ball in d dimensions (2 for d = 1)."""
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def shell_moment(k: float, d: int, r: float) -> float:
    """``int_{1 <= |x| <= r} |x|^k d^d x``."""
    area = d * unit_ball_volume(d)
    e = k + d
    if e == 0:
        return area * math.log(r)
    return area * (r**e - 1.0) / e


def z_v(d: int, r: float, N: int, scheme: str = "continuum") -> float:
    """Normalization ``Z_V = d^2 / (N Omega^2 (r^d - 1)^2)``.

    ``Omega`` is the unit-ball volume, so ``Omega (r^d - 1)`` is the shell
    volume in units of ``a^d``. The stratified lattice uses its site count
    ``n_r`` in place of the shell width and carries an extra factor two, so
    ``Z_V = 2 / (N n_r^2)``; for integer ``r`` this is twice the continuum value.
    """
    if scheme not in SCHEMES:
        raise InvalidConfigError(f"unknown scheme {scheme!r}")
    if not r > 1:
        raise InvalidConfigError("cutoff ratio r must exceed 1")
    if scheme == "stratified":
        if d != 1:
            raise InvalidConfigError("the stratified scheme is one-dimensional")
        # lattice site count replaces the shell width 2 (r - 1); equal for integer r
        n_r = lattice_offsets_set(r).size
        return 2.0 / (N * n_r * n_r)
    return d * d / (N * unit_ball_volume(d) ** 2 * (r**d - 1.0) ** 2)


def lattice_offsets_set(r: float) -> np.ndarray:
    """Half-integer lattice offsets ``s`` with ``1 <= |s| <= r``."""
    pos = np.arange(1.5, r + 1e-12, 1.0)
    return np.concatenate([-pos[::-1], pos])


def pair_constant(d: int, r: float, scheme: str = "continuum") -> float:
    """Per-center pair sum of a flat density, in units of ``a^-2``.

    For the continuum this is ``M_0 M_-2`` (shell volume times the shell
    integral of ``|x|^-2``); for the stratified lattice it is the exact
    lattice sum ``n sum 1/s^2 - (sum 1/s)^2``.
    """
    if scheme == "stratified":
        if d != 1:
            raise InvalidConfigError("the stratified scheme is one-dimensional")
        s = lattice_offsets_set(r)
        return float(s.size * np.sum(1.0 / s**2) - np.sum(1.0 / s) ** 2)
    return shell_moment(0, d, r) * shell_moment(-2, d, r)


@dataclass
class CutoffSpec:
    """UV/IR cutoffs for an ensemble of ``N`` events in ``d`` dimensions.

    ``a`` is the UV cutoff on the grid (or None for model-based specs),
    ``R = L N^(-1/d)`` the IR cutoff at the mean density, ``r = R / a_bar``
    with ``a_bar = (N rho_bar)^(-1/d)`` and ``rho_bar = int rho^2``.
    In ``ratio`` mode the outer shell radius is ``r a(z)``; in ``uniform``
    mode it is ``R`` everywhere.
    """

    N: int
    d: int
    L: float
    R: float
    r: float
    a_bar: float
    a: np.ndarray | None = None
    mode: str = "ratio"
    density: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    fixed_a: float | None = None

    def a_at(self, points: np.ndarray) -> np.ndarray:
        """UV cutoff at arbitrary points, shape (n,). Infinite where rho = 0."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if self.fixed_a is not None:
            return np.full(pts.shape[0], self.fixed_a)
        rho = np.asarray(self.density(pts), dtype=float).reshape(-1)
        out = np.full(rho.shape, np.inf)
        pos = rho > 0
        out[pos] = (self.N * rho[pos]) ** (-1.0 / self.d)
        return out

    def outer(self, a: np.ndarray) -> np.ndarray:
        if self.mode == "ratio":
            return self.r * a
        return np.full_like(a, self.R)

    @classmethod
    def uniform(cls, a: float, R: float, N: int = 1, d: int = 1) -> CutoffSpec:
        """Position-independent shell ``[a, R]`` (used for unit tests)."""
        return cls(N=N, d=d, L=R * N ** (1.0 / d), R=R, r=R / a, a_bar=a, mode="uniform", fixed_a=a)


def cutoffs(state: CoarseState, L: float, mode: str = "ratio") -> CutoffSpec:
    """Cutoffs from a gridded density (``a`` interpolated between nodes)."""
    if not L > 0:
        raise InvalidConfigError("L must be positive")
    if mode not in ("ratio", "uniform"):
        raise InvalidConfigError("mode must be 'ratio' or 'uniform'")
    g = state.grid
    N, d = state.N, g.d
    rho = state.rho
    a = np.full(rho.shape, np.inf)
    pos = rho > 0
    a[pos] = (N * rho[pos]) ** (-1.0 / d)
    if (~pos).any():
        log.info("%d grid points with rho = 0 are excluded from the pair sum", int((~pos).sum()))
    rho_bar = g.integrate(rho * rho) / g.integrate(rho)
    from scipy.interpolate import RegularGridInterpolator

    axes = g.axes()
    values = rho
    if g.periodic:
        axes = [np.append(ax, ax[-1] + h) for ax, h in zip(axes, g.spacing)]
        values = np.pad(rho, [(0, 1)] * d, mode="wrap")
    interp = RegularGridInterpolator(axes, values, bounds_error=False, fill_value=0.0)

    def density(pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=float)
        if g.periodic:
            p = np.array(g.lower) + np.mod(p - np.array(g.lower), np.array(g.lengths))
        return interp(p)

    R = L * N ** (-1.0 / d)
    a_bar = (N * rho_bar) ** (-1.0 / d)
    return CutoffSpec(N, d, L, R, R / a_bar, a_bar, a, mode, density)


def cutoffs_from_model(model: DensityModel, N: int, L: float, d: int = 1, mode: str = "ratio") -> CutoffSpec:
    """Cutoffs from an analytic product density."""
    if not L > 0:
        raise InvalidConfigError("L must be positive")
    rho_bar = model.power_integral_nd(2, d)
    R = L * N ** (-1.0 / d)
    a_bar = (N * rho_bar) ** (-1.0 / d)
    return CutoffSpec(N, d, L, R, R / a_bar, a_bar, None, mode, lambda p: model.pdf_nd(np.atleast_2d(p)))


def length_for_ratio(model: DensityModel, r: float, d: int = 1) -> float:
    """The fixed length ``L`` that yields cutoff ratio ``r`` for ``model``."""
    return r / model.power_integral_nd(2, d) ** (1.0 / d)


# ----------------------------------------------------------------------
# discrete estimator
@dataclass
class PastLinks:
    """Immediate-past displacements ``z_I - z_K`` of every sample, CSR form.

    Entries ``ptr[I]:ptr[I+1]`` belong to sample ``I``. ``past_ids`` names the
    past event of each entry; when present, the estimator groups samples
    that share a past event. ``lattice``, ``deviation`` and ``lattice_scale``
    are set by the stratified generator: ``offset = lattice_scale * lattice
    + deviation`` with the deviation known to full relative precision.
    """

    ptr: np.ndarray
    offsets: np.ndarray
    past_ids: np.ndarray | None = None
    lattice: np.ndarray | None = None
    deviation: np.ndarray | None = None
    lattice_scale: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.ptr = np.asarray(self.ptr, dtype=np.int64)
        off = np.asarray(self.offsets, dtype=float)
        if off.ndim == 1:
            off = off[:, None]
        self.offsets = off
        if self.ptr[0] != 0 or self.ptr[-1] != off.shape[0] or np.any(np.diff(self.ptr) < 0):
            raise ShapeError("ptr must be a non-decreasing offset array covering all entries")

    @property
    def n_samples(self) -> int:
        return self.ptr.size - 1

    @classmethod
    def from_lists(cls, per_sample: Sequence[np.ndarray], past_ids: Sequence[Sequence[int]] | None = None) -> PastLinks:
        arrs = [np.atleast_2d(np.asarray(x, dtype=float)) if np.size(x) else None for x in per_sample]
        d = next((a.shape[1] for a in arrs if a is not None), 1)
        arrs = [a if a is not None else np.zeros((0, d)) for a in arrs]
        ptr = np.zeros(len(arrs) + 1, dtype=np.int64)
        np.cumsum([a.shape[0] for a in arrs], out=ptr[1:])
        ids = None if past_ids is None else np.concatenate([np.asarray(p, dtype=np.int64) for p in past_ids])
        return cls(ptr, np.vstack(arrs) if arrs else np.zeros((0, d)), ids)


@dataclass
class VarietyParts:
    total: float
    reduced: float | None
    reference: float | None
    Z_V: float
    groups: int
    partial_groups: int
    r: float = float("nan")


def _star_variety(samples, pasts: PastLinks, cutoff: CutoffSpec, Z: float, scheme: str) -> VarietyParts:
    d = samples.shape[1]
    owner = np.repeat(np.arange(pasts.n_samples), np.diff(pasts.ptr))
    order = np.argsort(pasts.past_ids, kind="stable")
    ids = pasts.past_ids[order]
    x = pasts.offsets[order]
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    centers = samples[owner[order[starts]]] - x[starts]
    a_g = cutoff.a_at(centers)
    R_g = cutoff.outer(a_g)
    gsize = np.diff(np.r_[starts, ids.size])
    a_e = np.repeat(a_g, gsize)
    R_e = np.repeat(R_g, gsize)
    dist = np.sqrt(np.einsum("ij,ij->i", x, x))
    inshell = np.isfinite(a_e) & (dist >= a_e) & (dist <= R_e)
    stratified = scheme == "stratified" and pasts.lattice is not None
    if stratified:
        # membership by exact lattice label: sites on the outer radius would
        # otherwise be decided by rounding of the O(1/N) deviation
        lab = np.abs(pasts.lattice[order])
        inshell = np.isfinite(a_e) & (lab >= 1.0) & (lab <= cutoff.r + 1e-12)
    if not inshell.any():
        warnings.warn("no separation falls inside the cutoff shell", EmptyShellWarning, stacklevel=3)
        return VarietyParts(0.0, 0.0, 0.0, Z, int(starts.size), 0)
    v = np.where(inshell[:, None], x / np.where(dist > 0, dist * dist, 1.0)[:, None], 0.0)
    n_g = np.add.reduceat(inshell.astype(float), starts)
    s1 = np.add.reduceat(v, starts, axis=0)
    s2 = np.add.reduceat(np.einsum("ij,ij->i", v, v), starts)
    B = n_g * s2 - np.einsum("ij,ij->i", s1, s1)
    B[n_g < 2] = 0.0

    if stratified:
        if d != 1:
            raise InvalidConfigError("the stratified scheme is one-dimensional")
        s = pasts.lattice[order]
        y = pasts.deviation[order]
        ag = pasts.lattice_scale[order]
        s_set = lattice_offsets_set(cutoff.r)
        n_r = s_set.size
        kappa = pair_constant(1, cutoff.r, "stratified")
        ref_scale = ag[starts]
        ref = kappa / ref_scale**2
        full = n_g == n_r
        # exact B - B_lattice for complete lattice shells: with u = 1/(a s)
        # and du = 1/x - u = -y / (x a s), and sum(u) = 0 by symmetry,
        # B - B_lat = n sum(2 u du + du^2) - (sum du)^2.
        xs = x[:, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(inshell, 1.0 / (ag * s), 0.0)
            du = np.where(inshell, -y / (xs * ag * s), 0.0)
        t1 = np.add.reduceat(2.0 * u * du + du * du, starts)
        t2 = np.add.reduceat(du, starts)
        red = np.where(full, n_r * t1 - t2 * t2, B - ref)
        partial = int((~full).sum())
    else:
        kappa = pair_constant(d, cutoff.r, "continuum")
        finite = np.isfinite(a_g)
        ref = np.where(finite, kappa / np.where(finite, a_g, 1.0) ** 2, 0.0)
        red = B - ref
        partial = 0
    return VarietyParts(
        total=Z * math.fsum(B),
        reduced=Z * math.fsum(red),
        reference=Z * math.fsum(ref),
        Z_V=Z,
        groups=int(starts.size),
        partial_groups=partial,
    )


def discrete_acausal_variety(
    samples: np.ndarray,
    pasts: PastLinks | Sequence[np.ndarray],
    cutoff: CutoffSpec,
    Z_V: float | None = None,
    scheme: str = "continuum",
    box: Sequence[float] | None = None,
    return_parts: bool = False,
) -> float | VarietyParts:
    """``Z_V``-normalized acausal pair sum of past-displacement views.

    Pair mode (no ``past_ids``): every sample gets the view
    ``V_I = sum_K x_IK / |x_IK|^2`` over its past offsets, and unordered
    sample pairs whose separation lies in the shell contribute
    ``|V_I - V_J|^2``. The shell of a pair uses the mean of the two
    samples' cutoffs. ``box`` gives periodic lengths per axis (0 = open).

    Star mode (``past_ids`` given): samples sharing a past event ``K`` are
    compared through ``v = x / |x|^2`` with ``x = z_I - z_K``, restricted
    to ``a_K <= |x| <= R_K``. With ``return_parts=True`` the reference pair
    sum of a flat density is also subtracted center by center, which
    isolates the density-gradient part of the variety.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if not isinstance(pasts, PastLinks):
        pasts = PastLinks.from_lists(pasts)
    if pasts.n_samples != x.shape[0]:
        raise ShapeError("pasts must list entries for every sample")
    if scheme not in SCHEMES:
        raise InvalidConfigError(f"unknown scheme {scheme!r}")
    d = x.shape[1]
    Z = z_v(d, cutoff.r, cutoff.N, scheme) if Z_V is None else float(Z_V)
    if pasts.past_ids is not None:
        parts = _star_variety(x, pasts, cutoff, Z, scheme)
        return parts if return_parts else parts.total
    off = pasts.offsets
    dist2 = np.einsum("ij,ij->i", off, off)
    ok = dist2 > 0
    contrib = np.zeros_like(off)
    contrib[ok] = off[ok] / dist2[ok, None]
    owner = np.repeat(np.arange(pasts.n_samples), np.diff(pasts.ptr))
    V = np.zeros((pasts.n_samples, d))
    np.add.at(V, owner, contrib)
    a = cutoff.a_at(x)
    R = cutoff.outer(a)
    boxv = np.zeros(d) if box is None else np.asarray(box, dtype=float)
    if x.shape[0] >= 2:
        raw = kernels.pair_shell_sum(x, V, np.where(np.isfinite(a), a, 1e300), np.where(np.isfinite(R), R, 0.0), boxv)
    else:
        raw = 0.0
    if raw == 0.0:
        warnings.warn("no pair separation falls inside the cutoff shell", EmptyShellWarning, stacklevel=2)
    total = Z * raw
    if return_parts:
        return VarietyParts(total, None, None, Z, 0, 0)
    return total


# ----------------------------------------------------------------------
# continuum terms
def _sqrt_forward_sq(f: np.ndarray, grid: Grid, step: int = 1) -> float:
    """``sum_axes int |d_a f|^2`` with forward differences at spacing ``step h``."""
    total = 0.0
    for ax, h in enumerate(grid.spacing):
        g = f[tuple(slice(None, None, step) for _ in range(f.ndim))] if step > 1 else f
        hh = h * step
        if grid.periodic and all(n % step == 0 for n in f.shape):
            diff = np.roll(g, -1, axis=ax) - g
        else:
            diff = np.diff(g, axis=ax)
        vol = grid.cell_volume * step ** grid.d
        total += float(np.sum(diff * diff)) / hh**2 * vol
    return total


def fisher_information(state: CoarseState, check: bool = True, tol: float = 0.10) -> float:
    """``int rho |grad rho / rho|^2 = 4 int |grad sqrt(rho)|^2``.

    Forward differences of ``sqrt(rho)`` (second order at cell faces). With
    ``check`` the value is recomputed on every second node and a relative
    change above ``tol`` raises :class:`ResolutionError`.
    """
    psi = np.sqrt(np.maximum(state.rho, 0.0))
    fine = 4.0 * _sqrt_forward_sq(psi, state.grid)
    if check and min(state.grid.shape) >= 8:
        coarse = 4.0 * _sqrt_forward_sq(psi, state.grid, step=2)
        scale = max(abs(fine), 1e-12 * _rho_scale(state))
        if abs(coarse - fine) > tol * scale:
            raise ResolutionError(
                f"Fisher term changes by {abs(coarse - fine) / scale:.1%} between h and 2h; refine the grid"
            )
    return fine


def _rho_scale(state: CoarseState) -> float:
    L2 = min(state.grid.lengths) ** 2
    return state.grid.integrate(state.rho) / L2


def laplacian(f: np.ndarray, grid: Grid) -> np.ndarray:
    """3-point Laplacian per axis; open boundaries use one-sided copies."""
    out = np.zeros_like(f)
    for ax, h in enumerate(grid.spacing):
        if grid.periodic:
            out += (np.roll(f, -1, ax) - 2 * f + np.roll(f, 1, ax)) / h**2
        else:
            pad = np.pad(f, [(1, 1) if k == ax else (0, 0) for k in range(f.ndim)], mode="edge")
            sl = lambda a, b: tuple(slice(a, b) if k == ax else slice(None) for k in range(f.ndim))
            out += (pad[sl(2, None)] - 2 * f + pad[sl(None, -2)]) / h**2
    return out


def quantum_potential(state: CoarseState, m: float = 1.0, hbar: float = 1.0, floor: float = 1e-12) -> np.ndarray:
    """Pointwise ``Q = -(hbar^2 / 2m) lap(sqrt rho) / sqrt rho``; 0 where rho <= floor."""
    psi = np.sqrt(np.maximum(state.rho, 0.0))
    lap = laplacian(psi, state.grid)
    out = np.zeros_like(psi)
    ok = state.rho > floor
    out[ok] = -(hbar**2 / (2 * m)) * lap[ok] / psi[ok]
    return out


def bohm_functional(state: CoarseState, m: float = 1.0, hbar: float = 1.0, check: bool = True) -> float:
    """``(hbar^2 / 8m) int rho |grad rho / rho|^2``."""
    return hbar**2 / (8.0 * m) * fisher_information(state, check=check)


def laplacian_fisher(state: CoarseState, floor: float = 1e-300) -> float:
    """``int rho (lap rho / rho)^2``."""
    lap = laplacian(state.rho, state.grid)
    ok = state.rho > floor
    return state.grid.integrate(np.where(ok, lap * lap / np.where(ok, state.rho, 1.0), 0.0))


def correction_prefactor(N: int, d: int, r: float) -> float:
    """``r^2 N^(-2/d)``."""
    return r * r * N ** (-2.0 / d)


def nonlinear_correction(state: CoarseState, cutoff: CutoffSpec, m: float = 1.0, hbar: float = 1.0) -> float:
    """``-(hbar^2 / 8m) N^(-2/d) r^2 int rho (lap rho / rho)^2``."""
    return -(hbar**2) / (8.0 * m) * correction_prefactor(cutoff.N, cutoff.d, cutoff.r) * laplacian_fisher(state)


@dataclass
class VarietyReport:
    discrete: float
    fisher_term: float
    constant_term: float
    correction_term: float
    Z_V: float
    inverse_R2: float = float("nan")
    reduced: float = float("nan")

    @property
    def prediction(self) -> float:
        """Continuum constant minus Fisher term."""
        return self.constant_term - self.fisher_term

    def to_dict(self) -> dict:
        out = asdict(self)
        out["prediction"] = self.prediction
        return out

    def to_csv(self, header: str | None = None) -> str:
        return _csv([self.to_dict()], header)


def continuum_variety(
    state: CoarseState,
    cutoff: CutoffSpec,
    scheme: str = "continuum",
    discrete: float | VarietyParts | None = None,
) -> VarietyReport:
    """Continuum terms of the variety expansion on the state's grid.

    ``constant_term`` is ``Z_V`` times the flat-density pair sum summed over
    centers, ``Z_V N kappa int rho / a^2``; ``inverse_R2`` is ``int rho / R^2``.
    """
    g = state.grid
    N, d = state.N, g.d
    F = fisher_information(state)
    Z = z_v(d, cutoff.r, N, scheme)
    kappa = pair_constant(d, cutoff.r, scheme)
    rho = state.rho
    pos = rho > 0
    inv_a2 = np.zeros_like(rho)
    inv_a2[pos] = (N * rho[pos]) ** (2.0 / d)
    const = Z * N * kappa * g.integrate(rho * inv_a2)
    if cutoff.mode == "ratio":
        inv_R2 = g.integrate(rho * inv_a2) / cutoff.r**2
    else:
        inv_R2 = g.integrate(rho) / cutoff.R**2
    corr = correction_prefactor(N, d, cutoff.r) * laplacian_fisher(state)
    disc, red = float("nan"), float("nan")
    if isinstance(discrete, VarietyParts):
        disc = discrete.total
        red = discrete.reduced if discrete.reduced is not None else float("nan")
    elif discrete is not None:
        disc = float(discrete)
    return VarietyReport(disc, F, const, corr, Z, inv_R2, red)


# ----------------------------------------------------------------------
# sample generation
def _newton_deviation(model: DensityModel, c: np.ndarray, x0: np.ndarray, a: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Solve ``int_c^{c+x} rho = s / N`` for ``y = x - a s``.

    With ``rho(c) a = 1/N`` the equation reads
    ``rho(c) y + int_0^x (rho(c+t) - rho(c)) dt = 0``; the increment form
    keeps ``y`` accurate to full relative precision.
    """
    rc = model.pdf(c)
    y = x0 - a * s
    with np.errstate(all="ignore"):
        for _ in range(6):
            x = a * s + y
            G = rc * y + model.mass_increment(c, x)
            fx = model.pdf(c + x)
            step = np.where(fx > 0, G / fx, 0.0)
            y_new = y - step
            y = np.where(np.isfinite(y_new), y_new, y)
    return y


def stratified_history(
    model: DensityModel,
    N: int,
    r: float,
    theta: float,
) -> tuple[np.ndarray, PastLinks]:
    """Samples and past events on interleaved quantile lattices (1-D).

    Sample ``j`` sits at quantile ``(j + theta) / N`` and past event ``i`` at
    ``(i + theta + 1/2) / N``. Every sample within ``r a_i`` of past event
    ``i`` is linked to it, with lattice label ``s = j - i - 1/2``. For
    periodic models the lattices wrap around the period.
    """
    if not (0.0 <= theta < 1.0):
        raise InvalidConfigError("theta must lie in [0, 1)")
    periodic = model.period is not None
    j = np.arange(N)
    i = np.arange(N)
    uc = (i + theta + 0.5) / N
    if not periodic:
        i = i[uc < 1.0]
        uc = uc[uc < 1.0]
    c = model.ppf(uc)
    a = 1.0 / (N * model.pdf(c))
    s_cand = np.arange(0.5, r + 0.5 + 1e-9, 1.0)
    s_cand = np.concatenate([-s_cand[::-1], s_cand])
    jj = i[:, None] + s_cand[None, :] + 0.5
    jj = np.rint(jj).astype(np.int64)
    owner = np.repeat(np.arange(c.size), s_cand.size)
    jsel = jj.reshape(-1)
    s = np.tile(s_cand, c.size)
    if not periodic:
        keep = (jsel >= 0) & (jsel < N)
        owner, jsel, s = owner[keep], jsel[keep], s[keep]
    x0 = model.ppf((jsel + theta) / N) - c[owner]
    y = _newton_deviation(model, c[owner], x0, a[owner], s)
    xs = a[owner] * s + y
    sample_idx = np.mod(jsel, N) if periodic else jsel
    # regroup entries by sample
    order = np.argsort(sample_idx, kind="stable")
    ptr = np.zeros(N + 1, dtype=np.int64)
    np.cumsum(np.bincount(sample_idx, minlength=N), out=ptr[1:])
    zs = model.ppf((j + theta) / N)
    if periodic:
        # sample coordinate consistent with each entry's center: keep the
        # unwrapped center so that sample - offset recovers it
        zs = np.mod(zs, model.period)
    pasts = PastLinks(
        ptr,
        xs[order][:, None],
        past_ids=i[owner][order],
        lattice=s[order],
        deviation=y[order],
        lattice_scale=a[owner][order],
    )
    return zs[:, None], pasts


def random_history(
    model: DensityModel,
    N: int,
    cutoff: CutoffSpec,
    rng: np.random.Generator,
    d: int = 1,
) -> tuple[np.ndarray, PastLinks]:
    """i.i.d. samples and i.i.d. past events; each sample links to every past
    event whose shell contains it."""
    samples = model.sample_nd(rng, N, d)
    centers = model.sample_nd(rng, N, d)
    box = None
    if model.period is not None:
        samples = np.mod(samples, model.period)
        centers = np.mod(centers, model.period)
        box = model.period
    a = cutoff.a_at(centers)
    outer = cutoff.outer(a)
    tree = cKDTree(samples, boxsize=box)
    hits = tree.query_ball_point(centers, np.where(np.isfinite(outer), outer, 0.0))
    owner_s, past, off = [], [], []
    for k, lst in enumerate(hits):
        if not lst:
            continue
        lst = np.asarray(lst, dtype=np.int64)
        dx = samples[lst] - centers[k]
        if box is not None:
            dx -= box * np.round(dx / box)
        owner_s.append(lst)
        past.append(np.full(lst.size, k))
        off.append(dx)
    if owner_s:
        owner_s = np.concatenate(owner_s)
        past = np.concatenate(past)
        off = np.vstack(off)
    else:
        owner_s = np.zeros(0, dtype=np.int64)
        past = np.zeros(0, dtype=np.int64)
        off = np.zeros((0, d))
    order = np.argsort(owner_s, kind="stable")
    ptr = np.zeros(N + 1, dtype=np.int64)
    np.cumsum(np.bincount(owner_s, minlength=N), out=ptr[1:])
    # the sample coordinate must reproduce the center as sample - offset
    return samples, PastLinks(ptr, off[order], past_ids=past[order])


# ----------------------------------------------------------------------
# convergence study
def _csv(rows: list[dict], header: str | None = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write(header if header.endswith("\n") else header + "\n")
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


@dataclass
class ConvergenceTable:
    rows: list[dict]
    slope: float
    intercept: float
    model: str
    scheme: str

    def to_csv(self, header: str | None = None) -> str:
        return _csv(self.rows, header)

    def save(self, path: str | Path, header: str | None = None) -> None:
        Path(path).write_text(self.to_csv(header))


def model_variety(
    density_model: DensityModel,
    N: int,
    L: float,
    seed: int,
    d: int = 1,
    scheme: str = "stratified",
) -> tuple[VarietyReport, VarietyParts]:
    """Discrete variety of an ``N``-sample history drawn from an analytic model,
    with the continuum terms of the same model.

    The stratified lattice offset is drawn from the ``coarse_grain.lattice``
    substream of ``seed``; random histories use ``coarse_grain.random.<N>``.
    ``parts.r`` holds the cutoff ratio actually used.
    """
    if scheme not in ("stratified", "random"):
        raise InvalidConfigError("scheme must be 'stratified' or 'random'")
    if scheme == "stratified" and d != 1:
        raise InvalidConfigError("the stratified scheme is one-dimensional")
    if N < 2:
        raise InvalidConfigError("N must be >= 2")
    cut = cutoffs_from_model(density_model, N, L, d)
    if not cut.r > 1:
        raise InvalidConfigError(
            f"L={L:g} gives cutoff ratio r={cut.r:.3g} <= 1, so the shell [a, r a] is empty; "
            f"L={length_for_ratio(density_model, 4.0, d):.4g} gives r=4"
        )
    if scheme == "stratified":
        theta = float(substream(seed, "coarse_grain.lattice").random())
        samples, pasts = stratified_history(density_model, N, cut.r, theta)
    else:
        samples, pasts = random_history(density_model, N, cut, substream(seed, f"coarse_grain.random.{N}"), d)
    parts = discrete_acausal_variety(samples, pasts, cut, scheme=scheme, return_parts=True)
    parts.r = cut.r
    F = density_model.fisher_nd(d)
    rho_pow = density_model.power_integral_nd(1.0 + 2.0 / d, d)
    kappa = pair_constant(d, cut.r, scheme)
    const = parts.Z_V * N * kappa * N ** (2.0 / d) * rho_pow
    corr = correction_prefactor(N, d, cut.r) * density_model.laplacian_fisher_nd(d)
    inv_R2 = N ** (2.0 / d) * rho_pow / cut.r**2
    report = VarietyReport(parts.total, F, const, corr, parts.Z_V, inv_R2, parts.reduced)
    return report, parts


def convergence_study(
    density_model: DensityModel,
    N_list: Sequence[int],
    L: float,
    seed: int,
    d: int = 1,
    scheme: str = "stratified",
) -> ConvergenceTable:
    """Discrete variety against the continuum expansion for several N.

    For each N the table lists the discrete total, its flat-density
    reference, the reduced variety (total minus reference) and the
    continuum prediction ``constant - Fisher``. ``deviation`` is
    ``|reduced + Fisher|``: the reference constant is a lattice sum that the
    continuum integral reproduces only to ``O(1/N)``, so the physics
    comparison is made with the constant removed. The log-log slope of
    ``deviation`` against N is fitted at the end.
    """
    Ns = [int(n) for n in N_list]
    if len(Ns) < 3:
        raise FitError("a convergence fit needs at least three N values")
    if any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise InvalidConfigError("N_list must be strictly ascending")
    if scheme not in ("stratified", "random"):
        raise InvalidConfigError("scheme must be 'stratified' or 'random'")
    if scheme == "stratified" and d != 1:
        raise InvalidConfigError("the stratified scheme is one-dimensional")
    rows = []
    for N in Ns:
        report, parts = model_variety(density_model, N, L, seed, d, scheme)
        rows.append(
            {
                "N": N,
                "r": parts.r,
                "Z_V": parts.Z_V,
                "discrete": parts.total,
                "reference": parts.reference,
                "reduced": parts.reduced,
                "constant_continuum": report.constant_term,
                "continuum": report.prediction,
                "fisher": report.fisher_term,
                "deviation": abs(parts.reduced + report.fisher_term),
                "partial_groups": parts.partial_groups,
            }
        )
    F = rows[0]["fisher"]
    dev = np.array([row["deviation"] for row in rows])
    if not np.all(np.isfinite(dev)):
        raise FitError("non-finite deviation; cannot fit")
    scale = max(abs(F), max(abs(row["reduced"]) for row in rows), 1e-300)
    if np.all(dev <= 1e-12 * scale):
        # exact agreement (e.g. a flat density): nothing to fit
        return ConvergenceTable(rows, float("nan"), float("nan"), density_model.name, scheme)
    if np.any(dev <= 0):
        raise FitError("some deviations vanish exactly; a log-log fit is undefined")
    slope, intercept = np.polyfit(np.log(Ns), np.log(dev), 1)
    return ConvergenceTable(rows, float(slope), float(intercept), density_model.name, scheme)
