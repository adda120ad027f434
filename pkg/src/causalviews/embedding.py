"""Stationary-phase relations between link momenta and event positions z.

At order zero every link satisfies ``z_J - z_K = s p`` with the link scale
``s = g n_pre^2``. The first-order correction in ``g'`` is transverse to
the link momentum.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .ecs import EPS_P, CausalSet, views
from .energy import HamiltonianParams
from .errors import (
    DegenerateDirectionError,
    IncompatibleMomentaError,
    InvalidConfigError,
    ShapeError,
)


@dataclass(frozen=True)
class EmbeddingConfig:
    """Per-event positions ``z``, shape (N, d)."""

    z: np.ndarray

    def __post_init__(self) -> None:
        z = np.array(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, 1)
        if z.ndim != 2:
            raise ShapeError("z must be a 2-D array (events x d)")
        if not np.all(np.isfinite(z)):
            raise InvalidConfigError("z must be finite")
        z.flags.writeable = False
        object.__setattr__(self, "z", z)

    @property
    def d(self) -> int:
        return self.z.shape[1]

    @property
    def n_events(self) -> int:
        return self.z.shape[0]

    def to_csv(self, path: str | Path | None = None, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(header if header.endswith("\n") else header + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["event"] + [f"z{a}" for a in range(self.d)])
        for i, row in enumerate(self.z):
            writer.writerow([i] + [repr(float(x)) for x in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> EmbeddingConfig:
        lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
        rows = list(csv.reader(lines))[1:]
        rows.sort(key=lambda r: int(r[0]))
        return cls(np.array([[float(x) for x in r[1:]] for r in rows]))


@dataclass(frozen=True)
class MomentumSplit:
    longitudinal: np.ndarray
    transverse: np.ndarray
    link: tuple[int, int] | None = None


def projectors(p: np.ndarray, eps_p: float = EPS_P) -> tuple[np.ndarray, np.ndarray]:
    """Longitudinal and transverse projectors of ``p``."""
    p = np.asarray(p, dtype=float).reshape(-1)
    n2 = float(p @ p)
    if not np.sqrt(n2) > eps_p:
        raise DegenerateDirectionError(f"|p| = {np.sqrt(n2):.3g} is below eps_p = {eps_p:g}")
    L = np.outer(p, p) / n2
    return L, np.eye(p.size) - L


def split_momentum(
    p: np.ndarray,
    dp: np.ndarray | None = None,
    link: tuple[int, int] | None = None,
    eps_p: float = EPS_P,
) -> MomentumSplit:
    """Split ``dp`` (default ``p`` itself) along and across ``p``."""
    L, T = projectors(p, eps_p)
    v = np.asarray(p if dp is None else dp, dtype=float).reshape(-1)
    return MomentumSplit(L @ v, T @ v, link)


def _transverse(p: np.ndarray, v: np.ndarray, eps_p: float) -> np.ndarray:
    """Row-wise ``T(p_l) v_l``; rows with ``|p_l| <= eps_p`` are left as zero."""
    n2 = np.einsum("ij,ij->i", p, p)
    ok = np.sqrt(n2) > eps_p
    out = np.zeros_like(v)
    coef = np.einsum("ij,ij->i", p[ok], v[ok]) / n2[ok]
    out[ok] = v[ok] - coef[:, None] * p[ok]
    return out


def link_scale(params: HamiltonianParams, convention: str = "npre2") -> float:
    """Length per unit momentum on a link.

    ``npre2`` gives ``g n_pre^2``; ``sp`` gives ``2 g n_pre`` (the variant
    with a factor two and a single power of n_pre).
    """
    if not params.g > 0:
        raise InvalidConfigError("the embedding relations need g > 0")
    if convention == "npre2":
        return params.g * params.n_pre**2
    if convention == "sp":
        return 2.0 * params.g * params.n_pre
    raise InvalidConfigError(f"unknown link-scale convention {convention!r}")


def _as_z(z, ecs: CausalSet) -> np.ndarray:
    arr = z.z if isinstance(z, EmbeddingConfig) else EmbeddingConfig(z).z
    if arr.shape != (ecs.n_events, ecs.d):
        raise ShapeError(f"z must have shape ({ecs.n_events}, {ecs.d}), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class StationaryMomenta:
    momenta: np.ndarray
    order: int
    scale: float
    fixed_point_residual: float


def stationary_momenta(
    ecs: CausalSet,
    z,
    params: HamiltonianParams,
    order: int = 0,
    convention: str = "npre2",
    eps_p: float = EPS_P,
) -> StationaryMomenta:
    """Link momenta at the stationary point of the effective action.

    Order 0 is ``p = (z_J - z_K) / s``. Order 1 makes one fixed-point sweep:
    views are built from the order-0 momenta (w = 0) and
    ``-(g'/s) T(p0) (W_J - W_K)`` is added. The reported residual is the
    change a second sweep would make.
    """
    zz = _as_z(z, ecs)
    s = link_scale(params, convention)
    p0 = (zz[ecs.dst] - zz[ecs.src]) / s
    if order == 0:
        return StationaryMomenta(p0, 0, s, 0.0)
    if order != 1:
        raise InvalidConfigError("order must be 0 or 1")
    if params.g_prime == 0:
        return StationaryMomenta(p0.copy(), 1, s, 0.0)
    coef = params.g_prime / s

    def sweep(p_base: np.ndarray) -> np.ndarray:
        W = views(ecs.with_momenta(p_base), 0)
        return p0 - coef * _transverse(p_base, W[ecs.dst] - W[ecs.src], eps_p)

    p1 = sweep(p0)
    resid = float(np.abs(sweep(p1) - p1).max(initial=0.0))
    return StationaryMomenta(p1, 1, s, resid)


def classical_velocity_check(ecs: CausalSet, z, params: HamiltonianParams, dt: float) -> float:
    """``max |p - m (z_J - z_K) / dt|`` with ``g = dt / (m n_pre^2)``."""
    if not dt > 0:
        raise InvalidConfigError("dt must be positive")
    zz = _as_z(z, ecs)
    g = dt / (params.m * params.n_pre**2)
    eff = HamiltonianParams(g=g, g_prime=0.0, m=params.m, hbar=params.hbar, n_pre=params.n_pre, Z_V=params.Z_V)
    p = stationary_momenta(ecs, zz, eff, order=0).momenta
    target = params.m * (zz[ecs.dst] - zz[ecs.src]) / dt
    return float(np.abs(p - target).max(initial=0.0))


@dataclass(frozen=True)
class ReconstructedEmbedding:
    embedding: EmbeddingConfig
    link_residual: np.ndarray
    max_residual: float


def _tree_path(parent: np.ndarray, a: int, b: int) -> list[int]:
    """Vertices on the spanning-tree path from ``a`` to ``b``."""
    up_a = [a]
    while parent[up_a[-1]] >= 0:
        up_a.append(int(parent[up_a[-1]]))
    pos = {v: i for i, v in enumerate(up_a)}
    up_b = [b]
    while up_b[-1] not in pos:
        up_b.append(int(parent[up_b[-1]]))
    meet = pos[up_b[-1]]
    return up_a[: meet + 1] + up_b[-2::-1]


def reconstruct_embedding(
    ecs: CausalSet,
    momenta,
    params: HamiltonianParams,
    gauge_event: int = 0,
    tol: float = 1e-8,
    convention: str = "npre2",
    strict: bool = True,
) -> ReconstructedEmbedding:
    """Invert ``z_J - z_K = s p`` for z by least squares.

    A spanning forest gives an exact solution on tree links; loop sums on
    the remaining links are then checked against ``tol`` (relative to the
    largest link displacement). Consistent data are polished by a sparse
    Laplacian solve. Every connected component is pinned at its first event,
    and ``gauge_event`` is placed at the origin.

    With ``strict=False`` inconsistent loops are not an error and the
    least-squares embedding is returned with its per-link residuals.
    """
    p = np.asarray(getattr(momenta, "momenta", momenta), dtype=float)
    if p.ndim == 1 and ecs.d == 1:
        p = p.reshape(-1, 1)
    if p.shape != (ecs.n_links, ecs.d):
        raise ShapeError(f"momenta must have shape ({ecs.n_links}, {ecs.d})")
    ecs._check(gauge_event)
    s = link_scale(params, convention)
    t = s * p
    n = ecs.n_events

    # undirected adjacency in CSR form: (neighbour, link, sign)
    nbr = np.concatenate([ecs.dst, ecs.src])
    lid = np.concatenate([np.arange(ecs.n_links), np.arange(ecs.n_links)])
    sign = np.concatenate([np.ones(ecs.n_links), -np.ones(ecs.n_links)])
    owner = np.concatenate([ecs.src, ecs.dst])
    order = np.argsort(owner, kind="stable")
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(owner, minlength=n), out=ptr[1:])
    nbr, lid, sign = nbr[order], lid[order], sign[order]

    z = np.zeros((n, ecs.d))
    parent = np.full(n, -1, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    tree = np.zeros(ecs.n_links, dtype=bool)
    roots = []
    for start in [gauge_event] + list(range(n)):
        if seen[start]:
            continue
        roots.append(start)
        seen[start] = True
        queue = deque([start])
        while queue:
            v = queue.popleft()
            for e in range(ptr[v], ptr[v + 1]):
                u = nbr[e]
                if not seen[u]:
                    seen[u] = True
                    parent[u] = v
                    tree[lid[e]] = True
                    z[u] = z[v] + sign[e] * t[lid[e]]
                    queue.append(u)

    resid = (z[ecs.dst] - z[ecs.src]) - t
    rnorm = np.linalg.norm(resid, axis=1)
    scale = max(1.0, float(np.abs(t).max(initial=0.0)))
    worst = int(np.argmax(rnorm)) if rnorm.size else 0
    if strict and rnorm.size and rnorm[worst] > tol * scale:
        a, b = int(ecs.src[worst]), int(ecs.dst[worst])
        cycle = _tree_path(parent, a, b) + [a]
        raise IncompatibleMomentaError(
            f"momenta are not path additive: loop {cycle} misses closure by {rnorm[worst]:.3g}",
            cycle,
            float(rnorm[worst]),
        )

    if rnorm.size and rnorm.max() > 0:
        # polish: minimise sum |z_J - z_K - t|^2 with roots held fixed
        free = np.ones(n, dtype=bool)
        free[roots] = False
        idx = -np.ones(n, dtype=np.int64)
        idx[free] = np.arange(free.sum())
        rows = np.arange(ecs.n_links)
        B = sp.csr_matrix(
            (np.concatenate([np.ones(ecs.n_links), -np.ones(ecs.n_links)]),
             (np.concatenate([rows, rows]), np.concatenate([ecs.dst, ecs.src]))),
            shape=(ecs.n_links, n),
        )
        Bf = B[:, np.flatnonzero(free)]
        lap = (Bf.T @ Bf).tocsc()
        rhs = -(Bf.T @ resid)
        if lap.shape[0]:
            dz = spla.splu(lap).solve(np.asarray(rhs))
            z[free] += dz
        resid = (z[ecs.dst] - z[ecs.src]) - t
        rnorm = np.linalg.norm(resid, axis=1)

    z -= z[gauge_event]
    return ReconstructedEmbedding(EmbeddingConfig(z), rnorm, float(rnorm.max(initial=0.0)))


def components(ecs: CausalSet) -> np.ndarray:
    """Connected-component label of every event (links taken undirected)."""
    A = sp.csr_matrix((np.ones(ecs.n_links), (ecs.src, ecs.dst)), shape=(ecs.n_events, ecs.n_events))
    return connected_components(A, directed=False)[1]


def round_trip_error(ecs: CausalSet, z_true, z_rec) -> float:
    """``max |z_rec - z_true|`` after removing one translation per connected component."""
    a = _as_z(z_true, ecs)
    b = _as_z(z_rec, ecs)
    lab = components(ecs)
    diff = b - a
    shift = np.zeros((lab.max(initial=-1) + 1, ecs.d))
    # first event of each component fixes its translation
    first = np.full(shift.shape[0], -1)
    for i in range(ecs.n_events - 1, -1, -1):
        first[lab[i]] = i
    shift = diff[first]
    return float(np.abs(diff - shift[lab]).max(initial=0.0))
