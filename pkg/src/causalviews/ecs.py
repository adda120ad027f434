"""Energetic causal sets: construction, conservation, views and variety.

Events are labelled ``0 .. N-1``. A link ``K -> J`` carries a spatial
momentum vector ``p``; an interior event (one with both parents and
children) must conserve the vector sum of its momenta.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterator, NamedTuple

import numpy as np

from . import kernels
from .errors import (
    DegenerateEventError,
    EventLookupError,
    InvalidConfigError,
    MalformedHistoryError,
    ShapeError,
    UndefinedVarietyError,
)
from .rng import substream

EPS_P = 1e-9
"""Links with ``|p|`` below this are excluded from weighted (w > 0) views."""


class CausalLink(NamedTuple):
    source: int
    target: int
    momentum: np.ndarray


@dataclass(frozen=True)
class View:
    event: int
    weight: float
    vector: np.ndarray


def _csr(keys: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Group link indices by ``keys``; returns (ptr, perm)."""
    perm = np.argsort(keys, kind="stable")
    counts = np.bincount(keys, minlength=n)
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr, perm.astype(np.int64)


def _ranges(ptr: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Concatenate ``arange(ptr[v], ptr[v+1])`` for every v in ``nodes``."""
    starts = ptr[nodes]
    lens = ptr[nodes + 1] - starts
    total = int(lens.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offs = np.repeat(starts - np.concatenate(([0], np.cumsum(lens)[:-1])), lens)
    return np.arange(total, dtype=np.int64) + offs


@dataclass(frozen=True, eq=False)
class CausalSet:
    """Immutable energetic causal set.

    Parameters
    ----------
    d : int
        Spatial dimension of the momenta.
    n_events : int
        Number of events.
    src, dst : array of int, shape (L,)
        Parent and child of every link.
    p : array, shape (L, d)
        Link momenta.
    n_pre : int
        Upper bound on the number of parents of any event.
    layer : array of int, optional
        Time-slice label of each event for layered histories.
    """

    d: int
    n_events: int
    src: np.ndarray
    dst: np.ndarray
    p: np.ndarray
    n_pre: int
    layer: np.ndarray | None = field(default=None)

    def __post_init__(self) -> None:
        src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim == 1 and self.d == 1:
            p = p.reshape(-1, 1)
        if self.d < 1:
            raise InvalidConfigError("d must be >= 1")
        if self.n_events < 0:
            raise InvalidConfigError("n_events must be >= 0")
        if src.shape != dst.shape or p.shape != (src.size, self.d):
            raise ShapeError(
                f"links need src, dst of equal length and p of shape (L, {self.d}); "
                f"got {src.shape}, {dst.shape}, {p.shape}"
            )
        if src.size and (src.min() < 0 or dst.min() < 0 or max(src.max(), dst.max()) >= self.n_events):
            raise EventLookupError("link endpoint outside 0..n_events-1")
        if np.any(src == dst):
            raise MalformedHistoryError("self-loop links are not allowed")
        if not np.all(np.isfinite(p)):
            raise InvalidConfigError("link momenta must be finite")
        indeg = np.bincount(dst, minlength=self.n_events)
        if self.n_pre < 1:
            raise InvalidConfigError("n_pre must be >= 1")
        if indeg.size and indeg.max(initial=0) > self.n_pre:
            worst = int(np.argmax(indeg))
            raise MalformedHistoryError(
                f"event {worst} has {indeg[worst]} parents, above n_pre={self.n_pre}"
            )
        layer = None
        if self.layer is not None:
            layer = np.asarray(self.layer, dtype=np.int64).reshape(-1)
            if layer.size != self.n_events:
                raise ShapeError("layer must have one entry per event")
            layer.flags.writeable = False
        for arr in (src, dst, p):
            arr.flags.writeable = False
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "layer", layer)
        _ = self.levels  # acyclicity check

    # ------------------------------------------------------------------
    # structure
    @property
    def n_links(self) -> int:
        return int(self.src.size)

    @cached_property
    def _in(self) -> tuple[np.ndarray, np.ndarray]:
        return _csr(self.dst, self.n_events)

    @cached_property
    def _out(self) -> tuple[np.ndarray, np.ndarray]:
        return _csr(self.src, self.n_events)

    @cached_property
    def in_degree(self) -> np.ndarray:
        return np.diff(self._in[0])

    @cached_property
    def out_degree(self) -> np.ndarray:
        return np.diff(self._out[0])

    @property
    def n_c(self) -> int:
        """Largest number of children of any event."""
        return int(self.out_degree.max(initial=0))

    @cached_property
    def levels(self) -> list[np.ndarray]:
        """Events grouped by longest-path depth from a source (Kahn levels)."""
        n = self.n_events
        out_ptr, out_perm = self._out
        child = self.dst[out_perm]
        remaining = self.in_degree.copy()
        frontier = np.flatnonzero(remaining == 0)
        levels = []
        seen = 0
        while frontier.size:
            levels.append(frontier)
            seen += frontier.size
            kids = child[_ranges(out_ptr, frontier)]
            if kids.size == 0:
                break
            np.subtract.at(remaining, kids, 1)
            cand = np.unique(kids)
            frontier = cand[remaining[cand] == 0]
        if seen != n:
            raise MalformedHistoryError(
                f"link graph has a directed cycle ({n - seen} events unreachable in topological sort)"
            )
        return levels

    @cached_property
    def topological_order(self) -> np.ndarray:
        if not self.levels:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.levels)

    @cached_property
    def degenerate(self) -> np.ndarray:
        """Flag per link: momentum norm below ``EPS_P``."""
        return np.linalg.norm(self.p, axis=1) < EPS_P

    @property
    def boundary(self) -> np.ndarray:
        """Events lacking parents or children."""
        return (self.in_degree == 0) | (self.out_degree == 0)

    def _check(self, I: int) -> int:
        if not (0 <= int(I) < self.n_events) or int(I) != I:
            raise EventLookupError(f"unknown event id {I!r}")
        return int(I)

    def in_links(self, I: int) -> np.ndarray:
        I = self._check(I)
        ptr, perm = self._in
        return perm[ptr[I] : ptr[I + 1]]

    def out_links(self, I: int) -> np.ndarray:
        I = self._check(I)
        ptr, perm = self._out
        return perm[ptr[I] : ptr[I + 1]]

    def parents(self, I: int) -> np.ndarray:
        return self.src[self.in_links(I)]

    def children(self, I: int) -> np.ndarray:
        return self.dst[self.out_links(I)]

    @cached_property
    def _link_lookup(self) -> dict[tuple[int, int], int]:
        return {(int(s), int(t)): k for k, (s, t) in enumerate(zip(self.src, self.dst))}

    def link_index(self, K: int, J: int) -> int:
        """Index of the link ``K -> J``."""
        try:
            return self._link_lookup[(int(K), int(J))]
        except KeyError:
            raise EventLookupError(f"no link {K} -> {J}") from None

    def links(self) -> Iterator[CausalLink]:
        for s, t, q in zip(self.src, self.dst, self.p):
            yield CausalLink(int(s), int(t), q)

    # ------------------------------------------------------------------
    # derived sets
    def with_momenta(self, p: np.ndarray) -> CausalSet:
        """Same graph with new link momenta."""
        return CausalSet(self.d, self.n_events, self.src, self.dst, p, self.n_pre, self.layer)

    def disjoint_union(self, other: CausalSet) -> CausalSet:
        if other.d != self.d:
            raise ShapeError("dimension mismatch in disjoint union")
        off = self.n_events
        layer = None
        if self.layer is not None and other.layer is not None:
            layer = np.concatenate([self.layer, other.layer])
        return CausalSet(
            self.d,
            self.n_events + other.n_events,
            np.concatenate([self.src, other.src + off]),
            np.concatenate([self.dst, other.dst + off]),
            np.vstack([self.p, other.p]),
            max(self.n_pre, other.n_pre),
            layer,
        )

    # ------------------------------------------------------------------
    # serialization
    def to_dict(self) -> dict:
        events = []
        for I in range(self.n_events):
            ev = {"id": I, "parents": [int(k) for k in np.sort(self.parents(I))]}
            if self.layer is not None:
                ev["layer"] = int(self.layer[I])
            events.append(ev)
        links = [
            {"src": int(s), "dst": int(t), "p": [float(x) for x in q]}
            for s, t, q in zip(self.src, self.dst, self.p)
        ]
        return {"d": self.d, "n_pre": self.n_pre, "events": events, "links": links}

    @classmethod
    def from_dict(cls, data: dict) -> CausalSet:
        try:
            d = int(data["d"])
            n_pre = int(data["n_pre"])
            events = data["events"]
            links = data["links"]
        except (KeyError, TypeError) as exc:
            raise InvalidConfigError(f"malformed causal-set document: {exc}") from exc
        ids = [int(e["id"]) for e in events]
        if sorted(ids) != list(range(len(ids))):
            raise InvalidConfigError("event ids must be exactly 0..N-1")
        src = np.array([int(l["src"]) for l in links], dtype=np.int64)
        dst = np.array([int(l["dst"]) for l in links], dtype=np.int64)
        p = np.array([l["p"] for l in links], dtype=np.float64).reshape(len(links), d)
        declared = {(int(k), int(e["id"])) for e in events for k in e.get("parents", [])}
        if declared != set(zip(src.tolist(), dst.tolist())):
            raise MalformedHistoryError("event parent lists disagree with the link list")
        layer = None
        if events and all("layer" in e for e in events):
            layer = np.zeros(len(events), dtype=np.int64)
            for e in events:
                layer[int(e["id"])] = int(e["layer"])
        return cls(d, len(events), src, dst, p, n_pre, layer)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), separators=(",", ":"))
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path: str | Path) -> CausalSet:
        if isinstance(text_or_path, Path) or not str(text_or_path).lstrip().startswith("{"):
            text_or_path = Path(text_or_path).read_text()
        return cls.from_dict(json.loads(text_or_path))


EnergeticCausalSet = CausalSet


# ----------------------------------------------------------------------
# generation
Sampler = Callable[[np.random.Generator, int, int], np.ndarray]


def make_sampler(spec: str | dict | Sampler | None) -> Sampler:
    """Build a momentum sampler from a name, a dict or a callable.

    Recognised kinds: ``normal`` (isotropic Gaussian, ``scale``), ``uniform``
    (cube ``[-scale, scale]^d``) and ``drift`` (Gaussian of width ``scale``
    around ``mean``, default unit vector along the first axis).
    """
    if callable(spec):
        return spec
    if spec is None:
        spec = {"kind": "normal"}
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind", "normal")
    scale = float(spec.get("scale", 1.0))
    if scale <= 0:
        raise InvalidConfigError("sampler scale must be positive")
    if kind == "normal":
        return lambda rng, n, d: scale * rng.standard_normal((n, d))
    if kind == "uniform":
        return lambda rng, n, d: rng.uniform(-scale, scale, size=(n, d))
    if kind == "drift":
        mean = spec.get("mean")

        def drift(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
            mu = np.zeros(d)
            mu[0] = 1.0
            if mean is not None:
                mu = np.asarray(mean, dtype=float).reshape(d)
            return mu + scale * rng.standard_normal((n, d))

        return drift
    raise InvalidConfigError(f"unknown momentum sampler {kind!r}")


def generate_layered(
    d: int,
    layers: int,
    events_per_layer: int,
    n_pre: int,
    seed: int,
    momentum_sampler: str | dict | Sampler | None = None,
) -> CausalSet:
    """Random layered history with conservation enforced.

    Each event of layer ``l >= 1`` draws exactly ``n_pre`` distinct parents
    from layer ``l - 1``. Momenta are sampled for every link and then the
    outgoing momenta are fixed by :func:`solve_conservation`.
    """
    if d < 1:
        raise InvalidConfigError("d must be >= 1")
    if layers < 2:
        raise InvalidConfigError("layers must be >= 2")
    if events_per_layer < 1:
        raise InvalidConfigError("events_per_layer must be >= 1")
    if n_pre < 1:
        raise InvalidConfigError("n_pre must be >= 1")
    if n_pre > events_per_layer:
        raise InvalidConfigError(
            f"n_pre={n_pre} exceeds the {events_per_layer} events available in the previous layer"
        )
    sampler = make_sampler(momentum_sampler)
    rng_graph = substream(seed, "ecs.graph")
    rng_p = substream(seed, "ecs.momenta")
    m = events_per_layer
    src_parts, dst_parts = [], []
    for ell in range(1, layers):
        if m * m <= 4_000_000:
            keys = rng_graph.random((m, m))
            picks = np.argpartition(keys, n_pre - 1, axis=1)[:, :n_pre]
        else:
            picks = np.stack([rng_graph.choice(m, n_pre, replace=False) for _ in range(m)])
        picks = np.sort(picks, axis=1)
        child = ell * m + np.repeat(np.arange(m), n_pre)
        src_parts.append((ell - 1) * m + picks.reshape(-1))
        dst_parts.append(child)
    src = np.concatenate(src_parts)
    dst = np.concatenate(dst_parts)
    p = np.asarray(sampler(rng_p, src.size, d), dtype=np.float64).reshape(src.size, d)
    layer = np.repeat(np.arange(layers), m)
    ecs = CausalSet(d, layers * m, src, dst, p, n_pre, layer)
    return solve_conservation(ecs)


def solve_conservation(ecs: CausalSet) -> CausalSet:
    """Equal-split rule: every outgoing link carries incoming-total / n_out.

    Events are processed level by level, so an event's incoming momenta are
    final before its outgoing ones are assigned. Parentless events keep
    their sampled outgoing momenta.
    """
    p = ecs.p.copy()
    in_ptr, in_perm = ecs._in
    out_ptr, out_perm = ecs._out
    outdeg = ecs.out_degree
    for level in ecs.levels[1:]:
        nodes = level[outdeg[level] > 0]
        nodes = nodes[ecs.in_degree[nodes] > 0]
        if nodes.size == 0:
            continue
        counts = ecs.in_degree[nodes]
        links_in = in_perm[_ranges(in_ptr, nodes)]
        seg = np.repeat(np.arange(nodes.size), counts)
        totals = np.zeros((nodes.size, ecs.d))
        np.add.at(totals, seg, p[links_in])
        links_out = out_perm[_ranges(out_ptr, nodes)]
        oseg = np.repeat(np.arange(nodes.size), outdeg[nodes])
        tnorm = np.linalg.norm(totals, axis=1)
        if np.any(tnorm <= EPS_P):
            required = np.zeros((nodes.size, ecs.d))
            np.add.at(required, oseg, p[links_out])
            bad = (tnorm <= EPS_P) & (np.linalg.norm(required, axis=1) > EPS_P)
            if bad.any():
                I = int(nodes[np.argmax(bad)])
                raise DegenerateEventError(
                    f"event {I} has children and nonzero required outflow but zero incoming momentum "
                    f"(|total| <= {EPS_P:g}); equal splitting loses momentum at childless events, so "
                    "incoming totals shrink with depth: use fewer layers or more events per layer"
                )
        p[links_out] = totals[oseg] / outdeg[nodes][oseg, None]
    return ecs.with_momenta(p)


# ----------------------------------------------------------------------
# conservation
@dataclass(frozen=True)
class Residual:
    event: int
    vector: np.ndarray
    boundary: bool


def residuals(ecs: CausalSet) -> tuple[np.ndarray, np.ndarray]:
    """All residual vectors ``sum(in) - sum(out)`` and the boundary mask."""
    r = np.zeros((ecs.n_events, ecs.d))
    np.add.at(r, ecs.dst, ecs.p)
    np.subtract.at(r, ecs.src, ecs.p)
    return r, ecs.boundary


def conservation_residual(ecs: CausalSet, I: int) -> Residual:
    I = ecs._check(I)
    vec = ecs.p[ecs.in_links(I)].sum(axis=0) - ecs.p[ecs.out_links(I)].sum(axis=0)
    return Residual(I, vec, bool(ecs.boundary[I]))


def max_interior_residual(ecs: CausalSet) -> float:
    r, boundary = residuals(ecs)
    interior = ~boundary
    if not interior.any():
        return 0.0
    return float(np.linalg.norm(r[interior], axis=1).max())


# ----------------------------------------------------------------------
# views and variety
def link_weights(p: np.ndarray, w: float, eps_p: float = EPS_P) -> np.ndarray:
    """Per-link factor ``|p|^-w``; zero for excluded near-null links."""
    if w == 0:
        return np.ones(p.shape[0])
    norms = np.linalg.norm(p, axis=1)
    out = np.zeros_like(norms)
    keep = norms >= eps_p if w > 0 else np.ones_like(norms, dtype=bool)
    out[keep] = norms[keep] ** (-float(w))
    return out


def views(ecs: CausalSet, w: float, eps_p: float = EPS_P) -> np.ndarray:
    """View vectors of every event, shape (N, d)."""
    W = np.zeros((ecs.n_events, ecs.d))
    np.add.at(W, ecs.dst, ecs.p * link_weights(ecs.p, w, eps_p)[:, None])
    return W


def view(ecs: CausalSet, I: int, w: float, eps_p: float = EPS_P) -> View:
    links = ecs.in_links(I)
    q = ecs.p[links]
    vec = (q * link_weights(q, w, eps_p)[:, None]).sum(axis=0) if links.size else np.zeros(ecs.d)
    return View(int(I), float(w), vec)


def difference(ecs: CausalSet, I: int, J: int, w: float, eps_p: float = EPS_P) -> float:
    """``D(I, J) = |W_I - W_J|^2``."""
    diff = view(ecs, I, w, eps_p).vector - view(ecs, J, w, eps_p).vector
    return float(diff @ diff)


def total_variety(ecs: CausalSet, w: float, eps_p: float = EPS_P) -> float:
    """Mean of ``D(I, J)`` over unordered pairs.

    Uses ``sum_{I<J} |W_I - W_J|^2 = N sum_I |W_I - mean(W)|^2``.
    """
    N = ecs.n_events
    if N < 2:
        raise UndefinedVarietyError("variety needs at least two events")
    W = views(ecs, w, eps_p)
    Wc = W - W.mean(axis=0)
    spread = math.fsum(np.einsum("ij,ij->i", Wc, Wc))
    return 2.0 * spread / (N - 1)


# ----------------------------------------------------------------------
# causal relations
@dataclass(frozen=True, eq=False)
class CausalRelationTable:
    """Transitive closure stored as packed bit rows.

    Bit ``j`` of row ``i`` is set iff ``i`` strictly precedes ``j``.
    """

    n: int
    bits: np.ndarray

    def reaches(self, I: int, J: int) -> bool:
        return bool((int(self.bits[I, J >> 6]) >> (J & 63)) & 1)

    def related(self, I: int, J: int) -> bool:
        return self.reaches(I, J) or self.reaches(J, I)

    def acausal(self, I: int, J: int) -> bool:
        return I != J and not self.related(I, J)

    def to_dense(self) -> np.ndarray:
        raw = np.ascontiguousarray(self.bits).view(np.uint8)
        return np.unpackbits(raw, axis=1, bitorder="little")[:, : self.n].astype(bool)

    def acausal_mask(self) -> np.ndarray:
        dense = self.to_dense()
        mask = ~(dense | dense.T)
        np.fill_diagonal(mask, False)
        return mask

    def acausal_pairs(self) -> np.ndarray:
        """Unordered acausal pairs ``(I, J)`` with ``I < J``, shape (k, 2)."""
        return np.argwhere(np.triu(self.acausal_mask(), 1))


def causal_relations(ecs: CausalSet) -> CausalRelationTable:
    out_ptr, out_perm = ecs._out
    bits = kernels.closure_bits(ecs.n_events, out_ptr, ecs.dst[out_perm], ecs.topological_order)
    return CausalRelationTable(ecs.n_events, bits)


def acausal_pairs(ecs: CausalSet) -> np.ndarray:
    return causal_relations(ecs).acausal_pairs()


def path_additivity_check(ecs: CausalSet, L: int, J: int, I: int) -> float:
    """``|p(L->I) - (p(L->J) + p(J->I))|`` for a causal triangle."""
    direct = ecs.p[ecs.link_index(L, I)]
    via = ecs.p[ecs.link_index(L, J)] + ecs.p[ecs.link_index(J, I)]
    return float(np.linalg.norm(direct - via))
