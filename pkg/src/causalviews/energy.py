"""Kinetic (causal surprise) and acausal potential energies of a history."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .ecs import EPS_P, CausalRelationTable, CausalSet, causal_relations, residuals, views
from .errors import InvalidConfigError, ShapeError


@dataclass(frozen=True)
class HamiltonianParams:
    """Couplings of ``H = g T + g' U``.

    ``matched`` builds the quantum-matching choice
    ``g' = g^2 hbar^2 Z_V / (8 m)``. ``g = 0`` is accepted so that ``H = U``
    can be formed, but the embedding relations need ``g > 0``.
    """

    g: float = 1.0
    g_prime: float = 0.0
    m: float = 1.0
    hbar: float = 1.0
    n_pre: int = 1
    Z_V: float = 1.0

    def __post_init__(self) -> None:
        if not self.g >= 0:
            raise InvalidConfigError("g must be non-negative")
        if not self.m > 0:
            raise InvalidConfigError("m must be positive")
        if not self.hbar >= 0:
            raise InvalidConfigError("hbar must be non-negative")
        if self.n_pre < 1:
            raise InvalidConfigError("n_pre must be >= 1")
        if not math.isfinite(self.g_prime):
            raise InvalidConfigError("g_prime must be finite")

    @classmethod
    def matched(cls, g: float, m: float, hbar: float, Z_V: float, n_pre: int = 1) -> HamiltonianParams:
        return cls(g=g, g_prime=g * g * hbar * hbar * Z_V / (8.0 * m), m=m, hbar=hbar, n_pre=n_pre, Z_V=Z_V)

    @property
    def is_matched(self) -> bool:
        target = self.g**2 * self.hbar**2 * self.Z_V / (8.0 * self.m)
        return math.isclose(self.g_prime, target, rel_tol=1e-12, abs_tol=1e-300)


@dataclass
class EnergyReport:
    T: float
    U: float
    H: float
    per_event_surprise: list[tuple[int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def surprise_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["event", "surprise"])
        for ev, s in self.per_event_surprise:
            writer.writerow([ev, repr(float(s))])
        return buf.getvalue()


def surprises(ecs: CausalSet) -> np.ndarray:
    """Surprise of every event; parentless events get 0."""
    W = views(ecs, 0)
    diff = W[ecs.dst] - W[ecs.src]
    D = np.einsum("ij,ij->i", diff, diff)
    acc = np.zeros(ecs.n_events)
    np.add.at(acc, ecs.dst, D)
    return acc**2


def surprise(ecs: CausalSet, I: int) -> float:
    """``|sum_{K in IPast(I)} D(I, K)|^2`` with w = 0 views."""
    links = ecs.in_links(I)
    if links.size == 0:
        return 0.0
    W = views(ecs, 0)
    diff = W[I] - W[ecs.src[links]]
    return float(np.einsum("ij,ij->", diff, diff) ** 2)


def _pair_total(W: np.ndarray) -> float:
    Wc = W - W.mean(axis=0)
    return W.shape[0] * math.fsum(np.einsum("ij,ij->i", Wc, Wc))


def kinetic_energy(
    ecs: CausalSet,
    past: str = "immediate",
    relations: CausalRelationTable | None = None,
) -> float:
    """``T = sum_{I |> J} |W_I - W_J|^2`` over links, w = 0 views.

    ``past="full"`` sums over every causally related pair instead of only
    immediate ones (an experiment toggle).
    """
    W = views(ecs, 0)
    if past == "immediate":
        diff = W[ecs.dst] - W[ecs.src]
        return math.fsum(np.einsum("ij,ij->i", diff, diff))
    if past == "full":
        rel = relations if relations is not None else causal_relations(ecs)
        return _pair_total(W) - kernels.acausal_pair_sum(W, rel.bits)
    raise InvalidConfigError(f"past must be 'immediate' or 'full', got {past!r}")


def kinetic_quadratic_form(ecs: CausalSet, uniform_D: int | None = None) -> float:
    """``sum_links (D_I / 2) |p|^2`` with ``D_I`` the parent count of the child.

    ``uniform_D`` overrides every ``D_I`` (e.g. ``n_pre``).
    """
    D = ecs.in_degree[ecs.dst].astype(float) if uniform_D is None else np.full(ecs.n_links, float(uniform_D))
    return math.fsum(0.5 * D * np.einsum("ij,ij->i", ecs.p, ecs.p))


def potential_energy(
    ecs: CausalSet,
    relations: CausalRelationTable | None = None,
    eps_p: float = EPS_P,
) -> float:
    """``U = sum_{I <> J} |W_I - W_J|^2`` over unordered acausal pairs, w = 2."""
    rel = relations if relations is not None else causal_relations(ecs)
    W = views(ecs, 2, eps_p)
    return float(kernels.acausal_pair_sum(W, rel.bits))


def hamiltonian(
    ecs: CausalSet,
    params: HamiltonianParams,
    relations: CausalRelationTable | None = None,
) -> EnergyReport:
    T = kinetic_energy(ecs)
    U = potential_energy(ecs, relations)
    s = surprises(ecs)
    return EnergyReport(T, U, params.g * T + params.g_prime * U, [(i, float(v)) for i, v in enumerate(s)])


def effective_action(
    ecs: CausalSet,
    z: np.ndarray,
    params: HamiltonianParams,
    relations: CausalRelationTable | None = None,
) -> float:
    """``S_eff = -sum_I z_I . P^I + g T + g' U`` with P the interior residuals.

    Boundary events have no conservation constraint and do not contribute
    to the first term.
    """
    z = np.asarray(getattr(z, "z", z), dtype=float)
    if z.ndim == 1 and ecs.d == 1:
        z = z.reshape(-1, 1)
    if z.shape != (ecs.n_events, ecs.d):
        raise ShapeError(f"z must have shape ({ecs.n_events}, {ecs.d}), got {z.shape}")
    P, boundary = residuals(ecs)
    P[boundary] = 0.0
    lin = math.fsum(np.einsum("ij,ij->i", z, P))
    rep = hamiltonian(ecs, params, relations)
    return -lin + rep.H
