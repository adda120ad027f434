from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from causalviews import ecs, energy
from causalviews.errors import InvalidConfigError, ShapeError

from conftest import chain
from oracles import kinetic_loop, potential_loop, reach_matrix_power, sqdist, views_loop


def rotate(c, R):
    return c.with_momenta(c.p @ R.T)


class TestParams:
    def test_matched(self):
        p = energy.HamiltonianParams.matched(g=2.0, m=3.0, hbar=0.5, Z_V=4.0)
        assert p.g_prime == pytest.approx(4.0 * 0.25 * 4.0 / 24.0)
        assert p.is_matched
        assert not energy.HamiltonianParams(g=1, g_prime=1).is_matched

    @pytest.mark.parametrize("kw", [{"g": -1}, {"m": 0}, {"hbar": -1}, {"n_pre": 0}, {"g_prime": float("inf")}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfigError):
            energy.HamiltonianParams(**kw)


class TestSurprise:
    def test_equal_views(self):
        # every event on the chain sees momentum 1, parent 0 sees nothing
        c = chain([1.0, 1.0, 1.0])
        assert energy.surprise(c, 2) == 0.0

    def test_single_parent(self):
        # W_parent = 0, W_child = sqrt(3) -> D = 3 -> surprise 9
        c = chain([np.sqrt(3.0)])
        assert energy.surprise(c, 1) == pytest.approx(9.0)

    def test_parentless(self, layered):
        assert energy.surprise(layered, 0) == 0.0

    def test_random_event(self, layered):
        W = views_loop(layered.n_events, layered.src, layered.dst, layered.p, 0)
        I = int(layered.dst[-1])
        total = sum(sqdist(W[I], W[k]) for k in layered.parents(I))
        assert energy.surprise(layered, I) == pytest.approx(total**2, rel=1e-13)
        assert energy.surprises(layered)[I] == pytest.approx(total**2, rel=1e-13)


class TestKinetic:
    def test_single_link(self):
        assert energy.kinetic_energy(chain([2.0])) == pytest.approx(4.0)

    def test_uniform_chain(self):
        c = chain([1.5] * 5)
        W = views_loop(c.n_events, c.src, c.dst, c.p, 0)
        # only the first link compares a non-empty view with the empty one
        assert energy.kinetic_energy(c) == pytest.approx(kinetic_loop(W, c.src, c.dst)) == pytest.approx(2.25)

    def test_disjoint_union_doubles(self, layered):
        T = energy.kinetic_energy(layered)
        assert energy.kinetic_energy(layered.disjoint_union(layered)) == pytest.approx(2 * T, rel=1e-13)

    def test_against_loop(self, layered):
        W = views_loop(layered.n_events, layered.src, layered.dst, layered.p, 0)
        assert energy.kinetic_energy(layered) == pytest.approx(kinetic_loop(W, layered.src, layered.dst), rel=1e-12)

    def test_full_past(self):
        c = ecs.generate_layered(2, 5, 5, 2, seed=3)
        W = views_loop(c.n_events, c.src, c.dst, c.p, 0)
        R = reach_matrix_power(c.n_events, c.src, c.dst)
        ref = sum(sqdist(W[i], W[j]) for i in range(c.n_events) for j in range(c.n_events) if R[i, j])
        assert energy.kinetic_energy(c, past="full") == pytest.approx(ref, rel=1e-12)
        with pytest.raises(InvalidConfigError):
            energy.kinetic_energy(c, past="cone")

    def test_quadratic_form(self, layered):
        D = layered.in_degree[layered.dst]
        ref = sum(0.5 * D[l] * float(layered.p[l] @ layered.p[l]) for l in range(layered.n_links))
        assert energy.kinetic_quadratic_form(layered) == pytest.approx(ref, rel=1e-13)
        uni = energy.kinetic_quadratic_form(layered, uniform_D=layered.n_pre)
        assert uni == pytest.approx(0.5 * layered.n_pre * float(np.sum(layered.p**2)), rel=1e-13)


class TestPotential:
    def test_chain_zero(self):
        assert energy.potential_energy(chain([1.0, 2.0, 3.0])) == 0.0

    def test_parallel_identical_chains(self):
        c = chain([1.0, 1.0])
        assert energy.potential_energy(c.disjoint_union(c)) == pytest.approx(
            # acausal cross pairs of identical views cancel; same-position pairs give 0
            sum(sqdist(a, b) for a in ecs.views(c, 2) for b in ecs.views(c, 2))
        )

    def test_against_loop_n200(self):
        c = ecs.generate_layered(3, 10, 20, 2, seed=8)
        W = views_loop(c.n_events, c.src, c.dst, c.p, 2)
        R = reach_matrix_power(c.n_events, c.src, c.dst)
        assert energy.potential_energy(c) == pytest.approx(potential_loop(W, R), rel=1e-12)

    def test_disjoint_union_cross_terms(self, layered):
        other = ecs.generate_layered(3, 4, 5, 2, seed=99)
        u = layered.disjoint_union(other)
        Wa, Wb = ecs.views(layered, 2), ecs.views(other, 2)
        cross = sum(sqdist(a, b) for a in Wa for b in Wb)
        expect = energy.potential_energy(layered) + energy.potential_energy(other) + cross
        assert energy.potential_energy(u) == pytest.approx(expect, rel=1e-12)

    def test_label_permutation(self):
        # two parentless events (zero views) swapped: U unchanged
        c = ecs.generate_layered(2, 3, 4, 2, seed=1)
        perm = np.arange(c.n_events)
        perm[[0, 1]] = [1, 0]
        d = ecs.CausalSet(c.d, c.n_events, perm[c.src], perm[c.dst], c.p, c.n_pre)
        assert energy.potential_energy(d) == pytest.approx(energy.potential_energy(c), rel=1e-13)


def test_rotation_invariance(layered):
    R = Rotation.from_euler("xyz", [0.3, -1.1, 2.0]).as_matrix()
    r = rotate(layered, R)
    assert energy.kinetic_energy(r) == pytest.approx(energy.kinetic_energy(layered), rel=1e-12)
    assert energy.potential_energy(r) == pytest.approx(energy.potential_energy(layered), rel=1e-12)


class TestHamiltonian:
    def test_combinations(self, layered):
        rel = ecs.causal_relations(layered)
        T = energy.kinetic_energy(layered)
        U = energy.potential_energy(layered, rel)
        assert energy.hamiltonian(layered, energy.HamiltonianParams(g=1, g_prime=0)).H == T
        assert energy.hamiltonian(layered, energy.HamiltonianParams(g=0, g_prime=1)).H == U
        rep = energy.hamiltonian(layered, energy.HamiltonianParams(g=2, g_prime=3), rel)
        assert rep.H == 2 * rep.T + 3 * rep.U

    def test_arithmetic(self):
        assert energy.EnergyReport(1.5, 0.5, 2 * 1.5 + 3 * 0.5).H == 4.5

    def test_serialization(self, layered):
        rep = energy.hamiltonian(layered, energy.HamiltonianParams())
        doc = json.loads(rep.to_json())
        assert doc["T"] == rep.T
        lines = rep.surprise_csv().splitlines()
        assert lines[0] == "event,surprise" and len(lines) == layered.n_events + 1


class TestEffectiveAction:
    def test_solved_history(self, layered, rng):
        p = energy.HamiltonianParams(g=1.3, g_prime=0.2)
        z = rng.standard_normal((layered.n_events, 3))
        H = energy.hamiltonian(layered, p).H
        # boundary residuals are excluded; interior ones vanish
        assert energy.effective_action(layered, z, p) == pytest.approx(H, rel=1e-12)
        assert energy.effective_action(layered, z + [5.0, -2.0, 1.0], p) == pytest.approx(H, rel=1e-12)

    def test_single_violation(self):
        # interior event 1 with in (1,0)+(1,0), out (1,0): residual (1,0)
        c = ecs.CausalSet(2, 4, [0, 3, 1], [1, 1, 2], [[1, 0], [1, 0], [1, 0]], 2)
        p = energy.HamiltonianParams()
        z = np.zeros((4, 2))
        base = energy.effective_action(c, z, p)
        z[1] = [3.0, 0.0]
        assert energy.effective_action(c, z, p) == pytest.approx(base - 3.0)

    def test_shape_error(self, layered):
        with pytest.raises(ShapeError):
            energy.effective_action(layered, np.zeros((layered.n_events, 2)), energy.HamiltonianParams())


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 3))
def test_energies_nonnegative(seed, d):
    c = ecs.generate_layered(d, 4, 5, 2, seed)
    assert energy.kinetic_energy(c) >= 0
    assert energy.potential_energy(c) >= 0
