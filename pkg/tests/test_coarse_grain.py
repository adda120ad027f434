from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from causalviews import coarse_grain as cg
from causalviews import models
from causalviews.errors import FitError, InvalidConfigError, ResolutionError, ShapeError

from oracles import shell_pair_loop


def gauss_state(sigma=1.0, n=2001, half=10.0, N=1000, periodic=False):
    if periodic:
        grid = cg.Grid((-half,), (half,), (n,), periodic=True)
    else:
        grid = cg.Grid((-half,), (half,), (n,))
    return cg.CoarseState.from_model(models.Gaussian(sigma), grid, N)


def ring_state(n=400, N=1000):
    grid = cg.Grid((0.0,), (1.0,), (n,), periodic=True)
    return cg.CoarseState.from_model(models.CosineRing(0.4, 1.0), grid, N)


class TestGrid:
    def test_spacing(self):
        assert cg.Grid((0.0,), (1.0,), (11,)).spacing == (0.1,)
        assert cg.Grid((0.0,), (1.0,), (10,), periodic=True).spacing == (0.1,)

    def test_points_shape(self):
        g = cg.Grid((0.0, 0.0), (1.0, 2.0), (4, 5))
        assert g.points().shape == (4, 5, 2)

    def test_invalid(self):
        with pytest.raises(InvalidConfigError):
            cg.Grid((1.0,), (0.0,), (10,))
        with pytest.raises(ShapeError):
            cg.Grid((0.0, 0.0), (1.0,), (10,))

    def test_validate(self):
        st = gauss_state()
        st.validate()
        with pytest.raises(InvalidConfigError):
            cg.CoarseState(st.grid, 2 * st.rho).validate()


class TestEstimateDensity:
    def test_gaussian_sup_norm(self, rng):
        grid = cg.Grid((-6.0,), (6.0,), (241,))
        x = rng.standard_normal(100_000)
        st = cg.estimate_density(x, grid)
        ref = models.Gaussian().pdf(grid.axes()[0])
        assert np.abs(st.rho - ref).max() < 0.02
        assert st.N == 100_000

    def test_uniform_bulk(self, rng):
        grid = cg.Grid((0.0,), (1.0,), (200,), periodic=True)
        st = cg.estimate_density(rng.random(100_000), grid)
        assert np.abs(st.rho - 1.0).max() < 0.05

    def test_point_mass(self):
        grid = cg.Grid((-1.0,), (1.0,), (201,))
        st = cg.estimate_density(np.full(500, 0.3), grid)
        assert grid.integrate(st.rho) == pytest.approx(1.0)
        z = grid.axes()[0]
        assert z[np.argmax(st.rho)] == pytest.approx(0.3, abs=grid.spacing[0])
        # bandwidth floors at one grid spacing, so the mass stays within a few cells
        near = np.abs(z - 0.3) <= 5 * grid.spacing[0]
        assert grid.integrate(np.where(near, st.rho, 0)) > 0.99

    def test_clipped_warning(self, rng):
        grid = cg.Grid((-1.0,), (1.0,), (101,))
        with pytest.warns(cg.ClippedMassWarning):
            cg.estimate_density(rng.standard_normal(1000), grid)

    def test_too_few(self):
        with pytest.raises(InvalidConfigError):
            cg.estimate_density(np.zeros(10), cg.Grid((-1.0,), (1.0,), (11,)))

    def test_histogram_mass(self, rng):
        grid = cg.Grid((0.0, 0.0), (1.0, 1.0), (20, 20), periodic=True)
        st = cg.estimate_density(rng.random((2000, 2)), grid, method="histogram")
        assert grid.integrate(st.rho) == pytest.approx(1.0)


class TestCutoffs:
    def test_uv_value(self):
        grid = cg.Grid((0.0,), (1.0,), (50,), periodic=True)
        st = cg.CoarseState(grid, np.ones(50), N=10_000)
        cut = cg.cutoffs(st, L=3.0)
        assert np.allclose(cut.a, 1e-4)
        assert cut.R == pytest.approx(3e-4)
        assert cut.r == pytest.approx(3.0)

    @pytest.mark.parametrize("d", [1, 2])
    def test_half_density_scaling(self, d):
        n = (40,) * d
        grid = cg.Grid((0.0,) * d, (1.0,) * d, n, periodic=True)
        rho = np.ones(n)
        rho[(slice(0, 20),) + (slice(None),) * (d - 1)] = 0.5
        rho /= grid.integrate(rho)
        cut = cg.cutoffs(cg.CoarseState(grid, rho, N=500), L=2.0)
        lo, hi = cut.a.min(), cut.a.max()
        assert hi / lo == pytest.approx(2 ** (1 / d), rel=1e-12)

    def test_ir_scaling(self):
        st = ring_state(N=1000)
        st4 = cg.CoarseState(st.grid, st.rho, N=4000)
        R1 = cg.cutoffs(st, 5.0).R
        R4 = cg.cutoffs(st4, 5.0).R
        assert R1 / R4 == pytest.approx(4.0)

    def test_ratio_independent_of_N(self):
        m = models.Gaussian()
        r = [cg.cutoffs_from_model(m, N, 14.18).r for N in (100, 10_000)]
        assert r[0] == pytest.approx(r[1])
        assert cg.length_for_ratio(m, 4.0) == pytest.approx(4 * 2 * math.sqrt(math.pi))

    def test_invalid_L(self):
        with pytest.raises(InvalidConfigError):
            cg.cutoffs(ring_state(), 0.0)


class TestDiscreteVariety:
    def test_three_sample_hand_expansion(self):
        samples = np.array([[0.0], [0.5], [1.5]])
        pasts = [np.array([[1.0]]), np.array([[0.5], [-2.0]]), np.array([[0.25]])]
        cut = cg.CutoffSpec.uniform(0.4, 1.2)
        V = np.array([1.0, 1 / 0.5 - 1 / 2.0, 4.0])
        # pairs (0,1) at 0.5 and (1,2) at 1.0 lie in [0.4, 1.2]; (0,2) at 1.5 does not
        hand = (V[0] - V[1]) ** 2 + (V[1] - V[2]) ** 2
        got = cg.discrete_acausal_variety(samples, pasts, cut, Z_V=1.0)
        assert got == pytest.approx(hand, rel=1e-15)

    def test_matches_loop_oracle(self, rng):
        n = 200
        samples = rng.uniform(0, 4, (n, 2))
        pasts = [rng.standard_normal((rng.integers(1, 4), 2)) for _ in range(n)]
        cut = cg.CutoffSpec.uniform(0.1, 0.6, d=2)
        V = np.array([sum(p / np.sum(p * p) for p in ps) for ps in pasts])
        ref = shell_pair_loop(samples, V, np.full(n, 0.1), np.full(n, 0.6))
        assert cg.discrete_acausal_variety(samples, pasts, cut, Z_V=1.0) == pytest.approx(ref, rel=1e-12)

    def test_translation_invariance(self, rng):
        samples = rng.uniform(0, 2, (100, 1))
        pasts = [rng.standard_normal((2, 1)) for _ in range(100)]
        cut = cg.CutoffSpec.uniform(0.05, 0.5)
        a = cg.discrete_acausal_variety(samples, pasts, cut, Z_V=1.0)
        b = cg.discrete_acausal_variety(samples + 17.25, pasts, cut, Z_V=1.0)
        assert a == pytest.approx(b, rel=1e-12)

    def test_empty_shell(self):
        cut = cg.CutoffSpec.uniform(10.0, 20.0)
        with pytest.warns(cg.EmptyShellWarning):
            val = cg.discrete_acausal_variety(np.array([[0.0], [1.0]]), [np.ones((1, 1))] * 2, cut)
        assert val == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cg.discrete_acausal_variety(np.zeros((3, 1)), [np.ones((1, 1))] * 2, cg.CutoffSpec.uniform(0.1, 1))

    def test_stratified_flat_density_has_zero_reduced(self):
        rep, parts = cg.model_variety(models.UniformRing(), 2000, 6.0, seed=3)
        assert abs(parts.reduced) < 1e-12 * abs(parts.total)
        assert parts.r == pytest.approx(6.0)

    def test_small_L_rejected(self):
        with pytest.raises(InvalidConfigError, match="gives r=4"):
            cg.model_variety(models.Gaussian(), 1000, 1.0, seed=0)


class TestNormalization:
    def test_z_v(self):
        assert cg.z_v(1, 3.0, 10) == pytest.approx(1 / (10 * 4 * 4))
        assert cg.z_v(1, 3.0, 10, "stratified") == pytest.approx(2 / (10 * 4 * 4))
        with pytest.raises(InvalidConfigError):
            cg.z_v(1, 1.0, 10)

    def test_lattice_constant(self):
        s = np.array([-2.5, -1.5, 1.5, 2.5])
        hand = 4 * np.sum(1 / s**2) - np.sum(1 / s) ** 2
        assert cg.pair_constant(1, 3.0, "stratified") == pytest.approx(hand)

    def test_shell_moment(self):
        assert cg.shell_moment(0, 1, 3.0) == pytest.approx(4.0)
        assert cg.shell_moment(-2, 2, math.e) == pytest.approx(2 * math.pi)


class TestFisher:
    def test_gaussian_unit(self):
        assert cg.fisher_information(gauss_state()) == pytest.approx(1.0, rel=1e-4)

    def test_scaling(self):
        lam = 2.0
        F1 = cg.fisher_information(gauss_state(1.0))
        F2 = cg.fisher_information(gauss_state(lam, n=4001, half=20.0))
        assert F1 / F2 == pytest.approx(lam**2, rel=1e-4)

    def test_uniform_zero(self):
        grid = cg.Grid((0.0,), (1.0,), (64,), periodic=True)
        assert cg.fisher_information(cg.CoarseState(grid, np.ones(64))) == 0.0

    def test_under_resolved(self):
        with pytest.raises(ResolutionError):
            cg.fisher_information(gauss_state(0.05, n=41, half=1.0))

    def test_2d_product(self):
        g = cg.Grid((-8.0, -8.0), (8.0, 8.0), (321, 321))
        st = cg.CoarseState.from_model(models.Gaussian(), g)
        assert cg.fisher_information(st) == pytest.approx(2.0, rel=1e-3)


class TestBohm:
    def test_one_eighth(self):
        st = gauss_state()
        assert cg.bohm_functional(st) == pytest.approx(cg.fisher_information(st) / 8)
        assert cg.bohm_functional(st, m=2.0, hbar=3.0) == pytest.approx(9 / 16 * cg.fisher_information(st))

    def test_integration_by_parts(self):
        st = ring_state()
        Q = cg.quantum_potential(st)
        assert st.grid.integrate(st.rho * Q) == pytest.approx(cg.bohm_functional(st), rel=1e-6)

    def test_gradient_consistency(self, rng):
        st = ring_state(n=128)
        h = st.grid.cell_volume
        Q = cg.quantum_potential(st, m=1.5, hbar=0.7)
        drho = rng.standard_normal(128) * 1e-2
        eps = 1e-4

        def B(r):
            return cg.bohm_functional(cg.CoarseState(st.grid, r), m=1.5, hbar=0.7, check=False)

        fd = (B(st.rho + eps * drho) - B(st.rho - eps * drho)) / (2 * eps)
        assert fd == pytest.approx(np.sum(Q * drho) * h, rel=1e-4)

    def test_gaussian_potential(self):
        # for a Gaussian, Q = (hbar^2 / 2m) (1 / (2 sigma^2) - z^2 / (4 sigma^4))
        st = gauss_state(n=4001)
        z = st.grid.axes()[0]
        core = np.abs(z) < 4
        ref = 0.5 * (0.5 - z**2 / 4)
        assert np.abs(cg.quantum_potential(st)[core] - ref[core]).max() < 1e-4


class TestCorrection:
    def test_N_doubling_quarters(self):
        st = ring_state(N=1000)
        st2 = cg.CoarseState(st.grid, st.rho, N=2000)
        c1 = cg.nonlinear_correction(st, cg.cutoffs(st, 5.0))
        c2 = cg.nonlinear_correction(st2, cg.cutoffs(st2, 5.0))
        assert c2 / c1 == pytest.approx(0.25, rel=1e-12)
        assert c1 < 0

    def test_laplacian_fisher_gaussian(self):
        assert cg.laplacian_fisher(gauss_state(n=4001)) == pytest.approx(2.0, rel=1e-4)


class TestContinuum:
    def test_report_fields(self):
        st = ring_state()
        cut = cg.cutoffs(st, 5.0)
        rep = cg.continuum_variety(st, cut, discrete=1.0)
        assert rep.discrete == 1.0
        assert rep.prediction == pytest.approx(rep.constant_term - rep.fisher_term)
        assert "prediction" in rep.to_dict()
        assert rep.to_csv().splitlines()[0].startswith("discrete,")


class TestConvergence:
    def test_deterministic(self):
        m = models.CosineRing(0.3, 1.0)
        a = cg.convergence_study(m, [500, 1000, 2000], 4.0, seed=7)
        b = cg.convergence_study(m, [500, 1000, 2000], 4.0, seed=7)
        assert a.to_csv() == b.to_csv()

    def test_uniform_exact(self):
        t = cg.convergence_study(models.UniformRing(), [200, 400, 800], 4.0, seed=1)
        assert math.isnan(t.slope)
        assert all(row["deviation"] < 1e-9 for row in t.rows)

    def test_cosine_slope(self):
        t = cg.convergence_study(models.CosineRing(0.3, 1.0), [1000, 4000, 16000], 4.0, seed=2)
        assert t.slope == pytest.approx(-2.0, abs=0.4)

    def test_too_few(self):
        with pytest.raises(FitError):
            cg.convergence_study(models.Gaussian(), [100, 200], 14.18, seed=0)

    def test_not_ascending(self):
        with pytest.raises(InvalidConfigError):
            cg.convergence_study(models.Gaussian(), [300, 200, 400], 14.18, seed=0)

    def test_save(self, tmp_path):
        t = cg.convergence_study(models.UniformRing(), [200, 400, 800], 4.0, seed=1)
        t.save(tmp_path / "c.csv", header="# h")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "# h" and lines[1].startswith("N,r,")
