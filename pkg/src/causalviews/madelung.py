"""Hydrodynamic (Madelung) evolution of a density/phase pair.

The semi-discrete system is derived from one discrete Hamiltonian on a
periodic grid with cell volume ``h^d``:

    H = sum_faces h^d rho_f (dS/h)^2 / 2m              (kinetic)
      + (hbar^2 / 2m) sum_faces h^d (d sqrt(rho)/h)^2  (Bohm)
      - c (hbar^2 / 8m) sum_cells h^d (lap rho)^2 / rho (correction)
      + sum_cells h^d rho V                            (optional potential)

with ``rho_f`` the face average. The equations of motion are
``rho' = dH/dS / h^d`` and ``S' = -dH/drho / h^d``. The first is a flux
divergence, so total mass is conserved to round-off. Faces touching
vacuum (``rho < floor``) use upwind density and a velocity clipped to the
grid Nyquist speed, which keeps the explicit scheme stable in the tails.

Crank-Nicolson on the linear Schrodinger equation serves as the
independent oracle.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coarse_grain import Grid
from .errors import InstabilityError, InvalidConfigError, NumericalError, ShapeError

MODES = ("classical", "quantum", "quantum+correction")


class DegeneracyWarning(UserWarning):
    """More than 1% of cells lie below the density floor."""


@dataclass(frozen=True)
class HydroParams:
    """Physical and numerical parameters of the hydrodynamic solver.

    ``correction`` is the dimensionless prefactor ``c = r^2 N^(-2/d)`` of the
    non-linear term. ``potential`` is an optional external potential
    (array on the grid or callable of the node coordinates).
    """

    m: float = 1.0
    hbar: float = 1.0
    correction: float = 0.0
    potential: np.ndarray | Callable | None = field(default=None, compare=False)
    rho_floor: float = 1e-12
    wrap_phase: bool = True

    def __post_init__(self) -> None:
        if not self.m > 0:
            raise InvalidConfigError("m must be positive")
        if not self.hbar >= 0:
            raise InvalidConfigError("hbar must be non-negative")
        if not self.correction >= 0:
            raise InvalidConfigError("correction prefactor must be non-negative")
        if not self.rho_floor > 0:
            raise InvalidConfigError("rho_floor must be positive")


@dataclass
class HydroState:
    grid: Grid
    rho: np.ndarray
    S: np.ndarray
    t: float = 0.0
    nodes: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.grid.periodic:
            raise InvalidConfigError("the hydrodynamic solver needs a periodic grid")
        self.rho = np.asarray(self.rho, dtype=float).reshape(self.grid.shape)
        self.S = np.asarray(self.S, dtype=float).reshape(self.grid.shape)

    def mass(self) -> float:
        return self.grid.integrate(self.rho)

    def copy(self) -> HydroState:
        return HydroState(self.grid, self.rho.copy(), self.S.copy(), self.t, None if self.nodes is None else self.nodes.copy())


@dataclass
class WaveFunction:
    grid: Grid
    psi: np.ndarray

    def norm(self) -> float:
        return math.sqrt(self.grid.integrate(np.abs(self.psi) ** 2))

    def normalized(self) -> WaveFunction:
        return WaveFunction(self.grid, self.psi / self.norm())


# ----------------------------------------------------------------------
# discrete operators
def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise InvalidConfigError(f"mode must be one of {MODES}, got {mode!r}")


def _dS(S: np.ndarray, ax: int, params: HydroParams) -> np.ndarray:
    """Forward phase difference along ``ax``, wrapped mod 2 pi hbar."""
    d = np.roll(S, -1, axis=ax) - S
    if params.wrap_phase and params.hbar > 0:
        period = 2 * math.pi * params.hbar
        d = d - period * np.round(d / period)
    return d


def _faces(rho: np.ndarray, S: np.ndarray, ax: int, h: float, params: HydroParams):
    """Face density and velocity along ``ax`` with the vacuum treatment."""
    rp = np.roll(rho, -1, axis=ax)
    v = _dS(S, ax, params) / (params.m * h)
    vac = np.minimum(rho, rp) < params.rho_floor
    if params.hbar > 0:
        vmax = math.pi * params.hbar / (params.m * h)
        v = np.where(vac, np.clip(v, -vmax, vmax), v)
    rf = np.where(vac, np.where(v > 0, rho, rp), 0.5 * (rho + rp))
    return rf, v


def _potential(grid: Grid, params: HydroParams) -> np.ndarray | None:
    V = params.potential
    if V is None:
        return None
    if callable(V):
        V = V(grid.points() if grid.d > 1 else grid.axes()[0])
    V = np.asarray(V, dtype=float)
    if V.shape != grid.shape:
        raise ShapeError("potential must match the grid shape")
    return V


def _lap(f: np.ndarray, grid: Grid) -> np.ndarray:
    out = np.zeros_like(f)
    for ax, h in enumerate(grid.spacing):
        out += (np.roll(f, -1, ax) - 2 * f + np.roll(f, 1, ax)) / (h * h)
    return out


def quantum_potential_field(state: HydroState, params: HydroParams) -> np.ndarray:
    """``Q = -(hbar^2/2m) lap(sqrt rho) / sqrt rho`` with ``sqrt(rho + floor)``."""
    sq = np.sqrt(np.maximum(state.rho, 0.0) + params.rho_floor)
    return -(params.hbar**2 / (2 * params.m)) * _lap(sq, state.grid) / sq


def _correction_force(state: HydroState, params: HydroParams) -> np.ndarray:
    """``-dU_corr/drho`` per unit volume, ``U_corr = -c (hbar^2/8m) int (lap rho)^2/rho``."""
    rho_r = np.maximum(state.rho, 0.0) + params.rho_floor
    q = _lap(state.rho, state.grid) / rho_r
    return params.correction * params.hbar**2 / (8 * params.m) * (2.0 * _lap(q, state.grid) - q * q)


def _warn_degenerate(state: HydroState, params: HydroParams, stacklevel: int = 3) -> None:
    frac = float(np.mean(state.rho < params.rho_floor))
    if frac > 0.01:
        warnings.warn(
            f"{100 * frac:.1f}% of cells lie below the density floor {params.rho_floor:g}",
            DegeneracyWarning,
            stacklevel=stacklevel,
        )


def _quiet_evolve(*args, **kwargs) -> EvolutionResult:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegeneracyWarning)
        return evolve(*args, **kwargs)


def _rhs(state: HydroState, params: HydroParams, mode: str) -> tuple[np.ndarray, np.ndarray]:
    g = state.grid
    drho = np.zeros_like(state.rho)
    dS = np.zeros_like(state.S)
    for ax, h in enumerate(g.spacing):
        rf, v = _faces(state.rho, state.S, ax, h, params)
        flux = rf * v
        drho -= (flux - np.roll(flux, 1, axis=ax)) / h
        dS -= params.m * (v * v + np.roll(v * v, 1, axis=ax)) / 4.0
    if mode != "classical":
        dS -= quantum_potential_field(state, params)
        if mode == "quantum+correction" and params.correction > 0:
            dS += _correction_force(state, params)
    V = _potential(g, params)
    if V is not None:
        dS -= V
    return drho, dS


def hj_rhs(state: HydroState, params: HydroParams, mode: str = "quantum") -> np.ndarray:
    """Phase velocity ``S'`` (Hamilton-Jacobi, plus Bohm and correction terms).

    Kinetic part: ``-(m/4)(v_f^2 + v_{f-1}^2)`` from the two faces of a cell,
    i.e. ``-|grad S|^2 / 2m``. Quantum mode subtracts ``Q``; correction mode
    adds ``c (hbar^2/8m) [2 lap(lap rho/rho) - (lap rho/rho)^2]``.
    """
    _check_mode(mode)
    _warn_degenerate(state, params)
    return _rhs(state, params, mode)[1]


def continuity_rhs(state: HydroState, params: HydroParams) -> np.ndarray:
    """``rho' = -div(rho grad S / m)`` in flux form."""
    return _rhs(state, params, "classical")[0]


def discrete_hamiltonian(state: HydroState, params: HydroParams, mode: str = "quantum") -> float:
    """Value of the discrete Hamiltonian whose gradients define the scheme."""
    _check_mode(mode)
    g = state.grid
    vol = g.cell_volume
    E = 0.0
    for ax, h in enumerate(g.spacing):
        rf, v = _faces(state.rho, state.S, ax, h, params)
        E += vol * float(np.sum(rf * v * v)) * params.m / 2.0
    if mode != "classical":
        sq = np.sqrt(np.maximum(state.rho, 0.0) + params.rho_floor)
        for ax, h in enumerate(g.spacing):
            diff = np.roll(sq, -1, axis=ax) - sq
            E += params.hbar**2 / (2 * params.m) * vol * float(np.sum(diff * diff)) / (h * h)
        if mode == "quantum+correction" and params.correction > 0:
            rho_r = np.maximum(state.rho, 0.0) + params.rho_floor
            lap = _lap(state.rho, g)
            E -= params.correction * params.hbar**2 / (8 * params.m) * vol * float(np.sum(lap * lap / rho_r))
    V = _potential(g, params)
    if V is not None:
        E += vol * float(np.sum(state.rho * V))
    return E


# ----------------------------------------------------------------------
# time stepping
@dataclass
class EvolutionResult:
    state: HydroState
    mass_drift: float
    energy_drift: float
    energy0: float
    snapshots: list[HydroState] = field(default_factory=list)


def max_stable_dt(grid: Grid, params: HydroParams) -> float:
    """Guard ``dt <= m h^2 / (2 hbar)`` (h the finest spacing)."""
    if params.hbar == 0:
        return math.inf
    h = min(grid.spacing)
    return params.m * h * h / (2.0 * params.hbar)


def evolve(
    state: HydroState,
    params: HydroParams,
    dt: float,
    steps: int,
    mode: str = "quantum",
    snapshot_every: int | None = None,
    check_every: int = 10,
) -> EvolutionResult:
    """Classic RK4 integration of the hydrodynamic system.

    Returns the final state with relative energy drift and absolute mass
    drift. Raises :class:`InstabilityError` if a non-finite value appears.
    """
    _check_mode(mode)
    if not dt > 0 or steps < 0:
        raise InvalidConfigError("dt must be positive and steps non-negative")
    if mode != "classical" and dt > max_stable_dt(state.grid, params) * (1 + 1e-12):
        raise InvalidConfigError(
            f"dt={dt:g} exceeds the stability bound {max_stable_dt(state.grid, params):.3g} = m h^2 / (2 hbar)"
        )
    if not (np.all(np.isfinite(state.rho)) and np.all(np.isfinite(state.S))):
        raise InvalidConfigError("initial state must be finite")
    _warn_degenerate(state, params)
    g = state.grid
    rho, S = state.rho.copy(), state.S.copy()
    M0 = g.integrate(rho)
    E0 = discrete_hamiltonian(state, params, mode)
    work = HydroState(g, rho, S, state.t)

    def f(r, s):
        work.rho, work.S = r, s
        return _rhs(work, params, mode)

    # overflow during a blow-up is reported below as InstabilityError
    with np.errstate(over="ignore", invalid="ignore"):
        rho, S, t, snaps = _rk4_loop(f, rho, S, state, dt, steps, check_every, snapshot_every, g)
    final = HydroState(g, rho, S, t)
    E1 = discrete_hamiltonian(final, params, mode)
    scale = abs(E0) if E0 != 0 else 1.0
    return EvolutionResult(final, g.integrate(rho) - M0, (E1 - E0) / scale, E0, snaps)


def _rk4_loop(f, rho, S, state, dt, steps, check_every, snapshot_every, g):
    snaps = []
    t = state.t
    for k in range(steps):
        k1r, k1s = f(rho, S)
        k2r, k2s = f(rho + 0.5 * dt * k1r, S + 0.5 * dt * k1s)
        k3r, k3s = f(rho + 0.5 * dt * k2r, S + 0.5 * dt * k2s)
        k4r, k4s = f(rho + dt * k3r, S + dt * k3s)
        rho = rho + dt / 6.0 * (k1r + 2 * k2r + 2 * k3r + k4r)
        S = S + dt / 6.0 * (k1s + 2 * k2s + 2 * k3s + k4s)
        t = state.t + (k + 1) * dt
        if (k + 1) % check_every == 0 or k + 1 == steps:
            if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(S))):
                raise InstabilityError(
                    f"non-finite values by step {k + 1} (t={t:g})",
                    k + 1,
                    {"t": t, "min_rho": float(np.nanmin(rho)), "max_abs_S": float(np.nanmax(np.abs(S)))},
                )
        if snapshot_every and (k + 1) % snapshot_every == 0:
            snaps.append(HydroState(g, rho.copy(), S.copy(), t))
    return rho, S, t, snaps


# ----------------------------------------------------------------------
# wavefunction map
def to_wavefunction(state: HydroState, hbar: float) -> WaveFunction:
    """``psi = sqrt(rho) exp(i S / hbar)``."""
    if not hbar > 0:
        raise InvalidConfigError("hbar must be positive to form a wavefunction")
    return WaveFunction(state.grid, np.sqrt(np.maximum(state.rho, 0.0)) * np.exp(1j * state.S / hbar))


def from_wavefunction(wf: WaveFunction, hbar: float, eps: float = 1e-12) -> HydroState:
    """Invert :func:`to_wavefunction`; the phase is unwrapped along each axis.

    Cells with ``|psi|^2 <= eps`` are nodes: their phase is undefined, set to
    the unwrapped value of the raw angle, and flagged in ``state.nodes``.
    """
    if not hbar > 0:
        raise InvalidConfigError("hbar must be positive")
    rho = np.abs(wf.psi) ** 2
    phase = np.angle(wf.psi)
    for ax in range(phase.ndim):
        phase = np.unwrap(phase, axis=ax)
    return HydroState(wf.grid, rho, hbar * phase, 0.0, rho <= eps)


def _laplacian_matrix(grid: Grid) -> sp.csc_matrix:
    mats = []
    for n, h in zip(grid.shape, grid.spacing):
        main = -2.0 * np.ones(n)
        off = np.ones(n - 1)
        L = sp.diags([off, main, off], [-1, 0, 1], format="lil")
        L[0, n - 1] = 1.0
        L[n - 1, 0] = 1.0
        mats.append(L.tocsr() / (h * h))
    total = None
    for ax, L in enumerate(mats):
        ops = [sp.identity(n, format="csr") for n in grid.shape]
        ops[ax] = L
        term = ops[0]
        for o in ops[1:]:
            term = sp.kron(term, o, format="csr")
        total = term if total is None else total + term
    return total.tocsc()


def absorbing_profile(grid: Grid, width: float, strength: float = 1.0) -> np.ndarray:
    """Quadratic complex-absorbing-potential profile within ``width`` of the edges."""
    W = np.zeros(grid.shape)
    for ax, (lo, hi, coords) in enumerate(zip(grid.lower, grid.upper, grid.axes())):
        dist = np.minimum(coords - lo, hi - coords)
        prof = np.where(dist < width, strength * ((width - dist) / width) ** 2, 0.0)
        shape = [1] * grid.d
        shape[ax] = coords.size
        W = W + prof.reshape(shape)
    return W


def schrodinger_oracle(
    psi0: WaveFunction,
    params: HydroParams,
    dt: float,
    steps: int,
    boundary: str = "periodic",
    absorber_width: float | None = None,
    absorber_strength: float = 1.0,
) -> WaveFunction:
    """Crank-Nicolson integration of ``i hbar psi' = -(hbar^2/2m) lap psi + V psi``.

    ``boundary="absorbing"`` adds ``-i W`` with a quadratic edge profile
    (default width: 10% of the domain). The system matrix is factorized once.
    """
    if not params.hbar > 0:
        raise InvalidConfigError("the Schrodinger oracle needs hbar > 0")
    if boundary not in ("periodic", "absorbing"):
        raise InvalidConfigError("boundary must be 'periodic' or 'absorbing'")
    grid = psi0.grid
    n = int(np.prod(grid.shape))
    H = -(params.hbar**2 / (2 * params.m)) * _laplacian_matrix(grid)
    V = _potential(grid, params)
    if V is not None:
        H = H + sp.diags(V.reshape(-1))
    if boundary == "absorbing":
        width = absorber_width if absorber_width is not None else 0.1 * min(grid.lengths)
        H = H - 1j * sp.diags(absorbing_profile(grid, width, absorber_strength).reshape(-1))
    I = sp.identity(n, format="csc")
    A = (I + 0.5j * dt / params.hbar * H).tocsc()
    B = (I - 0.5j * dt / params.hbar * H).tocsr()
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise NumericalError(f"Crank-Nicolson factorization failed: {exc}") from exc
    psi = psi0.psi.reshape(-1).astype(complex)
    for _ in range(steps):
        psi = lu.solve(B @ psi)
    if not np.all(np.isfinite(psi)):
        raise NumericalError("Crank-Nicolson produced non-finite values")
    return WaveFunction(grid, psi.reshape(grid.shape))


# ----------------------------------------------------------------------
# comparison
@dataclass
class ComparisonReport:
    mode: str
    t: float
    l2_density: float
    l2_amplitude: float
    phase_error_max: float
    phase_error_rms: float
    mass_drift: float
    energy_drift: float
    correction_deviation: float = float("nan")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _phase_errors(S: np.ndarray, psi: np.ndarray, rho_ref: np.ndarray, hbar: float, grid: Grid) -> tuple[float, float]:
    mask = rho_ref > 1e-6
    if not mask.any():
        return float("nan"), float("nan")
    diff = np.angle(np.exp(1j * S / hbar) * np.conj(psi))
    w = rho_ref[mask]
    return float(np.abs(diff[mask]).max()), float(math.sqrt(np.sum(w * diff[mask] ** 2) / np.sum(w)))


def compare_evolutions(
    rho0: np.ndarray,
    S0: np.ndarray,
    grid: Grid,
    params: HydroParams,
    dt: float,
    steps: int,
    mode: str = "quantum",
) -> ComparisonReport:
    """Evolve the same initial data hydrodynamically and with the oracle.

    Reports the L2 errors of the density and of ``|psi|``, the phase error
    where the oracle density exceeds 1e-6, and the hydrodynamic drifts. In
    correction mode ``correction_deviation`` is the L2 density distance to a
    quantum-mode hydrodynamic run from the same data.
    """
    _check_mode(mode)
    state0 = HydroState(grid, rho0, S0)
    _warn_degenerate(state0, params)
    res = _quiet_evolve(state0, params, dt, steps, mode)
    oracle = schrodinger_oracle(to_wavefunction(state0, params.hbar), params, dt, steps)
    rho_o = np.abs(oracle.psi) ** 2
    rho_h = res.state.rho
    l2 = math.sqrt(grid.integrate((rho_h - rho_o) ** 2))
    amp = math.sqrt(grid.integrate((np.sqrt(np.maximum(rho_h, 0.0)) - np.abs(oracle.psi)) ** 2))
    pmax, prms = _phase_errors(res.state.S, oracle.psi, rho_o, params.hbar, grid)
    dev = float("nan")
    if mode == "quantum+correction":
        lin = _quiet_evolve(state0, params, dt, steps, "quantum")
        dev = math.sqrt(grid.integrate((rho_h - lin.state.rho) ** 2))
    return ComparisonReport(mode, res.state.t, l2, amp, pmax, prms, res.mass_drift, res.energy_drift, dev)


@dataclass
class CorrectionScaling:
    prefactors: np.ndarray
    deviations: np.ndarray
    slope: float
    intercept: float
    r_squared: float


def correction_scaling(
    rho0: np.ndarray,
    S0: np.ndarray,
    grid: Grid,
    params: HydroParams,
    dt: float,
    steps: int,
    prefactors,
) -> CorrectionScaling:
    """Deviation of correction-mode runs from the linear run, against ``c``.

    A straight line ``deviation = slope c + intercept`` is fitted by least
    squares and its coefficient of determination reported.
    """
    c = np.asarray(prefactors, dtype=float)
    if c.size < 2:
        raise InvalidConfigError("need at least two prefactors")
    state0 = HydroState(grid, rho0, S0)
    _warn_degenerate(state0, params)
    base = _quiet_evolve(state0, params, dt, steps, "quantum").state.rho
    devs = []
    for ci in c:
        p = HydroParams(params.m, params.hbar, float(ci), params.potential, params.rho_floor, params.wrap_phase)
        rho = _quiet_evolve(state0, p, dt, steps, "quantum+correction").state.rho
        devs.append(math.sqrt(grid.integrate((rho - base) ** 2)))
    devs = np.array(devs)
    slope, intercept = np.polyfit(c, devs, 1)
    fit = slope * c + intercept
    ss_res = float(np.sum((devs - fit) ** 2))
    ss_tot = float(np.sum((devs - devs.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return CorrectionScaling(c, devs, float(slope), float(intercept), r2)


def gaussian_packet(grid: Grid, sigma: float = 1.0, center: float = 0.0, velocity: float = 0.0, m: float = 1.0):
    """Normalized 1-D Gaussian density and phase ``S = m v z``."""
    if grid.d != 1:
        raise ShapeError("gaussian_packet builds 1-D initial data")
    z = grid.axes()[0]
    rho = np.exp(-((z - center) ** 2) / (2 * sigma**2))
    rho /= grid.integrate(rho)
    return rho, m * velocity * z
