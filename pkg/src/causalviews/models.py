"""Analytic one-dimensional density models.

Besides the usual pdf/cdf/ppf each model provides :meth:`increment`, the
difference ``rho(c + t) - rho(c)`` evaluated without cancellation. The
stratified variety estimator needs displacement corrections far below the
rounding error of a plain subtraction of quantiles, and this is where that
precision comes from.

Higher dimensional models are products of the one-dimensional factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .errors import InvalidConfigError

_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


class DensityModel:
    """Base class; subclasses implement the one-dimensional primitives."""

    name = "model"
    period: float | None = None

    # primitives ---------------------------------------------------------
    def pdf(self, z):
        raise NotImplementedError

    def dpdf(self, z):
        raise NotImplementedError

    def d2pdf(self, z):
        raise NotImplementedError

    def cdf(self, z):
        """Cumulative mass; for periodic models this is unwrapped (monotone on R)."""
        raise NotImplementedError

    def ppf(self, u):
        raise NotImplementedError

    def increment(self, c, t):
        return self.pdf(np.asarray(c) + t) - self.pdf(c)

    @property
    def support(self) -> tuple[float, float]:
        raise NotImplementedError

    # derived ------------------------------------------------------------
    def mass_increment(self, c, x):
        """``int_c^{c+x} (rho(t) - rho(c)) dt`` by 16-point Gauss-Legendre."""
        c = np.asarray(c, dtype=float)[..., None]
        x = np.asarray(x, dtype=float)[..., None]
        t = 0.5 * x * (1.0 + _GL_X)
        return 0.5 * x[..., 0] * (self.increment(c, t) @ _GL_W)

    def _quad(self, f) -> float:
        lo, hi = self.support
        pts = getattr(self, "_breakpoints", None)
        val, _ = integrate.quad(f, lo, hi, limit=400, epsabs=1e-14, epsrel=1e-12, points=pts)
        return float(val)

    def fisher(self) -> float:
        """``int rho'^2 / rho``."""
        return self._quad(lambda z: self.dpdf(z) ** 2 / self.pdf(z) if self.pdf(z) > 0 else 0.0)

    def laplacian_fisher(self) -> float:
        """``int rho''^2 / rho``."""
        return self._quad(lambda z: self.d2pdf(z) ** 2 / self.pdf(z) if self.pdf(z) > 0 else 0.0)

    def power_integral(self, k: float) -> float:
        """``int rho^k``."""
        return self._quad(lambda z: self.pdf(z) ** k)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.ppf(rng.random(n))

    # products in d dimensions -----------------------------------------
    def pdf_nd(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        return np.prod(self.pdf(z), axis=-1)

    def sample_nd(self, rng: np.random.Generator, n: int, d: int) -> np.ndarray:
        return self.ppf(rng.random((n, d)))

    def fisher_nd(self, d: int) -> float:
        return d * self.fisher()

    def power_integral_nd(self, k: float, d: int) -> float:
        return self.power_integral(k) ** d

    def laplacian_fisher_nd(self, d: int) -> float:
        """``int (lap rho)^2 / rho`` for the product density."""
        if d == 1:
            return self.laplacian_fisher()
        # (sum_i f_i''/f_i)^2 averaged over the product measure
        m2 = self.laplacian_fisher()
        # int rho'' is the boundary jump of rho', zero for decaying tails
        lo, hi = self.support
        m1 = 0.0 if not (np.isfinite(lo) and np.isfinite(hi)) else float(self.dpdf(hi) - self.dpdf(lo))
        return d * m2 + d * (d - 1) * m1 * m1


@dataclass
class Gaussian(DensityModel):
    sigma: float = 1.0
    mu: float = 0.0
    name: str = field(default="gaussian", init=False)

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise InvalidConfigError("sigma must be positive")

    def pdf(self, z):
        x = (np.asarray(z) - self.mu) / self.sigma
        return np.exp(-0.5 * x * x) / (self.sigma * math.sqrt(2 * math.pi))

    def dpdf(self, z):
        x = (np.asarray(z) - self.mu) / self.sigma
        return -x / self.sigma * self.pdf(z)

    def d2pdf(self, z):
        x = (np.asarray(z) - self.mu) / self.sigma
        return (x * x - 1.0) / self.sigma**2 * self.pdf(z)

    def cdf(self, z):
        return special.ndtr((np.asarray(z) - self.mu) / self.sigma)

    def ppf(self, u):
        return self.mu + self.sigma * special.ndtri(u)

    def increment(self, c, t):
        c = np.asarray(c) - self.mu
        return self.pdf(c + self.mu) * np.expm1(-t * (2.0 * c + t) / (2.0 * self.sigma**2))

    @property
    def support(self):
        return (-np.inf, np.inf)

    def fisher(self) -> float:
        return 1.0 / self.sigma**2

    def laplacian_fisher(self) -> float:
        return 2.0 / self.sigma**4

    def power_integral(self, k: float) -> float:
        return (2 * math.pi * self.sigma**2) ** ((1.0 - k) / 2.0) / math.sqrt(k)


@dataclass
class CosineRing(DensityModel):
    """``rho = (1 + eps cos(2 pi z / length)) / length`` on a periodic interval."""

    eps: float = 0.3
    length: float = 1.0
    name: str = field(default="cosine", init=False)

    def __post_init__(self) -> None:
        if not (0 <= self.eps < 1):
            raise InvalidConfigError("eps must lie in [0, 1)")
        if not self.length > 0:
            raise InvalidConfigError("length must be positive")
        self.period = self.length

    @property
    def _k(self) -> float:
        return 2 * math.pi / self.length

    def pdf(self, z):
        return (1.0 + self.eps * np.cos(self._k * np.asarray(z))) / self.length

    def dpdf(self, z):
        return -self.eps * self._k * np.sin(self._k * np.asarray(z)) / self.length

    def d2pdf(self, z):
        return -self.eps * self._k**2 * np.cos(self._k * np.asarray(z)) / self.length

    def cdf(self, z):
        z = np.asarray(z, dtype=float)
        return (z + self.eps * np.sin(self._k * z) / self._k) / self.length

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        z = u * self.length
        for _ in range(50):
            step = (self.cdf(z) - u) / self.pdf(z)
            z = z - step
            if np.all(np.abs(step) <= 1e-15 * self.length):
                break
        return z

    def increment(self, c, t):
        k = self._k
        c = np.asarray(c)
        return -2.0 * self.eps / self.length * np.sin(k * (c + 0.5 * t)) * np.sin(0.5 * k * t)

    @property
    def support(self):
        return (0.0, self.length)

    def sample_nd(self, rng, n, d):
        return np.mod(super().sample_nd(rng, n, d), self.length)


@dataclass
class UniformRing(CosineRing):
    """Flat density on a periodic interval."""

    eps: float = 0.0
    name: str = field(default="uniform", init=False)

    def increment(self, c, t):
        return np.zeros(np.broadcast(np.asarray(c), np.asarray(t)).shape)


@dataclass
class GaussianMixture(DensityModel):
    weights: tuple = (0.5, 0.5)
    means: tuple = (-1.5, 1.5)
    sigmas: tuple = (1.0, 1.0)
    name: str = field(default="mixture", init=False)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if not (len(w) == len(self.means) == len(self.sigmas)) or len(w) == 0:
            raise InvalidConfigError("mixture weights, means and sigmas must have equal length")
        if np.any(w < 0) or not w.sum() > 0:
            raise InvalidConfigError("mixture weights must be non-negative with positive sum")
        self._w = w / w.sum()
        self._parts = [Gaussian(s, m) for m, s in zip(self.means, self.sigmas)]

    def _mix(self, fn, *args):
        return sum(w * getattr(p, fn)(*args) for w, p in zip(self._w, self._parts))

    def pdf(self, z):
        return self._mix("pdf", z)

    def dpdf(self, z):
        return self._mix("dpdf", z)

    def d2pdf(self, z):
        return self._mix("d2pdf", z)

    def cdf(self, z):
        return self._mix("cdf", z)

    def increment(self, c, t):
        return self._mix("increment", c, t)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        lo = min(m - 40 * s for m, s in zip(self.means, self.sigmas))
        hi = max(m + 40 * s for m, s in zip(self.means, self.sigmas))
        grid = np.linspace(lo, hi, 20001)
        z = np.interp(u, self.cdf(grid), grid)
        for _ in range(8):
            f = self.pdf(z)
            z = np.where(f > 1e-300, z - (self.cdf(z) - u) / np.maximum(f, 1e-300), z)
        return z

    @property
    def support(self):
        return (-np.inf, np.inf)

    @property
    def _breakpoints(self):
        return None


MODELS = {"gaussian": Gaussian, "cosine": CosineRing, "uniform": UniformRing, "mixture": GaussianMixture}


def get_model(name: str, **params) -> DensityModel:
    """Instantiate a model by name (``gaussian``, ``cosine``, ``uniform``, ``mixture``)."""
    try:
        cls = MODELS[name]
    except KeyError:
        raise InvalidConfigError(f"unknown density model {name!r}; choose from {sorted(MODELS)}") from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise InvalidConfigError(f"bad parameters for model {name!r}: {exc}") from exc
