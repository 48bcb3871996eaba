"""Dirichlet, diagonal Gaussian and diagonal Laplace distributions.

All computations are float64 numpy. Parameters may carry leading batch
dimensions; the class axis is always last.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

EPS_SIGMA = 1e-6


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class DirichletParams:
    alpha: np.ndarray

    def __post_init__(self):
        a = _as_f64(self.alpha)
        if not np.all(np.isfinite(a)) or np.any(a <= 0):
            raise ValueError("Dirichlet concentrations must be positive and finite")
        object.__setattr__(self, "alpha", a)

    @property
    def alpha0(self) -> np.ndarray:
        return self.alpha.sum(axis=-1)


@dataclass(frozen=True)
class _DiagLocScale:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu, sigma = np.broadcast_arrays(_as_f64(self.mu), _as_f64(self.sigma))
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise ValueError("scales must be positive and finite")
        if not np.all(np.isfinite(mu)):
            raise ValueError("locations must be finite")
        object.__setattr__(self, "mu", np.array(mu))
        object.__setattr__(self, "sigma", np.array(sigma))


@dataclass(frozen=True)
class DiagGaussianParams(_DiagLocScale):
    """Diagonal Gaussian; ``sigma`` holds standard deviations."""


@dataclass(frozen=True)
class DiagLaplaceParams(_DiagLocScale):
    """Diagonal Laplace; ``sigma`` holds scales (mean absolute deviation)."""


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream (Philox keyed by ``seed``).

    Streams are plain values: the same (seed, position) always yields the
    same draws, and nothing is mutated when drawing from one.
    """

    seed: int
    position: int = 0
    _key: int = field(init=False, repr=False, compare=False, default=0)

    def __post_init__(self):
        object.__setattr__(self, "_key", int(self.seed) % (1 << 64))

    def generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self._key)
        if self.position:
            bitgen = bitgen.advance(self.position)
        return np.random.Generator(bitgen)

    def advanced(self, n: int) -> "RngStream":
        return RngStream(self.seed, self.position + n)

    def child(self, index: int) -> "RngStream":
        """Independent sub-stream, e.g. one per decoding step or per member."""
        ss = np.random.SeedSequence([self._key, self.position, int(index)])
        return RngStream(int(ss.generate_state(1, np.uint64)[0]))


def dirichlet_log_pdf(params: DirichletParams, pi) -> np.ndarray:
    """Log-density of ``pi`` (on the open simplex) under ``Dir(alpha)``."""
    pi = _as_f64(pi)
    if np.any(pi <= 0):
        raise ValueError("Dirichlet log-density needs every component > 0; smooth the input first")
    if np.any(np.abs(pi.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("input is not on the probability simplex")
    a = params.alpha
    return gammaln(a.sum(-1)) - gammaln(a).sum(-1) + ((a - 1.0) * np.log(pi)).sum(-1)


def laplace_log_pdf(params: DiagLaplaceParams, z) -> np.ndarray:
    z = _as_f64(z)
    return (-np.log(2.0 * params.sigma) - np.abs(z - params.mu) / params.sigma).sum(-1)


def gaussian_log_pdf(params: DiagGaussianParams, z) -> np.ndarray:
    z = _as_f64(z)
    d = (z - params.mu) / params.sigma
    return (-0.5 * np.log(2.0 * np.pi) - np.log(params.sigma) - 0.5 * d * d).sum(-1)


def sample(params: DiagLaplaceParams | DiagGaussianParams, n: int, rng: RngStream) -> np.ndarray:
    """Draw ``n`` i.i.d. vectors; result has shape ``(n, *params.mu.shape)``.

    Laplace draws use the inverse CDF ``mu - sigma*sgn(u)*ln(1-2|u|)`` with
    ``u`` uniform on the open interval (-1/2, 1/2). Gaussian draws use
    numpy's ziggurat standard normal.
    """
    if n < 1:
        raise ValueError("sample count must be >= 1")
    gen = rng.generator()
    shape = (n,) + params.mu.shape
    if isinstance(params, DiagLaplaceParams):
        u = gen.random(shape) - 0.5
        u = np.clip(u, np.nextafter(-0.5, 0.0), np.nextafter(0.5, 0.0))
        return params.mu - params.sigma * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    if isinstance(params, DiagGaussianParams):
        return params.mu + params.sigma * gen.standard_normal(shape)
    raise TypeError(f"cannot sample from {type(params).__name__}")


def _check_samples(samples) -> np.ndarray:
    s = _as_f64(samples)
    if s.ndim < 1 or s.shape[0] < 2:
        raise ValueError("maximum-likelihood fit needs at least 2 samples")
    return s


def fit_laplace_mle(samples, eps_sigma: float = EPS_SIGMA) -> DiagLaplaceParams:
    """Per-dimension Laplace MLE over axis 0: median and mean absolute deviation.

    For an even sample count the midpoint of the two central order
    statistics is used. Scales are floored at ``eps_sigma``.
    """
    s = _check_samples(samples)
    mu = np.median(s, axis=0)
    sigma = np.maximum(np.abs(s - mu).mean(axis=0), eps_sigma)
    return DiagLaplaceParams(mu, sigma)


def fit_gaussian_mle(samples, eps_sigma: float = EPS_SIGMA) -> DiagGaussianParams:
    s = _check_samples(samples)
    mu = s.mean(axis=0)
    sigma = np.maximum(np.sqrt(((s - mu) ** 2).mean(axis=0)), eps_sigma)
    return DiagGaussianParams(mu, sigma)
