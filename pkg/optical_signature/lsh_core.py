"""Cosine random-projection LSH and its closed-form performance predictions.

Bit i of H(v) is 1 iff r_i . v >= 0 for a Gaussian hyperplane r_i. Two vectors at angle theta
disagree on each bit with probability theta / pi, which gives the expected Hamming distance and
the probability that hashed verification reproduces every raw-vector decision.
"""
import logging
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import integrate, stats

from optical_signature import config
from optical_signature.errors import (DegenerateInputError, InvalidArgumentError,
                                      LengthError, NumericFailureError)

logger = logging.getLogger(__name__)

SIMPSON_PANELS = 2048
QUADRATURE_RTOL = 1e-6

BitsLike = Union[np.ndarray, Sequence[int], int]


@dataclass(frozen=True, eq=False)
class Hasher:
    """k Gaussian hyperplanes over input_dim, fully determined by (input_dim, k, seed)."""
    input_dim: int
    k: int
    seed: int
    hyperplanes: np.ndarray

    def hash(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.input_dim,):
            raise InvalidArgumentError(
                f"Vector should have {self.input_dim} entries but has shape {v.shape}")
        if not np.any(v):
            raise DegenerateInputError("Cannot hash an all-zero vector")
        return (self.hyperplanes @ v >= 0).astype(np.uint8)

    def hash_many(self, vectors) -> np.ndarray:
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[1] != self.input_dim:
            raise InvalidArgumentError(
                f"Expected (n, {self.input_dim}) vectors but got shape {vectors.shape}")
        if not np.all(np.any(vectors, axis=1)):
            raise DegenerateInputError("Cannot hash an all-zero vector")
        return (vectors @ self.hyperplanes.T >= 0).astype(np.uint8)


def make_hasher(input_dim: int, k: int, seed: int) -> Hasher:
    """Draws hyperplanes row-major from PCG64 seeded with `seed`."""
    if input_dim < 1 or k < 1:
        raise InvalidArgumentError(f"input_dim and k must be positive, got ({input_dim}, {k})")
    if not 0 <= seed < 2 ** 64:
        raise InvalidArgumentError(f"seed must be an unsigned 64-bit integer, got {seed}")
    rng = np.random.default_rng(seed)
    hyperplanes = rng.standard_normal((k, input_dim))
    hyperplanes.setflags(write=False)
    return Hasher(input_dim=input_dim, k=k, seed=seed, hyperplanes=hyperplanes)


def make_hashers(lsh_seed: int, n_frames: int = config.WINDOW_FRAMES, k: int = config.HASH_K):
    """Returns the (dynamic, identity) hasher pair shared by core unit and verifier."""
    dynamic = make_hasher(config.N_CHANNELS * n_frames, k, lsh_seed)
    identity = make_hasher(config.IDENTITY_DIM, k, (lsh_seed + 1) % 2 ** 64)
    return dynamic, identity


def hash_vector(hasher: Hasher, v) -> np.ndarray:
    return hasher.hash(v)


def _as_bits(x: BitsLike, width: int = 0) -> np.ndarray:
    if isinstance(x, (int, np.integer)):
        if x < 0:
            raise InvalidArgumentError("Integer bit vectors must be non-negative")
        width = max(width, int(x).bit_length())
        return np.array([(int(x) >> (width - 1 - i)) & 1 for i in range(width)], dtype=np.uint8)
    return np.asarray(x, dtype=np.uint8).ravel()


def hamming(a: BitsLike, b: BitsLike) -> int:
    """Number of differing positions. Ints are compared on their binary expansion."""
    if isinstance(a, (int, np.integer)) and isinstance(b, (int, np.integer)):
        return bin(int(a) ^ int(b)).count("1")
    a, b = _as_bits(a), _as_bits(b)
    if a.shape != b.shape:
        raise LengthError(f"Bit vectors differ in length: {a.size} vs {b.size}")
    return int(np.count_nonzero(a != b))


def zero_mean(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise InvalidArgumentError("zero_mean needs a nonempty vector")
    out = v - v.mean()
    # second pass removes the rounding left in the first mean
    return out - out.mean()


def _check_theta(theta: float, name: str = "theta"):
    if not 0.0 <= theta <= math.pi:
        raise InvalidArgumentError(f"{name} must lie in [0, pi], got {theta}")


def expected_distance(k: int, theta: float) -> float:
    _check_theta(theta)
    return k * theta / math.pi


def decision_threshold(k: int, theta: float) -> int:
    """Hamming threshold equivalent to an angular threshold, rounded to the nearest bit."""
    return int(round(expected_distance(k, theta)))


def _log_agree_below(theta: np.ndarray, k: int, d: int) -> np.ndarray:
    p = np.clip(np.asarray(theta, dtype=np.float64) / math.pi, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = stats.binom.logcdf(d, k, p)
    # D is always 0 when the vectors coincide
    return np.where(p <= 0.0, 0.0, out)


def _log_agree_above(theta: np.ndarray, k: int, d: int) -> np.ndarray:
    p = np.clip(np.asarray(theta, dtype=np.float64) / math.pi, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = stats.binom.logsf(d, k, p)
    return np.where(p >= 1.0, 0.0, out)


def _simpson(fn, lo: float, hi: float, panels: int) -> float:
    x = np.linspace(lo, hi, panels + 1)
    y = fn(x)
    if not np.all(np.isfinite(y)):
        raise NumericFailureError(f"Integrand is not finite on [{lo}, {hi}]")
    fine = integrate.simpson(y, x=x)
    coarse = integrate.simpson(y[::2], x=x[::2])
    if abs(fine - coarse) > QUADRATURE_RTOL * max(1.0, abs(fine)):
        raise NumericFailureError(
            f"Quadrature did not converge on [{lo}, {hi}]: {fine} vs {coarse}")
    return float(fine)


def log_agreement_probability(k: int, theta_th: float, panels: int = SIMPSON_PANELS) -> float:
    if k < 1:
        raise InvalidArgumentError(f"k must be positive, got {k}")
    if not 0.0 < theta_th < math.pi:
        raise InvalidArgumentError(f"theta_th must lie in (0, pi), got {theta_th}")
    d = int(math.floor(k * theta_th / math.pi))
    below = _simpson(lambda t: _log_agree_below(t, k, d), 0.0, theta_th, panels)
    above = _simpson(lambda t: _log_agree_above(t, k, d), theta_th, math.pi, panels)
    return below + above


def agreement_probability(k: int, theta_th: float, panels: int = SIMPSON_PANELS) -> float:
    """Probability that k-bit hashed verification agrees with raw verification at theta_th.

    The Hamming threshold is d = floor(k * theta_th / pi): pairs closer than theta_th must have
    D <= d and pairs farther must have D > d, D ~ Binomial(k, theta / pi). Each condition is
    accumulated as the exponential of the integrated log-probability over its angle range.
    """
    log_p = log_agreement_probability(k, theta_th, panels)
    p = math.exp(log_p)
    logger.debug("agreement_probability(k=%d, theta_th=%.3f) = %.6g", k, theta_th, p)
    return p


def pair_at_angle(rng: np.random.Generator, dim: int, theta: float):
    """Two unit vectors in R^dim at angle theta, uniformly oriented."""
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    w = rng.standard_normal(dim)
    w -= (w @ u) * u
    w /= np.linalg.norm(w)
    return u, math.cos(theta) * u + math.sin(theta) * w


@dataclass(frozen=True)
class MonteCarloEstimate:
    log_p: float
    stderr: float
    trials: int

    @property
    def p(self) -> float:
        return math.exp(self.log_p)


def _log_agreement_rates(rng, thetas, k: int, d: int, draws: int, dim: int, near: bool):
    rates = np.empty(len(thetas))
    for i, theta in enumerate(thetas):
        u, v = pair_at_angle(rng, dim, theta)
        # one wide hasher split into `draws` independent k-bit hashers
        hasher = make_hasher(dim, k * draws, int(rng.integers(2 ** 63)))
        distances = np.count_nonzero(
            (hasher.hash(u) != hasher.hash(v)).reshape(draws, k), axis=1)
        agree = distances <= d if near else distances > d
        rates[i] = np.count_nonzero(agree) / draws
    if not np.all(rates > 0):
        raise NumericFailureError(f"No agreeing draw at some angle, raise draws above {draws}")
    return np.log(rates)


def agreement_probability_monte_carlo(k: int, theta_th: float, trials: int = 500,
                                      seed: int = 0, draws: int = 400,
                                      dim: int = 16) -> MonteCarloEstimate:
    """Simulated estimate of ln P from real hyperplane hashing.

    `trials` angles are drawn uniformly from each decision range. At each angle a vector pair is
    hashed by `draws` fresh k-bit hashers, and the fraction of draws whose Hamming distance lands
    on the correct side of d = floor(k * theta_th / pi) estimates the agreement probability there.
    """
    if k < 1:
        raise InvalidArgumentError(f"k must be positive, got {k}")
    if not 0.0 < theta_th < math.pi:
        raise InvalidArgumentError(f"theta_th must lie in (0, pi), got {theta_th}")
    if trials < 2 or draws < 1:
        raise InvalidArgumentError("Monte Carlo needs at least 2 trials and 1 draw")
    rng = np.random.default_rng(seed)
    d = int(math.floor(k * theta_th / math.pi))
    near = _log_agreement_rates(rng, rng.uniform(0.0, theta_th, trials), k, d, draws, dim, True)
    far = _log_agreement_rates(rng, rng.uniform(theta_th, math.pi, trials), k, d, draws, dim,
                               False)
    span_near, span_far = theta_th, math.pi - theta_th
    log_p = span_near * near.mean() + span_far * far.mean()
    var = (span_near ** 2 * near.var(ddof=1) + span_far ** 2 * far.var(ddof=1)) / trials
    logger.debug("monte carlo ln P(k=%d, theta_th=%.3f) = %.4f +- %.4f", k, theta_th, log_p,
                 math.sqrt(var))
    return MonteCarloEstimate(log_p=float(log_p), stderr=float(math.sqrt(var)), trials=trials)
