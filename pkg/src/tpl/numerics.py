"""Shared numeric kernels: SPD inversion, stable reductions, seeded RNG streams.

Conventions used throughout the package:

* vectors and matrices are float64 numpy arrays;
* reductions that feed exact metric identities go through ``stable_sum`` /
  ``stable_mean`` (compensated summation) so results are reproducible to 1e-12;
* randomness is only drawn through ``RngState`` streams, which are derived from
  a single run seed by name, so independent consumers (data generation, weight
  init, shuffling, buffer sampling) never share a bit stream.
"""

from __future__ import annotations

import hashlib
import logging
import math
from typing import Sequence

import numpy as np

from .errors import EmptyInput, NonPositiveTemperature, NotPositiveDefinite, NotSymmetric

logger = logging.getLogger(__name__)

#: Largest ridge tried during SPD escalation before giving up.
MAX_RIDGE = 1e-3

#: Smallest nonzero ridge used when the caller passed 0 and escalation starts.
MIN_ESCALATION_RIDGE = 1e-10

SYMMETRY_TOL = 1e-8


def spd_inverse(m: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Invert a symmetric positive-definite matrix via Cholesky.

    ``ridge * I`` is added before factorization.  If the factorization fails,
    the ridge is escalated by factors of 10 (starting from the caller's value,
    or from a tiny floor when the caller passed 0) up to ``MAX_RIDGE``; each
    escalation is logged.  Raises ``NotSymmetric`` if ``m`` is not symmetric to
    tolerance, ``NotPositiveDefinite`` if no tried ridge succeeds.

    The result is exactly symmetric (symmetrized after the solve).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NotSymmetric("matrix has non-finite entries")
    asym = np.max(np.abs(m - m.T)) if m.size else 0.0
    if asym > SYMMETRY_TOL:
        raise NotSymmetric(f"matrix asymmetry {asym:.3e} exceeds {SYMMETRY_TOL:.0e}")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")

    n = m.shape[0]
    eye = np.eye(n)
    current = float(ridge)
    while True:
        try:
            chol = np.linalg.cholesky(m + current * eye)
        except np.linalg.LinAlgError:
            nxt = max(current * 10.0, MIN_ESCALATION_RIDGE)
            if nxt > MAX_RIDGE:
                raise NotPositiveDefinite(
                    f"matrix not positive definite up to ridge {MAX_RIDGE:.0e}"
                ) from None
            logger.warning("spd_inverse: ridge escalated %.3e -> %.3e", current, nxt)
            current = nxt
            continue
        break

    # chol @ chol.T = m + ridge*I ; solve twice against the identity.
    half = np.linalg.solve(chol, eye)
    inv = np.linalg.solve(chol.T, half)
    return (inv + inv.T) / 2.0


def log_sum_exp(v: np.ndarray | Sequence[float]) -> float:
    """Numerically stable log(sum(exp(v))) for a non-empty 1-D array."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("log_sum_exp of an empty vector")
    hi = float(np.max(v))
    if not np.isfinite(hi):
        # All -inf -> -inf; any +inf/nan propagates as is.
        return hi
    return hi + math.log(float(np.sum(np.exp(v - hi))))


def softmax(v: np.ndarray | Sequence[float], temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax: ``exp(v/T) / sum(exp(v/T))``, computed shift-free.

    Raises ``NonPositiveTemperature`` for T <= 0 and ``EmptyInput`` for an
    empty vector.  The output sums to 1 up to float rounding and is invariant
    to adding a constant to ``v``.
    """
    if temperature <= 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("softmax of an empty vector")
    scaled = v / float(temperature)
    scaled = scaled - np.max(scaled)
    e = np.exp(scaled)
    return e / np.sum(e)


def stable_sum(values: Sequence[float] | np.ndarray) -> float:
    """Compensated (exact-rounded) sum of floats; order-insensitive in practice."""
    return math.fsum(np.asarray(values, dtype=np.float64).ravel().tolist())


def stable_mean(values: Sequence[float] | np.ndarray) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInput("mean of an empty vector")
    return stable_sum(v) / v.size


def _name_words(name: str) -> tuple[int, int]:
    """Stable 2x32-bit key for a stream name (sha256 based, platform independent)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return (
        int.from_bytes(digest[0:4], "little"),
        int.from_bytes(digest[4:8], "little"),
    )


class RngState:
    """A named, splittable random stream backed by the Philox counter generator.

    ``RngState(seed)`` is the root.  ``stream(name)`` derives an independent
    child keyed by the (seed, lineage-of-names) pair: same seed and same call
    sequence give bitwise-identical draws, and differently named streams are
    statistically independent.  Draw methods advance this stream's counter.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.path = _path
        ss = np.random.SeedSequence(self.seed, spawn_key=_path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def stream(self, name: str) -> "RngState":
        """Derive the independent child stream for ``name`` (fresh position)."""
        return RngState(self.seed, self.path + _name_words(name))

    # -- draws ---------------------------------------------------------------

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order randomized."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        return self._gen.choice(n, size=k, replace=False)
