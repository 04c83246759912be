"""Vocabulary, distributions, role-scoped randomness and sampling primitives.

Distributions are plain 1-d ``float64`` numpy arrays.  Every function here is
pure; outputs are marked read-only so they can be shared between endpoints.
"""
from __future__ import annotations

import enum
import weakref
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_U64 = (1 << 64) - 1


class ZeroMass(ValueError):
    """Raised when normalizing a vector with no probability mass."""


class InvalidDist(ValueError):
    pass


@dataclass(frozen=True)
class VocabConfig:
    size: int
    b_prob: int = 16

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocab size must be >= 2, got {self.size}")
        if self.b_prob not in (16, 32):
            raise ValueError(f"b_prob must be 16 or 32, got {self.b_prob}")

    @property
    def dist_bits(self) -> int:
        """Bits needed to ship one full distribution."""
        return self.size * self.b_prob


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def check_dist(d, size: int | None = None, atol: float = 1e-9) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1:
        raise InvalidDist(f"expected a 1-d vector, got shape {d.shape}")
    if size is not None and d.shape[0] != size:
        raise InvalidDist(f"length {d.shape[0]} != vocab size {size}")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise InvalidDist("negative or non-finite probability")
    total = d.sum()
    if abs(total - 1.0) > atol:
        raise InvalidDist(f"entries sum to {total!r}")
    return d


def normalize(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise InvalidDist("normalize() needs non-negative entries")
    total = raw.sum()
    if total <= 0:
        raise ZeroMass("cannot normalize a vector with zero total mass")
    return _frozen(raw / total)


_cdf_cache: dict[int, tuple[weakref.ref, np.ndarray]] = {}


def _cdf(d: np.ndarray) -> np.ndarray:
    # read-only arrays are treated as immutable values, so their running sums are reusable
    if not isinstance(d, np.ndarray) or d.flags.writeable:
        return np.cumsum(d)
    key = id(d)
    hit = _cdf_cache.get(key)
    if hit is not None and hit[0]() is d:
        return hit[1]
    cdf = np.cumsum(d)
    _cdf_cache[key] = (weakref.ref(d, lambda _, k=key: _cdf_cache.pop(k, None)), cdf)
    return cdf


def sample(d: np.ndarray, r: float) -> int:
    """Inverse-CDF draw: smallest index whose running sum exceeds ``r``."""
    cdf = _cdf(d)
    i = int(np.searchsorted(cdf, r, side="right"))
    if i >= len(d):
        # r landed past a total that rounded to just under 1
        i = int(np.flatnonzero(d)[-1])
    return i


def top_k_filter(d: np.ndarray, k: int, temperature: float = 1.0) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if not 1 <= k <= len(d):
        raise ValueError(f"k must be in [1, {len(d)}], got {k}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    # stable sort on the negated values keeps the lower index first among ties
    keep = np.argsort(-d, kind="stable")[:k]
    out = np.zeros_like(d)
    vals = d[keep]
    out[keep] = vals if temperature == 1.0 else vals ** (1.0 / temperature)
    return normalize(out)


class Role(enum.IntEnum):
    DraftSample = 0
    AcceptDraw = 1
    ResampleDraw = 2
    BonusDraw = 3


@lru_cache(maxsize=4096)
def _uniforms(seed: int, round: int, role: int, n: int) -> np.ndarray:
    ss = np.random.SeedSequence([seed & _U64, round, role])
    return _frozen(np.random.default_rng(ss).random(n))


@dataclass(frozen=True)
class RngStream:
    """Counter-based uniform stream keyed by ``(seed, round, role)``.

    Draw ``i`` is the same no matter who asks for it or how many draws were
    requested, so a device and an edge holding the same seed agree exactly.
    """

    seed: int
    round: int
    role: Role

    def draws(self, n: int) -> np.ndarray:
        return _uniforms(self.seed, self.round, int(self.role), n)

    def draw(self, i: int = 0) -> float:
        # request a fixed minimum so the common small draws share one cache entry
        return float(self.draws(max(i + 1, 16))[i])


@dataclass(frozen=True)
class RoundRng:
    """The four role streams of one draft-verify round."""

    seed: int
    round: int

    def stream(self, role: Role) -> RngStream:
        return RngStream(self.seed, self.round, role)

    def draft(self, i: int) -> float:
        return self.stream(Role.DraftSample).draw(i)

    def accept(self, j: int) -> float:
        """Uniform for the 1-based verification position ``j``."""
        return self.stream(Role.AcceptDraw).draw(j - 1)

    def resample(self) -> float:
        return self.stream(Role.ResampleDraw).draw(0)

    def bonus(self) -> float:
        return self.stream(Role.BonusDraw).draw(0)
