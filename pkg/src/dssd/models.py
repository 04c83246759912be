"""Draft/target language-model roles and acceptance-rate-calibrated synthetic pairs."""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import VocabConfig, _frozen, check_dist, top_k_filter
from .kernel import reference_decode


class CalibrationInfeasible(ValueError):
    def __init__(self, msg: str, achieved: float):
        super().__init__(f"{msg} (achieved alpha={achieved:.6g})")
        self.achieved = achieved


class LanguageModel(Protocol):
    latency_ms: float

    def next_dist(self, prefix: Sequence[int]) -> np.ndarray: ...


class TableModel:
    """Lookup model: the last ``order`` tokens select a distribution."""

    def __init__(self, table: Mapping[tuple, np.ndarray], fallback: np.ndarray,
                 order: int | None = None, latency_ms: float = 0.0):
        self.fallback = _frozen(check_dist(fallback).copy())
        self.table = {tuple(k): _frozen(check_dist(v, len(self.fallback)).copy())
                      for k, v in table.items()}
        orders = {len(k) for k in self.table}
        if order is None:
            order = orders.pop() if len(orders) == 1 else 1
        self.order = order
        self.latency_ms = latency_ms

    @property
    def vocab_size(self) -> int:
        return len(self.fallback)

    def context_key(self, prefix: Sequence[int]) -> tuple:
        return tuple(prefix[-self.order:]) if self.order else ()

    def next_dist(self, prefix):
        return self.table.get(self.context_key(prefix), self.fallback)

    def dump(self, fp) -> None:
        """Write the ``context : probabilities`` text fixture format."""
        fp.write(f"# order={self.order} latency_ms={self.latency_ms!r}\n")
        fp.write("* : " + " ".join(repr(float(v)) for v in self.fallback) + "\n")
        for key, dist in sorted(self.table.items()):
            ctx = ",".join(str(t) for t in key)
            fp.write(f"{ctx} : " + " ".join(repr(float(v)) for v in dist) + "\n")

    def dumps(self) -> str:
        buf = io.StringIO()
        self.dump(buf)
        return buf.getvalue()

    @classmethod
    def load(cls, fp) -> "TableModel":
        table, fallback, meta = {}, None, {}
        for line in fp:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                meta.update(kv.split("=", 1) for kv in line[1:].split())
                continue
            ctx, _, probs = line.partition(":")
            dist = np.array([float(v) for v in probs.split()])
            ctx = ctx.strip()
            if ctx == "*":
                fallback = dist
            else:
                table[tuple(int(t) for t in ctx.split(",") if t)] = dist
        if fallback is None:
            raise ValueError("fixture has no '*' fallback line")
        return cls(table, fallback, order=int(meta["order"]) if "order" in meta else None,
                   latency_ms=float(meta.get("latency_ms", 0.0)))

    @classmethod
    def loads(cls, text: str) -> "TableModel":
        return cls.load(io.StringIO(text))


def table_model(table, fallback, order=None, latency_ms=0.0) -> TableModel:
    return TableModel(table, fallback, order=order, latency_ms=latency_ms)


class ContextModel:
    """Dense per-context model: context id is a hash of the last ``order`` tokens."""

    def __init__(self, dists: np.ndarray, order: int = 1, latency_ms: float = 0.0):
        self.dists = _frozen(np.array(dists, dtype=np.float64))
        self.order = order
        self.latency_ms = latency_ms
        self._rows = [self.dists[i] for i in range(len(self.dists))]

    @property
    def n_contexts(self) -> int:
        return len(self.dists)

    @property
    def vocab_size(self) -> int:
        return self.dists.shape[1]

    def context_key(self, prefix: Sequence[int]) -> int:
        key = 0
        for t in prefix[-self.order:] if self.order else ():
            key = key * 1_000_003 + int(t)
        return key % self.n_contexts

    def next_dist(self, prefix):
        return self._rows[self.context_key(prefix)]

    def to_table(self) -> TableModel:
        """Equivalent table model (order-1 only: one entry per token)."""
        if self.order != 1:
            raise ValueError("table export is only defined for order 1")
        table = {(t,): self._rows[t % self.n_contexts] for t in range(self.vocab_size)}
        return TableModel(table, self._rows[0], order=1, latency_ms=self.latency_ms)


class FilteredModel:
    """Applies top-k/temperature to another model, memoized per context."""

    def __init__(self, base, k: int, temperature: float = 1.0):
        self.base = base
        self.k = k
        self.temperature = temperature
        self._cache: dict = {}

    @property
    def latency_ms(self) -> float:
        return self.base.latency_ms

    @property
    def vocab_size(self) -> int:
        return self.base.vocab_size

    def next_dist(self, prefix):
        key_fn = getattr(self.base, "context_key", None)
        if key_fn is None:
            return top_k_filter(self.base.next_dist(prefix), self.k, self.temperature)
        key = key_fn(prefix)
        d = self._cache.get(key)
        if d is None:
            d = self._cache[key] = top_k_filter(self.base.next_dist(prefix), self.k,
                                                self.temperature)
        return d


def filtered(model, k: int | None, temperature: float = 1.0):
    if k is None:
        return model
    if isinstance(model, FilteredModel) and model.k == k and model.temperature == temperature:
        return model
    return FilteredModel(model, k, temperature)


def _water_level_top(v: np.ndarray, m: float) -> float:
    """Level L with sum(max(0, v - L)) == m, for 0 <= m <= sum(v)."""
    s = np.sort(v)[::-1]
    csum = np.cumsum(s)
    for n in range(1, len(s) + 1):
        level = (csum[n - 1] - m) / n
        nxt = s[n] if n < len(s) else 0.0
        if level >= nxt:
            return max(level, 0.0)
    return 0.0


def _water_level_bottom(v: np.ndarray, m: float) -> float:
    """Level U with sum(max(0, U - v)) == m."""
    s = np.sort(v)
    csum = np.cumsum(s)
    for n in range(1, len(s) + 1):
        level = (m + csum[n - 1]) / n
        if n == len(s) or level <= s[n]:
            return level
    raise AssertionError("unreachable")


def mass_moves(P: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Removal/addition vectors that move ``1 - alpha`` of mass.

    Mass is taken off the largest entries (lowered to a common level, at
    worst to 0) and poured onto the smallest of the remaining entries.
    Donors only shrink and receivers only grow, so sum(min(P, Q)) == alpha.
    """
    P = np.asarray(P, dtype=np.float64)
    m = 1.0 - alpha
    remove = np.zeros_like(P)
    add = np.zeros_like(P)
    if m <= 0:
        return remove, add
    level = _water_level_top(P, m)
    donors = P > level
    if donors.all():
        # best case keeps one receiver: everything lowered to the minimum entry
        raise CalibrationInfeasible("every entry would have to give up mass",
                                    float(len(P) * P.min()))
    remove[donors] = P[donors] - level
    recv = ~donors
    add[recv] = np.maximum(_water_level_bottom(P[recv], m) - P[recv], 0.0)
    return remove, add


def calibrate_draft(P: np.ndarray, alpha: float) -> np.ndarray:
    """Draft distribution Q with sum(min(P, Q)) == alpha."""
    remove, add = mass_moves(P, alpha)
    return np.maximum(P - remove + add, 0.0)


def _apportion(x: np.ndarray, total: int) -> np.ndarray:
    """Round non-negative ``x`` (summing to ``total``) to integers, same sum."""
    fl = np.floor(x + 1e-9 * np.maximum(x, 1))
    short = int(round(total - fl.sum()))
    if short > 0:
        frac = x - fl
        order = np.argsort(-frac, kind="stable")
        fl[order[:short]] += 1
    elif short < 0:
        order = np.argsort(x - fl, kind="stable")
        order = order[fl[order] > 0]
        fl[order[:-short]] -= 1
    return fl


@dataclass(frozen=True)
class CalibratedPairConfig:
    """Synthetic draft/target pair with a controlled acceptance rate.

    ``support`` restricts each context to that many tokens so a top-k filter
    with ``k >= support`` leaves the pair (and its alpha) untouched.
    ``grid_bits`` snaps every probability to a multiple of ``2**-grid_bits``;
    with ``grid_bits`` = 11 (binary16) or 24 (binary32) each value survives the
    wire format exactly, at the price of alpha being hit only to the grid.
    """

    alpha_target: float
    vocab: VocabConfig
    context_order: int = 1
    seed: int = 0
    n_contexts: int = 64
    support: int | None = None
    grid_bits: int | None = None
    concentration: float = 0.5
    draft_latency_ms: float = 0.0
    target_latency_ms: float = 0.0
    max_tries: int = 64

    def __post_init__(self):
        if not 0 < self.alpha_target <= 1:
            raise ValueError("alpha_target must be in (0, 1]")
        if self.support is not None and not 2 <= self.support <= self.vocab.size:
            raise ValueError("support must be in [2, |V|]")


GRID_BITS = {16: 11, 32: 24}


def wire_grid_bits(b_prob: int) -> int:
    """Finest dyadic grid whose points in [0, 1] are exact at ``b_prob`` bits."""
    return GRID_BITS[b_prob]


def _context_pair(cfg: CalibratedPairConfig, ctx: int):
    s = cfg.support or cfg.vocab.size
    rng = np.random.default_rng([cfg.seed & ((1 << 64) - 1), ctx])
    pos = np.sort(rng.choice(cfg.vocab.size, size=s, replace=False)) if s < cfg.vocab.size \
        else np.arange(s)
    best = 0.0
    for _ in range(cfg.max_tries):
        p = rng.dirichlet(np.full(s, cfg.concentration))
        if cfg.grid_bits is not None:
            unit = 2 ** cfg.grid_bits
            p = _apportion(p * unit, unit)
            moved = int(round((1.0 - cfg.alpha_target) * unit))
            try:
                remove, add = mass_moves(p / unit, 1.0 - moved / unit)
            except CalibrationInfeasible as e:
                best = max(best, e.achieved)
                continue
            q = p - _apportion(remove * unit, moved) + _apportion(add * unit, moved)
            p, q = p / unit, q / unit
        else:
            try:
                q = calibrate_draft(p, cfg.alpha_target)
            except CalibrationInfeasible as e:
                best = max(best, e.achieved)
                continue
        P = np.zeros(cfg.vocab.size)
        Q = np.zeros(cfg.vocab.size)
        P[pos], Q[pos] = p, q
        return P, Q
    raise CalibrationInfeasible(f"context {ctx}: no feasible draw in {cfg.max_tries} tries",
                                best)


def calibrated_pair(cfg: CalibratedPairConfig) -> tuple[ContextModel, ContextModel]:
    """Return ``(Mq, Mp)`` whose per-context overlap sum(min(P, Q)) is alpha."""
    Ps, Qs = zip(*(_context_pair(cfg, c) for c in range(cfg.n_contexts)))
    Mq = ContextModel(np.stack(Qs), cfg.context_order, cfg.draft_latency_ms)
    Mp = ContextModel(np.stack(Ps), cfg.context_order, cfg.target_latency_ms)
    return Mq, Mp


def overlap(P: np.ndarray, Q: np.ndarray) -> float:
    """sum_x min(P(x), Q(x)): the per-position acceptance probability."""
    return float(np.minimum(P, Q).sum())


def measure_alpha(Mq, Mp, prefix, gamma: int, rounds: int, seed: int,
                  top_k: int | None = None, temperature: float = 1.0) -> float:
    """Accepted drafts over drafts presented to verification."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    res = reference_decode(Mq, Mp, prefix, gamma, n_tokens=10 ** 18, seed=seed,
                           top_k=top_k, temperature=temperature, max_rounds=rounds)
    acc = sum(o.accepted_count for o in res.outcomes)
    shown = sum(o.presented for o in res.outcomes)
    return acc / shown
