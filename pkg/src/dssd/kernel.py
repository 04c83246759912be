"""Speculative-sampling math: accept/reject, residual, round verification,
a transport-free reference decoder and the analytic first-token law."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import RoundRng, ZeroMass, normalize, sample


class InvalidDraftProb(ValueError):
    """A drafted token arrived with non-positive draft probability."""


@dataclass(frozen=True)
class VerifyOutcome:
    gamma: int
    reject_position: int
    result_token: int | None

    @property
    def rejected(self) -> bool:
        return self.reject_position <= self.gamma

    @property
    def accepted_count(self) -> int:
        return self.reject_position - 1

    @property
    def presented(self) -> int:
        """Drafts that reached the accept test (the rest were discarded)."""
        return self.reject_position if self.rejected else self.gamma


def accept_prob(q_val: float, p_val: float) -> float:
    if not q_val > 0:
        raise InvalidDraftProb(f"draft probability must be positive, got {q_val!r}")
    if p_val <= 0:
        return 0.0
    return min(1.0, p_val / q_val)


def accept_test(q_val: float, p_val: float, r: float) -> bool:
    return r < accept_prob(q_val, p_val)


def residual(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """norm(max(0, P - Q)); raises ZeroMass when P == Q."""
    return normalize(np.maximum(P - Q, 0.0))


def verify_round(tokens: Sequence[int], q_vals: Sequence[float],
                 P_dists: Sequence[np.ndarray], rng: RoundRng,
                 Q_dists: Sequence[np.ndarray] | None = None) -> VerifyOutcome:
    """Scan the drafts left to right and stop at the first rejection.

    With ``Q_dists`` the rejected slot is resampled here (edge placement).
    Without it the outcome's ``result_token`` is ``None`` and whoever holds
    the draft distributions resamples with ``rng.resample()``.
    """
    gamma = len(tokens)
    if len(q_vals) != gamma or len(P_dists) != gamma + 1:
        raise ValueError("need gamma q-values and gamma+1 target distributions")
    for j in range(1, gamma + 1):
        x = tokens[j - 1]
        if not accept_test(q_vals[j - 1], P_dists[j - 1][x], rng.accept(j)):
            token = None
            if Q_dists is not None:
                token = sample(residual(P_dists[j - 1], Q_dists[j - 1]), rng.resample())
            return VerifyOutcome(gamma, j, token)
    return VerifyOutcome(gamma, gamma + 1, sample(P_dists[gamma], rng.bonus()))


def draft_tokens(Mq, prefix: Sequence[int], gamma: int, rng: RoundRng):
    """Autoregressively draft ``gamma`` tokens; returns (tokens, Q dists)."""
    ctx = list(prefix)
    tokens, dists = [], []
    for i in range(gamma):
        Q = Mq.next_dist(ctx)
        x = sample(Q, rng.draft(i))
        tokens.append(x)
        dists.append(Q)
        ctx.append(x)
    return tokens, dists


def target_dists(Mp, prefix: Sequence[int], tokens: Sequence[int]) -> list[np.ndarray]:
    """P_1 .. P_{gamma+1}: the target's distributions along the drafted path."""
    ctx = list(prefix)
    out = [Mp.next_dist(ctx)]
    for x in tokens:
        ctx.append(x)
        out.append(Mp.next_dist(ctx))
    return out


@dataclass
class DecodeResult:
    tokens: list[int]
    outcomes: list[VerifyOutcome] = field(default_factory=list)


def reference_decode(Mq, Mp, prefix: Sequence[int], gamma: int, n_tokens: int,
                     seed: int, top_k: int | None = None, temperature: float = 1.0,
                     max_rounds: int | None = None) -> DecodeResult:
    """Single-process draft-then-verify loop, no transport involved.

    Runs whole rounds until at least ``n_tokens`` are emitted (or
    ``max_rounds`` rounds have run) and returns every emitted token.
    """
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if top_k is not None:
        from .models import filtered
        Mq, Mp = filtered(Mq, top_k, temperature), filtered(Mp, top_k, temperature)
    ctx = list(prefix)
    res = DecodeResult([])
    rnd = 0
    while len(res.tokens) < n_tokens and (max_rounds is None or rnd < max_rounds):
        rng = RoundRng(seed, rnd)
        tokens, Qs = draft_tokens(Mq, ctx, gamma, rng)
        Ps = target_dists(Mp, ctx, tokens)
        q_vals = [Q[x] for Q, x in zip(Qs, tokens)]
        out = verify_round(tokens, q_vals, Ps, rng, Q_dists=Qs)
        emitted = tokens[:out.accepted_count] + [out.result_token]
        ctx.extend(emitted)
        res.tokens.extend(emitted)
        res.outcomes.append(out)
        rnd += 1
    return res


def first_token_law(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Exact law of the first emitted token when gamma = 1."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    ratio = np.divide(P, Q, out=np.ones_like(P), where=Q > 0)
    accepted = Q * np.minimum(1.0, ratio)
    reject_mass = 1.0 - accepted.sum()
    if reject_mass <= 0:
        return accepted
    try:
        return accepted + reject_mass * residual(P, Q)
    except ZeroMass:
        return accepted
