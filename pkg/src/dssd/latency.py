"""Closed-form timing model for DSD and DSSD rounds."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import VocabConfig
from .transport import DOWN, UP, LinkConfig

TABLE1_ALPHAS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.99)
TABLE1_GAMMAS = (2, 4, 6, 8)

# reference (1 - alpha**gamma, T_comm ms) cells to two decimals, rows by gamma, columns by alpha
TABLE1_PUBLISHED = {
    2: [(0.75, 26.00), (0.64, 25.12), (0.51, 24.08), (0.36, 22.88), (0.19, 21.52), (0.02, 20.16)],
    4: [(0.94, 27.50), (0.87, 26.96), (0.76, 26.08), (0.59, 24.72), (0.34, 22.75), (0.04, 20.32)],
    6: [(0.98, 27.88), (0.95, 27.63), (0.88, 27.06), (0.74, 25.90), (0.47, 23.75), (0.06, 20.47)],
    8: [(1.00, 27.97), (0.98, 27.87), (0.94, 27.54), (0.83, 26.66), (0.57, 24.56), (0.08, 20.62)],
}


@dataclass(frozen=True)
class TimingParams:
    t_slm_ms: float
    t_llm_ms: float
    gamma: int
    alpha: float
    vocab: VocabConfig
    link: LinkConfig

    def __post_init__(self):
        if self.t_slm_ms < 0 or self.t_llm_ms <= 0:
            raise ValueError("model times must be positive")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    @property
    def c(self) -> float:
        return self.t_slm_ms / self.t_llm_ms

    def with_(self, **kw) -> "TimingParams":
        return replace(self, **kw)


def dist_tx_ms(p: TimingParams, direction: str) -> float:
    """Time to push one full distribution over the given direction."""
    return p.link.tx_ms(p.vocab.dist_bits, direction)


def t_comm_dsd(p: TimingParams) -> float:
    return p.gamma * dist_tx_ms(p, UP) + p.link.ntt_ms


def all_accept_prob(alpha: float, gamma: int) -> float:
    return alpha ** gamma


def t_comm_dssd_expected(p: TimingParams) -> float:
    return (1.0 - all_accept_prob(p.alpha, p.gamma)) * dist_tx_ms(p, DOWN) + p.link.ntt_ms


def t_comm_bounds(p: TimingParams) -> tuple[float, float]:
    return p.link.ntt_ms, dist_tx_ms(p, DOWN) + p.link.ntt_ms


def t_inf_dsd(p: TimingParams) -> float:
    return p.gamma * p.t_slm_ms + p.t_llm_ms + t_comm_dsd(p)


def t_inf_dssd(p: TimingParams) -> float:
    return p.gamma * p.t_slm_ms + p.t_llm_ms + t_comm_dssd_expected(p)


def expected_tokens_per_round(alpha: float, gamma: int) -> float:
    if alpha >= 1.0:
        return gamma + 1.0
    return (1.0 - alpha ** (gamma + 1)) / (1.0 - alpha)


def t_inf(mode: str, p: TimingParams) -> float:
    mode = mode.lower()
    if mode == "dsd":
        return t_inf_dsd(p)
    if mode == "dssd":
        return t_inf_dssd(p)
    if mode == "llm":
        return p.t_llm_ms
    raise ValueError(f"unknown mode {mode!r}")


def predicted_speedup(mode: str, p: TimingParams) -> float:
    """Throughput relative to edge-only decoding at one token per T_LLM."""
    if mode.lower() == "llm":
        return 1.0
    return expected_tokens_per_round(p.alpha, p.gamma) / t_inf(mode, p) * p.t_llm_ms


def fit_table1_link(published=TABLE1_PUBLISHED) -> tuple[float, float]:
    """Solve T = x * payload + ntt on the gamma=2 row's alpha=0.5 and 0.99 cells.

    Uses the exact 1 - alpha**gamma rather than the two-decimal reference value.
    Returns (payload_ms, ntt_ms).
    """
    a_lo, a_hi = TABLE1_ALPHAS[0], TABLE1_ALPHAS[-1]
    A = np.array([[1 - a_lo ** 2, 1.0], [1 - a_hi ** 2, 1.0]])
    b = np.array([published[2][0][1], published[2][-1][1]])
    payload, ntt = np.linalg.solve(A, b)
    return float(payload), float(ntt)


def table1(alphas=TABLE1_ALPHAS, gammas=TABLE1_GAMMAS, payload_ms: float = 8.0,
           ntt_ms: float = 20.0) -> dict[int, list[tuple[float, float]]]:
    """Unrounded (1 - alpha**gamma, T_comm ms) per gamma row."""
    return {g: [(1 - a ** g, (1 - a ** g) * payload_ms + ntt_ms) for a in alphas]
            for g in gammas}
