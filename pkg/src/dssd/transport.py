"""Message carriers and the session driver.

Two carriers share the same state machines: a virtual-clock link that
charges the analytic timing model, and a TCP loopback where bandwidth and
NTT are imposed with sleeps.  Token output never depends on the carrier.
"""
from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

from .core import RoundRng, VocabConfig, sample
from .models import filtered
from .protocol import (
    HEADER, EndpointState, MalformedFrame, Mode, decode, device_apply_dsd,
    device_apply_dssd, device_round_dsd, device_round_dssd, edge_round_dsd, edge_round_dssd,
    encode, payload_bits,
)

log = logging.getLogger(__name__)

UP, DOWN = "up", "down"


@dataclass(frozen=True)
class LinkConfig:
    up_mbps: float
    down_mbps: float
    ntt_ms: float = 0.0

    def __post_init__(self):
        if self.up_mbps <= 0 or self.down_mbps <= 0:
            raise ValueError("link rates must be positive")
        if self.ntt_ms < 0:
            raise ValueError("ntt_ms must be >= 0")

    def rate(self, direction: str) -> float:
        return self.up_mbps if direction == UP else self.down_mbps

    def tx_ms(self, bits: int, direction: str) -> float:
        """Pure transmission time; 1 Mbps moves 1000 bits per ms."""
        return bits / (self.rate(direction) * 1e3)


class VirtualClock:
    def __init__(self, now_ms: float = 0.0):
        self.now_ms = now_ms

    def advance(self, ms: float) -> float:
        if ms < 0:
            raise ValueError("clock cannot move backwards")
        self.now_ms += ms
        return ms


def sim_transmit(bits: int, direction: str, link: LinkConfig, clock: VirtualClock) -> float:
    """Charge one message: D/R plus half the round-trip NTT."""
    if bits < 0:
        raise ValueError("bits must be >= 0")
    return clock.advance(link.tx_ms(bits, direction) + link.ntt_ms / 2)


@dataclass
class RoundStats:
    gamma: int
    accepted: int
    reject_position: int
    uplink_bits: int
    downlink_bits: int
    t_draft_ms: float
    t_verify_ms: float
    t_comm_ms: float
    t_round_ms: float
    emitted: int = 0

    @property
    def rejected(self) -> bool:
        return self.reject_position <= self.gamma


@dataclass
class SessionTranscript:
    mode: str
    tokens: list[int] = field(default_factory=list)
    rounds: list[RoundStats] = field(default_factory=list)
    total_ms: float = 0.0
    clock: str = "virtual"
    clock_ms: float = 0.0

    @property
    def throughput_tps(self) -> float:
        return 1e3 * len(self.tokens) / self.total_ms if self.total_ms > 0 else float("inf")

    @property
    def alpha_measured(self) -> float:
        shown = sum(r.reject_position if r.rejected else r.gamma for r in self.rounds)
        return sum(r.accepted for r in self.rounds) / shown if shown else float("nan")


class TransportError(RuntimeError):
    pass


def _device_fns(mode: Mode):
    if mode is Mode.DSD:
        return device_round_dsd, device_apply_dsd, edge_round_dsd
    return device_round_dssd, device_apply_dssd, edge_round_dssd


def _stats(gamma, down, up_bits, down_bits, t_draft, t_verify, t_comm, emitted):
    j = down.j
    return RoundStats(gamma, j - 1, j, up_bits, down_bits, t_draft, t_verify, t_comm,
                      t_draft + t_verify + t_comm, emitted=emitted)


def _sim_session(mode: Mode, Mq, Mp, gamma, link, vocab, prefix, n_tokens, seed,
                 max_rounds=None) -> SessionTranscript:
    clock = VirtualClock()
    dev, edge = EndpointState.pair(mode, prefix, vocab, seed)
    dev_round, dev_apply, edge_round = _device_fns(mode)
    tr = SessionTranscript(mode.value)
    while len(tr.tokens) < n_tokens and (max_rounds is None or len(tr.rounds) < max_rounds):
        t_draft = clock.advance(gamma * Mq.latency_ms)
        up = dev_round(dev, Mq, gamma)
        up_bits = payload_bits(up, vocab)
        t_up = sim_transmit(up_bits, UP, link, clock)
        t_verify = clock.advance(Mp.latency_ms)
        down = edge_round(edge, Mp, up)
        down_bits = payload_bits(down, vocab)
        t_down = sim_transmit(down_bits, DOWN, link, clock)
        emitted = dev_apply(dev, down)
        tr.tokens.extend(emitted)
        tr.rounds.append(_stats(gamma, down, up_bits, down_bits, t_draft, t_verify,
                                t_up + t_down, len(emitted)))
    # summed per round so the transcript conserves time exactly; the clock agrees to rounding
    tr.total_ms = sum(r.t_round_ms for r in tr.rounds)
    tr.clock_ms = clock.now_ms
    return tr


def _llm_session(Mp, prefix, n_tokens, seed, clock_kind="virtual", sleep=False):
    """Edge-only autoregressive decoding: T_LLM per token, nothing on the air."""
    ctx = list(prefix)
    tr = SessionTranscript("llm", clock=clock_kind)
    for t in range(n_tokens):
        start = time.perf_counter()
        if sleep:
            time.sleep(Mp.latency_ms / 1e3)
        x = sample(Mp.next_dist(ctx), RoundRng(seed, t).bonus())
        ctx.append(x)
        tr.tokens.append(x)
        dt = (time.perf_counter() - start) * 1e3 if sleep else Mp.latency_ms
        tr.rounds.append(RoundStats(0, 0, 1, 0, 0, 0.0, dt, 0.0, dt, emitted=1))
        tr.total_ms += dt
    return tr


# --- stream-socket carrier -------------------------------------------------

def send_frame(sock: socket.socket, frame: bytes) -> None:
    sock.sendall(frame)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            if buf:
                raise MalformedFrame("connection closed mid-frame")
            return None
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> bytes | None:
    """One length-prefixed frame, or None on a clean EOF."""
    head = _recv_exact(sock, HEADER.size)
    if head is None:
        return None
    _, length = HEADER.unpack(head)
    body = _recv_exact(sock, length) if length else b""
    if body is None:
        raise MalformedFrame("connection closed before frame body")
    return head + body


def _pace(link: LinkConfig, bits: int, direction: str, pace: bool) -> None:
    if pace:
        time.sleep((link.tx_ms(bits, direction) + link.ntt_ms / 2) / 1e3)


@dataclass
class SocketOptions:
    host: str = "127.0.0.1"
    port: int = 0
    pace: bool = True  # sleep for transmission time and NTT share
    emulate_compute: bool = True  # sleep for declared model latencies
    timeout_s: float = 30.0


def serve_edge(conn: socket.socket, mode: Mode, Mp, vocab: VocabConfig, prefix, seed: int,
               link: LinkConfig, opts: SocketOptions) -> EndpointState:
    """Edge loop on an accepted connection; returns when the device hangs up."""
    _, _, edge_round = _device_fns(mode)
    edge = EndpointState.pair(mode, prefix, vocab, seed)[1]
    while True:
        frame = recv_frame(conn)
        if frame is None:
            return edge
        up = decode(frame, vocab)
        if opts.emulate_compute:
            time.sleep(Mp.latency_ms / 1e3)
        down = edge_round(edge, Mp, up)
        _pace(link, payload_bits(down, vocab), DOWN, opts.pace)
        send_frame(conn, encode(down, vocab))


def run_device(sock: socket.socket, mode: Mode, Mq, gamma: int, vocab: VocabConfig, prefix,
               n_tokens: int, seed: int, link: LinkConfig, opts: SocketOptions,
               max_rounds: int | None = None, edge_latency_ms: float = 0.0) -> SessionTranscript:
    """Device loop over a connected socket.

    Wall time is measured; the edge's declared compute time is carved out of
    each round trip so t_comm keeps only pacing, NTT and socket overhead.
    """
    dev_round, dev_apply, _ = _device_fns(mode)
    dev = EndpointState.pair(mode, prefix, vocab, seed)[0]
    tr = SessionTranscript(mode.value, clock="wall")
    t0 = time.perf_counter()
    while len(tr.tokens) < n_tokens and (max_rounds is None or len(tr.rounds) < max_rounds):
        start = time.perf_counter()
        if opts.emulate_compute:
            time.sleep(gamma * Mq.latency_ms / 1e3)
        up = dev_round(dev, Mq, gamma)
        t_draft = (time.perf_counter() - start) * 1e3
        up_bits = payload_bits(up, vocab)
        sent = time.perf_counter()
        _pace(link, up_bits, UP, opts.pace)
        try:
            send_frame(sock, encode(up, vocab))
            frame = recv_frame(sock)
        except OSError as e:
            raise TransportError(f"round {dev.round}: {e}") from e
        if frame is None:
            raise TransportError(f"round {dev.round}: edge closed the connection")
        wire_ms = (time.perf_counter() - sent) * 1e3
        down = decode(frame, vocab)
        emitted = dev_apply(dev, down)
        tr.tokens.extend(emitted)
        t_comm = max(wire_ms - edge_latency_ms, 0.0)
        tr.rounds.append(_stats(gamma, down, up_bits, payload_bits(down, vocab), t_draft,
                                wire_ms - t_comm, t_comm, len(emitted)))
    tr.total_ms = (time.perf_counter() - t0) * 1e3
    return tr


def _socket_session(mode: Mode, Mq, Mp, gamma, link, vocab, prefix, n_tokens, seed,
                    opts: SocketOptions, max_rounds=None) -> SessionTranscript:
    server = socket.create_server((opts.host, opts.port))
    server.settimeout(opts.timeout_s)
    host, port = server.getsockname()[:2]
    errors: list[BaseException] = []

    def edge_main():
        try:
            conn, _ = server.accept()
            with conn:
                conn.settimeout(opts.timeout_s)
                serve_edge(conn, mode, Mp, vocab, prefix, seed, link, opts)
        except BaseException as e:  # surfaced by the driver after join
            errors.append(e)
        finally:
            server.close()

    worker = threading.Thread(target=edge_main, name="dssd-edge", daemon=True)
    worker.start()
    try:
        with socket.create_connection((host, port), timeout=opts.timeout_s) as sock:
            tr = run_device(sock, mode, Mq, gamma, vocab, prefix, n_tokens, seed, link, opts,
                            max_rounds, Mp.latency_ms if opts.emulate_compute else 0.0)
    finally:
        worker.join(opts.timeout_s)
    if errors:
        raise TransportError(f"edge endpoint failed: {errors[0]!r}") from errors[0]
    return tr


def run_session(mode, Mq, Mp, gamma: int, link: LinkConfig, vocab: VocabConfig,
                n_tokens: int, seed: int, prefix: Sequence[int] = (), transport: str = "sim",
                top_k: int | None = None, temperature: float = 1.0,
                max_rounds: int | None = None,
                socket_opts: SocketOptions | None = None) -> SessionTranscript:
    """Decode at least ``n_tokens`` tokens with DSD, DSSD or the LLM-only baseline.

    ``max_rounds`` stops early for statistics runs that count rounds, not tokens.
    """
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    mode = mode.value if isinstance(mode, Mode) else str(mode).lower()
    Mq, Mp = filtered(Mq, top_k, temperature), filtered(Mp, top_k, temperature)
    if mode == "llm":
        if transport == "sim":
            return _llm_session(Mp, prefix, n_tokens, seed)
        return _llm_session(Mp, prefix, n_tokens, seed, clock_kind="wall",
                            sleep=(socket_opts or SocketOptions()).emulate_compute)
    m = Mode(mode)
    if transport == "sim":
        return _sim_session(m, Mq, Mp, gamma, link, vocab, prefix, n_tokens, seed, max_rounds)
    if transport in ("socket", "tcp"):
        return _socket_session(m, Mq, Mp, gamma, link, vocab, prefix, n_tokens, seed,
                               socket_opts or SocketOptions(), max_rounds)
    raise ValueError(f"unknown transport {transport!r}")
