"""Wire messages and the device/edge state machines for DSD and DSSD.

Frame layout: ``type:u8 | body_len:u32 LE | body``.  Body fields follow
the declaration order of each message class; integers are little-endian,
token ids are u32, positions u16, probabilities IEEE binary16/binary32.
Neither ``gamma`` nor the vocabulary size travels on the wire: the
receiver derives gamma from ``body_len`` given the session's VocabConfig.
"""
from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import RoundRng, VocabConfig, sample
from .kernel import draft_tokens, residual, target_dists, verify_round

log = logging.getLogger(__name__)

HEADER = struct.Struct("<BI")
_ROUND = struct.Struct("<I")
_ROUND_J = struct.Struct("<IH")
_DOWN_TOKEN = struct.Struct("<IHI")
_PROB_DTYPE = {16: np.dtype("<f2"), 32: np.dtype("<f4")}


class MalformedFrame(ValueError):
    pass


class QuantizationUnderflow(ValueError):
    """A positive probability rounds to zero at the wire bit-width."""


class DesyncError(RuntimeError):
    pass


class MsgType(enum.IntEnum):
    UPLINK_DSD = 0x01
    UPLINK_DSSD = 0x02
    DOWNLINK_TOKEN = 0x03
    DOWNLINK_DIST = 0x04


@dataclass(eq=False)
class UplinkDsd:
    round: int
    tokens: list[int]
    dists: np.ndarray  # (gamma, |V|)

    type = MsgType.UPLINK_DSD


@dataclass(eq=False)
class UplinkDssd:
    round: int
    tokens: list[int]
    q_vals: np.ndarray  # (gamma,)
    carry_token: int | None = None

    type = MsgType.UPLINK_DSSD


@dataclass(eq=False)
class DownlinkToken:
    round: int
    j: int
    token: int

    type = MsgType.DOWNLINK_TOKEN


@dataclass(eq=False)
class DownlinkDist:
    round: int
    j: int
    p_dist: np.ndarray

    type = MsgType.DOWNLINK_DIST


def quantize(values, b_prob: int, strict: bool = False) -> np.ndarray:
    """Round to the wire format; positive values never collapse to zero."""
    dt = _PROB_DTYPE[b_prob]
    values = np.asarray(values, dtype=np.float64)
    out = values.astype(dt)
    under = (values > 0) & (out == 0)
    if under.any():
        if strict:
            raise QuantizationUnderflow(f"{int(under.sum())} positive value(s) underflow "
                                        f"binary{b_prob}")
        log.debug("clamping %d underflowing probabilities", int(under.sum()))
        out[under] = np.finfo(dt).smallest_subnormal
    return out


def _probs(values, b_prob, strict) -> bytes:
    return quantize(values, b_prob, strict).tobytes()


def encode_body(msg, b_prob: int, strict: bool = False) -> bytes:
    if isinstance(msg, UplinkDsd):
        return (_ROUND.pack(msg.round) + np.asarray(msg.tokens, "<u4").tobytes()
                + _probs(msg.dists, b_prob, strict))
    if isinstance(msg, UplinkDssd):
        body = (_ROUND.pack(msg.round) + np.asarray(msg.tokens, "<u4").tobytes()
                + _probs(msg.q_vals, b_prob, strict))
        if msg.carry_token is not None:
            body += struct.pack("<I", msg.carry_token)
        return body
    if isinstance(msg, DownlinkToken):
        return _DOWN_TOKEN.pack(msg.round, msg.j, msg.token)
    if isinstance(msg, DownlinkDist):
        return _ROUND_J.pack(msg.round, msg.j) + _probs(msg.p_dist, b_prob, strict)
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def encode(msg, vocab: VocabConfig, strict: bool = False) -> bytes:
    body = encode_body(msg, vocab.b_prob, strict)
    return HEADER.pack(msg.type, len(body)) + body


def _read_probs(body: bytes, offset: int, count: int, b_prob: int) -> np.ndarray:
    dt = _PROB_DTYPE[b_prob]
    arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
    return arr.astype(np.float64)


def decode_body(mtype: int, body: bytes, vocab: VocabConfig):
    n = len(body)
    pb = vocab.b_prob // 8
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise MalformedFrame(f"unknown message type 0x{mtype:02x}") from None
    if mtype is MsgType.DOWNLINK_TOKEN:
        if n != _DOWN_TOKEN.size:
            raise MalformedFrame(f"DownlinkToken body is {n} bytes, expected {_DOWN_TOKEN.size}")
        return DownlinkToken(*_DOWN_TOKEN.unpack(body))
    if mtype is MsgType.DOWNLINK_DIST:
        if n != _ROUND_J.size + vocab.size * pb:
            raise MalformedFrame(f"DownlinkDist body is {n} bytes for |V|={vocab.size}")
        rnd, j = _ROUND_J.unpack_from(body)
        return DownlinkDist(rnd, j, _read_probs(body, _ROUND_J.size, vocab.size, vocab.b_prob))
    if n < 4:
        raise MalformedFrame("uplink body shorter than its round field")
    (rnd,) = _ROUND.unpack_from(body)
    if mtype is MsgType.UPLINK_DSD:
        per = 4 + vocab.size * pb
        gamma, rem = divmod(n - 4, per)
        if rem or gamma < 1:
            raise MalformedFrame(f"UplinkDsd body of {n} bytes is not 4 + gamma*{per}")
        tokens = np.frombuffer(body, "<u4", count=gamma, offset=4).tolist()
        dists = _read_probs(body, 4 + 4 * gamma, gamma * vocab.size, vocab.b_prob)
        return UplinkDsd(rnd, tokens, dists.reshape(gamma, vocab.size))
    # UPLINK_DSSD: 4 + gamma*(4 + pb) [+ 4 carry]; the two cases differ mod (4 + pb)
    per = 4 + pb
    gamma, rem = divmod(n - 4, per)
    if rem not in (0, 4) or gamma < 1:
        raise MalformedFrame(f"UplinkDssd body of {n} bytes does not fit the layout")
    tokens = np.frombuffer(body, "<u4", count=gamma, offset=4).tolist()
    q_vals = _read_probs(body, 4 + 4 * gamma, gamma, vocab.b_prob)
    carry = struct.unpack_from("<I", body, n - 4)[0] if rem == 4 else None
    return UplinkDssd(rnd, tokens, q_vals, carry)


def decode(data: bytes, vocab: VocabConfig):
    if len(data) < HEADER.size:
        raise MalformedFrame("frame shorter than header")
    mtype, length = HEADER.unpack_from(data)
    if len(data) - HEADER.size != length:
        raise MalformedFrame(f"header says {length} body bytes, got {len(data) - HEADER.size}")
    return decode_body(mtype, data[HEADER.size:], vocab)


def payload_bits(msg, vocab: VocabConfig) -> int:
    """Exact body size in bits (header excluded), computed without encoding."""
    b = vocab.b_prob
    if isinstance(msg, UplinkDsd):
        g = len(msg.tokens)
        return 32 + 32 * g + g * vocab.size * b
    if isinstance(msg, UplinkDssd):
        g = len(msg.tokens)
        return 32 + g * (32 + b) + (32 if msg.carry_token is not None else 0)
    if isinstance(msg, DownlinkToken):
        return 8 * _DOWN_TOKEN.size
    if isinstance(msg, DownlinkDist):
        return 8 * _ROUND_J.size + vocab.size * b
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def dist_payload_bits(msg, vocab: VocabConfig) -> int:
    """The probability-vector part of a message, as accounted analytically."""
    if isinstance(msg, UplinkDsd):
        return len(msg.tokens) * vocab.dist_bits
    if isinstance(msg, DownlinkDist):
        return vocab.dist_bits
    return 0


class Endpoint(enum.Enum):
    DEVICE = "device"
    EDGE = "edge"


class Mode(enum.Enum):
    DSD = "dsd"
    DSSD = "dssd"


@dataclass
class EndpointState:
    role: Endpoint
    mode: Mode
    prefix: list[int]
    vocab: VocabConfig
    seed: int
    round: int = 0
    pending_tokens: list[int] = field(default_factory=list)
    pending_Q: list[np.ndarray] = field(default_factory=list)
    flag: bool = True  # last round accepted everything
    carry: int | None = None  # device: resampled token not yet shown to the edge
    last_outcome: object = None

    @classmethod
    def pair(cls, mode: Mode, prefix, vocab: VocabConfig, seed: int):
        """Fresh (device, edge) states sharing ``prefix``."""
        return (cls(Endpoint.DEVICE, mode, list(prefix), vocab, seed),
                cls(Endpoint.EDGE, mode, list(prefix), vocab, seed))


def _expect(state: EndpointState, role: Endpoint, mode: Mode):
    if state.role is not role or state.mode is not mode:
        raise DesyncError(f"{role.value}/{mode.value} operation on "
                          f"{state.role.value}/{state.mode.value} state")


def _check_round(state: EndpointState, rnd: int):
    if rnd != state.round:
        raise DesyncError(f"{state.role.value} at round {state.round} got message for round {rnd}")


def _check_tokens(state: EndpointState, tokens):
    for t in tokens:
        if not 0 <= t < state.vocab.size:
            raise DesyncError(f"token id {t} outside vocabulary of {state.vocab.size}")


def _draft(state: EndpointState, Mq, gamma: int):
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    tokens, Qs = draft_tokens(Mq, state.prefix, gamma, RoundRng(state.seed, state.round))
    state.pending_tokens, state.pending_Q = tokens, Qs
    return tokens, Qs


def device_round_dsd(state: EndpointState, Mq, gamma: int) -> UplinkDsd:
    _expect(state, Endpoint.DEVICE, Mode.DSD)
    tokens, Qs = _draft(state, Mq, gamma)
    return UplinkDsd(state.round, list(tokens), np.stack(Qs))


def edge_round_dsd(state: EndpointState, Mp, up: UplinkDsd) -> DownlinkToken:
    _expect(state, Endpoint.EDGE, Mode.DSD)
    _check_round(state, up.round)
    _check_tokens(state, up.tokens)
    Qs = list(up.dists)
    q_vals = [Q[x] for Q, x in zip(Qs, up.tokens)]
    Ps = target_dists(Mp, state.prefix, up.tokens)
    out = verify_round(up.tokens, q_vals, Ps, RoundRng(state.seed, state.round), Q_dists=Qs)
    state.prefix.extend(up.tokens[:out.accepted_count] + [out.result_token])
    state.flag = not out.rejected
    state.last_outcome = out
    state.round += 1
    return DownlinkToken(up.round, out.reject_position, out.result_token)


def device_apply_dsd(state: EndpointState, down: DownlinkToken) -> list[int]:
    """Extend the device prefix; returns the tokens emitted this round."""
    _expect(state, Endpoint.DEVICE, Mode.DSD)
    _check_round(state, down.round)
    _check_tokens(state, [down.token])
    gamma = len(state.pending_tokens)
    if not 1 <= down.j <= gamma + 1:
        raise DesyncError(f"position j={down.j} outside [1, {gamma + 1}]")
    emitted = state.pending_tokens[:down.j - 1] + [down.token]
    state.prefix.extend(emitted)
    state.flag = down.j == gamma + 1
    state.pending_tokens, state.pending_Q = [], []
    state.round += 1
    return emitted


def device_round_dssd(state: EndpointState, Mq, gamma: int) -> UplinkDssd:
    _expect(state, Endpoint.DEVICE, Mode.DSSD)
    tokens, Qs = _draft(state, Mq, gamma)
    q_vals = np.array([Q[x] for Q, x in zip(Qs, tokens)])
    up = UplinkDssd(state.round, list(tokens), q_vals, state.carry)
    state.carry = None
    return up


def edge_round_dssd(state: EndpointState, Mp, up: UplinkDssd):
    _expect(state, Endpoint.EDGE, Mode.DSSD)
    _check_round(state, up.round)
    if (up.carry_token is not None) == state.flag:
        raise DesyncError("carry token presence does not match the previous round's outcome")
    if up.carry_token is not None:
        _check_tokens(state, [up.carry_token])
        state.prefix.append(up.carry_token)
    _check_tokens(state, up.tokens)
    Ps = target_dists(Mp, state.prefix, up.tokens)
    out = verify_round(up.tokens, list(up.q_vals), Ps, RoundRng(state.seed, state.round))
    state.last_outcome = out
    state.round += 1
    if out.rejected:
        # the resampled token reaches this prefix via the next uplink's carry
        state.prefix.extend(up.tokens[:out.accepted_count])
        state.flag = False
        return DownlinkDist(up.round, out.reject_position, Ps[out.reject_position - 1])
    state.prefix.extend(up.tokens + [out.result_token])
    state.flag = True
    return DownlinkToken(up.round, out.reject_position, out.result_token)


def device_apply_dssd(state: EndpointState, down) -> list[int]:
    """Resample locally on rejection; returns the tokens emitted this round."""
    _expect(state, Endpoint.DEVICE, Mode.DSSD)
    _check_round(state, down.round)
    gamma = len(state.pending_tokens)
    if isinstance(down, DownlinkDist):
        if not 1 <= down.j <= gamma:
            raise DesyncError(f"rejection position j={down.j} outside [1, {gamma}]")
        rng = RoundRng(state.seed, state.round)
        token = sample(residual(down.p_dist, state.pending_Q[down.j - 1]), rng.resample())
        state.carry = token
        state.flag = False
    elif isinstance(down, DownlinkToken):
        if down.j != gamma + 1:
            raise DesyncError(f"token downlink with j={down.j} but gamma={gamma}")
        _check_tokens(state, [down.token])
        token = down.token
        state.flag = True
    else:
        raise DesyncError(f"unexpected downlink {type(down).__name__}")
    emitted = state.pending_tokens[:down.j - 1] + [token]
    state.prefix.extend(emitted)
    state.pending_tokens, state.pending_Q = [], []
    state.round += 1
    return emitted
