import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dssd.core import VocabConfig
from dssd.kernel import reference_decode
from dssd.models import table_model
from dssd.protocol import (HEADER, DesyncError, DownlinkDist, DownlinkToken, EndpointState,
                           MalformedFrame, Mode, QuantizationUnderflow, UplinkDsd, UplinkDssd,
                           decode, device_apply_dsd, device_apply_dssd, device_round_dsd,
                           device_round_dssd, dist_payload_bits, edge_round_dsd, edge_round_dssd,
                           encode, payload_bits, quantize)

from conftest import wire_exact_pair

V16 = VocabConfig(100, 16)
V32 = VocabConfig(100, 32)


def _point(n, i):
    d = np.zeros(n)
    d[i] = 1.0
    return d


def test_dsd_uplink_size_at_full_vocab():
    vocab = VocabConfig(50_000, 16)
    msg = UplinkDsd(0, list(range(8)), np.full((8, 50_000), 1 / 50_000))
    frame = encode(msg, vocab)
    assert dist_payload_bits(msg, vocab) == 8 * 800_000 * 8 // 8 == 6_400_000
    assert len(frame) == HEADER.size + 4 + 8 * 4 + 800_000
    assert payload_bits(msg, vocab) == 8 * (len(frame) - HEADER.size)


def test_dssd_uplink_sizes():
    vocab = VocabConfig(50_000, 16)
    q = np.full(8, 0.125)
    bare = UplinkDssd(3, list(range(8)), q)
    carry = UplinkDssd(3, list(range(8)), q, carry_token=9)
    # round (4) + 8 indices (32) + 8 half-precision probabilities (16)
    assert len(encode(bare, vocab)) - HEADER.size == 52
    assert len(encode(carry, vocab)) - HEADER.size == 56
    assert payload_bits(bare, vocab) == 52 * 8
    assert payload_bits(carry, vocab) == 56 * 8


def test_downlink_token_is_15_bytes():
    msg = DownlinkToken(1, 3, 42)
    assert len(encode(msg, V16)) == 15
    assert payload_bits(msg, V16) == 80


def test_payload_bits_examples():
    assert dist_payload_bits(UplinkDsd(0, [0] * 4, np.full((4, 100), 0.01)), V32) == 12_800
    assert dist_payload_bits(DownlinkDist(0, 1, np.full(100, 0.01)), V16) == 1_600


@pytest.mark.parametrize("vocab", [V16, V32])
def test_payload_bits_matches_encoding(vocab):
    rng = np.random.default_rng(0)
    msgs = [UplinkDsd(1, [1, 2], rng.dirichlet(np.ones(100), 2)),
            UplinkDssd(1, [1, 2, 3], np.array([0.1, 0.2, 0.3])),
            UplinkDssd(1, [1], np.array([0.5]), 7),
            DownlinkToken(1, 2, 3), DownlinkDist(1, 1, rng.dirichlet(np.ones(100)))]
    for m in msgs:
        assert payload_bits(m, vocab) == 8 * (len(encode(m, vocab)) - HEADER.size)


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1), st.lists(st.integers(0, 99), min_size=1, max_size=12),
       st.sampled_from([16, 32]), st.booleans(), st.data())
def test_dssd_uplink_round_trip(rnd, tokens, b, with_carry, data):
    vocab = VocabConfig(100, b)
    q = np.array(data.draw(st.lists(st.floats(1e-3, 1.0), min_size=len(tokens),
                                     max_size=len(tokens))))
    carry = data.draw(st.integers(0, 99)) if with_carry else None
    back = decode(encode(UplinkDssd(rnd, tokens, q, carry), vocab), vocab)
    assert isinstance(back, UplinkDssd)
    assert back.round == rnd and back.tokens == tokens and back.carry_token == carry
    eps = np.finfo(np.float16 if b == 16 else np.float32).eps
    np.testing.assert_allclose(back.q_vals, q, rtol=eps / 2, atol=0)


@settings(max_examples=50)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 2 ** 16 - 1), st.integers(0, 2 ** 32 - 1))
def test_downlink_token_round_trip(rnd, j, tok):
    back = decode(encode(DownlinkToken(rnd, j, tok), V16), V16)
    assert (back.round, back.j, back.token) == (rnd, j, tok)


def test_dist_messages_round_trip():
    rng = np.random.default_rng(3)
    D = rng.dirichlet(np.ones(100), 3)
    up = decode(encode(UplinkDsd(5, [1, 2, 3], D), V32), V32)
    assert up.tokens == [1, 2, 3]
    np.testing.assert_allclose(up.dists, D, rtol=2 ** -24)
    dn = decode(encode(DownlinkDist(5, 2, D[0]), V16), V16)
    assert dn.j == 2
    np.testing.assert_allclose(dn.p_dist, D[0], rtol=2 ** -11)


def test_malformed_frames():
    frame = encode(DownlinkToken(0, 1, 2), V16)
    with pytest.raises(MalformedFrame):
        decode(frame[:3], V16)
    with pytest.raises(MalformedFrame):
        decode(frame[:-1], V16)
    with pytest.raises(MalformedFrame):
        decode(bytes([9]) + frame[1:], V16)
    # a DSD uplink body whose length is not a whole number of (token, dist) records
    bad = HEADER.pack(1, 7) + bytes(7)
    with pytest.raises(MalformedFrame):
        decode(bad, V16)


def test_quantization_underflow():
    tiny = np.array([1e-10, 0.5])
    out = quantize(tiny, 16)
    assert out[0] == np.finfo(np.float16).smallest_subnormal and out[1] == 0.5
    with pytest.raises(QuantizationUnderflow):
        quantize(tiny, 16, strict=True)
    assert quantize(tiny, 32)[0] > 0


def _step(mode, dev, edge, Mq, Mp, gamma):
    if mode is Mode.DSD:
        down = edge_round_dsd(edge, Mp, device_round_dsd(dev, Mq, gamma))
        return down, device_apply_dsd(dev, down)
    down = edge_round_dssd(edge, Mp, device_round_dssd(dev, Mq, gamma))
    return down, device_apply_dssd(dev, down)


def test_dsd_all_accept_chain():
    n = 4
    M = table_model({(t,): _point(n, (t + 1) % n) for t in range(n)}, np.full(n, 1 / n))
    dev, edge = EndpointState.pair(Mode.DSD, [0], VocabConfig(n), 0)
    down, emitted = _step(Mode.DSD, dev, edge, M, M, 2)
    assert (down.j, down.token) == (3, 3)
    assert emitted == [1, 2, 3] and dev.prefix == edge.prefix == [0, 1, 2, 3]


def test_dsd_immediate_rejection():
    Mq = table_model({}, _point(3, 0))
    Mp = table_model({}, np.array([0.0, 0.5, 0.5]))
    dev, edge = EndpointState.pair(Mode.DSD, [], VocabConfig(3), 0)
    down, emitted = _step(Mode.DSD, dev, edge, Mq, Mp, 3)
    assert down.j == 1 and len(emitted) == 1 and emitted[0] in (1, 2)
    assert dev.prefix == edge.prefix


def test_dssd_branches_and_carry():
    Mq = table_model({}, _point(3, 0))
    Mp = table_model({}, np.array([0.0, 0.5, 0.5]))
    dev, edge = EndpointState.pair(Mode.DSSD, [], VocabConfig(3), 0)
    down, emitted = _step(Mode.DSSD, dev, edge, Mq, Mp, 2)
    assert isinstance(down, DownlinkDist) and down.j == 1
    np.testing.assert_array_equal(down.p_dist, Mp.fallback)
    assert dev.carry == emitted[0] and edge.prefix == []
    up = device_round_dssd(dev, Mq, 2)
    assert up.carry_token == emitted[0]
    edge_round_dssd(edge, Mp, up)
    assert edge.prefix[0] == emitted[0]


def test_dssd_all_accept_has_no_carry():
    n = 4
    M = table_model({(t,): _point(n, (t + 1) % n) for t in range(n)}, np.full(n, 1 / n))
    dev, edge = EndpointState.pair(Mode.DSSD, [0], VocabConfig(n), 0)
    down, emitted = _step(Mode.DSSD, dev, edge, M, M, 3)
    assert isinstance(down, DownlinkToken) and down.j == 4
    assert device_round_dssd(dev, M, 3).carry_token is None


def test_desync_errors():
    M = table_model({}, np.full(4, 0.25))
    dev, edge = EndpointState.pair(Mode.DSD, [], VocabConfig(4), 0)
    up = device_round_dsd(dev, M, 2)
    with pytest.raises(DesyncError):
        edge_round_dsd(edge, M, UplinkDsd(7, up.tokens, up.dists))
    with pytest.raises(DesyncError):
        edge_round_dsd(edge, M, UplinkDsd(0, [0, 99], up.dists))
    with pytest.raises(DesyncError):
        device_apply_dsd(dev, DownlinkToken(0, 9, 0))
    with pytest.raises(DesyncError):
        edge_round_dssd(edge, M, UplinkDssd(0, [0], np.array([0.25])))
    d2, e2 = EndpointState.pair(Mode.DSSD, [], VocabConfig(4), 0)
    with pytest.raises(DesyncError):
        # no rejection happened, so a carry token is unexpected
        edge_round_dssd(e2, M, UplinkDssd(0, [0], np.array([0.25]), carry_token=1))


def _run(mode, Mq, Mp, prefix, gamma, seed, rounds):
    dev, edge = EndpointState.pair(mode, prefix, VocabConfig(Mp.vocab_size), seed)
    out = []
    for _ in range(rounds):
        out += _step(mode, dev, edge, Mq, Mp, gamma)[1]
        if mode is Mode.DSD or dev.carry is None:
            assert dev.prefix == edge.prefix
        else:
            assert dev.prefix == edge.prefix + [dev.carry]
    return out


def test_dsd_matches_reference():
    Mq, Mp = wire_exact_pair(0.5, seed=7)
    ref = reference_decode(Mq, Mp, [0], 4, n_tokens=10 ** 9, seed=7, max_rounds=100)
    assert _run(Mode.DSD, Mq, Mp, [0], 4, 7, 100) == ref.tokens


def test_dssd_matches_dsd():
    Mq, Mp = wire_exact_pair(0.61, seed=11)
    assert _run(Mode.DSSD, Mq, Mp, [0], 8, 11, 200) == _run(Mode.DSD, Mq, Mp, [0], 8, 11, 200)


def test_dssd_uplink_dominates_dsd():
    for n in (2, 16, 1000):
        for b in (16, 32):
            vocab = VocabConfig(n, b)
            g = 8
            dsd = UplinkDsd(0, [0] * g, np.full((g, n), 1 / n))
            dssd = UplinkDssd(0, [0] * g, np.full(g, 1 / n))
            assert payload_bits(dssd, vocab) < payload_bits(dsd, vocab)
            assert dist_payload_bits(dsd, vocab) / (g * (32 + b)) >= n * b / (32 + b)
