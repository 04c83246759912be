import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dssd.core import VocabConfig
from dssd.kernel import reference_decode
from dssd.models import (CalibratedPairConfig, CalibrationInfeasible, ContextModel, TableModel,
                         calibrate_draft, calibrated_pair, filtered, mass_moves, measure_alpha,
                         overlap, table_model)

from conftest import wire_exact_pair


def _point(n, i):
    d = np.zeros(n)
    d[i] = 1.0
    return d


def test_table_model_constant():
    M = table_model({}, np.full(4, 0.25))
    for prefix in ([], [0], [3, 2, 1]):
        np.testing.assert_array_equal(M.next_dist(prefix), [0.25] * 4)


def test_table_model_lookup_and_chain():
    M = table_model({(0,): _point(4, 1), (1,): _point(4, 2)}, np.full(4, 0.25))
    assert reference_decode(M, M, [0], gamma=1, n_tokens=2, seed=0).tokens[:2] == [1, 2]


def test_table_model_referentially_transparent():
    M = table_model({(0,): _point(3, 1)}, np.full(3, 1 / 3))
    assert M.next_dist([5, 0]) is M.next_dist([0])


def test_table_model_text_round_trip():
    rng = np.random.default_rng(0)
    table = {(i, j): rng.dirichlet(np.ones(5)) for i in range(2) for j in range(2)}
    M = table_model(table, rng.dirichlet(np.ones(5)), latency_ms=2.5)
    back = TableModel.loads(M.dumps())
    assert back.order == 2 and back.latency_ms == 2.5
    np.testing.assert_array_equal(back.fallback, M.fallback)
    for k, v in table.items():
        np.testing.assert_array_equal(back.next_dist(list(k)), v)


def test_table_model_load_needs_fallback():
    with pytest.raises(ValueError):
        TableModel.loads("0 : 0.5 0.5\n")


def test_context_model_to_table_agrees():
    rng = np.random.default_rng(1)
    M = ContextModel(rng.dirichlet(np.ones(6), size=6))
    T = M.to_table()
    for t in range(6):
        np.testing.assert_array_equal(T.next_dist([t]), M.next_dist([t]))


def test_calibrate_draft_two_token_example():
    np.testing.assert_allclose(calibrate_draft(np.array([0.9, 0.1]), 0.7), [0.6, 0.4])


def test_calibrate_alpha_one_is_identity():
    P = np.array([0.5, 0.3, 0.2])
    np.testing.assert_array_equal(calibrate_draft(P, 1.0), P)


def test_calibration_infeasible_reports_achieved():
    # uniform P: every entry would have to donate
    with pytest.raises(CalibrationInfeasible) as e:
        mass_moves(np.full(4, 0.25), 0.1)
    assert e.value.achieved == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 40), st.floats(0.05, 1.0), st.integers(0, 2 ** 32))
def test_calibrate_hits_alpha(n, alpha, seed):
    P = np.random.default_rng(seed).dirichlet(np.full(n, 0.5))
    try:
        Q = calibrate_draft(P, alpha)
    except CalibrationInfeasible as e:
        assert e.achieved > alpha
        return
    assert np.all(Q >= 0)
    assert abs(Q.sum() - 1) < 1e-9
    assert abs(overlap(P, Q) - alpha) < 1e-9


@pytest.mark.parametrize("alpha", [0.3, 0.61, 0.9, 1.0])
def test_calibrated_pair_every_context(alpha):
    Mq, Mp = calibrated_pair(CalibratedPairConfig(alpha, VocabConfig(500), n_contexts=16,
                                                  seed=4))
    for c in range(16):
        P, Q = Mp.dists[c], Mq.dists[c]
        assert abs(P.sum() - 1) < 1e-9 and abs(Q.sum() - 1) < 1e-9
        assert abs(overlap(P, Q) - alpha) < 1e-9


def test_calibrated_pair_on_wire_grid():
    Mq, Mp = calibrated_pair(CalibratedPairConfig(0.61, VocabConfig(256), n_contexts=8,
                                                  support=10, grid_bits=11))
    for D in (Mq.dists, Mp.dists):
        assert np.all(D * 2 ** 11 == np.round(D * 2 ** 11))
        assert np.all((D > 0).sum(axis=1) <= 10)
        np.testing.assert_array_equal(D.astype(np.float16).astype(np.float64), D)
    # alpha lands on the 2^-11 grid nearest the target
    for c in range(8):
        assert abs(overlap(Mp.dists[c], Mq.dists[c]) - 0.61) <= 2 ** -12


def test_filtered_is_identity_when_support_fits():
    Mq, Mp = calibrated_pair(CalibratedPairConfig(0.5, VocabConfig(64), n_contexts=4,
                                                  support=5, grid_bits=11))
    F = filtered(Mp, 10)
    for t in range(4):
        np.testing.assert_array_equal(F.next_dist([t]), Mp.next_dist([t]))


def test_measure_alpha_identical_models():
    M = ContextModel(np.random.default_rng(0).dirichlet(np.ones(5), size=4))
    assert measure_alpha(M, M, [0], 4, 50, seed=0) == 1.0


def test_measure_alpha_disjoint_point_masses():
    assert measure_alpha(table_model({}, _point(3, 0)), table_model({}, _point(3, 1)),
                         [], 4, 50, seed=0) == 0.0


def test_measure_alpha_rejects_zero_rounds():
    M = table_model({}, np.full(2, 0.5))
    with pytest.raises(ValueError):
        measure_alpha(M, M, [], 2, 0, seed=0)


def test_measure_alpha_calibrated_half():
    Mq, Mp = wire_exact_pair(0.5, seed=8)
    assert abs(measure_alpha(Mq, Mp, [0], 4, 10_000, seed=8) - 0.5) < 0.02


def test_measure_alpha_calibrated_061_over_1e4_tokens():
    Mq, Mp = wire_exact_pair(0.61, seed=9)
    # 10^4 rounds of gamma=1 present exactly 10^4 draft tokens
    assert 0.59 <= measure_alpha(Mq, Mp, [0], 1, 10_000, seed=9) <= 0.63
