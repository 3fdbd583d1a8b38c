import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdm_lab import (
    DataModel,
    IIDOracle,
    MarkovOracle,
    NoiseSchedule,
    RngStream,
    SeqState,
    StrategyConfig,
    Vocab,
    approximate_nelbo,
    evaluate_nll,
    make_time_grid,
    oracle_state_uncertainty,
    path_entropy,
    pearson,
    predict,
    run_path,
    shannon_entropy,
    state_entropy,
)

T_SYM = np.array([[0.9, 0.1], [0.1, 0.9]])


def test_shannon_entropy_values():
    assert shannon_entropy([1.0, 0.0, 0.0]) == 0.0
    assert shannon_entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-12)
    assert shannon_entropy([0.9, 0.1]) == pytest.approx(0.325083, abs=1e-6)


def test_shannon_entropy_rejects_bad_input():
    with pytest.raises(ValueError):
        shannon_entropy([0.5, 0.6])
    with pytest.raises(ValueError):
        shannon_entropy([-0.1, 1.1])


@given(st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=2, max_size=12))
@settings(max_examples=200, deadline=None)
def test_entropy_bounds_property(weights):
    p = np.array(weights) / np.sum(weights)
    h = shannon_entropy(p)
    assert -1e-12 <= h <= math.log(len(p)) + 1e-9


def test_state_entropy_mean_and_singletons():
    oracle = IIDOracle(DataModel.iid([0.7, 0.3]))
    report = state_entropy(predict(oracle, SeqState([2, 2], 1.0)))
    marginal_h = shannon_entropy([0.7, 0.3])
    assert report.h_de == pytest.approx(marginal_h, abs=1e-12)
    assert report.mask_count == 2
    assert report.h_de == pytest.approx(np.mean(list(report.per_position.values())), abs=1e-12)

    single = state_entropy(predict(oracle, SeqState([0, 2], 0.5)))
    assert single.h_de == pytest.approx(marginal_h, abs=1e-12)


def test_path_entropy_examples():
    assert path_entropy([2.0, 1.0, 0.5, 0.1]) == pytest.approx(0.9)
    assert path_entropy([0.3] * 7) == pytest.approx(0.3)
    assert path_entropy([1.25]) == 1.25
    with pytest.raises(ValueError):
        path_entropy([])


def test_oracle_uncertainty_iid_is_additive():
    oracle = IIDOracle(DataModel.iid([0.7, 0.3]))
    state = SeqState([2, 2, 2], 1.0)
    h_joint = oracle_state_uncertainty(oracle, state)
    report = state_entropy(predict(oracle, state))
    assert h_joint == pytest.approx(3 * report.h_de, abs=1e-9)


def test_oracle_uncertainty_markov_strictly_subadditive():
    oracle = MarkovOracle(DataModel.markov([0.5, 0.5], T_SYM))
    state = SeqState([0, 2, 2], 0.5)
    h_joint = oracle_state_uncertainty(oracle, state)
    report = state_entropy(predict(oracle, state))
    assert h_joint < 2 * report.h_de - 1e-6


def test_evaluate_nll_iid_uniform():
    data = DataModel.iid([0.25] * 4)
    score = evaluate_nll([0, 1, 2, 3, 1], data)
    assert score.ln_ppl == pytest.approx(math.log(4), abs=1e-12)
    assert score.nll_per_token == score.ln_ppl


def test_evaluate_nll_markov_value():
    data = DataModel.markov([0.5, 0.5], T_SYM)
    score = evaluate_nll([0, 0, 0], data)
    assert score.nll_per_token == pytest.approx(-math.log(0.5 * 0.9 * 0.9) / 3, abs=1e-9)
    assert score.nll_per_token == pytest.approx(0.30129, abs=1e-4)


def test_diversity_values():
    data = DataModel.iid([0.25] * 4)
    assert evaluate_nll([0, 0, 1, 1], data).diversity == pytest.approx(math.log(2), abs=1e-12)
    assert evaluate_nll([0, 0, 0, 0], data).diversity == 0.0


def test_diversity_upper_bound():
    data = DataModel.iid([0.25] * 4)
    rng = np.random.default_rng(0)
    for _ in range(50):
        length = int(rng.integers(1, 9))
        seq = rng.integers(0, 4, size=length)
        d = evaluate_nll(seq, data).diversity
        assert d <= math.log(min(4, length)) + 1e-12


def test_zero_probability_sequence_flagged():
    data = DataModel.markov([1.0, 0.0], [[0.0, 1.0], [1.0, 0.0]])
    score = evaluate_nll([0, 0], data)  # transition 0 -> 0 impossible
    assert score.zero_probability
    assert math.isinf(score.nll_per_token)


def test_nelbo_zero_for_deterministic_data():
    data = DataModel.iid([1.0, 0.0])
    oracle = IIDOracle(data)
    grid = make_time_grid(4)
    sched = NoiseSchedule("linear")
    vocab = Vocab(2)
    init = SeqState([2] * 8, 4)
    path = run_path(init, oracle, StrategyConfig.uniform(token_choice="sample"), grid, RngStream(0))
    assert approximate_nelbo(path, sched, grid, vocab) == pytest.approx(0.0, abs=1e-12)


def test_nelbo_single_step_equals_one_term():
    data = DataModel.iid([0.6, 0.4])
    oracle = IIDOracle(data)
    grid = make_time_grid(1)
    sched = NoiseSchedule("linear")
    vocab = Vocab(2)
    init = SeqState([2] * 5, 1)
    path = run_path(init, oracle, StrategyConfig.uniform(token_choice="sample"), grid, RngStream(1))
    h = path.entropy_trace[0]
    # w(t_1) * L * h * dt with dt = 1, w = (da/dt)/(1-a) = 1/1
    assert approximate_nelbo(path, sched, grid, vocab) == pytest.approx(5 * h, abs=1e-12)


def test_nelbo_close_to_length_times_path_entropy():
    # Linear schedule: w(t) * |M_t| is about L in expectation, so the weighted
    # sum tracks L * H_DE for the iid oracle within 10% over 100 paths.
    data = DataModel.iid([0.4, 0.3, 0.2, 0.1])
    oracle = IIDOracle(data)
    grid = make_time_grid(16)
    sched = NoiseSchedule("linear")
    vocab = Vocab(4)
    length = 16
    strategy = StrategyConfig.uniform(token_choice="sample", tokens_per_step="stochastic_kernel")
    nelbos, targets = [], []
    for r in range(100):
        init = SeqState([vocab.mask_id] * length, 16)
        path = run_path(init, oracle, strategy, grid, RngStream(2, r), schedule=sched)
        nelbos.append(approximate_nelbo(path, sched, grid, vocab))
        targets.append(length * path.path_entropy)
    assert np.mean(nelbos) == pytest.approx(np.mean(targets), rel=0.10)


def test_pearson_exact_lines():
    xs = np.arange(10.0)
    assert pearson(xs, 2 * xs + 1) == pytest.approx(1.0)
    assert pearson(xs, -xs) == pytest.approx(-1.0)


def test_pearson_independent_near_zero():
    rng = np.random.default_rng(123)
    xs = rng.random(10_000)
    ys = rng.random(10_000)
    assert abs(pearson(xs, ys)) < 0.05


def test_pearson_rejects_degenerate():
    with pytest.raises(ValueError):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        pearson([1.0, 2.0], [1.0, 2.0])
