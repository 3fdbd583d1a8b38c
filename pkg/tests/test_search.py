import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdm_lab import (
    DataModel,
    IIDOracle,
    MarkovOracle,
    RngStream,
    SearchConfig,
    SeqState,
    StrategyConfig,
    e_bon,
    e_smc,
    evaluate_nll,
    find_lambda_star,
    greedy_search,
    majority_vote,
    make_time_grid,
    potential,
    potential_weights,
    resample_expected_entropy,
    reward,
    run_path,
)
from mdm_lab.reverse import PathRecord

T3 = np.array([[0.7, 0.2, 0.1], [0.1, 0.7, 0.2], [0.2, 0.1, 0.7]])
PI3 = np.array([1 / 3, 1 / 3, 1 / 3])


def oracle3():
    return MarkovOracle(DataModel.markov(PI3, T3))


def record_with(h, idx=0, seq=(0,)):
    return PathRecord(
        states=[],
        entropy_trace=[h],
        final_sequence=np.array(seq),
        path_entropy=h,
        seed=0,
        stream_id=idx,
        strategy_id="test",
    )


def test_reward_endpoints_and_midpoint():
    k = 8
    assert reward(0.0, k) == 1.0
    assert reward(math.log(k), k) == pytest.approx(0.0, abs=1e-12)
    assert reward(math.log(k) / 2, k) == pytest.approx(0.5, abs=1e-12)
    assert reward(math.log(k) + 1.0, k) == 0.0  # clamped
    with pytest.raises(ValueError):
        reward(0.5, 1)


def test_potential_weights_examples():
    # equal rewards -> uniform weights
    w = potential_weights([0.4, 0.4, 0.4], 2.0, 4)
    assert np.allclose(w, 1 / 3)
    # rewards [1, 0] with lambda = ln 3 -> weights [0.75, 0.25]
    k = 4
    h = [0.0, math.log(k)]
    w = potential_weights(h, math.log(3), k)
    assert np.allclose(w, [0.75, 0.25], atol=1e-12)


def test_potential_positive_and_loglinear():
    assert potential(0.3, 5.0, 8) > 0
    big = potential_weights([0.0, math.log(8)], 800.0, 8)  # log-space keeps this finite
    assert np.isfinite(big).all() and big[0] > 0.999


def test_weights_near_uniform_as_lambda_vanishes():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = rng.random(5) * math.log(8)
        w = potential_weights(h, 1e-12, 8)
        assert np.allclose(w, 0.2, atol=1e-9)


def test_e_bon_selects_minimum():
    cands = [record_with(0.9), record_with(0.3), record_with(0.5)]
    assert e_bon(cands) is cands[1]
    solo = record_with(0.7)
    assert e_bon([solo]) is solo
    with pytest.raises(ValueError):
        e_bon([])


def test_e_bon_tie_breaks_low_index():
    cands = [record_with(0.5), record_with(0.5)]
    assert e_bon(cands) is cands[0]


def test_e_bon_dominance_invariant():
    oracle = oracle3()
    grid = make_time_grid(8)
    strat = StrategyConfig.uniform(token_choice="sample")
    base = RngStream(21)
    cands = [
        run_path(SeqState([3] * 12, 8), oracle, strat, grid, base.substream())
        for _ in range(8)
    ]
    chosen = e_bon(cands)
    assert all(chosen.path_entropy <= c.path_entropy for c in cands)


def test_e_bon_lowers_mean_nll():
    # Selecting the lowest-entropy path out of 8 should beat the vanilla mean
    # NLL over repetitions: the desk-scale reranking effect.
    oracle = oracle3()
    data = oracle.data
    grid = make_time_grid(12)
    strat = StrategyConfig.uniform(token_choice="sample")
    vanilla, selected = [], []
    for r in range(200):
        base = RngStream(500 + r)
        cands = [
            run_path(SeqState([3] * 12, 12), oracle, strat, grid, base.substream())
            for _ in range(8)
        ]
        vanilla.append(evaluate_nll(cands[0].final_sequence, data).nll_per_token)
        selected.append(evaluate_nll(e_bon(cands).final_sequence, data).nll_per_token)
    assert np.mean(selected) < np.mean(vanilla)


def test_resample_expected_entropy_limits():
    h = [1.0, 2.0, 3.0]
    assert resample_expected_entropy(h, 0.0) == pytest.approx(2.0)
    assert resample_expected_entropy(h, 200.0) == pytest.approx(1.0, abs=1e-9)


def test_resample_expected_entropy_strictly_decreasing():
    h = [1.0, 2.0]
    grid = np.linspace(0.0, 20.0, 41)
    vals = [resample_expected_entropy(h, lam) for lam in grid]
    assert all(b < a for a, b in zip(vals, vals[1:]))


@given(
    st.lists(st.floats(min_value=0.0, max_value=3.0), min_size=2, max_size=10),
    st.floats(min_value=0.0, max_value=10.0),
    st.floats(min_value=0.01, max_value=5.0),
)
@settings(max_examples=200, deadline=None)
def test_resample_entropy_monotone_property(h, lam, dlam):
    vals = np.asarray(h)
    lo = resample_expected_entropy(vals, lam)
    hi = resample_expected_entropy(vals, lam + dlam)
    if np.ptp(vals) > 1e-9:
        assert hi < lo + 1e-12
    else:
        assert hi == pytest.approx(lo, abs=1e-9)


def test_find_lambda_star_bisection():
    rng = np.random.default_rng(7)
    for _ in range(100):
        h = rng.random(6) * 2.0 + 0.1
        if np.ptp(h) < 1e-6:
            continue
        lo, mean = h.min(), h.mean()
        target = lo + (mean - lo) * rng.uniform(0.1, 0.9)
        lam = find_lambda_star(h, target, tol=1e-8)
        assert abs(resample_expected_entropy(h, lam) - target) < 1e-6


def test_majority_vote_mode_and_ties():
    a = record_with(0.1, seq=(1, 1))
    a2 = record_with(0.2, seq=(1, 1))
    b = record_with(0.0, seq=(2, 2))
    assert majority_vote([a, b, a2]) is a
    distinct = [record_with(0.1, seq=(1,)), record_with(0.2, seq=(2,))]
    assert majority_vote(distinct) is distinct[0]
    with pytest.raises(ValueError):
        majority_vote([])


def test_e_smc_single_particle_matches_vanilla_run():
    oracle = oracle3()
    grid = make_time_grid(8)
    strat = StrategyConfig.uniform(token_choice="sample")
    cfg = SearchConfig(n_particles=1, lambda_weight=5.0, resample_interval=2)
    base = RngStream(99)
    _, selected = e_smc(12, oracle, strat, grid, cfg, base)
    vanilla = run_path(SeqState([3] * 12, 8), oracle, strat, grid, RngStream(99).substream())
    assert np.array_equal(selected.final_sequence, vanilla.final_sequence)
    assert selected.entropy_trace == vanilla.entropy_trace


def test_e_smc_skips_resample_at_final_step():
    # a trigger landing on i=1 is guarded out, so the particles evolve exactly
    # like independent best-of-N candidates
    oracle = oracle3()
    n = 4
    grid = make_time_grid(n)
    strat = StrategyConfig.uniform(token_choice="sample")
    cfg = SearchConfig(n_particles=3, lambda_weight=5.0, resample_interval=n)
    base = RngStream(55)
    pset, _ = e_smc(8, oracle, strat, grid, cfg, base)
    fresh = RngStream(55)
    independent = [
        run_path(SeqState([3] * 8, n), oracle, strat, grid, fresh.substream())
        for _ in range(3)
    ]
    for particle, ref in zip(pset.particles, independent):
        assert np.array_equal(particle.state.tokens, ref.final_sequence)


def test_e_smc_population_and_weights_valid():
    oracle = oracle3()
    grid = make_time_grid(16)
    strat = StrategyConfig.uniform(token_choice="sample")
    cfg = SearchConfig(n_particles=5, lambda_weight=5.0, resample_interval=4)
    pset, selected = e_smc(16, oracle, strat, grid, cfg, RngStream(1))
    assert pset.size == 5
    assert abs(pset.weights.sum() - 1.0) < 1e-9
    assert np.all(pset.potentials > 0)
    for p in pset.particles:
        assert p.state.mask_count(oracle.vocab.mask_id) == 0
    assert selected.path_entropy == min(np.mean(p.trace) for p in pset.particles)


def test_e_smc_lambda_zero_limit_matches_independent_particles():
    # With lambda -> 0 resampling is uniform, so population mean path entropy
    # matches M independent vanilla paths within Monte-Carlo error.
    oracle = oracle3()
    grid = make_time_grid(8)
    strat = StrategyConfig.uniform(token_choice="sample")
    cfg = SearchConfig(n_particles=4, lambda_weight=1e-9, resample_interval=2)
    smc_means, indep_means = [], []
    for r in range(300):
        pset, _ = e_smc(8, oracle, strat, grid, cfg, RngStream(3000 + r))
        smc_means.extend(float(np.mean(p.trace)) for p in pset.particles)
        base = RngStream(9000 + r)
        for _ in range(4):
            path = run_path(SeqState([3] * 8, 8), oracle, strat, grid, base.substream())
            indep_means.append(path.path_entropy)
    smc = np.array(smc_means)
    ind = np.array(indep_means)
    pooled_sigma = math.sqrt(smc.var() / len(smc) + ind.var() / len(ind))
    assert abs(smc.mean() - ind.mean()) < 3 * pooled_sigma


def test_greedy_degenerate_matches_run_path():
    oracle = oracle3()
    grid = make_time_grid(8)
    strat = StrategyConfig.uniform(token_choice="sample")
    got = greedy_search(12, oracle, strat, grid, 1, 1, RngStream(42))
    ref = run_path(SeqState([3] * 12, 8), oracle, strat, grid, RngStream(42))
    assert np.array_equal(got.final_sequence, ref.final_sequence)
    assert got.entropy_trace == ref.entropy_trace


def test_greedy_beats_vanilla_mean_entropy():
    oracle = oracle3()
    grid = make_time_grid(8)
    strat = StrategyConfig.uniform(token_choice="sample")
    greedy_h, vanilla_h = [], []
    for r in range(200):
        greedy_h.append(greedy_search(8, oracle, strat, grid, 2, 1, RngStream(40_000 + r)).path_entropy)
        vanilla_h.append(
            run_path(SeqState([3] * 8, 8), oracle, strat, grid, RngStream(50_000 + r)).path_entropy
        )
    assert np.mean(greedy_h) < np.mean(vanilla_h)


def test_greedy_candidate_count_trend():
    # Widening the per-step expansion monotonically lowers both mean NLL and
    # mean diversity: the over-optimization trade-off.
    oracle = oracle3()
    data = oracle.data
    grid = make_time_grid(16)
    strat = StrategyConfig.uniform(token_choice="sample")
    mean_nll, mean_div = [], []
    for c in (2, 4, 8):
        nlls, divs = [], []
        for r in range(100):
            path = greedy_search(16, oracle, strat, grid, c, 1, RngStream(70_000 + r))
            score = evaluate_nll(path.final_sequence, data)
            nlls.append(score.nll_per_token)
            divs.append(score.diversity)
        mean_nll.append(np.mean(nlls))
        mean_div.append(np.mean(divs))
    assert mean_nll[0] > mean_nll[1] > mean_nll[2]
    assert mean_div[0] > mean_div[1] > mean_div[2]


def test_majority_vote_deterministic_data_all_agree():
    det = IIDOracle(DataModel.iid([1.0, 0.0]))
    grid = make_time_grid(4)
    strat = StrategyConfig.uniform()
    cands = [
        run_path(SeqState([2] * 6, 4), det, strat, grid, RngStream(5, r)) for r in range(5)
    ]
    winner = majority_vote(cands)
    assert np.all(winner.final_sequence == 0)


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(n_particles=0)
    with pytest.raises(ValueError):
        SearchConfig(lambda_weight=0.0)
    with pytest.raises(ValueError):
        SearchConfig(resample_interval=0)
