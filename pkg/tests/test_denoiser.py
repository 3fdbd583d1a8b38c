import itertools

import numpy as np
import pytest

from mdm_lab import (
    CapacityError,
    DataModel,
    IIDOracle,
    MarkovOracle,
    PerturbedOracle,
    RngStream,
    SeqState,
    Vocab,
    epsilon_of,
    kl_divergence,
    oracle_joint_conditional,
    predict,
)

T_SYM = np.array([[0.9, 0.1], [0.1, 0.9]])
PI_STAT = np.array([0.5, 0.5])


def brute_force_conditional(data: DataModel, tokens, mask_id, position):
    """Enumerate every completion and marginalize: the independent oracle."""
    tokens = np.asarray(tokens)
    masked = np.flatnonzero(tokens == mask_id)
    k = data.vocab_size
    out = np.zeros(k)
    col = list(masked).index(position)
    for fill in itertools.product(range(k), repeat=len(masked)):
        seq = np.array(tokens)
        seq[masked] = fill
        out[fill[col]] += np.exp(data.log_prob(seq))
    return out / out.sum()


def test_iid_fully_masked_gets_marginal():
    data = DataModel.iid([0.7, 0.3])
    oracle = IIDOracle(data)
    state = SeqState([2, 2, 2], 1.0)
    dist = predict(oracle, state)
    assert np.allclose(dist.probs, [[0.7, 0.3]] * 3)


def test_markov_middle_mask_matches_spec_value():
    data = DataModel.markov(PI_STAT, T_SYM)
    oracle = MarkovOracle(data)
    state = SeqState([0, 2, 0], 0.5)
    dist = predict(oracle, state)
    assert dist.vector_at(1)[0] == pytest.approx(0.81 / 0.82, abs=1e-12)


def test_markov_predict_matches_brute_force_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(25):
        k = int(rng.integers(2, 4))
        length = int(rng.integers(2, 6))
        t = rng.random((k, k)) + 0.05
        t /= t.sum(axis=1, keepdims=True)
        pi = rng.random(k) + 0.05
        pi /= pi.sum()
        data = DataModel.markov(pi, t)
        oracle = MarkovOracle(data)
        tokens = rng.integers(0, k, size=length)
        n_mask = int(rng.integers(1, length + 1))
        masked = rng.choice(length, size=n_mask, replace=False)
        arr = np.array(tokens)
        arr[masked] = k
        state = SeqState(arr, 0.5)
        dist = predict(oracle, state)
        for pos in masked:
            expected = brute_force_conditional(data, arr, k, pos)
            assert np.allclose(dist.vector_at(pos), expected, atol=1e-9)


def test_predict_rejects_fully_unmasked():
    oracle = IIDOracle(DataModel.iid([0.5, 0.5]))
    with pytest.raises(ValueError):
        predict(oracle, SeqState([0, 1], 0.0))


def test_perturbed_full_mix_is_uniform():
    inner = IIDOracle(DataModel.iid([0.9, 0.05, 0.05]))
    fuzzed = PerturbedOracle(inner, 1.0)
    dist = fuzzed.predict(SeqState([3, 3], 1.0))
    assert np.allclose(dist.probs, 1.0 / 3.0)


def test_joint_conditional_iid_uniform():
    oracle = IIDOracle(DataModel.iid([0.5, 0.5]))
    joint = oracle_joint_conditional(oracle, SeqState([2, 2], 1.0))
    assert np.allclose(joint.probs, 0.25)
    assert joint.completions.shape == (4, 2)


def test_joint_conditional_markov_matches_chain_product():
    data = DataModel.markov(PI_STAT, T_SYM)
    oracle = MarkovOracle(data)
    state = SeqState([0, 2, 2], 0.5)
    joint = oracle_joint_conditional(oracle, state)
    # joint over (x2, x3) should be proportional to T[a, x2] * T[x2, x3]
    expected = np.array(
        [T_SYM[0, x2] * T_SYM[x2, x3] for x2, x3 in itertools.product(range(2), repeat=2)]
    )
    expected /= expected.sum()
    assert np.allclose(joint.probs, expected, atol=1e-12)


def test_joint_single_position_equals_predict():
    data = DataModel.markov(PI_STAT, T_SYM)
    oracle = MarkovOracle(data)
    state = SeqState([0, 2, 1, 0], 0.5)
    joint = oracle_joint_conditional(oracle, state)
    marg = joint.marginal_at(1, 2)
    assert np.allclose(marg, predict(oracle, state).vector_at(1), atol=1e-12)


def test_joint_conditional_capacity_cap():
    oracle = IIDOracle(DataModel.iid([0.25] * 4))
    state = SeqState([4] * 11, 1.0)
    with pytest.raises(CapacityError):
        oracle_joint_conditional(oracle, state, cap=10**6)


def test_marginal_consistency_randomized():
    # predict() must equal the joint's per-position marginal on random states.
    rng = np.random.default_rng(42)
    for _ in range(100):
        k = int(rng.integers(2, 4))
        length = int(rng.integers(2, 7))
        t = rng.random((k, k)) + 0.02
        t /= t.sum(axis=1, keepdims=True)
        pi = rng.random(k) + 0.02
        pi /= pi.sum()
        data = DataModel.markov(pi, t)
        oracle = MarkovOracle(data)
        tokens = rng.integers(0, k, size=length)
        n_mask = int(rng.integers(1, length + 1))
        if k**n_mask > 10**4:
            continue
        masked = rng.choice(length, size=n_mask, replace=False)
        arr = np.array(tokens)
        arr[masked] = k
        state = SeqState(arr, 0.5)
        dist = predict(oracle, state)
        joint = oracle_joint_conditional(oracle, state)
        for pos in masked:
            assert np.allclose(
                joint.marginal_at(pos, k), dist.vector_at(pos), atol=1e-9
            )


def test_epsilon_zero_when_unmixed():
    inner = MarkovOracle(DataModel.markov(PI_STAT, T_SYM))
    assert epsilon_of(PerturbedOracle(inner, 0.0), SeqState([0, 2, 0], 0.5)) == 0.0


def test_epsilon_uniform_truth_stays_zero():
    inner = IIDOracle(DataModel.iid([0.5, 0.5]))
    assert epsilon_of(PerturbedOracle(inner, 1.0), SeqState([2, 2], 1.0)) == pytest.approx(0.0)


def test_epsilon_matches_direct_kl():
    inner = IIDOracle(DataModel.iid([0.9, 0.1]))
    fuzzed = PerturbedOracle(inner, 0.5)
    got = epsilon_of(fuzzed, SeqState([2], 1.0))
    expected = 0.9 * np.log(0.9 / 0.7) + 0.1 * np.log(0.1 / 0.3)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.116322, abs=1e-6)


def test_epsilon_monotone_in_mix():
    inner = MarkovOracle(DataModel.markov(PI_STAT, T_SYM))
    state = SeqState([0, 2, 2, 1], 0.5)
    values = [epsilon_of(PerturbedOracle(inner, e), state) for e in np.linspace(0, 0.9, 10)]
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


def test_context_sensitivity_enumerated():
    # Revealing one more observed token cannot raise the expected prediction
    # entropy at any remaining masked position.
    rng = np.random.default_rng(3)
    k, length = 3, 5
    t = rng.random((k, k)) + 0.05
    t /= t.sum(axis=1, keepdims=True)
    pi = rng.random(k) + 0.05
    pi /= pi.sum()
    data = DataModel.markov(pi, t)
    oracle = MarkovOracle(data)

    def expected_entropy(observed_set, target):
        total = 0.0
        for seq in itertools.product(range(k), repeat=length):
            p = np.exp(data.log_prob(np.array(seq)))
            arr = np.full(length, k)
            for o in observed_set:
                arr[o] = seq[o]
            dist = predict(oracle, SeqState(arr, 0.5))
            row = dist.vector_at(target)
            live = row > 0
            total += p * float(-(row[live] * np.log(row[live])).sum())
        return total

    for less, extra, target in [(set(), 0, 2), ({0}, 4, 2), ({1}, 3, 2), ({0, 4}, 2, 3)]:
        more = less | {extra}
        assert expected_entropy(more, target) <= expected_entropy(less, target) + 1e-9


def test_kl_divergence_edge_cases():
    assert kl_divergence([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert kl_divergence([0.5, 0.5], [1.0, 0.0]) == float("inf")
    assert kl_divergence([0.9, 0.1], [0.7, 0.3]) == pytest.approx(0.1163223, abs=1e-6)


def test_datamodel_validation():
    with pytest.raises(ValueError):
        DataModel.iid([0.5, 0.6])
    with pytest.raises(ValueError):
        DataModel.markov([1.0, 0.0], [[0.5, 0.6], [0.5, 0.5]])
    with pytest.raises(ValueError):
        DataModel.iid([-0.1, 1.1])


def test_vector_at_unmasked_position_errors():
    oracle = IIDOracle(DataModel.iid([0.5, 0.5]))
    dist = predict(oracle, SeqState([0, 2], 0.5))
    with pytest.raises(KeyError):
        dist.vector_at(0)
