"""Denoiser backends: exact oracles over known data distributions and a
controlled uniform-mixture perturbation of them.

The oracles replace a learned network with closed-form posteriors, so every
prediction is exact given the observed tokens. Time is accepted but ignored:
under independent random masking the mask pattern is a sufficient statistic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, SeqState, Vocab

_SUM_TOL = 1e-9


class CapacityError(RuntimeError):
    """Raised when an exact enumeration would exceed the configured cap."""


def _check_distribution(vec: np.ndarray, what: str) -> None:
    if np.any(vec < 0):
        raise ValueError(f"{what} has negative entries")
    s = vec.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > _SUM_TOL):
        raise ValueError(f"{what} rows must sum to 1 within {_SUM_TOL}")


@dataclass(frozen=True)
class PredictiveDistribution:
    """Per-masked-position categorical predictions, rows aligned with `positions`."""

    positions: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or len(pos) != probs.shape[0]:
            raise ValueError("positions and probability rows must align")
        _check_distribution(probs, "predictive distribution")
        pos.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "probs", probs)

    @property
    def n_positions(self) -> int:
        return len(self.positions)

    @property
    def vocab_size(self) -> int:
        return self.probs.shape[1]

    def vector_at(self, position: int) -> np.ndarray:
        idx = np.flatnonzero(self.positions == position)
        if len(idx) == 0:
            raise KeyError(f"position {position} is not masked in this state")
        return self.probs[idx[0]]

    def entropies(self) -> np.ndarray:
        p = self.probs
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, -p * np.log(p), 0.0)
        return terms.sum(axis=1)

    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=1)

    def margins(self) -> np.ndarray:
        top2 = np.sort(self.probs, axis=1)[:, -2:]
        return top2[:, 1] - top2[:, 0]


@dataclass(frozen=True)
class DataModel:
    """Ground-truth distribution q(x_0): i.i.d. tokens or a first-order Markov chain."""

    kind: str
    marginal: np.ndarray | None = None
    pi: np.ndarray | None = None
    transition: np.ndarray | None = None

    @classmethod
    def iid(cls, marginal) -> "DataModel":
        marginal = np.asarray(marginal, dtype=np.float64)
        _check_distribution(marginal, "marginal")
        return cls(kind="iid", marginal=marginal)

    @classmethod
    def markov(cls, pi, transition) -> "DataModel":
        pi = np.asarray(pi, dtype=np.float64)
        transition = np.asarray(transition, dtype=np.float64)
        _check_distribution(pi, "initial distribution")
        if transition.ndim != 2 or transition.shape[0] != transition.shape[1]:
            raise ValueError("transition matrix must be square")
        if len(pi) != transition.shape[0]:
            raise ValueError("initial distribution and transition matrix disagree on K")
        _check_distribution(transition, "transition matrix")
        return cls(kind="markov", pi=pi, transition=transition)

    @property
    def vocab_size(self) -> int:
        if self.kind == "iid":
            return len(self.marginal)
        return len(self.pi)

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.vocab_size)

    def sample(self, length: int, rng: RngStream) -> np.ndarray:
        gen = rng.generator
        if self.kind == "iid":
            return gen.choice(self.vocab_size, size=length, p=self.marginal)
        seq = np.empty(length, dtype=np.int64)
        seq[0] = gen.choice(self.vocab_size, p=self.pi)
        for i in range(1, length):
            seq[i] = gen.choice(self.vocab_size, p=self.transition[seq[i - 1]])
        return seq

    def log_prob(self, seq: np.ndarray) -> float:
        seq = np.asarray(seq, dtype=np.int64)
        with np.errstate(divide="ignore"):
            if self.kind == "iid":
                return float(np.log(self.marginal[seq]).sum())
            lp = np.log(self.pi[seq[0]])
            if len(seq) > 1:
                lp += np.log(self.transition[seq[:-1], seq[1:]]).sum()
        return float(lp)

    def prior_marginals(self, length: int) -> np.ndarray:
        """Unconditional per-position token marginals, shape (length, K)."""
        if self.kind == "iid":
            return np.tile(self.marginal, (length, 1))
        out = np.empty((length, self.vocab_size))
        out[0] = self.pi
        for i in range(1, length):
            out[i] = out[i - 1] @ self.transition
        return out


@dataclass(frozen=True)
class JointConditional:
    """Exact joint over all completions of the masked set, from enumeration."""

    positions: np.ndarray
    completions: np.ndarray  # (n, |M_t|) token assignments
    probs: np.ndarray  # (n,)

    def __post_init__(self):
        if abs(self.probs.sum() - 1.0) > _SUM_TOL:
            raise ValueError("joint conditional must sum to 1")

    def marginal_at(self, position: int, vocab_size: int) -> np.ndarray:
        idx = np.flatnonzero(self.positions == position)
        if len(idx) == 0:
            raise KeyError(f"position {position} is not in the masked set")
        out = np.zeros(vocab_size)
        np.add.at(out, self.completions[:, idx[0]], self.probs)
        return out


class DenoiserBackend:
    """Interface: map a state with masked positions to exact per-position predictions."""

    vocab: Vocab

    def predict(self, state: SeqState) -> PredictiveDistribution:
        raise NotImplementedError


class IIDOracle(DenoiserBackend):
    def __init__(self, data: DataModel):
        if data.kind != "iid":
            raise ValueError("IIDOracle requires an iid data model")
        self.data = data
        self.vocab = data.vocab

    def predict(self, state: SeqState) -> PredictiveDistribution:
        positions = state.masked_positions(self.vocab.mask_id)
        if len(positions) == 0:
            raise ValueError("predict requires at least one masked position")
        probs = np.tile(self.data.marginal, (len(positions), 1))
        return PredictiveDistribution(positions, probs)


class MarkovOracle(DenoiserBackend):
    """Exact conditionals on a first-order chain via nearest-anchor message passing.

    Given the nearest observed neighbor on each side, a masked position is
    independent of all further evidence, so each conditional is
    left_message * right_message renormalized, in O(L * K^2) per state.
    """

    def __init__(self, data: DataModel):
        if data.kind != "markov":
            raise ValueError("MarkovOracle requires a markov data model")
        self.data = data
        self.vocab = data.vocab
        self._tpow = [np.eye(data.vocab_size), np.array(data.transition)]
        self._priors = None

    def _power(self, d: int) -> np.ndarray:
        while len(self._tpow) <= d:
            self._tpow.append(self._tpow[-1] @ self.data.transition)
        return self._tpow[d]

    def _prior(self, length: int) -> np.ndarray:
        if self._priors is None or self._priors.shape[0] < length:
            self._priors = self.data.prior_marginals(length)
        return self._priors

    def predict(self, state: SeqState) -> PredictiveDistribution:
        mask_id = self.vocab.mask_id
        tokens = state.tokens
        positions = state.masked_positions(mask_id)
        if len(positions) == 0:
            raise ValueError("predict requires at least one masked position")
        observed = np.flatnonzero(tokens != mask_id)
        priors = self._prior(len(tokens))
        probs = np.empty((len(positions), self.vocab.size))
        for row, pos in enumerate(positions):
            left = np.searchsorted(observed, pos) - 1
            if left >= 0:
                lpos = observed[left]
                msg = self._power(pos - lpos)[tokens[lpos]]
            else:
                msg = priors[pos]
            right = np.searchsorted(observed, pos)
            if right < len(observed):
                rpos = observed[right]
                msg = msg * self._power(rpos - pos)[:, tokens[rpos]]
            probs[row] = msg / msg.sum()
        return PredictiveDistribution(positions, probs)


class PerturbedOracle(DenoiserBackend):
    """Uniform-mixture corruption of an exact oracle: a one-knob accuracy control.

    Output is (1 - eps_mix) * inner + eps_mix * uniform, so the per-position KL
    to the truth is a smooth, monotone function of eps_mix.
    """

    def __init__(self, inner: DenoiserBackend, eps_mix: float):
        if not 0.0 <= eps_mix <= 1.0:
            raise ValueError(f"eps_mix must lie in [0, 1], got {eps_mix}")
        self.inner = inner
        self.eps_mix = eps_mix
        self.vocab = inner.vocab

    def predict(self, state: SeqState) -> PredictiveDistribution:
        base = self.inner.predict(state)
        uniform = 1.0 / self.vocab.size
        probs = (1.0 - self.eps_mix) * base.probs + self.eps_mix * uniform
        probs = probs / probs.sum(axis=1, keepdims=True)
        return PredictiveDistribution(base.positions, probs)


def predict(backend: DenoiserBackend, state: SeqState) -> PredictiveDistribution:
    return backend.predict(state)


def _enumerate_completions(n_masked: int, vocab_size: int) -> np.ndarray:
    idx = np.arange(vocab_size**n_masked)
    out = np.empty((len(idx), n_masked), dtype=np.int64)
    for j in range(n_masked - 1, -1, -1):
        out[:, j] = idx % vocab_size
        idx = idx // vocab_size
    return out


def oracle_joint_conditional(
    backend: DenoiserBackend, state: SeqState, cap: int = 10**6
) -> JointConditional:
    """Exact joint over the masked set by enumeration; iid factorizes, markov
    renormalizes the chain likelihood over all completions."""
    if isinstance(backend, PerturbedOracle):
        raise ValueError("joint conditional is defined for exact oracles only")
    data = backend.data
    mask_id = backend.vocab.mask_id
    positions = state.masked_positions(mask_id)
    m = len(positions)
    if m == 0:
        raise ValueError("joint conditional requires at least one masked position")
    k = backend.vocab.size
    if k**m > cap:
        raise CapacityError(f"enumeration of {k}^{m} completions exceeds cap {cap}")
    completions = _enumerate_completions(m, k)
    if data.kind == "iid":
        probs = data.marginal[completions].prod(axis=1)
    else:
        seqs = np.tile(state.tokens, (len(completions), 1))
        seqs[:, positions] = completions
        with np.errstate(divide="ignore"):
            logp = np.log(data.pi[seqs[:, 0]]) + np.log(
                data.transition[seqs[:, :-1], seqs[:, 1:]]
            ).sum(axis=1)
        probs = np.exp(logp - logp.max())
    probs = probs / probs.sum()
    return JointConditional(positions, completions, probs)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats with the 0 log 0 convention; +inf when q lacks support."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    live = p > 0
    if np.any(q[live] == 0):
        return float("inf")
    return float((p[live] * (np.log(p[live]) - np.log(q[live]))).sum())


def epsilon_of(backend: PerturbedOracle, state: SeqState) -> float:
    """Mean per-position KL(true posterior || perturbed prediction) at this state."""
    if not isinstance(backend, PerturbedOracle):
        raise ValueError("epsilon_of expects a PerturbedOracle")
    truth = backend.inner.predict(state)
    blurred = backend.predict(state)
    kls = [kl_divergence(truth.probs[i], blurred.probs[i]) for i in range(truth.n_positions)]
    return float(np.mean(kls))
