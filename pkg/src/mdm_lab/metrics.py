"""Scalar measurements: Shannon entropy, state/path entropy, the exact joint
uncertainty, evaluator NLL and diversity, the weighted-loss approximation, and
correlation statistics. All entropies and log-likelihoods use natural log."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NoiseSchedule, SeqState, TimeGrid, Vocab
from .denoiser import (
    DataModel,
    DenoiserBackend,
    PredictiveDistribution,
    oracle_joint_conditional,
)

_SUM_TOL = 1e-6


@dataclass(frozen=True)
class EntropyReport:
    h_de: float
    per_position: dict[int, float]
    mask_count: int


@dataclass(frozen=True)
class EvalScore:
    nll_per_token: float
    ln_ppl: float
    diversity: float
    zero_probability: bool = False


def shannon_entropy(p) -> float:
    """-sum p ln p in nats, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be nonnegative")
    if abs(p.sum() - 1.0) > _SUM_TOL:
        raise ValueError(f"probabilities must sum to 1 within {_SUM_TOL}, got {p.sum()}")
    live = p > 0
    return float(-(p[live] * np.log(p[live])).sum())


def state_entropy(dist: PredictiveDistribution) -> EntropyReport:
    """Mean per-position prediction entropy over the masked set."""
    if dist.n_positions == 0:
        raise ValueError("state entropy requires at least one masked position")
    ents = dist.entropies()
    per_position = {int(p): float(h) for p, h in zip(dist.positions, ents)}
    return EntropyReport(
        h_de=float(ents.mean()), per_position=per_position, mask_count=dist.n_positions
    )


def path_entropy(trace) -> float:
    trace = np.asarray(trace, dtype=np.float64)
    if len(trace) == 0:
        raise ValueError("path entropy needs a nonempty trace")
    return float(trace.mean())


def oracle_state_uncertainty(backend: DenoiserBackend, state: SeqState, cap: int = 10**6) -> float:
    """Shannon entropy of the exact joint over all masked completions."""
    joint = oracle_joint_conditional(backend, state, cap=cap)
    return shannon_entropy(joint.probs)


def diversity(seq) -> float:
    """Entropy of the token-frequency histogram; 0 for a constant sequence."""
    seq = np.asarray(seq)
    _, counts = np.unique(seq, return_counts=True)
    freqs = counts / counts.sum()
    return float(-(freqs * np.log(freqs)).sum())


def evaluate_nll(seq, data: DataModel) -> EvalScore:
    """Per-token NLL of a finished sequence under the ground-truth distribution.

    A zero-probability sequence yields +inf with the flag set instead of raising.
    """
    seq = np.asarray(seq, dtype=np.int64)
    if len(seq) == 0:
        raise ValueError("cannot evaluate an empty sequence")
    data.vocab.validate_tokens(seq, allow_mask=False)
    logp = data.log_prob(seq)
    if np.isneginf(logp):
        return EvalScore(float("inf"), float("inf"), diversity(seq), zero_probability=True)
    nll = -logp / len(seq)
    return EvalScore(nll, nll, diversity(seq))


def approximate_nelbo(path, schedule: NoiseSchedule, grid: TimeGrid, vocab: Vocab) -> float:
    """Riemann sum of weight(t) * |masked| * state entropy over the recorded path.

    The weight |d alpha/dt| / (1 - alpha) is taken by finite difference on the
    grid, so each term reduces to the per-step unmask probability. Steps where
    1 - alpha < 1e-9 are skipped.
    """
    total = 0.0
    trace_iter = iter(path.entropy_trace)
    for state in path.states:
        if not isinstance(state.time_index, (int, np.integer)):
            raise ValueError("approximate_nelbo requires grid-indexed states")
        i = int(state.time_index)
        if i < 1:
            continue
        m = state.mask_count(vocab.mask_id)
        if m == 0:
            continue
        h = next(trace_iter)
        a_cur = schedule.alpha(grid.times[i])
        a_prev = schedule.alpha(grid.times[i - 1])
        if 1.0 - a_cur < 1e-9:
            continue
        dt = grid.times[i] - grid.times[i - 1]
        w = abs(a_prev - a_cur) / dt / (1.0 - a_cur)
        total += w * m * h * dt
    return total


def pearson(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) != len(ys):
        raise ValueError("input lengths differ")
    if len(xs) < 3:
        raise ValueError("need at least 3 pairs")
    xd = xs - xs.mean()
    yd = ys - ys.mean()
    denom = np.sqrt((xd**2).sum() * (yd**2).sum())
    if denom == 0:
        raise ValueError("degenerate variance")
    return float((xd * yd).sum() / denom)
