"""Path-search algorithms: best-of-N reranking by path entropy, entropy-guided
sequential Monte Carlo with periodic resampling, a greedy beam baseline, and
majority vote."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import NoiseSchedule, RngStream, SeqState, TimeGrid
from .denoiser import DenoiserBackend
from .reverse import PathRecord, StrategyConfig, step


@dataclass(frozen=True)
class SearchConfig:
    n_particles: int = 4
    lambda_weight: float = 5.0
    resample_interval: int = 8
    systematic: bool = False  # multinomial resampling by default

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if self.lambda_weight <= 0:
            raise ValueError("lambda must be positive")
        if self.resample_interval < 1:
            raise ValueError("resampling interval must be positive")


@dataclass
class _Particle:
    state: SeqState
    states: list[SeqState]
    trace: list[float]
    rng: RngStream


@dataclass
class ParticleSet:
    """Live population with the most recent potentials and normalized weights."""

    particles: list[_Particle]
    potentials: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("particle weights must sum to 1")

    @property
    def size(self) -> int:
        return len(self.particles)


def reward(h_de: float, vocab_size: int) -> float:
    """Normalized negative entropy: 1 at zero entropy, 0 at the ln K ceiling."""
    if vocab_size < 2:
        raise ValueError("vocabulary must have at least 2 tokens")
    r = 1.0 - h_de / math.log(vocab_size)
    return min(1.0, max(0.0, r))


def potential(h_de: float, lambda_weight: float, vocab_size: int) -> float:
    """Gibbs potential exp(lambda * reward); weights are its normalization."""
    if lambda_weight <= 0:
        raise ValueError("lambda must be positive")
    return math.exp(lambda_weight * reward(h_de, vocab_size))


def _log_weights_to_probs(log_w: np.ndarray) -> np.ndarray:
    z = log_w - log_w.max()
    w = np.exp(z)
    return w / w.sum()


def potential_weights(h_values, lambda_weight: float, vocab_size: int) -> np.ndarray:
    """Resampling probabilities for a population, computed in log space."""
    log_g = np.array([lambda_weight * reward(float(h), vocab_size) for h in h_values])
    return _log_weights_to_probs(log_g)


def resample_expected_entropy(h_values, lambda_weight: float) -> float:
    """Softmax(-lambda * H)-weighted mean entropy of a particle population."""
    h = np.asarray(h_values, dtype=np.float64)
    if len(h) == 0:
        raise ValueError("need at least one entropy value")
    if lambda_weight < 0:
        raise ValueError("lambda must be nonnegative")
    w = _log_weights_to_probs(-lambda_weight * h)
    return float((w * h).sum())


def find_lambda_star(h_values, target: float, tol: float = 1e-6, max_iter: int = 200) -> float:
    """Bisection for the temperature at which the resampled mean entropy hits
    `target`; requires min(h) < target < mean(h)."""
    h = np.asarray(h_values, dtype=np.float64)
    lo, hi = 0.0, 1.0
    if not h.min() < target < h.mean():
        raise ValueError("target must lie strictly between min and mean of h_values")
    while resample_expected_entropy(h, hi) > target:
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError("failed to bracket the target temperature")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        val = resample_expected_entropy(h, mid)
        if abs(val - target) < tol:
            return mid
        if val > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def e_bon(candidates: list[PathRecord]) -> PathRecord:
    """Minimum-path-entropy candidate; ties go to the lowest index."""
    if not candidates:
        raise ValueError("need at least one candidate")
    best = 0
    for i, cand in enumerate(candidates):
        if cand.path_entropy < candidates[best].path_entropy:
            best = i
    return candidates[best]


def _current_h(backend: DenoiserBackend, state: SeqState) -> float:
    """State entropy, with the convention that a finished state carries zero."""
    if state.mask_count(backend.vocab.mask_id) == 0:
        return 0.0
    return float(backend.predict(state).entropies().mean())


def _resample_indices(weights: np.ndarray, rng: RngStream, systematic: bool) -> np.ndarray:
    m = len(weights)
    gen = rng.generator
    if not systematic:
        return gen.choice(m, size=m, replace=True, p=weights)
    positions = (np.arange(m) + gen.random()) / m
    return np.searchsorted(np.cumsum(weights), positions)


def e_smc(
    length: int,
    backend: DenoiserBackend,
    strategy: StrategyConfig,
    grid: TimeGrid,
    cfg: SearchConfig,
    rng: RngStream,
    schedule: NoiseSchedule | None = None,
) -> tuple[ParticleSet, PathRecord]:
    """Propagate M particles through the reverse process, periodically pruning
    high-entropy ones by potential-weighted resampling, then return the
    surviving particle with minimum path entropy.

    Particle rng streams stay bound to their slot; states and entropy traces
    follow the resampled lineages.
    """
    mask_id = backend.vocab.mask_id
    n = grid.n_steps
    particle_rngs = rng.spawn(cfg.n_particles)
    resample_rng = rng.substream()

    particles = []
    for pr in particle_rngs:
        init = SeqState(np.full(length, mask_id, dtype=np.int64), n)
        particles.append(_Particle(state=init, states=[init], trace=[], rng=pr))

    m = cfg.n_particles
    potentials = np.ones(m)
    weights = np.full(m, 1.0 / m)

    for i in range(n, 0, -1):
        for p in particles:
            if p.state.mask_count(mask_id) == 0:
                continue
            dist = backend.predict(p.state)
            p.trace.append(float(dist.entropies().mean()))
            p.state = step(p.state, backend, strategy, grid, i, p.rng, dist=dist, schedule=schedule)
            p.states.append(p.state)
        if (n - i + 1) % cfg.resample_interval == 0 and i > 1:
            h_now = np.array([_current_h(backend, p.state) for p in particles])
            potentials = np.array(
                [potential(h, cfg.lambda_weight, backend.vocab.size) for h in h_now]
            )
            weights = potential_weights(h_now, cfg.lambda_weight, backend.vocab.size)
            ancestors = _resample_indices(weights, resample_rng, cfg.systematic)
            particles = [
                _Particle(
                    state=particles[a].state,
                    states=list(particles[a].states),
                    trace=list(particles[a].trace),
                    rng=p_rng,
                )
                for a, p_rng in zip(ancestors, particle_rngs)
            ]

    records = [
        PathRecord(
            states=p.states,
            entropy_trace=p.trace,
            final_sequence=np.array(p.state.tokens),
            path_entropy=float(np.mean(p.trace)),
            seed=p.rng.seed,
            stream_id=p.rng.stream_id,
            strategy_id=strategy.strategy_id,
        )
        for p in particles
    ]
    selected = e_bon(records)
    return ParticleSet(particles=particles, potentials=potentials, weights=weights), selected


def greedy_search(
    length: int,
    backend: DenoiserBackend,
    strategy: StrategyConfig,
    grid: TimeGrid,
    candidates_per_beam: int,
    beam_size: int,
    rng: RngStream,
    schedule: NoiseSchedule | None = None,
) -> PathRecord:
    """Beam search that scores partial paths by their running mean state
    entropy. Candidate 0 of each beam continues the beam's own stream, so
    c = 1, s = 1 reproduces run_path draw for draw."""
    if candidates_per_beam < 1 or beam_size < 1:
        raise ValueError("candidate and beam counts must be positive")
    mask_id = backend.vocab.mask_id
    n = grid.n_steps
    init = SeqState(np.full(length, mask_id, dtype=np.int64), n)
    beams = [_Particle(state=init, states=[init], trace=[], rng=rng)]

    for i in range(n, 0, -1):
        if all(b.state.mask_count(mask_id) == 0 for b in beams):
            break
        scored: list[tuple[float, int, _Particle]] = []
        order = 0
        for b in beams:
            if b.state.mask_count(mask_id) == 0:
                scored.append((float(np.mean(b.trace)), order, b))
                order += 1
                continue
            dist = backend.predict(b.state)
            h_here = float(dist.entropies().mean())
            trace = b.trace + [h_here]
            for j in range(candidates_per_beam):
                child_rng = b.rng if j == 0 else b.rng.substream()
                child_state = step(
                    b.state, backend, strategy, grid, i, child_rng, dist=dist, schedule=schedule
                )
                h_next = _current_h(backend, child_state)
                partial = trace + ([h_next] if child_state.mask_count(mask_id) else [])
                child = _Particle(
                    state=child_state,
                    states=b.states + [child_state],
                    trace=trace,
                    rng=child_rng,
                )
                scored.append((float(np.mean(partial)), order, child))
                order += 1
        scored.sort(key=lambda item: (item[0], item[1]))
        beams = [item[2] for item in scored[:beam_size]]

    finished = [
        PathRecord(
            states=b.states,
            entropy_trace=b.trace,
            final_sequence=np.array(b.state.tokens),
            path_entropy=float(np.mean(b.trace)),
            seed=b.rng.seed,
            stream_id=b.rng.stream_id,
            strategy_id=strategy.strategy_id,
        )
        for b in beams
        if b.state.mask_count(mask_id) == 0
    ]
    return e_bon(finished)


def majority_vote(candidates: list[PathRecord]) -> PathRecord:
    """Modal final sequence by exact match; ties go to the lowest candidate index."""
    if not candidates:
        raise ValueError("need at least one candidate")
    keys = [tuple(int(t) for t in c.final_sequence) for c in candidates]
    counts: dict[tuple, int] = {}
    for k in keys:
        counts[k] = counts.get(k, 0) + 1
    best = max(counts.values())
    for c, k in zip(candidates, keys):
        if counts[k] == best:
            return c
    raise AssertionError("unreachable")
