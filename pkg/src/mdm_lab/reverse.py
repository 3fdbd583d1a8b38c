"""Reverse generation: transition kernels, decoding-order strategies,
selection-temperature sampling, and the step loop that emits path records."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import NoiseSchedule, RngStream, SeqState, TimeGrid
from .denoiser import DenoiserBackend, PredictiveDistribution

_FIXED_COUNT_KINDS = ("uniform", "confidence", "entropy", "margin", "semi_ar", "pos_confidence", "p2")
_VARIABLE_KINDS = ("eb_sampler", "threshold")
_KINDS = _FIXED_COUNT_KINDS + _VARIABLE_KINDS


@dataclass(frozen=True)
class StrategyConfig:
    """Which positions to unmask each step, and how tokens are drawn.

    selection_temperature = 0 gives deterministic top-k by the strategy score
    (ties to the lowest position); > 0 samples k positions from the top-2k pool
    with softmax(score / T) weights. token_choice is "argmax" or "sample".
    """

    kind: str = "uniform"
    gamma: float = 0.0
    blocks: int | None = None
    conf_min: float = 0.0
    lambda_pos: float = 0.0
    alpha_pos: float = 0.0
    draft_fraction: float = 0.5
    refine_iters: int = 0
    selection_temperature: float = 0.0
    tokens_per_step: str = "scheduled_count"
    token_choice: str = "argmax"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.tokens_per_step not in ("scheduled_count", "stochastic_kernel"):
            raise ValueError(f"unknown tokens_per_step policy {self.tokens_per_step!r}")
        if self.token_choice not in ("argmax", "sample"):
            raise ValueError(f"unknown token_choice {self.token_choice!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not 0.0 <= self.conf_min <= 1.0:
            raise ValueError("conf_min must lie in [0, 1]")
        if self.selection_temperature < 0:
            raise ValueError("selection temperature must be nonnegative")
        if self.kind == "semi_ar" and (self.blocks is None or self.blocks < 1):
            raise ValueError("semi_ar needs a positive block count")
        if self.kind == "p2":
            if not 0.0 < self.draft_fraction <= 1.0:
                raise ValueError("draft_fraction must lie in (0, 1]")
            if self.refine_iters < 0:
                raise ValueError("refine_iters must be nonnegative")

    @classmethod
    def uniform(cls, **kw) -> "StrategyConfig":
        return cls(kind="uniform", **kw)

    @classmethod
    def confidence(cls, **kw) -> "StrategyConfig":
        return cls(kind="confidence", **kw)

    @classmethod
    def entropy(cls, **kw) -> "StrategyConfig":
        return cls(kind="entropy", **kw)

    @classmethod
    def margin(cls, **kw) -> "StrategyConfig":
        return cls(kind="margin", **kw)

    @classmethod
    def eb_sampler(cls, gamma: float, **kw) -> "StrategyConfig":
        return cls(kind="eb_sampler", gamma=gamma, **kw)

    @classmethod
    def semi_ar(cls, blocks: int, **kw) -> "StrategyConfig":
        return cls(kind="semi_ar", blocks=blocks, **kw)

    @classmethod
    def threshold(cls, conf_min: float, blocks: int | None = None, **kw) -> "StrategyConfig":
        return cls(kind="threshold", conf_min=conf_min, blocks=blocks, **kw)

    @classmethod
    def pos_confidence(cls, lambda_pos: float, alpha_pos: float, **kw) -> "StrategyConfig":
        return cls(kind="pos_confidence", lambda_pos=lambda_pos, alpha_pos=alpha_pos, **kw)

    @classmethod
    def p2(cls, draft_fraction: float, refine_iters: int, **kw) -> "StrategyConfig":
        return cls(kind="p2", draft_fraction=draft_fraction, refine_iters=refine_iters, **kw)

    @property
    def strategy_id(self) -> str:
        extra = {
            "eb_sampler": f"(gamma={self.gamma:g})",
            "semi_ar": f"(blocks={self.blocks})",
            "threshold": f"(conf_min={self.conf_min:g})",
            "pos_confidence": f"(lambda={self.lambda_pos:g},alpha={self.alpha_pos:g})",
            "p2": f"(draft={self.draft_fraction:g},iters={self.refine_iters})",
        }.get(self.kind, "")
        return self.kind + extra


@dataclass
class PathRecord:
    """One finished decoding path with its entropy trace and aggregate entropy."""

    states: list[SeqState]
    entropy_trace: list[float]
    final_sequence: np.ndarray
    path_entropy: float
    seed: int
    stream_id: int
    strategy_id: str
    nll_eval: float | None = None
    diversity: float | None = None


def unmask_probability(alpha_prev: float, alpha_cur: float) -> float:
    """Per-position unmask probability for a reverse step, (a_prev - a_cur)/(1 - a_cur)."""
    if not (0.0 <= alpha_cur < alpha_prev <= 1.0):
        raise ValueError(
            f"need 0 <= alpha_cur < alpha_prev <= 1, got ({alpha_prev}, {alpha_cur})"
        )
    return (alpha_prev - alpha_cur) / (1.0 - alpha_cur)


def scheduled_counts(length: int, n_steps: int) -> list[int]:
    """Near-uniform allocation of `length` unmasks over `n_steps`, front-loaded."""
    base, rem = divmod(length, n_steps)
    return [base + (1 if j < rem else 0) for j in range(n_steps)]


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max()
    e = np.exp(z)
    return e / e.sum()


def _top_k_or_sample(
    positions: np.ndarray, scores: np.ndarray, k: int, t_sel: float, rng: RngStream
) -> np.ndarray:
    """Deterministic top-k at t_sel = 0, else k sequential draws from the top-2k pool."""
    order = np.argsort(-scores, kind="stable")
    if t_sel == 0.0 or k >= len(positions):
        return positions[order[:k]]
    pool = order[: min(2 * k, len(positions))]
    pool_scores = scores[pool].astype(float).copy()
    chosen = []
    live = list(range(len(pool)))
    gen = rng.generator
    for _ in range(k):
        probs = _softmax(pool_scores[live] / t_sel)
        pick = gen.choice(len(live), p=probs)
        chosen.append(pool[live[pick]])
        live.pop(pick)
    return positions[np.array(chosen, dtype=np.int64)]


def _block_index(positions: np.ndarray, length: int, blocks: int) -> np.ndarray:
    block_size = math.ceil(length / blocks)
    return positions // block_size


def _base_scores(strategy: StrategyConfig, dist: PredictiveDistribution, rng: RngStream) -> np.ndarray:
    kind = strategy.kind
    if kind == "uniform":
        return rng.generator.random(dist.n_positions)
    if kind in ("confidence", "semi_ar", "threshold", "p2"):
        return dist.confidences()
    if kind in ("entropy", "eb_sampler"):
        return -dist.entropies()
    if kind == "margin":
        return dist.margins()
    if kind == "pos_confidence":
        rank = np.arange(dist.n_positions, dtype=float)
        return dist.confidences() + strategy.alpha_pos * np.exp(-strategy.lambda_pos * rank)
    raise ValueError(f"no score rule for strategy kind {kind!r}")


def select_positions(
    strategy: StrategyConfig,
    dist: PredictiveDistribution,
    state: SeqState,
    k: int,
    rng: RngStream,
) -> np.ndarray:
    """Positions to unmask this step. Fixed-count strategies return exactly k;
    eb_sampler and threshold return variable-size sets of at least 1."""
    if dist.n_positions == 0:
        raise ValueError("cannot select positions from an empty mask set")
    positions = dist.positions

    if strategy.kind == "eb_sampler":
        ents = dist.entropies()
        order = np.argsort(ents, kind="stable")
        cum = np.cumsum(ents[order])
        n = max(1, int(np.searchsorted(cum, strategy.gamma, side="right")))
        return positions[order[:n]]

    if strategy.kind == "threshold":
        conf = dist.confidences()
        eligible = np.ones(len(positions), dtype=bool)
        if strategy.blocks is not None:
            blk = _block_index(positions, len(state), strategy.blocks)
            eligible = blk == blk.min()
        hit = eligible & (conf >= strategy.conf_min)
        if hit.any():
            return positions[hit]
        sub = np.flatnonzero(eligible)
        best = sub[np.argmax(conf[sub])]
        return positions[[best]]

    if not 1 <= k <= len(positions):
        raise ValueError(f"k={k} is out of range for {len(positions)} masked positions")

    if strategy.kind == "semi_ar":
        blk = _block_index(positions, len(state), strategy.blocks)
        conf = dist.confidences()
        picked: list[np.ndarray] = []
        remaining = k
        for b in np.unique(blk):
            if remaining == 0:
                break
            in_block = blk == b
            take = min(remaining, int(in_block.sum()))
            picked.append(
                _top_k_or_sample(
                    positions[in_block], conf[in_block], take,
                    strategy.selection_temperature, rng,
                )
            )
            remaining -= take
        return np.concatenate(picked)

    scores = _base_scores(strategy, dist, rng)
    return _top_k_or_sample(positions, scores, k, strategy.selection_temperature, rng)


def _fill_tokens(
    state: SeqState,
    dist: PredictiveDistribution,
    chosen: np.ndarray,
    strategy: StrategyConfig,
    rng: RngStream,
    new_time_index: int | float,
) -> SeqState:
    tokens = np.array(state.tokens)
    gen = rng.generator
    for pos in np.sort(chosen):
        row = dist.vector_at(int(pos))
        if strategy.token_choice == "argmax":
            tokens[pos] = int(np.argmax(row))
        else:
            tokens[pos] = int(gen.choice(len(row), p=row))
    return SeqState(tokens, new_time_index)


def step(
    state: SeqState,
    backend: DenoiserBackend,
    strategy: StrategyConfig,
    grid: TimeGrid,
    i: int,
    rng: RngStream,
    dist: PredictiveDistribution | None = None,
    schedule: NoiseSchedule | None = None,
) -> SeqState:
    """One reverse transition from grid point i down to i-1.

    Under scheduled_count the step unmasks its allocation (variable-size
    strategies pick their own set); under stochastic_kernel each masked
    position unmasks independently with the kernel probability. At the final
    step (i = 1) every remaining mask is resolved: alpha(0) = 1 forces the
    unmask probability to one, for every strategy.
    """
    if i < 1:
        raise ValueError(f"step index must be >= 1, got {i}")
    if state.time_index != i:
        raise ValueError(f"state sits at {state.time_index}, expected grid index {i}")
    if strategy.kind == "p2":
        raise ValueError("p2 paths are driven by run_path, not by single steps")
    mask_id = backend.vocab.mask_id
    m = state.mask_count(mask_id)
    if m == 0:
        raise ValueError("nothing to unmask")
    if dist is None:
        dist = backend.predict(state)

    if strategy.tokens_per_step == "stochastic_kernel":
        if schedule is None:
            raise ValueError("stochastic_kernel stepping needs the noise schedule")
        u = unmask_probability(
            schedule.alpha(grid.times[i - 1]), schedule.alpha(grid.times[i])
        )
        draws = rng.generator.random(dist.n_positions)
        chosen = dist.positions[draws < u]
        if len(chosen) == 0:
            return SeqState(state.tokens, i - 1)
    elif i == 1:
        chosen = dist.positions
    elif strategy.kind in _VARIABLE_KINDS:
        chosen = select_positions(strategy, dist, state, 1, rng)
    else:
        counts = scheduled_counts(len(state), grid.n_steps)
        n = min(counts[grid.n_steps - i], m)
        if n == 0:
            return SeqState(state.tokens, i - 1)
        chosen = select_positions(strategy, dist, state, n, rng)
    return _fill_tokens(state, dist, chosen, strategy, rng, i - 1)


def run_path(
    x_init: SeqState,
    backend: DenoiserBackend,
    strategy: StrategyConfig,
    grid: TimeGrid,
    rng: RngStream,
    schedule: NoiseSchedule | None = None,
) -> PathRecord:
    """Iterate reverse steps from t_N to t_0, recording the state entropy of
    every still-masked state before its step. The path entropy is the mean of
    that trace."""
    mask_id = backend.vocab.mask_id
    if x_init.mask_count(mask_id) != len(x_init):
        raise ValueError("run_path starts from a fully masked state")
    if x_init.time_index != grid.n_steps:
        raise ValueError("initial state must sit at the last grid point")
    if strategy.tokens_per_step == "stochastic_kernel" and schedule is None:
        raise ValueError("stochastic_kernel paths need the noise schedule")
    if strategy.kind == "p2":
        return _run_p2(x_init, backend, strategy, grid, rng)

    state = x_init
    states = [state]
    trace: list[float] = []
    for i in range(grid.n_steps, 0, -1):
        if state.mask_count(mask_id) == 0:
            break
        dist = backend.predict(state)
        trace.append(float(dist.entropies().mean()))
        state = step(state, backend, strategy, grid, i, rng, dist=dist, schedule=schedule)
        states.append(state)
    if state.mask_count(mask_id) != 0:
        raise AssertionError("path failed to unmask fully")
    return PathRecord(
        states=states,
        entropy_trace=trace,
        final_sequence=np.array(state.tokens),
        path_entropy=float(np.mean(trace)),
        seed=rng.seed,
        stream_id=rng.stream_id,
        strategy_id=strategy.strategy_id,
    )


def _leave_one_out_confidence(backend: DenoiserBackend, state: SeqState, pos: int) -> float:
    """Probability of the current token at `pos` given every other observed token."""
    mask_id = backend.vocab.mask_id
    tokens = np.array(state.tokens)
    current = int(tokens[pos])
    tokens[pos] = mask_id
    probe = SeqState(tokens, state.time_index)
    return float(backend.predict(probe).vector_at(pos)[current])


def _run_p2(
    x_init: SeqState,
    backend: DenoiserBackend,
    strategy: StrategyConfig,
    grid: TimeGrid,
    rng: RngStream,
) -> PathRecord:
    """Draft, refine, fill. The draft step unmasks the most confident chunk;
    each refinement remasks the least confident generated tokens (one recorded
    transition) and immediately refills them (a second one); the rest of the
    positions are filled over the remaining grid steps."""
    mask_id = backend.vocab.mask_id
    length = len(x_init)
    n_steps = grid.n_steps
    draft_n = math.ceil(strategy.draft_fraction * length)
    remask_n = math.floor(0.1 * length)
    refine = strategy.refine_iters if remask_n >= 1 else 0
    fill_steps = n_steps - 1 - 2 * refine
    need_fill = draft_n < length
    if fill_steps < (1 if need_fill else 0):
        raise ValueError(
            f"p2 needs at least {1 + 2 * refine + (1 if need_fill else 0)} grid steps, got {n_steps}"
        )

    state = x_init
    states = [state]
    trace: list[float] = []
    i = n_steps

    def record_and_predict(st):
        d = backend.predict(st)
        trace.append(float(d.entropies().mean()))
        return d

    # draft
    dist = record_and_predict(state)
    chosen = select_positions(strategy, dist, state, draft_n, rng)
    state = _fill_tokens(state, dist, chosen, strategy, rng, i - 1)
    states.append(state)
    i -= 1

    # refinement: remask then refill, two recorded transitions each
    for _ in range(refine):
        generated = np.flatnonzero(state.tokens != mask_id)
        conf = np.array([_leave_one_out_confidence(backend, state, p) for p in generated])
        order = np.argsort(conf, kind="stable")
        worst = generated[order[:remask_n]]
        if state.mask_count(mask_id) > 0:
            record_and_predict(state)
        tokens = np.array(state.tokens)
        tokens[worst] = mask_id
        state = SeqState(tokens, i - 1)
        states.append(state)
        i -= 1

        dist = record_and_predict(state)
        state = _fill_tokens(state, dist, worst, strategy, rng, i - 1)
        states.append(state)
        i -= 1

    # fill whatever the draft left masked
    remaining = state.mask_count(mask_id)
    if remaining:
        for n in scheduled_counts(remaining, fill_steps):
            if n == 0 or state.mask_count(mask_id) == 0:
                break
            dist = record_and_predict(state)
            chosen = select_positions(strategy, dist, state, n, rng)
            state = _fill_tokens(state, dist, chosen, strategy, rng, i - 1)
            states.append(state)
            i -= 1

    if state.mask_count(mask_id) != 0:
        raise AssertionError("p2 path failed to unmask fully")
    return PathRecord(
        states=states,
        entropy_trace=trace,
        final_sequence=np.array(state.tokens),
        path_entropy=float(np.mean(trace)),
        seed=rng.seed,
        stream_id=rng.stream_id,
        strategy_id=strategy.strategy_id,
    )
