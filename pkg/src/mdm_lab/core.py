"""Vocabulary, noise schedules, time grids, sequence states, forward corruption,
and reproducible random streams. Everything else in the package builds on these."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Children of a stream occupy a contiguous block below the parent; fewer than
# _STREAM_STRIDE children per node keeps ids collision-free at any depth.
_STREAM_STRIDE = 2**20


@dataclass(frozen=True)
class Vocab:
    """Content tokens are 0..size-1; the mask sentinel is the value `size` itself."""

    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocabulary needs at least 2 content tokens, got {self.size}")

    @property
    def mask_id(self) -> int:
        return self.size

    def validate_tokens(self, tokens: np.ndarray, allow_mask: bool = True) -> None:
        tokens = np.asarray(tokens)
        lo = tokens.min(initial=0)
        hi = tokens.max(initial=0)
        top = self.size if allow_mask else self.size - 1
        if lo < 0 or hi > top:
            raise ValueError(f"token ids out of range [0, {top}]: min={lo} max={hi}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Survival probability alpha(t): strictly decreasing, alpha(0)=1, alpha(1)=0."""

    kind: str = "linear"

    _KINDS = ("linear", "cosine")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}, expected one of {self._KINDS}")

    def alpha(self, t: float) -> float:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"time must lie in [0, 1], got {t}")
        if self.kind == "linear":
            return 1.0 - t
        return math.cos(0.5 * math.pi * t) ** 2


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i/N, i = 0..N, stored ascending and iterated descending."""

    n_steps: int
    times: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"need at least one step, got {self.n_steps}")
        if self.times is None:
            object.__setattr__(self, "times", np.linspace(0.0, 1.0, self.n_steps + 1))
        self.times.setflags(write=False)


def make_time_grid(n_steps: int) -> TimeGrid:
    return TimeGrid(n_steps)


@dataclass(frozen=True)
class SeqState:
    """Latent sequence: content tokens interleaved with mask sentinels, plus a time label.

    `time_index` is an int grid index when the state lives on a TimeGrid, or the raw
    time in [0, 1] otherwise. The masked set is always derived from `tokens`.
    """

    tokens: np.ndarray
    time_index: int | float

    def __post_init__(self):
        toks = np.array(self.tokens, dtype=np.int64, copy=True)
        toks.setflags(write=False)
        object.__setattr__(self, "tokens", toks)

    def __len__(self) -> int:
        return len(self.tokens)

    def masked_positions(self, mask_id: int) -> np.ndarray:
        return np.flatnonzero(self.tokens == mask_id)

    def mask_count(self, mask_id: int) -> int:
        return int(np.count_nonzero(self.tokens == mask_id))

    def with_tokens(self, tokens: np.ndarray, time_index: int | float) -> "SeqState":
        return SeqState(tokens, time_index)


@dataclass
class RngStream:
    """Named deterministic random stream: (seed, stream_id) fully fixes the draws.

    Substreams are carved out of a k-ary id tree so that any spawning pattern with
    fewer than 2**20 children per node never collides. One stream is owned by one
    logical task (particle, replicate) at a time.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)
    _spawned: int = field(default=0, repr=False, compare=False)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def substream(self, index: int | None = None) -> "RngStream":
        """Deterministic child stream. With no index, children are numbered by call order."""
        if index is None:
            index = self._spawned
            self._spawned += 1
        if not 0 <= index < _STREAM_STRIDE - 1:
            raise ValueError(f"substream index out of range: {index}")
        return RngStream(self.seed, self.stream_id * _STREAM_STRIDE + index + 1)

    def spawn(self, n: int) -> list["RngStream"]:
        return [self.substream() for _ in range(n)]


def corrupt_forward(
    x0: np.ndarray,
    t: float,
    schedule: NoiseSchedule,
    vocab: Vocab,
    rng: RngStream,
    grid: TimeGrid | None = None,
) -> SeqState:
    """Mask each position independently with probability 1 - alpha(t).

    With a grid, the state is labeled by the nearest grid index; otherwise the raw
    time is retained.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    vocab.validate_tokens(x0, allow_mask=False)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time must lie in [0, 1], got {t}")
    keep = schedule.alpha(t)
    masked = rng.generator.random(len(x0)) >= keep
    tokens = np.where(masked, vocab.mask_id, x0)
    if grid is not None:
        time_index = int(np.argmin(np.abs(grid.times - t)))
    else:
        time_index = float(t)
    return SeqState(tokens, time_index)
