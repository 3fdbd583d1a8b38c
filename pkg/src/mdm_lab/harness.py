"""Experiment runners and persistence: the correlation study, ablation sweeps,
method comparisons with paired seeds, and JSONL/CSV output."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .core import NoiseSchedule, RngStream, SeqState, make_time_grid
from .denoiser import DataModel, DenoiserBackend, IIDOracle, MarkovOracle, PerturbedOracle
from .invariants import InvariantReport, run_invariant_suite  # noqa: F401  (re-exported surface)
from .metrics import evaluate_nll, pearson
from .remote import Endpoint, RemoteClient
from .reverse import PathRecord, StrategyConfig, run_path
from .search import SearchConfig, e_bon, e_smc, greedy_search

CSV_HEADER = [
    "config_hash",
    "S",
    "M",
    "delta_ir",
    "method",
    "mean_hde",
    "std_hde",
    "mean_lnppl",
    "diversity",
    "pearson_r",
]

METHODS = ("vanilla", "e_bon", "e_smc", "greedy")


@dataclass(frozen=True)
class ExperimentConfig:
    """One structured document drives every runner; see default_config()."""

    data: dict = field(default_factory=lambda: {"kind": "markov", "seed": 11128, "sharpen": 3})
    vocab_size: int = 8
    length: int = 32
    schedule: str = "linear"
    steps: int = 32
    strategy: dict = field(default_factory=lambda: {"kind": "uniform", "token_choice": "sample"})
    search: dict = field(default_factory=lambda: {"n_particles": 4, "lambda_weight": 10.0, "resample_interval": 8})
    greedy: dict = field(default_factory=lambda: {"candidates": 8, "beam_size": 1})
    backend: dict = field(default_factory=lambda: {"kind": "oracle"})
    method: str = "vanilla"
    replicates: int = 200
    seed: int = 0
    jobs: int = 1
    out_dir: str = "out"
    sweep: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as f:
            doc = json.load(f)
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    def with_overrides(self, overrides: dict[str, object]) -> "ExperimentConfig":
        """Apply dotted key=value overrides after the file parse."""
        doc = self.to_dict()
        for dotted, value in overrides.items():
            node = doc
            *head, last = dotted.split(".")
            for part in head:
                node = node.setdefault(part, {})
            node[last] = value
        return ExperimentConfig.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "data": dict(self.data),
            "vocab_size": self.vocab_size,
            "length": self.length,
            "schedule": self.schedule,
            "steps": self.steps,
            "strategy": dict(self.strategy),
            "search": dict(self.search),
            "greedy": dict(self.greedy),
            "backend": dict(self.backend),
            "method": self.method,
            "replicates": self.replicates,
            "seed": self.seed,
            "jobs": self.jobs,
            "out_dir": self.out_dir,
            "sweep": dict(self.sweep),
        }

    @property
    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("jobs", None)  # execution parameters, not experiment identity
        doc.pop("out_dir", None)
        canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(**self.strategy)

    def search_config(self, m: int | None = None, delta_ir: int | None = None) -> SearchConfig:
        doc = dict(self.search)
        if m is not None:
            doc["n_particles"] = m
        if delta_ir is not None:
            doc["resample_interval"] = delta_ir
        return SearchConfig(**doc)


@dataclass
class ReplicateRow:
    s: int
    m: int
    delta_ir: int
    method: str
    replicate: int
    h_de: float
    ln_ppl: float
    diversity: float
    wall_time: float
    seed: int
    stream_id: int


@dataclass
class GroupSummary:
    config_hash: str
    s: int
    m: int
    delta_ir: int
    method: str
    mean_hde: float
    std_hde: float
    mean_lnppl: float
    diversity: float
    pearson_r: float | None
    note: str = ""


@dataclass
class RunSummary:
    rows: list[ReplicateRow]
    groups: list[GroupSummary]
    pooled_pearson: float | None = None
    note: str = ""

    def group(self, **want) -> GroupSummary:
        for g in self.groups:
            if all(getattr(g, k) == v for k, v in want.items()):
                return g
        raise KeyError(f"no group matching {want}")

    def rows_of(self, **want) -> list[ReplicateRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in want.items())]


def sharpened_markov_model(vocab_size: int, seed: int, sharpen: int = 3) -> DataModel:
    """Seeded random row-stochastic matrix, sharpened elementwise (rows
    proportional to T**sharpen), with the stationary distribution as the
    initial law. Sharpening gives the chain learnable structure."""
    gen = np.random.default_rng(seed)
    t = gen.random((vocab_size, vocab_size))
    t /= t.sum(axis=1, keepdims=True)
    t = t**sharpen
    t /= t.sum(axis=1, keepdims=True)
    pi = np.linalg.matrix_power(t, 512)[0]
    pi = pi / pi.sum()
    return DataModel.markov(pi, t)


def default_data_model() -> DataModel:
    return sharpened_markov_model(8, seed=11128, sharpen=3)


def build_data_model(cfg: ExperimentConfig) -> DataModel:
    spec = cfg.data
    if spec["kind"] == "markov":
        if "transition" in spec:
            return DataModel.markov(spec["pi"], spec["transition"])
        return sharpened_markov_model(cfg.vocab_size, spec.get("seed", 11128), spec.get("sharpen", 3))
    if spec["kind"] == "iid":
        if "marginal" in spec:
            return DataModel.iid(spec["marginal"])
        gen = np.random.default_rng(spec.get("seed", 11128))
        marg = gen.random(cfg.vocab_size) + 0.05
        return DataModel.iid(marg / marg.sum())
    raise ValueError(f"unknown data model kind {spec['kind']!r}")


def build_backend(cfg: ExperimentConfig, data: DataModel) -> DenoiserBackend:
    spec = cfg.backend
    oracle = MarkovOracle(data) if data.kind == "markov" else IIDOracle(data)
    kind = spec.get("kind", "oracle")
    if kind == "oracle":
        return oracle
    if kind == "perturbed":
        return PerturbedOracle(oracle, spec["eps_mix"])
    if kind == "remote":
        endpoint = Endpoint(
            transport=spec.get("transport", "tcp"),
            argv=tuple(spec["argv"]) if "argv" in spec else None,
            host=spec.get("host", "127.0.0.1"),
            port=spec.get("port", 0),
        )
        return RemoteClient(data.vocab, endpoint, grid=make_time_grid(cfg.steps))
    raise ValueError(f"unknown backend kind {kind!r}")


def default_config(**overrides) -> ExperimentConfig:
    """The desk-scale benchmark: K=8, L=32 sharpened Markov chain, random-order
    unmasking with sampled tokens."""
    return replace(ExperimentConfig(), **overrides)


# -- path generation -------------------------------------------------------


def _rep_rng(seed: int, replicate: int) -> RngStream:
    return RngStream(seed, replicate + 1)


def generate_one(
    method: str,
    cfg: ExperimentConfig,
    backend: DenoiserBackend,
    replicate: int,
    steps: int | None = None,
    m: int | None = None,
    delta_ir: int | None = None,
) -> PathRecord:
    """One selected path for a method at one grid point.

    All methods at the same (seed, replicate) consume the same base streams:
    the vanilla path is candidate 0 of e_bon, and e_smc particle m reuses
    candidate m's stream, so method differences are attributable to the method.
    """
    s = steps if steps is not None else cfg.steps
    grid = make_time_grid(s)
    sched = NoiseSchedule(cfg.schedule)
    strategy = cfg.strategy_config()
    search_cfg = cfg.search_config(m=m, delta_ir=delta_ir)
    rep = _rep_rng(cfg.seed, replicate)
    mask_id = backend.vocab.mask_id

    def vanilla_path(stream_index: int) -> PathRecord:
        init = SeqState(np.full(cfg.length, mask_id, dtype=np.int64), s)
        return run_path(init, backend, strategy, grid, rep.substream(stream_index), schedule=sched)

    if method == "vanilla":
        return vanilla_path(0)
    if method == "e_bon":
        return e_bon([vanilla_path(i) for i in range(search_cfg.n_particles)])
    if method == "e_smc":
        _, selected = e_smc(cfg.length, backend, strategy, grid, search_cfg, rep, schedule=sched)
        return selected
    if method == "greedy":
        return greedy_search(
            cfg.length,
            backend,
            strategy,
            grid,
            cfg.greedy.get("candidates", 8),
            cfg.greedy.get("beam_size", 1),
            rep.substream(0),
            schedule=sched,
        )
    raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")


def _score_record(record: PathRecord, data: DataModel) -> PathRecord:
    score = evaluate_nll(record.final_sequence, data)
    record.nll_eval = score.nll_per_token
    record.diversity = score.diversity
    return record


def _parallel_map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _run_cell(
    cfg: ExperimentConfig,
    backend: DenoiserBackend,
    data: DataModel,
    method: str,
    s: int,
    m: int,
    delta_ir: int,
) -> list[ReplicateRow]:
    def one(replicate: int) -> ReplicateRow:
        t0 = time.perf_counter()
        record = _score_record(
            generate_one(method, cfg, backend, replicate, steps=s, m=m, delta_ir=delta_ir), data
        )
        return ReplicateRow(
            s=s,
            m=m,
            delta_ir=delta_ir,
            method=method,
            replicate=replicate,
            h_de=record.path_entropy,
            ln_ppl=record.nll_eval,
            diversity=record.diversity,
            wall_time=time.perf_counter() - t0,
            seed=record.seed,
            stream_id=record.stream_id,
        )

    return _parallel_map(one, range(cfg.replicates), cfg.jobs)


def _summarize_group(cfg: ExperimentConfig, rows: list[ReplicateRow]) -> GroupSummary:
    h = np.array([r.h_de for r in rows])
    nll = np.array([r.ln_ppl for r in rows])
    div = np.array([r.diversity for r in rows])
    r0 = rows[0]
    try:
        r_val, note = pearson(h, nll), ""
    except ValueError as exc:
        r_val, note = None, f"correlation undefined: {exc}"
    return GroupSummary(
        config_hash=cfg.config_hash,
        s=r0.s,
        m=r0.m,
        delta_ir=r0.delta_ir,
        method=r0.method,
        mean_hde=float(h.mean()),
        std_hde=float(h.std(ddof=1)) if len(h) > 1 else 0.0,
        mean_lnppl=float(nll.mean()),
        diversity=float(div.mean()),
        pearson_r=r_val,
        note=note,
    )


def run_correlation_study(cfg: ExperimentConfig) -> RunSummary:
    """Vanilla paths over a sweep of step counts, with per-S and pooled
    correlation between path entropy and evaluator log-perplexity."""
    data = build_data_model(cfg)
    backend = build_backend(cfg, data)
    s_values = cfg.sweep.get("steps", [4, 8, 16, 32])
    rows: list[ReplicateRow] = []
    groups: list[GroupSummary] = []
    m = cfg.search.get("n_particles", 4)
    dir_ = cfg.search.get("resample_interval", 8)
    for s in s_values:
        cell = _run_cell(cfg, backend, data, "vanilla", s, m, dir_)
        rows.extend(cell)
        groups.append(_summarize_group(cfg, cell))
    finite = [r for r in rows if math.isfinite(r.ln_ppl)]
    try:
        pooled = pearson([r.h_de for r in finite], [r.ln_ppl for r in finite])
        note = ""
    except ValueError as exc:
        pooled, note = None, f"correlation undefined: {exc}"
    return RunSummary(rows=rows, groups=groups, pooled_pearson=pooled, note=note)


def run_ablation(cfg: ExperimentConfig, methods: tuple[str, ...] = ("vanilla", "e_bon", "e_smc")) -> RunSummary:
    """Paired-seed comparison of decoding methods over the sweep grid."""
    data = build_data_model(cfg)
    backend = build_backend(cfg, data)
    s_values = cfg.sweep.get("steps", [cfg.steps])
    m_values = cfg.sweep.get("particles", [cfg.search.get("n_particles", 4)])
    d_values = cfg.sweep.get("resample_interval", [cfg.search.get("resample_interval", 8)])
    rows: list[ReplicateRow] = []
    groups: list[GroupSummary] = []
    for s, m, d in itertools.product(s_values, m_values, d_values):
        for method in methods:
            cell = _run_cell(cfg, backend, data, method, s, m, d)
            rows.extend(cell)
            groups.append(_summarize_group(cfg, cell))
    return RunSummary(rows=rows, groups=groups)


def paired_one_sided_p(less: list[float], more: list[float]) -> float:
    """P-value for 'mean(less) < mean(more)' with replicate pairing."""
    res = stats.ttest_rel(less, more, alternative="less")
    return float(res.pvalue)


def welch_one_sided_p(less: list[float], more: list[float]) -> float:
    res = stats.ttest_ind(less, more, equal_var=False, alternative="less")
    return float(res.pvalue)


# -- persistence ------------------------------------------------------------


def _record_to_json(record: PathRecord) -> dict:
    return {
        "seed": int(record.seed),
        "stream_id": int(record.stream_id),
        "strategy": record.strategy_id,
        "entropy_trace": [float(h) for h in record.entropy_trace],
        "final_tokens": [int(t) for t in record.final_sequence],
        "h_de": float(record.path_entropy),
        "ln_ppl": None if record.nll_eval is None else float(record.nll_eval),
        "diversity": None if record.diversity is None else float(record.diversity),
    }


def persist(obj, out_dir: str | Path) -> Path:
    """Write records or a summary under out_dir and return the file path.

    Path records stream to line-delimited JSON (constant memory, append mode);
    run summaries become a CSV with a fixed, byte-stable header.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if isinstance(obj, PathRecord):
            obj = [obj]
        if isinstance(obj, RunSummary):
            path = out / "summary.csv"
            with open(path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(CSV_HEADER)
                for g in obj.groups:
                    writer.writerow(
                        [
                            g.config_hash,
                            g.s,
                            g.m,
                            g.delta_ir,
                            g.method,
                            f"{g.mean_hde:.10g}",
                            f"{g.std_hde:.10g}",
                            f"{g.mean_lnppl:.10g}",
                            f"{g.diversity:.10g}",
                            "" if g.pearson_r is None else f"{g.pearson_r:.10g}",
                        ]
                    )
            return path
        path = out / "paths.jsonl"
        with open(path, "a") as f:
            for record in obj:
                f.write(json.dumps(_record_to_json(record), separators=(",", ":")) + "\n")
        return path
    except OSError as exc:
        raise OSError(f"persist failed for {out_dir}: {exc}") from exc


def load_paths(path: str | Path) -> list[dict]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def rescore_paths(path: str | Path, cfg: ExperimentConfig) -> list[dict]:
    """Re-evaluate an existing JSONL of paths under the config's data model."""
    data = build_data_model(cfg)
    out = []
    for doc in load_paths(path):
        score = evaluate_nll(np.array(doc["final_tokens"], dtype=np.int64), data)
        doc = dict(doc)
        doc["ln_ppl"] = score.ln_ppl if math.isfinite(score.ln_ppl) else None
        doc["diversity"] = score.diversity
        doc["zero_probability"] = score.zero_probability
        out.append(doc)
    return out
