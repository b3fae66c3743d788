import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from scripts.datasets import SyntheticTask
from scripts.errors import ConfigError, KasautiError, SearchError
from scripts.scoring import ScoreTable, compute_zeros
from scripts.settings import SearchOptions, SpaceConfig, canonical_json
from scripts.spaces import Genotype, Space, Supernet, build_space, make_genotype, op_kind, total_ops

logger = logging.getLogger(__name__)

# --- CONFIGURATION ---
MODES = ("iterative", "oneshot")

Evaluator = Callable[[Genotype], float]


@dataclass(frozen=True)
class SearchConfig:
    variant: str = "data_agnostic"
    mode: str = "iterative"
    alpha_scale: float = 1e-3
    seed: int = 0
    options: SearchOptions = field(default_factory=SearchOptions)

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "mode": self.mode,
            "alpha_scale": self.alpha_scale,
            "seed": self.seed,
            "options": self.options.model_dump(mode="json"),
        }


@dataclass
class SearchStep:
    iteration: int
    pruned: Tuple[int, int]
    pruned_label: str
    score: float
    table_digest: str
    argmax_genotype: str

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "pruned": {"edge": self.pruned[0], "op": self.pruned[1], "label": self.pruned_label},
            "score": self.score,
            "table_digest": self.table_digest,
            "argmax_genotype": self.argmax_genotype,
        }


@dataclass
class SearchTrace:
    config: dict
    steps: List[SearchStep] = field(default_factory=list)
    final: Optional[Genotype] = None
    initial_argmax: Optional[str] = None
    scoring_passes: int = 0
    wall_time_ms: float = 0.0
    error: Optional[str] = None

    def digest(self) -> str:
        """Hash of everything except wall time."""
        payload = self.to_json()
        payload.pop("wall_time_ms")
        return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "steps": [s.to_json() for s in self.steps],
            "initial_argmax": self.initial_argmax,
            "scoring_passes": self.scoring_passes,
            "final_genotype": None if self.final is None else self.final.to_string(),
            "wall_time_ms": self.wall_time_ms,
            "error": self.error,
        }


def _round_seed(seed: int, round_index: int) -> int:
    return int(np.random.SeedSequence([seed % (1 << 32), round_index]).generate_state(1)[0])


def _task_for(space: Space, config: SearchConfig) -> Optional[SyntheticTask]:
    if config.variant == "data_agnostic":
        return None
    return SyntheticTask.from_config(
        config.options.task, input_shape=space.input_shape(1)[1:], num_classes=space.num_classes
    )


def _score(net: Supernet, config: SearchConfig, task, round_index: int) -> ScoreTable:
    return compute_zeros(
        net,
        config.variant,
        seed=config.seed,
        round_index=round_index,
        task=task,
        batch_size=config.options.batch_size,
        alpha_mode=config.options.alpha_mode,
    )


def _prunable(net: Supernet, edge: int) -> List[int]:
    """Alive candidates of an edge that may go without starving it."""
    alive = net.alive_on_edge(edge)
    if len(alive) < 2:
        return []
    signal = [o for o in alive if op_kind(net.label(edge, o)).has_signal]
    if len(signal) == 1:
        # the edge's last signal op outlives its ``none`` candidates
        return [o for o in alive if o != signal[0]]
    return alive


def _lowest_prunable(net: Supernet, table: ScoreTable) -> Tuple[float, int, int]:
    # ties go to signal-less ops, then to the lexicographically smallest (edge, op)
    candidates = [
        (table[(e.index, o)], op_kind(net.label(e.index, o)).has_signal, e.index, o)
        for e in net.space.edges for o in _prunable(net, e.index)
    ]
    score, _, e, o = min(candidates)
    return score, e, o


def search_iterative(space: Space, seed: int, variant: str = "data_agnostic", a: float = 1e-3,
                     options: Optional[SearchOptions] = None) -> Tuple[Genotype, SearchTrace]:
    """Score, prune the globally weakest candidate, repeat until every edge has one op."""
    config = SearchConfig(variant, "iterative", a, seed, options or SearchOptions())
    opts = config.options
    task = _task_for(space, config)
    start = time.perf_counter()
    net = Supernet.initialize(space, seed, a)
    trace = SearchTrace(config=config.to_json(), initial_argmax=net.argmax_genotype().to_string())

    iteration = 0
    try:
        while not net.is_discrete():
            if opts.reinit_each_round and iteration > 0:
                init_seed = _round_seed(seed, iteration) if opts.fresh_init_each_round else seed
                fresh = Supernet.initialize(space, init_seed, a)
                fresh.copy_mask_from(net)
                net = fresh
            table = _score(net, config, task, iteration)
            trace.scoring_passes += 1
            score, e, o = _lowest_prunable(net, table)
            label = net.label(e, o)
            net.prune(e, o)
            argmax = net.argmax_genotype().to_string()
            trace.steps.append(SearchStep(iteration, (e, o), label, score, table.digest(), argmax))
            logger.info("round %d: pruned %s from edge %d (score %.3e)", iteration, label, e, score)
            iteration += 1
    except KasautiError as err:
        trace.error = str(err)
        trace.wall_time_ms = (time.perf_counter() - start) * 1000.0
        logger.error("search aborted after %d prunes: %s", len(trace.steps), err)
        raise SearchError(f"search aborted after {len(trace.steps)} prunes: {err}", trace) from err

    trace.final = net.to_genotype()
    trace.wall_time_ms = (time.perf_counter() - start) * 1000.0
    return trace.final, trace


def search_oneshot(space: Space, seed: int, variant: str = "data_agnostic", a: float = 1e-3,
                   options: Optional[SearchOptions] = None) -> Tuple[Genotype, SearchTrace]:
    """One score table; every edge keeps its highest-scoring candidate."""
    config = SearchConfig(variant, "oneshot", a, seed, options or SearchOptions())
    task = _task_for(space, config)
    start = time.perf_counter()
    net = Supernet.initialize(space, seed, a)
    trace = SearchTrace(config=config.to_json(), initial_argmax=net.argmax_genotype().to_string())
    try:
        table = _score(net, config, task, 0)
    except KasautiError as err:
        trace.error = str(err)
        raise SearchError(f"one-shot scoring failed: {err}", trace) from err
    trace.scoring_passes = 1

    chosen = []
    for edge in space.edges:
        alive = net.alive_on_edge(edge.index)
        # ties keep a signal op over ``none``, then the lowest index
        best = max(alive, key=lambda o: (table[(edge.index, o)], op_kind(net.label(edge.index, o)).has_signal, -o))
        chosen.append(net.label(edge.index, best))
    genotype = make_genotype(space, chosen)

    digest = table.digest()
    for edge, keep in zip(space.edges, chosen):
        for o in net.alive_on_edge(edge.index):
            label = net.label(edge.index, o)
            if label != keep:
                net.prune(edge.index, o)
                trace.steps.append(SearchStep(0, (edge.index, o), label, table[(edge.index, o)], digest,
                                              net.argmax_genotype().to_string()))
    trace.final = genotype
    trace.wall_time_ms = (time.perf_counter() - start) * 1000.0
    return genotype, trace


def initial_scores(space: Space, config: SearchConfig) -> ScoreTable:
    """The ZEROS table a search with ``config`` scores in its first round."""
    net = Supernet.initialize(space, config.seed, config.alpha_scale)
    return _score(net, config, _task_for(space, config), 0)


def run_search(space: Space, config: SearchConfig) -> Tuple[Genotype, SearchTrace]:
    if config.mode not in MODES:
        raise ConfigError(f"unknown search mode {config.mode!r}")
    search = search_iterative if config.mode == "iterative" else search_oneshot
    return search(space, config.seed, config.variant, config.alpha_scale, config.options)


def expected_iterations(space: Space) -> int:
    return total_ops(space) - len(space.edges)


# --- TRACKING ---

@dataclass
class TrajectoryPoint:
    iteration: int
    genotype: str
    quality: float


@dataclass
class Trajectory:
    points: List[TrajectoryPoint]
    trace: SearchTrace
    error: Optional[str] = None

    @property
    def values(self) -> List[float]:
        return [p.quality for p in self.points]

    def to_json(self) -> dict:
        return {
            "points": [{"iteration": p.iteration, "genotype": p.genotype, "quality": p.quality} for p in self.points],
            "final_genotype": None if self.trace.final is None else self.trace.final.to_string(),
            "error": self.error,
        }


def track_pruning(space: Space, seed: int, variant: str, evaluator: Evaluator, a: float = 1e-3,
                  options: Optional[SearchOptions] = None) -> Trajectory:
    """Quality of the argmax genotype before pruning and after every prune."""
    _, trace = search_iterative(space, seed, variant, a, options)
    genotypes = [trace.initial_argmax] + [s.argmax_genotype for s in trace.steps]
    points = []
    for iteration, text in enumerate(genotypes):
        try:
            quality = float(evaluator(Genotype.parse(text)))
        except Exception as e:
            logger.warning("evaluator failed at iteration %d on %s: %s", iteration, text, e)
            return Trajectory(points, trace, error=f"evaluator failed at iteration {iteration}: {e}")
        points.append(TrajectoryPoint(iteration, text, quality))
    return Trajectory(points, trace)


# --- MULTI-SEED ---

SeedResult = Union[Tuple[Genotype, SearchTrace], SearchError]


def _search_job(args) -> SeedResult:
    space_config, config, keep_going = args
    try:
        return run_search(build_space(space_config), config)
    except SearchError as e:
        if not keep_going:
            raise
        return e


def search_seeds(space_config: SpaceConfig, configs: List[SearchConfig], workers: int = 1,
                 keep_going: bool = False) -> List[SeedResult]:
    """Runs independent searches, in worker processes when ``workers > 1``; order follows ``configs``.

    With ``keep_going`` a failed seed yields its ``SearchError`` (partial
    trace attached) in place of a result and the other seeds still run.
    """
    jobs = [(space_config, c, keep_going) for c in configs]
    if workers <= 1 or len(jobs) <= 1:
        return [_search_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_search_job, jobs))
