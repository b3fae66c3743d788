"""Ground truth for miniature spaces: enumerate, train, rank, compare.

Every genotype of a small cell space is trained from scratch with plain SGD
on a synthetic task; the resulting table ranks search results and serves as
an evaluator for pruning trajectories.
"""

import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from scripts.datasets import SyntheticTask
from scripts.errors import (
    ConfigError,
    EvaluatorError,
    GenotypeError,
    KasautiError,
    NonFiniteError,
    OracleError,
)
from scripts.scoring import (
    CorrelationReport,
    ProxyScore,
    bias_correlation,
    distinct_kinds,
    max_param_fraction,
    operation_perturbation,
    proxy_score,
    zeros_scores_data_agnostic,
)
from scripts.search import search_iterative
from scripts.settings import TaskConfig
from scripts.spaces import (Genotype, GenotypeNetwork, Space, Supernet, make_genotype, parameter_count,
                           random_connected_genotypes)
from scripts.tensor import Tape, Tensor, cross_entropy

logger = logging.getLogger(__name__)

# --- CONFIGURATION ---
DEFAULT_CAP = 1000
EVAL_CHUNK = 256
BIAS_METHODS = ("freedarts", "synflow_sum", "snip_sum", "grad_norm_sum")
METHOD_PROXY = {"synflow_sum": "synflow", "snip_sum": "snip", "grad_norm_sum": "grad_norm"}
MIN_BIAS_SEEDS = 10


def space_size(space: Space) -> int:
    return int(np.prod([len(space.candidates(e.index)) for e in space.edges], dtype=object))


def enumerate_space(space: Space, cap: int = DEFAULT_CAP) -> List[Genotype]:
    """Every genotype, edges in order and candidates in index order."""
    count = space_size(space)
    if count > cap:
        raise OracleError(f"space has {count} architectures, more than the cap of {cap}")
    choices = [space.candidates(e.index) for e in space.edges]
    return [make_genotype(space, ops) for ops in itertools.product(*choices)]


# --- TRAINING ---

@dataclass
class TrainResult:
    accuracy: float
    diverged: bool = False
    final_loss: Optional[float] = None


def _accuracy(net: GenotypeNetwork, x: np.ndarray, y: np.ndarray) -> float:
    correct = 0
    for start in range(0, len(y), EVAL_CHUNK):
        logits = net.forward(Tensor(x[start:start + EVAL_CHUNK])).data
        correct += int((logits.argmax(axis=1) == y[start:start + EVAL_CHUNK]).sum())
    return correct / len(y)


def train_candidate(genotype: Genotype, task: SyntheticTask, epochs: int, lr: float, seed: int,
                    space: Space, batch_size: int = 64) -> TrainResult:
    """Plain minibatch SGD on mean cross-entropy; held-out accuracy on the test split."""
    if tuple(space.input_shape(1)[1:]) != tuple(task.input_shape) or space.num_classes != task.num_classes:
        raise GenotypeError(f"space input {space.input_shape(1)[1:]} / {space.num_classes} classes does not "
                            f"match task {task.input_shape} / {task.num_classes} classes")
    net = GenotypeNetwork.initialize(space, genotype, seed)
    params = list(net.weight_blocks().values())
    rng = np.random.default_rng(np.random.SeedSequence([seed % (1 << 32), 7]))
    loss_value = None
    try:
        for _ in range(epochs):
            order = rng.permutation(task.n_train)
            for start in range(0, task.n_train, batch_size):
                idx = order[start:start + batch_size]
                with Tape() as tape:
                    loss = cross_entropy(net.forward(Tensor(task.x_train[idx])), task.y_train[idx])
                    grads = tape.gradients(loss, params, allow_unused=True)
                for p, g in zip(params, grads):
                    p.data = p.data - lr * g
                loss_value = loss.item()
    except NonFiniteError as e:
        logger.warning("training %s (seed %d) diverged: %s", genotype, seed, e)
        return TrainResult(accuracy=0.0, diverged=True)
    return TrainResult(accuracy=_accuracy(net, task.x_test, task.y_test), final_loss=loss_value)


# --- TABLE ---

@dataclass
class OracleEntry:
    genotype: str
    accuracies: List[float]
    params: int
    diverged: int = 0

    @property
    def acc_mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def acc_std(self) -> float:
        return float(np.std(self.accuracies))

    def to_json(self) -> dict:
        return {
            "genotype": self.genotype,
            "acc_mean": self.acc_mean,
            "acc_std": self.acc_std,
            "params": self.params,
            "accuracies": self.accuracies,
            "diverged": self.diverged,
        }


@dataclass
class OracleTable:
    entries: Dict[str, OracleEntry]
    config_digest: str = ""

    def __len__(self):
        return len(self.entries)

    def accuracy(self, genotype: Genotype) -> float:
        key = genotype.to_string() if isinstance(genotype, Genotype) else genotype
        if key not in self.entries:
            raise OracleError(f"genotype {key} is not in the oracle table")
        return self.entries[key].acc_mean

    def percentile(self, genotype: Genotype) -> float:
        """100 * share of the whole table scoring at most this genotype's accuracy."""
        acc = self.accuracy(genotype)
        return 100.0 * sum(e.acc_mean <= acc for e in self.entries.values()) / len(self.entries)

    def best(self) -> Genotype:
        key = max(self.entries, key=lambda k: (self.entries[k].acc_mean, k))
        return Genotype.parse(key)

    def genotypes(self) -> List[Genotype]:
        return [Genotype.parse(k) for k in self.entries]

    def evaluator(self):
        return self.accuracy

    def to_json(self) -> dict:
        return {"config_digest": self.config_digest, "entries": [e.to_json() for e in self.entries.values()]}

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, payload: dict) -> "OracleTable":
        try:
            entries = {}
            for raw in payload["entries"]:
                key = Genotype.parse(raw["genotype"]).to_string()
                if key in entries:
                    raise OracleError(f"duplicate oracle entry {key}")
                accs = raw.get("accuracies") or [raw["acc_mean"]]
                entries[key] = OracleEntry(key, [float(a) for a in accs], int(raw["params"]), int(raw.get("diverged", 0)))
        except (KeyError, TypeError, ValueError) as e:
            raise OracleError(f"malformed oracle table: {e}") from e
        return cls(entries, payload.get("config_digest", ""))

    @classmethod
    def load(cls, path: str) -> "OracleTable":
        try:
            with open(path, "r") as f:
                return cls.from_json(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise OracleError(f"cannot read oracle table {path}: {e}") from e


def _train_job(args) -> Tuple[str, int, TrainResult]:
    space, genotype, task, epochs, lr, seed, batch_size = args
    return genotype.to_string(), seed, train_candidate(genotype, task, epochs, lr, seed, space, batch_size)


def build_oracle(space: Space, task: SyntheticTask, epochs: int, lr: float, seeds: Sequence[int],
                 workers: int = 1, batch_size: int = 64, cap: int = DEFAULT_CAP,
                 config_digest: str = "") -> OracleTable:
    genotypes = enumerate_space(space, cap)
    jobs = [(space, g, task, epochs, lr, s, batch_size) for g in genotypes for s in seeds]
    logger.info("training %d architectures x %d seeds", len(genotypes), len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_train_job(job))
            logger.info("trained %s seed %d: acc %.3f", results[-1][0], results[-1][1], results[-1][2].accuracy)

    # keyed merge in enumeration order
    merged = {g.to_string(): OracleEntry(g.to_string(), [], parameter_count(space, g)) for g in genotypes}
    for key, _, result in results:
        merged[key].accuracies.append(result.accuracy)
        merged[key].diverged += int(result.diverged)
    return OracleTable(merged, config_digest)


# --- RANKING ---

def _summary(values: Sequence[float]) -> dict:
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    return {"median": float(median), "q1": float(q1), "q3": float(q3), "mean": float(np.mean(values))}


@dataclass
class RankReport:
    percentiles: List[float]
    random_percentiles: List[float]
    genotypes: List[str]
    config_digest: str = ""

    @property
    def median(self) -> float:
        return _summary(self.percentiles)["median"]

    @property
    def random_median(self) -> float:
        return _summary(self.random_percentiles)["median"]

    def to_json(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "found": [{"genotype": g, "percentile": p} for g, p in zip(self.genotypes, self.percentiles)],
            "search": _summary(self.percentiles),
            "random_baseline": _summary(self.random_percentiles),
        }


def random_baseline(oracle: OracleTable, trials: int = 50, seed: int = 0) -> List[float]:
    """Percentiles of uniformly drawn architectures from the table."""
    keys = list(oracle.entries)
    rng = np.random.default_rng(np.random.SeedSequence([seed % (1 << 32), 11]))
    return [oracle.percentile(keys[i]) for i in rng.integers(0, len(keys), size=trials)]


def rank_report(found: Sequence[Genotype], oracle: OracleTable, trials: int = 50, seed: int = 0) -> RankReport:
    if not found:
        raise OracleError("no search results to rank")
    percentiles = [oracle.percentile(g) for g in found]
    return RankReport(percentiles, random_baseline(oracle, trials, seed),
                      [g.to_string() for g in found], oracle.config_digest)


# --- BIAS ---

@dataclass
class MethodBias:
    method: str
    genotypes: List[str] = field(default_factory=list)
    max_param_fractions: List[float] = field(default_factory=list)
    kinds: List[int] = field(default_factory=list)
    degenerate: bool = False
    correlation: Optional[dict] = None

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "genotypes": self.genotypes,
            "max_param_fraction": self.max_param_fractions,
            "mean_max_param_fraction": float(np.mean(self.max_param_fractions)),
            "distinct_kinds": self.kinds,
            "degenerate": self.degenerate,
            "correlation": self.correlation,
        }


@dataclass
class BiasReport:
    methods: Dict[str, MethodBias]
    seeds: List[int]
    config_digest: str = ""

    def __getitem__(self, method: str) -> MethodBias:
        return self.methods[method]

    def to_json(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "seeds": self.seeds,
            "methods": {k: v.to_json() for k, v in sorted(self.methods.items())},
        }


def _architecture_score(method: str, space: Space, genotype: Genotype, seed: int, table, batch) -> float:
    if method == "freedarts":
        return sum(table[(e.index, space.candidates(e.index).index(op))] for e, op in zip(space.edges, genotype.ops))
    net = GenotypeNetwork.initialize(space, genotype, seed)
    return proxy_score(net, METHOD_PROXY[method], batch).value


def bias_report(space: Space, seeds: Sequence[int], methods: Sequence[str] = BIAS_METHODS, a: float = 1e-3,
                task_config: Optional[TaskConfig] = None, batch_size: int = 16, samples_per_seed: int = 10,
                min_seeds: int = MIN_BIAS_SEEDS, config_digest: str = "") -> BiasReport:
    """Which candidates each selector keeps, and how its scores track parameter counts.

    FreeDARTS selects by iterative data-agnostic ZEROS pruning; summing-up
    proxies select by leave-one-out perturbation of the supernet score.
    Correlations pool architecture-level scores of random connected genotypes
    over seeds;
    FreeDARTS scores an architecture by summing its ops' initial ZEROS entries.
    """
    if len(seeds) < min_seeds:
        raise ConfigError(f"bias report needs at least {min_seeds} seeds, got {len(seeds)}")
    unknown = [m for m in methods if m not in BIAS_METHODS]
    if unknown:
        raise ConfigError(f"unknown bias method(s) {unknown}, expected {BIAS_METHODS}")
    task = None
    if space.kind == "cell" and any(m in ("snip_sum", "grad_norm_sum") for m in methods):
        task = SyntheticTask.from_config(task_config or TaskConfig(), input_shape=space.input_shape(1)[1:],
                                         num_classes=space.num_classes)

    report = {m: MethodBias(m) for m in methods}
    samples = {m: [] for m in methods}
    for seed in seeds:
        batch = task.batch(batch_size, seed) if task is not None else None
        table = zeros_scores_data_agnostic(Supernet.initialize(space, seed, a), seed=seed)
        rng = np.random.default_rng(np.random.SeedSequence([seed % (1 << 32), 13]))
        # starved genotypes have no proxy value
        sampled = random_connected_genotypes(space, rng, samples_per_seed)
        for method in methods:
            if method == "freedarts":
                genotype, _ = search_iterative(space, seed, "data_agnostic", a)
            else:
                genotype, _ = operation_perturbation(Supernet.initialize(space, seed, a), METHOD_PROXY[method], batch)
            fraction, degenerate = max_param_fraction(space, genotype)
            entry = report[method]
            entry.genotypes.append(genotype.to_string())
            entry.max_param_fractions.append(fraction)
            entry.kinds.append(distinct_kinds(genotype))
            entry.degenerate = degenerate
            for g in sampled:
                value = _architecture_score(method, space, g, seed, table, batch)
                samples[method].append(ProxyScore(method, value, parameter_count(space, g), g.to_string()))
        logger.info("bias report: seed %d done", seed)

    for method in methods:
        try:
            correlation: CorrelationReport = bias_correlation(samples[method], space, min_samples=2)
            report[method].correlation = correlation[method].to_json()
        except KasautiError as e:
            logger.warning("%s: %s", method, e)
    return BiasReport(report, list(seeds), config_digest)


# --- LOOKUP FILES ---

def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ConfigError(f"duplicate genotype {key!r} in lookup file")
        seen[key] = value
    return seen


class LookupEvaluator:
    """Scalar quality per canonical genotype string, read from a JSON object."""

    def __init__(self, qualities: Dict[str, float]):
        self.qualities = qualities

    @classmethod
    def from_mapping(cls, mapping: Dict[str, float]) -> "LookupEvaluator":
        qualities = {}
        for key, value in mapping.items():
            canonical = Genotype.parse(key).to_string()
            if canonical != key:
                raise GenotypeError(f"lookup key {key!r} is not in canonical form")
            try:
                qualities[key] = float(value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"quality for {key} is not a number: {value!r}") from e
        return cls(qualities)

    @classmethod
    def load(cls, path: str) -> "LookupEvaluator":
        try:
            with open(path, "r") as f:
                payload = json.load(f, object_pairs_hook=_reject_duplicates)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read lookup file {path}: {e}") from e
        if not isinstance(payload, dict):
            raise ConfigError(f"lookup file {path} must hold a JSON object")
        return cls.from_mapping(payload)

    def __call__(self, genotype: Genotype) -> float:
        key = genotype.to_string()
        if key not in self.qualities:
            raise EvaluatorError(f"genotype {key} is missing from the lookup file")
        return self.qualities[key]


def load_evaluator(path: str):
    """Oracle tables (with an ``entries`` list) or plain lookup files."""
    try:
        with open(path, "r") as f:
            payload = json.load(f, object_pairs_hook=_reject_duplicates)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read evaluator file {path}: {e}") from e
    if isinstance(payload, dict) and isinstance(payload.get("entries"), list):
        return OracleTable.from_json(payload).evaluator()
    if not isinstance(payload, dict):
        raise ConfigError(f"evaluator file {path} must hold a JSON object")
    return LookupEvaluator.from_mapping(payload)
