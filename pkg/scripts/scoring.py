"""Zero-cost scores for candidate operations and whole architectures.

ZEROS scores an alive candidate k by F = |dL/d(alpha_k) * alpha_k| from a
single forward and backward pass at initialization. Three variants differ
only in the batch and loss:

* vanilla: task batch, mean cross-entropy;
* label_agnostic: task inputs, uniformly random labels;
* data_agnostic: one all-ones input, |W| forward, loss = sum of logits.

The summing-up proxies (grad_norm, snip, grasp, synflow) add parameter-wise
saliencies into one architecture-level number.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from scripts.datasets import SyntheticTask, random_labels
from scripts.errors import ConfigError, NonFiniteError, StarvedNodeError
from scripts.spaces import Genotype, Network, Space, Supernet, make_genotype, ones_input, op_kind
from scripts.tensor import Tape, Tensor, cross_entropy, hvp_finite_difference, mse_loss, sum_reduce

logger = logging.getLogger(__name__)

# --- CONFIGURATION ---
VARIANTS = ("vanilla", "label_agnostic", "data_agnostic")
PROXIES = ("grad_norm", "snip", "grasp", "synflow")
BATCH_PROXIES = ("grad_norm", "snip", "grasp")
GRASP_EPS = 1e-4
MIN_CORRELATION_SAMPLES = 20


@dataclass
class ScoreTable:
    variant: str
    entries: Dict[Tuple[int, int], float]
    seed: int = 0
    round_index: int = 0
    batch_size: int = 0
    loss: float = 0.0
    alpha_mode: str = "raw"
    forward_passes: int = 0
    backward_passes: int = 0
    labels: Dict[Tuple[int, int], str] = field(default_factory=dict)

    def __getitem__(self, key: Tuple[int, int]) -> float:
        return self.entries[key]

    def digest(self) -> str:
        """sha256 over the exact float reprs, in (edge, op) order."""
        text = ";".join(f"{e},{o}={self.entries[(e, o)]!r}" for e, o in sorted(self.entries))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "round": self.round_index,
            "alpha_mode": self.alpha_mode,
            "batch_size": self.batch_size,
            "loss": self.loss,
            "digest": self.digest(),
            "entries": [
                {"edge": e, "op": o, "label": self.labels.get((e, o)), "score": self.entries[(e, o)]}
                for e, o in sorted(self.entries)
            ],
        }


@dataclass
class ProxyScore:
    proxy: str
    value: float
    param_count: int
    genotype: Optional[str] = None


# --- ZEROS ---

def _zeros(net: Supernet, variant: str, x: Tensor, loss_fn, weight_transform: str, alpha_mode: str,
           **meta) -> ScoreTable:
    if alpha_mode not in ("raw", "softmax"):
        raise ValueError(f"unknown alpha mode {alpha_mode!r}")
    forwards_before = net.forward_count
    alive = net.alive_ops()
    with Tape() as tape:
        capture = {}
        logits = net.forward(x, weight_transform=weight_transform, capture=capture)
        try:
            loss = loss_fn(logits)
        except NonFiniteError as e:
            raise NonFiniteError(e.primitive, where="loss") from e
        # alpha is the scored quantity in raw mode, the mixing vector in softmax mode
        targets = net.alphas if alpha_mode == "raw" else [capture["mix"][e.index] for e in net.space.edges]
        grads = tape.gradients(loss, targets, allow_unused=True)

    entries, labels = {}, {}
    for e, o in alive:
        score = abs(float(grads[e][o]) * float(targets[e].data[o]))
        if not np.isfinite(score):
            raise NonFiniteError("zeros", where=f"edge {e} ({net.label(e, o)})")
        entries[(e, o)] = score
        labels[(e, o)] = net.label(e, o)
    return ScoreTable(
        variant=variant,
        entries=entries,
        labels=labels,
        loss=loss.item(),
        alpha_mode=alpha_mode,
        batch_size=x.shape[0],
        forward_passes=net.forward_count - forwards_before,
        backward_passes=tape.sweeps,
        **meta,
    )


def zeros_scores(net: Supernet, batch: Tuple[Tensor, np.ndarray], alpha_mode: str = "raw",
                 seed: int = 0, round_index: int = 0) -> ScoreTable:
    """Vanilla ZEROS on a labelled batch."""
    x, y = batch
    return _zeros(net, "vanilla", x, lambda out: cross_entropy(out, y), "identity", alpha_mode,
                  seed=seed, round_index=round_index)


def zeros_scores_label_agnostic(net: Supernet, x: Tensor, seed: int, round_index: int = 0,
                                alpha_mode: str = "raw") -> ScoreTable:
    y = random_labels(x.shape[0], net.space.num_classes, seed, round_index)
    return _zeros(net, "label_agnostic", x, lambda out: cross_entropy(out, y), "identity", alpha_mode,
                  seed=seed, round_index=round_index)


def zeros_scores_data_agnostic(net: Supernet, alpha_mode: str = "raw", seed: int = 0,
                               round_index: int = 0) -> ScoreTable:
    x = ones_input(net.space, batch=1)
    return _zeros(net, "data_agnostic", x, sum_reduce, "absolute", alpha_mode,
                  seed=seed, round_index=round_index)


def compute_zeros(net: Supernet, variant: str, seed: int = 0, round_index: int = 0,
                  task: Optional[SyntheticTask] = None, batch_size: int = 16,
                  alpha_mode: str = "raw") -> ScoreTable:
    """Dispatches to the variant; data-dependent variants draw their batch from ``task``."""
    if variant == "data_agnostic":
        return zeros_scores_data_agnostic(net, alpha_mode=alpha_mode, seed=seed, round_index=round_index)
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ZEROS variant {variant!r}")
    if task is None:
        raise ConfigError(f"variant {variant} needs a task to draw batches from")
    x, y = task.batch(batch_size, seed)
    if variant == "vanilla":
        return zeros_scores(net, (x, y), alpha_mode=alpha_mode, seed=seed, round_index=round_index)
    return zeros_scores_label_agnostic(net, x, seed, round_index=round_index, alpha_mode=alpha_mode)


# --- SUMMING-UP PROXIES ---

def _batch_loss(net: Network, batch, loss: str):
    x, y = batch
    if loss == "mse":
        return lambda: mse_loss(net.forward(x), y)
    return lambda: cross_entropy(net.forward(x), y)


def _proxy_value(net: Network, proxy: str, batch, loss: str, input_tensor: Optional[Tensor]) -> float:
    params = list(net.weight_blocks().values())
    if proxy == "synflow":
        if input_tensor is None:
            shape = (1,) + batch[0].shape[1:] if batch is not None else net.input_shape(1)
            input_tensor = Tensor(np.ones(shape))
        with Tape() as tape:
            out = sum_reduce(net.forward(input_tensor, weight_transform="absolute"))
            grads = tape.gradients(out, params, allow_unused=True)
        return float(sum(np.abs(g * p.data).sum() for g, p in zip(grads, params)))

    if batch is None:
        raise ConfigError(f"proxy {proxy} needs a data batch")
    loss_fn = _batch_loss(net, batch, loss)
    with Tape() as tape:
        grads = tape.gradients(loss_fn(), params, allow_unused=True)
    if proxy == "grad_norm":
        return float(np.sqrt(sum((g ** 2).sum() for g in grads)))
    if proxy == "snip":
        return float(sum(np.abs(g * p.data).sum() for g, p in zip(grads, params)))
    hg = hvp_finite_difference(loss_fn, params, [g for g in grads], eps=GRASP_EPS).data
    theta = np.concatenate([p.data.ravel() for p in params])
    return float(np.abs(hg * theta).sum())


def proxy_score(arch: Network, proxy: str, batch: Optional[Tuple[Tensor, np.ndarray]] = None,
                loss: str = "cross_entropy", input_tensor: Optional[Tensor] = None) -> ProxyScore:
    """Architecture-level summing-up score of a network (standalone or supernet)."""
    if proxy not in PROXIES:
        raise ConfigError(f"unknown proxy {proxy!r}, expected one of {PROXIES}")
    value = _proxy_value(arch, proxy, batch, loss, input_tensor)
    if not np.isfinite(value):
        raise NonFiniteError(proxy)
    genotype = getattr(arch, "genotype", None)
    return ProxyScore(
        proxy=proxy,
        value=value,
        param_count=sum(w.size for w in arch.weight_blocks().values()),
        genotype=None if genotype is None else genotype.to_string(),
    )


def operation_perturbation(net: Supernet, proxy: str, batch=None) -> Tuple[Genotype, Dict[Tuple[int, int], float]]:
    """Leave-one-out selector for a summing-up proxy.

    For each multi-candidate edge, every alive candidate is removed in turn and
    the supernet re-scored; the candidate whose removal drops the score the
    most is kept. Single-candidate edges keep their op. Ties go to the lowest
    op index.
    """
    base = proxy_score(net, proxy, batch).value
    saved = net.alive.copy()
    drops = {}
    chosen = []
    try:
        for edge in net.space.edges:
            alive = net.alive_on_edge(edge.index)
            if len(alive) == 1:
                chosen.append(net.label(edge.index, alive[0]))
                continue
            best, best_drop = alive[0], -np.inf
            for o in alive:
                net.alive = saved.copy()
                net.alive[edge.index, o] = False
                try:
                    removed = proxy_score(net, proxy, batch).value
                except StarvedNodeError:
                    removed = 0.0
                drop = base - removed
                drops[(edge.index, o)] = drop
                if drop > best_drop:
                    best, best_drop = o, drop
            chosen.append(net.label(edge.index, best))
    finally:
        net.alive = saved
    return make_genotype(net.space, chosen), drops


# --- BIAS ---

def max_param_fraction(space: Space, genotype: Genotype) -> Tuple[float, bool]:
    """Share of edges whose op has the largest parameter count among its candidates.

    The flag is True when every candidate on every edge has the same count.
    """
    hits, degenerate = 0, True
    for edge, op in zip(space.edges, genotype.ops):
        counts = {label: _op_params(space, edge.index, label) for label in space.candidates(edge.index)}
        if len(set(counts.values())) > 1:
            degenerate = False
        hits += counts[op] == max(counts.values())
    return hits / len(space.edges), degenerate


def _op_params(space: Space, edge: int, label: str) -> int:
    if space.kind == "sequential":
        return space.op_params(label, edge)
    return space.op_params(label)


def distinct_kinds(genotype: Genotype) -> int:
    return len({op_kind(op).name for op in genotype.ops})


@dataclass
class CorrelationEntry:
    n: int
    spearman: Optional[float]
    p_value: Optional[float]
    undefined: bool
    max_param_fraction: Optional[float] = None

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "spearman": self.spearman,
            "p_value": self.p_value,
            "undefined": self.undefined,
            "max_param_fraction": self.max_param_fraction,
        }


@dataclass
class CorrelationReport:
    per_proxy: Dict[str, CorrelationEntry]

    def __getitem__(self, proxy: str) -> CorrelationEntry:
        return self.per_proxy[proxy]

    def to_json(self) -> dict:
        return {proxy: entry.to_json() for proxy, entry in sorted(self.per_proxy.items())}


def rank_correlation(a: Sequence[float], b: Sequence[float]) -> Tuple[Optional[float], Optional[float]]:
    """Spearman rho and p-value, or (None, None) when either side is constant."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None, None
    rho, p = spearmanr(a, b)
    return float(rho), float(p)


def bias_correlation(samples: List[ProxyScore], space: Optional[Space] = None,
                     min_samples: int = MIN_CORRELATION_SAMPLES) -> CorrelationReport:
    """Spearman(value, param_count) per proxy.

    With ``space`` given and genotypes attached, also reports the max-param
    fraction of the best-scored architecture.
    """
    by_proxy: Dict[str, List[ProxyScore]] = {}
    for s in samples:
        by_proxy.setdefault(s.proxy, []).append(s)
    report = {}
    for proxy, group in by_proxy.items():
        if len(group) < min_samples:
            raise ConfigError(f"{proxy}: need at least {min_samples} samples, got {len(group)}")
        rho, p = rank_correlation([s.value for s in group], [s.param_count for s in group])
        fraction = None
        best = max(group, key=lambda s: s.value)
        if space is not None and best.genotype is not None:
            fraction, _ = max_param_fraction(space, Genotype.parse(best.genotype))
        if rho is None:
            logger.warning("%s: constant scores or parameter counts, correlation undefined", proxy)
        report[proxy] = CorrelationEntry(n=len(group), spearman=rho, p_value=p, undefined=rho is None,
                                         max_param_fraction=fraction)
    return CorrelationReport(report)
