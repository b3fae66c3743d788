"""Search spaces, supernets and genotypes.

Two space families share one supernet class:

* ``CellSpace``: NB201-style DAG cell, stem conv -> cell -> global average
  pool -> linear head. Edge outputs mix candidates with softmax(alpha) over
  the alive candidates that carry signal.
* ``SequentialSpace``: L sequential nodes with M parallel linear branches
  per layer, mixed with raw alpha: h_l = sum_k alpha_lk * act(h_{l-1} W_lk).
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from scripts.errors import ConfigError, GenotypeError, NonFiniteError, PruneError, ShapeError, StarvedNodeError
from scripts.settings import CELL_OPS, SpaceConfig
from scripts.tensor import (
    Tensor,
    absolute,
    add,
    avg_pool3x3,
    conv2d,
    identity,
    matmul,
    mul,
    relu,
    scale,
    softmax,
    sum_reduce,
    take,
)

logger = logging.getLogger(__name__)

WEIGHT_TRANSFORMS = ("identity", "absolute")


@dataclass(frozen=True)
class OpKind:
    name: str
    kernel: int = 0

    @property
    def has_signal(self) -> bool:
        return self.name != "none"

    @property
    def is_parametric(self) -> bool:
        return self.kernel > 0

    def param_count(self, c_in: int, c_out: Optional[int] = None) -> int:
        c_out = c_in if c_out is None else c_out
        return self.kernel * self.kernel * c_in * c_out if self.is_parametric else 0


OP_KINDS = {
    "none": OpKind("none"),
    "skip_connect": OpKind("skip_connect"),
    "avg_pool_3x3": OpKind("avg_pool_3x3"),
    "conv_1x1": OpKind("conv_1x1", kernel=1),
    "conv_3x3": OpKind("conv_3x3", kernel=3),
    # dense branches of the sequential theory space; kernel 1 == C_in x C_out weights
    "linear_relu": OpKind("linear_relu", kernel=1),
    "linear": OpKind("linear", kernel=1),
}


def op_kind(label: str) -> OpKind:
    """Resolves a candidate label (``conv_3x3`` or ``linear_relu@2``) to its kind."""
    return OP_KINDS[label.split("@")[0]]


@dataclass(frozen=True)
class Edge:
    index: int
    src: int
    dst: int


@dataclass(frozen=True)
class CellSpace:
    num_nodes: int = 4
    ops: Tuple[str, ...] = CELL_OPS
    channels: int = 8
    input_hw: int = 8
    input_channels: int = 3
    num_classes: int = 10

    kind = "cell"

    def __post_init__(self):
        if self.num_nodes < 2 or not self.ops:
            raise ShapeError("cell_space", (self.num_nodes, len(self.ops)))
        object.__setattr__(self, "ops", tuple(self.ops))

    @cached_property
    def edges(self) -> List[Edge]:
        # grouped by destination, then source: 0->1, 0->2, 1->2, 0->3, ...
        pairs = [(i, j) for j in range(1, self.num_nodes) for i in range(j)]
        return [Edge(k, i, j) for k, (i, j) in enumerate(pairs)]

    def candidates(self, edge: int) -> Tuple[str, ...]:
        return self.ops

    def input_shape(self, batch: int) -> Tuple[int, ...]:
        return (batch, self.input_channels, self.input_hw, self.input_hw)

    def op_params(self, label: str) -> int:
        return op_kind(label).param_count(self.channels)


@dataclass(frozen=True)
class SequentialSpace:
    depth: int = 2
    branches: int = 3
    widths: Tuple[int, ...] = (8, 8, 10)
    activation: str = "relu"

    kind = "sequential"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.depth < 1 or self.branches < 1 or len(self.widths) != self.depth + 1:
            raise ShapeError("sequential_space", (self.depth, self.branches), self.widths)
        if any(w < 1 for w in self.widths) or self.activation not in ("relu", "linear"):
            raise ShapeError("sequential_space", self.widths)

    @property
    def num_nodes(self) -> int:
        return self.depth + 1

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    @cached_property
    def edges(self) -> List[Edge]:
        return [Edge(l, l, l + 1) for l in range(self.depth)]

    @cached_property
    def _labels(self) -> Tuple[str, ...]:
        kind = "linear_relu" if self.activation == "relu" else "linear"
        if self.branches == 1:
            return (kind,)
        return tuple(f"{kind}@{k}" for k in range(self.branches))

    @property
    def ops(self) -> Tuple[str, ...]:
        return self._labels

    def candidates(self, edge: int) -> Tuple[str, ...]:
        return self._labels

    def input_shape(self, batch: int) -> Tuple[int, ...]:
        return (batch, self.widths[0])

    def op_params(self, label: str, edge: int = 0) -> int:
        return op_kind(label).param_count(self.widths[edge], self.widths[edge + 1])


Space = Union[CellSpace, SequentialSpace]


def build_space(config: SpaceConfig) -> Space:
    if config.space == "cell":
        return CellSpace(
            num_nodes=config.num_nodes,
            ops=tuple(config.ops),
            channels=config.channels,
            input_hw=config.input_hw,
            input_channels=config.input_channels,
            num_classes=config.num_classes,
        )
    widths = (config.width,) * config.depth + (config.num_classes,)
    return SequentialSpace(
        depth=config.depth, branches=config.branches, widths=widths, activation=config.activation
    )


def total_ops(space: Space) -> int:
    return sum(len(space.candidates(e.index)) for e in space.edges)


# --- GENOTYPES ---

@dataclass(frozen=True)
class Genotype:
    """One surviving candidate label per edge, edges in the space's edge order."""

    ops: Tuple[str, ...]
    edges: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        if len(self.ops) != len(self.edges):
            raise GenotypeError(f"{len(self.ops)} ops for {len(self.edges)} edges")

    def to_string(self) -> str:
        groups = {}
        for (src, dst), op in zip(self.edges, self.ops):
            groups.setdefault(dst, []).append(f"{op}~{src}")
        return "+".join("|" + "|".join(groups[dst]) + "|" for dst in sorted(groups))

    def __str__(self):
        return self.to_string()

    @classmethod
    def parse(cls, text: str) -> "Genotype":
        if not isinstance(text, str) or not text:
            raise GenotypeError(f"malformed genotype string: {text!r}")
        ops, edges = [], []
        for dst, group in enumerate(text.split("+"), start=1):
            if len(group) < 2 or not (group.startswith("|") and group.endswith("|")):
                raise GenotypeError(f"malformed genotype group {group!r} in {text!r}")
            last_src = -1
            for token in group[1:-1].split("|"):
                op, sep, src = token.rpartition("~")
                if not sep or not op or not src.isdigit():
                    raise GenotypeError(f"malformed genotype token {token!r} in {text!r}")
                src = int(src)
                if src >= dst or src <= last_src or op.split("@")[0] not in OP_KINDS:
                    raise GenotypeError(f"invalid edge {token!r} in {text!r}")
                last_src = src
                ops.append(op)
                edges.append((src, dst))
        return cls(tuple(ops), tuple(edges))

    def matches(self, space: Space) -> bool:
        if len(self.ops) != len(space.edges):
            return False
        if self.edges != tuple((e.src, e.dst) for e in space.edges):
            return False
        return all(op in space.candidates(e.index) for e, op in zip(space.edges, self.ops))


def make_genotype(space: Space, ops: Sequence[str]) -> Genotype:
    genotype = Genotype(tuple(ops), tuple((e.src, e.dst) for e in space.edges))
    if not genotype.matches(space):
        raise GenotypeError(f"genotype {genotype} does not fit the {space.kind} space")
    return genotype


def random_genotype(space: Space, rng: np.random.Generator) -> Genotype:
    ops = [space.candidates(e.index)[rng.integers(len(space.candidates(e.index)))] for e in space.edges]
    return make_genotype(space, ops)


def starved_nodes(space: Space, genotype: Genotype) -> List[int]:
    """Internal nodes no signal op path reaches from the cell input."""
    if space.kind == "sequential":
        return []
    fed = [True] + [False] * (space.num_nodes - 1)
    for edge, op in zip(space.edges, genotype.ops):
        # edges come grouped by destination, so sources are settled first
        if fed[edge.src] and op_kind(op).has_signal:
            fed[edge.dst] = True
    return [j for j in range(1, space.num_nodes) if not fed[j]]


def random_connected_genotypes(space: Space, rng: np.random.Generator, n: int,
                               max_draws: int = 1000) -> List[Genotype]:
    """``n`` random genotypes with every node fed, by rejection."""
    found = []
    for _ in range(max_draws):
        genotype = random_genotype(space, rng)
        if not starved_nodes(space, genotype):
            found.append(genotype)
            if len(found) == n:
                return found
    raise ConfigError(f"only {len(found)} of {n} connected genotypes in {max_draws} draws")


def parameter_count(space: Space, genotype: Genotype) -> int:
    """Weights of the standalone network the genotype describes."""
    if space.kind == "sequential":
        return sum(space.op_params(op, e.index) for e, op in zip(space.edges, genotype.ops))
    stem = 9 * space.input_channels * space.channels
    head = space.channels * space.num_classes
    return stem + head + sum(space.op_params(op) for op in genotype.ops)


# --- NETWORKS ---

class Network(Protocol):
    def weight_blocks(self) -> Dict[str, Tensor]: ...

    def forward(self, x: Tensor, weight_transform: str = "identity") -> Tensor: ...

    def input_shape(self, batch: int) -> Tuple[int, ...]: ...


def ones_input(space: Space, batch: int = 1) -> Tensor:
    return Tensor(np.ones(space.input_shape(batch)))


def _weight_key(space: Space, edge: int, label: str) -> str:
    prefix = "edge" if space.kind == "cell" else "layer"
    return f"{prefix}{edge}:{label}"


def _init_weights(space: Space, rng: np.random.Generator) -> Dict[str, Tensor]:
    """Kaiming-style N(0, 2 / fan_in) for every parametric weight, drawn in a fixed order."""
    weights = {}

    def draw(key, shape, fan_in):
        weights[key] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True, name=key)

    if space.kind == "cell":
        c = space.channels
        draw("stem", (c, space.input_channels, 3, 3), space.input_channels * 9)
        for edge in space.edges:
            for label in space.candidates(edge.index):
                k = op_kind(label).kernel
                if k:
                    draw(_weight_key(space, edge.index, label), (c, c, k, k), c * k * k)
        draw("head", (c, space.num_classes), c)
    else:
        for edge in space.edges:
            fan_in, fan_out = space.widths[edge.index], space.widths[edge.index + 1]
            for label in space.candidates(edge.index):
                draw(_weight_key(space, edge.index, label), (fan_in, fan_out), fan_in)
    return weights


class _WeightView:
    """Resolves weight tensors for one forward pass, applying |.| on the tape if asked."""

    def __init__(self, weights: Dict[str, Tensor], transform: str):
        if transform not in WEIGHT_TRANSFORMS:
            raise ValueError(f"unknown weight transform {transform!r}")
        self._weights = weights
        self._transform = transform
        self._cache = {}

    def __getitem__(self, key: str) -> Tensor:
        if key not in self._cache:
            w = self._weights[key]
            self._cache[key] = absolute(w) if self._transform == "absolute" else w
        return self._cache[key]


@contextmanager
def _located(where: str):
    """Tags a NonFiniteError raised inside the block with the edge or layer it came from."""
    try:
        yield
    except NonFiniteError as e:
        if e.where is not None:
            raise
        raise NonFiniteError(e.primitive, where=where) from e


def _apply_cell_op(label: str, x: Tensor, weight: Optional[Tensor]) -> Tensor:
    name = op_kind(label).name
    if name == "skip_connect":
        return identity(x)
    if name == "avg_pool_3x3":
        return avg_pool3x3(x)
    if name in ("conv_1x1", "conv_3x3"):
        return conv2d(relu(x), weight)
    raise ShapeError(f"op:{label}", x.shape)


def _check_input(space: Space, x: Tensor):
    expected = space.input_shape(x.shape[0] if x.data.ndim else 1)
    if x.shape != expected:
        raise ShapeError("forward", x.shape, expected)


def _run_cell(space: CellSpace, x: Tensor, weights: _WeightView, edge_terms, capture) -> Tensor:
    """Evaluates the cell.

    ``edge_terms[e]`` lists (op index, mixing weight or None) pairs whose
    outputs are summed on edge e.
    """
    nodes: List[Optional[Tensor]] = [conv2d(x, weights["stem"])]
    starved = []
    for dst in range(1, space.num_nodes):
        node = None
        for edge in (e for e in space.edges if e.dst == dst):
            src = nodes[edge.src]
            if src is None:
                continue
            edge_out = None
            for o, w in edge_terms[edge.index]:
                label = space.ops[o]
                key = _weight_key(space, edge.index, label)
                with _located(f"edge {edge.index} ({label})"):
                    y = _apply_cell_op(label, src, weights[key] if op_kind(label).is_parametric else None)
                    term = y if w is None else mul(w, y)
                if capture is not None:
                    capture.setdefault("op", {})[(edge.index, o)] = y
                edge_out = term if edge_out is None else add(edge_out, term)
            if edge_out is None:
                continue
            if capture is not None:
                capture.setdefault("edge", {})[edge.index] = edge_out
            node = edge_out if node is None else add(node, edge_out)
        if node is None:
            starved.append(dst)
        nodes.append(node)
    if starved:
        raise StarvedNodeError(starved)
    if capture is not None:
        capture["node"] = dict(enumerate(nodes))
    out = nodes[-1]
    hw = space.input_hw * space.input_hw
    pooled = scale(sum_reduce(out, axis=(2, 3)), 1.0 / hw)
    with _located("head"):
        return matmul(pooled, weights["head"])


class Supernet:
    """Weights W, architecture parameters alpha and the alive mask of a space."""

    def __init__(self, space: Space, weights: Dict[str, Tensor], alphas: List[Tensor], alive: np.ndarray,
                 rng_seed: int = 0, alpha_scale: float = 1e-3):
        self.space = space
        self.weights = weights
        self.alphas = alphas
        self.alive = alive
        self.rng_seed = rng_seed
        self.alpha_scale = alpha_scale
        self.forward_count = 0

    @classmethod
    def initialize(cls, space: Space, seed: int, alpha_scale: float = 1e-3) -> "Supernet":
        if alpha_scale <= 0:
            raise ValueError(f"alpha scale must be positive, got {alpha_scale}")
        weight_seq, alpha_seq = np.random.SeedSequence(seed % (1 << 64)).spawn(2)
        weights = _init_weights(space, np.random.default_rng(weight_seq))
        alpha_rng = np.random.default_rng(alpha_seq)
        alphas = []
        for edge in space.edges:
            n = len(space.candidates(edge.index))
            alphas.append(Tensor(alpha_scale * alpha_rng.standard_normal(n), requires_grad=True,
                                 name=f"alpha{edge.index}"))
        alive = np.ones((len(space.edges), max(len(space.candidates(e.index)) for e in space.edges)), dtype=bool)
        return cls(space, weights, alphas, alive, rng_seed=seed, alpha_scale=alpha_scale)

    # --- state ---

    def alive_ops(self) -> List[Tuple[int, int]]:
        return [(e.index, o) for e in self.space.edges
                for o in range(len(self.space.candidates(e.index))) if self.alive[e.index, o]]

    def alive_on_edge(self, edge: int) -> List[int]:
        return [o for o in range(len(self.space.candidates(edge))) if self.alive[edge, o]]

    def label(self, edge: int, op: int) -> str:
        return self.space.candidates(edge)[op]

    def is_discrete(self) -> bool:
        return all(len(self.alive_on_edge(e.index)) == 1 for e in self.space.edges)

    def copy_mask_from(self, other: "Supernet") -> None:
        self.alive = other.alive.copy()

    def prune(self, edge: int, op: int) -> None:
        if not 0 <= edge < len(self.space.edges) or not 0 <= op < len(self.space.candidates(edge)):
            raise PruneError(f"no candidate ({edge}, {op}) in this space")
        if not self.alive[edge, op]:
            raise PruneError(f"candidate {self.label(edge, op)} on edge {edge} is already pruned")
        if len(self.alive_on_edge(edge)) < 2:
            raise PruneError(f"cannot prune the last candidate {self.label(edge, op)} of edge {edge}")
        self.alive[edge, op] = False
        logger.debug("pruned %s from edge %d", self.label(edge, op), edge)

    def prune_to(self, genotype: Genotype) -> None:
        """Prunes every edge down to the genotype's op."""
        if not genotype.matches(self.space):
            raise GenotypeError(f"genotype {genotype} does not fit this supernet")
        for edge, label in zip(self.space.edges, genotype.ops):
            keep = self.space.candidates(edge.index).index(label)
            for o in self.alive_on_edge(edge.index):
                if o != keep:
                    self.prune(edge.index, o)

    def input_shape(self, batch: int) -> Tuple[int, ...]:
        return self.space.input_shape(batch)

    def weight_blocks(self) -> Dict[str, Tensor]:
        """Weights of every alive candidate (plus stem and head in cell spaces)."""
        keys = []
        if self.space.kind == "cell":
            keys.append("stem")
        for e, o in self.alive_ops():
            label = self.label(e, o)
            if op_kind(label).is_parametric:
                keys.append(_weight_key(self.space, e, label))
        if self.space.kind == "cell":
            keys.append("head")
        return {k: self.weights[k] for k in keys}

    def block_key(self, edge: int, op: int) -> str:
        return _weight_key(self.space, edge, self.label(edge, op))

    def op_params(self, edge: int, op: int) -> int:
        label = self.label(edge, op)
        if self.space.kind == "sequential":
            return self.space.op_params(label, edge)
        return self.space.op_params(label)

    # --- mixing ---

    def _signal_mask(self, edge: int) -> np.ndarray:
        labels = self.space.candidates(edge)
        signal = np.array([op_kind(label).has_signal for label in labels])
        return self.alive[edge, : len(labels)] & signal

    def _effective_alpha(self, edge: int, alpha_override) -> Tensor:
        alpha = self.alphas[edge]
        if not alpha_override:
            return alpha
        keep = np.ones(alpha.shape)
        values = np.zeros(alpha.shape)
        for (e, o), value in alpha_override.items():
            if e == edge:
                keep[o] = 0.0
                values[o] = value
        if keep.all():
            return alpha
        return add(mul(alpha, keep), values)

    def mixing_tensors(self, alpha_override=None) -> List[Tensor]:
        """Per-edge mixing vectors on the active tape (zeros for pruned and ``none`` ops)."""
        mixes = []
        for edge in self.space.edges:
            alpha = self._effective_alpha(edge.index, alpha_override)
            if self.space.kind == "cell":
                mixes.append(softmax(alpha, mask=self._signal_mask(edge.index)))
            else:
                mixes.append(mul(alpha, self.alive[edge.index, : alpha.shape[0]].astype(np.float64)))
        return mixes

    def mixing_weights(self) -> np.ndarray:
        out = np.zeros(self.alive.shape)
        for edge, mix in zip(self.space.edges, self.mixing_tensors()):
            out[edge.index, : mix.shape[0]] = mix.data
        return out

    # --- forward ---

    def forward(self, x: Tensor, weight_transform: str = "identity", alpha_override=None,
                capture: Optional[dict] = None) -> Tensor:
        _check_input(self.space, x)
        self.forward_count += 1
        weights = _WeightView(self.weights, weight_transform)
        mixes = self.mixing_tensors(alpha_override)
        if capture is not None:
            capture["mix"] = dict(enumerate(mixes))
        if self.space.kind == "cell":
            edge_terms = {
                e.index: [(o, take(mixes[e.index], o)) for o in self.alive_on_edge(e.index)
                          if op_kind(self.label(e.index, o)).has_signal]
                for e in self.space.edges
            }
            return _run_cell(self.space, x, weights, edge_terms, capture)
        return self._run_sequential(x, weights, mixes, capture)

    def _run_sequential(self, x, weights, mixes, capture):
        h = x
        act = relu if self.space.activation == "relu" else identity
        if capture is not None:
            capture["node"] = {0: h}
        for edge in self.space.edges:
            node = None
            for o in self.alive_on_edge(edge.index):
                with _located(f"layer {edge.index} ({self.label(edge.index, o)})"):
                    y = act(matmul(h, weights[self.block_key(edge.index, o)]))
                    term = mul(take(mixes[edge.index], o), y)
                if capture is not None:
                    capture.setdefault("op", {})[(edge.index, o)] = y
                node = term if node is None else add(node, term)
            h = node
            if capture is not None:
                capture["node"][edge.dst] = h
        return h

    # --- discretization ---

    def to_genotype(self) -> Genotype:
        ops = []
        for edge in self.space.edges:
            alive = self.alive_on_edge(edge.index)
            if len(alive) != 1:
                raise GenotypeError(f"edge {edge.index} still has {len(alive)} candidates")
            ops.append(self.label(edge.index, alive[0]))
        return make_genotype(self.space, ops)

    def argmax_genotype(self) -> Genotype:
        """Largest alpha among alive candidates per edge; ties go to the lowest op index."""
        ops = []
        for edge in self.space.edges:
            alive = self.alive_on_edge(edge.index)
            values = self.alphas[edge.index].data[alive]
            ops.append(self.label(edge.index, alive[int(np.argmax(values))]))
        return make_genotype(self.space, ops)


class GenotypeNetwork:
    """Standalone discrete cell network: one op per edge, no mixing."""

    def __init__(self, space: CellSpace, genotype: Genotype, weights: Dict[str, Tensor]):
        if space.kind != "cell":
            raise GenotypeError("standalone networks are built for cell spaces only")
        if not genotype.matches(space):
            raise GenotypeError(f"genotype {genotype} does not fit the cell space")
        self.space = space
        self.genotype = genotype
        self._choice = [space.ops.index(op) for op in genotype.ops]
        keys = ["stem"] + [
            _weight_key(space, e.index, op)
            for e, op in zip(space.edges, genotype.ops) if op_kind(op).is_parametric
        ] + ["head"]
        self.weights = {k: weights[k] for k in keys}

    @classmethod
    def initialize(cls, space: CellSpace, genotype: Genotype, seed: int) -> "GenotypeNetwork":
        """Same draws as ``Supernet.initialize(space, seed)`` for the chosen ops."""
        weight_seq, _ = np.random.SeedSequence(seed % (1 << 64)).spawn(2)
        return cls(space, genotype, _init_weights(space, np.random.default_rng(weight_seq)))

    @classmethod
    def from_supernet(cls, net: Supernet) -> "GenotypeNetwork":
        return cls(net.space, net.to_genotype(), net.weights)

    def input_shape(self, batch: int) -> Tuple[int, ...]:
        return self.space.input_shape(batch)

    def weight_blocks(self) -> Dict[str, Tensor]:
        return dict(self.weights)

    @property
    def param_count(self) -> int:
        return sum(w.size for w in self.weights.values())

    def forward(self, x: Tensor, weight_transform: str = "identity", capture: Optional[dict] = None) -> Tensor:
        _check_input(self.space, x)
        weights = _WeightView(self.weights, weight_transform)
        edge_terms = {
            e.index: ([(o, None)] if op_kind(self.space.ops[o]).has_signal else [])
            for e, o in zip(self.space.edges, self._choice)
        }
        return _run_cell(self.space, x, weights, edge_terms, capture)
