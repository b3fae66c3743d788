"""Finite-width neural tangent kernels and the checks built on them.

Every kernel here is computed exactly from per-sample Jacobians of a scalar
output f(x) (the sum of a network's logits):

    Theta[i, j] = <df(x_i)/dtheta_S, df(x_j)/dtheta_S>

over a chosen parameter subset S. The trace norm is sqrt(tr(Theta) / n).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from scripts.datasets import random_labels
from scripts.errors import BudgetError, ConfigError
from scripts.scoring import (
    CorrelationEntry,
    CorrelationReport,
    MIN_CORRELATION_SAMPLES,
    proxy_score,
    rank_correlation,
    zeros_scores,
    zeros_scores_data_agnostic,
    zeros_scores_label_agnostic,
)
from scripts.spaces import Network, Supernet, ones_input
from scripts.tensor import Tape, Tensor, absolute, cross_entropy, identity, matmul, relu, sum_reduce

logger = logging.getLogger(__name__)

# --- CONFIGURATION ---
DEFAULT_MEMORY_BUDGET = 1 << 25  # Jacobian entries (n * |S|)
ELIDE_ABOVE = 64
BOUND_RTOL = 1e-10

ParamSubset = Union[str, Tuple[int, int], Sequence[str]]


def trace_norm(theta: np.ndarray) -> float:
    return float(np.sqrt(max(np.trace(theta), 0.0) / theta.shape[0]))


@dataclass
class NtkReport:
    theta: np.ndarray
    eigenvalues: List[float]
    trace_norm: float
    per_block: Dict[str, float] = field(default_factory=dict)
    residuals: Dict[str, float] = field(default_factory=dict)
    output: str = "sum_of_logits"

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    def to_json(self, elide_above: int = ELIDE_ABOVE) -> dict:
        return {
            "n": self.n,
            "output": self.output,
            "trace_norm": self.trace_norm,
            "eigenvalues": self.eigenvalues,
            "per_block": self.per_block,
            "residuals": self.residuals,
            "theta": None if self.n > elide_above else self.theta.tolist(),
        }


# --- NETWORKS ---

class MLP:
    """Plain fully connected network x -> act(x W_0) -> ... -> h W_L."""

    def __init__(self, weights: List[Tensor], activation: str = "relu"):
        if activation not in ("relu", "linear"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.weights = weights
        self.activation = activation

    @classmethod
    def initialize(cls, widths: Sequence[int], seed: int, activation: str = "relu",
                   readout_variance: Optional[float] = None) -> "MLP":
        """Hidden layers N(0, 2 / fan_in); readout N(0, readout_variance or 1 / fan_in)."""
        rng = np.random.default_rng(np.random.SeedSequence(seed % (1 << 64)))
        weights = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            var = (readout_variance or 1.0 / fan_in) if last else 2.0 / fan_in
            weights.append(Tensor(rng.normal(0.0, np.sqrt(var), size=(fan_in, fan_out)),
                                  requires_grad=True, name=f"layer{i}"))
        return cls(weights, activation)

    @property
    def widths(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def narrowed(self, keep: int) -> "MLP":
        """Same draws with the last hidden layer cut to its first ``keep`` units."""
        if len(self.weights) < 2 or not 1 <= keep <= self.weights[-1].shape[0]:
            raise ConfigError(f"cannot keep {keep} units of the last hidden layer")
        weights = [Tensor(w.data.copy(), requires_grad=True, name=w.name) for w in self.weights[:-2]]
        incoming, readout = self.weights[-2], self.weights[-1]
        weights.append(Tensor(np.ascontiguousarray(incoming.data[:, :keep]), requires_grad=True, name=incoming.name))
        weights.append(Tensor(np.ascontiguousarray(readout.data[:keep, :]), requires_grad=True, name=readout.name))
        return MLP(weights, self.activation)

    def weight_blocks(self) -> Dict[str, Tensor]:
        return {f"layer{i}": w for i, w in enumerate(self.weights)}

    def input_shape(self, batch: int) -> Tuple[int, ...]:
        return (batch, self.weights[0].shape[0])

    def forward(self, x: Tensor, weight_transform: str = "identity") -> Tensor:
        act = relu if self.activation == "relu" else identity
        h = x
        for i, w in enumerate(self.weights):
            if weight_transform == "absolute":
                w = absolute(w)
            h = matmul(h, w)
            if i < len(self.weights) - 1:
                h = act(h)
        return h


# --- KERNELS ---

def _resolve_subset(net: Network, param_subset: ParamSubset) -> Dict[str, Tensor]:
    blocks = net.weight_blocks()
    if isinstance(param_subset, str):
        if param_subset == "all":
            return blocks
        keys = [param_subset]
    elif isinstance(param_subset, tuple) and len(param_subset) == 2 and all(isinstance(v, int) for v in param_subset):
        keys = [net.block_key(*param_subset)]
    else:
        keys = list(param_subset)
    missing = [k for k in keys if k not in blocks]
    if missing:
        raise ConfigError(f"no parameter block(s) {missing}; available: {sorted(blocks)}")
    return {k: blocks[k] for k in keys}


def sample_jacobian(net: Network, x: Tensor, params: Dict[str, Tensor],
                    memory_budget: int = DEFAULT_MEMORY_BUDGET, **forward_kwargs) -> Dict[str, np.ndarray]:
    """Per-block Jacobians (n, |block|) of f(x_i) = sum of the logits of sample i."""
    n = x.shape[0]
    width = sum(p.size for p in params.values())
    if n * width > memory_budget:
        raise BudgetError(
            f"Jacobian needs {n} x {width} = {n * width} entries, budget is {memory_budget}; use a smaller batch"
        )
    with Tape() as tape:
        out = net.forward(x, **forward_kwargs)
        f = sum_reduce(out, axis=tuple(range(1, out.data.ndim))) if out.data.ndim > 1 else out
        leaves = list(params.values())
        rows = tape.jacobian(f, leaves)
    blocks, start = {}, 0
    for key, p in params.items():
        blocks[key] = rows[:, start:start + p.size]
        start += p.size
    return blocks


def ntk_matrix(net: Network, x: Tensor, param_subset: ParamSubset = "all",
               memory_budget: int = DEFAULT_MEMORY_BUDGET, **forward_kwargs) -> NtkReport:
    params = _resolve_subset(net, param_subset)
    blocks = sample_jacobian(net, x, params, memory_budget, **forward_kwargs)
    n = x.shape[0]
    jac = np.concatenate(list(blocks.values()), axis=1)
    raw = jac @ jac.T
    theta = 0.5 * (raw + raw.T)
    eigenvalues = np.linalg.eigvalsh(theta)

    block_sum = np.zeros_like(theta)
    per_block = {}
    for key, j in blocks.items():
        block_sum += j @ j.T
        per_block[key] = float(np.sqrt((j ** 2).sum() / n))
    scale = max(np.linalg.norm(theta), np.finfo(float).tiny)
    tr = max(np.trace(theta), np.finfo(float).tiny)
    residuals = {
        "asymmetry": float(np.abs(raw - raw.T).max()),
        "block_additivity": float(np.linalg.norm(theta - block_sum) / scale),
        "min_eigenvalue_ratio": float(eigenvalues[0] / tr),
    }
    return NtkReport(theta=theta, eigenvalues=[float(v) for v in eigenvalues],
                     trace_norm=trace_norm(theta), per_block=per_block, residuals=residuals)


# --- WIDTH SCALING ---

@dataclass
class WidthScalingResult:
    base_width: int
    rho: float
    depth: int
    ratios: List[float]
    kept: int

    @property
    def effective_rho(self) -> float:
        return self.kept / self.base_width

    @property
    def mean(self) -> float:
        return float(np.mean(self.ratios))

    @property
    def std(self) -> float:
        return float(np.std(self.ratios))

    @property
    def expected(self) -> float:
        return float(np.sqrt(self.effective_rho))

    def within(self, rel: float) -> bool:
        return abs(self.mean - self.expected) <= rel * self.expected

    def to_json(self) -> dict:
        return {
            "base_width": self.base_width,
            "rho": self.rho,
            "kept": self.kept,
            "effective_rho": self.effective_rho,
            "depth": self.depth,
            "expected": self.expected,
            "mean_ratio": self.mean,
            "std_ratio": self.std,
            "ratios": self.ratios,
        }


def check_width_scaling(base_width: int, rho: float, depth: int = 2, seeds: Union[int, Sequence[int]] = 10,
                        input_dim: int = 16, n_samples: int = 8,
                        memory_budget: int = DEFAULT_MEMORY_BUDGET) -> WidthScalingResult:
    """Trace-norm ratio of a net whose last hidden layer keeps rho * m of m units.

    rho * m is rounded to the nearest unit; the result carries the effective
    rho = kept / m and compares against its square root.

    Both nets share every draw and the readout variance 1 / m, and the kernel
    covers the last hidden layer's incoming weights and the readout.
    """
    keep = int(round(rho * base_width))
    if not 0 < rho <= 1 or keep < 1:
        raise ConfigError(f"rho must be in (0, 1] and keep at least one of {base_width} units, got {rho}")
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    if keep != rho * base_width:
        logger.info("rho %.4g * m=%d rounded to %d units (effective rho %.6f)", rho, base_width, keep,
                    keep / base_width)
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    widths = [input_dim] + [base_width] * depth + [1]
    subset = [f"layer{depth - 1}", f"layer{depth}"]

    ratios = []
    for seed in seed_list:
        wide = MLP.initialize(widths, seed, readout_variance=1.0 / base_width)
        narrow = wide.narrowed(keep)
        rng = np.random.default_rng(np.random.SeedSequence([seed % (1 << 32), 1]))
        x = Tensor(rng.standard_normal((n_samples, input_dim)))
        full = ntk_matrix(wide, x, subset, memory_budget).trace_norm
        cut = ntk_matrix(narrow, x, subset, memory_budget).trace_norm
        ratios.append(cut / full)
        logger.info("width scaling seed %d: rho=%.2f ratio=%.4f", seed, rho, ratios[-1])
    return WidthScalingResult(base_width, rho, depth, ratios, keep)


# --- SENSITIVITY BOUND ---

@dataclass
class OpBound:
    edge: int
    op: int
    label: str
    score: float
    alpha: float
    kernel_trace_norm: float
    output_trace_norm: float
    bound: float
    output_bound: float
    violated: bool

    @property
    def slack(self) -> Optional[float]:
        return self.score / self.bound if self.bound > 0 else None

    def to_json(self) -> dict:
        return {
            "edge": self.edge,
            "op": self.op,
            "label": self.label,
            "score": self.score,
            "alpha": self.alpha,
            "kernel_trace_norm": self.kernel_trace_norm,
            "output_trace_norm": self.output_trace_norm,
            "bound": self.bound,
            "output_bound": self.output_bound,
            "slack": self.slack,
            "violated": self.violated,
        }


@dataclass
class SensitivityReport:
    variant: str
    beta: float
    layer_b: Dict[int, float]
    ops: List[OpBound]

    @property
    def violations(self) -> List[OpBound]:
        return [b for b in self.ops if b.violated]

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "beta": self.beta,
            "layer_b": {str(k): v for k, v in self.layer_b.items()},
            "violations": len(self.violations),
            "ops": [b.to_json() for b in self.ops],
        }


def _violates(score: float, bound: float) -> bool:
    return bool(score > bound * (1.0 + BOUND_RTOL) + np.finfo(float).tiny)


def check_sensitivity_bound(net: Supernet, batch: Optional[Tuple[Tensor, np.ndarray]] = None,
                            variant: str = "vanilla", seed: int = 0) -> SensitivityReport:
    """Checks F(alpha_k) <= beta * B * |alpha_k| * M_Trace(Theta_k) for every alive op.

    beta is the largest per-sample ||dl_i/df_i||, B the largest per-sample
    spectral norm of df_i/dh_i with h the op's layer output, and Theta_k the
    kernel of op k's own output against its weights. The tighter
    ``output_bound`` replaces M_Trace(Theta_k) with the root mean squared norm
    of the op output.
    """
    if net.space.kind != "sequential":
        raise ConfigError("the sensitivity bound is checked on sequential supernets")
    if variant == "data_agnostic":
        x, y, transform = ones_input(net.space, 1), None, "absolute"
        table = zeros_scores_data_agnostic(net, seed=seed)
    else:
        if batch is None:
            raise ConfigError(f"variant {variant} needs a batch")
        x, y = batch
        transform = "identity"
        if variant == "vanilla":
            table = zeros_scores(net, (x, y), seed=seed)
        else:
            y = random_labels(x.shape[0], net.space.num_classes, seed, 0)
            table = zeros_scores_label_agnostic(net, x, seed)

    n = x.shape[0]
    with Tape() as tape:
        capture = {}
        out = net.forward(x, weight_transform=transform, capture=capture)
        # per-sample losses are summed for data-agnostic scoring, averaged otherwise
        loss = sum_reduce(out) if y is None else cross_entropy(out, y)
        (g_logits,) = tape.gradients(loss, [out])
        per_sample = g_logits if y is None else g_logits * n
        beta = float(np.linalg.norm(per_sample, axis=1).max())

        layers = [e.index for e in net.space.edges]
        nodes = [capture["node"][e + 1] for e in layers]
        jac = {e: np.zeros((n, out.shape[1], nodes[e].shape[1])) for e in layers}
        for i in range(n):
            for c in range(out.shape[1]):
                seed_vec = np.zeros(out.shape)
                seed_vec[i, c] = 1.0
                for e, g in zip(layers, tape.gradients(out, nodes, seed=seed_vec)):
                    jac[e][i, c] = g[i]
        layer_b = {e: float(max(np.linalg.norm(jac[e][i], 2) for i in range(n))) for e in layers}

        ops = []
        factor = 1.0 if y is not None else float(n)
        for e, o in net.alive_ops():
            h_k = capture["op"][(e, o)]
            kernel = tape.jacobian(h_k, [net.weights[net.block_key(e, o)]])
            m_theta = float(np.sqrt((kernel ** 2).sum() / n))
            m_sigma = float(np.sqrt((h_k.data ** 2).sum() / n))
            alpha = abs(float(net.alphas[e].data[o]))
            bound = factor * beta * layer_b[e] * alpha * m_theta
            output_bound = factor * beta * layer_b[e] * alpha * m_sigma
            score = table[(e, o)]
            ops.append(OpBound(e, o, net.label(e, o), score, alpha, m_theta, m_sigma, bound, output_bound,
                               _violates(score, bound)))
    report = SensitivityReport(variant, beta, layer_b, ops)
    if report.violations:
        logger.warning("%d sensitivity-bound violation(s)", len(report.violations))
    return report


# --- DECOMPOSITION ---

@dataclass
class DecompositionReport:
    residual: float
    activation: str
    per_op: Dict[str, float]

    def to_json(self) -> dict:
        return {"residual": self.residual, "activation": self.activation, "per_op": self.per_op}


def check_supernet_decomposition(net: Supernet, x: Tensor, allow_nonlinear: bool = False) -> DecompositionReport:
    """Frobenius residual of Theta = sum_lk alpha_lk^2 Theta_lk.

    Theta_lk is the kernel of op (l, k)'s weights with alpha_lk set to 1 in
    its own mixing term. Exact only with linear activation.
    """
    if net.space.kind != "sequential":
        raise ConfigError("the decomposition check runs on sequential supernets")
    if net.space.activation != "linear" and not allow_nonlinear:
        raise ConfigError(
            "decomposition is exact only for linear activation; use the block-additivity residual of "
            "ntk_matrix for nonlinear nets or pass allow_nonlinear=True to report the residual"
        )
    full = ntk_matrix(net, x).theta
    total = np.zeros_like(full)
    per_op = {}
    for e, o in net.alive_ops():
        key = net.block_key(e, o)
        theta_lk = ntk_matrix(net, x, key, alpha_override={(e, o): 1.0}).theta
        alpha = float(net.alphas[e].data[o])
        total += alpha ** 2 * theta_lk
        per_op[key] = trace_norm(theta_lk)
    residual = float(np.linalg.norm(full - total) / max(np.linalg.norm(full), np.finfo(float).tiny))
    return DecompositionReport(residual, net.space.activation, per_op)


# --- PROXY VS TRACE ---

def trace_correlation(proxy_values: Dict[str, Sequence[float]], traces: Sequence[float],
                      min_samples: int = MIN_CORRELATION_SAMPLES) -> Tuple[CorrelationReport, Dict[str, Optional[float]]]:
    """Spearman of each proxy against M_Trace and the fitted C = max(M / M_Trace)."""
    traces = np.asarray(traces, dtype=np.float64)
    report, constants = {}, {}
    for proxy, values in proxy_values.items():
        values = np.asarray(values, dtype=np.float64)
        if len(values) < min_samples or len(values) != len(traces):
            raise ConfigError(f"{proxy}: need {min_samples}+ paired samples, got {len(values)}")
        rho, p = rank_correlation(values, traces)
        if rho is None:
            logger.warning("%s: constant proxy values or trace norms, correlation undefined", proxy)
        report[proxy] = CorrelationEntry(n=len(values), spearman=rho, p_value=p, undefined=rho is None)
        positive = traces > 0
        constants[proxy] = float((values[positive] / traces[positive]).max()) if positive.any() else None
    return CorrelationReport(report), constants


def check_proxy_trace_correlation(archs: Sequence[Network], proxies: Sequence[str], x: Tensor,
                                  batch: Optional[Tuple[Tensor, np.ndarray]] = None,
                                  memory_budget: int = DEFAULT_MEMORY_BUDGET):
    """Scores every architecture with each proxy and correlates with its NTK trace norm."""
    traces = [ntk_matrix(arch, x, memory_budget=memory_budget).trace_norm for arch in archs]
    values = {p: [proxy_score(arch, p, batch).value for arch in archs] for p in proxies}
    return trace_correlation(values, traces)
