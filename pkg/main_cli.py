import argparse
import logging
import os
import sys
import time
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv

load_dotenv()

# IMPORTS
from scripts.datasets import SyntheticTask
from scripts.errors import ConfigError, KasautiError, SearchError
from scripts.ntk import check_sensitivity_bound, check_supernet_decomposition, check_width_scaling, ntk_matrix
from scripts.oracle import OracleTable, bias_report, build_oracle, load_evaluator, rank_report
from scripts.reports import artifact_path, write_csv, write_json
from scripts.search import SearchConfig, initial_scores, search_seeds, track_pruning
from scripts.settings import VARIANT_ALIASES, RunConfig, SpaceConfig, config_digest, load_run_config, resolve_out_dir
from scripts.spaces import SequentialSpace, Supernet, build_space
from scripts.tensor import Tensor

# CONFIGURATION
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
DECOMPOSITION_TOL = 1e-10
BOUND_BATCH = 8
BOUND_VARIANTS = ("vanilla", "label_agnostic", "data_agnostic")
RATIO_TOL = 1e-10
SCALING_REL_TOL = 0.1

logger = logging.getLogger("kasauti")


def _seed_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _search_configs(config: RunConfig, alpha_scale: Optional[float] = None) -> List[SearchConfig]:
    a = config.alpha_scale if alpha_scale is None else alpha_scale
    return [SearchConfig(config.variant, config.mode, a, seed, config.search) for seed in config.seeds]


def _evaluator(args):
    path = args.lookup or args.oracle
    return load_evaluator(path) if path else None


# --- COMMANDS ---

def _write_trace(out_dir: str, name: str, seed: int, trace, digest: str) -> str:
    payload = trace.to_json()
    wall = payload.pop("wall_time_ms")
    return write_json(artifact_path(out_dir, name, seed), payload, digest, wall)


def cmd_search(config: RunConfig, out_dir: str, args) -> int:
    digest = config_digest(config)
    configs = _search_configs(config)
    results = search_seeds(config.space, configs, config.workers, keep_going=True)

    genotypes = {}
    status = 0
    for search_config, result in zip(configs, results):
        seed = search_config.seed
        if isinstance(result, SearchError):
            path = _write_trace(out_dir, "trace_partial", seed, result.trace, digest)
            print(f"ERROR: seed {seed}: {result} (partial trace: {path})")
            status = 1
            continue
        genotype, trace = result
        _write_trace(out_dir, "trace", seed, trace, digest)
        if args.save_scores:
            table = initial_scores(build_space(config.space), search_config)
            write_json(artifact_path(out_dir, "scores", seed), table.to_json(), digest)
        genotypes[str(seed)] = genotype.to_string()
        print(genotype.to_string())
        print(f"seed {seed}: {len(trace.steps)} prunes in {trace.wall_time_ms:.1f} ms")
    write_json(artifact_path(out_dir, "genotypes"), {"genotypes": genotypes}, digest)
    return status


def _quality_summary(a: float, qualities: List[float], genotypes: List[str]) -> dict:
    summary = {"alpha_scale": a, "n": len(qualities), "distinct_genotypes": len(set(genotypes)),
               "mean": None, "std": None, "min": None, "max": None}
    if qualities:
        values = np.asarray(qualities, dtype=np.float64)
        summary.update(mean=float(values.mean()), std=float(values.std()), min=float(values.min()),
                       max=float(values.max()))
    return summary


def cmd_sweep_alpha(config: RunConfig, out_dir: str, args) -> int:
    evaluator = _evaluator(args)
    # oracle tables cover the mini space
    space_config = config.mini_space() if args.oracle else config.space
    start = time.perf_counter()
    rows, summary = [], []
    for a in config.a_values:
        qualities, found = [], []
        for (genotype, _), seed in zip(search_seeds(space_config, _search_configs(config, a), config.workers),
                                       config.seeds):
            quality = ""
            if evaluator is not None:
                try:
                    quality = evaluator(genotype)
                    qualities.append(quality)
                except KasautiError as e:
                    logger.warning("no quality for %s: %s", genotype, e)
            found.append(genotype.to_string())
            rows.append([a, seed, genotype.to_string(), quality])
            print(f"a={a:g} seed={seed}: {genotype}")
        summary.append(_quality_summary(a, qualities, found))
    wall = (time.perf_counter() - start) * 1000.0
    digest = config_digest(config)
    path = write_csv(artifact_path(out_dir, "sweep_alpha", ext="csv"), ["alpha_scale", "seed", "genotype", "quality"],
                     rows, digest, wall)
    write_json(artifact_path(out_dir, "sweep_alpha_summary"), {"summary": summary}, digest, wall)
    for row in summary:
        if row["n"]:
            print(f"a={row['alpha_scale']:g}: quality {row['mean']:.4f} +/- {row['std']:.4f} over {row['n']} seeds")
    print(f"wrote {path}")
    return 0


def _bound_space(config: RunConfig) -> SequentialSpace:
    if config.space.space == "sequential":
        return build_space(config.space)
    width = max(8, config.space.width)
    return SequentialSpace(depth=2, branches=3, widths=(width, width, width), activation="relu")


def cmd_ntk_verify(config: RunConfig, out_dir: str, args) -> int:
    ntk = config.ntk
    digest = config_digest(config)
    start = time.perf_counter()
    failures = []

    # 1. Width scaling
    scaling = []
    for rho in ntk.rhos:
        result = check_width_scaling(ntk.base_width, rho, ntk.depth, ntk.seeds, ntk.input_dim, ntk.n_samples,
                                     ntk.memory_budget)
        row = result.to_json()
        row["within_10pct"] = result.within(SCALING_REL_TOL)
        scaling.append(row)
        print(f"rho={result.effective_rho:g}: mean ratio {result.mean:.4f} (sqrt(rho) = {result.expected:.4f})")
        if rho == 1.0 and any(abs(r - 1.0) > RATIO_TOL for r in result.ratios):
            failures.append(f"rho=1 ratio differs from 1: {result.ratios}")

    # 2. Sensitivity bound over random sequential supernets
    space = _bound_space(config)
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((BOUND_BATCH, space.widths[0])))
    y = rng.integers(0, space.num_classes, size=BOUND_BATCH)
    bounds, per_op = {}, {}
    for variant in BOUND_VARIANTS:
        violations, exceeded, worst = 0, 0, 0.0
        per_op[variant] = []
        for i in range(ntk.bound_nets):
            net = Supernet.initialize(space, seed=i, alpha_scale=config.alpha_scale)
            report = check_sensitivity_bound(net, (x, y), variant, seed=i)
            per_op[variant].append(dict(report.to_json(), seed=i))
            if variant == "data_agnostic":
                # |W| forward on all-ones input: only the output-norm form is guaranteed
                violations += sum(b.score > b.output_bound * (1.0 + RATIO_TOL) for b in report.ops)
                exceeded += len(report.violations)
            else:
                violations += len(report.violations)
            worst = max([worst] + [b.slack for b in report.ops if b.slack is not None])
        bounds[variant] = {"nets": ntk.bound_nets, "violations": violations, "kernel_form_exceeded": exceeded,
                           "max_slack": worst}
        print(f"sensitivity bound ({variant}): {violations} violation(s) over {ntk.bound_nets} nets, "
              f"max slack {worst:.3e}")
        if violations:
            failures.append(f"{violations} sensitivity-bound violation(s) for {variant}")
    write_json(artifact_path(out_dir, "sensitivity_report"), {"variants": per_op}, digest)

    # 3. Decomposition (linear) and block additivity (relu)
    linear = SequentialSpace(depth=2, branches=3, widths=space.widths, activation="linear")
    decomposition = check_supernet_decomposition(Supernet.initialize(linear, 0, config.alpha_scale), x)
    additivity = ntk_matrix(Supernet.initialize(space, 0, config.alpha_scale), x).residuals["block_additivity"]
    print(f"decomposition residual {decomposition.residual:.3e}, block additivity residual {additivity:.3e}")
    if decomposition.residual >= DECOMPOSITION_TOL or additivity >= DECOMPOSITION_TOL:
        failures.append("kernel decomposition residual above tolerance")

    payload = {
        "width_scaling": scaling,
        "sensitivity_bound": bounds,
        "decomposition": decomposition.to_json(),
        "block_additivity_residual": additivity,
        "failures": failures,
    }
    path = write_json(artifact_path(out_dir, "ntk_report"), payload, digest, (time.perf_counter() - start) * 1000.0)
    print(f"wrote {path}")
    for failure in failures:
        print(f"ERROR: {failure}")
    return 1 if failures else 0


def cmd_bias_report(config: RunConfig, out_dir: str, args) -> int:
    start = time.perf_counter()
    digest = config_digest(config)
    report = bias_report(build_space(config.space), config.seeds, a=config.alpha_scale,
                         task_config=config.search.task, batch_size=config.search.batch_size, config_digest=digest)
    for method, entry in sorted(report.methods.items()):
        payload = entry.to_json()
        rho = (entry.correlation or {}).get("spearman")
        print(f"{method}: max-param fraction {payload['mean_max_param_fraction']:.2f}, spearman {rho}")
    path = write_json(artifact_path(out_dir, "bias_report"), report.to_json(), digest,
                      (time.perf_counter() - start) * 1000.0)
    print(f"wrote {path}")
    return 0


def _mini_task(config: RunConfig, mini: SpaceConfig) -> SyntheticTask:
    return SyntheticTask.from_config(config.search.task, input_shape=(mini.input_channels, mini.input_hw, mini.input_hw),
                                     num_classes=mini.num_classes)


def cmd_oracle(config: RunConfig, out_dir: str, args) -> int:
    start = time.perf_counter()
    digest = config_digest(config)
    mini = config.mini_space()
    space = build_space(mini)
    if args.oracle:
        oracle = OracleTable.load(args.oracle)
    else:
        oracle = build_oracle(space, _mini_task(config, mini), config.oracle.epochs, config.oracle.lr,
                              config.oracle.train_seeds, config.workers, config.oracle.batch_size,
                              config.oracle.cap, digest)
        write_json(artifact_path(out_dir, "oracle"), oracle.to_json(), digest, (time.perf_counter() - start) * 1000.0)

    found = [genotype for genotype, _ in search_seeds(mini, _search_configs(config), config.workers)]
    report = rank_report(found, oracle, config.oracle.trials)
    write_json(artifact_path(out_dir, "rank_report"), report.to_json(), digest, (time.perf_counter() - start) * 1000.0)
    print(f"search median percentile {report.median:.1f} vs random {report.random_median:.1f}")
    return 0


def cmd_track(config: RunConfig, out_dir: str, args) -> int:
    evaluator = _evaluator(args)
    if evaluator is None:
        raise ConfigError("track needs an evaluator: pass --lookup PATH or --oracle PATH")
    # oracle tables cover the mini space
    space = build_space(config.mini_space() if args.oracle else config.space)
    digest = config_digest(config)
    status = 0
    for seed in config.seeds:
        trajectory = track_pruning(space, seed, config.variant, evaluator, config.alpha_scale, config.search)
        payload = trajectory.to_json()
        write_json(artifact_path(out_dir, "trajectory", seed), payload, digest, trajectory.trace.wall_time_ms)
        values = ", ".join(f"{v:.3f}" for v in trajectory.values)
        print(f"seed {seed}: [{values}]")
        if trajectory.error:
            print(f"ERROR: {trajectory.error}")
            status = 1
    return status


COMMANDS = {
    "search": cmd_search,
    "sweep-alpha": cmd_sweep_alpha,
    "ntk-verify": cmd_ntk_verify,
    "bias-report": cmd_bias_report,
    "oracle": cmd_oracle,
    "track": cmd_track,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: Data/default_config.json)")
    common.add_argument("--seed", type=_seed_list, help="seed or comma-separated seeds")
    common.add_argument("--variant", choices=sorted(VARIANT_ALIASES), help="ZEROS variant")
    common.add_argument("--mode", choices=["iterative", "oneshot"])
    common.add_argument("--alpha-scale", type=float, help="alpha initialization scale a")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--lookup", help="JSON lookup file {genotype: quality} used as evaluator")
    common.add_argument("--oracle", help="reuse a built oracle table")
    common.add_argument("--trials", type=int, help="random-baseline draws")
    common.add_argument("--epochs", type=int, help="oracle training epochs")
    common.add_argument("--a-values", type=_float_list, help="comma-separated alpha scales for sweep-alpha")
    common.add_argument("--save-scores", action="store_true", help="write the first-round ZEROS table per seed")
    common.add_argument("--out", help="output directory (overrides KASAUTI_OUT_DIR)")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="kasauti", description="Training-free architecture search with ZEROS.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _overrides(args) -> dict:
    return {
        "seeds": args.seed,
        "variant": VARIANT_ALIASES[args.variant] if args.variant else None,
        "mode": args.mode,
        "alpha_scale": args.alpha_scale,
        "workers": args.workers,
        "oracle.trials": args.trials,
        "oracle.epochs": args.epochs,
        "a_values": args.a_values,
    }


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT, stream=sys.stderr)
    try:
        config = load_run_config(args.config, _overrides(args))
        out_dir = resolve_out_dir(args.out, config)
        os.makedirs(out_dir, exist_ok=True)
        return COMMANDS[args.command](config, out_dir, args)
    except KasautiError as e:
        print(f"ERROR: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
