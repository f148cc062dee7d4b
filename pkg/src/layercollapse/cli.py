"""Command-line surface.

Five subcommands: ``gen-toy`` writes a seeded random checkpoint, ``compress``
runs the single-objective search at an exact ratio target, ``pareto`` runs
NSGA-II over the fitness/ratio trade-off, ``apply`` materializes a saved plan,
and ``eval`` compares two checkpoints on a calibration set.

Every command accepts ``--config FILE`` pointing at a JSON document of
defaults; explicit flags override file values, and unset values fall back to
the built-in defaults. All artifacts land under ``--out-dir``: plans and
reports as JSON, run history as JSON lines, Pareto fronts as CSV, checkpoints
as manifest-plus-binary directories. Runs are deterministic given the same
configuration and seed, for any worker count.

Failures exit nonzero after printing a single ``error-class: message`` line
to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .collapse import (
    apply_plan,
    canonical_key,
    load_plan,
    save_plan,
    similarity_map,
)
from .errors import EngineError, InvalidTargetError, PlanMismatchError
from .evolve import GAConfig, MOConfig, run_ga, run_nsga2
from .fitness import (
    FitnessCache,
    FitnessKind,
    dataset_perplexity,
    load_calibration,
    mean_kl,
    module_similarity,
)
from .model import ModelConfig, forward, init_random

logger = logging.getLogger(__name__)

_KINDS = {
    "similarity": FitnessKind.MODULE_SIMILARITY,
    "kl": FitnessKind.NEG_KL_DIVERGENCE,
    "perplexity": FitnessKind.NEG_PERPLEXITY,
}

_GEN_TOY_DEFAULTS: dict = {
    "layers": 8,
    "d_model": 64,
    "n_heads": 4,
    "d_ff": 128,
    "max_seq_len": 64,
    "rope_theta": 10000.0,
    "rms_eps": 1e-5,
    "seed": 0,
}

_SEARCH_COMMON_DEFAULTS: dict = {
    "fitness": "similarity",
    "crossover_prob": 0.9,
    "crossover_eta": 20.0,
    "mutation_prob": None,
    "mutation_eta": 20.0,
    "n_calibration": 64,
    "calib_max_len": 32,
    "seed": 0,
    "workers": 1,
    "repeats": 1,
}

_COMPRESS_DEFAULTS: dict = {
    **_SEARCH_COMMON_DEFAULTS,
    "population": 100,
    "budget": 10000,
    "repair_trials": 100,
}

_PARETO_DEFAULTS: dict = {
    **_SEARCH_COMMON_DEFAULTS,
    "population": 200,
    "budget": 30000,
}

_EVAL_DEFAULTS: dict = {
    "kinds": ["similarity", "kl", "perplexity"],
    "plan": None,
    "n_calibration": 64,
    "calib_max_len": 32,
    "seed": 0,
}

_INT_KEYS = {
    "layers",
    "d_model",
    "n_heads",
    "d_ff",
    "max_seq_len",
    "seed",
    "population",
    "budget",
    "repair_trials",
    "workers",
    "repeats",
    "n_calibration",
    "calib_max_len",
}


class _ConfigError(EngineError):
    error_class = "invalid-config"


def _resolve(args: argparse.Namespace, defaults: dict, required: tuple[str, ...]) -> dict:
    """Layer built-in defaults, config-file values, then explicit flags."""
    resolved = dict(defaults)
    for key in required:
        resolved.setdefault(key, None)
    known = set(resolved)

    config_path = getattr(args, "config", None)
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise _ConfigError(f"cannot read config file {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise _ConfigError(f"config file {config_path} must hold a JSON object")
        unknown = sorted(set(loaded) - known)
        if unknown:
            raise _ConfigError(f"unknown config keys: {', '.join(unknown)}")
        resolved.update(loaded)

    for key in known:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value

    missing = [key for key in required if resolved.get(key) is None]
    if missing:
        raise _ConfigError(f"missing required settings: {', '.join(sorted(missing))}")

    for key in _INT_KEYS & set(resolved):
        if resolved[key] is not None:
            resolved[key] = int(resolved[key])
    return resolved


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_history(path: Path, history: list[dict]) -> None:
    lines = [json.dumps(record, sort_keys=True) for record in history]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fitness_kind(name: str) -> FitnessKind:
    if name not in _KINDS:
        raise _ConfigError(f"unknown fitness kind {name!r}; expected one of {sorted(_KINDS)}")
    return _KINDS[name]


def cmd_gen_toy(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _GEN_TOY_DEFAULTS, required=("out_dir",))
    model_config = ModelConfig(
        n_layers=cfg["layers"],
        d_model=cfg["d_model"],
        n_heads=cfg["n_heads"],
        d_ff=cfg["d_ff"],
        max_seq_len=cfg["max_seq_len"],
        rope_theta=float(cfg["rope_theta"]),
        rms_eps=float(cfg["rms_eps"]),
    )
    model = init_random(model_config, cfg["seed"])
    out_dir = Path(cfg["out_dir"])
    save_checkpoint(model, out_dir)
    print(f"wrote {model_config.n_layers}-layer toy checkpoint to {out_dir}")
    return 0


def _search_setup(cfg: dict) -> tuple:
    model = load_checkpoint(cfg["checkpoint"])
    kind = _fitness_kind(cfg["fitness"])
    return model, kind


def _echo_config(cfg: dict, resolved_mutation_prob: float) -> dict:
    echo = {k: v for k, v in cfg.items()}
    echo["mutation_prob"] = resolved_mutation_prob
    return echo


def cmd_compress(args: argparse.Namespace) -> int:
    cfg = _resolve(
        args,
        _COMPRESS_DEFAULTS,
        required=("checkpoint", "calibration", "target_ratio", "out_dir"),
    )
    cfg["target_ratio"] = float(cfg["target_ratio"])
    model, kind = _search_setup(cfg)
    n_layers = model.config.n_layers
    target_removed = int(np.rint(cfg["target_ratio"] * n_layers))
    if not (1 <= target_removed <= n_layers - 2):
        raise InvalidTargetError(
            f"target ratio {cfg['target_ratio']} rounds to {target_removed} removed "
            f"layers on a {n_layers}-layer model; usable targets remove 1.."
            f"{n_layers - 2} layers"
        )
    mutation_prob = (
        cfg["mutation_prob"] if cfg["mutation_prob"] is not None else 1.0 / (3 * n_layers)
    )
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    runs = []
    for r in range(cfg["repeats"]):
        run_seed = cfg["seed"] + r
        run_dir = out_dir if cfg["repeats"] == 1 else out_dir / f"repeat-{r:02d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        calibration = load_calibration(
            cfg["calibration"], cfg["n_calibration"], cfg["calib_max_len"], run_seed
        )
        cache = FitnessCache()
        ga_config = GAConfig(
            target_ratio=cfg["target_ratio"],
            population=cfg["population"],
            max_evaluations=cfg["budget"],
            crossover_prob=float(cfg["crossover_prob"]),
            crossover_eta=float(cfg["crossover_eta"]),
            mutation_prob=float(mutation_prob),
            mutation_eta=float(cfg["mutation_eta"]),
            repair_trials=cfg["repair_trials"],
            seed=run_seed,
        )
        best, history = run_ga(
            model, calibration, kind, ga_config, cache=cache, workers=cfg["workers"]
        )
        compressed = apply_plan(model, best.plan)
        save_checkpoint(compressed, run_dir / "compressed")
        save_plan(best.plan, run_dir / "plan.json")
        _write_history(run_dir / "history.jsonl", history)
        rel = "" if cfg["repeats"] == 1 else f"repeat-{r:02d}/"
        runs.append(
            {
                "seed": run_seed,
                "best_fitness": best.fitness,
                "ratio": best.plan.removed_count / n_layers,
                "removed_layers": best.plan.removed_count,
                "canonical_key": best.key,
                "cache": cache.snapshot(),
                "artifacts": {
                    "plan": f"{rel}plan.json",
                    "checkpoint": f"{rel}compressed",
                    "history": f"{rel}history.jsonl",
                },
            }
        )

    winner = max(runs, key=lambda run: (run["best_fitness"], -run["seed"]))
    report = {
        "command": "compress",
        "config": _echo_config(cfg, mutation_prob),
        "best": {
            "fitness": winner["best_fitness"],
            "ratio": winner["ratio"],
            "removed_layers": winner["removed_layers"],
            "canonical_key": winner["canonical_key"],
            "seed": winner["seed"],
        },
        "runs": runs,
        "timing": {"total_seconds": time.perf_counter() - started},
    }
    if cfg["repeats"] > 1:
        scores = [run["best_fitness"] for run in runs]
        report["aggregate"] = {
            "best_fitness_mean": float(np.mean(scores)),
            "best_fitness_stddev": float(np.std(scores, ddof=1)),
        }
    _write_json(out_dir / "report.json", report)
    print(
        f"best fitness {winner['best_fitness']:.6f} at ratio {winner['ratio']} "
        f"({winner['canonical_key']})"
    )
    return 0


def cmd_pareto(args: argparse.Namespace) -> int:
    cfg = _resolve(
        args, _PARETO_DEFAULTS, required=("checkpoint", "calibration", "out_dir")
    )
    model, kind = _search_setup(cfg)
    n_layers = model.config.n_layers
    mutation_prob = (
        cfg["mutation_prob"] if cfg["mutation_prob"] is not None else 1.0 / (3 * n_layers)
    )
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    runs = []
    for r in range(cfg["repeats"]):
        run_seed = cfg["seed"] + r
        run_dir = out_dir if cfg["repeats"] == 1 else out_dir / f"repeat-{r:02d}"
        plans_dir = run_dir / "plans"
        plans_dir.mkdir(parents=True, exist_ok=True)
        calibration = load_calibration(
            cfg["calibration"], cfg["n_calibration"], cfg["calib_max_len"], run_seed
        )
        cache = FitnessCache()
        mo_config = MOConfig(
            population=cfg["population"],
            max_evaluations=cfg["budget"],
            crossover_prob=float(cfg["crossover_prob"]),
            crossover_eta=float(cfg["crossover_eta"]),
            mutation_prob=float(mutation_prob),
            mutation_eta=float(cfg["mutation_eta"]),
            seed=run_seed,
        )
        front, history = run_nsga2(
            model, calibration, kind, mo_config, cache=cache, workers=cfg["workers"]
        )

        rows = []
        for i, entry in enumerate(front):
            plan_file = f"plans/plan-{i:03d}.json"
            save_plan(entry.plan, run_dir / plan_file)
            rows.append(
                {
                    "ratio": entry.ratio,
                    "fitness": entry.fitness,
                    "removed_layers": entry.plan.removed_count,
                    "canonical_key": canonical_key(entry.plan),
                    "plan_file": plan_file,
                }
            )
        csv_lines = ["ratio,fitness,removed_layers,canonical_key,plan_file"]
        for row in rows:
            csv_lines.append(
                f"{row['ratio']!r},{row['fitness']!r},{row['removed_layers']},"
                f"{row['canonical_key']},{row['plan_file']}"
            )
        (run_dir / "front.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
        _write_history(run_dir / "history.jsonl", history)
        rel = "" if cfg["repeats"] == 1 else f"repeat-{r:02d}/"
        runs.append(
            {
                "seed": run_seed,
                "front_size": len(front),
                "best_fitness": max(e.fitness for e in front),
                "front": rows,
                "cache": cache.snapshot(),
                "artifacts": {
                    "front": f"{rel}front.csv",
                    "history": f"{rel}history.jsonl",
                    "plans": f"{rel}plans",
                },
            }
        )

    report = {
        "command": "pareto",
        "config": _echo_config(cfg, mutation_prob),
        "runs": runs,
        "timing": {"total_seconds": time.perf_counter() - started},
    }
    if cfg["repeats"] > 1:
        sizes = [run["front_size"] for run in runs]
        scores = [run["best_fitness"] for run in runs]
        report["aggregate"] = {
            "front_size_mean": float(np.mean(sizes)),
            "front_size_stddev": float(np.std(sizes, ddof=1)),
            "best_fitness_mean": float(np.mean(scores)),
            "best_fitness_stddev": float(np.std(scores, ddof=1)),
        }
    _write_json(out_dir / "report.json", report)
    first = runs[0]
    ratios = [row["ratio"] for row in first["front"]]
    print(
        f"front of {first['front_size']} plans spanning ratios "
        f"{min(ratios)}..{max(ratios)}"
    )
    return 0


def cmd_apply(args: argparse.Namespace) -> int:
    cfg = _resolve(args, {}, required=("checkpoint", "plan", "out_dir"))
    model = load_checkpoint(cfg["checkpoint"])
    plan = load_plan(cfg["plan"])
    if plan.original_layer_count != model.config.n_layers:
        raise PlanMismatchError(
            f"plan covers {plan.original_layer_count} layers, checkpoint has "
            f"{model.config.n_layers}"
        )
    compressed = apply_plan(model, plan)
    out_dir = Path(cfg["out_dir"])
    save_checkpoint(compressed, out_dir)
    ratio = plan.removed_count / model.config.n_layers
    print(
        f"layers: {model.config.n_layers} -> {compressed.config.n_layers} "
        f"(ratio {ratio})"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve(
        args,
        _EVAL_DEFAULTS,
        required=("checkpoint_a", "checkpoint_b", "calibration", "out_dir"),
    )
    if not isinstance(cfg["kinds"], list) or not cfg["kinds"]:
        raise _ConfigError("kinds must be a non-empty list of metric names")
    for name in cfg["kinds"]:
        _fitness_kind(name)
    model_a = load_checkpoint(cfg["checkpoint_a"])
    model_b = load_checkpoint(cfg["checkpoint_b"])
    if model_a.config.vocab_size != model_b.config.vocab_size:
        raise PlanMismatchError(
            f"models have different vocabularies "
            f"({model_a.config.vocab_size} vs {model_b.config.vocab_size})"
        )

    want_similarity = "similarity" in cfg["kinds"]
    plan = None
    layer_map: list[int] | None = None
    if cfg.get("plan") is not None:
        plan = load_plan(cfg["plan"])
        if plan.original_layer_count != model_a.config.n_layers:
            raise PlanMismatchError(
                f"plan covers {plan.original_layer_count} layers, checkpoint A has "
                f"{model_a.config.n_layers}"
            )
        if plan.final_layer_count != model_b.config.n_layers:
            raise PlanMismatchError(
                f"plan compresses to {plan.final_layer_count} layers, checkpoint B "
                f"has {model_b.config.n_layers}"
            )
        layer_map = similarity_map(plan, model_a.config.n_layers)
    elif model_a.config.n_layers == model_b.config.n_layers:
        layer_map = list(range(model_a.config.n_layers))
    elif want_similarity:
        raise PlanMismatchError(
            f"models have {model_a.config.n_layers} and {model_b.config.n_layers} "
            f"layers; similarity needs a plan file to map them"
        )
    if want_similarity and model_a.config.d_model != model_b.config.d_model:
        raise PlanMismatchError(
            f"models have different widths ({model_a.config.d_model} vs "
            f"{model_b.config.d_model}); similarity is undefined"
        )

    calibration = load_calibration(
        cfg["calibration"], cfg["n_calibration"], cfg["calib_max_len"], cfg["seed"]
    )
    started = time.perf_counter()
    metrics: dict = {}
    kind_seconds: dict[str, float] = {}

    if want_similarity:
        assert layer_map is not None
        kind_started = time.perf_counter()
        attn = ffn = hidden = overall = 0.0
        for seq in calibration.sequences:
            _, trace_a = forward(model_a, seq, capture=True)
            _, trace_b = forward(model_b, seq, capture=True)
            breakdown = module_similarity(trace_a, trace_b, layer_map)
            attn += breakdown.attention
            ffn += breakdown.ffn
            hidden += breakdown.hidden
            overall += breakdown.overall
        n = len(calibration)
        metrics["similarity"] = {
            "attention": attn / n,
            "ffn": ffn / n,
            "hidden": hidden / n,
            "overall": overall / n,
        }
        kind_seconds["similarity"] = time.perf_counter() - kind_started
    if "kl" in cfg["kinds"]:
        kind_started = time.perf_counter()
        total = 0.0
        for seq in calibration.sequences:
            logits_a, _ = forward(model_a, seq)
            logits_b, _ = forward(model_b, seq)
            total += mean_kl(logits_a, logits_b)
        metrics["kl_divergence"] = total / len(calibration)
        kind_seconds["kl"] = time.perf_counter() - kind_started
    if "perplexity" in cfg["kinds"]:
        kind_started = time.perf_counter()
        metrics["perplexity_a"] = dataset_perplexity(model_a, calibration)
        metrics["perplexity_b"] = dataset_perplexity(model_b, calibration)
        kind_seconds["perplexity"] = time.perf_counter() - kind_started

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "command": "eval",
        "config": dict(cfg),
        "metrics": metrics,
        "timing": {
            "total_seconds": time.perf_counter() - started,
            "per_kind_seconds": kind_seconds,
        },
    }
    _write_json(out_dir / "report.json", report)

    if "similarity" in metrics:
        s = metrics["similarity"]
        print(
            f"similarity overall {s['overall']:.6f} (attention {s['attention']:.6f}, "
            f"ffn {s['ffn']:.6f}, hidden {s['hidden']:.6f})"
        )
    if "kl_divergence" in metrics:
        print(f"kl divergence {metrics['kl_divergence']:.6f}")
    if "perplexity_a" in metrics:
        print(
            f"perplexity a={metrics['perplexity_a']:.4f} "
            f"b={metrics['perplexity_b']:.4f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layercollapse",
        description="Evolutionary layer-merge compression for byte-level transformers.",
    )
    sub = parser.add_subparsers(dest="command")

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON file of settings; flags override it")
        p.add_argument("--out-dir", dest="out_dir", help="directory for all outputs")
        p.add_argument("--seed", type=int, dest="seed")

    p = sub.add_parser("gen-toy", help="write a seeded random toy checkpoint")
    add_common(p)
    p.add_argument("--layers", type=int, dest="layers")
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--n-heads", type=int, dest="n_heads")
    p.add_argument("--d-ff", type=int, dest="d_ff")
    p.add_argument("--max-seq-len", type=int, dest="max_seq_len")
    p.add_argument("--rope-theta", type=float, dest="rope_theta")
    p.add_argument("--rms-eps", type=float, dest="rms_eps")
    p.set_defaults(func=cmd_gen_toy)

    def add_search(p: argparse.ArgumentParser) -> None:
        p.add_argument("--checkpoint", help="base model checkpoint directory")
        p.add_argument("--calibration", help="UTF-8 text file, one sentence per line")
        p.add_argument("--fitness", choices=sorted(_KINDS), dest="fitness")
        p.add_argument("--population", type=int, dest="population")
        p.add_argument("--budget", type=int, dest="budget",
                       help="maximum fitness evaluations (cache hits included)")
        p.add_argument("--crossover-prob", type=float, dest="crossover_prob")
        p.add_argument("--crossover-eta", type=float, dest="crossover_eta")
        p.add_argument("--mutation-prob", type=float, dest="mutation_prob")
        p.add_argument("--mutation-eta", type=float, dest="mutation_eta")
        p.add_argument("--n-calibration", type=int, dest="n_calibration")
        p.add_argument("--calib-max-len", type=int, dest="calib_max_len")
        p.add_argument("--workers", type=int, dest="workers")
        p.add_argument("--repeats", type=int, dest="repeats",
                       help="independent runs at seed, seed+1, ...")

    p = sub.add_parser("compress", help="search for the best plan at one exact ratio")
    add_common(p)
    add_search(p)
    p.add_argument("--target-ratio", type=float, dest="target_ratio")
    p.add_argument("--repair-trials", type=int, dest="repair_trials")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("pareto", help="trace the fitness/compression trade-off front")
    add_common(p)
    add_search(p)
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("apply", help="apply a saved plan to a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", help="base model checkpoint directory")
    p.add_argument("--plan", help="plan JSON file")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("eval", help="compare two checkpoints on a calibration set")
    add_common(p)
    p.add_argument("--checkpoint-a", dest="checkpoint_a", help="reference checkpoint")
    p.add_argument("--checkpoint-b", dest="checkpoint_b", help="candidate checkpoint")
    p.add_argument("--calibration", help="UTF-8 text file, one sentence per line")
    p.add_argument("--plan", help="plan mapping A's layers onto B's")
    p.add_argument("--kinds", nargs="+", choices=sorted(_KINDS), dest="kinds")
    p.add_argument("--n-calibration", type=int, dest="n_calibration")
    p.add_argument("--calib-max-len", type=int, dest="calib_max_len")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except EngineError as exc:
        print(f"{exc.error_class}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"invalid-config: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
