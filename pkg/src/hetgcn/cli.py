"""Command-line entry point: generate, build-graph, train, predict, evaluate, ensemble.

Exit status is 0 on success, 2 when inputs or configuration fail
validation, and 1 for any other runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .decoder import PredictionSet
from .graph import GraphConfigError, assemble_dynamic_graph, graph_to_dict
from .metrics import ensemble, evaluate
from .optim import CheckpointError
from .scenario import (
    LAYOUTS,
    ScenarioError,
    SyntheticSpec,
    generate_synthetic_scenario,
    load_scenario,
    normalize_scenario,
    save_scenario,
)
from .training import (
    ConfigError,
    RunConfig,
    load_model,
    predict_scenarios,
    read_config_file,
    single_threaded,
    train,
)

log = logging.getLogger("hetgcn")

VALIDATION_ERRORS = (ConfigError, ScenarioError, GraphConfigError, CheckpointError, FileNotFoundError)


class InputError(ValueError):
    """A command-line input is missing or inconsistent."""


# ---------------------------------------------------------------------------- helpers


def scenario_paths(inputs) -> list[Path]:
    """Expand files and directories (``*.json`` inside, sorted) into scenario paths."""
    out = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            out.extend(sorted(p.glob("*.json")))
        elif p.is_file():
            out.append(p)
        else:
            raise InputError(f"no such file or directory: {item}")
    if not out:
        raise InputError("no scenario files given")
    return out


def load_scenarios(inputs, tau=None):
    return [load_scenario(p, tau) for p in scenario_paths(inputs)]


def run_config(args) -> RunConfig:
    """Config file values overridden by any explicitly given flag."""
    values = read_config_file(args.config) if args.config else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig.from_dict(values)


def write_predictions(preds, path: Path) -> Path:
    with open(path, "w") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")
    return path


def read_predictions(path) -> list[PredictionSet]:
    out = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    out.append(PredictionSet.from_dict(json.loads(line)))
    except FileNotFoundError:
        raise InputError(f"no such prediction file: {path}") from None
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise InputError(f"{path}:{lineno}: malformed prediction ({exc})") from None
    return out


def out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------- commands


def cmd_generate(args) -> None:
    layouts = args.layouts.split(",")
    for name in layouts:
        if name not in LAYOUTS:
            raise InputError(f"unknown layout {name!r}; expected one of {LAYOUTS}")
    if args.n_scenarios < 1:
        raise InputError("--n-scenarios must be >= 1")
    dest = out_dir(args)
    seed = args.seed or 0
    for i in range(args.n_scenarios):
        spec = SyntheticSpec(layouts[i % len(layouts)], args.n_agents, args.noise,
                             args.t_hist, args.t_future)
        s = generate_synthetic_scenario(seed + i, spec)
        save_scenario(s, dest / f"scenario_{i:04d}.json")
    log.info("wrote %d scenarios to %s", args.n_scenarios, dest)


def cmd_build_graph(args) -> None:
    cfg = run_config(args)
    dest = out_dir(args)
    for s in load_scenarios(args.scenarios, cfg.tau):
        g = assemble_dynamic_graph(normalize_scenario(s), cfg.graph())
        (dest / f"{s.scenario_id}.graph.json").write_text(json.dumps(graph_to_dict(g)) + "\n")


def cmd_train(args) -> None:
    cfg = run_config(args)
    scenarios = load_scenarios(args.scenarios, cfg.tau)
    dest = out_dir(args)
    result = train(scenarios, cfg, dest, deterministic=args.deterministic)
    final = result.history[-1]["train_metrics"]
    print(json.dumps(final, sort_keys=True))
    if not args.no_plots:
        from .plotting import plot_loss_curve
        plot_loss_curve(result.history, dest / "loss_curve.png")


def cmd_predict(args) -> None:
    model, cfg = load_model(args.checkpoint)
    scenarios = load_scenarios(args.scenarios, cfg.tau)
    preds = predict_scenarios(model, cfg, scenarios, deterministic=args.deterministic)
    write_predictions(preds, out_dir(args) / args.output)


def cmd_evaluate(args) -> None:
    preds = read_predictions(args.predictions)
    by_id = {s.scenario_id: s for s in load_scenarios(args.scenarios)}
    gts = []
    for p in preds:
        s = by_id.get(p.scenario_id)
        if s is None:
            raise InputError(f"prediction for unknown scenario {p.scenario_id!r}")
        s = normalize_scenario(s)
        fut, mask = s.future(s.focal)
        if not mask.all():
            raise InputError(f"scenario {p.scenario_id!r}: focal agent lacks full ground truth")
        gts.append(fut)
    ks = tuple(sorted(set(args.k)))
    report = evaluate(preds, gts, ks)
    dest = out_dir(args)
    (dest / "metrics.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    with open(dest / "per_scenario.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(report.per_scenario[0]) if report.per_scenario else [])
        writer.writeheader()
        writer.writerows(report.per_scenario)
    print(json.dumps(report.to_dict(), sort_keys=True))
    if not args.no_plots and report.per_scenario:
        from .plotting import plot_fde_histogram
        k = max(ks)
        plot_fde_histogram([r[f"min_fde@{k}"] for r in report.per_scenario], dest / "fde_hist.png", k)


def cmd_ensemble(args) -> None:
    groups: dict[str, list[PredictionSet]] = {}
    for path in args.predictions:
        for p in read_predictions(path):
            groups.setdefault(p.scenario_id, []).append(p)
    if not groups:
        raise InputError("no predictions to ensemble")
    seed = args.seed or 0
    merged = [ensemble(subs, args.n_out, seed=seed, goals_only=args.goals_only)
              for subs in groups.values()]
    write_predictions(merged, out_dir(args) / args.output)


# ---------------------------------------------------------------------------- parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("run configuration (overrides --config)")
    for f in fields(RunConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        conv = {"int": int, "float": float}.get(kind, str)
        group.add_argument(flag, dest=f.name, type=conv, default=None,
                           help=f"default {f.default!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded execution for byte-stable outputs")
    common.add_argument("--out-dir", default=".")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hetgcn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write synthetic scenarios")
    p.add_argument("--n-scenarios", type=int, default=32)
    p.add_argument("--layouts", default="straight,t_intersection")
    p.add_argument("--n-agents", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--t-hist", type=int, default=20)
    p.add_argument("--t-future", type=int, default=30)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build-graph", parents=[common], help="dump dynamic graphs as JSON")
    p.add_argument("scenarios", nargs="+")
    _add_run_flags(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("scenarios", nargs="+")
    p.add_argument("--no-plots", action="store_true")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="predict focal agents")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", default="predictions.jsonl")
    p.add_argument("scenarios", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("-k", type=int, action="append", default=None,
                   help="K values (repeatable, default 1 and 6)")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("scenarios", nargs="+")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", parents=[common], help="merge prediction files by k-means")
    p.add_argument("predictions", nargs="+")
    p.add_argument("--n-out", type=int, default=6)
    p.add_argument("--goals-only", action="store_true")
    p.add_argument("--output", default="ensemble.jsonl")
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "k", "unset") is None:
        args.k = [1, 6]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with single_threaded(args.deterministic):
            args.func(args)
    except VALIDATION_ERRORS + (InputError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
