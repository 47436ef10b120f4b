"""Batch command line interface.

Subcommands: ingest, synth, train, align, evaluate, seed-expand, ablate,
report. Exit codes: 0 success, 2 configuration error, 3 data error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .encoders import load_checkpoint, restore_state
from .errors import ConfigError, DataError, TeaForgeError, TrainingDivergedError
from .pipeline import (
    ABLATION_FLAGS,
    RunConfig,
    SimilarityView,
    ablate,
    evaluate,
    load_config,
    rank_and_predict,
    run_pipeline,
    select_seeds,
    similarity_views,
)
from .report import (
    render_report_directory,
    write_config_resolved,
    write_metrics_tsv,
    write_seeds_tsv,
)
from .synthetic import generate_synthetic_task
from .tkg import load_task, save_task

log = logging.getLogger("tea_forge")


def _add_common(parser, data=False, out=True, model=False):
    if data:
        parser.add_argument("--data", required=True, help="dataset directory")
        parser.add_argument("--seed-fraction", type=float, default=0.3,
                            help="fraction of ent_links used as training seeds")
    if out:
        parser.add_argument("--out", required=True, help="output directory")
    if model:
        parser.add_argument("--model", required=True,
                            help="run directory containing checkpoints")


def _add_run_options(parser):
    parser.add_argument("--config", help="key = value run configuration file")
    parser.add_argument("--seed", type=int, help="random seed override")
    parser.add_argument("--iterations", type=int, help="training iterations override")
    parser.add_argument("--sinkhorn", action="store_true",
                        help="apply Sinkhorn normalization before ranking")
    for flag in ABLATION_FLAGS:
        parser.add_argument(f"--ablate-{flag.replace('_', '-')}",
                            dest=f"ablate_{flag}", action="store_true",
                            help=f"enable the {flag} ablation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tea-forge",
        description="Temporal entity alignment toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a dataset and write a canonical copy")
    _add_common(p, data=True)

    p = sub.add_parser("synth", help="generate a synthetic twin-graph dataset")
    p.add_argument("--entities", type=int, required=True)
    p.add_argument("--relations", type=int, default=10)
    p.add_argument("--timestamps", type=int, default=40)
    p.add_argument("--density", type=float, default=4.0)
    p.add_argument("--temporal-frac", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seed-fraction", type=float, default=0.3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run the full training pipeline")
    _add_common(p, data=True)
    _add_run_options(p)

    p = sub.add_parser("align", help="rank candidates with a trained model")
    _add_common(p, data=True, model=True)
    p.add_argument("--sinkhorn", action="store_true")
    p.add_argument("--top", type=int, default=10,
                   help="ranked candidates to write per entity")

    p = sub.add_parser("evaluate", help="compute metrics with a trained model")
    _add_common(p, data=True, model=True)

    p = sub.add_parser("seed-expand", help="bi-directional seed expansion")
    _add_common(p, data=True, model=True)

    p = sub.add_parser("ablate", help="paired ablation runs")
    _add_common(p, data=True)
    _add_run_options(p)

    p = sub.add_parser("report", help="render figures from a run directory")
    _add_common(p)
    return parser


def _resolve_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        config = load_config(args.config, base=config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["rng_seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        overrides["iterations"] = args.iterations
    if getattr(args, "sinkhorn", False):
        overrides["sinkhorn_enabled"] = True
    for flag in ABLATION_FLAGS:
        if getattr(args, f"ablate_{flag}", False):
            overrides[flag] = True
    if overrides:
        import dataclasses
        config = dataclasses.replace(config, **overrides)
    return config


def _load_model(args):
    task = load_task(args.data, args.seed_fraction)
    checkpoints = sorted(Path(args.model).glob("checkpoint_iter*.npz"))
    if not checkpoints:
        raise DataError(f"no checkpoints found in {args.model}")
    state = restore_state(task, load_checkpoint(checkpoints[-1]))
    return task, state


def cmd_ingest(args) -> None:
    task = load_task(args.data, args.seed_fraction)
    out = Path(args.out)
    save_task(task, out)
    stats = [
        ("left_entities", task.left.entity_count),
        ("left_relations", task.left.relation_count),
        ("left_timestamps", task.left.timestamp_count),
        ("left_facts", len(task.left.facts)),
        ("right_entities", task.right.entity_count),
        ("right_relations", task.right.relation_count),
        ("right_timestamps", task.right.timestamp_count),
        ("right_facts", len(task.right.facts)),
        ("train_seeds", len(task.train_seeds)),
        ("test_pairs", len(task.test_pairs)),
    ]
    with open(out / "stats.tsv", "w", encoding="utf-8") as fh:
        for key, value in stats:
            fh.write(f"{key}\t{value}\n")
    print(f"ingested {args.data}: {len(task.train_seeds)} train seeds, "
          f"{len(task.test_pairs)} test pairs")


def cmd_synth(args) -> None:
    task = generate_synthetic_task(
        n_entities=args.entities, n_relations=args.relations,
        n_timestamps=args.timestamps, density=args.density,
        temporal_fraction=args.temporal_frac, noise=args.noise,
        rng_seed=args.seed, seed_fraction=args.seed_fraction)
    save_task(task, args.out)
    print(f"wrote synthetic task to {args.out}: "
          f"{len(task.left.facts)} left facts, {len(task.right.facts)} right facts")


def cmd_train(args) -> None:
    config = _resolve_config(args)
    task = load_task(args.data, args.seed_fraction)
    result = run_pipeline(task, config, out_dir=args.out)
    print(f"H@1 {result.report.hits.get(1, 0.0):.4f}  MRR {result.report.mrr:.4f}  "
          f"({config.iterations} iteration(s), artifacts in {args.out})")


def cmd_align(args) -> None:
    task, state = _load_model(args)
    views = similarity_views(state)
    matrix = views["mixed"].dense()
    if args.sinkhorn and matrix.shape[0] == matrix.shape[1]:
        from .consensus import sinkhorn
        matrix = sinkhorn(matrix)
    predictions = rank_and_predict(SimilarityView("mixed", matrix))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.tsv", "w", encoding="utf-8") as fh:
        fh.write("left\trank\tright\tscore\n")
        for left in range(matrix.shape[0]):
            for rank, right in enumerate(predictions["ranking"][left][:args.top], 1):
                fh.write(f"{left}\t{rank}\t{right}\t{matrix[left, right]:.6f}\n")
    print(f"wrote predictions for {matrix.shape[0]} entities to {out / 'predictions.tsv'}")


def cmd_evaluate(args) -> None:
    task, state = _load_model(args)
    views = similarity_views(state)
    predictions = rank_and_predict(views["mixed"])
    report = evaluate(predictions, task.test_pairs, task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_tsv(report, out / "metrics.tsv")
    print(f"H@1 {report.hits.get(1, 0.0):.4f}  MRR {report.mrr:.4f}  "
          f"over {report.count} test pairs")


def cmd_seed_expand(args) -> None:
    task, state = _load_model(args)
    views = similarity_views(state)
    expanded = select_seeds(views["structural"], views["temporal"], state.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_seeds_tsv(expanded, out / "seeds_expanded.tsv")
    added = len(expanded) - len(state.seeds)
    print(f"expanded {len(state.seeds)} seeds by {added} pairs "
          f"-> {out / 'seeds_expanded.tsv'}")


def cmd_ablate(args) -> None:
    config = _resolve_config(args)
    task = load_task(args.data, args.seed_fraction)
    requested = [flag for flag in ABLATION_FLAGS
                 if getattr(args, f"ablate_{flag}", False)]
    if not requested:
        requested = ["drop_e", "no_consensus", "equal_weights"]
    flag_sets = {"full": {}}
    for flag in requested:
        flag_sets[flag] = {flag: True}
    # the base config drives the full model; per-variant flags layer on top
    import dataclasses
    base = dataclasses.replace(config, **{f: False for f in ABLATION_FLAGS})
    table = ablate(task, base, flag_sets, out_dir=args.out)
    write_config_resolved(base, Path(args.out) / "config.resolved")
    for name, cells in table.items():
        print(f"{name}\tH@1 {cells['h@1']:.4f}\tMRR {cells['mrr']:.4f}")


def cmd_report(args) -> None:
    written = render_report_directory(args.out)
    if not written:
        raise DataError(f"no report inputs found in {args.out}")
    print(f"rendered {', '.join(written)} in {args.out}")


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "align": cmd_align,
    "evaluate": cmd_evaluate,
    "seed-expand": cmd_seed_expand,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    except TeaForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
