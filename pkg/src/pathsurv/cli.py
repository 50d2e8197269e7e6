"""Command-line interface.

Subcommands: compile-graphs, train, evaluate, cv, ablate, synth, report,
km. All state flows through flags and config files; exit codes are 0 (ok),
2 (config error), 3 (data error), 4 (numeric failure).
"""

import argparse
import csv
import json
import logging
import sys

import numpy as np

from .config import MODES, RunConfig, SynthSpec
from .errors import ConfigError, DataError, NumericError
from .graphs import load_pathway_catalogue, save_library
from .harness import (
    evaluate_checkpoint,
    export_attention_report,
    generate_synthetic_cohort,
    run_ablation,
    run_experiment,
    train_full_cohort,
)
from .omics import parse_survival
from .survival import kaplan_meier, log_rank_test, stratify_risk

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathsurv",
        description=(
            "Pathway-centric multi-omics survival modeling: compile pathway "
            "graphs, train and evaluate risk models, run cross-validation "
            "and ablations, and export interpretability reports."
        ),
    )
    parser.add_argument(
        "--verbose", action="store_true", help="log at INFO level"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile-graphs",
                       help="compile the pathway topology library")
    p.add_argument("--mapping", required=True, help="pathway-gene TSV")
    p.add_argument("--edges", required=True, help="typed edge TSV")
    p.add_argument("--universe", default=None,
                   help="optional gene universe file, one gene per line")
    p.add_argument("--add-reverse", action="store_true",
                   help="add reversed edge copies under rev:<relation>")
    p.add_argument("--out", required=True, help="output library file")

    p = sub.add_parser("train", help="train on a full cohort directory")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--data", required=True, help="cohort directory")
    p.add_argument("--out", required=True, help="output checkpoint file")

    p = sub.add_parser("evaluate", help="score a cohort with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output metrics.jsonl")

    p = sub.add_parser("cv", help="stratified k-fold cross-validation")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("ablate", help="run the ablation mode matrix")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--modes", default=",".join(MODES),
                   help="comma-separated mode list")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--spec", default=None, help="synthetic spec config file")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("report", help="per-patient attention report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--out", required=True, help="output report.json")

    p = sub.add_parser("km", help="Kaplan-Meier curves from a score split")
    p.add_argument("--scores", required=True,
                   help="CSV with patient_id,score")
    p.add_argument("--survival", required=True,
                   help="CSV with patient_id,time,event")
    p.add_argument("--split", default="median",
                   choices=("median", "tertiles"))
    p.add_argument("--out", required=True, help="output km.csv")
    return parser


def _load_config(path):
    if path is None:
        return RunConfig()
    return RunConfig.from_file(path)


def _load_scores(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0][:2]] != ["patient_id", "score"]:
        raise DataError(f"{path}: header must be patient_id,score")
    ids, scores = [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) < 2:
            raise DataError(f"{path}:{r}: ragged row")
        ids.append(row[0].strip())
        try:
            scores.append(float(row[1]))
        except ValueError as exc:
            raise DataError(f"{path}:{r}: bad score {row[1]!r}") from exc
    return ids, np.array(scores)


def _cmd_km(args):
    ids, scores = _load_scores(args.scores)
    records = parse_survival(args.survival)
    by_id = {r.patient_id: r for r in records}
    missing = [p for p in ids if p not in by_id]
    if missing:
        raise DataError(f"patients missing survival: {', '.join(missing[:3])}")
    aligned = [by_id[p] for p in ids]
    labels, cutpoints = stratify_risk(scores, args.split)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "survival", "at_risk", "events", "group"])
        for group in sorted(set(labels.tolist())):
            members = [r for r, g in zip(aligned, labels) if g == group]
            curve = kaplan_meier(members)
            for i in range(curve.times.size):
                writer.writerow([
                    "%.10g" % curve.times[i],
                    "%.10g" % curve.survival[i],
                    int(curve.at_risk[i]),
                    int(curve.events[i]),
                    group,
                ])
    chi2, p = log_rank_test(aligned, labels)
    print(json.dumps({
        "log_rank_chi2": chi2,
        "log_rank_p": p,
        "cutpoints": [float(c) for c in cutpoints],
        "groups": int(labels.max()) + 1,
    }, sort_keys=True))


def _run(args) -> int:
    if args.command == "compile-graphs":
        universe = None
        if args.universe:
            with open(args.universe, "r", encoding="utf-8") as fh:
                universe = [line.strip() for line in fh if line.strip()]
        library = load_pathway_catalogue(
            args.mapping, args.edges, universe,
            add_reverse_edges=args.add_reverse,
        )
        save_library(library, args.out)
        print(
            f"compiled {library.K} pathways "
            f"({library.pre_filter_count} before size filter), "
            f"{len(library.relations)} relations -> {args.out}"
        )
    elif args.command == "train":
        config = _load_config(args.config)
        _, history = train_full_cohort(config, args.data, args.out)
        print(
            f"trained {len(history['epoch_loss'])} epochs, "
            f"best epoch {history['best_epoch']}, "
            f"final train nll {history['train_nll'][-1]:.4f} -> {args.out}"
        )
    elif args.command == "evaluate":
        metrics = evaluate_checkpoint(args.ckpt, args.data, args.out)
        print(json.dumps(metrics, sort_keys=True))
    elif args.command == "cv":
        config = _load_config(args.config)
        result = run_experiment(config, args.data, args.out)
        print(result["summary"], end="")
    elif args.command == "ablate":
        config = _load_config(args.config)
        modes = [m.strip() for m in args.modes.split(",") if m.strip()]
        result = run_ablation(config, args.data, args.out, modes)
        print(result["summary"], end="")
    elif args.command == "synth":
        spec = SynthSpec() if args.spec is None else SynthSpec.from_file(args.spec)
        generate_synthetic_cohort(spec, args.seed, args.out)
        print(
            f"wrote synthetic cohort: {spec.n_patients} patients, "
            f"{spec.n_pathways} pathways -> {args.out}"
        )
    elif args.command == "report":
        report = export_attention_report(
            args.ckpt, args.data, args.patient, args.out
        )
        print(
            f"patient {report['patient_id']}: theta {report['theta']:.4f}, "
            f"group {report['risk_group']} -> {args.out}"
        )
    elif args.command == "km":
        _cmd_km(args)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
