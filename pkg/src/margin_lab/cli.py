"""``margin-lab`` command line.

Exit codes: 0 success, 1 validation failure, 2 property-suite failure.
Numbers are printed with 7 significant digits.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks
from .data import DatasetError, ImbalanceProfile, load_csv_dataset, synth_gaussian_blobs, write_csv_dataset
from .evaluation import evaluate
from .experiment import ConfigError, load_config, load_model, resolve_output, run_experiment
from .losses import compute_margin_table
from .numerics import RandomSource

EXIT_OK, EXIT_INVALID, EXIT_SUITE = 0, 1, 2


def fmt(x) -> str:
    if x is None:
        return "n/a"
    return f"{float(x):.7g}"


def fmt_list(xs) -> str:
    return "[" + ", ".join(fmt(x) for x in xs) + "]"


def cmd_gen_data(args) -> int:
    profile = ImbalanceProfile(args.kind, args.nmax, args.ratio, args.classes)
    counts = profile.counts()
    rng = RandomSource(args.seed)
    data = synth_gaussian_blobs(args.classes, args.dims, counts, args.separation, args.std, rng.child(10))
    out = resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv_dataset(data, out / "dataset.csv")
    if args.test_per_class:
        test = synth_gaussian_blobs(args.classes, args.dims, np.full(args.classes, args.test_per_class),
                                    args.separation, args.std, rng.child(11))
        write_csv_dataset(test, out / "test.csv")
    manifest = {"kind": args.kind, "classes": args.classes, "nmax": args.nmax, "ratio": args.ratio,
                "seed": args.seed, "counts": counts.tolist()}
    (out / "counts.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"counts {counts.tolist()}")
    print(f"wrote {out / 'dataset.csv'} ({len(data)} rows)")
    return EXIT_OK


def cmd_check_equivalence(args) -> int:
    report = checks.equivalence_suite(args.trials, args.seed, args.scale_mode)
    literal = args.scale_mode != "all"
    failed = False
    for variant, r in report.items():
        tol = checks.LMSCE_TOL if variant == "lmsce" else checks.EQUIVALENCE_TOL
        bad = r["max_abs_diff"] > tol
        if literal and variant != "lmsce":
            status = "mismatch (target-only scaling)"
        else:
            status = "FAIL" if bad else "ok"
            failed |= bad
        print(f"{variant:6s} trials={r['trials']} max_abs_diff={fmt(r['max_abs_diff'])} tol={fmt(tol)} {status}")
    return EXIT_SUITE if failed else EXIT_OK


def cmd_check_gradients(args) -> int:
    variants = ("ce", "ldam", "elm") if args.variant == "all" else (args.variant,)
    report = checks.gradient_suite(args.trials, args.seed, args.h, variants)
    worst = 0.0
    for variant, r in report.items():
        worst = max(worst, r["worst_rel_err"])
        print(f"{variant:5s} trials={r['trials']} worst_rel_err={fmt(r['worst_rel_err'])} "
              f"skipped_near_ties={r['skipped_near_ties']}")
    print(f"worst relative error {fmt(worst)} (tol {fmt(checks.GRADIENT_TOL)})")
    return EXIT_SUITE if worst > checks.GRADIENT_TOL else EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    summary = run_experiment(cfg)
    out = resolve_output(cfg["output_dir"])
    for k, v in summary["topk"].items():
        print(f"top-{k} accuracy {fmt(v['mean'])} +/- {fmt(v['std'])}")
    print(f"balanced accuracy {fmt(summary['balanced_accuracy']['mean'])}")
    print(f"class recall {fmt_list(r['mean'] for r in summary['class_recall'])}")
    print(f"wrote {out / 'summary.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    data = load_csv_dataset(args.data, args.header, model.num_classes)
    ks = tuple(k for k in args.k if k <= model.num_classes)
    counts = None
    if args.counts:
        counts = json.loads(Path(args.counts).read_text(encoding="utf-8"))["counts"]
    summary = evaluate(model.logits(data.features), data.labels, model.num_classes, counts, ks)
    for k, v in summary.topk.items():
        print(f"top-{k} accuracy {fmt(v)}")
    print(f"class recall {fmt_list(summary.to_dict()['class_recall'])}")
    if args.out:
        out = resolve_output(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(summary.to_json(), encoding="utf-8")
    return EXIT_OK


def _parse_counts(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ValueError(f"counts must be comma-separated integers, got {text!r}") from None


def cmd_margins(args) -> int:
    if args.manifest:
        counts = json.loads(Path(args.manifest).read_text(encoding="utf-8"))["counts"]
    elif args.counts:
        counts = _parse_counts(args.counts)
    else:
        raise ValueError("give --counts or --manifest")
    literal = compute_margin_table(counts, args.M, "literal")
    normalized = compute_margin_table(counts, args.M, "normalized")
    print(f"{'class':>5s} {'count':>8s} {'literal':>12s} {'normalized':>12s}")
    for j, n in enumerate(counts):
        print(f"{j:5d} {n:8d} {fmt(literal.deltas[j]):>12s} {fmt(normalized.deltas[j]):>12s}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="margin-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write an imbalanced synthetic blob dataset")
    p.add_argument("--kind", choices=("longtail", "step"), default="longtail")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--nmax", type=int, default=500)
    p.add_argument("--ratio", type=float, default=100.0)
    p.add_argument("--dims", type=int, default=2)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--std", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-per-class", type=int, default=0, help="also write a balanced test.csv")
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train every seed of an experiment config")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model on a CSV dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--header", action="store_true")
    p.add_argument("--k", type=int, nargs="+", default=[1, 3, 5])
    p.add_argument("--counts", help="counts manifest used for frequent/rare grouping")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-equivalence", help="randomized CE-form vs softplus-form comparison")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale-mode", choices=("all", "target_only"), default="all")
    p.set_defaults(func=cmd_check_equivalence)

    p = sub.add_parser("check-gradients", help="finite-difference audit of analytic gradients")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=2)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--variant", choices=("all", "ce", "ldam", "elm"), default="all")
    p.set_defaults(func=cmd_check_gradients)

    p = sub.add_parser("margins", help="print literal and normalized margin tables")
    p.add_argument("--counts", help="comma-separated class counts, e.g. 16,81")
    p.add_argument("--manifest", help="counts.json written by gen-data")
    p.add_argument("--M", type=float, default=0.5)
    p.set_defaults(func=cmd_margins)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
