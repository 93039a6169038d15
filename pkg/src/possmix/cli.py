"""Command-line interface: ``possmix <command> [flags]``.

Commands write their results to files under ``--out``; progress and
diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import core, evaluate, gem, indicators, ingest, simulate

log = logging.getLogger("possmix")

DESK_STARTS, DESK_KEEP, DESK_REPS = 200, 20, 20
PAPER_STARTS, PAPER_KEEP, PAPER_REPS = 1000, 100, 100
STUDY_SIZES = (50, 100, 200, 400)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    log.info("wrote %s", path)


def _fit_flags(p: argparse.ArgumentParser, k: bool = True) -> None:
    d = gem.FitConfig(K=1)
    if k:
        p.add_argument("--k", type=int, default=3, help="number of components")
    p.add_argument("--n-starts", type=int, default=None, help=f"random starts (default {d.n_starts})")
    p.add_argument("--short-iters", type=int, default=d.n_short_iters, help="iterations per start before screening")
    p.add_argument("--keep", type=int, default=None, help=f"starts kept for refinement (default {d.n_keep})")
    p.add_argument("--long-iters", type=int, default=d.n_long_iters, help="maximum refinement iterations")
    p.add_argument("--rel-tol", type=float, default=d.rel_tol, help="relative log-likelihood change that stops refinement")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)


def _config(args, K: int, starts: int, keep: int) -> gem.FitConfig:
    n_starts = args.n_starts if args.n_starts is not None else starts
    n_keep = args.keep if args.keep is not None else min(keep, n_starts)
    return gem.FitConfig(
        K=K,
        n_starts=n_starts,
        n_short_iters=args.short_iters,
        n_keep=n_keep,
        n_long_iters=args.long_iters,
        rel_tol=args.rel_tol,
        seed=args.seed,
        threads=args.threads,
    )


def _input_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--events", required=True, help="event CSV (possession_id,event_type,time,x,y)")
    p.add_argument("--vocab", help="vocabulary file; default is the generic one written by simulate for E=5")
    p.add_argument("--labels", help="sidecar possession_id,true_component used to score the fit")
    p.add_argument("--no-velocity-filter", action="store_true", help="keep possessions regardless of speed")
    p.add_argument("--fill-missing", action="store_true", help="carry forward blank coordinates")


def _load(args):
    vocab = ingest.EventVocabulary.load(args.vocab) if args.vocab else ingest.EventVocabulary.generic(5)
    rows = ingest.parse_events(args.events, fill_missing=args.fill_missing)
    pct = None if args.no_velocity_filter else 98
    data, report = ingest.build_possessions(rows, vocab, core.PitchBounds(), velocity_percentile=pct)
    if not data:
        raise ValueError("no possession survived cleaning")
    log.info("%d of %d possessions retained", report.n_retained, report.n_input)
    return vocab, data, report


# -- commands ---------------------------------------------------------------------------------

def cmd_simulate(args) -> None:
    out = Path(args.out)
    reps = args.reps or 1
    vocab = ingest.EventVocabulary.generic(5)
    for scenario in args.scenario:
        for n in args.n:
            for r in range(reps):
                seed = args.seed + r
                data, labels = simulate.generate_dataset(scenario, n, seed)
                stem = f"{scenario}_n{n}_seed{seed}"
                _write(out / f"{stem}.csv", ingest.possessions_to_csv(data, vocab))
                _write(out / f"{stem}_labels.csv", ingest.labels_to_csv(labels))


def _score(args, report, result) -> dict:
    if not args.labels:
        return {}
    truth = ingest.parse_labels(args.labels)
    missing = [pid for pid in report.retained_ids if pid not in truth]
    if missing:
        raise ValueError(f"no label for possession {missing[0]!r}")
    true = np.array([truth[pid] for pid in report.retained_ids])
    return {"ari": evaluate.adjusted_rand_index(true, result.hard_assignment)}


def cmd_fit(args) -> None:
    out = Path(args.out)
    vocab, data, report = _load(args)
    cfg = _config(args, args.k, gem.FitConfig.n_starts, gem.FitConfig.n_keep)
    result = gem.fit(data, cfg, n_types=vocab.E)
    doc = gem.fit_report(result, args.seed)
    doc["possession_ids"] = list(report.retained_ids)
    doc.update(_score(args, report, result))
    _write(out / "fit_report.json", core.to_json(doc) + "\n")
    _write(out / "params.json", core.serialize_params(result.params))
    _write(out / "cleaning_report.json", report.to_json())


def cmd_select_k(args) -> None:
    out = Path(args.out)
    if args.k_min < 1 or args.k_max < args.k_min:
        raise ValueError("need 1 <= --k-min <= --k-max")
    vocab, data, report = _load(args)
    cfg = _config(args, args.k_min, gem.FitConfig.n_starts, gem.FitConfig.n_keep)
    rows, best, fits = gem.select_k(data, range(args.k_min, args.k_max + 1), cfg, n_types=vocab.E)
    _write(out / "bic.csv", evaluate.rows_to_csv(rows))
    _write(out / "selection.json", core.to_json({"best_k": best, "table": rows, "seed": args.seed}) + "\n")
    _write(out / "params.json", core.serialize_params(fits[best].params))
    _write(out / "cleaning_report.json", report.to_json())


def cmd_indicators(args) -> None:
    with open(args.params, encoding="utf-8") as fh:
        params = core.deserialize_params(fh.read())
    rows = indicators.indicator_rows(params)
    _write(Path(args.out) / "indicators.csv", evaluate.rows_to_csv(rows))


def cmd_evaluate(args) -> None:
    out = Path(args.out)
    if args.paper_scale:
        starts, keep, reps = PAPER_STARTS, PAPER_KEEP, PAPER_REPS
    else:
        starts, keep, reps = DESK_STARTS, DESK_KEEP, DESK_REPS
    reps = args.reps or reps
    cfg = _config(args, args.k, starts, keep)
    rows = evaluate.run_study(args.scenario, args.n, reps, cfg, seed=args.seed, threads=args.threads)
    _write(out / "replications.csv", evaluate.rows_to_csv(rows, evaluate.STUDY_FIELDS))
    _write(out / "summary.csv", evaluate.rows_to_csv(evaluate.summarize(rows)))


# -- parser -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="possmix", description="Mixture clustering of possession event sequences.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    scen = sorted(simulate.SCENARIOS)

    p = sub.add_parser("simulate", help="write benchmark datasets and their label sidecars")
    p.add_argument("--scenario", nargs="+", choices=scen, default=["easy"])
    p.add_argument("--n", nargs="+", type=int, default=[400])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=None, help="datasets per (scenario, n), seeds seed..seed+reps-1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a K-component mixture to an event file")
    _input_flags(p)
    _fit_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select-k", help="fit a range of K and pick the largest BIC")
    _input_flags(p)
    _fit_flags(p, k=False)
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int, default=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select_k)

    p = sub.add_parser("indicators", help="cluster summary table from a parameter document")
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_indicators)

    p = sub.add_parser("evaluate", help="replication study on the benchmark scenarios")
    p.add_argument("--scenario", nargs="+", choices=scen, default=["easy", "intermediate", "hard"])
    p.add_argument("--n", nargs="+", type=int, default=list(STUDY_SIZES))
    p.add_argument("--reps", type=int, default=None, help=f"replications per cell (default {DESK_REPS})")
    p.add_argument("--paper-scale", action="store_true", help=f"{PAPER_REPS} replications, {PAPER_STARTS} starts")
    _fit_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"possmix {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
