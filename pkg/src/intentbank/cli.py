"""Command-line entry points: synthetic data generation, runs, and reports."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .config import STRATEGIES, CliConfig, ConfigError, RunConfig, load_config_file
from .data import (
    DataError,
    SyntheticSpec,
    filter_min_interactions,
    generate_synthetic,
    ingest_log,
    split_spans,
    write_ground_truth_json,
    write_interactions_csv,
)
from .persistence import PersistenceError, load_checkpoint, save_checkpoint
from .trainer import run_timeline

log = logging.getLogger(__name__)

# Wall-clock written to metrics files is quantized to this bucket (seconds) so
# outputs stay byte-reproducible; exact timings go to the log.
SECONDS_BUCKET = 600

_SYNTH_FIELDS = {f.name for f in dataclasses.fields(SyntheticSpec)}

CSV_COLUMNS = ["span", "strategy", "hr20", "ndcg20", "users", "mean_k", "max_k", "seconds"]


def _bucket_seconds(seconds: float) -> int:
    return int(seconds // SECONDS_BUCKET) * SECONDS_BUCKET


def _fmt(value, pattern="%.6f") -> str:
    return "" if value is None else pattern % value


def _report_row(report) -> list[str]:
    return [
        str(report.span),
        report.strategy,
        _fmt(report.hr20),
        _fmt(report.ndcg20),
        str(report.users),
        "%.4f" % report.mean_k,
        str(report.max_k),
        str(_bucket_seconds(report.seconds)),
    ]


def _write_metrics(out_dir: str, reports, cfg: RunConfig) -> None:
    rows = [_report_row(r) for r in reports]
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        writer.writerows(rows)
    hr = [r.hr20 for r in reports if r.hr20 is not None]
    nd = [r.ndcg20 for r in reports if r.ndcg20 is not None]
    doc = {
        "config": cfg.to_dict(),
        "rows": [dict(zip(CSV_COLUMNS, row)) for row in rows],
        "mean": {
            "hr20": float(np.mean(hr)) if hr else None,
            "ndcg20": float(np.mean(nd)) if nd else None,
        },
    }
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


def cmd_gen_synth(args) -> int:
    cli_cfg = load_config_file(args.config) if args.config else CliConfig()
    unknown = set(cli_cfg.synthetic) - _SYNTH_FIELDS
    if unknown:
        raise ConfigError(f"unknown synthetic keys: {sorted(unknown)}")
    spec = SyntheticSpec(**cli_cfg.synthetic)
    out_dir = args.out or cli_cfg.out_dir
    if not out_dir:
        raise ConfigError("gen-synth needs --out or out_dir in the config")
    os.makedirs(out_dir, exist_ok=True)
    interactions, gt = generate_synthetic(spec)
    write_interactions_csv(os.path.join(out_dir, "interactions.csv"), interactions)
    write_ground_truth_json(os.path.join(out_dir, "ground_truth.json"), gt)
    log.info("wrote %d interactions to %s", len(interactions), out_dir)
    return 0


def cmd_run(args) -> int:
    cli_cfg = load_config_file(args.config) if args.config else CliConfig()
    cfg = cli_cfg.run
    if args.strategy:
        if args.strategy not in STRATEGIES:
            raise ConfigError(f"--strategy must be one of {STRATEGIES}")
        cfg = dataclasses.replace(cfg, strategy=args.strategy)
    data_path = args.data or cli_cfg.data
    out_dir = args.out or cli_cfg.out_dir
    if not data_path or not out_dir:
        raise ConfigError("run needs --data and --out (or config data/out_dir)")
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    interactions = ingest_log(data_path)
    if args.min_interactions > 1:
        interactions = filter_min_interactions(interactions, args.min_interactions)
    spans = split_spans(interactions, args.t_spans, args.alpha)

    def checkpoint_cb(span, model, banks, opt):
        save_checkpoint(
            model, banks, opt, cfg, span, os.path.join(ckpt_dir, f"span_{span}")
        )

    start_state = None
    if args.resume is not None:
        prefix = os.path.join(ckpt_dir, f"span_{args.resume}")
        model, banks, opt, _ = load_checkpoint(prefix, current_config=cfg)
        start_state = (model, banks, opt, args.resume)

    reports = run_timeline(
        spans, cfg, start_state=start_state, checkpoint_cb=checkpoint_cb
    )
    _write_metrics(out_dir, reports, cfg)
    log.info("metrics written to %s", out_dir)
    return 0


def _read_metrics_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    rows: list[dict] = []
    for path in args.inputs:
        rows.extend(_read_metrics_csv(path))
    baseline = {
        r["span"]: r for r in rows if r["strategy"] == args.baseline
    }
    out_rows = []
    for r in sorted(rows, key=lambda r: (int(r["span"]), r["strategy"])):
        ri = ""
        base = baseline.get(r["span"])
        if base and base["hr20"] and r["hr20"]:
            own = (float(r["hr20"]) + float(r["ndcg20"])) / 2.0
            ref = (float(base["hr20"]) + float(base["ndcg20"])) / 2.0
            if ref != 0:
                ri = "%.4f" % (100.0 * (own - ref) / ref)
        out_rows.append([r["span"], r["strategy"], r["hr20"], r["ndcg20"], ri])
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["span", "strategy", "hr20", "ndcg20", "ri_vs_" + args.baseline])
        writer.writerows(out_rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intentbank",
        description="Incremental multi-intent sequential recommendation runs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-synth", help="generate synthetic drifting-intent data")
    p_gen.add_argument("--config", help="JSON config file (synthetic section)")
    p_gen.add_argument("--out", help="output directory")
    p_gen.set_defaults(func=cmd_gen_synth)

    p_run = sub.add_parser("run", help="pretrain + incremental timeline + metrics")
    p_run.add_argument("--config", help="JSON config file")
    p_run.add_argument("--data", help="interaction CSV")
    p_run.add_argument("--strategy", help="override the configured strategy")
    p_run.add_argument("--out", help="output directory")
    p_run.add_argument("--resume", type=int, default=None,
                       help="resume after this span's checkpoint")
    p_run.add_argument("--t-spans", type=int, default=6,
                       help="number of incremental time spans")
    p_run.add_argument("--alpha", type=float, default=0.5,
                       help="fraction of the timeline used for pretraining")
    p_run.add_argument("--min-interactions", type=int, default=1,
                       help="drop users with fewer total interactions")
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="aggregate metrics files")
    p_rep.add_argument("--inputs", nargs="+", required=True)
    p_rep.add_argument("--out", required=True)
    p_rep.add_argument("--baseline", default="ft",
                       help="strategy label used as the RI baseline")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    except (PersistenceError, RuntimeError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
