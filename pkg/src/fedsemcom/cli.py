"""Command-line entry point: ``fedsemcom {train,evaluate,ledger,partition-report}``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fl
from .config import build_config, load_config
from .data import class_histogram
from .errors import ConfigError, DivergenceError, IngestionError
from .fl import RunConfig
from .model import SemComModel
from .params import GROUPS, MEGABYTE, byte_size, reference_layout

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse already exits 2; keep its format
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for attr, key in [
        ("strategy", "strategy"),
        ("interval", "update_interval"),
        ("alpha", "alpha"),
        ("snr_train", "snr_train_db"),
        ("seed", "seed"),
        ("rounds", "global_rounds"),
        ("clients", "num_clients"),
        ("workers", "workers"),
        ("fading_train", "fading"),
    ]:
        val = getattr(args, attr, None)
        if val is not None:
            out[key] = val
    if getattr(args, "partial", None) is not None:
        out["partial_update"] = args.partial
    return out


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config, _overrides(args))
    return build_config(_overrides(args))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedsemcom", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(p: argparse.ArgumentParser, config_required: bool) -> None:
        p.add_argument("--config", required=config_required, help="key=value run config file")
        p.add_argument("--strategy", choices=fl.STRATEGIES)
        mode = p.add_mutually_exclusive_group()
        mode.add_argument("--partial", dest="partial", action="store_true", default=None)
        mode.add_argument("--full", dest="partial", action="store_false")
        p.add_argument("--interval", type=int, help="channel-codec sync interval P")
        p.add_argument("--alpha", type=float, help="Dirichlet concentration")
        p.add_argument("--snr-train", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--clients", type=int)
        p.add_argument("--out-dir", default="runs")

    t = sub.add_parser("train", help="run federated (or centralized) training")
    run_flags(t, config_required=True)
    t.add_argument("--workers", type=int, help="client threads per round")
    t.add_argument("--fading", dest="fading_train", choices=("none", "rayleigh"))

    e = sub.add_parser("evaluate", help="sweep SNR values on a checkpoint")
    run_flags(e, config_required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--fading", required=True, choices=("none", "rayleigh"))
    e.add_argument("--snr-eval-list", type=_float_list, default=[1.0, 4.0, 7.0, 10.0, 13.0])

    g = sub.add_parser("ledger", help="per-round traffic of full vs partial update")
    run_flags(g, config_required=False)
    g.add_argument("--paper-sizes", action="store_true", help="use the Swin codec module sizes")

    r = sub.add_parser("partition-report", help="per-client class histogram as CSV")
    run_flags(r, config_required=False)
    return parser


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    if csv_path.exists():
        csv_path.unlink()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = fl.run_training(cfg, csv_path=csv_path, checkpoint_dir=out / "checkpoints" if cfg.checkpoint_every else None)
    meta = {
        "strategy": cfg.label,
        "seed": cfg.seed,
        "rounds": cfg.global_rounds,
        "msssim_scales": report.msssim_scales,
        "msssim_reduced_scales": report.msssim_scales is not None and report.msssim_scales < 5,
        "fedlol_uniform_fallbacks": report.fallbacks,
        "warnings": [str(w.message) for w in caught],
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    fl.save_checkpoint(out / "final.ckpt", report.final_params, cfg.global_rounds)
    last = report.final()
    print(f"{cfg.label}: round {last.round} psnr {last.eval_psnr_db:.3f} dB msssim {last.eval_msssim:.4f}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    model = SemComModel(cfg.model)
    params, round_t = fl.load_checkpoint(args.checkpoint, model.layout)
    _, eval_set = fl.prepare_data(cfg)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["snr_db", "fading", "psnr_db", "msssim", "msssim_scales", "round"])
    for snr in args.snr_eval_list:
        rng = np.random.default_rng([cfg.seed, fl.EVAL_STREAM, round_t, int(round(snr * 1000))])
        _, p, s, scales = fl.evaluate(model, params, eval_set, snr, args.fading, rng)
        writer.writerow([repr(snr), args.fading, repr(p), repr(s), scales, round_t])
    return EXIT_OK


def cmd_ledger(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    layout = reference_layout() if args.paper_sizes else SemComModel(cfg.model).layout
    k, t, p = cfg.num_clients, cfg.global_rounds, cfg.update_interval
    full = fl.ledger_summary(fl.schedule_ledger(layout, t, p, False, k), layout, k)
    part = fl.ledger_summary(fl.schedule_ledger(layout, t, p, True, k), layout, k)
    unit, scale = ("MB", MEGABYTE) if args.paper_sizes else ("B", 1)
    print(f"module sizes ({unit}):")
    for gid in GROUPS:
        print(f"  {gid:<13} {byte_size(layout, {gid}) / scale:.2f}")
    print(f"clients={k} rounds={t} interval={p}")
    print(f"full update    : {full.mean_down / k / scale:.3f} {unit}/round/direction/client")
    print(f"partial update : {part.mean_down / k / scale:.3f} {unit}/round/direction/client")
    print(f"totals (both directions, all clients): full {full.full_per_round * t / scale:.2f} {unit}, "
          f"partial {(part.total_down + part.total_up) / scale:.2f} {unit}")
    print(f"reduction      : {part.reduction_percent:.2f}%")
    return EXIT_OK


def cmd_partition_report(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    train, _ = fl.prepare_data(cfg)
    partition = fl.make_partition(cfg, train)
    hist = class_histogram(partition, train.labels, train.class_count)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["client"] + [f"class_{c}" for c in range(train.class_count)] + ["total"])
    for k, row in enumerate(hist):
        writer.writerow([k] + row.tolist() + [int(row.sum())])
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ledger": cmd_ledger,
    "partition-report": cmd_partition_report,
}


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, IngestionError) as exc:
        print(f"fedsemcom: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"fedsemcom: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


def main() -> None:
    sys.exit(run_cli())
