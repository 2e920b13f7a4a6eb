"""``ticketgan`` command line: find-ticket, train, eval, subset, plot."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .checkpoint import CheckpointError, read_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import ManifestError
from .sparsity import MaskFormatError, MaskPair
from .training import NonFiniteLossError

log = logging.getLogger("ticketgan")

EXIT_CONFIG, EXIT_MISSING, EXIT_CHECKPOINT, EXIT_DIVERGED = 2, 3, 4, 5


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    return Path(args.out) if args.out else cfg.path("out")


def cmd_subset(cfg: ExperimentConfig, args) -> int:
    from .data import make_few_shot, make_subset

    out = _out_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    n, seed, source = cfg["data.size"], cfg["seed"], cfg["data.source"]
    if cfg["data.few_shot"]:
        manifest = make_few_shot(n, cfg["data.few_shot"], seed, source)
    else:
        manifest = make_subset(n, cfg["data.fraction"], seed, source)
    path = out / "manifest.txt"
    manifest.write(path)
    print(f"wrote {path} ({len(manifest)} of {n} indices)")
    return 0


def cmd_find_ticket(cfg: ExperimentConfig, args) -> int:
    from .pipeline import find_ticket, prepare

    out = _out_dir(cfg, args)
    setup = prepare(cfg)
    result = find_ticket(setup, out)
    last = result.rounds[-1] if result.rounds else None
    if last is None:
        print(f"wrote dense masks to {out} (0 rounds, sparsity 0.00%)")
    else:
        print(f"wrote {out}/masks_g.tkm, masks_d.tkm: sparsity G {100 * last.sparsity_g:.2f}%, "
              f"D {100 * last.sparsity_d:.2f}% (target {100 * last.target:.2f}%)")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    from .pipeline import load_masks, prepare, train

    out = _out_dir(cfg, args)
    setup = prepare(cfg)
    masks = load_masks(cfg)
    init = None
    init_path = cfg.path("train.init")
    if init_path is not None:
        ck = read_checkpoint(init_path)
        init = (ck.theta0, ck.phi0)
        if masks is None and ck.mask_g is not None:
            masks = MaskPair(ck.mask_g, ck.mask_d)
    resume = cfg.path("train.resume")
    result = train(setup, out, masks=masks, init=init, resume=resume, stop_at=args.stop_at)
    total = result.total_iterations
    (out / "run.json").write_text(json.dumps({
        "base_iterations": cfg["train.iterations"], "total_iterations": total,
        "iteration_multiplier": total // cfg["train.iterations"], "completed_iterations": result.state.iteration,
        "config_hash": cfg.hash(),
    }, indent=2) + "\n")
    (out / "config.txt").write_text(cfg.to_text())
    final = result.rows[-1] if result.rows else None
    if final:
        print(f"iteration {final['iteration']}: fid={final['fid']:.4f} d_acc_train={final['d_acc_train']:.3f} "
              f"d_acc_val={final['d_acc_val']:.3f}")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    from .pipeline import MetricLog, evaluate, prepare

    if not args.checkpoint:
        print("eval needs --checkpoint", file=sys.stderr)
        return EXIT_MISSING
    out = _out_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    ck = read_checkpoint(args.checkpoint)
    setup = prepare(cfg)
    masks = MaskPair(ck.mask_g, ck.mask_d) if ck.mask_g is not None else None
    row = evaluate(setup, ck.theta, ck.phi, ck.iteration, masks)
    (out / "eval.json").write_text(json.dumps({"checkpoint": str(args.checkpoint), **row}, indent=2) + "\n")
    MetricLog(out / "eval.csv").append(row)
    print(json.dumps(row))
    return 0


def cmd_plot(cfg: ExperimentConfig, args) -> int:
    from . import plotting
    from .pipeline import read_csv

    out = _out_dir(cfg, args)
    inputs = [Path(p) for p in args.inputs] if args.inputs else sorted(out.glob("*.csv"))
    missing = [p for p in inputs if not p.exists()]
    if missing or not inputs:
        print(f"no input CSVs found ({', '.join(map(str, missing)) or out})", file=sys.stderr)
        return EXIT_MISSING
    figures = out / "figures"
    metric_runs, sparsity_rows, bars = {}, None, {}
    for p in inputs:
        rows = read_csv(p)
        if not rows:
            continue
        cols = set(rows[0])
        label = p.parent.name if p.stem == "metrics" else p.stem
        if "fid" in cols and "iteration" in cols:
            metric_runs[label] = rows
        elif "round" in cols:
            sparsity_rows = rows
        elif {"label", "value"} <= cols:
            bars.update({r["label"]: float(r["value"]) for r in rows})
    written: List[Path] = []
    if metric_runs:
        written.append(plotting.plot_metric_curves(metric_runs, figures / "fid_is_curves.png"))
        written.append(plotting.plot_accuracy_gap(metric_runs, figures / "d_accuracy_gap.png"))
        points = [(float(r[-1]["sparsity_g"]), float(r[-1]["fid"])) for r in metric_runs.values()]
        written.append(plotting.plot_fid_vs_sparsity({"runs": points}, figures / "fid_vs_sparsity.png"))
    if sparsity_rows:
        written.append(plotting.plot_sparsity_schedule(sparsity_rows, figures / "sparsity_schedule.png"))
    if bars:
        written.append(plotting.plot_ablation_bars(bars, figures / "ablation.png"))
    for w in written:
        print(f"wrote {w}")
    return 0


COMMANDS = {
    "find-ticket": cmd_find_ticket,
    "train": cmd_train,
    "eval": cmd_eval,
    "subset": cmd_subset,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ticketgan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file (defaults apply when omitted)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("--out", help="output directory (overrides the 'out' key)")
        if name == "eval":
            p.add_argument("--checkpoint", help="TKGN checkpoint to evaluate")
        if name == "plot":
            p.add_argument("--inputs", nargs="*", help="CSV files to render (default: *.csv in --out)")
        if name == "train":
            p.add_argument("--stop-at", type=int, default=None, help="stop after this iteration (for resuming)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.config and not Path(args.config).exists():
            print(f"config file not found: {args.config}", file=sys.stderr)
            return EXIT_MISSING
        cfg = load_config(args.config, args.override)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except (CheckpointError, MaskFormatError, ManifestError) as err:
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FileNotFoundError as err:
        print(f"missing input: {err}", file=sys.stderr)
        return EXIT_MISSING
    except NonFiniteLossError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
