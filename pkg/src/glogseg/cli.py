"""Command line entry point: train, eval, gradcheck, ablate, export-filters."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import plotting
from .backbone import load_checkpoint, save_checkpoint
from .data import SynthConfig, generate_samples
from .filters import export_filters
from .gradcheck import run_all
from .metrics import evaluate_dataset, write_metrics_csv
from .train import (TrainConfig, ablation_ordering_holds, config_from_dict, config_to_dict, load_config,
                    run_ablation, train, write_ablation_csv, write_loss_csv)

log = logging.getLogger("glogseg")


def _configs(path):
    if path is None:
        return TrainConfig(), SynthConfig()
    return load_config(path)


def cmd_train(args) -> int:
    tcfg, scfg = _configs(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = train(tcfg, scfg, on_epoch=lambda e, lo, vd: log.info("epoch %3d  loss %.5f  val_dice %.4f", e, lo, vd))
    meta = config_to_dict(tcfg, scfg)
    save_checkpoint(out / "model.glog", rep.weights, meta)
    write_loss_csv(out / "loss.csv", rep)
    if rep.final_metrics is not None:
        write_metrics_csv(out / "val_metrics.csv", rep.final_metrics)
        plotting.plot_metrics(rep.final_metrics, out / "val_metrics.png")
    export_filters(rep.initial_bank, out / "filters", prefix="init_")
    export_filters(rep.weights.bank, out / "filters", prefix="final_")
    plotting.plot_training_curves(rep.losses, rep.val_dice, out / "training_curves.png")
    plotting.plot_filter_banks(rep.initial_bank, rep.weights.bank, out / "filters.png")
    with open(out / "config.json", "w") as f:
        json.dump(meta, f, indent=2)
    print(f"trained {tcfg.epochs} epochs in {rep.wall_time:.1f}s; final loss {rep.losses[-1]:.5f}, "
          f"val mean Dice {rep.val_dice[-1]:.4f}; wrote {out}")
    return 0


def cmd_eval(args) -> int:
    weights, meta = load_checkpoint(args.checkpoint)
    _, scfg = config_from_dict(meta) if meta else (None, SynthConfig(n_classes=weights.config.n_classes))
    scfg = dataclasses.replace(scfg, seed=args.data_seed)
    samples = generate_samples(scfg, args.n_samples or scfg.n_val, args.data_seed)
    report = evaluate_dataset(weights, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", report)
    plotting.plot_metrics(report, out / "metrics.png")
    for cid, d, h in report.rows():
        print(f"{cid:>5s}  dice {d:.6f}  hd95 {h:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(full=args.full, seed=args.seed)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{r.name:28s} worst rel err {r.worst:.3e}  (tol {r.tol:.0e}, {r.cases} cases)  {status}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    tcfg, scfg = _configs(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(tcfg, scfg, on_variant=lambda r: log.info(
        "%-6s +%d params  dice %.4f", r["variant"], r["extra_params"], r["mean_dice"]))
    write_ablation_csv(out / "ablation.csv", rows)
    plotting.plot_ablation(rows, out / "ablation.png")
    for r in rows:
        print(f"{r['variant']:6s} extra_params={r['extra_params']:3d} mean_dice={r['mean_dice']:.4f}")
    verdict = "holds" if ablation_ordering_holds(rows) else "does not hold"
    print(f"combined >= single-filter variants: {verdict} (informational)")
    return 0


def cmd_export(args) -> int:
    weights, _ = load_checkpoint(args.checkpoint)
    paths = export_filters(weights.bank, args.out)
    print(f"wrote {len(paths)} files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glogseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on the synthetic task")
    t.add_argument("--config", help="JSON with 'train' and 'synth' sections")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on freshly generated data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-seed", type=int, required=True)
    e.add_argument("--n-samples", type=int, default=None)
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--full", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="none / gabor / log / glog variants")
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-filters", help="PGM + CSV dump of a checkpoint's filters")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
