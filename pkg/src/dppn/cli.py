"""Command line entry points.

    dppn synth    --config <file> --out <dir>
    dppn train    --config <file> --data <manifest> --out <ckpt-dir>
    dppn eval     --ckpt <dir> --data <manifest> [--csv <path>]
    dppn ablate   --grid <file> --data <manifest> --seeds <n> --out <csv>
    dppn localize --ckpt <dir> --data <manifest> --samples <ids> --out <dir>

Config files are UTF-8 key=value. Train configs use the keys K, lambda, D,
lr, batch, epochs, seed, variant, agg, f_ar, f_cs, eval_every; synth configs
use channels, regions, attributes, seen, unseen, samples, density, strength,
noise, seed (missing keys fall back to the reference benchmark values).

Exit status is 0 on success; on failure a single ``error: ...`` line goes to
stderr and the status is nonzero.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from dppn import evaluate as ev
from dppn.data import (
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    read_kv,
    save_dataset,
)
from dppn.model import (
    DppnModel,
    TrainConfig,
    config_from_kv,
    load_checkpoint,
    save_checkpoint,
    train,
)


def _synth_config(path) -> SyntheticConfig:
    kv = read_kv(path)
    typed = {f.name: f.type for f in fields(SyntheticConfig)}
    values = {}
    for key, raw in kv.items():
        if key not in typed:
            raise ValueError(f"unknown synth config key {key!r}")
        caster = float if key in ("density", "strength", "noise") else int
        values[key] = caster(raw)
    return SyntheticConfig(**values)


def _cmd_synth(args) -> int:
    cfg = _synth_config(args.config) if args.config else SyntheticConfig()
    ds = generate_synthetic(cfg)
    manifest = save_dataset(ds, args.out)
    print(f"wrote {manifest} ({len(ds.train_x)} train, {len(ds.test_x)} test samples, "
          f"{ds.n_categories} categories)")
    return 0


def _cmd_train(args) -> int:
    cfg = config_from_kv(read_kv(args.config)) if args.config else TrainConfig()
    ds = load_dataset(args.data)
    model = DppnModel(cfg, ds.channels, ds.n_attributes, len(ds.seen_ids))

    def show(entry):
        line = f"epoch={entry['epoch']} loss={entry['loss']:.6f}"
        if "h" in entry:
            line += (f" mca_u={entry['mca_u']:.2f} mca_s={entry['mca_s']:.2f}"
                     f" H={entry['h']:.2f}")
        print(line)

    ckpt, history = train(ds, model, callback=show)
    out = save_checkpoint(ckpt, args.out)
    log_lines = ["epoch,loss,mca_u,mca_s,h"]
    for e in history:
        if "h" in e:
            log_lines.append(f"{e['epoch']},{e['loss']:.6f},{e['mca_u']:.4f},"
                             f"{e['mca_s']:.4f},{e['h']:.4f}")
        else:
            log_lines.append(f"{e['epoch']},{e['loss']:.6f},,,")
    (out / "train_log.csv").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    print(f"wrote checkpoint to {out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    report = ev.evaluate_gzsl(ckpt, ds)
    print(f"MCA_u={report.mca_u:.2f} MCA_s={report.mca_s:.2f} H={report.h:.2f}")
    print(f"confusion: seen_as_seen={report.confusion['seen_as_seen']} "
          f"seen_as_unseen={report.confusion['seen_as_unseen']} "
          f"unseen_as_seen={report.confusion['unseen_as_seen']} "
          f"unseen_as_unseen={report.confusion['unseen_as_unseen']}")
    if args.csv:
        unseen = set(ds.unseen_ids.tolist())
        lines = ["class_id,domain,accuracy"]
        for cid, acc in sorted(report.per_class.items()):
            domain = "unseen" if cid in unseen else "seen"
            lines.append(f"{cid},{domain},{acc:.4f}")
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"wrote per-class accuracies to {args.csv}")
    return 0


def _cmd_ablate(args) -> int:
    ds = load_dataset(args.data)
    grid = ev.parse_grid(args.grid)

    def show(row):
        if "error" in row:
            print(f"{row['variant']} seed={row['seed']} FAILED {row['error']}")
        else:
            print(f"{row['variant']} seed={row['seed']} H={row['h']:.2f}")

    _, summary, csv_text = ev.run_ablation(grid, ds, args.seeds, callback=show)
    Path(args.out).write_text(csv_text, encoding="utf-8")
    print(ev.summary_table(summary))
    print(f"wrote {args.out}")
    return 0


def _cmd_localize(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    ids = [int(tok) for tok in args.samples.split(",") if tok.strip()]
    if not ids:
        raise ValueError("no sample ids given")
    written = ev.export_localization(ckpt, ds, ids, args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dppn", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--config", help="synth config file (defaults to the reference benchmark)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", help="train config file (defaults to the full model)")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="GZSL evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--csv", help="write per-class accuracies here")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--grid", required=True, help="grid file, one variant per line")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--seeds", type=int, required=True, help="seeds per variant (0..n-1)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("localize", help="export similarity matrices for test samples")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--samples", required=True, help="comma-separated test sample ids")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_localize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
