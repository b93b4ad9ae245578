"""Command-line entry point: gen-data, train, eval, ablate, bench."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, SYNTHETIC_DEFAULTS, build_dataset
from .data import gen_synthetic, load_dataset, save_dataset
from .isc import MaskStrategy, count_interaction_macs
from .trainer import Checkpoint, ConfigError, TrainConfig, evaluate, train

log = logging.getLogger("hrg")

AXES = {
    "modules": [("baseline", {"disable_isc": True, "disable_ikt": True}),
                ("isc", {"disable_isc": False, "disable_ikt": True}),
                ("ikt", {"disable_isc": True, "disable_ikt": False}),
                ("full", {"disable_isc": False, "disable_ikt": False})],
    "mask": [(m.value, {"mask_strategy": m.value}) for m in MaskStrategy],
    "kappa": [(str(k), {"kappa": k}) for k in (0.3, 0.5, 0.7, 0.9, 1.0)],
    "prototypes": [(str(m), {"M": m}) for m in (1, 2, 3, 4, 8)],
    "momentum": [(str(mu), {"mu": mu}) for mu in (0.0, 0.5, 0.9, 0.99, 0.999)],
    "bank_size": [(str(g), {"G": g}) for g in range(10, 101, 10)],
    "order": [(o, {"module_order": o}) for o in ("isc_ikt", "ikt_isc")],
}

ABLATION_COLUMNS = ["axis", "setting", "seed", "accuracy", "ci95", "num_tasks"]
BENCH_COLUMNS = ["N", "K", "L", "T", "C", "heads", "factorized_score_macs", "dense_score_macs",
                 "factorized_value_macs", "dense_value_macs", "factorized_ratio", "dense_ratio"]

OVERRIDES = [
    # flag, config field, type
    ("--epochs", "epochs", int),
    ("--episodes-per-epoch", "episodes_per_epoch", int),
    ("--lr", "learning_rate", float),
    ("--seed", "seed", int),
    ("--way", "N", int),
    ("--shot", "K", int),
    ("--queries", "L", int),
    ("--mask-strategy", "mask_strategy", str),
    ("--metric", "metric", str),
    ("--kappa", "kappa", float),
    ("--momentum", "mu", float),
    ("--prototypes", "M", int),
    ("--bank-size", "G", int),
    ("--gamma", "gamma", float),
    ("--tau", "tau", float),
    ("--module-order", "module_order", str),
]


def _add_overrides(p: argparse.ArgumentParser) -> None:
    for flag, dest, typ in OVERRIDES:
        kw = {}
        if dest == "mask_strategy":
            kw["choices"] = [m.value for m in MaskStrategy]
        elif dest == "metric":
            kw["choices"] = ["otam", "bimhm"]
        elif dest == "module_order":
            kw["choices"] = ["isc_ikt", "ikt_isc"]
        p.add_argument(flag, dest=dest, type=typ, default=None, **kw)
    p.add_argument("--disable-isc", dest="disable_isc", action="store_true", default=None)
    p.add_argument("--disable-ikt", dest="disable_ikt", action="store_true", default=None)
    p.add_argument("--output-dir", dest="output_dir", default=None)


def _load_run_config(args) -> RunConfig:
    run = RunConfig.load(args.config)
    changes = {dest: getattr(args, dest) for _, dest, _ in OVERRIDES if getattr(args, dest, None) is not None}
    for flag in ("disable_isc", "disable_ikt"):
        if getattr(args, flag, None):
            changes[flag] = True
    if changes:
        run.train = run.train.replace(**changes)
    if getattr(args, "output_dir", None):
        run.output_dir = args.output_dir
    return run


def _write_csv(rows: list, columns: list, out) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    text = buf.getvalue()
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    return text


# commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    split_sizes = [int(x) for x in args.split_sizes.split(",")]
    ds = gen_synthetic(args.num_classes, args.videos_per_class, args.T, args.C, args.noise_sigma,
                       args.warp_strength, args.seed, split_sizes, args.n_freq, args.latent_dim,
                       args.shared_weight)
    try:
        index = save_dataset(ds, args.out)
    except OSError as exc:
        print(f"error: cannot write dataset to {args.out}: {exc}", file=sys.stderr)
        return 1
    n_videos = sum(len(v) for v in ds.sequences.values())
    summary = {"index": str(index), "classes": len(ds.sequences), "videos": n_videos, "T": ds.T, "C": ds.C,
               "splits": {k: len(v) for k, v in ds.splits.items()}}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    run = _load_run_config(args)
    dataset = build_dataset(run.dataset, run.train)
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as fh:
        def record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        ckpt = train(run.train, dataset, on_step=record)
    ckpt.dataset = run.dataset
    ckpt_path = out / "checkpoint.hrgc"
    ckpt.save(ckpt_path)
    print(json.dumps({"checkpoint": str(ckpt_path), "log": str(log_path), "steps": ckpt.step}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    if args.index:
        dataset = load_dataset(args.index)
    elif ckpt.dataset is not None:
        dataset = build_dataset(ckpt.dataset, ckpt.config)
    else:
        print("error: checkpoint carries no dataset section; pass --index", file=sys.stderr)
        return 2
    report = evaluate(ckpt, dataset, args.split, args.tasks, args.seed)
    log.info("evaluated %d tasks in %.2fs", report.num_tasks, report.wall_clock_s)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def ablation_rows(run: RunConfig, axis: str, seeds: list, tasks: int, eval_seed: int) -> list:
    dataset = build_dataset(run.dataset, run.train)
    rows = []
    for name, change in AXES[axis]:
        for seed in seeds:
            cfg = run.train.replace(seed=seed, **change)
            ckpt = train(cfg, dataset)
            rep = evaluate(ckpt, dataset, "test", tasks, eval_seed)
            log.info("%s=%s seed=%d acc=%.4f", axis, name, seed, rep.mean)
            rows.append({"axis": axis, "setting": name, "seed": seed, "accuracy": f"{rep.mean:.6f}",
                         "ci95": f"{rep.ci95:.6f}", "num_tasks": tasks})
    return rows


def cmd_ablate(args) -> int:
    run = _load_run_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [run.train.seed]
    rows = ablation_rows(run, args.axis, seeds, args.tasks, args.eval_seed)
    sys.stdout.write(_write_csv(rows, ABLATION_COLUMNS, args.out))
    return 0


def bench_rows(N: int, K: int, L: int, Ts: list, C: int, heads: int) -> list:
    rows, prev = [], None
    for T in Ts:
        f = count_interaction_macs("factorized", N, K, L, T, C, heads)
        d = count_interaction_macs("dense", N, K, L, T, C, heads)
        row = {"N": N, "K": K, "L": L, "T": T, "C": C, "heads": heads,
               "factorized_score_macs": f["score"], "dense_score_macs": d["score"],
               "factorized_value_macs": f["value"], "dense_value_macs": d["value"],
               "factorized_ratio": "", "dense_ratio": ""}
        if prev is not None and T == 2 * prev["T"]:
            row["factorized_ratio"] = f"{f['score'] / prev['factorized_score_macs']:.1f}"
            row["dense_ratio"] = f"{d['score'] / prev['dense_score_macs']:.1f}"
        rows.append(row)
        prev = row
    return rows


def cmd_bench(args) -> int:
    sizes = dict(kv.split("=") for kv in args.sizes.split(",")) if args.sizes else {}
    unknown = set(sizes) - {"N", "K", "L", "C", "heads"}
    if unknown:
        print(f"error: unknown size keys {sorted(unknown)}", file=sys.stderr)
        return 2
    Ts = [int(t) for t in args.T.split(",")]
    rows = bench_rows(int(sizes.get("N", 5)), int(sizes.get("K", 1)), int(sizes.get("L", 5)), Ts,
                      int(sizes.get("C", 32)), int(sizes.get("heads", 1)))
    sys.stdout.write(_write_csv(rows, BENCH_COLUMNS, args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hrg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset (index + HRG1 feature files)")
    g.add_argument("--out", required=True)
    g.add_argument("--num-classes", type=int, default=SYNTHETIC_DEFAULTS["num_classes"])
    g.add_argument("--videos-per-class", type=int, default=SYNTHETIC_DEFAULTS["videos_per_class"])
    g.add_argument("--T", type=int, default=8)
    g.add_argument("--C", type=int, default=32)
    g.add_argument("--noise-sigma", type=float, default=SYNTHETIC_DEFAULTS["noise_sigma"])
    g.add_argument("--warp-strength", type=float, default=SYNTHETIC_DEFAULTS["warp_strength"])
    g.add_argument("--split-sizes", default=",".join(map(str, SYNTHETIC_DEFAULTS["split_sizes"])))
    g.add_argument("--n-freq", type=int, default=SYNTHETIC_DEFAULTS["n_freq"])
    g.add_argument("--latent-dim", type=int, default=SYNTHETIC_DEFAULTS["latent_dim"])
    g.add_argument("--shared-weight", type=float, default=SYNTHETIC_DEFAULTS["shared_weight"])
    g.add_argument("--seed", type=int, default=SYNTHETIC_DEFAULTS["seed"])
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    _add_overrides(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint; prints an EvalReport as JSON")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tasks", type=int, default=2000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--index", default=None, help="feature index to evaluate on instead of the checkpoint's dataset")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate every setting on one ablation axis; CSV output")
    a.add_argument("--config", required=True)
    a.add_argument("--axis", required=True, choices=sorted(AXES))
    a.add_argument("--seeds", default=None, help="comma-separated training seeds (default: config seed)")
    a.add_argument("--tasks", type=int, default=2000)
    a.add_argument("--eval-seed", type=int, default=0)
    a.add_argument("--out", default=None)
    _add_overrides(a)
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="MAC counts of factorized versus dense inter-video attention; CSV output")
    b.add_argument("--sizes", default="N=5,K=1,L=5,C=32,heads=1")
    b.add_argument("--T", default="1,2,4,8,16")
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = os.environ.get("HRG_THREADS")
    if threads is not None and (not threads.isdigit() or int(threads) < 1):
        parser.error("HRG_THREADS must be a positive integer")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
