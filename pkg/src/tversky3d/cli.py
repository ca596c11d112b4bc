"""Command line entry point: ``tversky3d {gen,train,eval,sweep,gradcheck,shapes}``.

Exit codes: 0 success, 1 validation failure, 2 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, gradcheck, harness, metrics, unet
from .errors import ConfigError, FormatError

log = logging.getLogger("tversky3d")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _train_config(path) -> harness.TrainConfig:
    return harness.TrainConfig.from_dict(_load_json(path)) if path else harness.TrainConfig()


def _read_dir(path) -> list[data.LabeledVolume]:
    files = sorted(Path(path).glob("*.tvol"))
    if not files:
        raise FileNotFoundError(f"no .tvol files in {path}")
    return [data.read_volume(f) for f in files]


def cmd_gen(args) -> int:
    cfg = data.SynthConfig.from_dict(_load_json(args.config)) if args.config else data.SynthConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.subjects):
        vol = data.generate_subject(cfg, i)
        data.write_volume(out / f"{vol.subject_id}.tvol", vol)
        print(f"{vol.subject_id}: foreground {100 * vol.foreground_fraction:.3f}%")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args.config)
    seed = cfg.seeds[0]
    synth, net, split_seed, shuffle_seed = harness.seeded_configs(cfg, seed)
    subjects = _read_dir(args.data) if args.data else data.generate_subjects(synth, cfg.n_subjects)
    fold_a, fold_b = data.two_fold_split(subjects, split_seed)
    train = fold_a if args.fold == "a" else fold_b
    res = harness.train_fold(train, cfg, net, shuffle_seed)
    unet.save_checkpoint(args.out, res.params)
    print(f"trained on fold {args.fold} ({len(train)} subjects), "
          f"loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}; wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    params = unet.load_checkpoint(args.ckpt)
    subjects = _read_dir(args.data)
    rows = harness.evaluate_fold(params, subjects, args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for r in rows:
        metrics.write_pr_csv(out.parent / f"pr_{r.subject_id}.csv", r.curve)
    report = {
        "threshold": args.threshold,
        "subjects": [r.row() for r in rows],
        "macro": harness.macro_average(rows),
        "micro": harness.micro_average(rows),
    }
    out.write_text(json.dumps(report, indent=1, sort_keys=True))
    m = report["macro"]
    print(" ".join(f"{k}={100 * m[k]:.2f}" for k in harness.METRIC_NAMES))
    return 0


def _parse_pairs(text: str) -> list[tuple[float, float]]:
    try:
        return [tuple(float(v) for v in item.split(":")) for item in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --pairs {text!r}; expected a:b,a:b,...") from exc


def cmd_sweep(args) -> int:
    cfg = _train_config(args.config)
    pairs = _parse_pairs(args.pairs) if args.pairs else harness.TABLE1_PAIRS
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    report = harness.run_sweep(cfg, pairs, seeds, out_dir=args.out,
                               progress=lambda msg: log.info(msg))
    print(report.table_markdown(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(network=not args.skip_network)
    for r in results:
        print(r)
    return 0 if all(r.passed for r in results) else 1


def cmd_shapes(args) -> int:
    if args.paper:
        cfg = unet.PAPER_CONFIG
    else:
        cfg = harness.TrainConfig.from_dict(_load_json(args.config)).net if args.config else unet.NetConfig()
    for layer in unet.plan_shapes(cfg):
        fmt = lambda s: ",".join(map(str, s))  # noqa: E731
        print(f"{layer.name:<4} {layer.kind:<5} {fmt(layer.input_shape):>18} -> {fmt(layer.output_shape)}")
    if args.paper:
        problems = unet.verify_paper_plan()
        for p in problems:
            print("MISMATCH", p)
        print("plan matches the reference table" if not problems else f"{len(problems)} mismatches")
        return 1 if problems else 0
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tversky3d", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic TVOL1 volumes")
    p.add_argument("--config", help="SynthConfig JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=10)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on one cross-validation fold")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--fold", choices=["a", "b"], required=True)
    p.add_argument("--data", help="directory of .tvol files (generated from the config if omitted)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a directory of volumes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="report JSON; PR CSVs go next to it")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/test every (alpha, beta) pair over both folds")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--pairs", help="e.g. 0.5:0.5,0.3:0.7 (default: the five Table 1 pairs)")
    p.add_argument("--seeds", help="comma separated, overrides the config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference checks; nonzero exit on failure")
    p.add_argument("--skip-network", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("shapes", help="print the layer shape plan")
    p.add_argument("--paper", action="store_true", help="use the full-size configuration and verify it")
    p.add_argument("--config", help="TrainConfig JSON whose net section is planned")
    p.set_defaults(func=cmd_shapes)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    np.seterr(over="raise", invalid="raise")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
