"""Command-line entry point wiring the library into reproducible experiments.

Exit codes: 0 success, 1 usage/config error, 2 data or numerics error.
"""

import argparse
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from . import data, dsp, gradcheck, milpool, model, train
from .config import load_run_config
from .data import Vocabulary
from .errors import InvalidConfig, WeakMtlError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_sets(pairs):
    overrides = {}
    for item in pairs or []:
        if "=" not in item:
            raise InvalidConfig(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _vocabulary(cfg) -> Vocabulary:
    vocab = Vocabulary()
    if cfg["n_scenes"] != vocab.n_scenes or cfg["n_events"] != vocab.n_events:
        raise InvalidConfig(
            f"n_scenes/n_events ({cfg['n_scenes']}/{cfg['n_events']}) must match the "
            f"built-in vocabulary ({vocab.n_scenes}/{vocab.n_events})"
        )
    return vocab


def _infer_n_frames(cfg, feature_dir, annotations):
    if cfg["n_frames"] != "auto":
        return cfg["n_frames"]
    first = data.feature_path(feature_dir, annotations[0].clip_id)
    return dsp.read_feature_file(first).n_frames


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args):
    overrides = _parse_sets(args.set)
    cfg = load_run_config(args.config, overrides)
    out = Path(args.out)
    data.synth_corpus(
        out,
        n_clips=args.clips,
        seed=args.seed,
        clip_seconds=args.clip_seconds if args.clip_seconds else cfg["clip_seconds"],
        sample_rate=cfg["sample_rate"],
    )
    print(f"wrote {args.clips} clips under {out}")
    return 0


def cmd_extract_features(args):
    overrides = _parse_sets(args.set)
    cfg = load_run_config(args.config, overrides)
    dcfg = cfg.dsp_config()
    in_dir = Path(getattr(args, "in"))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    annotations = data.load_annotations(in_dir / "annotations.jsonl", Vocabulary())
    for ann in annotations:
        wav = dsp.read_wav(in_dir / ann.source)
        fm = dsp.extract_features(wav, dcfg)
        dsp.write_feature_file(data.feature_path(out_dir, ann.clip_id), fm)
    data.save_annotations(out_dir / "annotations.jsonl", annotations)
    (out_dir / "dsp.config").write_text(cfg.dump())
    print(f"extracted {len(annotations)} feature files into {out_dir}")
    return 0


def cmd_train(args):
    overrides = _parse_sets(args.set)
    for key in ("mode", "pooling", "seed"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = str(val)
    cfg = load_run_config(args.config, overrides)
    vocab = _vocabulary(cfg)
    data_dir = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    annotations = data.load_annotations(data_dir / "annotations.jsonl", vocab)
    arch = cfg.arch_config(_infer_n_frames(cfg, data_dir, annotations))
    tcfg = cfg.train_config()
    train_anns, eval_anns = data.train_eval_split(annotations, cfg["eval_fraction"], tcfg.seed)
    hop_s = cfg.dsp_config().hop_seconds

    params, _ = train.train_loop(
        train_anns, eval_anns, data_dir, arch, tcfg, vocab, out_dir, hop_s=hop_s
    )
    report = train.evaluate(
        params, eval_anns, data_dir, vocab, hop_s, tcfg.batch_size, tcfg.threshold, tcfg.mode
    )
    (out_dir / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    data.save_annotations(out_dir / "eval_annotations.jsonl", eval_anns)
    (out_dir / "config.resolved").write_text(cfg.dump())
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "per_event_f"}))
    return 0


def cmd_evaluate(args):
    overrides = _parse_sets(args.set)
    cfg = load_run_config(args.config, overrides)
    vocab = _vocabulary(cfg)
    params = model.load_checkpoint(args.model)
    data_dir = Path(args.data)
    ann_path = Path(args.annotations) if args.annotations else data_dir / "annotations.jsonl"
    annotations = data.load_annotations(ann_path, vocab)
    hop_s = cfg.dsp_config().hop_seconds
    report = train.evaluate(
        params,
        annotations,
        data_dir,
        vocab,
        hop_s,
        cfg["batch_size"],
        cfg["threshold"],
        args.mode,
    )
    payload = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(payload)
    print(payload, end="")
    return 0


def cmd_gradcheck(args):
    ops = [args.op] if args.op else None
    if args.op and args.op not in gradcheck.CHECKS:
        raise InvalidConfig(
            f"unknown op {args.op!r}; known: {', '.join(sorted(gradcheck.CHECKS))}"
        )
    results = gradcheck.run(ops, n_seeds=args.seeds, base_seed=args.seed)
    all_ok = True
    for op, (err, tol) in results.items():
        ok = err < tol
        all_ok &= ok
        print(f"{op:24s} max_rel_err {err:.3e}  tol {tol:g}  {'PASS' if ok else 'FAIL'}")
    return 0 if all_ok else 2


def cmd_pool(args):
    lines = [ln for ln in sys.stdin.read().splitlines() if ln.strip()]
    if not lines:
        raise InvalidConfig("pool: expected a whitespace-separated vector on stdin")
    x = np.array([float(tok) for tok in lines[0].split()])
    kind = milpool.PoolingKind.parse(args.kind)
    if kind is milpool.PoolingKind.AT:
        if len(lines) > 1:
            a = np.array([float(tok) for tok in lines[1].split()])
            if len(a) != len(x):
                raise InvalidConfig("pool: attention line length != logits line length")
        else:
            a = np.zeros_like(x)  # uniform attention
        value = milpool.pool_attention(x, a)
    else:
        value = {
            milpool.PoolingKind.MP: milpool.pool_max,
            milpool.PoolingKind.AP: milpool.pool_avg,
            milpool.PoolingKind.ES: milpool.pool_expsoftmax,
        }[kind](x)
    print(f"{value:g}")
    return 0


SWEEP_ROWS = [
    ("asc-only", "none"),  # CNN (scene classification alone)
    ("sed-only", "at"),  # CNN-BiGRU (event detection alone)
    ("mtl-weak", "none"),  # multitask without the MIL bag head
    ("mtl-weak", "mp"),
    ("mtl-weak", "ap"),
    ("mtl-weak", "es"),
    ("mtl-weak", "at"),
]


def cmd_sweep(args):
    overrides = _parse_sets(args.set)
    base_cfg = load_run_config(args.config, overrides)
    vocab = _vocabulary(base_cfg)
    data_dir = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    annotations = data.load_annotations(data_dir / "annotations.jsonl", vocab)
    hop_s = base_cfg.dsp_config().hop_seconds

    rows = []
    for mode, pooling in SWEEP_ROWS:
        for seed in range(args.seeds):
            cfg = load_run_config(args.config, overrides)
            cfg.set("mode", mode)
            cfg.set("pooling", pooling)
            cfg.set("seed", str(seed))
            arch = cfg.arch_config(_infer_n_frames(cfg, data_dir, annotations))
            tcfg = cfg.train_config()
            train_anns, eval_anns = data.train_eval_split(
                annotations, cfg["eval_fraction"], seed
            )
            cell_dir = out_dir / f"{mode}-{pooling}-s{seed}"
            train.train_loop(
                train_anns, eval_anns, data_dir, arch, tcfg, vocab, cell_dir, hop_s=hop_s
            )
            # Score the final checkpoint: best-by-eval-loss selection would be
            # asymmetric across modes (the multitask eval loss is dominated by
            # the event term, so it selects for SED, not ASC).
            final = model.load_checkpoint(cell_dir / "final.ckpt")
            report = train.evaluate(
                final, eval_anns, data_dir, vocab, hop_s, tcfg.batch_size, tcfg.threshold, mode
            )
            rows.append((mode, pooling, seed, report))
            print(
                f"{mode:10s} {pooling:4s} seed {seed}: "
                f"scene_micro={_fmt(report.scene_micro_f)} "
                f"event_macro={_fmt(report.event_macro_f)}"
            )

    summary = out_dir / "summary.tsv"
    with open(summary, "w") as fh:
        fh.write(
            "mode\tpooling\tseed\tscene_micro_f\tscene_macro_f\tevent_micro_f\tevent_macro_f\n"
        )
        for mode, pooling, seed, rep in rows:
            fh.write(
                f"{mode}\t{pooling}\t{seed}\t{_fmt(rep.scene_micro_f)}\t"
                f"{_fmt(rep.scene_macro_f)}\t{_fmt(rep.event_micro_f)}\t"
                f"{_fmt(rep.event_macro_f)}\n"
            )
    _print_medians(rows)
    print(f"wrote {summary}")
    return 0


def _fmt(value):
    return "-" if value is None else f"{value:.4f}"


def _print_medians(rows):
    groups = {}
    for mode, pooling, _, rep in rows:
        groups.setdefault((mode, pooling), []).append(rep)
    print("medians over seeds:")
    for (mode, pooling), reps in groups.items():
        parts = [f"  {mode:10s} {pooling:4s}"]
        for name in ("scene_micro_f", "scene_macro_f", "event_micro_f", "event_macro_f"):
            vals = [getattr(r, name) for r in reps if getattr(r, name) is not None]
            parts.append(f"{name}={statistics.median(vals):.4f}" if vals else f"{name}=-")
        print(" ".join(parts))


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="weakmtl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip-seconds", type=float, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("extract-features", help="log-mel features for a corpus")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=train.MODES, default=None)
    p.add_argument("--pooling", choices=["mp", "ap", "es", "at", "none"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint against annotations")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--annotations", default=None)
    p.add_argument("--mode", choices=train.MODES, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    p.add_argument("--op", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=gradcheck.DEFAULT_SEEDS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pool", help="pool a logit vector read from stdin")
    p.add_argument("--kind", required=True, choices=["mp", "ap", "es", "at"])
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("sweep", help="modes x poolings x seeds summary table")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except InvalidConfig as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except WeakMtlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
