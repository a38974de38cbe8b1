"""Command-line surface: gen-data, train, eval, ablate, export-attention.

Exit codes: 0 success, 2 usage/configuration error, 3 runtime or numerical
failure. All randomness is governed by --seed (or SUPPORTSET_SEED).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .corpus import (CorpusConfigError, CorpusFormatError, CorpusSpec,
                     generate_corpus, read_corpus, write_corpus)
from .decoder import DecoderInputError
from .encoders import InputError
from .evaluation import EvaluationError, entropy_summary, export_attention
from .objectives import ObjectiveError
from .trainer import (CheckpointError, ConfigError, DivergenceError,
                      TrainConfig, ablate, grid_cells, load_checkpoint,
                      load_config, save_checkpoint, train)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

_USAGE_ERRORS = (ConfigError, CorpusConfigError, CorpusFormatError,
                 CheckpointError, ObjectiveError, EvaluationError,
                 InputError, DecoderInputError, FileNotFoundError, IsADirectoryError)


def _default_seed():
    env = os.environ.get("SUPPORTSET_SEED")
    return int(env) if env else 0


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _cmd_gen_data(args):
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as f:
            spec = CorpusSpec.from_dict(json.load(f))
        if args.seed is not None:
            spec = CorpusSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    else:
        spec = CorpusSpec(
            num_classes=args.classes,
            samples_per_class=args.per_class,
            video_len=args.video_len,
            caption_len_max=args.caption_len,
            feature_dim=args.feature_dim,
            vocab_size=args.vocab_size,
            intra_class_noise=args.noise,
            seed=args.seed if args.seed is not None else _default_seed(),
        )
    corpus = generate_corpus(spec)
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} samples ({spec.num_classes} classes) to {args.out}")
    return EXIT_OK


def _cmd_train(args):
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    corpus = read_corpus(args.corpus)
    model, report = train(config, corpus)
    save_checkpoint(model, config, corpus.header, args.out)
    report_path = args.report or (str(args.out) + ".report.json")
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(report.to_json())
    last = report.epochs[-1] if report.epochs else None
    if last is not None:
        print(f"trained {config.epochs} epochs; final total loss {last.total:.4f} "
              f"(contrast {last.contrast:.4f}, caption {last.caption:.4f})")
    if report.final_retrieval:
        t2v = report.final_retrieval["text->video"]
        print(f"held-out text->video R@1 {t2v['recall_at'].get('1', 0.0):.3f}, "
              f"MedR {t2v['median_rank']:.1f}")
    print(f"checkpoint: {args.out}\nreport: {report_path}")
    return EXIT_OK


def _cmd_eval(args):
    from .objectives import similarity_matrix
    from .trainer import batch_tensors
    import torch

    model, config, header = load_checkpoint(args.ckpt)
    corpus = read_corpus(args.corpus)
    if corpus.header.feature_dim != header.feature_dim \
            or corpus.header.vocab_size != header.vocab_size:
        raise CheckpointError(
            "corpus dimensions do not match the checkpoint "
            f"(feature_dim {corpus.header.feature_dim} vs {header.feature_dim}, "
            f"vocab_size {corpus.header.vocab_size} vs {header.vocab_size})")
    ks = [int(k) for k in args.ks.split(",")]
    from .evaluation import retrieval_metrics

    feats, vmask, tokens, tmask, _, _ = batch_tensors(corpus.samples)
    model.eval()
    with torch.no_grad():
        _, c_v, _ = model.video_encoder(feats, vmask)
        _, c_t, _ = model.text_encoder(tokens, tmask)
        sim = similarity_matrix(c_t, c_v)
    results = retrieval_metrics(sim, ks=ks)
    payload = {d: r.to_dict() for d, r in results.items()}
    for direction, res in results.items():
        recalls = " ".join(f"R@{k} {v:.3f}" for k, v in sorted(res.recall_at.items()))
        print(f"{direction}: {recalls} MedR {res.median_rank:.1f}")
    if args.out:
        _write_json(args.out, payload)
        print(f"metrics: {args.out}")
    return EXIT_OK


def _ablate_cell(payload):
    """Run one grid cell in a worker process (cells share nothing)."""
    base_dict, name, overrides, corpus_path = payload
    base = TrainConfig.from_dict(base_dict)
    corpus = read_corpus(corpus_path)
    return ablate(base, [(name, overrides)], corpus)[0]


def _cmd_ablate(args):
    with open(args.grid, "r", encoding="utf-8") as f:
        grid = json.load(f)
    base = TrainConfig.from_dict(grid.get("base", {}))
    base.validate()
    cells = grid_cells(grid)
    corpus = read_corpus(args.corpus)
    if args.parallel > 1 and len(cells) > 1:
        payloads = [(base.to_dict(), name, overrides, args.corpus)
                    for name, overrides in cells]
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_ablate_cell, payloads))
    else:
        rows = ablate(base, cells, corpus)
    for row in rows:
        if row["status"] == "ok":
            t2v = (row.get("final_retrieval") or {}).get("text->video")
            r1 = t2v["recall_at"].get("1") if t2v else None
            extra = f" R@1 {r1:.3f}" if r1 is not None else ""
            print(f"{row['name']}: ok total {row['final_loss']['total']:.4f}{extra}")
        else:
            print(f"{row['name']}: ERROR {row['error']}")
    _write_json(args.out, {"rows": rows})
    print(f"table: {args.out}")
    return EXIT_OK


def _cmd_export_attention(args):
    model, config, _ = load_checkpoint(args.ckpt)
    corpus = read_corpus(args.corpus)
    if config.variant == "none":
        raise ConfigError("checkpoint was trained with variant 'none'; "
                          "no support attention to export")
    bs = args.batch_size or config.batch_size
    start = args.batch_index * bs
    batch = corpus.samples[start:start + bs]
    if len(batch) < 1 or (config.variant == "cross" and len(batch) < 2):
        raise ConfigError(
            f"batch index {args.batch_index} selects {len(batch)} samples; not enough "
            f"for variant {config.variant!r}")
    dump = export_attention(model, batch, config, args.out,
                            png_path=args.png)
    stats = entropy_summary(dump)
    print(f"exported {dump.weights.shape[0]}x{dump.weights.shape[1]} attention map "
          f"({dump.variant}, T={dump.temperature}) to {args.out}")
    print(f"row entropy mean {stats['mean']:.3f} (min {stats['min']:.3f}, "
          f"max {stats['max']:.3f})")
    if args.png:
        print(f"heatmap: {args.png}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="supportset",
        description="Synthetic-corpus lab for contrastive + cross-captioning "
                    "video-text representation learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus file")
    p.add_argument("--spec", help="JSON file with a corpus spec")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=8)
    p.add_argument("--video-len", type=int, default=8)
    p.add_argument("--caption-len", type=int, default=12)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--config", required=True, help="JSON training config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--report", help="report JSON path (default: <out>.report.json)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint on a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run a grid of training cells")
    p.add_argument("--grid", required=True, help="JSON grid file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("export-attention", help="dump support-attention weights")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--batch-index", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=None,
                   help="override the training batch size for the dump")
    p.add_argument("--out", required=True)
    p.add_argument("--png", help="also render a heatmap image")
    p.set_defaults(func=_cmd_export_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ArithmeticError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
