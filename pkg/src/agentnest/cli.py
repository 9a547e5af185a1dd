"""Command-line interface: build-vocab | train | embed | generate |
check-grads | eval.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numeric failure (non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus, generation as G
from .config import LevelConfig, RunConfig
from .hier_encoder import dvt_to_records
from .numerics import checkpoint, tensor as T
from .trainer import Model, NumericFailure, Trainer, check_gradients, step_rng

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _load_config(args):
    if args.config:
        cfg = RunConfig.from_file(args.config)
    else:
        cfg = RunConfig(seed=0)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _load_corpus_batches(cfg, corpus_dir, vocab):
    trees = corpus.load_corpus_dir(corpus_dir)
    ids = [corpus.encode_ids(t, vocab) for t in trees]
    return corpus.make_batches(ids, cfg.caps, cfg.batch_size)


def _restore_model(cfg, vocab, ckpt_path):
    model = Model(cfg, vocab.size)
    checkpoint.load_into(model.store, ckpt_path)
    return model


# -- subcommands ---------------------------------------------------------------------


def cmd_build_vocab(args):
    trees = corpus.load_corpus_dir(args.corpus)
    vocab = corpus.build_vocab(trees, min_freq=args.min_freq, max_size=args.max_size)
    vocab.save(args.out)
    print(f"vocabulary of {vocab.size} tokens written to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    if args.staged:
        cfg.staged = True
    vocab_path = args.vocab or cfg.vocab_path
    corpus_dir = args.corpus or cfg.corpus_dir
    if not vocab_path or not corpus_dir:
        raise ValueError("train needs --corpus and --vocab (or corpus_dir/"
                         "vocab_path in the config)")
    vocab = corpus.Vocabulary.load(vocab_path)
    batches = _load_corpus_batches(cfg, corpus_dir, vocab)
    out_dir = Path(args.out or cfg.out_dir or "run")
    trainer = Trainer(cfg, vocab, batches, out_dir=out_dir)
    if args.resume:
        start = trainer.resume(args.resume)
        log.info("resuming from step %d", start)
    metrics = args.metrics or out_dir / "metrics.jsonl"
    ckpt = trainer.train(metrics_path=metrics, checkpoint_path=out_dir / "model.ckpt")
    report = trainer.evaluate()
    print(f"checkpoint: {ckpt}")
    print(f"final total loss: {report['total']:.6f}")
    return EXIT_OK


def cmd_embed(args):
    cfg = _load_config(args)
    vocab = corpus.Vocabulary.load(args.vocab)
    model = _restore_model(cfg, vocab, args.checkpoint)
    tree = corpus.parse_nested(Path(args.doc).read_text(encoding="utf-8"))
    ids = [corpus.encode_ids(tree, vocab)]
    (batch,) = corpus.make_batches(ids, cfg.caps, batch_size=1)
    with T.no_grad():
        dvt = model.encoder.build_dvt(batch)
    records = dvt_to_records(dvt)
    payload = json.dumps({"document": str(args.doc), "vectors": records}, indent=2)
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
        print(f"DVT written to {args.out}")
    else:
        print(payload)
    return EXIT_OK


def cmd_generate(args):
    cfg = _load_config(args)
    vocab = corpus.Vocabulary.load(args.vocab)
    model = _restore_model(cfg, vocab, args.checkpoint)
    rng = step_rng(cfg.seed if args.seed is None else args.seed, 0, purpose=9)
    top = cfg.level_names[-1]
    depth = args.levels or (len(cfg.level_names) - 1)
    if depth != len(cfg.level_names) - 1 and not args.dump_dvt:
        raise SystemExit(EXIT_USAGE)

    noise = model.noise.sample(top, rng)
    with T.no_grad():
        doc_vec = model.generators.generate(top, noise[None, :]).data[0]
        answers = None
        if model.pndb is not None:
            pndb_noise = model.noise.sample("token", rng, n=model.pndb.n_questions)
            answers = model.pndb.generate_answers(doc_vec, pndb_noise).data
    tree = G.hierarchical_decode(model.stack, model.encoder, doc_vec,
                                 pndb=model.pndb, answers=answers)
    edit_eps = cfg.edit_eps if args.edit_eps is None else args.edit_eps
    edit_steps = cfg.edit_steps if args.edit_steps is None else args.edit_steps
    tree = G.copyedit_pass(model.stack, model.encoder, model.heads, tree,
                           edit_eps, edit_steps, pndb=model.pndb, answers=answers)
    doc, flags = G.emit_text(tree, vocab)
    payload = {"document": doc, "flags": flags}
    if args.dump_dvt:
        payload["dvt"] = _generated_tree_records(tree, depth, cfg)
    if args.dump_answers and answers is not None:
        payload["answers"] = [[float(v) for v in row] for row in answers]
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"generated document written to {args.out}")
    else:
        print(text)
    return EXIT_OK


def _generated_tree_records(tree, depth, cfg):
    top_idx = len(cfg.level_names) - 1
    records = []

    def walk(node, path):
        level_idx = cfg.level_names.index(node.level)
        if top_idx - level_idx > depth:
            return
        records.append({"level": node.level, "path": path,
                        "vector": [float(v) for v in node.vector]})
        for i, child in enumerate(node.children):
            walk(child, path + [i])

    walk(tree, [0])
    return records


def cmd_check_grads(args):
    cfg = _load_config(args) if args.config else _default_check_config(args.seed)
    model, batch = _synthetic_check_setup(cfg)
    reports = check_gradients(model, batch, h=args.h, tol=args.tol,
                              coords=args.coords)
    failed = []
    for name in sorted(reports):
        rep = reports[name]
        status = "PASS" if rep.ok(args.tol) else "FAIL"
        print(f"[{status}] {name:24s} max_rel_error={rep.max_rel_error:.3e} "
              f"(worst: {rep.worst_param}, {rep.checked_coords} coords)")
        if not rep.ok(args.tol):
            failed.append(name)
    if args.out:
        Path(args.out).write_text(json.dumps(
            {name: {"max_rel_error": rep.max_rel_error, "worst": rep.worst_param,
                    "ok": rep.ok(args.tol)} for name, rep in reports.items()},
            indent=2), encoding="utf-8")
    if failed:
        print(f"FAILED components: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(reports)} components within {args.tol}")
    return EXIT_OK


def _default_check_config(seed):
    return RunConfig(seed=seed if seed is not None else 7, levels=[
        LevelConfig("token", 8, 6, n_layers=1, n_heads=2),
        LevelConfig("sentence", 12, 4, n_layers=1, n_heads=2),
        LevelConfig("paragraph", 16, 4, n_layers=1, n_heads=2),
        LevelConfig("document", 20),
    ], mlm_rate=0.5, pndb_mode="leave_one_out", pndb_questions=2, pndb_filters=8)


def _synthetic_check_setup(cfg):
    """Tiny deterministic corpus for the gradient oracle."""
    rng = np.random.default_rng(cfg.seed)
    wordlist = [f"w{i}" for i in range(8)]
    docs = []
    for _ in range(2):
        paragraphs = []
        for _ in range(2):
            sentences = [" ".join(rng.choice(wordlist, size=3)) for _ in range(2)]
            paragraphs.append({"sentences": sentences})
        docs.append({"paragraphs": paragraphs})
    trees = [corpus.parse_nested(json.dumps(d)) for d in docs]
    vocab = corpus.build_vocab(trees)
    ids = [corpus.encode_ids(t, vocab) for t in trees]
    (batch,) = corpus.make_batches(ids, cfg.caps, batch_size=len(ids))
    model = Model(cfg, vocab.size)
    return model, batch


def cmd_eval(args):
    cfg = _load_config(args)
    vocab = corpus.Vocabulary.load(args.vocab)
    batches = _load_corpus_batches(cfg, args.corpus, vocab)
    trainer = Trainer(cfg, vocab, batches)
    trainer.resume(args.checkpoint)
    report = trainer.evaluate()
    payload = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
        print(f"evaluation written to {args.out}")
    else:
        print(payload)
    return EXIT_OK


# -- argument wiring ---------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="agent",
                description="Hierarchical encoding, generation and refinement "
                            "of nested documents")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="run configuration JSON file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output path")

    sp = sub.add_parser("build-vocab", help="build a vocabulary file from a corpus")
    sp.add_argument("--corpus", required=True, help="directory of *.json documents")
    sp.add_argument("--min-freq", type=int, default=1)
    sp.add_argument("--max-size", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_build_vocab)

    sp = sub.add_parser("train", help="train on a corpus")
    common(sp)
    sp.add_argument("--corpus", help="corpus directory (or config corpus_dir)")
    sp.add_argument("--vocab", help="vocabulary file (or config vocab_path)")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--metrics", help="metrics JSON-lines path")
    sp.add_argument("--staged", action="store_true",
                    help="token-first curriculum for the first half of training")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("embed", help="emit the DVT of one document as JSON")
    common(sp)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--doc", required=True, help="document JSON file")
    sp.set_defaults(fn=cmd_embed)

    sp = sub.add_parser("generate", help="generate a document")
    common(sp)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--edit-steps", type=int, default=None,
                    help="copyediting iterations")
    sp.add_argument("--edit-eps", type=float, default=None,
                    help="copyediting blend factor in [0,1]")
    sp.add_argument("--levels", type=int, default=None,
                    help="decode depth for --dump-dvt")
    sp.add_argument("--dump-dvt", action="store_true")
    sp.add_argument("--dump-answers", action="store_true")
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("check-grads", help="finite-difference gradient report")
    common(sp)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--coords", type=int, default=3,
                    help="sampled coordinates per parameter tensor")
    sp.set_defaults(fn=cmd_check_grads)

    sp = sub.add_parser("eval", help="frozen-parameter loss report on a corpus")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except SystemExit as e:
        return int(e.code or 0)
    except (corpus.ParseError, FileNotFoundError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError) as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except ValueError as e:
        log.error("configuration error: %s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
