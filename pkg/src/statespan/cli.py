"""Command-line operator surface.

Subcommands: gen-corpus, train, evaluate, chat.  Every run is deterministic
given --seed and its inputs, and writes a resolved-config snapshot next to
its outputs so any run can be replayed.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import (CorpusLoadError, GenConfig, GenerationError,
                     KnowledgeBase, SlotSchema, generate_synthetic_corpus,
                     load_corpus, load_kb, save_corpus, save_kb, split_corpus)
from .decoding import (DecodeConfig, SpanDecodeConfig, TurnResult,
                       _utt_to_ids, decode_turn, extract_state)
from .evaluation import evaluate_sessions, load_embeddings
from .model import DegenerateDistributionError
from .training import TrainingConfig, build_vocabulary, fit
from .vocab import EOS_UTT_ID

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

DEFAULT_OUT = os.environ.get("STATESPAN_OUT", "runs")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_snapshot(out_dir: str, command: str, resolved: Dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{command.replace('-', '_')}_config.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(resolved, f, sort_keys=True, indent=2)
        f.write("\n")


# -- gen-corpus ------------------------------------------------------------

def cmd_gen_corpus(args: argparse.Namespace) -> int:
    cfg = GenConfig(slots=args.slots, values_per_slot=args.values_per_slot,
                    entities=args.entities, sessions=args.sessions,
                    min_turns=args.min_turns, max_turns=args.max_turns)
    sessions, kb = generate_synthetic_corpus(cfg, args.seed)
    splits = split_corpus(sessions)
    out = args.out
    os.makedirs(out, exist_ok=True)
    save_corpus(os.path.join(out, "corpus.jsonl"), sessions)
    save_kb(os.path.join(out, "kb.json"), kb)
    for name, part in splits.items():
        save_corpus(os.path.join(out, f"{name}.jsonl"), part)
    manifest = {
        "seed": args.seed,
        "sessions": len(sessions),
        "splits": {name: [s.id for s in part] for name, part in splits.items()},
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    _write_snapshot(out, "gen-corpus", {"command": "gen-corpus",
                                        "seed": args.seed, **asdict(cfg)})
    print(f"wrote {len(sessions)} sessions "
          f"({', '.join(f'{k}={len(v)}' for k, v in splits.items())}) to {out}")
    return EXIT_OK


# -- train -----------------------------------------------------------------

def _training_config(args: argparse.Namespace) -> TrainingConfig:
    cfg = TrainingConfig()
    if args.preset == "nontask":
        cfg.learning_rate = 0.0005
        cfg.batch_size = 24
        cfg.lambda0, cfg.lambda1 = 0.1, 0.001
        cfg.t_span = 5
    overrides = {
        "learning_rate": args.lr, "batch_size": args.batch,
        "hidden_size": args.hidden, "emb_size": args.emb,
        "t_span": args.t_span, "lambda0": args.lam, "lambda1": args.lam_end,
        "max_epochs": args.epochs, "patience": args.patience,
    }
    for field_name, value in overrides.items():
        if value is not None:
            setattr(cfg, field_name, value)
    if not 0.0 <= args.supervision <= 1.0:
        raise UsageError("--supervision must lie in [0, 1]")
    cfg.supervision = args.supervision
    cfg.seed = args.seed
    cfg.use_unlabeled = not args.no_unlabeled
    return cfg


def cmd_train(args: argparse.Namespace) -> int:
    kb = load_kb(os.path.join(args.data, "kb.json"))
    schema = kb.schema
    train = load_corpus(os.path.join(args.data, "train.jsonl"), schema)
    valid = load_corpus(os.path.join(args.data, "valid.jsonl"), schema)
    cfg = _training_config(args)
    mode = cfg.resolved_mode()

    # vocabulary covers the whole corpus when available, so every split of
    # the same generation can be evaluated against this checkpoint
    corpus_path = os.path.join(args.data, "corpus.jsonl")
    if os.path.exists(corpus_path):
        vocab = build_vocabulary(load_corpus(corpus_path, schema), schema)
    else:
        vocab = build_vocabulary(list(train) + list(valid), schema)

    def progress(entry, _model):
        print(f"epoch {entry.epoch}: train {entry.train.total:.3f} "
              f"valid {entry.valid.total:.3f} lambda {entry.lam:.4f}",
              flush=True)

    result = fit(train, valid, schema, cfg, vocab=vocab, on_epoch=progress)
    n_ann = len(result.annotated_ids)
    print(f"objective: {mode} "
          f"(annotated={n_ann}, unannotated={len(train) - n_ann})")

    out = args.out
    os.makedirs(out, exist_ok=True)
    _write_snapshot(out, "train", {**asdict(cfg), "command": "train",
                                   "data": args.data, "preset": args.preset,
                                   "mode": mode,
                                   "annotated_sessions": n_ann,
                                   "unannotated_sessions": len(train) - n_ann})
    with open(os.path.join(out, "train_log.jsonl"), "w", encoding="utf-8") as f:
        for entry in result.log:
            f.write(json.dumps({"epoch": entry.epoch, "lambda": entry.lam,
                                "train": asdict(entry.train),
                                "valid": asdict(entry.valid),
                                "seconds": round(entry.seconds, 3)},
                               sort_keys=True) + "\n")
    ckpt = os.path.join(out, "model.ckpt")
    save_checkpoint(ckpt, result.model,
                    meta={"mode": mode, "supervision": cfg.supervision,
                          "epochs_run": len(result.log)},
                    rng_state={"seed": cfg.seed})
    if result.diverged:
        print("training aborted on non-finite loss", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"saved checkpoint to {ckpt}")
    return EXIT_OK


# -- evaluate --------------------------------------------------------------

def _decode_config(args: argparse.Namespace, t_span: int) -> DecodeConfig:
    span = SpanDecodeConfig(mode=args.span_mode, t_s=t_span)
    return DecodeConfig(span=span, beam_size=args.beam,
                        intersect_slot_values=args.unsupervised_slot_intersection)


def cmd_evaluate(args: argparse.Namespace) -> int:
    model, vocab, meta = load_checkpoint(args.checkpoint)
    kb = load_kb(os.path.join(args.data, "kb.json"))
    schema = kb.schema
    test = load_corpus(os.path.join(args.data, "test.jsonl"), schema)

    corpus_vocab = build_vocabulary(test, schema)
    missing = [t for t in corpus_vocab.tokens if t not in vocab.index]
    if missing:
        raise CorpusLoadError(
            "vocabulary mismatch: checkpoint hash "
            f"{vocab.content_hash()} cannot cover corpus hash "
            f"{corpus_vocab.content_hash()} ({len(missing)} unknown tokens, "
            f"e.g. {missing[0]!r})")

    config = _decode_config(args, args.t_span or model.config.t_span)
    embeddings = load_embeddings(args.embeddings) if args.embeddings else None
    report, preds = evaluate_sessions(model, vocab, test, schema, kb, config,
                                      embeddings)

    out = args.out
    os.makedirs(out, exist_ok=True)
    _write_snapshot(out, "evaluate", {
        "command": "evaluate", "checkpoint": args.checkpoint,
        "data": args.data, "seed": args.seed, "beam": config.beam_size,
        "span_mode": config.span.mode, "t_span": config.span.t_s,
        "intersect_slot_values": config.intersect_slot_values,
        "checkpoint_meta": meta})
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as f:
        f.write(report.render_table() + "\n")
    with open(os.path.join(out, "transcripts.jsonl"), "w",
              encoding="utf-8") as f:
        for pred, sess in zip(preds, test):
            turns = []
            for t, turn in enumerate(sess.turns):
                turns.append({"user": turn.user,
                              "gold_resp": turn.resp_delex,
                              "pred_resp": pred.responses[t],
                              "span": pred.spans[t],
                              "state": pred.states[t].to_dict()})
            f.write(json.dumps({"session_id": sess.id, "turns": turns},
                               sort_keys=True) + "\n")
    print(report.render_table())
    return EXIT_OK


# -- chat ------------------------------------------------------------------

def _format_span_trace(result: TurnResult, first_turn: bool) -> List[str]:
    lines = [f"span: {' '.join(result.span_tokens)}"]
    for step, (tok, comps) in enumerate(zip(result.span_tokens,
                                            result.span_components)):
        masses = " ".join(f"{k}={v:.4g}" for k, v in sorted(comps.items()))
        lines.append(f"  step {step} {tok!r}: {masses}")
    return lines


def cmd_chat(args: argparse.Namespace) -> int:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    kb: Optional[KnowledgeBase] = load_kb(args.kb) if args.kb else None
    if kb is not None:
        schema = kb.schema
    else:
        schema = SlotSchema(informable={}, requestable=[])
    config = _decode_config(args, args.t_span or model.config.t_span)

    from .corpus import kb_search, lexicalize

    n = model.config.n_ctx
    transcript: List[str] = []

    def emit(line: str) -> None:
        transcript.append(line)
        print(line)

    prev_resp_tokens: List[str] = []
    prev_span = None
    t = 0
    emit("statespan chat (:quit to exit)")
    for raw in sys.stdin:
        line = raw.rstrip("\n")
        if line.strip() == ":quit":
            break
        user = line.split()
        emit(f"> {line}")
        prev_ids = (_utt_to_ids(prev_resp_tokens, vocab, n)
                    if prev_resp_tokens else np.zeros((1, n), dtype=np.int64))
        user_ids = _utt_to_ids(user, vocab, n)
        span, resp_ids, truncated = decode_turn(model, prev_ids, user_ids,
                                                prev_span, config)
        span_tokens = vocab.decode_seq(span.tokens)
        state = extract_state(span_tokens, schema,
                              config.intersect_slot_values)
        resp_delex = [vocab.decode(i) for i in resp_ids if i != EOS_UTT_ID]
        resp_surface = list(resp_delex)
        result = TurnResult(span_tokens=span_tokens,
                            span_components=span.components, state=state,
                            resp_delex=resp_delex, resp_surface=resp_surface,
                            matched_entities=0, truncated=truncated)
        for trace_line in _format_span_trace(result, first_turn=(t == 0)):
            emit(trace_line)
        if kb is not None:
            hits = kb_search(kb, state.inf)
            emit(f"kb: {len(hits)} matched entities")
            if hits:
                resp_surface = lexicalize(resp_delex, hits[0], schema)
        emit(f"sys: {' '.join(resp_surface)}")
        prev_resp_tokens = resp_delex
        prev_span = span.seq
        t += 1
    if args.transcript:
        os.makedirs(os.path.dirname(args.transcript) or ".", exist_ok=True)
        with open(args.transcript, "w", encoding="utf-8") as f:
            f.write("\n".join(transcript) + "\n")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="statespan",
                     description="dialogue state span model toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--out", default=DEFAULT_OUT)
    g.add_argument("--sessions", type=int, default=800)
    g.add_argument("--slots", type=int, default=3)
    g.add_argument("--values-per-slot", type=int, default=20)
    g.add_argument("--entities", type=int, default=60)
    g.add_argument("--min-turns", type=int, default=1)
    g.add_argument("--max-turns", type=int, default=4)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train a model on a corpus directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", default=DEFAULT_OUT)
    t.add_argument("--preset", choices=("task", "nontask"), default="task")
    t.add_argument("--supervision", type=float, default=1.0)
    t.add_argument("--lambda", dest="lam", type=float, default=None)
    t.add_argument("--lambda-end", dest="lam_end", type=float, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--hidden", type=int, default=None)
    t.add_argument("--emb", type=int, default=None)
    t.add_argument("--t-span", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--patience", type=int, default=None)
    t.add_argument("--no-unlabeled", action="store_true",
                   help="drop unannotated sessions (ablation baseline)")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="decode a test split and score it")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=DEFAULT_OUT)
    e.add_argument("--beam", type=int, default=5)
    e.add_argument("--span-mode", choices=("eos", "fixed"), default="eos")
    e.add_argument("--t-span", type=int, default=None)
    e.add_argument("--unsupervised-slot-intersection", action="store_true")
    e.add_argument("--embeddings", default=None)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("chat", help="interactive REPL over a checkpoint")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--kb", default=None, help="enable task mode with this KB")
    c.add_argument("--beam", type=int, default=5)
    c.add_argument("--span-mode", choices=("eos", "fixed"), default="eos")
    c.add_argument("--t-span", type=int, default=None)
    c.add_argument("--unsupervised-slot-intersection", action="store_true")
    c.add_argument("--transcript", default=None,
                   help="save the session transcript to this file")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_chat)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusLoadError, CheckpointError, GenerationError,
            FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, DegenerateDistributionError,
            ZeroDivisionError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
