"""Command-line entry point for the full pipeline.

Subcommands: corpus clean|stats|split, vocab build, pretrain,
perplexity, finetune cls|ner, eval cls|ner, predict. Every command
prints a one-line JSON summary on stdout and logs to stderr.

Exit codes: 0 success, 2 missing input file, 3 configuration error,
4 training divergence (non-finite loss).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import corpus as cp
from . import encoder as enc
from . import evaluation as ev
from . import tasks as tk
from . import tokenizer as tok
from . import training as tr

EXIT_MISSING_FILE = 2
EXIT_CONFIG_ERROR = 3
EXIT_DIVERGED = 4


def _config_help():
    lines = ["training config keys (config file / --set overrides):"]
    for f in dataclasses.fields(tr.TrainConfig):
        lines.append(f"  {f.name} (default {f.default})")
    return "\n".join(lines)


def _emit(summary):
    print(json.dumps(summary, sort_keys=True))


def _log(message):
    print(message, file=sys.stderr)


def _load_train_config(args, base=None):
    config = base if base is not None else tr.TrainConfig()
    if getattr(args, "config", None):
        config = tr.parse_config_file(args.config, base=config)
    if getattr(args, "set", None):
        config = tr.apply_overrides(config, args.set)
    return config


def _write_json(payload, path):
    text = json.dumps(payload, sort_keys=True, indent=2)
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text + "\n")


# -- command implementations -------------------------------------------


def cmd_corpus_clean(args):
    records = cp.read_records_tsv(args.records)
    cleaned = cp.clean_records(records)
    lines = [r.title if args.use_titles else r.abstract for r in cleaned]
    cp.write_corpus(lines, args.out)
    _emit({"command": "corpus clean", "records_in": len(records), "records_out": len(cleaned), "out": args.out})
    return 0


def cmd_corpus_stats(args):
    stats = cp.compute_stats(cp.read_corpus(args.corpus))
    _write_json(stats.to_dict(), args.out)
    _emit({"command": "corpus stats", **stats.to_dict()})
    return 0


def cmd_corpus_split(args):
    lines = cp.read_corpus(args.corpus)
    spec = cp.SplitSpec(train_weight=args.train_weight, test_weight=args.test_weight, seed=args.seed)
    train, test = cp.split_corpus(lines, spec)
    cp.write_corpus(train, args.train)
    cp.write_corpus(test, args.test)
    _emit({"command": "corpus split", "n_train": len(train), "n_test": len(test),
           "train": args.train, "test": args.test})
    return 0


def cmd_vocab_build(args):
    lines = cp.read_corpus(args.corpus)
    vocab = tok.build_vocab(lines, target_size=args.size, min_frequency=args.min_frequency)
    vocab.save(args.out)
    _emit({"command": "vocab build", "vocab_size": len(vocab), "out": args.out})
    return 0


def cmd_pretrain(args):
    config = _load_train_config(args)
    vocab = tok.SubwordVocabulary.load(args.vocab)
    lines = cp.read_corpus(args.corpus)
    if args.init:
        start = enc.load_checkpoint(args.init)
        source = args.init
    else:
        encoder_config = enc.EncoderConfig(
            n_layers=args.layers, hidden_size=args.hidden, n_heads=args.heads,
            ff_size=args.ff, vocab_size=len(vocab), max_positions=args.max_positions,
        )
        start = enc.Checkpoint(config=encoder_config, parameters=enc.init_parameters(encoder_config, seed=config.seed))
        source = "fresh-init"
        _log(f"no --init given; initializing a fresh encoder (seed {config.seed})")
    final, curve = tr.pretrain(lines, start, config, vocab, source=source)
    enc.save_checkpoint(final, args.out)
    if args.curve:
        tr.write_loss_curve(curve, args.curve)
    _emit({"command": "pretrain", "steps": len(curve), "final_loss": curve[-1]["loss"] if curve else None,
           "out": args.out, "source": source})
    return 0


def cmd_perplexity(args):
    ckpt = enc.load_checkpoint(args.model)
    vocab = tok.SubwordVocabulary.load(args.vocab)
    sentences = cp.read_corpus(args.data)
    result = ev.pseudo_perplexity(ckpt, sentences, vocab, max_len=args.max_len,
                                  batch_size=args.batch_size)
    _write_json(result.to_dict(), args.out)
    _emit({"command": "perplexity", **result.to_dict()})
    return 0


def _resolve_label_set(spec_text):
    if spec_text in ("JCR46", "BPMRC"):
        return tk.LabelSet.preset(spec_text)
    with open(spec_text, encoding="utf-8") as f:
        classes = [line.strip() for line in f if line.strip()]
    return tk.LabelSet(name=spec_text, classes=classes)


def cmd_finetune_cls(args):
    config = _load_train_config(args, base=tr.TrainConfig.finetuning_defaults())
    start = enc.load_checkpoint(args.init)
    vocab = tok.SubwordVocabulary.load(args.vocab)
    label_set = _resolve_label_set(args.labels)
    train = tk.read_labeled_tsv(args.train)
    model, log = tk.finetune_classifier(start, train, config, label_set, vocab)
    enc.save_checkpoint(model.to_checkpoint(), args.out)
    if args.curve:
        tr.write_loss_curve(log, args.curve)
    _emit({"command": "finetune cls", "examples": len(train), "classes": len(label_set.classes),
           "final_loss": log[-1]["loss"] if log else None, "out": args.out})
    return 0


def cmd_finetune_ner(args):
    config = _load_train_config(args, base=tr.TrainConfig.finetuning_defaults())
    start = enc.load_checkpoint(args.init)
    vocab = tok.SubwordVocabulary.load(args.vocab)
    train = tk.parse_tagged_file(args.train)
    model, log = tk.finetune_tagger(start, train, config, vocab)
    enc.save_checkpoint(model.to_checkpoint(), args.out)
    if args.curve:
        tr.write_loss_curve(log, args.curve)
    _emit({"command": "finetune ner", "sentences": len(train),
           "final_loss": log[-1]["loss"] if log else None, "out": args.out})
    return 0


def cmd_eval_cls(args):
    model = tk.FinetunedModel.from_checkpoint(enc.load_checkpoint(args.model))
    vocab = tok.SubwordVocabulary.load(args.vocab)
    data = tk.read_labeled_tsv(args.data)
    pred = tk.predict_classifier(model, [d.text for d in data], vocab, batch_size=args.batch_size)
    report = ev.classification_report([d.label for d in data], pred, classes=model.labels)
    _write_json(report.to_dict(), args.out)
    _emit({"command": "eval cls", "n": len(data), "accuracy": report.accuracy,
           "macro_f1": report.macro_f1, "weighted_f1": report.weighted_f1})
    return 0


def cmd_eval_ner(args):
    model = tk.FinetunedModel.from_checkpoint(enc.load_checkpoint(args.model))
    vocab = tok.SubwordVocabulary.load(args.vocab)
    gold = tk.parse_tagged_file(args.data)
    pred_tags = tk.predict_tagger(model, [s.tokens for s in gold], vocab, batch_size=args.batch_size)
    gold_spans = [tk.tags_to_spans(s.tags) for s in gold]
    pred_spans = [tk.tags_to_spans(tags, strict=False) for tags in pred_tags]
    p, r, f1 = ev.entity_prf(gold_spans, pred_spans)
    payload = {"precision": p, "recall": r, "f1": f1, "n_sentences": len(gold)}
    _write_json(payload, args.out)
    _emit({"command": "eval ner", **payload})
    return 0


def cmd_predict(args):
    ckpt = enc.load_checkpoint(args.model)
    model = tk.FinetunedModel.from_checkpoint(ckpt)
    vocab = tok.SubwordVocabulary.load(args.vocab)
    if model.task == "classifier":
        texts = cp.read_corpus(args.data)
        preds = tk.predict_classifier(model, texts, vocab, batch_size=args.batch_size)
        items = [tk.LabeledText(text=t, label=p) for t, p in zip(texts, preds)]
        tk.write_labeled_tsv(items, args.out)
        _emit({"command": "predict", "task": "classifier", "n": len(texts), "out": args.out})
    else:
        sentences = tk.parse_tagged_file(args.data)
        pred_tags = tk.predict_tagger(model, [s.tokens for s in sentences], vocab, batch_size=args.batch_size)
        tagged = [tk.TaggedSentence(tokens=s.tokens, tags=tags) for s, tags in zip(sentences, pred_tags)]
        tk.write_tagged_file(tagged, args.out)
        _emit({"command": "predict", "task": "tagger", "n": len(sentences), "out": args.out})
    return 0


# -- argument parsing ---------------------------------------------------


def _add_train_opts(parser):
    parser.add_argument("--config", help="flat key=value training config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("--curve", help="write the loss curve CSV here")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sslm",
        description="Scholarly-abstract MLM workbench: corpus prep, pre-training, evaluation, fine-tuning.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="corpus cleaning, statistics, splitting")
    corpus_sub = corpus.add_subparsers(dest="subcommand", required=True)
    clean = corpus_sub.add_parser("clean", help="clean TSV records into a one-abstract-per-line corpus")
    clean.add_argument("--records", required=True)
    clean.add_argument("--out", required=True)
    clean.add_argument("--use-titles", action="store_true", help="emit titles instead of abstracts")
    clean.set_defaults(func=cmd_corpus_clean)
    stats = corpus_sub.add_parser("stats", help="corpus statistics as JSON")
    stats.add_argument("--corpus", required=True)
    stats.add_argument("--out")
    stats.set_defaults(func=cmd_corpus_stats)
    split = corpus_sub.add_parser("split", help="deterministic weighted train/test split")
    split.add_argument("--corpus", required=True)
    split.add_argument("--train", required=True)
    split.add_argument("--test", required=True)
    split.add_argument("--train-weight", type=int, default=99)
    split.add_argument("--test-weight", type=int, default=1)
    split.add_argument("--seed", type=int, default=0)
    split.set_defaults(func=cmd_corpus_split)

    vocab = sub.add_parser("vocab", help="vocabulary construction")
    vocab_sub = vocab.add_subparsers(dest="subcommand", required=True)
    vbuild = vocab_sub.add_parser("build", help="build a subword vocabulary from a corpus")
    vbuild.add_argument("--corpus", required=True)
    vbuild.add_argument("--out", required=True)
    vbuild.add_argument("--size", type=int, required=True)
    vbuild.add_argument("--min-frequency", type=int, default=1)
    vbuild.set_defaults(func=cmd_vocab_build)

    pretrain = sub.add_parser("pretrain", help="continued MLM pre-training",
                              epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    pretrain.add_argument("--corpus", required=True)
    pretrain.add_argument("--vocab", required=True)
    pretrain.add_argument("--init", help="starting checkpoint; omit to train from a fresh init")
    pretrain.add_argument("--out", required=True)
    pretrain.add_argument("--layers", type=int, default=2)
    pretrain.add_argument("--hidden", type=int, default=64)
    pretrain.add_argument("--heads", type=int, default=2)
    pretrain.add_argument("--ff", type=int, default=128)
    pretrain.add_argument("--max-positions", type=int, default=512)
    _add_train_opts(pretrain)
    pretrain.set_defaults(func=cmd_pretrain)

    ppl = sub.add_parser("perplexity", help="pseudo-perplexity of a checkpoint on text")
    ppl.add_argument("--model", required=True)
    ppl.add_argument("--data", required=True)
    ppl.add_argument("--vocab", required=True)
    ppl.add_argument("--max-len", type=int, default=512)
    ppl.add_argument("--batch-size", type=int, default=32)
    ppl.add_argument("--out")
    ppl.set_defaults(func=cmd_perplexity)

    finetune = sub.add_parser("finetune", help="fine-tune classification or tagging heads",
                              epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    ft_sub = finetune.add_subparsers(dest="subcommand", required=True)
    ft_cls = ft_sub.add_parser("cls", help="sequence classification head")
    ft_cls.add_argument("--init", required=True)
    ft_cls.add_argument("--train", required=True, help="label<TAB>text TSV")
    ft_cls.add_argument("--vocab", required=True)
    ft_cls.add_argument("--labels", required=True, help="JCR46, BPMRC, or a file of class names")
    ft_cls.add_argument("--out", required=True)
    _add_train_opts(ft_cls)
    ft_cls.set_defaults(func=cmd_finetune_cls)
    ft_ner = ft_sub.add_parser("ner", help="BMES token tagging head")
    ft_ner.add_argument("--init", required=True)
    ft_ner.add_argument("--train", required=True, help="token<TAB>tag file")
    ft_ner.add_argument("--vocab", required=True)
    ft_ner.add_argument("--out", required=True)
    _add_train_opts(ft_ner)
    ft_ner.set_defaults(func=cmd_finetune_ner)

    evaluate = sub.add_parser("eval", help="evaluate a fine-tuned model")
    ev_sub = evaluate.add_subparsers(dest="subcommand", required=True)
    ev_cls = ev_sub.add_parser("cls", help="classification report on labeled TSV")
    ev_cls.add_argument("--model", required=True)
    ev_cls.add_argument("--data", required=True)
    ev_cls.add_argument("--vocab", required=True)
    ev_cls.add_argument("--batch-size", type=int, default=32)
    ev_cls.add_argument("--out")
    ev_cls.set_defaults(func=cmd_eval_cls)
    ev_ner = ev_sub.add_parser("ner", help="entity-level P/R/F1 on a tagged file")
    ev_ner.add_argument("--model", required=True)
    ev_ner.add_argument("--data", required=True)
    ev_ner.add_argument("--vocab", required=True)
    ev_ner.add_argument("--batch-size", type=int, default=32)
    ev_ner.add_argument("--out")
    ev_ner.set_defaults(func=cmd_eval_ner)

    predict = sub.add_parser("predict", help="run a fine-tuned model over new data")
    predict.add_argument("--model", required=True)
    predict.add_argument("--data", required=True)
    predict.add_argument("--vocab", required=True)
    predict.add_argument("--out", required=True)
    predict.add_argument("--batch-size", type=int, default=32)
    predict.set_defaults(func=cmd_predict)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        _emit({"error": "missing_file", "detail": str(exc)})
        return EXIT_MISSING_FILE
    except tr.TrainingDivergedError as exc:
        _emit({"error": "training_diverged", "detail": str(exc)})
        return EXIT_DIVERGED
    except (tr.ConfigError, tok.VocabularyError, tk.TaskError, cp.CorpusError,
            enc.CheckpointError, ValueError) as exc:
        _emit({"error": "config_error", "detail": str(exc)})
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
