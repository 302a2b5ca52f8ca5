"""Command-line entry point: ``aligncap <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .codebook import CodebookError
from .datastore import (CheckpointError, DataError, SynthSpec, load_checkpoint, load_jsonl,
                        load_pairs, save_checkpoint, save_corpus, synth_dataset, write_jsonl)
from .emoparse import ClueVocabulary, ClueVocabularyError, build_prefix
from .evalkit import evaluate_corpus, make_corpus
from .kdalign import KdError
from .lm import ModelError
from .prefopt import JudgeError, PrefError, load_prefs, make_judge, save_prefs
from ._train import TrainingDiverged
from . import pipeline as pl

EXPECTED_ERRORS = (pl.ConfigError, DataError, CheckpointError, CodebookError, ClueVocabularyError,
                   KdError, ModelError, PrefError, JudgeError, TrainingDiverged, OSError)


def _dump(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--sizes wants comma-separated integers, got {text!r}") from None
    if not sizes or any(s < 0 for s in sizes):
        raise argparse.ArgumentTypeError("--sizes needs at least one non-negative integer")
    return sizes


def _config(args) -> dict:
    cfg = pl.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _sibling(path, name: str) -> Path:
    return Path(path).parent / name


def _export_resources(res: pl.Resources, out_path) -> None:
    """Keep codebook.json and clues.tsv beside an artifact so later commands can find them."""
    d = Path(out_path).parent
    d.mkdir(parents=True, exist_ok=True)
    for name, text in (("codebook.json", res.codebook.to_json() + "\n"), ("clues.tsv", res.clues.to_tsv())):
        target = d / name
        if target.exists():
            if target.read_text(encoding="utf-8") != text:
                raise pl.ConfigError(f"{target} exists and belongs to a different corpus")
            continue
        target.write_text(text, encoding="utf-8")


def _load_model(ckpt):
    params, adapter = load_checkpoint(ckpt)
    if params is None:
        raise CheckpointError(f"{ckpt}: no base model in checkpoint")
    return params, adapter


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> None:
    cfg = _config(args)
    corpus = synth_dataset(SynthSpec(**{**cfg["synth"], "seed": cfg["seed"], "instruct": cfg["instruct"]}))
    paths = save_corpus(corpus, args.out)
    for name in ("train", "val", "test"):
        write_jsonl(Path(args.out) / f"refs_{name}.jsonl",
                    [{"id": p.id, "texts": [p.caption]} for p in corpus.subset(name)])
    print(f"wrote {len(corpus.pairs)} pairs (vocab {corpus.codebook.size}) to {paths['pairs'].parent}")


def cmd_parse_clues(args) -> None:
    vocab = ClueVocabulary.load(args.vocab)
    print(build_prefix(vocab, args.caption, "").acoustic.rendered)


def cmd_train_kd(args) -> None:
    cfg = _config(args)
    res = pl.find_resources(cfg, args.data)
    train = load_pairs(args.data, res.codebook)
    held = load_pairs(args.heldout, res.codebook) if args.heldout else None
    if held is None and _sibling(args.data, "val.jsonl").exists() and Path(args.data).name != "val.jsonl":
        held = load_pairs(_sibling(args.data, "val.jsonl"), res.codebook)
    out = pl.kd_stage(cfg, res, train, held)
    _export_resources(res, args.out)
    save_checkpoint(out.student, out.adapter, args.out)
    write_jsonl(f"{args.out}.log.jsonl", out.log)
    write_jsonl(f"{args.out}.pretrain.jsonl", out.pretrain_log)
    summary = {"steps": len(out.log), "train_pairs": len(train),
               "heldout_kl_before": out.heldout_kl_before, "heldout_kl_after": out.heldout_kl_after}
    if out.log:
        summary.update(initial_loss=out.log[0]["loss"], final_loss=out.log[-1]["loss"])
    _dump(f"{args.out}.summary.json", summary)
    if out.log:
        print(f"kd: loss {out.log[0]['loss']:.4f} -> {out.log[-1]['loss']:.4f}; checkpoint {args.out}")


def cmd_gen_prefs(args) -> None:
    cfg = _config(args)
    res = pl.find_resources(cfg, args.data, args.ckpt)
    pairs = load_pairs(args.data, res.codebook)
    source = args.source or cfg["prefs"]["source"]
    params = adapter = None
    judge = None
    if source == "beam":
        params, adapter = _load_model(args.ckpt) if args.ckpt else (None, None)
        if params is None:
            raise pl.ConfigError("beam preference pairs need --ckpt")
        judge = make_judge(args.judge, res.clues, cfg["prefs"]["judge_timeout"])
    prefs = pl.pref_stage(cfg, res, params, adapter, pairs, judge, source=source, n_pairs=args.pairs)
    if not prefs:
        raise PrefError("no preference pairs could be formed (all candidates tied)")
    _export_resources(res, args.out)
    save_prefs(prefs, res.codebook, args.out)
    print(f"wrote {len(prefs)} preference pairs to {args.out}")


def cmd_train_po(args) -> None:
    cfg = _config(args)
    res = pl.find_resources(cfg, args.data, args.ckpt)
    prefs = load_prefs(args.data, res.codebook)
    params, adapter = _load_model(args.ckpt)
    if adapter is None:
        raise CheckpointError(f"{args.ckpt}: no adapter to optimize")
    result = pl.po_stage(cfg, params, adapter, prefs, max_steps=args.steps)
    _export_resources(res, args.out)
    save_checkpoint(params, result.adapter, args.out)
    write_jsonl(f"{args.out}.log.jsonl", result.log)
    _dump(f"{args.out}.summary.json", {"initial": result.initial, "final": result.final,
                                       "pairs": len(prefs)})
    print(f"po: accuracy {result.initial['accuracy']:.3f} -> {result.final['accuracy']:.3f}, "
          f"margin {result.initial['margin']:.4f} -> {result.final['margin']:.4f}")


def cmd_generate(args) -> None:
    cfg = _config(args)
    res = pl.find_resources(cfg, args.data, args.ckpt)
    pairs = load_pairs(args.data, res.codebook)
    params, adapter = _load_model(args.ckpt)
    caps = pl.generate_captions(cfg, res, params, adapter, pairs)
    write_jsonl(args.out, [{"id": p.id, "text": c} for p, c in zip(pairs, caps)])
    print(f"wrote {len(caps)} captions to {args.out}")


def _by_id(path, field: str) -> dict:
    out = {}
    for k, rec in enumerate(load_jsonl(path), 1):
        if not isinstance(rec, dict) or "id" not in rec or field not in rec:
            raise DataError(f"{path}: record {k} needs 'id' and {field!r}")
        out[str(rec["id"])] = rec[field]
    return out


def cmd_evaluate(args) -> None:
    cands = _by_id(args.candidates, "text")
    refs = _by_id(args.references, "texts")
    missing = [i for i in cands if i not in refs]
    if missing:
        raise DataError(f"no references for candidate id {missing[0]!r}")
    ids = list(cands)
    report = evaluate_corpus(make_corpus([cands[i] for i in ids], [refs[i] for i in ids]), ids=ids)
    _dump(args.report, report.to_dict())
    print(" ".join(f"{k}={v:.4f}" for k, v in pl.headline(report).items()))


def _eval_split(args, train_path) -> Path:
    path = Path(args.eval) if args.eval else _sibling(train_path, "test.jsonl")
    if not path.exists():
        raise DataError(f"evaluation split not found at {path} (pass --eval)")
    return path


def cmd_sweep_prefs(args) -> None:
    cfg = _config(args)
    res = pl.find_resources(cfg, args.data)
    train = load_pairs(args.data, res.codebook)
    test = load_pairs(_eval_split(args, args.data), res.codebook)
    kd = pl.kd_stage(cfg, res, train)
    judge = make_judge(args.judge, res.clues, cfg["prefs"]["judge_timeout"])
    pool = pl.pref_stage(cfg, res, kd.student, kd.adapter, train, judge)
    points = []
    for size in args.sizes:
        used = pool[:size]
        point = {"size": size, "pairs_used": len(used)}
        if used:
            result = pl.po_stage(cfg, kd.student, kd.adapter, used, max_steps=args.steps)
            adapter = result.adapter
            point["pair_accuracy"] = result.final["accuracy"]
        else:
            adapter = kd.adapter
        point.update(pl.headline(pl.evaluate_pairs(
            pl.generate_captions(cfg, res, kd.student, adapter, test), test)))
        points.append(point)
    _dump(args.out, {"pool_size": len(pool), "points": points, "seed": cfg["seed"],
                     "steps": args.steps if args.steps is not None else cfg["po"]["max_steps"]})
    for p in points:
        print(f"size {p['size']:>5}: bleu4 {p['bleu4']:.4f} cider {p['cider']:.4f}")


ABLATION_ROWS = ("full", "-P_act", "-L_KL", "-L_PO")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    res = pl.find_resources(cfg, args.data)
    train = load_pairs(args.data, res.codebook)
    test = load_pairs(_eval_split(args, args.data), res.codebook)
    judge = make_judge(args.judge, res.clues, cfg["prefs"]["judge_timeout"])

    def with_po(kd):
        pool = pl.pref_stage(cfg, res, kd.student, kd.adapter, train, judge)
        if not pool:
            return kd.adapter
        return pl.po_stage(cfg, kd.student, kd.adapter, pool, max_steps=args.steps).adapter

    def score(kd, adapter):
        return pl.headline(pl.evaluate_pairs(pl.generate_captions(cfg, res, kd.student, adapter, test), test))

    full_kd = pl.kd_stage(cfg, res, train)
    no_act = pl.kd_stage(cfg, res, train, use_acoustic=False)
    no_kl = pl.kd_stage(cfg, res, train, distill=False)
    scores = {
        "full": score(full_kd, with_po(full_kd)),
        "-P_act": score(no_act, with_po(no_act)),
        "-L_KL": score(no_kl, with_po(no_kl)),
        "-L_PO": score(full_kd, full_kd.adapter),
    }
    rows = []
    for name in ABLATION_ROWS:
        row = {"variant": name, **scores[name]}
        row["delta"] = {k: scores[name][k] - scores["full"][k] for k in scores["full"]}
        rows.append(row)
    _dump(args.out, {"rows": rows, "seed": cfg["seed"]})
    for r in rows:
        d = r["delta"]
        print(f"{r['variant']:<7} bleu4 {r['bleu4']:.4f} ({d['bleu4']:+.4f})  cider {r['cider']:.4f} ({d['cider']:+.4f})")


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aligncap", description="Speech emotion captioning with aligned LoRA adapters.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        return p

    def common(p, data=True, out=True):
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", required=True)
        if out:
            p.add_argument("--out", required=True)

    p = add("synth", cmd_synth, "write a synthetic speech-token caption corpus")
    common(p, data=False)
    p = add("parse-clues", cmd_parse_clues, "print the acoustic prompt for a caption")
    p.add_argument("--vocab", required=True)
    p.add_argument("--caption", required=True)
    p = add("train-kd", cmd_train_kd, "pretrain the text base and distill into the speech adapter")
    common(p)
    p.add_argument("--heldout")
    p = add("gen-prefs", cmd_gen_prefs, "build a preference dataset")
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--judge", default="mock")
    p.add_argument("--source", choices=("beam", "corrupt"))
    p.add_argument("--pairs", type=int, help="pair count (corrupt) or cap (beam)")
    p = add("train-po", cmd_train_po, "preference-optimize the adapter")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--steps", type=int)
    p = add("generate", cmd_generate, "greedy captions for speech-token pairs")
    common(p)
    p.add_argument("--ckpt", required=True)
    p = add("evaluate", cmd_evaluate, "score candidate captions against references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--report", required=True)
    p = add("sweep-prefs", cmd_sweep_prefs, "metrics against preference-pair count")
    common(p)
    p.add_argument("--sizes", type=_sizes, default=_sizes("0,25,50,100"))
    p.add_argument("--steps", type=int)
    p.add_argument("--judge", default="mock")
    p.add_argument("--eval")
    p = add("ablate", cmd_ablate, "drop one component at a time and compare")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--judge", default="mock")
    p.add_argument("--eval")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        print("aligncap: error: a command is required", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except EXPECTED_ERRORS as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"aligncap {args.command}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
