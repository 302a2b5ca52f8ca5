"""End-to-end stages shared by the command line and the experiment harnesses."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .codebook import JointCodebook, TokenSeq, decode_text, encode_text
from .datastore import DEFAULT_INSTRUCT, SpeechCaptionPair, SynthSpec
from .emoparse import ClueVocabulary, student_context
from .evalkit import MetricReport, evaluate_corpus, make_corpus
from .kdalign import (TrainConfig, build_kd_items, eval_alignment, onehot_targets,
                      pretrain_teacher, train_kd)
from .lm import (LORA_TARGETS, DecodeConfig, LoraAdapter, ModelConfig, ModelParams,
                 greedy_decode, init_adapter, init_model)
from .prefopt import (Judge, PoConfig, PoResult, PrefError, PreferencePair, build_pairs,
                      corrupted_pairs, generate_candidates, score_many, train_po)

log = logging.getLogger(__name__)

DEFAULTS = {
    "seed": 0,
    "instruct": DEFAULT_INSTRUCT,
    "use_acoustic": True,
    "student_instruct": True,
    "train_speech_embeddings": False,
    "codebook": None,
    "clues": None,
    "synth": {"n_items": 250, "vocab_size": 64, "speech_len": 6, "n_archetypes": 8, "noise": 0.05},
    "model": {"d_model": 32, "n_heads": 2, "n_layers": 2, "d_ff": 64, "max_len": 64},
    "adapter": {"rank": 8, "scale": 1.0, "targets": list(LORA_TARGETS)},
    # desk-scale optimizer settings; the paper-scale values are the TrainConfig/PoConfig defaults
    "pretrain": {"learning_rate": 3e-3, "batch_size": 16, "grad_accum": 1, "warmup_steps": 20,
                 "max_steps": 300, "optimizer": "adamw", "eval_every": 0},
    "train": {"learning_rate": 0.3, "batch_size": 16, "grad_accum": 1, "warmup_steps": 20,
              "max_steps": 500, "eval_every": 100},
    "po": {"beta": 0.1, "learning_rate": 0.003, "max_steps": 200, "batch_size": 16},
    "decode": {"max_len": 24, "beam_width": 4, "text_only": True},
    "prefs": {"source": "beam", "candidates": 4, "max_pairs": None, "workers": 4,
              "judge_timeout": 30.0},
}

_SECTION_TYPES = {"synth": SynthSpec, "pretrain": TrainConfig, "train": TrainConfig, "po": PoConfig}


class ConfigError(ValueError):
    pass


def merge_config(overrides: dict, base: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(base if base is not None else DEFAULTS)
    for key, val in overrides.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict) and key not in ("synth",):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            for k in val:
                if k not in cfg[key]:
                    allowed = {f.name for f in fields(_SECTION_TYPES[key])} if key in _SECTION_TYPES else set()
                    if k not in allowed:
                        raise ConfigError(f"unknown key {k!r} in config section {key!r}")
            cfg[key].update(val)
        elif key == "synth":
            allowed = {f.name for f in fields(SynthSpec)}
            bad = set(val) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) {sorted(bad)} in config section 'synth'")
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return merge_config({})
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return merge_config(doc)


def seeds(seed: int, n: int) -> list[int]:
    """Independent sub-seeds derived from the one command seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class Resources:
    codebook: JointCodebook
    clues: ClueVocabulary


def find_resources(cfg: dict, *near) -> Resources:
    """Codebook and clue vocabulary from the config, else the first directory of ``near`` holding them."""
    dirs = [Path(p).parent for p in near if p is not None]
    found = {}
    for key, fname in (("codebook", "codebook.json"), ("clues", "clues.tsv")):
        if cfg[key]:
            found[key] = Path(cfg[key])
        else:
            found[key] = next((d / fname for d in dirs if (d / fname).exists()), None)
        if found[key] is None or not found[key].exists():
            where = found[key] or " or ".join(str(d / fname) for d in dirs)
            raise ConfigError(f"{fname} not found at {where} (set {key!r} in the config)")
    return Resources(JointCodebook.load(found["codebook"]), ClueVocabulary.load(found["clues"]))


def model_config(cfg: dict, codebook: JointCodebook) -> ModelConfig:
    return ModelConfig(vocab_size=codebook.size, pad_id=codebook.pad, **cfg["model"])


def decode_config(cfg: dict, codebook: JointCodebook, beam_width: Optional[int] = None) -> DecodeConfig:
    d = cfg["decode"]
    return DecodeConfig.for_codebook(codebook, d["max_len"], beam_width or d["beam_width"], d["text_only"])


# --------------------------------------------------------------------- stages

@dataclass
class KdOutcome:
    teacher: ModelParams
    student: ModelParams
    adapter: LoraAdapter
    pretrain_log: list
    log: list
    heldout_kl_before: Optional[float]
    heldout_kl_after: Optional[float]


def kd_stage(cfg: dict, res: Resources, train_pairs: Sequence[SpeechCaptionPair],
             heldout_pairs: Optional[Sequence[SpeechCaptionPair]] = None,
             use_acoustic: Optional[bool] = None, distill: bool = True) -> KdOutcome:
    """Pretrain the text-side base, then fit the student adapter.

    With ``distill=False`` the adapter is fit to the reference captions
    (one-hot targets) instead of the teacher's distributions.
    """
    use_acoustic = cfg["use_acoustic"] if use_acoustic is None else use_acoustic
    s_model, s_adapter, s_pre, s_kd = seeds(cfg["seed"], 4)
    items = build_kd_items(train_pairs, res.codebook, res.clues, cfg["instruct"],
                           use_acoustic, cfg["student_instruct"])
    held = None
    if heldout_pairs:
        held = build_kd_items(heldout_pairs, res.codebook, res.clues, cfg["instruct"],
                              use_acoustic, cfg["student_instruct"])
    base = init_model(model_config(cfg, res.codebook), s_model)
    teacher, pre_log = pretrain_teacher(base, items, TrainConfig(**{**cfg["pretrain"], "seed": s_pre}))
    a = cfg["adapter"]
    adapter = init_adapter(teacher, a["rank"], a["scale"], a["targets"], seed=s_adapter)
    rows = range(res.codebook.speech_offset, res.codebook.size) if cfg["train_speech_embeddings"] else None
    targets = None if distill else onehot_targets(items, res.codebook.size)
    before = eval_alignment(teacher, teacher, adapter, held) if held else None
    adapter, student, kd_log = train_kd(teacher, teacher, adapter, items,
                                        TrainConfig(**{**cfg["train"], "seed": s_kd}),
                                        heldout=held, embed_rows=rows, target_probs=targets)
    after = eval_alignment(teacher, student, adapter, held) if held else None
    return KdOutcome(teacher, student, adapter, pre_log, kd_log, before, after)


def student_contexts(cfg: dict, res: Resources, pairs: Sequence[SpeechCaptionPair]) -> list[TokenSeq]:
    return [student_context(res.codebook, p.speech_tokens, cfg["instruct"], cfg["student_instruct"])
            for p in pairs]


def pref_stage(cfg: dict, res: Resources, params: ModelParams, adapter: Optional[LoraAdapter],
               pairs: Sequence[SpeechCaptionPair], judge: Optional[Judge],
               source: Optional[str] = None, n_pairs: Optional[int] = None) -> list[PreferencePair]:
    """Preference pairs from judged beam candidates, or from token corruption of references."""
    pc = cfg["prefs"]
    source = source or pc["source"]
    cb = res.codebook
    contexts = student_contexts(cfg, res, pairs)
    if source == "corrupt":
        (s_corrupt,) = seeds(cfg["seed"] + 1, 1)
        responses = [encode_text(cb, p.caption).ids + (cb.eos,) for p in pairs]
        n = n_pairs if n_pairs is not None else len(pairs)
        return corrupted_pairs([c.ids for c in contexts], responses, cb, n, np.random.default_rng(s_corrupt))
    if source != "beam":
        raise ConfigError(f"unknown preference source {source!r} (beam or corrupt)")
    if judge is None:
        raise ConfigError("beam-sourced preference pairs need a judge")
    dcfg = decode_config(cfg, cb)
    jobs, cand_ids, ctxs = [], [], []
    for ctx, p in zip(contexts, pairs):
        cands = generate_candidates(params, adapter, ctx, pc["candidates"], dcfg)
        if len(cands) < 2:
            log.info("skipping %s: fewer than two distinct candidates", p.id)
            continue
        jobs.append((p.caption, [decode_text(cb, c) for c in cands]))
        cand_ids.append([c.ids + (cb.eos,) for c in cands])
        ctxs.append(ctx)
    out: list[PreferencePair] = []
    for ctx, cands, scores in zip(ctxs, cand_ids, score_many(judge, jobs, pc["workers"])):
        try:
            out.extend(build_pairs(ctx, cands, scores))
        except PrefError:
            continue
    limit = n_pairs if n_pairs is not None else pc["max_pairs"]
    return out[:limit] if limit is not None else out


def po_stage(cfg: dict, params: ModelParams, adapter: LoraAdapter,
             prefs: Sequence[PreferencePair], max_steps: Optional[int] = None) -> PoResult:
    (s_po,) = seeds(cfg["seed"] + 2, 1)
    pc = {**cfg["po"], "seed": s_po}
    if max_steps is not None:
        pc["max_steps"] = max_steps
    return train_po(params, adapter, params, adapter.copy(), prefs, PoConfig(**pc))


def generate_captions(cfg: dict, res: Resources, params: ModelParams, adapter: Optional[LoraAdapter],
                      pairs: Sequence[SpeechCaptionPair]) -> list[str]:
    dcfg = decode_config(cfg, res.codebook, beam_width=1)
    return [decode_text(res.codebook, greedy_decode(params, adapter, ctx, dcfg))
            for ctx in student_contexts(cfg, res, pairs)]


def evaluate_pairs(captions: Sequence[str], pairs: Sequence[SpeechCaptionPair]) -> MetricReport:
    return evaluate_corpus(make_corpus(captions, [[p.caption] for p in pairs]), ids=[p.id for p in pairs])


def headline(report: MetricReport) -> dict:
    return {"bleu4": report.bleu4, "meteor": report.meteor, "rouge_l": report.rouge_l, "cider": report.cider}
