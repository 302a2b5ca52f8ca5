"""Speech-text alignment by distilling next-token distributions.

The teacher is the frozen base model reading the text prefix (acoustic
prompt, caption, instruction); the student is the same base plus a LoRA
adapter reading speech tokens.  Both are teacher-forced on the reference
response and compared position by position.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ._train import EpochSampler, Optimizer, TrainingDiverged, clip_slots, warmup_lr
from .codebook import JointCodebook, encode_text
from .emoparse import ClueVocabulary, assemble_prefix, build_prefix, student_context
from .lm import (Grads, LoraAdapter, ModelParams, backward, batch_arrays, forward,
                 log_softmax)

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)
TEACHER_CHUNK = 64


class KdError(ValueError):
    pass


@dataclass(frozen=True)
class KdItem:
    teacher_ctx: tuple[int, ...]
    student_ctx: tuple[int, ...]
    response: tuple[int, ...]

    def __post_init__(self):
        if not self.teacher_ctx or not self.student_ctx:
            raise KdError("teacher and student contexts must be non-empty")
        if not self.response:
            raise KdError("response must be non-empty")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 16
    warmup_steps: int = 400
    grad_accum: int = 8
    max_steps: int = 50_000
    seed: int = 0
    eval_every: int = 100
    optimizer: str = "sgd"
    weight_decay: float = 0.0
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.grad_accum < 1:
            raise KdError("learning_rate, batch_size and grad_accum must be positive")
        if self.warmup_steps < 0 or self.max_steps < 0 or self.eval_every < 0:
            raise KdError("warmup_steps, max_steps and eval_every must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def build_kd_items(pairs, codebook: JointCodebook, clues: ClueVocabulary, instruct: str,
                   use_acoustic: bool = True, student_instruct: bool = True) -> list[KdItem]:
    """Teacher reads BOS/acoustic/caption/instruction, student reads BOS/speech[/instruction].

    The response is the tokenized caption followed by EOS.
    """
    items = []
    for p in pairs:
        prefix = build_prefix(clues, p.caption, instruct, use_acoustic=use_acoustic)
        teacher = assemble_prefix(prefix, codebook).ids
        student = student_context(codebook, p.speech_tokens, instruct, student_instruct).ids
        response = encode_text(codebook, p.caption).ids + (codebook.eos,)
        items.append(KdItem(teacher, student, response))
    return items


def _rows(items: Sequence[KdItem], ctx_of: Callable[[KdItem], tuple]) -> tuple[np.ndarray, np.ndarray]:
    rn, rt = [], []
    for n, it in enumerate(items):
        c = len(ctx_of(it))
        rn += [n] * len(it.response)
        rt += range(c - 1, c - 1 + len(it.response))
    return np.array(rn, dtype=np.int64), np.array(rt, dtype=np.int64)


def teacher_distributions(teacher: ModelParams, items: Sequence[KdItem]) -> list[np.ndarray]:
    """Per item, a (len(response), vocab) array of teacher next-token probabilities."""
    out = []
    for start in range(0, len(items), TEACHER_CHUNK):
        chunk = items[start:start + TEACHER_CHUNK]
        ids, mask = batch_arrays([it.teacher_ctx + it.response for it in chunk], teacher.config.pad_id)
        logits, _ = forward(teacher, None, ids, mask)
        rn, rt = _rows(chunk, lambda it: it.teacher_ctx)
        probs = np.exp(log_softmax(logits[rn, rt], teacher.config.pad_id))
        bounds = np.cumsum([0] + [len(it.response) for it in chunk])
        out += [probs[bounds[i]:bounds[i + 1]] for i in range(len(chunk))]
    return out


@dataclass
class KdTerms:
    cross_entropy: float  # the optimized objective
    teacher_entropy: float
    kl: float
    positions: int
    clamped: int
    grads: Optional[Grads] = None


def kd_terms(teacher_probs: Sequence[np.ndarray], student: ModelParams,
             adapter: Optional[LoraAdapter], items: Sequence[KdItem],
             want_grad: bool = False) -> KdTerms:
    """Position-averaged distillation terms for one batch, optionally with gradients."""
    if not items:
        raise KdError("empty batch")
    pad = student.config.pad_id
    ids, mask = batch_arrays([it.student_ctx + it.response for it in items], pad)
    logits, cache = forward(student, adapter, ids, mask, keep_cache=want_grad)
    rn, rt = _rows(items, lambda it: it.student_ctx)
    P = np.concatenate(teacher_probs, axis=0)
    if P.shape != (len(rn), student.config.vocab_size):
        raise KdError(f"teacher distributions have shape {P.shape}, expected {(len(rn), student.config.vocab_size)}")
    lq = log_softmax(logits[rn, rt], pad)
    clamped = (lq < LOG_FLOOR) & (P > 0)
    n_clamped = int(clamped.sum())
    if n_clamped:
        log.warning("student probability clamped at %g for %d teacher-supported entries", PROB_FLOOR, n_clamped)
    lq_c = np.maximum(lq, LOG_FLOOR)
    count = len(rn)
    ce = float(-(P * lq_c).sum() / count)
    support = P > 0
    logp = np.log(np.where(support, P, 1.0))
    ent = float(-(P * logp).sum() / count)
    kl = float((P * (logp - lq_c)).sum() / count)
    grads = None
    if want_grad:
        # d/dz of -sum_y p_y log q_y over unclamped y
        Pu = np.where(clamped, 0.0, P)
        d = (np.exp(lq) * Pu.sum(-1, keepdims=True) - Pu) / count
        dlogits = np.zeros_like(logits)
        dlogits[rn, rt] = d
        grads = backward(student, cache, dlogits)
    return KdTerms(ce, ent, kl, count, n_clamped, grads)


def kd_loss(teacher: ModelParams, student: ModelParams, adapter: Optional[LoraAdapter],
            batch: Sequence[KdItem]) -> float:
    """Mean over response positions of -sum_y p_teacher(y) log p_student(y)."""
    return kd_terms(teacher_distributions(teacher, batch), student, adapter, batch).cross_entropy


def kd_grad(teacher: ModelParams, student: ModelParams, adapter: Optional[LoraAdapter],
            batch: Sequence[KdItem]) -> Grads:
    return kd_terms(teacher_distributions(teacher, batch), student, adapter, batch, want_grad=True).grads


def eval_alignment(teacher: ModelParams, student: ModelParams, adapter: Optional[LoraAdapter],
                   dataset: Sequence[KdItem], teacher_probs: Optional[Sequence[np.ndarray]] = None) -> float:
    """Mean per-position KL(teacher || student)."""
    if teacher_probs is None:
        teacher_probs = teacher_distributions(teacher, dataset)
    total, count = 0.0, 0
    for start in range(0, len(dataset), TEACHER_CHUNK):
        sl = slice(start, start + TEACHER_CHUNK)
        t = kd_terms(teacher_probs[sl], student, adapter, dataset[sl])
        total += t.kl * t.positions
        count += t.positions
    return total / count


def _trainable_slots(grads: Grads, adapter: LoraAdapter, student: ModelParams,
                     embed_rows: Optional[np.ndarray]):
    slots = []
    for k in adapter.A:
        slots.append((f"A:{k}", adapter.A[k], grads.A[k]))
        slots.append((f"B:{k}", adapter.B[k], grads.B[k]))
    if embed_rows is not None and len(embed_rows):
        g = np.zeros_like(student.arrays["embed"])
        g[embed_rows] = grads.base["embed"][embed_rows]
        slots.append(("embed", student.arrays["embed"], g))
    return slots


def train_kd(teacher: ModelParams, student: ModelParams, adapter: LoraAdapter,
             dataset: Sequence[KdItem], cfg: TrainConfig,
             heldout: Optional[Sequence[KdItem]] = None,
             embed_rows: Optional[Sequence[int]] = None,
             target_probs: Optional[Sequence[np.ndarray]] = None):
    """Fit the student's adapter (and optionally some embedding rows) to the teacher.

    Returns ``(adapter, student, log)``; inputs are not modified.  Each step
    averages ``grad_accum`` micro-batches of ``batch_size`` items before one
    update.  ``embed_rows`` names rows of the student embedding that train
    alongside the adapter (the speech block, whose rows the text-only teacher
    never fit).  ``target_probs`` replaces the teacher's distributions on
    the training set (one-hot references turn the loop into plain MLE).
    """
    if not dataset:
        raise KdError("train_kd needs a non-empty dataset")
    adapter = adapter.copy()
    student = student.copy()
    rows = None if embed_rows is None else np.asarray(sorted(set(embed_rows)), dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    sampler = EpochSampler(len(dataset), cfg.batch_size, rng)
    opt = Optimizer(cfg.optimizer, cfg.weight_decay)
    tprobs = target_probs if target_probs is not None else teacher_distributions(teacher, dataset)
    held_probs = teacher_distributions(teacher, heldout) if heldout else None
    records = []
    for step in range(cfg.max_steps):
        lr = warmup_lr(cfg.learning_rate, step, cfg.warmup_steps)
        acc = None
        loss = kl = 0.0
        for _ in range(cfg.grad_accum):
            idx = sampler.next()
            t = kd_terms([tprobs[i] for i in idx], student, adapter, [dataset[i] for i in idx], want_grad=True)
            loss += t.cross_entropy / cfg.grad_accum
            kl += t.kl / cfg.grad_accum
            acc = t.grads if acc is None else acc.add_(t.grads)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite KD loss at step {step + 1}")
        grads = acc.scaled(1.0 / cfg.grad_accum)
        opt.step(clip_slots(_trainable_slots(grads, adapter, student, rows), cfg.clip_norm), lr)
        rec = {"step": step + 1, "loss": loss, "kl": kl, "lr": lr}
        if held_probs is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            rec["heldout_kl"] = eval_alignment(teacher, student, adapter, heldout, held_probs)
        records.append(rec)
    return adapter, student, records


def onehot_targets(items: Sequence[KdItem], vocab_size: int) -> list[np.ndarray]:
    out = []
    for it in items:
        p = np.zeros((len(it.response), vocab_size))
        p[np.arange(len(it.response)), it.response] = 1.0
        out.append(p)
    return out


# ------------------------------------------------------- teacher pretraining

def mle_terms(params: ModelParams, adapter: Optional[LoraAdapter], items: Sequence[KdItem],
              use_student: bool = False, want_grad: bool = False):
    """Mean response NLL of the teacher (or student) view; returns (nll, grads)."""
    ctx_of = (lambda it: it.student_ctx) if use_student else (lambda it: it.teacher_ctx)
    pad = params.config.pad_id
    ids, mask = batch_arrays([ctx_of(it) + it.response for it in items], pad)
    logits, cache = forward(params, adapter, ids, mask, keep_cache=want_grad)
    rn, rt = _rows(items, ctx_of)
    targets = np.concatenate([it.response for it in items])
    lq = log_softmax(logits[rn, rt], pad)
    count = len(rn)
    nll = float(-lq[np.arange(count), targets].sum() / count)
    grads = None
    if want_grad:
        d = np.exp(lq)
        d[np.arange(count), targets] -= 1.0
        dlogits = np.zeros_like(logits)
        dlogits[rn, rt] = d / count
        grads = backward(params, cache, dlogits)
    return nll, grads


def pretrain_teacher(params: ModelParams, items: Sequence[KdItem], cfg: TrainConfig):
    """Maximum-likelihood fit of all base weights on the text view.

    Stands in for the pretrained language model: it teaches the base to
    produce the response from the text prefix.  Returns ``(params, log)``.
    """
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    sampler = EpochSampler(len(items), cfg.batch_size, rng)
    opt = Optimizer(cfg.optimizer, cfg.weight_decay)
    records = []
    for step in range(cfg.max_steps):
        lr = warmup_lr(cfg.learning_rate, step, cfg.warmup_steps)
        acc, loss = None, 0.0
        for _ in range(cfg.grad_accum):
            nll, g = mle_terms(params, None, [items[i] for i in sampler.next()], want_grad=True)
            loss += nll / cfg.grad_accum
            acc = g if acc is None else acc.add_(g)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite MLE loss at step {step + 1}")
        grads = acc.scaled(1.0 / cfg.grad_accum)
        slots = [(k, params.arrays[k], grads.base[k]) for k in sorted(params.arrays)]
        opt.step(clip_slots(slots, cfg.clip_norm), lr)
        records.append({"step": step + 1, "loss": loss, "lr": lr})
    return params, records
