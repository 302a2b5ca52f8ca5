"""Preference pairs from judged beam candidates, and DPO against a frozen reference."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Protocol, Sequence

import httpx
import numpy as np

from ._train import EpochSampler, Optimizer, TrainingDiverged, clip_slots, warmup_lr
from .codebook import JointCodebook, TokenSeq, decode_text, encode_text
from .emoparse import ClueVocabulary, extract_clues
from .lm import (DecodeConfig, Grads, LoraAdapter, ModelParams, backward, batch_arrays,
                 beam_decode, forward, log_softmax)

log = logging.getLogger(__name__)

JUDGE_TOKEN_ENV = "ALIGNCAP_JUDGE_TOKEN"


class PrefError(ValueError):
    pass


class JudgeError(RuntimeError):
    pass


# ------------------------------------------------------------------- records

@dataclass(frozen=True)
class PreferencePair:
    x: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]
    chosen_score: float
    rejected_score: float

    def __post_init__(self):
        if self.chosen_score < self.rejected_score:
            raise PrefError(f"chosen score {self.chosen_score} below rejected {self.rejected_score}")
        if self.chosen == self.rejected:
            raise PrefError("chosen and rejected responses are identical")
        if not self.x or not self.chosen or not self.rejected:
            raise PrefError("context and responses must be non-empty")

    def to_json(self, codebook: JointCodebook) -> dict:
        return {"x": list(self.x),
                "chosen": decode_text(codebook, TokenSeq.of(self.chosen)),
                "rejected": decode_text(codebook, TokenSeq.of(self.rejected)),
                "chosen_score": self.chosen_score, "rejected_score": self.rejected_score}

    @classmethod
    def from_json(cls, rec: dict, codebook: JointCodebook) -> "PreferencePair":
        def resp(text):
            return encode_text(codebook, text).ids + (codebook.eos,)
        return cls(tuple(int(i) for i in rec["x"]), resp(rec["chosen"]), resp(rec["rejected"]),
                   float(rec["chosen_score"]), float(rec["rejected_score"]))


@dataclass(frozen=True)
class JudgeRequest:
    prompt: str
    candidates: tuple[str, ...]

    def to_json(self) -> dict:
        return {"prompt": self.prompt, "candidates": list(self.candidates)}


@dataclass(frozen=True)
class JudgeResponse:
    scores: tuple[float, ...]

    @classmethod
    def parse(cls, body, n_expected: int) -> "JudgeResponse":
        """Validate a decoded response body; raise JudgeError quoting it when malformed."""
        snippet = json.dumps(body)[:200] if not isinstance(body, str) else body[:200]
        if not isinstance(body, dict) or not isinstance(body.get("scores"), list):
            raise JudgeError(f"malformed judge response (no 'scores' list): {snippet}")
        scores = body["scores"]
        if len(scores) != n_expected:
            raise JudgeError(f"judge returned {len(scores)} scores for {n_expected} candidates: {snippet}")
        out = []
        for s in scores:
            if isinstance(s, bool) or not isinstance(s, (int, float)) or not math.isfinite(s):
                raise JudgeError(f"non-numeric score {s!r} in judge response: {snippet}")
            if not 0.0 <= s <= 10.0:
                raise JudgeError(f"score {s!r} outside [0, 10] in judge response: {snippet}")
            out.append(float(s))
        return cls(tuple(out))


# Reconstructed wording; the original scoring prompt is only published as an image.
SCORING_TEMPLATE = (
    "You are rating candidate captions that describe the emotion in a speech clip.\n"
    "Compare each candidate with the reference caption. Reward candidates whose emotional clues "
    "(tone, intonation, pitch, rhythm, volume and emotion words) agree with the reference, "
    "penalize clues that contradict it or are not supported by it, and penalize candidates "
    "that do not follow the instruction to describe the speaker's emotion.\n"
    "Score every candidate from 0 (unrelated or wrong) to 10 (fully consistent with the reference).\n"
    "Reference caption: {reference}\n"
    "Candidates:\n{listing}\n"
    'Answer with JSON only: {{"scores": [one number per candidate, in order]}}'
)

_REF_LINE = re.compile(r"^Reference caption: (.*)$", re.MULTILINE)


def build_scoring_prompt(reference: str, candidates: Sequence[str]) -> str:
    listing = "\n".join(f"{i}. {c}" for i, c in enumerate(candidates, 1))
    return SCORING_TEMPLATE.format(reference=reference, listing=listing)


class Judge(Protocol):
    def score(self, request: JudgeRequest) -> JudgeResponse: ...


def clue_f1(clues: ClueVocabulary, candidate: str, reference: str) -> float:
    ref = set(extract_clues(clues, reference))
    cand = set(extract_clues(clues, candidate))
    if not ref and not cand:
        return 1.0
    hit = len(ref & cand)
    if hit == 0:
        return 0.0
    p, r = hit / len(cand), hit / len(ref)
    return 2 * p * r / (p + r)


class MockJudge:
    """Offline judge: 10 x clue-overlap F1 against the reference named in the prompt."""

    def __init__(self, clues: ClueVocabulary):
        self.clues = clues

    def score(self, request: JudgeRequest) -> JudgeResponse:
        m = _REF_LINE.search(request.prompt)
        if m is None:
            raise JudgeError("prompt carries no 'Reference caption:' line")
        ref = m.group(1)
        return JudgeResponse(tuple(10.0 * clue_f1(self.clues, c, ref) for c in request.candidates))


class HttpJudge:
    """POSTs {"prompt", "candidates"} to one endpoint and expects {"scores"} back."""

    def __init__(self, endpoint: str, timeout: float = 30.0, token: Optional[str] = None,
                 retries: int = 3, backoff: float = 0.5, transport: Optional[httpx.BaseTransport] = None,
                 sleep=time.sleep):
        self.endpoint, self.timeout, self.retries, self.backoff = endpoint, timeout, retries, backoff
        self.token = token if token is not None else os.environ.get(JUDGE_TOKEN_ENV)
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._sleep = sleep

    def score(self, request: JudgeRequest) -> JudgeResponse:
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                r = self._client.post(self.endpoint, json=request.to_json(), headers=headers)
            except httpx.TransportError as e:
                last = e
                log.warning("judge transport failure (attempt %d): %s", attempt + 1, e)
                continue
            if r.status_code >= 500:
                last = JudgeError(f"judge HTTP {r.status_code}")
                log.warning("judge server error %d (attempt %d)", r.status_code, attempt + 1)
                continue
            if r.status_code != 200:
                raise JudgeError(f"judge HTTP {r.status_code}: {r.text[:200]}")
            try:
                body = r.json()
            except ValueError:
                raise JudgeError(f"judge response is not JSON: {r.text[:200]}") from None
            return JudgeResponse.parse(body, len(request.candidates))
        raise JudgeError(f"judge unreachable after {self.retries + 1} attempts: {last}")

    def close(self):
        self._client.close()


def make_judge(spec: str, clues: ClueVocabulary, timeout: float = 30.0) -> Judge:
    return MockJudge(clues) if spec == "mock" else HttpJudge(spec, timeout=timeout)


# --------------------------------------------------------- pair construction

def generate_candidates(params: ModelParams, adapter: Optional[LoraAdapter], x, k: int,
                        cfg: DecodeConfig) -> list[TokenSeq]:
    """Distinct top-k beam hypotheses for context ``x``."""
    if k < 2:
        raise PrefError("need k >= 2 candidates to form pairs")
    hyps = beam_decode(params, adapter, x, replace(cfg, beam_width=k))
    seen, out = set(), []
    for seq, _ in hyps:
        if seq.ids not in seen:
            seen.add(seq.ids)
            out.append(seq)
    return out


def score_candidates(judge: Judge, reference: str, candidates: Sequence[str]) -> list[float]:
    if not candidates:
        raise PrefError("no candidates to score")
    req = JudgeRequest(build_scoring_prompt(reference, candidates), tuple(candidates))
    resp = judge.score(req)
    if len(resp.scores) != len(candidates):
        raise JudgeError(f"judge returned {len(resp.scores)} scores for {len(candidates)} candidates")
    return list(resp.scores)


def score_many(judge: Judge, jobs: Sequence[tuple[str, Sequence[str]]], max_workers: int = 4) -> list[list[float]]:
    """Score independent (reference, candidates) jobs with bounded parallelism, in job order."""
    if max_workers <= 1 or len(jobs) <= 1:
        return [score_candidates(judge, ref, c) for ref, c in jobs]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda job: score_candidates(judge, *job), jobs))


def build_pairs(x, candidates: Sequence, scores: Sequence[float]) -> list[PreferencePair]:
    """Best-scored candidate (earliest on ties) against each strictly lower-scored one."""
    if len(candidates) != len(scores) or len(candidates) < 2:
        raise PrefError("need at least two candidates with one score each")
    ids = [tuple(c.ids) if isinstance(c, TokenSeq) else tuple(c) for c in candidates]
    x = tuple(x.ids) if isinstance(x, TokenSeq) else tuple(x)
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    pairs = [PreferencePair(x, ids[best], ids[j], float(scores[best]), float(scores[j]))
             for j in range(len(ids)) if j != best and scores[j] < scores[best]]
    if not pairs:
        raise PrefError("no usable pairs: every candidate ties with the best score")
    return pairs


def corrupted_pairs(contexts: Sequence[tuple[int, ...]], responses: Sequence[tuple[int, ...]],
                    codebook: JointCodebook, n_pairs: int, rng: np.random.Generator,
                    max_corrupt: int = 2) -> list[PreferencePair]:
    """Ground-truth response as chosen, a token-corrupted copy as rejected.

    The rejected score is 10 times the fraction of tokens left intact.
    """
    out = []
    while len(out) < n_pairs:
        i = int(rng.integers(len(contexts)))
        resp = list(responses[i])
        body = [j for j, t in enumerate(resp) if codebook.is_text(t)]
        if not body:
            continue
        n = int(rng.integers(1, max_corrupt + 1))
        bad = list(resp)
        for j in rng.choice(body, size=min(n, len(body)), replace=False):
            choices = [t for t in range(codebook.text_size) if t != resp[j]]
            bad[j] = int(rng.choice(choices))
        changed = sum(a != b for a, b in zip(resp, bad))
        out.append(PreferencePair(tuple(contexts[i]), tuple(resp), tuple(bad), 10.0,
                                  10.0 * (1 - changed / len(resp))))
    return out


def save_prefs(pairs: Sequence[PreferencePair], codebook: JointCodebook, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps(p.to_json(codebook), sort_keys=True) + "\n")


def load_prefs(path, codebook: JointCodebook) -> list[PreferencePair]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(PreferencePair.from_json(json.loads(line), codebook))
                except (KeyError, ValueError, TypeError) as e:
                    raise PrefError(f"{path}: line {lineno}: {e}") from None
    return out


# ------------------------------------------------------------------ DPO loss

@dataclass(frozen=True)
class PoConfig:
    beta: float = 0.1
    learning_rate: float = 5e-7
    max_steps: int = 1000
    seed: int = 0
    batch_size: int = 16
    warmup_steps: int = 0
    optimizer: str = "sgd"
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.beta <= 0:
            raise PrefError("beta must be positive")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_steps < 0:
            raise PrefError("learning_rate and batch_size must be positive, max_steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _pair_seqs(pairs: Sequence[PreferencePair]):
    seqs, ctx_lens, resps = [], [], []
    for p in pairs:
        for r in (p.chosen, p.rejected):
            seqs.append(p.x + r)
            ctx_lens.append(len(p.x))
            resps.append(r)
    return seqs, ctx_lens, resps


def response_logprobs(params: ModelParams, adapter: Optional[LoraAdapter],
                      pairs: Sequence[PreferencePair], want_grad: bool = False):
    """Summed log-probabilities, shape (n_pairs, 2) as [chosen, rejected].

    With ``want_grad`` also returns a callback mapping per-sequence weights
    (n_pairs, 2) to parameter gradients of sum(weights * logprobs).
    """
    pad = params.config.pad_id
    seqs, ctx_lens, resps = _pair_seqs(pairs)
    ids, mask = batch_arrays(seqs, pad)
    logits, cache = forward(params, adapter, ids, mask, keep_cache=want_grad)
    rn = np.concatenate([[n] * len(r) for n, r in enumerate(resps)]).astype(np.int64)
    rt = np.concatenate([np.arange(c - 1, c - 1 + len(r)) for c, r in zip(ctx_lens, resps)]).astype(np.int64)
    tgt = np.concatenate(resps).astype(np.int64)
    lq = log_softmax(logits[rn, rt], pad)
    tok_lp = lq[np.arange(len(rn)), tgt]
    seq_lp = np.bincount(rn, weights=tok_lp, minlength=len(seqs))
    if not want_grad:
        return seq_lp.reshape(-1, 2), None

    def grad_fn(weights: np.ndarray) -> Grads:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)[rn]
        d = -np.exp(lq) * w[:, None]
        d[np.arange(len(rn)), tgt] += w
        dlogits = np.zeros_like(logits)
        dlogits[rn, rt] = d
        return backward(params, cache, dlogits)

    return seq_lp.reshape(-1, 2), grad_fn


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


@dataclass
class DpoTerms:
    loss: float
    margins: np.ndarray  # policy chosen minus rejected log-prob, per pair
    rewards: np.ndarray  # beta-free log-ratio difference, per pair
    grads: Optional[Grads] = None


def dpo_terms(policy: ModelParams, policy_adapter: Optional[LoraAdapter],
              pairs: Sequence[PreferencePair], beta: float, ref_logps: np.ndarray,
              want_grad: bool = False) -> DpoTerms:
    if not pairs:
        raise PrefError("empty pair batch")
    lp, grad_fn = response_logprobs(policy, policy_adapter, pairs, want_grad)
    for i, row in enumerate(lp):
        if not np.all(np.isfinite(row)) or not np.all(np.isfinite(ref_logps[i])):
            raise PrefError(f"non-finite log-probability for pair {i}: policy {row}, reference {ref_logps[i]}")
    z = (lp[:, 0] - ref_logps[:, 0]) - (lp[:, 1] - ref_logps[:, 1])
    losses = -_log_sigmoid(beta * z)
    grads = None
    if want_grad:
        # d loss_i / d z_i = -beta * sigmoid(-beta z_i)
        c = -beta * np.exp(_log_sigmoid(-beta * z)) / len(pairs)
        grads = grad_fn(np.stack([c, -c], axis=1))
    return DpoTerms(float(losses.mean()), lp[:, 0] - lp[:, 1], z, grads)


def reference_logprobs(ref: ModelParams, ref_adapter: Optional[LoraAdapter],
                       pairs: Sequence[PreferencePair], chunk: int = 64) -> np.ndarray:
    parts = [response_logprobs(ref, ref_adapter, pairs[i:i + chunk])[0] for i in range(0, len(pairs), chunk)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 2))


def dpo_loss(policy: ModelParams, policy_adapter: Optional[LoraAdapter], ref: ModelParams,
             ref_adapter: Optional[LoraAdapter], pairs: Sequence[PreferencePair], beta: float) -> float:
    """Mean of -log sigmoid(beta * ((chosen ratio) - (rejected ratio))) over pairs."""
    return dpo_terms(policy, policy_adapter, pairs, beta, reference_logprobs(ref, ref_adapter, pairs)).loss


def dpo_grad(policy: ModelParams, policy_adapter: Optional[LoraAdapter], ref: ModelParams,
             ref_adapter: Optional[LoraAdapter], pairs: Sequence[PreferencePair], beta: float) -> Grads:
    ref_lp = reference_logprobs(ref, ref_adapter, pairs)
    return dpo_terms(policy, policy_adapter, pairs, beta, ref_lp, want_grad=True).grads


def pair_metrics(policy: ModelParams, adapter: Optional[LoraAdapter], pairs: Sequence[PreferencePair],
                 beta: float, ref_logps: np.ndarray, chunk: int = 64) -> dict:
    """Full-dataset loss, mean margin and fraction of pairs with positive margin."""
    losses, margins = [], []
    for i in range(0, len(pairs), chunk):
        t = dpo_terms(policy, adapter, pairs[i:i + chunk], beta, ref_logps[i:i + chunk])
        losses.append(t.loss * len(t.margins))
        margins.append(t.margins)
    m = np.concatenate(margins)
    return {"loss": float(sum(losses) / len(m)), "margin": float(m.mean()),
            "accuracy": float((m > 0).mean())}


@dataclass
class PoResult:
    adapter: LoraAdapter
    log: list = field(default_factory=list)
    initial: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)


def train_po(policy: ModelParams, policy_adapter: LoraAdapter, ref: ModelParams,
             ref_adapter: Optional[LoraAdapter], pairs: Sequence[PreferencePair],
             cfg: PoConfig) -> PoResult:
    """DPO on the policy adapter only; the reference model is read, never written."""
    if not pairs:
        raise PrefError("train_po needs at least one preference pair")
    adapter = policy_adapter.copy()
    ref_lp = reference_logprobs(ref, ref_adapter, pairs)
    initial = pair_metrics(policy, adapter, pairs, cfg.beta, ref_lp)
    rng = np.random.default_rng(cfg.seed)
    sampler = EpochSampler(len(pairs), cfg.batch_size, rng)
    opt = Optimizer(cfg.optimizer)
    records = []
    for step in range(cfg.max_steps):
        lr = warmup_lr(cfg.learning_rate, step, cfg.warmup_steps)
        idx = sampler.next()
        t = dpo_terms(policy, adapter, [pairs[i] for i in idx], cfg.beta, ref_lp[idx], want_grad=True)
        if not math.isfinite(t.loss):
            raise TrainingDiverged(f"non-finite DPO loss at step {step + 1}")
        slots = []
        for k in adapter.A:
            slots += [(f"A:{k}", adapter.A[k], t.grads.A[k]), (f"B:{k}", adapter.B[k], t.grads.B[k])]
        opt.step(clip_slots(slots, cfg.clip_norm), lr)
        records.append({"step": step + 1, "loss": t.loss, "margin": float(t.margins.mean()),
                        "accuracy": float((t.margins > 0).mean()), "lr": lr})
    final = pair_metrics(policy, adapter, pairs, cfg.beta, ref_lp) if cfg.max_steps else dict(initial)
    return PoResult(adapter, records, initial, final)
