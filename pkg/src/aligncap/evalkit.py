"""Caption metrics (BLEU-4, ROUGE-L, METEOR-lite, CIDEr) and automatic-evaluation prompts.

All metrics share one tokenization: lowercase, punctuation removed, split
on whitespace.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

from .codebook import normalize_words

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9  # recall weight: Fmean = PR / (alpha P + (1 - alpha) R)
METEOR_GAMMA = 0.5
METEOR_EXP = 3.0
BLEU_EPS = 1e-16


@dataclass(frozen=True)
class EvalItem:
    candidate: str
    references: tuple[str, ...]

    def __post_init__(self):
        if not self.references:
            raise ValueError("each item needs at least one reference")


EvalCorpus = Sequence[EvalItem]


def make_corpus(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> list[EvalItem]:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    return [EvalItem(c, tuple(r)) for c, r in zip(candidates, references)]


def ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


# ---------------------------------------------------------------------- BLEU

def _bleu_stats(cand: list[str], refs: list[list[str]]):
    """Clipped matches and totals for n = 1..4, candidate length, closest reference length."""
    matches, totals = [], []
    for n in range(1, 5):
        c = ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, k in ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], k)
        matches.append(sum(min(k, max_ref[g]) for g, k in c.items()))
        totals.append(max(0, len(cand) - n + 1))
    closest = min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    return matches, totals, len(cand), closest


def _bleu_from_stats(matches, totals, c_len, r_len, smooth: bool) -> float:
    if c_len == 0:
        return 0.0
    logs = []
    for m, t in zip(matches, totals):
        if t == 0 or m == 0:
            if not smooth or t == 0:
                return 0.0
            m = BLEU_EPS
        logs.append(math.log(m / t))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(sum(logs) / 4.0)


def bleu4(corpus: EvalCorpus, smooth: bool = False, sentence_average: bool = False) -> float:
    """Corpus BLEU-4 (uniform weights, clipped counts, closest-length brevity penalty).

    ``smooth`` replaces a zero match count by 1e-16 instead of returning 0;
    ``sentence_average`` averages sentence-level scores instead.
    """
    if not corpus:
        return 0.0
    stats = [_bleu_stats(normalize_words(it.candidate), [normalize_words(r) for r in it.references])
             for it in corpus]
    if sentence_average:
        return sum(_bleu_from_stats(*s, smooth) for s in stats) / len(stats)
    matches = [sum(s[0][n] for s in stats) for n in range(4)]
    totals = [sum(s[1][n] for s in stats) for n in range(4)]
    return _bleu_from_stats(matches, totals, sum(s[2] for s in stats), sum(s[3] for s in stats), smooth)


# ------------------------------------------------------------------- ROUGE-L

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_item(cand: Sequence[str], ref: Sequence[str], beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l_scores(corpus: EvalCorpus) -> list[float]:
    out = []
    for it in corpus:
        cand = normalize_words(it.candidate)
        out.append(max(rouge_l_item(cand, normalize_words(r)) for r in it.references))
    return out


def rouge_l(corpus: EvalCorpus) -> float:
    s = rouge_l_scores(corpus)
    return sum(s) / len(s) if s else 0.0


# ---------------------------------------------------------------- METEOR-lite

def _are_synonyms(a: str, b: str, synonyms: Mapping[str, set]) -> bool:
    return b in synonyms.get(a, ()) or a in synonyms.get(b, ())


def _align(cand: list[str], ref: list[str], synonyms: Mapping[str, set]) -> list[tuple[int, int]]:
    """Exact matches first, then synonyms; each stage left to right, first free reference slot."""
    used_c, used_r = set(), set()
    pairs = []
    for same in (lambda a, b: a == b, lambda a, b: _are_synonyms(a, b, synonyms)):
        for i, w in enumerate(cand):
            if i in used_c:
                continue
            for j, v in enumerate(ref):
                if j not in used_r and same(w, v):
                    used_c.add(i)
                    used_r.add(j)
                    pairs.append((i, j))
                    break
    return sorted(pairs)


def meteor_item(cand: list[str], ref: list[str], synonyms: Mapping[str, set]) -> float:
    pairs = _align(cand, ref, synonyms)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    fmean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_EXP
    return fmean * (1 - penalty)


def meteor_lite(corpus: EvalCorpus, synonyms: Optional[Mapping[str, set]] = None) -> float:
    synonyms = {k.lower(): {s.lower() for s in v} for k, v in (synonyms or {}).items()}
    scores = []
    for it in corpus:
        cand = normalize_words(it.candidate)
        scores.append(max(meteor_item(cand, normalize_words(r), synonyms) for r in it.references))
    return sum(scores) / len(scores) if scores else 0.0


# --------------------------------------------------------------------- CIDEr

def cider_scores(corpus: EvalCorpus) -> list[float]:
    """Per-item CIDEr: mean over n=1..4 of the average TF-IDF cosine to each reference, x10."""
    N = len(corpus)
    cands = [normalize_words(it.candidate) for it in corpus]
    refs = [[normalize_words(r) for r in it.references] for it in corpus]
    df: Counter = Counter()
    for rs in refs:
        seen = set()
        for r in rs:
            for n in range(1, 5):
                seen.update(ngrams(r, n))
        df.update(seen)
    log_n = math.log(N) if N else 0.0

    def vec(words, n):
        return {g: k * (log_n - math.log(max(1.0, df[g]))) for g, k in ngrams(words, n).items()}

    def cos(u, v):
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)

    out = []
    for cand, rs in zip(cands, refs):
        total = 0.0
        for n in range(1, 5):
            vc = vec(cand, n)
            total += sum(cos(vc, vec(r, n)) for r in rs) / len(rs)
        out.append(10.0 * total / 4.0)
    return out


def cider(corpus: EvalCorpus) -> float:
    s = cider_scores(corpus)
    return sum(s) / len(s) if s else 0.0


# -------------------------------------------------------------------- report

@dataclass
class MetricReport:
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float
    per_item: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_corpus(corpus: EvalCorpus, synonyms: Optional[Mapping[str, set]] = None,
                    ids: Optional[Sequence[str]] = None) -> MetricReport:
    synonyms = synonyms or {}
    rl = rouge_l_scores(corpus)
    cd = cider_scores(corpus)
    per_item = []
    for k, it in enumerate(corpus):
        one = [it]
        per_item.append({
            "id": ids[k] if ids is not None else str(k),
            "bleu4": bleu4(one, sentence_average=True),
            "meteor": meteor_lite(one, synonyms),
            "rouge_l": rl[k],
            "cider": cd[k],
        })
    return MetricReport(bleu4(corpus), meteor_lite(corpus, synonyms),
                        sum(rl) / len(rl) if rl else 0.0, sum(cd) / len(cd) if cd else 0.0, per_item)


# --------------------------------------------------------------- AES prompts

# Reconstructed wording; the original automatic-evaluation prompt is only published as an image.
_AES_HEAD = "You are evaluating a generated caption describing the emotion in a speech clip.\n"
_AES_KIND = {
    "clue_overlap": ("Judge how many of the emotional clues in the reference (tone, intonation, pitch, "
                     "rhythm, volume and emotion words) also appear in the generated caption.\n"),
    "summary_overlap": ("Judge how closely the overall emotional state summarized by the generated "
                        "caption matches the state summarized by the reference.\n"),
}
_AES_TAIL = ("Score the overlap from 0 (none) to 10 (complete).\n"
             "Generated caption: {candidate}\n"
             "Reference caption: {reference}\n"
             'Answer with JSON only: {{"scores": [score]}}')


def build_aes_prompt(kind: str, candidate: str, reference: str) -> str:
    if kind not in _AES_KIND:
        raise ValueError(f"unknown AES kind {kind!r}; expected one of {sorted(_AES_KIND)}")
    return _AES_HEAD + _AES_KIND[kind] + _AES_TAIL.format(candidate=candidate, reference=reference)
