"""Emotional-clue extraction and prompt assembly."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .codebook import JointCodebook, TokenSeq, encode_text, normalize_words

CATEGORIES = ("tone", "intonation", "pitch", "rhythm", "volume", "adjective")
MAX_PHRASE_WORDS = 4


class ClueVocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class ClueVocabulary:
    entries: dict  # phrase -> category

    def __post_init__(self):
        if not self.entries:
            raise ClueVocabularyError("clue vocabulary is empty")
        for phrase, cat in self.entries.items():
            n = len(phrase.split())
            if phrase != phrase.lower() or phrase != " ".join(phrase.split()):
                raise ClueVocabularyError(f"phrase {phrase!r} must be lowercase, single-spaced")
            if not 1 <= n <= MAX_PHRASE_WORDS:
                raise ClueVocabularyError(f"phrase {phrase!r} has {n} words (allowed 1-4)")
            if cat not in CATEGORIES:
                raise ClueVocabularyError(f"unknown category {cat!r} for {phrase!r}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "ClueVocabulary":
        entries = {}
        for phrase, cat in pairs:
            if phrase in entries:
                raise ClueVocabularyError(f"duplicate phrase {phrase!r}")
            entries[phrase] = cat
        return cls(entries)

    @classmethod
    def load(cls, path) -> "ClueVocabulary":
        pairs = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ClueVocabularyError(f"line {lineno}: expected 'phrase<TAB>category'")
            pairs.append((parts[0].strip(), parts[1].strip()))
        return cls.from_pairs(pairs)

    def to_tsv(self) -> str:
        return "".join(f"{p}\t{c}\n" for p, c in self.entries.items())

    def save(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    def __contains__(self, phrase) -> bool:
        return phrase in self.entries


@dataclass(frozen=True)
class AcousticPrompt:
    clues: tuple[str, ...]
    rendered: str


@dataclass(frozen=True)
class PrefixPrompt:
    acoustic: AcousticPrompt
    semantic: str
    instruct: str


def extract_clues(vocab: ClueVocabulary, caption: str) -> list[str]:
    """Longest-match scan of the normalized caption against the vocabulary.

    Returns clues in order of first occurrence, without duplicates.
    """
    words = normalize_words(caption)
    found: list[str] = []
    i = 0
    while i < len(words):
        for n in range(min(MAX_PHRASE_WORDS, len(words) - i), 0, -1):
            phrase = " ".join(words[i:i + n])
            if phrase in vocab.entries:
                if phrase not in found:
                    found.append(phrase)
                i += n
                break
        else:
            i += 1
    return found


def render_acoustic_prompt(clues: Iterable[str]) -> AcousticPrompt:
    clues = tuple(clues)
    if not clues:
        text = ""
    elif len(clues) == 1:
        text = f"Feeling {clues[0]}"
    else:
        text = "Feeling " + ", ".join(clues[:-1]) + ", and " + clues[-1]
    return AcousticPrompt(clues, text)


def parse_acoustic_prompt(rendered: str) -> list[str]:
    """Inverse of render_acoustic_prompt for clues free of ', ' and leading 'and '."""
    if not rendered:
        return []
    if not rendered.startswith("Feeling "):
        raise ValueError(f"not an acoustic prompt: {rendered!r}")
    parts = rendered[len("Feeling "):].split(", ")
    if len(parts) > 1:
        if not parts[-1].startswith("and "):
            raise ValueError(f"missing final 'and' in {rendered!r}")
        parts[-1] = parts[-1][len("and "):]
    return parts


def build_prefix(vocab: ClueVocabulary, caption: str, instruct: str,
                 use_acoustic: bool = True) -> PrefixPrompt:
    clues = extract_clues(vocab, caption) if use_acoustic else []
    return PrefixPrompt(render_acoustic_prompt(clues), caption, instruct)


def assemble_prefix(p: PrefixPrompt, cb: JointCodebook) -> TokenSeq:
    """BOS, acoustic, SEP, semantic, SEP, instruct; empty segments are skipped."""
    segments = [encode_text(cb, s).ids for s in (p.acoustic.rendered, p.semantic, p.instruct)]
    ids = [cb.bos]
    first = True
    for seg in segments:
        if not seg:
            continue
        if not first:
            ids.append(cb.sep)
        ids.extend(seg)
        first = False
    return TokenSeq.of(ids)


def student_context(cb: JointCodebook, speech_ids: Iterable[int], instruct: str = "",
                    include_instruct: bool = True) -> TokenSeq:
    """BOS, speech tokens, then SEP and the instruction when requested."""
    ids = [cb.bos, *speech_ids]
    if include_instruct:
        inst = encode_text(cb, instruct).ids
        if inst:
            ids.append(cb.sep)
            ids.extend(inst)
    return TokenSeq.of(ids)
