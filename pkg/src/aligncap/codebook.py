"""Joint text/speech token space.

Layout of the id space is fixed: text tokens first, then the five special
tokens, then one contiguous block of speech tokens.  Everything that needs to
know whether an id is text, special or speech asks the codebook.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPECIAL_NAMES = ("pad", "bos", "eos", "sep", "unk")


class CodebookError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSeq:
    """Token ids plus a validity mask (False marks padding)."""

    ids: tuple[int, ...]
    mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.mask):
            raise CodebookError(f"ids/mask length mismatch: {len(self.ids)} != {len(self.mask)}")

    @classmethod
    def of(cls, ids: Iterable[int]) -> "TokenSeq":
        ids = tuple(int(i) for i in ids)
        return cls(ids, (True,) * len(ids))

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: "TokenSeq") -> "TokenSeq":
        return TokenSeq(self.ids + other.ids, self.mask + other.mask)

    @property
    def valid_ids(self) -> tuple[int, ...]:
        return tuple(i for i, m in zip(self.ids, self.mask) if m)

    def n_valid(self) -> int:
        return sum(self.mask)


@dataclass(frozen=True)
class JointCodebook:
    text_vocab: tuple[str, ...]
    speech_size: int
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.text_vocab)) != len(self.text_vocab):
            raise CodebookError("duplicate entries in text vocabulary")
        if any(not w or any(c.isspace() for c in w) for w in self.text_vocab):
            raise CodebookError("text tokens must be non-empty and contain no whitespace")
        if self.speech_size < 0:
            raise CodebookError("speech_size must be >= 0")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.text_vocab)})

    @classmethod
    def from_texts(cls, texts: Iterable[str], speech_size: int) -> "JointCodebook":
        """Collect every whitespace unit of ``texts`` in first-seen order."""
        seen: dict[str, None] = {}
        for t in texts:
            for w in t.split():
                seen.setdefault(w, None)
        return cls(tuple(seen), speech_size)

    @property
    def text_size(self) -> int:
        return len(self.text_vocab)

    @property
    def special(self) -> dict[str, int]:
        return {name: self.text_size + k for k, name in enumerate(SPECIAL_NAMES)}

    @property
    def pad(self) -> int:
        return self.text_size

    @property
    def bos(self) -> int:
        return self.text_size + 1

    @property
    def eos(self) -> int:
        return self.text_size + 2

    @property
    def sep(self) -> int:
        return self.text_size + 3

    @property
    def unk(self) -> int:
        return self.text_size + 4

    @property
    def speech_offset(self) -> int:
        return self.text_size + len(SPECIAL_NAMES)

    @property
    def size(self) -> int:
        return self.speech_offset + self.speech_size

    def speech_id(self, k: int) -> int:
        if not 0 <= k < self.speech_size:
            raise CodebookError(f"speech index {k} outside [0, {self.speech_size})")
        return self.speech_offset + k

    def is_speech(self, i: int) -> bool:
        return self.speech_offset <= i < self.size

    def is_special(self, i: int) -> bool:
        return self.text_size <= i < self.speech_offset

    def is_text(self, i: int) -> bool:
        return 0 <= i < self.text_size

    def token_str(self, i: int) -> str:
        if self.is_text(i):
            return self.text_vocab[i]
        if self.is_special(i):
            return f"<{SPECIAL_NAMES[i - self.text_size]}>"
        if self.is_speech(i):
            return f"<s{i - self.speech_offset}>"
        raise CodebookError(f"id {i} outside vocabulary of size {self.size}")

    def period_ids(self) -> frozenset[int]:
        return frozenset(i for i, w in enumerate(self.text_vocab) if "." in w)

    def text_id(self, word: str) -> int:
        return self._index.get(word, self.unk)

    def to_json(self) -> str:
        doc = {"text_vocab": list(self.text_vocab), "speech_size": self.speech_size,
               "special": self.special}
        return json.dumps(doc, ensure_ascii=False, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "JointCodebook":
        doc = json.loads(text)
        cb = cls(tuple(doc["text_vocab"]), int(doc["speech_size"]))
        if "special" in doc and {k: int(v) for k, v in doc["special"].items()} != cb.special:
            raise CodebookError(f"special ids {doc['special']} do not match layout {cb.special}")
        return cb

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "JointCodebook":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def encode_text(codebook: JointCodebook, text: str) -> TokenSeq:
    return TokenSeq.of(codebook.text_id(w) for w in text.split())


def decode_text(codebook: JointCodebook, seq: TokenSeq) -> str:
    """Render text ids back to a string; PAD/BOS/EOS/SEP vanish, UNK shows as <unk>."""
    words = []
    for i in seq.ids:
        if codebook.is_speech(i):
            raise CodebookError(f"cannot decode speech token id {i} as text")
        if codebook.is_text(i):
            words.append(codebook.text_vocab[i])
        elif i == codebook.unk:
            words.append("<unk>")
        elif not codebook.is_special(i):
            raise CodebookError(f"id {i} outside vocabulary of size {codebook.size}")
    return " ".join(words)


def pad_pair(a: TokenSeq, b: TokenSeq, pad_id: int) -> tuple[TokenSeq, TokenSeq]:
    n = max(len(a), len(b))

    def grow(s: TokenSeq) -> TokenSeq:
        k = n - len(s)
        if k == 0:
            return s
        return TokenSeq(s.ids + (pad_id,) * k, s.mask + (False,) * k)

    return grow(a), grow(b)


_PUNCT = re.compile(r"[^\w\s]", re.UNICODE)


def normalize_words(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace (metrics and clue parsing)."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class ToyQuantizer:
    """Nearest-centroid quantizer standing in for the first RVQ layer."""

    centroids: np.ndarray
    speech_offset: int = 0

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 2:
            raise CodebookError("need at least 2 centroids in a 2-D array")
        if not np.all(np.isfinite(c)):
            raise CodebookError("centroids must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def speech_size(self) -> int:
        return self.centroids.shape[0]

    @property
    def d_feat(self) -> int:
        return self.centroids.shape[1]

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(f"TOYVQ1 {self.speech_size} {self.d_feat}\n".encode("ascii"))
            f.write(self.centroids.astype("<f4").tobytes())

    @classmethod
    def load(cls, path, speech_offset: int = 0) -> "ToyQuantizer":
        raw = Path(path).read_bytes()
        head, _, body = raw.partition(b"\n")
        parts = head.decode("ascii", errors="replace").split()
        if len(parts) != 3 or parts[0] != "TOYVQ1":
            raise CodebookError(f"bad quantizer header {head[:40]!r}")
        k, d = int(parts[1]), int(parts[2])
        if len(body) != 4 * k * d:
            raise CodebookError(f"expected {4 * k * d} bytes of centroids, found {len(body)}")
        c = np.frombuffer(body, dtype="<f4").reshape(k, d).astype(np.float64)
        return cls(c, speech_offset)


def quantize(q: ToyQuantizer, frames: Sequence[Sequence[float]]) -> TokenSeq:
    """Map each frame to its nearest centroid; ties go to the lowest index."""
    f = np.asarray(frames, dtype=np.float64)
    if f.size == 0:
        return TokenSeq((), ())
    if f.ndim != 2 or f.shape[1] != q.d_feat:
        raise CodebookError(f"frames must have dimension {q.d_feat}, got shape {f.shape}")
    # explicit differences (not the |a|^2-2ab+|b|^2 expansion) keep exact ties exact
    dist = ((f[:, None, :] - q.centroids[None, :, :]) ** 2).sum(-1)
    return TokenSeq.of(q.speech_offset + int(k) for k in np.argmin(dist, axis=1))


def check_partition(codebook: JointCodebook, ids: Iterable[int]) -> None:
    """Raise if any id falls outside the vocabulary."""
    for i in ids:
        if not 0 <= i < codebook.size:
            raise CodebookError(f"id {i} outside vocabulary of size {codebook.size}")
