"""Speech-caption datasets, preference files, checkpoints and the synthetic corpus."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .codebook import JointCodebook
from .emoparse import ClueVocabulary, build_prefix
from .lm import LoraAdapter, ModelConfig, ModelParams

CKPT_MAGIC = "ALIGNCAP-CKPT v1"


class DataError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class SpeechCaptionPair:
    id: str
    speech_tokens: tuple[int, ...]
    caption: str
    transcript: Optional[str] = None

    def to_json(self) -> dict:
        d = {"id": self.id, "speech_tokens": list(self.speech_tokens), "caption": self.caption}
        if self.transcript is not None:
            d["transcript"] = self.transcript
        return d


def _check_pair(rec: dict, lineno: int, codebook: Optional[JointCodebook]) -> SpeechCaptionPair:
    def bad(fieldname, why):
        return DataError(f"line {lineno}: field '{fieldname}' {why}")

    if not isinstance(rec, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    if not isinstance(rec.get("id"), str):
        raise bad("id", "must be a string")
    toks = rec.get("speech_tokens")
    if not isinstance(toks, list) or not toks or not all(isinstance(t, int) for t in toks):
        raise bad("speech_tokens", "must be a non-empty list of ints")
    if codebook is not None and not all(codebook.is_speech(t) for t in toks):
        raise bad("speech_tokens", "contains ids outside the speech range")
    cap = rec.get("caption")
    if not isinstance(cap, str) or not cap.strip():
        raise bad("caption", "must be a non-empty string")
    tr = rec.get("transcript")
    if tr is not None and not isinstance(tr, str):
        raise bad("transcript", "must be a string when present")
    return SpeechCaptionPair(rec["id"], tuple(toks), cap, tr)


def _read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from None


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def load_pairs(path, codebook: Optional[JointCodebook] = None) -> list[SpeechCaptionPair]:
    return [_check_pair(rec, lineno, codebook) for lineno, rec in _read_jsonl(path)]


def save_pairs(pairs: Sequence[SpeechCaptionPair], path) -> None:
    write_jsonl(path, (p.to_json() for p in pairs))


def load_jsonl(path) -> list[dict]:
    return [rec for _, rec in _read_jsonl(path)]


# ----------------------------------------------------------- synthetic corpus

DEFAULT_CLUES = {
    "low tone": "tone", "high tone": "tone", "soft tone": "tone",
    "rising intonation": "intonation", "falling intonation": "intonation",
    "high pitch": "pitch", "low pitch": "pitch",
    "slow rhythm": "rhythm", "fast rhythm": "rhythm",
    "loud volume": "volume", "quiet volume": "volume",
    "sad": "adjective", "angry": "adjective", "happy": "adjective", "calm": "adjective",
    "surprised": "adjective", "fearful": "adjective", "excited": "adjective", "tired": "adjective",
}

CAPTION_TEMPLATES = (
    "the speaker talks with a {0} and a {1} and sounds {2}",
    "a {2} voice with a {0} and a {1}",
)

DEFAULT_INSTRUCT = "describe the emotion"


@dataclass(frozen=True)
class SynthSpec:
    n_items: int = 200
    speech_size: int = 24
    vocab_size: Optional[int] = None
    speech_len: int = 6
    n_archetypes: int = 8
    noise: float = 0.05
    seed: int = 0
    clues: dict = field(default_factory=lambda: dict(DEFAULT_CLUES))
    instruct: str = DEFAULT_INSTRUCT

    def __post_init__(self):
        if self.n_items < 1 or self.speech_size < 2 or self.speech_len < 1 or self.n_archetypes < 1:
            raise DataError("synth spec sizes must be positive (speech_size >= 2)")
        if not 0.0 <= self.noise <= 1.0:
            raise DataError("noise must lie in [0, 1]")


@dataclass
class SynthCorpus:
    pairs: list[SpeechCaptionPair]
    split: dict[str, list[int]]
    codebook: JointCodebook
    clues: ClueVocabulary
    archetypes: list[tuple[str, str, str]]
    emission: np.ndarray  # (n_archetypes, speech_size) categorical rows
    labels: list[int]  # archetype index per pair

    def subset(self, name: str) -> list[SpeechCaptionPair]:
        return [self.pairs[i] for i in self.split[name]]


def split_sizes(n: int) -> tuple[int, int, int]:
    """8:1:1 train/val/test sizes; rounding leftovers go to train."""
    n_val = n // 10
    n_test = n // 10
    return n - n_val - n_test, n_val, n_test


def _archetypes(clues: ClueVocabulary, k: int, rng) -> list[tuple[str, str, str]]:
    by_cat: dict[str, list[str]] = {}
    for phrase, cat in clues.entries.items():
        by_cat.setdefault(cat, []).append(phrase)
    first = sorted(by_cat.get("tone", []) + by_cat.get("pitch", []) + by_cat.get("intonation", []))
    second = sorted(by_cat.get("rhythm", []) + by_cat.get("volume", []))
    adjs = sorted(by_cat.get("adjective", []))
    if not first or not second or not adjs:
        raise DataError("clue vocabulary needs tone/pitch/intonation, rhythm/volume and adjective entries")
    combos = [(a, b, c) for c in adjs for a in first for b in second]
    if k > len(combos):
        raise DataError(f"only {len(combos)} distinct archetypes available, asked for {k}")
    # adjectives cycle first so the archetypes differ in emotion before anything else
    picked = []
    order = rng.permutation(len(combos))
    seen_adj = set()
    for i in order:
        if combos[i][2] not in seen_adj:
            picked.append(combos[i])
            seen_adj.add(combos[i][2])
        if len(picked) == min(k, len(adjs)):
            break
    for i in order:
        if len(picked) == k:
            break
        if combos[i] not in picked:
            picked.append(combos[i])
    return picked


def synth_dataset(spec: SynthSpec) -> SynthCorpus:
    """Archetype corpus: each archetype fixes a clue bundle and a speech emission profile."""
    rng = np.random.default_rng(spec.seed)
    clues = ClueVocabulary(dict(spec.clues))
    arche = _archetypes(clues, spec.n_archetypes, rng)

    drawn = []
    for _ in range(spec.n_items):
        a = int(rng.integers(spec.n_archetypes))
        t = int(rng.integers(len(CAPTION_TEMPLATES)))
        drawn.append((a, CAPTION_TEMPLATES[t].format(*arche[a])))

    texts = {spec.instruct}
    for _, caption in drawn:
        texts.add(caption)
        texts.add(build_prefix(clues, caption, spec.instruct).acoustic.rendered)
    text_cb = JointCodebook.from_texts(sorted(texts), 0)
    speech_size = spec.speech_size
    if spec.vocab_size is not None:
        speech_size = spec.vocab_size - text_cb.speech_offset
        if speech_size < 2:
            raise DataError(f"vocab_size {spec.vocab_size} leaves {speech_size} speech tokens "
                            f"after {text_cb.speech_offset} text/special ids")
    codebook = JointCodebook(text_cb.text_vocab, speech_size)

    # each archetype prefers a block of speech tokens; blocks wrap when speech ids are scarce
    emission = np.full((spec.n_archetypes, speech_size), 0.02)
    block = max(1, speech_size // spec.n_archetypes)
    for a in range(spec.n_archetypes):
        for j in range(block):
            emission[a, (a * block + j) % speech_size] += 1.0
    emission /= emission.sum(1, keepdims=True)

    pairs = []
    for n, (a, caption) in enumerate(drawn):
        toks = rng.choice(speech_size, size=spec.speech_len, p=emission[a])
        noisy = rng.random(spec.speech_len) < spec.noise
        toks = np.where(noisy, rng.integers(speech_size, size=spec.speech_len), toks)
        ids = tuple(codebook.speech_id(int(x)) for x in toks)
        pairs.append(SpeechCaptionPair(f"syn{n:05d}", ids, caption))

    perm = [int(i) for i in rng.permutation(spec.n_items)]
    n_tr, n_va, _ = split_sizes(spec.n_items)
    split = {"train": sorted(perm[:n_tr]), "val": sorted(perm[n_tr:n_tr + n_va]),
             "test": sorted(perm[n_tr + n_va:])}
    return SynthCorpus(pairs, split, codebook, clues, arche, emission,
                       [a for a, _ in drawn])


def save_corpus(corpus: SynthCorpus, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"pairs": out / "pairs.jsonl", "codebook": out / "codebook.json",
             "clues": out / "clues.tsv", "split": out / "split.json"}
    save_pairs(corpus.pairs, paths["pairs"])
    for name in ("train", "val", "test"):
        paths[name] = out / f"{name}.jsonl"
        save_pairs(corpus.subset(name), paths[name])
    corpus.codebook.save(paths["codebook"])
    corpus.clues.save(paths["clues"])
    paths["split"].write_text(json.dumps(corpus.split, sort_keys=True) + "\n")
    return paths


# ---------------------------------------------------------------- checkpoints

def checkpoint_bytes(params: Optional[ModelParams], adapter: Optional[LoraAdapter] = None) -> bytes:
    if params is None and adapter is None:
        raise CheckpointError("nothing to save")
    named: list[tuple[str, np.ndarray]] = []
    if params is not None:
        named += [(f"base/{k}", params.arrays[k]) for k in sorted(params.arrays)]
    if adapter is not None:
        for k in sorted(adapter.A):
            named += [(f"lora_A/{k}", adapter.A[k]), (f"lora_B/{k}", adapter.B[k])]
    entries, offset = [], 0
    for name, arr in named:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += 8 * arr.size
    manifest = {
        "adapter": adapter is not None,
        "base": params is not None,
        "config": asdict(params.config) if params is not None else None,
        "lora": {"rank": adapter.rank, "scale": adapter.scale} if adapter is not None else None,
        "arrays": entries,
        "nbytes": offset,
    }
    head = (CKPT_MAGIC + "\n" + json.dumps(manifest, sort_keys=True) + "\n").encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in named)
    return head + body


def save_checkpoint(params: Optional[ModelParams], adapter: Optional[LoraAdapter], path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, adapter))


def load_checkpoint(path, base: Optional[ModelParams] = None):
    """Returns (params, adapter); either may be None depending on file contents.

    ``base`` supplies the model an adapter-only file is meant for, so shapes
    can be validated against it.
    """
    raw = Path(path).read_bytes()
    magic, _, rest = raw.partition(b"\n")
    if magic.decode("utf-8", errors="replace") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: version mismatch, header {magic[:32]!r}, expected {CKPT_MAGIC!r}")
    mline, _, body = rest.partition(b"\n")
    try:
        manifest = json.loads(mline)
    except json.JSONDecodeError:
        raise CheckpointError(f"{path}: unreadable manifest") from None
    if len(body) < manifest["nbytes"]:
        raise CheckpointError(f"{path}: truncated, {len(body)} of {manifest['nbytes']} data bytes")
    if len(body) > manifest["nbytes"]:
        raise CheckpointError(f"{path}: {len(body) - manifest['nbytes']} trailing bytes")
    arrays = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        chunk = body[e["offset"]:e["offset"] + 8 * n]
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)

    params = None
    if manifest["base"]:
        cfg = ModelConfig(**manifest["config"])
        expected = cfg.shapes()
        base_arrays = {}
        for k, shape in expected.items():
            a = arrays.get(f"base/{k}")
            if a is None:
                raise CheckpointError(f"{path}: missing array base/{k}")
            if a.shape != shape:
                raise CheckpointError(f"{path}: array base/{k} has shape {a.shape}, config implies {shape}")
            base_arrays[k] = a
        params = ModelParams(cfg, base_arrays)

    adapter = None
    if manifest["adapter"]:
        names = sorted(k[len("lora_A/"):] for k in arrays if k.startswith("lora_A/"))
        adapter = LoraAdapter(int(manifest["lora"]["rank"]), float(manifest["lora"]["scale"]),
                              {k: arrays[f"lora_A/{k}"] for k in names},
                              {k: arrays[f"lora_B/{k}"] for k in names})
        target = params if params is not None else base
        if target is not None:
            shapes = target.config.shapes()
            for k in names:
                if k not in shapes:
                    raise CheckpointError(f"{path}: adapter array {k} has no matching base weight")
                d_out, d_in = shapes[k]
                if adapter.A[k].shape != (d_out, adapter.rank):
                    raise CheckpointError(f"{path}: array lora_A/{k} shape {adapter.A[k].shape} "
                                          f"incompatible with base weight {shapes[k]}")
                if adapter.B[k].shape != (adapter.rank, d_in):
                    raise CheckpointError(f"{path}: array lora_B/{k} shape {adapter.B[k].shape} "
                                          f"incompatible with base weight {shapes[k]}")
    return params, adapter
