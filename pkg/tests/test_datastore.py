import json

import numpy as np
import pytest

from aligncap.codebook import check_partition
from aligncap.datastore import (CKPT_MAGIC, CheckpointError, DataError, SpeechCaptionPair, SynthSpec,
                                checkpoint_bytes, load_checkpoint, load_pairs, save_checkpoint, save_corpus,
                                save_pairs, split_sizes, synth_dataset)
from aligncap.lm import ModelConfig, init_adapter, init_model


def test_pairs_roundtrip(tmp_path):
    pairs = [SpeechCaptionPair("a", (5, 6), "a sad voice"), SpeechCaptionPair("b", (7,), "low", "hi there")]
    save_pairs(pairs, tmp_path / "p.jsonl")
    assert load_pairs(tmp_path / "p.jsonl") == pairs


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_pairs(tmp_path / "e.jsonl") == []


def test_empty_caption_names_field_and_line(tmp_path):
    (tmp_path / "bad.jsonl").write_text(json.dumps({"id": "x", "speech_tokens": [1], "caption": ""}) + "\n")
    with pytest.raises(DataError, match=r"line 1.*caption|caption.*line 1"):
        load_pairs(tmp_path / "bad.jsonl")


def test_speech_tokens_checked_against_codebook(tmp_path):
    corpus = synth_dataset(SynthSpec(n_items=10, seed=1))
    cb = corpus.codebook
    rec = {"id": "x", "speech_tokens": [0], "caption": "a voice"}  # a text id, not speech
    (tmp_path / "bad.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(DataError, match="speech_tokens"):
        load_pairs(tmp_path / "bad.jsonl", cb)


def test_split_sizes():
    assert split_sizes(10) == (8, 1, 1)
    assert split_sizes(250) == (200, 25, 25)


def test_synth_determinism_and_layout(tmp_path):
    spec = SynthSpec(n_items=250, vocab_size=64, seed=7)
    a, b = synth_dataset(spec), synth_dataset(spec)
    assert a.pairs == b.pairs and a.split == b.split
    assert a.codebook.size == 64
    assert [len(a.split[k]) for k in ("train", "val", "test")] == [200, 25, 25]
    assert sorted(sum(a.split.values(), [])) == list(range(250))
    for p in a.pairs:
        assert all(a.codebook.is_speech(t) for t in p.speech_tokens)
        check_partition(a.codebook, p.speech_tokens)
    save_corpus(a, tmp_path / "one")
    save_corpus(b, tmp_path / "two")
    for name in ("pairs.jsonl", "train.jsonl", "codebook.json", "clues.tsv", "split.json"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_noise_free_archetype_emission_is_shared():
    c = synth_dataset(SynthSpec(n_items=40, noise=0.0, seed=3))
    by_arch = {}
    for lab, p in zip(c.labels, c.pairs):
        by_arch.setdefault(lab, []).append(p)
    lab, group = next((k, g) for k, g in by_arch.items() if len(g) >= 2)
    support = set(np.flatnonzero(c.emission[lab] > c.emission[lab].min()))
    for p in group:
        # most tokens come from the archetype's preferred block
        hits = sum((t - c.codebook.speech_offset) in support for t in p.speech_tokens)
        assert hits >= 1


def _model():
    p = init_model(ModelConfig(12, 8, 2, 1, 16, 10, pad_id=0), 4)
    ad = init_adapter(p, rank=2, seed=1)
    for k in ad.B:
        ad.B[k] += np.random.default_rng(0).normal(size=ad.B[k].shape)
    return p, ad


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    p, ad = _model()
    save_checkpoint(p, ad, tmp_path / "m.ckpt")
    q, bd = load_checkpoint(tmp_path / "m.ckpt")
    assert q.config == p.config
    assert all(q[k].tobytes() == p[k].tobytes() for k in p.arrays)
    assert all(bd.A[k].tobytes() == ad.A[k].tobytes() and bd.B[k].tobytes() == ad.B[k].tobytes() for k in ad.A)
    assert checkpoint_bytes(q, bd) == (tmp_path / "m.ckpt").read_bytes()


def test_corrupted_header(tmp_path):
    p, ad = _model()
    raw = checkpoint_bytes(p, ad)
    (tmp_path / "bad.ckpt").write_bytes(raw.replace(CKPT_MAGIC.encode(), b"ALIGNCAP-CKPT v9", 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_truncated_and_trailing(tmp_path):
    raw = checkpoint_bytes(*_model())
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "x.ckpt")


def test_adapter_only_onto_mismatched_base(tmp_path):
    p, ad = _model()
    save_checkpoint(None, ad, tmp_path / "a.ckpt")
    other = init_model(ModelConfig(12, 16, 2, 1, 16, 10, pad_id=0), 0)
    with pytest.raises(CheckpointError, match="l0.attn.w"):
        load_checkpoint(tmp_path / "a.ckpt", base=other)
    _, back = load_checkpoint(tmp_path / "a.ckpt", base=p)
    assert sorted(back.targets) == sorted(ad.targets)
    assert all(back.B[k].tobytes() == ad.B[k].tobytes() for k in ad.B)
