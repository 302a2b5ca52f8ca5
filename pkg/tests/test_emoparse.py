import pytest
from hypothesis import given, strategies as st

from aligncap.codebook import JointCodebook, normalize_words
from aligncap.emoparse import (AcousticPrompt, ClueVocabulary, ClueVocabularyError, PrefixPrompt,
                               assemble_prefix, build_prefix, extract_clues, parse_acoustic_prompt,
                               render_acoustic_prompt, student_context)


@pytest.fixture
def vocab():
    return ClueVocabulary({"low tone": "tone", "slow rhythm": "rhythm", "low": "pitch",
                           "sad": "adjective", "angry": "adjective"})


def test_extract_phrase_intersection(vocab):
    assert extract_clues(vocab, "She speaks in a low tone with slow rhythm") == ["low tone", "slow rhythm"]
    assert extract_clues(vocab, "") == []


def test_longest_match_wins(vocab):
    assert extract_clues(vocab, "a low tone voice") == ["low tone"]
    assert extract_clues(vocab, "a low voice") == ["low"]


def test_duplicates_dropped_in_caption_order(vocab):
    assert extract_clues(vocab, "Sad, angry and SAD again") == ["sad", "angry"]


@given(st.lists(st.sampled_from(["a", "low", "tone", "slow", "rhythm", "sad", "with", "angry"]), max_size=15))
def test_extracted_clues_are_vocab_ngrams_of_caption(ws):
    vocab = ClueVocabulary({"low tone": "tone", "slow rhythm": "rhythm", "low": "pitch",
                            "sad": "adjective", "angry": "adjective"})
    caption = " ".join(ws)
    grams = {" ".join(ws[i:i + n]) for n in range(1, 5) for i in range(len(ws) - n + 1)}
    for c in extract_clues(vocab, caption):
        assert c in vocab and c in grams


def test_render_examples():
    assert render_acoustic_prompt(["low tone", "slow rhythm", "sad"]).rendered == \
        "Feeling low tone, slow rhythm, and sad"
    assert render_acoustic_prompt(["angry"]).rendered == "Feeling angry"
    assert render_acoustic_prompt([]).rendered == ""
    assert render_acoustic_prompt(["a", "b"]).rendered == "Feeling a, and b"


_phrase = st.lists(st.sampled_from(["low", "tone", "high", "pitch", "sad", "fast"]), min_size=1, max_size=4) \
    .map(" ".join)


@given(st.lists(_phrase, max_size=10))
def test_render_parse_inverse(clues):
    assert parse_acoustic_prompt(render_acoustic_prompt(clues).rendered) == clues


def test_render_is_deterministic():
    a = render_acoustic_prompt(["sad", "low"]).rendered.encode()
    b = render_acoustic_prompt(["sad", "low"]).rendered.encode()
    assert a == b


def test_assemble_counts():
    cb = JointCodebook.from_texts(["Feeling sad", "he cries", "Describe the emotion"], 4)
    p = PrefixPrompt(AcousticPrompt(("sad",), "Feeling sad"), "he cries", "Describe the emotion")
    ids = assemble_prefix(p, cb).ids
    # one BOS, two SEPs and 2 + 2 + 3 words
    assert len(ids) == 10
    assert ids[0] == cb.bos and ids[3] == cb.sep and ids[6] == cb.sep

    empty = PrefixPrompt(AcousticPrompt((), ""), "", "")
    assert assemble_prefix(empty, cb).ids == (cb.bos,)

    no_act = PrefixPrompt(AcousticPrompt((), ""), "he cries", "Describe the emotion")
    got = assemble_prefix(no_act, cb).ids
    assert got == (cb.bos, cb.text_id("he"), cb.text_id("cries"), cb.sep,
                   cb.text_id("Describe"), cb.text_id("the"), cb.text_id("emotion"))


def test_build_prefix_without_acoustic(vocab):
    p = build_prefix(vocab, "a sad voice", "describe", use_acoustic=False)
    assert p.acoustic.rendered == "" and p.semantic == "a sad voice"


def test_student_context():
    cb = JointCodebook.from_texts(["describe it"], 4)
    s = [cb.speech_id(0), cb.speech_id(3)]
    assert student_context(cb, s, "describe it").ids == (cb.bos, *s, cb.sep, 0, 1)
    assert student_context(cb, s, "describe it", include_instruct=False).ids == (cb.bos, *s)


def test_vocab_file_roundtrip(tmp_path, vocab):
    p = tmp_path / "clues.tsv"
    vocab.save(p)
    assert ClueVocabulary.load(p) == vocab


@pytest.mark.parametrize("line", ["Low\ttone", "a b c d e\ttone", "sad\tmood", "sad"])
def test_vocab_file_rejects_bad_lines(tmp_path, line):
    p = tmp_path / "bad.tsv"
    p.write_text(line + "\n", encoding="utf-8")
    with pytest.raises(ClueVocabularyError):
        ClueVocabulary.load(p)


def test_vocab_rejects_duplicates():
    with pytest.raises(ClueVocabularyError):
        ClueVocabulary.from_pairs([("sad", "adjective"), ("sad", "adjective")])


def test_normalization_shared_with_metrics(vocab):
    assert extract_clues(vocab, "LOW-TONE") == ["low tone"]
    assert normalize_words("LOW-TONE") == ["low", "tone"]
