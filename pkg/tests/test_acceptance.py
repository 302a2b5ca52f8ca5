"""Acceptance suite: one PASS/FAIL line per criterion, then the assertion.

Run alone with ``pytest tests/test_acceptance.py -s`` (or ``python tests/test_acceptance.py``)
to see the verdict lines; the tolerances below are fixed and must not be relaxed.
"""

import hashlib
import json
import math
import random
import sys
import time

import numpy as np
import pytest

from aligncap.cli import ABLATION_ROWS, main
from aligncap.codebook import JointCodebook
from aligncap.evalkit import bleu4, cider, make_corpus, rouge_l
from aligncap.kdalign import KdItem, kd_grad, kd_loss, kd_terms, teacher_distributions
from aligncap.lm import DecodeConfig, beam_decode, greedy_decode, init_adapter
from aligncap.prefopt import PreferencePair, dpo_grad, dpo_loss, dpo_terms, reference_logprobs

from oracles import (bleu4_oracle, cider_oracle, enumerate_sequences, fd_worst, random_ids,
                     rouge_l_oracle, toy_model)

FD_TOL = 1e-4
FD_CONFIGS = 200
FD_BUDGET_S = 120
KL_ZERO_TOL = 1e-9
LN2_TOL = 1e-12
METRIC_TOL = 1e-9
STAGE_BUDGET_S = 300
HARNESS_BUDGET_S = 900
SEED = 7


def verdict(n, ok, detail, capsys):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def read_json(path):
    return json.loads(open(path, encoding="utf-8").read())


# --------------------------------------------------------------------- 1


def _pref_pairs(rng, vocab, n=3):
    out = []
    for _ in range(n):
        c = random_ids(rng, vocab, int(rng.integers(1, 4)))
        r = random_ids(rng, vocab, int(rng.integers(1, 4)))
        if c == r:
            r = r + (1,)
        out.append(PreferencePair(random_ids(rng, vocab, 2), c, r, 1.0, 0.0))
    return out


def test_criterion_1_gradients_match_finite_differences(capsys):
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    kd_worst = dpo_worst = 0.0
    shapes = set()
    for _ in range(FD_CONFIGS):
        student, ad = toy_model(rng)
        cfg = student.config
        assert cfg.vocab_size <= 32 and cfg.d_model <= 16 and cfg.n_layers <= 2
        shapes.add((cfg.vocab_size, cfg.d_model, cfg.n_layers))
        V = cfg.vocab_size
        teacher, _ = toy_model(rng, vocab=V, d=cfg.d_model, layers=cfg.n_layers, with_adapter=False)
        items = [KdItem(random_ids(rng, V, 3), random_ids(rng, V, 2), random_ids(rng, V, 2)) for _ in range(2)]
        g = kd_grad(teacher, student, ad, items)
        w, _ = fd_worst(lambda: kd_loss(teacher, student, ad, items), student, ad, g, rng)
        kd_worst = max(kd_worst, w)

        ref, rad = student.copy(), ad.copy()
        for k in ad.A:
            ad.A[k] += rng.normal(0, 0.1, ad.A[k].shape)
        pairs = _pref_pairs(rng, V)
        beta = float(rng.uniform(0.05, 2.0))
        g = dpo_grad(student, ad, ref, rad, pairs, beta)
        w, _ = fd_worst(lambda: dpo_loss(student, ad, ref, rad, pairs, beta), student, ad, g, rng)
        dpo_worst = max(dpo_worst, w)
    elapsed = time.perf_counter() - t0
    ok = kd_worst < FD_TOL and dpo_worst < FD_TOL and elapsed < FD_BUDGET_S
    verdict(1, ok, f"{FD_CONFIGS} configs ({len(shapes)} shapes), worst rel err kd {kd_worst:.2e} "
                   f"dpo {dpo_worst:.2e} (< {FD_TOL:g}), {elapsed:.1f}s (< {FD_BUDGET_S}s)", capsys)


# --------------------------------------------------------------------- 2


def test_criterion_2_loss_identities(capsys):
    rng = np.random.default_rng(SEED)
    worst_kl = 0.0
    for _ in range(20):
        base, _ = toy_model(rng, with_adapter=False)
        V = base.config.vocab_size
        ad = init_adapter(base, rank=2, seed=int(rng.integers(1 << 30)))
        items = [KdItem(c, c, random_ids(rng, V, 3)) for c in (random_ids(rng, V, 4) for _ in range(3))]
        worst_kl = max(worst_kl, abs(kd_terms(teacher_distributions(base, items), base, ad, items).kl))

    worst_ln2 = 0.0
    for beta in (0.05, 0.1, 1.0):
        p, ad = toy_model(rng)
        pairs = _pref_pairs(rng, p.config.vocab_size, n=5)
        worst_ln2 = max(worst_ln2, abs(dpo_loss(p, ad, p, ad, pairs, beta) - math.log(2)))

    p, ad = toy_model(rng, vocab=8, d=4, layers=1)
    pairs = _pref_pairs(rng, 8, n=1)
    base_lp = reference_logprobs(p, ad, pairs)
    mono = 0
    for _ in range(100):
        margin = float(rng.uniform(0.01, 20.0))
        ref = base_lp.copy()
        ref[0, 0] -= margin
        betas = sorted(rng.uniform(0.01, 5.0, size=4))
        losses = [dpo_terms(p, ad, pairs, b, ref).loss for b in betas]
        mono += all(b < a for a, b in zip(losses, losses[1:]))
    ok = worst_kl < KL_ZERO_TOL and worst_ln2 < LN2_TOL and mono == 100
    verdict(2, ok, f"|KL| at student=teacher {worst_kl:.1e} (< {KL_ZERO_TOL:g}); |dpo - ln2| {worst_ln2:.1e} "
                   f"(< {LN2_TOL:g}); beta-monotone {mono}/100 margins", capsys)


# --------------------------------------------------------- shared pipeline


PREF_CONFIG = {"prefs": {"candidates": 6}}


def _stage(argv):
    t0 = time.perf_counter()
    rc = main(argv)
    return rc, time.perf_counter() - t0


def _run(root, tag, cfg_path):
    d, run = root / "data", root / tag
    files = {"kd": run / "kd.ckpt", "prefs": run / "prefs.jsonl", "po": run / "po.ckpt",
             "caps": run / "caps.jsonl", "report": run / "report.json"}
    steps = {
        "train-kd": ["train-kd", "--seed", str(SEED), "--data", str(d / "train.jsonl"), "--out", str(files["kd"])],
        "gen-prefs": ["gen-prefs", "--config", cfg_path, "--seed", str(SEED), "--data", str(d / "train.jsonl"),
                      "--ckpt", str(files["kd"]), "--out", str(files["prefs"])],
        "train-po": ["train-po", "--seed", str(SEED), "--data", str(files["prefs"]), "--ckpt", str(files["kd"]),
                     "--steps", "1000", "--out", str(files["po"])],
        "generate": ["generate", "--data", str(d / "test.jsonl"), "--ckpt", str(files["po"]),
                     "--out", str(files["caps"])],
        "evaluate": ["evaluate", "--candidates", str(files["caps"]), "--references", str(d / "refs_test.jsonl"),
                     "--report", str(files["report"])],
    }
    times, hashes = {}, {}
    for name, argv in steps.items():
        if name == "train-po":
            hashes["kd_before"] = sha(files["kd"])
        rc, times[name] = _stage(argv)
        assert rc == 0, name
        if name == "train-po":
            hashes["kd_after"] = sha(files["kd"])
    return files, times, hashes


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg_path = root / "prefs.json"
    cfg_path.write_text(json.dumps(PREF_CONFIG))
    assert main(["synth", "--seed", str(SEED), "--out", str(root / "data")]) == 0
    first = _run(root, "a", str(cfg_path))
    second = _run(root, "b", str(cfg_path))
    return root, first, second


# --------------------------------------------------------------------- 3


def test_criterion_3_kd_converges(pipeline, capsys):
    root, (files, times, _), _ = pipeline
    n_train = sum(1 for _ in open(root / "data" / "train.jsonl"))
    vocab = JointCodebook.load(root / "data" / "codebook.json").size
    s = read_json(f"{files['kd']}.summary.json")
    ok = (n_train == 200 and vocab == 64 and s["steps"] == 500 and s["final_loss"] <= 0.5 * s["initial_loss"]
          and s["heldout_kl_after"] < s["heldout_kl_before"] and times["train-kd"] < STAGE_BUDGET_S)
    verdict(3, ok, f"{n_train} pairs, vocab {vocab}, loss {s['initial_loss']:.4f} -> "
                   f"{s['final_loss']:.4f} (ratio {s['final_loss'] / s['initial_loss']:.3f} <= 0.5); held-out KL "
                   f"{s['heldout_kl_before']:.4f} -> {s['heldout_kl_after']:.4f}; {times['train-kd']:.1f}s", capsys)


# --------------------------------------------------------------------- 4


def test_criterion_4_po_improves_and_reference_untouched(pipeline, capsys):
    _, (files, times, hashes), _ = pipeline
    n_pairs = sum(1 for _ in open(files["prefs"]))
    s = read_json(f"{files['po']}.summary.json")
    log = [json.loads(line) for line in open(f"{files['po']}.log.jsonl")]
    ok = (n_pairs >= 500 and len(log) == 1000 and s["final"]["accuracy"] >= 0.9
          and s["final"]["margin"] > s["initial"]["margin"] and hashes["kd_before"] == hashes["kd_after"]
          and times["train-po"] < STAGE_BUDGET_S)
    verdict(4, ok, f"{n_pairs} judged beam pairs, {len(log)} steps, accuracy {s['initial']['accuracy']:.3f} -> "
                   f"{s['final']['accuracy']:.3f} (>= 0.9), margin {s['initial']['margin']:.3f} -> "
                   f"{s['final']['margin']:.3f}, reference sha256 unchanged={hashes['kd_before'] == hashes['kd_after']}, "
                   f"{times['train-po']:.1f}s", capsys)


# --------------------------------------------------------------------- 5

LEX = ["low", "tone", "slow", "rhythm", "sad", "a", "voice", "with", "high", "pitch"]


def _text(rng, lo=1, hi=9):
    return " ".join(rng.choice(LEX) for _ in range(rng.randint(lo, hi)))


def _case(rng):
    n = rng.randint(2, 4)
    cands = [_text(rng) for _ in range(n)]
    refs = [[_text(rng) for _ in range(rng.randint(1, 3))] for _ in range(n)]
    for i in range(n):
        if rng.random() < 0.6:
            refs[i][0] = cands[i] + " " + _text(rng, 0, 3) if rng.random() < 0.5 else cands[i]
    return cands, refs


def test_criterion_5_metric_oracles(capsys):
    rng = random.Random(SEED)
    worst = {"bleu4": 0.0, "rouge_l": 0.0, "cider": 0.0}
    pairs = {"bleu4": (bleu4, bleu4_oracle), "rouge_l": (rouge_l, rouge_l_oracle), "cider": (cider, cider_oracle)}
    for name, (fn, oracle) in pairs.items():
        for _ in range(50):
            cands, refs = _case(rng)
            worst[name] = max(worst[name], abs(fn(make_corpus(cands, refs)) - oracle(cands, refs)))

    same = ["a low tone voice", "high pitch with slow rhythm", "sad voice with a tone"]
    other = ["quick bright laughing words", "angry loud shouting here", "calm even steady speech"]
    ident = make_corpus(same, [[c] for c in same])
    disj = make_corpus(same, [[c] for c in other])
    exact = {"bleu4": (bleu4(ident), bleu4(disj)), "rouge_l": (rouge_l(ident), rouge_l(disj)),
             # stored raw on a 0..10 scale; normalized by 10 for the identity check
             "cider": (cider(ident) / 10.0, cider(disj) / 10.0)}
    ok = all(w < METRIC_TOL for w in worst.values()) and all(v == (1.0, 0.0) for v in exact.values())
    detail = ", ".join(f"{k} max|diff| {worst[k]:.1e} identity/disjoint {exact[k][0]!r}/{exact[k][1]!r}"
                       for k in worst)
    verdict(5, ok, f"50 cases each, {detail}", capsys)


# --------------------------------------------------------------------- 6


def test_criterion_6_decoding_equivalence(capsys):
    rng = np.random.default_rng(SEED)
    greedy_same = 0
    for _ in range(100):
        p, ad = toy_model(rng)
        V = p.config.vocab_size
        cfg = DecodeConfig(max_len=6, beam_width=1, eos_id=V - 1, period_ids=frozenset({V - 2}))
        ctx = random_ids(rng, V, 3)
        (seq, _), = beam_decode(p, ad, ctx, cfg)
        greedy_same += seq == greedy_decode(p, ad, ctx, cfg)

    exhaustive_same = 0
    for _ in range(20):
        p, ad = toy_model(rng, vocab=5, d=4, layers=1)
        cfg = DecodeConfig(max_len=3, beam_width=125, eos_id=4, period_ids=frozenset({3}))
        ctx = random_ids(rng, 5, 2, low=1)
        every = sorted(enumerate_sequences(p, ad, ctx, cfg), key=lambda e: (-e[1], e[0]))
        got = beam_decode(p, ad, ctx, cfg)
        exhaustive_same += ([s.ids for s, _ in got] == [t for t, _ in every]
                            and np.allclose([sc for _, sc in got], [sc for _, sc in every], rtol=0, atol=1e-12))
    ok = greedy_same == 100 and exhaustive_same == 20
    verdict(6, ok, f"k=1 beam == greedy on {greedy_same}/100 models; full-width beam == exhaustive ranking "
                   f"on {exhaustive_same}/20 vocab-5 max-len-3 instances", capsys)


# --------------------------------------------------------------------- 7


def test_criterion_7_rerun_is_byte_identical(pipeline, capsys):
    _, (a, _, _), (b, _, _) = pipeline
    outputs = {"train-kd": [a["kd"], f"{a['kd']}.log.jsonl", f"{a['kd']}.summary.json"],
               "train-po": [a["po"], f"{a['po']}.log.jsonl", f"{a['po']}.summary.json"],
               "evaluate": [a["report"]]}
    differ = []
    for stage, paths in outputs.items():
        for pa in paths:
            pb = str(pa).replace(f"{a['kd'].parent}", f"{b['kd'].parent}")
            if sha(pa) != sha(pb):
                differ.append(f"{stage}:{pa}")
    n = sum(len(v) for v in outputs.values())
    verdict(7, not differ, f"{n - len(differ)}/{n} outputs of train-kd, train-po, evaluate byte-identical on rerun"
                           + (f"; differ: {differ}" if differ else ""), capsys)


# --------------------------------------------------------------------- 8


def test_criterion_8_harnesses(pipeline, capsys):
    root = pipeline[0]
    train = str(root / "data" / "train.jsonl")
    ablate_out, sweep_out = root / "ablate.json", root / "sweep.json"
    rc_a, t_a = _stage(["ablate", "--seed", str(SEED), "--data", train, "--out", str(ablate_out)])
    rc_s, t_s = _stage(["sweep-prefs", "--seed", str(SEED), "--data", train, "--out", str(sweep_out)])
    assert rc_a == 0 and rc_s == 0
    rows = read_json(ablate_out)["rows"]
    points = read_json(sweep_out)["points"]
    ok = ([r["variant"] for r in rows] == list(ABLATION_ROWS) and all("delta" in r for r in rows)
          and len(points) == 4 and t_a + t_s < HARNESS_BUDGET_S)
    directions = "; ".join(f"{r['variant']} dBLEU {r['delta']['bleu4']:+.3f} dCIDEr {r['delta']['cider']:+.3f}"
                           for r in rows[1:])
    curve = " ".join(f"{p['size']}:{p['bleu4']:.3f}" for p in points)
    verdict(8, ok, f"ablate {len(rows)} rows, sweep {len(points)} points, {t_a + t_s:.0f}s "
                   f"(< {HARNESS_BUDGET_S}s); directions (reported only): {directions}; "
                   f"sweep BLEU by size {curve}", capsys)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
