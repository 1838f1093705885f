import math
from fractions import Fraction
from functools import lru_cache

import numpy as np
import pytest

from cxrc import metrics as mx


# ---------------------------------------------------------------------------
# independent oracles (naive counting; top-down LCS)
# ---------------------------------------------------------------------------

def oracle_bleu(candidate, reference, max_n):
    """Naive list.count-based BLEU, product form."""
    if not candidate:
        return 0.0
    prod = 1.0
    for n in range(1, max_n + 1):
        cgrams = [" ".join(candidate[i:i + n]) for i in range(len(candidate) - n + 1)]
        rgrams = [" ".join(reference[i:i + n]) for i in range(len(reference) - n + 1)]
        if not cgrams:
            return 0.0
        matched = sum(min(cgrams.count(g), rgrams.count(g)) for g in set(cgrams))
        if matched == 0:
            return 0.0
        prod *= matched / len(cgrams)
    bp = min(1.0, math.exp(1.0 - len(reference) / len(candidate)))
    return bp * prod ** (1.0 / max_n)


def oracle_corpus_bleu(pairs, max_n):
    matched = [0] * max_n
    total = [0] * max_n
    clen = rlen = 0
    for candidate, reference in pairs:
        clen += len(candidate)
        rlen += len(reference)
        for n in range(1, max_n + 1):
            cgrams = [" ".join(candidate[i:i + n]) for i in range(len(candidate) - n + 1)]
            rgrams = [" ".join(reference[i:i + n]) for i in range(len(reference) - n + 1)]
            matched[n - 1] += sum(min(cgrams.count(g), rgrams.count(g))
                                  for g in set(cgrams))
            total[n - 1] += len(cgrams)
    if clen == 0:
        return 0.0
    prod = 1.0
    for m, t in zip(matched, total):
        if m == 0 or t == 0:
            return 0.0
        prod *= m / t
    return min(1.0, math.exp(1.0 - rlen / clen)) * prod ** (1.0 / max_n)


def oracle_lcs(a, b):
    """Top-down memoized LCS, independent of the bottom-up DP."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + rec(i + 1, j + 1)
        return max(rec(i + 1, j), rec(i, j + 1))
    return rec(0, 0)


def oracle_rouge_l(candidate, reference, beta=1.2):
    ell = oracle_lcs(candidate, reference)
    if ell == 0:
        return 0.0
    p = Fraction(ell, len(candidate))
    r = Fraction(ell, len(reference))
    return float((1 + beta * beta) * p * r / (r + beta * beta * p))


def random_pairs(n_cases, seed):
    rng = np.random.default_rng(seed)
    vocab = [f"w{i}" for i in range(10)]
    pairs = []
    for _ in range(n_cases):
        lc = int(rng.integers(1, 31))
        lr = int(rng.integers(1, 31))
        cand = [vocab[i] for i in rng.integers(0, 10, size=lc)]
        ref = [vocab[i] for i in rng.integers(0, 10, size=lr)]
        pairs.append((cand, ref))
    return pairs


# ---------------------------------------------------------------------------
# tokenize
# ---------------------------------------------------------------------------

def test_tokenize_basic():
    assert mx.tokenize("The lungs are clear.") == ["the", "lungs", "are", "clear"]


def test_tokenize_empty():
    assert mx.tokenize("") == []


def test_tokenize_interior_hyphen():
    assert mx.tokenize("Low-lung  volumes,") == ["low-lung", "volumes"]


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def test_bleu_perfect_match_all_n():
    toks = "the heart is within normal limits".split()
    for n in range(1, 5):
        assert mx.bleu_n(toks, toks, max_n=n) == pytest.approx(1.0)


def test_bleu_disjoint_zero():
    assert mx.bleu_n(["a", "b"], ["c", "d"], max_n=1) == 0.0


def test_bleu_brevity_penalty_hand_case():
    got = mx.bleu_n("the cat sat".split(), "the cat sat down".split(), max_n=1)
    assert got == pytest.approx(math.exp(1 - 4 / 3), abs=1e-9)
    assert got == pytest.approx(0.7165, abs=5e-4)


def test_bleu_empty_candidate():
    assert mx.bleu_n([], ["a"], max_n=2) == 0.0


def test_bleu_matches_oracle_200_cases():
    for cand, ref in random_pairs(200, seed=101):
        for n in (1, 2, 3, 4):
            assert abs(mx.bleu_n(cand, ref, max_n=n)
                       - oracle_bleu(cand, ref, n)) <= 1e-9


def test_corpus_bleu_matches_oracle():
    pairs = random_pairs(50, seed=202)
    for n in (1, 2, 3, 4):
        assert abs(mx.corpus_bleu(pairs, max_n=n)
                   - oracle_corpus_bleu(pairs, n)) <= 1e-9


def test_bleu1_monotone_in_matching_append():
    # appending a reference-matching token to a short candidate never hurts
    ref = "a b c d e f".split()
    cand = ["a", "b"]
    before = mx.bleu_n(cand, ref, max_n=1)
    after = mx.bleu_n(cand + ["c"], ref, max_n=1)
    assert after >= before


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def test_rouge_identical():
    toks = "no acute osseous abnormality".split()
    assert mx.rouge_l(toks, toks) == pytest.approx(1.0)


def test_rouge_disjoint():
    assert mx.rouge_l(["a"], ["b"]) == 0.0


def test_rouge_hand_case():
    cand = ["a", "b", "c", "d"]
    ref = ["a", "c", "d"]
    assert mx.lcs_length(cand, ref) == 3
    assert mx.rouge_l(cand, ref) == pytest.approx(oracle_rouge_l(cand, ref), abs=1e-12)


def test_rouge_matches_oracle_200_cases():
    for cand, ref in random_pairs(200, seed=303):
        assert abs(mx.rouge_l(cand, ref) - oracle_rouge_l(cand, ref)) <= 1e-9


# ---------------------------------------------------------------------------
# METEOR
# ---------------------------------------------------------------------------

def test_meteor_disjoint():
    assert mx.meteor(["a", "b"], ["c", "d"]) == 0.0


def test_meteor_single_identical_token():
    # m=1, chunks=1 -> penalty 0.5, fmean 1 -> 0.5
    assert mx.meteor(["effusion"], ["effusion"]) == pytest.approx(0.5, abs=1e-12)


def test_meteor_long_identical():
    toks = [f"t{i}" for i in range(20)]
    expect = 1.0 - 0.5 * (1 / 20) ** 3
    assert mx.meteor(toks, toks) == pytest.approx(expect, abs=1e-9)


def test_meteor_hand_formula_two_chunks():
    # cand = [a, b, x, c], ref = [a, b, c]: m=3, chunks=2
    # P=3/4, R=1, fmean = PR/(0.9P+0.1R), penalty = 0.5*(2/3)^3
    cand, ref = ["a", "b", "x", "c"], ["a", "b", "c"]
    p, r = 3 / 4, 1.0
    fmean = p * r / (0.9 * p + 0.1 * r)
    expect = fmean * (1 - 0.5 * (2 / 3) ** 3)
    assert mx.meteor(cand, ref) == pytest.approx(expect, abs=1e-12)


def test_meteor_non_monotonic_alignment():
    # cand = [b, a], ref = [a, b]: m=2, best is 2 chunks (no adjacency)
    p = r = 1.0
    fmean = p * r / (0.9 * p + 0.1 * r)
    expect = fmean * (1 - 0.5 * 1.0)
    assert mx.meteor(["b", "a"], ["a", "b"]) == pytest.approx(expect, abs=1e-12)


def test_meteor_minimizes_chunks_with_repeats():
    # cand = [x, p, x, q], ref = [x, q, x, z]: quota x=2, q=1, m=3.
    # optimal alignment maps cand x@2->ref x@0 and q@3->ref q@1: one link,
    # hence 2 chunks, even though the first x would greedily grab slot 0.
    m, chunks = mx._meteor_alignment(["x", "p", "x", "q"], ["x", "q", "x", "z"])
    assert (m, chunks) == (3, 2)


def test_meteor_degenerate_repetition_fast():
    cand = ["the"] * 45
    ref = "the lungs are clear and the heart is normal the end the".split()
    score = mx.meteor(cand, ref)
    assert 0.0 <= score <= 1.0


def test_meteor_identity_lower_bound():
    # score(x, x) >= 1 - gamma * m^{-beta}
    for length in (1, 3, 7, 15):
        toks = [f"u{i}" for i in range(length)]
        assert mx.meteor(toks, toks) >= 1.0 - 0.5 * length ** -3.0 - 1e-12


# ---------------------------------------------------------------------------
# keyword F1
# ---------------------------------------------------------------------------

def test_keyword_f1_perfect():
    gen = ["there is a pleural effusion on the left.",
           "the lungs are clear."]
    tags = [("effusion",), ()]
    scores = mx.keyword_f1(gen, tags, ("effusion",))
    assert scores["effusion"] == (1.0, 1.0, 1.0)


def test_keyword_f1_definition_arithmetic():
    # 2 TP, 1 FP, 1 FN -> P = R = F1 = 2/3
    gen = ["effusion seen", "effusion seen", "effusion seen", "clear lungs"]
    tags = [("effusion",), ("effusion",), (), ("effusion",)]
    p, r, f1 = mx.keyword_f1(gen, tags, ("effusion",))["effusion"]
    assert (p, r, f1) == pytest.approx((2 / 3, 2 / 3, 2 / 3))


def test_keyword_f1_zero_when_no_positives():
    scores = mx.keyword_f1(["clear"], [()], ("effusion",))
    assert scores["effusion"] == (0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# ranges and report formatting
# ---------------------------------------------------------------------------

def test_all_scores_in_unit_interval():
    for cand, ref in random_pairs(50, seed=404):
        for val in (mx.bleu_n(cand, ref), mx.rouge_l(cand, ref),
                    mx.meteor(cand, ref)):
            assert 0.0 <= val <= 1.0


def test_metric_report_stable_text():
    rep = mx.MetricReport(0.5, 0.4, 0.3, 0.2, 0.25, 0.35,
                          {"volume": (1.0, 0.5, 2 / 3),
                           "effusion": (0.0, 0.0, 0.0)})
    text = rep.to_text()
    lines = text.splitlines()
    assert lines[0] == "bleu_1\t0.500000"
    assert lines[6].startswith("keyword_macro_f1\t")
    # keyword block alphabetical
    kw_lines = [ln for ln in lines if ln.startswith("keyword\t")]
    assert kw_lines[0].split("\t")[1] == "effusion"
    assert kw_lines[1].split("\t")[1] == "volume"
    assert rep.to_text() == text


def test_evaluate_pairs_self_reference():
    refs = ["the lungs are clear. the cardiac silhouette is normal in size.",
            "lung volume is low. the heart is mildly enlarged."]
    rep = mx.evaluate_pairs(refs, refs, [(), ("heart", "volume")],
                            ("volume", "effusion"))
    assert rep.bleu_1 == pytest.approx(1.0)
    assert rep.rouge_l == pytest.approx(1.0)
