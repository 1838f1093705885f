"""Report-quality metrics: BLEU-n, ROUGE-L, METEOR, and per-keyword F1.

Headline BLEU numbers use corpus-level aggregation (counts pooled over all
pairs before the ratio, no smoothing); sentence-level BLEU is available
unsmoothed or with +1 smoothing for diagnostics. METEOR uses exact token
matching with the standard parameters (alpha=0.9, beta=3, gamma=0.5) and no
stem or synonym modules. ROUGE-L uses beta=1.2.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, field

__all__ = [
    "tokenize",
    "ngram_counts",
    "bleu_n",
    "corpus_bleu",
    "lcs_length",
    "rouge_l",
    "meteor",
    "keyword_f1",
    "MetricReport",
    "evaluate_pairs",
]

_PUNCT = string.punctuation

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip flanking ASCII punctuation,
    drop empties. Interior punctuation (hyphens etc.) is kept."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok:
            out.append(tok)
    return out


def ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _clipped_matches(candidate: list[str], reference: list[str], n: int):
    cand = ngram_counts(candidate, n)
    ref = ngram_counts(reference, n)
    matched = sum(min(c, ref[g]) for g, c in cand.items())
    return matched, sum(cand.values())


def _brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    return min(1.0, math.exp(1.0 - ref_len / cand_len))


def bleu_n(candidate: list[str], reference: list[str], max_n: int = 4,
           smooth: bool = False) -> float:
    """Sentence-level BLEU: geometric mean of clipped n-gram precisions for
    n=1..max_n times the brevity penalty.

    Unsmoothed (default) any zero precision gives 0; ``smooth`` applies +1
    to numerator and denominator of every precision for diagnostics.
    """
    if not 1 <= max_n <= 4:
        raise ValueError(f"max_n must be in 1..4, got {max_n}")
    if not candidate:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        matched, total = _clipped_matches(candidate, reference, n)
        if smooth:
            matched, total = matched + 1, total + 1
        if matched == 0 or total == 0:
            return 0.0
        log_sum += math.log(matched / total)
    prec = math.exp(log_sum / max_n)
    return _brevity_penalty(len(candidate), len(reference)) * prec


def corpus_bleu(pairs: list[tuple[list[str], list[str]]], max_n: int = 4) -> float:
    """Corpus-level BLEU: pool clipped counts and lengths over all pairs
    before taking precisions and the brevity penalty. No smoothing."""
    if not 1 <= max_n <= 4:
        raise ValueError(f"max_n must be in 1..4, got {max_n}")
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = 0
    ref_len = 0
    for candidate, reference in pairs:
        cand_len += len(candidate)
        ref_len += len(reference)
        for n in range(1, max_n + 1):
            m, t = _clipped_matches(candidate, reference, n)
            matched[n - 1] += m
            total[n - 1] += t
    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for m, t in zip(matched, total):
        if m == 0 or t == 0:
            return 0.0
        log_sum += math.log(m / t)
    return _brevity_penalty(cand_len, ref_len) * math.exp(log_sum / max_n)


def lcs_length(a: list[str], b: list[str]) -> int:
    """Longest common subsequence via the standard DP table."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: list[str], reference: list[str],
            beta: float = ROUGE_BETA) -> float:
    """LCS-based F-measure with recall weighted by beta."""
    ell = lcs_length(candidate, reference)
    if ell == 0:
        return 0.0
    p = ell / len(candidate)
    r = ell / len(reference)
    return ((1.0 + beta * beta) * p * r) / (r + beta * beta * p)


_SEARCH_CAP = 1_000_000


def _greedy_alignment_links(candidate, reference, quota, ref_positions):
    """Valid baseline alignment: prefer extending the previous chunk, else
    take the lowest unused reference slot. Returns its link count."""
    quota_left = dict(quota)
    used = set()
    links = 0
    prev_j = None
    for w in candidate:
        q = quota_left.get(w, 0)
        if q == 0:
            prev_j = None
            continue
        slots = [j for j in ref_positions[w] if j not in used]
        if prev_j is not None and prev_j + 1 in slots:
            j = prev_j + 1
            links += 1
        else:
            j = slots[0]
        used.add(j)
        quota_left[w] = q - 1
        prev_j = j
    return links


def _meteor_alignment(candidate: list[str], reference: list[str]):
    """Exact-match unigram alignment: maximize matches, then minimize chunks.

    The match count per token is forced (multiset intersection), so the
    search only decides which reference occurrence each matched candidate
    occurrence maps to, maximizing adjacency links (equivalent to
    minimizing chunks). Occurrences and slots that can never take part in
    an adjacency link ("dead") are assigned canonically without branching,
    which keeps the search small even for repetitive degenerate inputs; a
    node cap falls back to the best alignment found so far (always seeded
    with a valid greedy one).
    """
    cand_counts = Counter(candidate)
    ref_counts = Counter(reference)
    quota = {w: min(cand_counts[w], ref_counts[w]) for w in cand_counts
             if w in ref_counts}
    m = sum(quota.values())
    if m == 0:
        return 0, 0
    ref_positions: dict[str, list[int]] = {}
    for j, w in enumerate(reference):
        ref_positions.setdefault(w, []).append(j)

    n_cand = len(candidate)
    n_ref = len(reference)
    best_links = _greedy_alignment_links(candidate, reference, quota,
                                         ref_positions)
    if best_links == m - 1:
        return m, 1

    def pair_potential(ci: int, j: int) -> bool:
        # could (ci, j) be an endpoint of an adjacency link?
        if ci > 0 and j > 0 and candidate[ci - 1] == reference[j - 1]:
            return True
        return (ci + 1 < n_cand and j + 1 < n_ref
                and candidate[ci + 1] == reference[j + 1])

    # a token is alive when some occurrence/slot pair could carry a link;
    # a slot is alive when some occurrence could link through it
    token_alive: dict[str, bool] = {}
    slot_alive = [False] * n_ref
    for w in quota:
        alive = False
        occs = [i for i, t in enumerate(candidate) if t == w]
        for j in ref_positions[w]:
            if any(pair_potential(ci, j) for ci in occs):
                slot_alive[j] = True
                alive = True
        token_alive[w] = alive

    remaining = Counter(candidate)   # occurrences at positions >= ci
    nodes = 0

    def dfs(ci: int, quota_left: dict, used: set, align: dict, links: int):
        nonlocal best_links, nodes
        nodes += 1
        if nodes > _SEARCH_CAP:
            return
        left = sum(quota_left.values())
        if links + left <= best_links:
            return
        if ci == n_cand:
            best_links = links
            return
        w = candidate[ci]
        q = quota_left.get(w, 0)
        remaining[w] -= 1
        if q == 0:
            dfs(ci + 1, quota_left, used, align, links)
        elif not token_alive[w]:
            # no link can involve this token: assign canonically, no branch
            j = next(s for s in ref_positions[w] if s not in used)
            quota_left[w] = q - 1
            used.add(j)
            dfs(ci + 1, quota_left, used, align, links)
            used.discard(j)
            quota_left[w] = q
        else:
            dead_done = False
            for j in ref_positions[w]:
                if j in used:
                    continue
                if not slot_alive[j]:
                    # globally dead slots are interchangeable: try one
                    if dead_done:
                        continue
                    dead_done = True
                quota_left[w] = q - 1
                used.add(j)
                bonus = 1 if align.get(ci - 1) == j - 1 else 0
                align[ci] = j
                dfs(ci + 1, quota_left, used, align, links + bonus)
                del align[ci]
                used.discard(j)
                quota_left[w] = q
            if remaining[w] >= q:   # enough later occurrences remain
                dfs(ci + 1, quota_left, used, align, links)
        remaining[w] += 1

    dfs(0, dict(quota), set(), {}, 0)
    return m, m - best_links


def meteor(candidate: list[str], reference: list[str]) -> float:
    """Harmonic-mean unigram metric with recall weighted above precision
    and a chunk-fragmentation penalty."""
    if not candidate or not reference:
        return 0.0
    m, chunks = _meteor_alignment(candidate, reference)
    if m == 0:
        return 0.0
    p = m / len(candidate)
    r = m / len(reference)
    fmean = (p * r) / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
    return fmean * (1.0 - penalty)


def keyword_f1(generated: list[str], reference_tags: list[tuple[str, ...]],
               keywords: tuple[str, ...]) -> dict[str, tuple[float, float, float]]:
    """Per-keyword precision/recall/F1 of keyword presence.

    A generated report counts positive for a keyword when the keyword
    appears as a token; the reference side uses the ground-truth tags.
    """
    if not keywords:
        raise ValueError("keyword list is empty")
    if len(generated) != len(reference_tags):
        raise ValueError("generated and reference_tags lengths differ")
    out = {}
    for kw in keywords:
        tp = fp = fn = 0
        for text, tags in zip(generated, reference_tags):
            pred = kw in tokenize(text)
            true = kw in tags
            if pred and true:
                tp += 1
            elif pred:
                fp += 1
            elif true:
                fn += 1
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        out[kw] = (p, r, f1)
    return out


@dataclass
class MetricReport:
    """Bundle of corpus scores plus the per-keyword table."""

    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    meteor: float
    rouge_l: float
    keyword_scores: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    def macro_keyword_f1(self) -> float:
        if not self.keyword_scores:
            return 0.0
        return sum(v[2] for v in self.keyword_scores.values()) / len(self.keyword_scores)

    def to_text(self) -> str:
        """Stable tab-separated rendering, alphabetical within each block."""
        lines = []
        for name in ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "meteor", "rouge_l"):
            lines.append(f"{name}\t{getattr(self, name):.6f}")
        if self.keyword_scores:
            lines.append(f"keyword_macro_f1\t{self.macro_keyword_f1():.6f}")
            for kw in sorted(self.keyword_scores):
                p, r, f1 = self.keyword_scores[kw]
                lines.append(f"keyword\t{kw}\t{p:.6f}\t{r:.6f}\t{f1:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_pairs(generated: list[str], references: list[str],
                   reference_tags: list[tuple[str, ...]] | None = None,
                   keywords: tuple[str, ...] = ()) -> MetricReport:
    """Corpus metrics over paired generated/reference texts."""
    if len(generated) != len(references):
        raise ValueError("generated and references lengths differ")
    pairs = [(tokenize(g), tokenize(r)) for g, r in zip(generated, references)]
    bleus = [corpus_bleu(pairs, max_n=n) for n in (1, 2, 3, 4)]
    meteors = [meteor(c, r) for c, r in pairs]
    rouges = [rouge_l(c, r) for c, r in pairs]
    n = len(pairs)
    kw_scores = {}
    if reference_tags is not None and keywords:
        kw_scores = keyword_f1(generated, reference_tags, keywords)
    return MetricReport(
        bleu_1=bleus[0], bleu_2=bleus[1], bleu_3=bleus[2], bleu_4=bleus[3],
        meteor=sum(meteors) / n if n else 0.0,
        rouge_l=sum(rouges) / n if n else 0.0,
        keyword_scores=kw_scores,
    )
