"""Text-overlap and retrieval metrics.

BLEU here is the only BLEU in the package: corpus mode for evaluation,
sentence mode for weak-supervision pseudo-labeling. The smoothing scheme is
declared precisely so expected values can be hand-computed:

  * clipped n-gram precisions for n = 1..4
  * zero unigram matches -> score 0
  * orders with no n-grams in the hypotheses are dropped from the geometric
    mean (short sentences)
  * remaining orders with zero matches use an additive epsilon: p_n = eps/t_n
  * brevity penalty exp(1 - ref_len/hyp_len) when the hypothesis is shorter
  * score scaled to [0, 100]
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from .flowchart import Document, Flowchart
from .text import tokenize

BLEU_EPS = 0.1
MAX_NGRAM_ORDER = 4


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _accumulate(ref: Sequence[str], hyp: Sequence[str], matches: list[int], totals: list[int]) -> None:
    for n in range(1, MAX_NGRAM_ORDER + 1):
        hyp_counts = _ngram_counts(hyp, n)
        if not hyp_counts:
            continue
        ref_counts = _ngram_counts(ref, n)
        overlap = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        matches[n - 1] += overlap
        totals[n - 1] += sum(hyp_counts.values())


def _bleu_from_stats(matches: list[int], totals: list[int], ref_len: int, hyp_len: int) -> float:
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_sum = 0.0
    orders = 0
    for m, t in zip(matches, totals):
        if t == 0:
            continue
        p = m / t if m > 0 else BLEU_EPS / t
        log_sum += math.log(p)
        orders += 1
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_sum / orders)


def corpus_bleu(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> float:
    """Corpus-level smoothed BLEU-4 over parallel token sequences."""
    if len(refs) != len(hyps):
        raise ValueError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise ValueError("empty evaluation corpus")
    matches = [0] * MAX_NGRAM_ORDER
    totals = [0] * MAX_NGRAM_ORDER
    ref_len = 0
    hyp_len = 0
    for ref, hyp in zip(refs, hyps):
        _accumulate(ref, hyp, matches, totals)
        ref_len += len(ref)
        hyp_len += len(hyp)
    return _bleu_from_stats(matches, totals, ref_len, hyp_len)


def sentence_bleu(ref: Sequence[str], hyp: Sequence[str]) -> float:
    matches = [0] * MAX_NGRAM_ORDER
    totals = [0] * MAX_NGRAM_ORDER
    _accumulate(ref, hyp, matches, totals)
    return _bleu_from_stats(matches, totals, len(ref), len(hyp))


def corpus_bleu_text(refs: Sequence[str], hyps: Sequence[str]) -> float:
    return corpus_bleu([tokenize(r) for r in refs], [tokenize(h) for h in hyps])


def sentence_bleu_text(ref: str, hyp: str) -> float:
    return sentence_bleu(tokenize(ref), tokenize(hyp))


def recall_at_1(retrieved: Sequence[str], gold: Sequence[str]) -> float:
    """Fraction of positions whose retrieved doc_id matches the gold one."""
    if len(retrieved) != len(gold):
        raise ValueError(f"got {len(retrieved)} retrievals for {len(gold)} gold labels")
    if not gold:
        raise ValueError("empty evaluation set")
    return sum(r == g for r, g in zip(retrieved, gold)) / len(gold)


def success_rate(
    retrieved_per_dialog: Sequence[Sequence[str]], gold_per_dialog: Sequence[Sequence[str]]
) -> float:
    """Fraction of dialogs whose every agent turn retrieved the gold document."""
    if len(retrieved_per_dialog) != len(gold_per_dialog):
        raise ValueError("per-dialog retrievals and gold labels differ in length")
    if not gold_per_dialog:
        raise ValueError("empty evaluation set")
    ok = 0
    for retrieved, gold in zip(retrieved_per_dialog, gold_per_dialog):
        if len(retrieved) != len(gold):
            raise ValueError("dialog retrievals and gold labels differ in length")
        ok += all(r == g for r, g in zip(retrieved, gold))
    return ok / len(gold_per_dialog)


ERROR_CATEGORIES = ("sibling", "parent", "faq", "other")


def classify_retrieval_error(retrieved: Document, gold: Document, chart: Flowchart) -> str:
    """Categorize a wrong retrieval against a flowchart-grounded gold document."""
    if gold.kind != "node":
        raise ValueError("error taxonomy applies to node-grounded utterances only")
    if retrieved.doc_id == gold.doc_id:
        raise ValueError("not an error: retrieved equals gold")
    if retrieved.kind == "faq":
        return "faq"
    gold_parent = chart.parent_of(gold.source_id)
    if gold_parent is not None and retrieved.source_id == gold_parent[0]:
        return "parent"
    retrieved_parent = chart.parent_of(retrieved.source_id)
    if (
        gold_parent is not None
        and retrieved_parent is not None
        and gold_parent[0] == retrieved_parent[0]
    ):
        return "sibling"
    return "other"
