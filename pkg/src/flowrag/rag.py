"""Retrieval-augmented response modeling.

The response probability marginalizes the generator over the top-k retrieved
documents, each document conditioning the whole sequence. Training minimizes
the negative log of that mixture; inference decodes from the top-1 document
with beam search, scoring candidates by retrieval log-probability plus
generation log-probability, optionally divided by candidate length.

All probability arithmetic is in log space via log-sum-exp.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass
from typing import Sequence

import torch

from .dialog import Dialog, DialogHistory
from .flowchart import Document
from .generator import (
    CausalLmGenerator,
    Generator,
    LmInput,
    batch_sequence_log_prob_sums,
    build_lm_input,
    encode_target,
)
from .retriever import (
    DocumentIndex,
    HierarchicalRetriever,
    Retriever,
    retrieve_topk,
)
from .text import detokenize

logger = logging.getLogger(__name__)

PROB_ABS_TOL = 1e-9
LOG_ABS_TOL = 1e-6


def logsumexp(values: Sequence[float]) -> float:
    top = max(values)
    if top == -math.inf:
        return -math.inf
    return top + math.log(sum(math.exp(v - top) for v in values))


@dataclass
class RagConfig:
    k_train: int = 5
    k_infer: int = 1
    beam_width: int = 5
    max_decode_len: int = 60
    length_normalize: bool = True
    nucleus_p: float | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.k_infer <= self.k_train:
            raise ValueError("need 1 <= k_infer <= k_train")
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.nucleus_p is not None and not 0 < self.nucleus_p <= 1:
            raise ValueError("nucleus_p must be in (0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "RagConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown rag config keys: {sorted(unknown)}")
        return cls(**data)


def rag_sequence_log_prob(
    history: DialogHistory,
    y: str | Sequence[int],
    docs: Sequence[Document],
    retriever: Retriever,
    generator: Generator,
    k: int,
    index: DocumentIndex | None = None,
    max_context: int = 256,
) -> float:
    """log sum over the top-k documents of p(doc | history) * p(y | history, doc)."""
    if not docs:
        raise ValueError("empty document set")
    y_ids = encode_target(generator.vocab, y) if isinstance(y, str) else list(y)
    result = retrieve_topk(retriever, history, docs, k, index)
    by_id = {d.doc_id: d for d in docs}
    terms = []
    for entry in result.ranked:
        inp = build_lm_input(generator.vocab, history, by_id[entry.doc_id], max_context)
        seq_lp = sum(generator.sequence_log_probs(inp, y_ids))
        terms.append(entry.log_prob + seq_lp)
    return logsumexp(terms)


def dialog_turns(dialogs: Sequence[Dialog]) -> list[tuple[DialogHistory, str, str]]:
    """(history, target response, flowchart id) for every agent turn."""
    turns = []
    for dialog in dialogs:
        for history, target in dialog.agent_turns():
            turns.append((history, target.text, dialog.flowchart_id))
    return turns


def corpus_marginal_nll(
    retriever: Retriever,
    generator: Generator,
    turns: Sequence[tuple[DialogHistory, str, str]],
    docs_by_chart: dict[str, Sequence[Document]],
    k: int,
    max_context: int = 256,
) -> tuple[float, int]:
    """Total negative log-likelihood under the top-k mixture and the token
    count (end marker included)."""
    total = 0.0
    tokens = 0
    for history, target, chart_id in turns:
        docs = docs_by_chart[chart_id]
        y_ids = encode_target(generator.vocab, target)
        lp = rag_sequence_log_prob(
            history, y_ids, docs, retriever, generator, min(k, len(docs)), max_context=max_context
        )
        total -= lp
        tokens += len(y_ids)
    return total, tokens


# --- joint training -----------------------------------------------------------


@dataclass
class RagTrainConfig:
    epochs: int = 3
    lr_retriever: float = 1e-4
    lr_generator: float = 3e-4
    batch_size: int = 8
    seed: int = 13
    freeze_retriever: bool = False
    max_context: int = 256

    @classmethod
    def from_dict(cls, data: dict) -> "RagTrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def train_rag(
    retriever: HierarchicalRetriever,
    generator: Generator,
    dialogs: Sequence[Dialog],
    docs_by_chart: dict[str, Sequence[Document]],
    cfg: RagConfig,
    tcfg: RagTrainConfig,
) -> list[float]:
    """Jointly fit retriever and generator on the marginal likelihood.
    Gradient reaches the retriever through the top-k softmax; shortlist
    membership itself is non-differentiable. Returns per-epoch mean NLL."""
    if not isinstance(generator, CausalLmGenerator):
        raise ValueError("the template-oracle backend cannot be trained")
    turns = dialog_turns(dialogs)
    if not turns:
        raise ValueError("no agent turns to train on")
    if tcfg.epochs == 0:
        return []
    torch.manual_seed(tcfg.seed)
    rng = random.Random(tcfg.seed)
    params = [{"params": generator.parameters(), "lr": tcfg.lr_generator}]
    if not tcfg.freeze_retriever:
        params.append({"params": retriever.parameters(), "lr": tcfg.lr_retriever})
    optimizer = torch.optim.AdamW(params)
    vocab = generator.vocab

    epoch_nll: list[float] = []
    order = list(range(len(turns)))
    for epoch in range(tcfg.epochs):
        generator.train()
        retriever.train()
        rng.shuffle(order)
        total_loss = 0.0
        for start in range(0, len(order), tcfg.batch_size):
            batch = [turns[i] for i in order[start : start + tcfg.batch_size]]
            by_chart: dict[str, list[tuple[DialogHistory, str]]] = {}
            for history, target, chart_id in batch:
                by_chart.setdefault(chart_id, []).append((history, target))
            losses = []
            for chart_id, items in by_chart.items():
                docs = list(docs_by_chart[chart_id])
                histories = [h for h, _ in items]
                hv = retriever.encode_histories(histories)
                kv = retriever.encode_keys([d.key for d in docs])
                scores = -torch.cdist(hv, kv)
                if tcfg.freeze_retriever:
                    scores = scores.detach()
                k = min(cfg.k_train, len(docs))
                topk_idx = scores.detach().topk(k, dim=1).indices
                log_p_doc = torch.log_softmax(scores.gather(1, topk_idx), dim=1)
                gen_items = []
                for row, (history, target) in enumerate(items):
                    y_ids = encode_target(vocab, target)
                    for col in range(k):
                        doc = docs[int(topk_idx[row, col])]
                        gen_items.append(
                            (build_lm_input(vocab, history, doc, tcfg.max_context), y_ids)
                        )
                seq_sums = batch_sequence_log_prob_sums(generator, gen_items).view(len(items), k)
                losses.append(-torch.logsumexp(log_p_doc + seq_sums, dim=1))
            loss = torch.cat(losses).mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(batch)
        epoch_nll.append(total_loss / len(turns))
        logger.info("rag train epoch %d mean nll %.4f", epoch, epoch_nll[-1])
    generator.eval()
    retriever.eval()
    return epoch_nll


# --- decoding -------------------------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    doc_id: str
    token_ids: tuple[int, ...]
    raw: float
    normalized: float
    length: int


@dataclass(frozen=True)
class DecodeResult:
    text: str
    tokens: tuple[str, ...]
    token_ids: tuple[int, ...]
    doc_id: str
    candidates: tuple[Candidate, ...]


def beam_search(
    generator: Generator, inp: LmInput, width: int, max_len: int
) -> list[tuple[tuple[int, ...], float]]:
    """Deterministic beam search. Returns up to `width` finished hypotheses
    (content tokens without the end marker, total log-probability including
    the end step), best first. Hypotheses still running at `max_len` are
    force-finished with the end marker."""
    end_id = generator.vocab.end_id
    active: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _step in range(max_len + 1):
        if not active:
            break
        logps = generator.next_token_log_probs(inp, [list(ids) for ids, _ in active])
        if _step == max_len:
            for row, (ids, lp) in enumerate(active):
                finished.append((ids, lp + float(logps[row, end_id])))
            break
        expansions: list[tuple[float, int, int]] = []  # (score, token, beam index)
        per_row = min(width, logps.shape[1])
        values, indices = torch.topk(logps, per_row, dim=1)
        for row, (_ids, lp) in enumerate(active):
            for v, tok in zip(values[row].tolist(), indices[row].tolist()):
                expansions.append((lp + v, tok, row))
        expansions.sort(key=lambda e: (-e[0], e[1], e[2]))
        next_active = []
        for score, tok, row in expansions[:width]:
            ids = active[row][0]
            if tok == end_id:
                finished.append((ids, score))
            else:
                next_active.append((ids + (tok,), score))
        active = next_active
    finished.sort(key=lambda f: (-f[1], f[0]))
    return finished[:width]


def _pick_candidate(candidates: list[Candidate], length_normalize: bool) -> Candidate:
    key = (lambda c: (-c.normalized, c.doc_id, c.token_ids)) if length_normalize else (
        lambda c: (-c.raw, c.doc_id, c.token_ids)
    )
    return sorted(candidates, key=key)[0]


def _result_from(generator: Generator, candidates: list[Candidate], chosen: Candidate) -> DecodeResult:
    tokens = tuple(generator.vocab.decode(list(chosen.token_ids)))
    return DecodeResult(
        text=detokenize(list(tokens)),
        tokens=tokens,
        token_ids=chosen.token_ids,
        doc_id=chosen.doc_id,
        candidates=tuple(candidates),
    )


def decode(
    history: DialogHistory,
    docs: Sequence[Document],
    retriever: Retriever,
    generator: Generator,
    cfg: RagConfig,
    index: DocumentIndex | None = None,
    max_context: int = 256,
) -> DecodeResult:
    """Beam-decode a response from each of the top k_infer documents and pick
    the best candidate: raw score = retrieval log-prob + generation log-prob,
    normalized score = raw / candidate length."""
    result = retrieve_topk(retriever, history, docs, min(cfg.k_infer, len(docs)), index)
    by_id = {d.doc_id: d for d in docs}
    candidates: list[Candidate] = []
    for entry in result.ranked:
        inp = build_lm_input(generator.vocab, history, by_id[entry.doc_id], max_context)
        for ids, lp in beam_search(generator, inp, cfg.beam_width, cfg.max_decode_len):
            raw = entry.log_prob + lp
            length = max(1, len(ids))
            candidates.append(Candidate(entry.doc_id, ids, raw, raw / length, length))
    chosen = _pick_candidate(candidates, cfg.length_normalize)
    return _result_from(generator, candidates, chosen)


def _nucleus_sample_sequence(
    generator: Generator, inp: LmInput, p: float, max_len: int, rng: random.Random
) -> tuple[tuple[int, ...], float]:
    """Sample from the smallest next-token set whose mass reaches p, each step."""
    end_id = generator.vocab.end_id
    prefix: list[int] = []
    total_lp = 0.0
    for _ in range(max_len):
        logp = generator.next_token_log_probs(inp, [prefix])[0]
        probs = torch.exp(logp)
        order = torch.argsort(probs, descending=True, stable=True).tolist()
        nucleus: list[int] = []
        mass = 0.0
        for idx in order:
            nucleus.append(idx)
            mass += float(probs[idx])
            if mass >= p:
                break
        draw = rng.random() * mass
        acc = 0.0
        tok = nucleus[-1]
        for idx in nucleus:
            acc += float(probs[idx])
            if acc >= draw:
                tok = idx
                break
        total_lp += float(logp[tok])
        if tok == end_id:
            return tuple(prefix), total_lp
        prefix.append(tok)
    logp = generator.next_token_log_probs(inp, [prefix])[0]
    return tuple(prefix), total_lp + float(logp[end_id])


def nucleus_decode(
    history: DialogHistory,
    docs: Sequence[Document],
    retriever: Retriever,
    generator: Generator,
    cfg: RagConfig,
    rng: random.Random,
    index: DocumentIndex | None = None,
    max_context: int = 256,
) -> DecodeResult:
    """Sampled alternative to beam decoding. Expect it to trade a few points
    of corpus overlap for variety; beam search stays the default."""
    if cfg.nucleus_p is None:
        raise ValueError("nucleus_p is not set")
    result = retrieve_topk(retriever, history, docs, min(cfg.k_infer, len(docs)), index)
    by_id = {d.doc_id: d for d in docs}
    candidates: list[Candidate] = []
    for entry in result.ranked:
        inp = build_lm_input(generator.vocab, history, by_id[entry.doc_id], max_context)
        ids, lp = _nucleus_sample_sequence(generator, inp, cfg.nucleus_p, cfg.max_decode_len, rng)
        raw = entry.log_prob + lp
        length = max(1, len(ids))
        candidates.append(Candidate(entry.doc_id, ids, raw, raw / length, length))
    chosen = _pick_candidate(candidates, cfg.length_normalize)
    return _result_from(generator, candidates, chosen)
