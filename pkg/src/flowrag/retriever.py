"""Document retrieval: dense hierarchical encoder, TF-IDF baseline,
weak-supervision pseudo-labeling and contrastive pre-training.

The dense retriever encodes a dialog history and a document key with two
hierarchical recurrent towers (word-level GRU feeding an utterance-level GRU)
over a shared embedding table, and scores a pair as the negative Euclidean
distance between the two encodings. Top-k scores pass through a softmax to
become the retrieval distribution.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .dialog import Dialog, DialogHistory
from .flowchart import Document, Flowchart
from .metrics import sentence_bleu_text
from .text import Vocab, tokenize


class Retriever(Protocol):
    def score_documents(self, history: DialogHistory, docs: Sequence[Document]) -> list[float]:
        ...


def score(hv: torch.Tensor, kv: torch.Tensor) -> float:
    """Negative Euclidean distance; 0 only when the vectors coincide."""
    if hv.shape != kv.shape:
        raise ValueError(f"dimension mismatch: {tuple(hv.shape)} vs {tuple(kv.shape)}")
    return -torch.linalg.vector_norm(hv - kv).item()


def softmax(scores: Sequence[float]) -> list[float]:
    """Stable softmax (max-shifted)."""
    top = max(scores)
    exps = [math.exp(s - top) for s in scores]
    total = sum(exps)
    return [e / total for e in exps]


@dataclass(frozen=True)
class RankedDoc:
    doc_id: str
    score: float
    prob: float
    log_prob: float


@dataclass(frozen=True)
class RetrievalResult:
    ranked: tuple[RankedDoc, ...]
    k: int

    def top_doc_id(self) -> str:
        return self.ranked[0].doc_id


def _rank_scores(docs: Sequence[Document], scores: Sequence[float], k: int) -> RetrievalResult:
    order = sorted(range(len(docs)), key=lambda i: (-scores[i], docs[i].doc_id))
    chosen = order[:k]
    top_scores = [scores[i] for i in chosen]
    shift = max(top_scores)
    log_total = shift + math.log(sum(math.exp(s - shift) for s in top_scores))
    ranked = tuple(
        RankedDoc(
            doc_id=docs[i].doc_id,
            score=scores[i],
            prob=math.exp(scores[i] - log_total),
            log_prob=scores[i] - log_total,
        )
        for i in chosen
    )
    return RetrievalResult(ranked, k)


def retrieve_topk(
    retriever: Retriever,
    history: DialogHistory,
    docs: Sequence[Document],
    k: int,
    index: "DocumentIndex | None" = None,
) -> RetrievalResult:
    """Rank documents for a history; softmax is taken over the top-k shortlist
    only. Ties break on doc_id."""
    if not docs:
        raise ValueError("empty document set")
    if not 1 <= k <= len(docs):
        raise ValueError(f"k={k} out of range for {len(docs)} documents")
    if index is not None and isinstance(retriever, HierarchicalRetriever):
        scores = retriever.score_with_index(history, docs, index)
    else:
        scores = retriever.score_documents(history, docs)
    return _rank_scores(docs, scores, k)


# --- dense hierarchical retriever --------------------------------------------


def _run_gru_last(gru: nn.GRU, padded: torch.Tensor, lengths: list[int]) -> torch.Tensor:
    """Final valid hidden state per row of a right-padded batch (N, T, D)."""
    packed = nn.utils.rnn.pack_padded_sequence(
        padded, torch.tensor(lengths), batch_first=True, enforce_sorted=False
    )
    _, h_n = gru(packed)
    return h_n[0]


class _HierTower(nn.Module):
    """Word-level GRU feeding an utterance-level GRU; conversations with zero
    utterances (the root document key) encode to the zero vector."""

    def __init__(self, embedding: nn.Embedding, hidden: int):
        super().__init__()
        self.embedding = embedding
        self.word_rnn = nn.GRU(embedding.embedding_dim, hidden, batch_first=True)
        self.context_rnn = nn.GRU(hidden, hidden, batch_first=True)
        self.hidden = hidden

    def encode(self, conversations: list[list[list[int]]]) -> torch.Tensor:
        device = self.embedding.weight.device
        flat = [u for conv in conversations for u in conv]
        if flat:
            lengths = [len(u) for u in flat]
            ids = torch.full((len(flat), max(lengths)), 0, dtype=torch.long, device=device)
            for row, u in enumerate(flat):
                ids[row, : len(u)] = torch.as_tensor(u, device=device)
            utt_vecs = _run_gru_last(self.word_rnn, self.embedding(ids), lengths)
        ctx_lengths = [len(conv) for conv in conversations if conv]
        encoded = None
        if ctx_lengths:
            chunks = torch.split(utt_vecs, ctx_lengths)
            ctx = nn.utils.rnn.pad_sequence(chunks, batch_first=True)
            encoded = _run_gru_last(self.context_rnn, ctx, ctx_lengths)
        rows = []
        j = 0
        for conv in conversations:
            if conv:
                rows.append(encoded[j])
                j += 1
            else:
                rows.append(torch.zeros(self.hidden, device=device))
        return torch.stack(rows)


class HierarchicalRetriever(nn.Module):
    """Dense retriever with separate history and key towers over a shared
    embedding table. Hidden size is three times the embedding size."""

    def __init__(self, vocab: Vocab, embed_dim: int = 48):
        super().__init__()
        self.vocab = vocab
        self.embed_dim = embed_dim
        self.hidden = 3 * embed_dim
        self.embedding = nn.Embedding(len(vocab), embed_dim, padding_idx=vocab.pad_id)
        self.history_tower = _HierTower(self.embedding, self.hidden)
        self.key_tower = _HierTower(self.embedding, self.hidden)
        # identical initialization: before training, the same token sequence
        # encodes identically on both sides, so lexical echo transfers to
        # charts whose words never receive gradient
        self.key_tower.load_state_dict(self.history_tower.state_dict())
        self._tok_cache: dict[tuple[int, str], list[int]] = {}

    def _tokenize(self, speaker_id: int, text: str) -> list[int]:
        """Utterances carry a leading speaker marker so the context encoder
        can align histories with question/answer document keys."""
        cache_key = (speaker_id, text)
        ids = self._tok_cache.get(cache_key)
        if ids is None:
            ids = [speaker_id] + (self.vocab.encode(text) or [self.vocab.unk_id])
            self._tok_cache[cache_key] = ids
        return ids

    @staticmethod
    def _corrupt(
        convs: list[list[list[int]]], dropout: float, rng: random.Random, unk_id: int
    ) -> list[list[list[int]]]:
        """Replace content tokens with unk at rate `dropout` (speaker marker
        kept); exposes the encoder to unknown words during training."""
        return [
            [
                [u[0]] + [unk_id if rng.random() < dropout else t for t in u[1:]]
                for u in conv
            ]
            for conv in convs
        ]

    def encode_histories(
        self,
        histories: Sequence[DialogHistory],
        token_dropout: float = 0.0,
        rng: random.Random | None = None,
    ) -> torch.Tensor:
        convs = []
        for h in histories:
            if not h.utterances:
                raise ValueError("cannot encode an empty history")
            convs.append(
                [
                    self._tokenize(
                        self.vocab.user_id if u.speaker == "user" else self.vocab.agent_id,
                        u.text,
                    )
                    for u in h.utterances
                ]
            )
        if token_dropout > 0:
            convs = self._corrupt(convs, token_dropout, rng, self.vocab.unk_id)
        return self.history_tower.encode(convs)

    def encode_history(self, history: DialogHistory) -> torch.Tensor:
        return self.encode_histories([history])[0]

    def encode_keys(
        self,
        keys: Sequence[tuple[str, ...]],
        token_dropout: float = 0.0,
        rng: random.Random | None = None,
    ) -> torch.Tensor:
        convs = []
        for key in keys:
            # key elements alternate agent question / user answer
            convs.append(
                [
                    self._tokenize(
                        self.vocab.agent_id if i % 2 == 0 else self.vocab.user_id, element
                    )
                    for i, element in enumerate(key)
                ]
            )
        if token_dropout > 0:
            convs = self._corrupt(convs, token_dropout, rng, self.vocab.unk_id)
        return self.key_tower.encode(convs)

    @torch.no_grad()
    def score_documents(self, history: DialogHistory, docs: Sequence[Document]) -> list[float]:
        self.eval()
        hv = self.encode_history(history)
        kvs = self.encode_keys([d.key for d in docs])
        dists = torch.linalg.vector_norm(kvs - hv.unsqueeze(0), dim=1)
        return (-dists).tolist()

    @torch.no_grad()
    def score_with_index(
        self, history: DialogHistory, docs: Sequence[Document], index: "DocumentIndex"
    ) -> list[float]:
        if [d.doc_id for d in docs] != list(index.doc_ids):
            raise ValueError("document index does not match the document set")
        self.eval()
        hv = self.encode_history(history)
        dists = torch.linalg.vector_norm(index.matrix - hv.unsqueeze(0), dim=1)
        return (-dists).tolist()


def documents_fingerprint(docs: Sequence[Document]) -> str:
    digest = hashlib.sha256()
    for doc in docs:
        digest.update(repr((doc.doc_id, doc.kind, doc.key, doc.value)).encode("utf-8"))
    return digest.hexdigest()


@dataclass
class DocumentIndex:
    """Precomputed key encodings, tied to a document-set fingerprint."""

    doc_ids: tuple[str, ...]
    matrix: torch.Tensor
    fingerprint: str


@torch.no_grad()
def build_index(model: HierarchicalRetriever, docs: Sequence[Document]) -> DocumentIndex:
    model.eval()
    matrix = model.encode_keys([d.key for d in docs])
    return DocumentIndex(
        tuple(d.doc_id for d in docs), matrix, documents_fingerprint(docs)
    )


def save_index(index: DocumentIndex, path: str | Path) -> None:
    torch.save(
        {
            "format_version": 1,
            "doc_ids": list(index.doc_ids),
            "matrix": index.matrix,
            "fingerprint": index.fingerprint,
        },
        path,
    )


def load_index(path: str | Path, docs: Sequence[Document]) -> DocumentIndex:
    data = torch.load(path, weights_only=True)
    index = DocumentIndex(tuple(data["doc_ids"]), data["matrix"], data["fingerprint"])
    if index.fingerprint != documents_fingerprint(docs):
        raise ValueError("document index cache is stale for this document set")
    return index


def save_retriever(model: HierarchicalRetriever, path: str | Path) -> None:
    torch.save(
        {
            "format_version": 1,
            "kind": "hierarchical-retriever",
            "embed_dim": model.embed_dim,
            "vocab": model.vocab.to_dict(),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_retriever(path: str | Path) -> HierarchicalRetriever:
    data = torch.load(path, weights_only=True)
    if data.get("kind") != "hierarchical-retriever":
        raise ValueError(f"{path} is not a retriever checkpoint")
    model = HierarchicalRetriever(Vocab.from_dict(data["vocab"]), data["embed_dim"])
    model.load_state_dict(data["state_dict"])
    model.eval()
    return model


# --- TF-IDF baseline ----------------------------------------------------------


class TfidfRetriever:
    """Cosine similarity between the TF-IDF vectors of the concatenated
    history and each document key."""

    def __init__(self, docs: Sequence[Document]):
        self._fit(docs)

    def _fit(self, docs: Sequence[Document]) -> None:
        self._doc_ids = tuple(d.doc_id for d in docs)
        doc_tokens = [tokenize(" ".join(d.key) if d.key else d.value) for d in docs]
        vocab = sorted({t for toks in doc_tokens for t in toks})
        self._vocab_index = {t: i for i, t in enumerate(vocab)}
        n_docs = len(docs)
        df = np.zeros(len(vocab))
        for toks in doc_tokens:
            for t in set(toks):
                df[self._vocab_index[t]] += 1
        self._idf = np.log((1 + n_docs) / (1 + df)) + 1.0
        self._matrix = np.stack([self._vector(toks) for toks in doc_tokens])

    def _vector(self, tokens: list[str]) -> np.ndarray:
        vec = np.zeros(len(self._vocab_index))
        for t in tokens:
            i = self._vocab_index.get(t)
            if i is not None:
                vec[i] += 1.0
        vec *= self._idf
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def score_documents(self, history: DialogHistory, docs: Sequence[Document]) -> list[float]:
        if tuple(d.doc_id for d in docs) != self._doc_ids:
            self._fit(docs)
        if not self._vocab_index:
            return [0.0] * len(docs)
        hv = self._vector(tokenize(" ".join(history.texts())))
        return (self._matrix @ hv).tolist()


def tfidf_retrieve(
    history: DialogHistory, docs: Sequence[Document], k: int
) -> RetrievalResult:
    return retrieve_topk(TfidfRetriever(docs), history, docs, k)


# --- rule-based oracle ---------------------------------------------------------


class PathOracleRetriever:
    """Replays the history against the flowchart to predict the next grounded
    document. Works when agent turns echo canonical utterances and user turns
    echo edge labels or FAQ questions; used for demos and composition tests."""

    def __init__(self, chart: Flowchart, docs: Sequence[Document]):
        self.chart = chart
        self.docs = list(docs)
        self._faq_questions = {
            d.key[0]: d.doc_id for d in docs if d.kind == "faq"
        }

    def _predict(self, history: DialogHistory) -> str:
        cur = self.chart.root
        pending_faq: str | None = None
        for utt in history.utterances:
            text = utt.text.strip().lower()
            if utt.speaker == "agent":
                pending_faq = None
                continue
            if text in self._faq_questions:
                pending_faq = self._faq_questions[text]
                continue
            pending_faq = None
            dst = self.chart.edges.get((cur, text))
            if dst is not None:
                cur = dst
        if pending_faq is not None:
            return pending_faq
        return f"node:{cur}"

    def score_documents(self, history: DialogHistory, docs: Sequence[Document]) -> list[float]:
        target = self._predict(history)
        return [1.0 if d.doc_id == target else 0.0 for d in docs]


class GoldLookupRetriever:
    """Perfect retriever for upper-bound evaluation. The harness hints the
    current turn's gold document through `begin_turn`; outside the harness it
    falls back to looking the history up in the corpus it was built from
    (distinct dialogs can share a history, so the fallback is best-effort)."""

    def __init__(self, dialogs: Sequence[Dialog]):
        self._map: dict[tuple, str] = {}
        self._pending: str | None = None
        for dialog in dialogs:
            for history, target in dialog.agent_turns():
                if target.grounding is not None:
                    self._map.setdefault(self._key(history), target.grounding.doc_id())

    @staticmethod
    def _key(history: DialogHistory) -> tuple:
        return tuple((u.speaker, u.text) for u in history.utterances)

    def begin_turn(self, gold_doc_id: str) -> None:
        self._pending = gold_doc_id

    def score_documents(self, history: DialogHistory, docs: Sequence[Document]) -> list[float]:
        target = self._pending or self._map.get(self._key(history))
        self._pending = None
        return [1.0 if d.doc_id == target else 0.0 for d in docs]


# --- weak supervision -----------------------------------------------------------


def pseudo_label(response: str, docs: Sequence[Document]) -> str:
    """Doc whose value has the highest BLEU against the response; the lowest
    doc_id wins ties."""
    if not docs:
        raise ValueError("empty document set")
    best_id = ""
    best_score = -1.0
    for doc in sorted(docs, key=lambda d: d.doc_id):
        s = sentence_bleu_text(response, doc.value)
        if s > best_score:
            best_id, best_score = doc.doc_id, s
    return best_id


@dataclass(frozen=True)
class PseudoPair:
    history: DialogHistory
    document: Document
    response: str
    flowchart_id: str


def make_pseudo_pairs(
    dialogs: Sequence[Dialog], docs_by_chart: dict[str, Sequence[Document]]
) -> list[PseudoPair]:
    """One weakly supervised example per agent turn: the pseudo grounded
    document is the BLEU argmax against the response. Gold grounding labels
    are deliberately not consulted."""
    pairs = []
    label_cache: dict[tuple[str, str], str] = {}
    for dialog in dialogs:
        docs = docs_by_chart[dialog.flowchart_id]
        by_id = {d.doc_id: d for d in docs}
        for history, target in dialog.agent_turns():
            cache_key = (dialog.flowchart_id, target.text)
            doc_id = label_cache.get(cache_key)
            if doc_id is None:
                doc_id = pseudo_label(target.text, docs)
                label_cache[cache_key] = doc_id
            pairs.append(PseudoPair(history, by_id[doc_id], target.text, dialog.flowchart_id))
    return pairs


# --- contrastive pre-training ----------------------------------------------------


def contrastive_loss(
    d_pos: torch.Tensor, d_neg: torch.Tensor, margin: float = 1.0
) -> torch.Tensor:
    """Pull the positive key onto the history, push the negative beyond the
    margin: mean(d_pos + relu(margin - d_neg))."""
    return (d_pos + torch.relu(margin - d_neg)).mean()


@dataclass
class RetrieverTrainConfig:
    embed_dim: int = 64
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 32
    margin: float = 1.0
    neg_count: int = 1
    token_dropout: float = 0.0
    seed: int = 13
    patience: int = 4

    @classmethod
    def from_dict(cls, data: dict) -> "RetrieverTrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown retriever config keys: {sorted(unknown)}")
        return cls(**data)


@torch.no_grad()
def batched_recall(
    model: HierarchicalRetriever,
    pairs: Sequence[tuple[DialogHistory, Document]],
    docs_for_pair: Sequence[Sequence[Document]],
    batch_size: int = 128,
) -> float:
    """Recall@1 with batched history encoding; documents are grouped per
    distinct collection so keys encode once."""
    if len(pairs) != len(docs_for_pair):
        raise ValueError("pairs and document collections differ in length")
    model.eval()
    indices: dict[int, DocumentIndex] = {}
    hits = 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        chunk_docs = docs_for_pair[start : start + batch_size]
        hv = model.encode_histories([h for h, _ in chunk])
        for row, ((_, gold), docs) in enumerate(zip(chunk, chunk_docs)):
            key = id(docs)
            if key not in indices:
                indices[key] = build_index(model, docs)
            index = indices[key]
            dists = torch.linalg.vector_norm(index.matrix - hv[row].unsqueeze(0), dim=1)
            scores = (-dists).tolist()
            best = min(
                range(len(scores)), key=lambda i: (-scores[i], index.doc_ids[i])
            )
            hits += index.doc_ids[best] == gold.doc_id
    return hits / len(pairs)


def recall_on_pairs(
    model: Retriever,
    pairs: Sequence[tuple[DialogHistory, Document]],
    docs_for_pair: Sequence[Sequence[Document]],
) -> float:
    if isinstance(model, HierarchicalRetriever):
        return batched_recall(model, pairs, docs_for_pair)
    hits = 0
    for (history, doc), docs in zip(pairs, docs_for_pair):
        result = retrieve_topk(model, history, docs, k=1)
        hits += result.top_doc_id() == doc.doc_id
    return hits / len(pairs)


def _pretrain_on_items(
    model: HierarchicalRetriever,
    items: Sequence[tuple[DialogHistory, Document, Sequence[Document]]],
    cfg: RetrieverTrainConfig,
    val_pairs: Sequence[tuple[DialogHistory, Document]] | None,
    val_docs: Sequence[Sequence[Document]] | None,
) -> HierarchicalRetriever:
    rng = random.Random(cfg.seed)
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr)

    best_recall = -1.0
    best_state = None
    stale = 0
    order = list(range(len(items)))
    for _epoch in range(cfg.epochs):
        model.train()
        rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start : start + cfg.batch_size]]
            histories = [h for h, _, _ in batch]
            pos_keys = [doc.key for _, doc, _ in batch]
            neg_keys = []
            for _, doc, pool in batch:
                for _n in range(cfg.neg_count):
                    while True:
                        neg = pool[rng.randrange(len(pool))]
                        if neg.doc_id != doc.doc_id:
                            break
                    neg_keys.append(neg.key)
            hv = model.encode_histories(histories, cfg.token_dropout, rng)
            pv = model.encode_keys(pos_keys, cfg.token_dropout, rng)
            nv = model.encode_keys(neg_keys, cfg.token_dropout, rng).view(
                len(batch), cfg.neg_count, -1
            )
            d_pos = torch.linalg.vector_norm(hv - pv, dim=1)
            d_neg = torch.linalg.vector_norm(hv.unsqueeze(1) - nv, dim=2)
            loss = contrastive_loss(d_pos, d_neg.min(dim=1).values, cfg.margin)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        if val_pairs:
            recall = batched_recall(model, val_pairs, val_docs)
            if recall > best_recall:
                best_recall = recall
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                stale = 0
            else:
                stale += 1
                if stale > cfg.patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model


def pretrain_retriever(
    model: HierarchicalRetriever,
    pairs: Sequence[tuple[DialogHistory, Document]],
    docs: Sequence[Document],
    cfg: RetrieverTrainConfig,
    val_pairs: Sequence[tuple[DialogHistory, Document]] | None = None,
) -> HierarchicalRetriever:
    """Contrastive pre-training on (history, pseudo document) pairs with one
    uniformly sampled in-collection negative per positive. Early-stops on
    validation recall@1 when validation pairs are provided."""
    if not pairs:
        raise ValueError("no training pairs")
    if len(docs) < 2:
        raise ValueError("contrastive pre-training needs at least 2 documents")
    if cfg.epochs == 0:
        return model
    items = [(h, doc, docs) for h, doc in pairs]
    val_docs = [docs] * len(val_pairs) if val_pairs else None
    return _pretrain_on_items(model, items, cfg, val_pairs, val_docs)


def pretrain_retriever_grouped(
    model: HierarchicalRetriever,
    pairs: Sequence[PseudoPair],
    docs_by_chart: dict[str, Sequence[Document]],
    cfg: RetrieverTrainConfig,
    val_pairs: Sequence[PseudoPair] | None = None,
) -> HierarchicalRetriever:
    """Multi-chart variant: each pair draws its negative from its own chart's
    retrieval domain."""
    if not pairs:
        raise ValueError("no training pairs")
    for docs in docs_by_chart.values():
        if len(docs) < 2:
            raise ValueError("contrastive pre-training needs at least 2 documents per chart")
    if cfg.epochs == 0:
        return model
    items = [(p.history, p.document, docs_by_chart[p.flowchart_id]) for p in pairs]
    vp = [(p.history, p.document) for p in val_pairs] if val_pairs else None
    vd = [docs_by_chart[p.flowchart_id] for p in val_pairs] if val_pairs else None
    return _pretrain_on_items(model, items, cfg, vp, vd)
