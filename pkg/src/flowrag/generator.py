"""Conditional next-response generation.

Two backends share one interface: a small causal transformer trained from
scratch, and a deterministic template oracle that emits the conditioned
document's value verbatim (used in tests and composition demos). Inputs are
assembled as

    <begin> value tokens <sep> utterance_1 ... <sep> utterance_i <agent> y

with per-token segment tags (document / user / agent). Over-length inputs
drop the oldest history utterances first; the document value and the latest
user utterance are always kept.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import torch
from torch import nn

from .dialog import DialogHistory
from .flowchart import Document
from .metrics import corpus_bleu
from .text import AGENT, BEGIN, SEP, Vocab, tokenize

SEG_DOC = 0
SEG_USER = 1
SEG_AGENT = 2

LOG_FLOOR = -1e9


@dataclass(frozen=True)
class LmInput:
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    tokens: tuple[str, ...]
    value_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.token_ids)

    def detokenized(self) -> str:
        return " ".join(self.tokens)


def build_lm_input(
    vocab: Vocab, history: DialogHistory, doc: Document, max_context: int = 256
) -> LmInput:
    """Deterministic layout: document value first, history in order, agent
    marker last."""
    if history.utterances[-1].speaker != "user":
        raise ValueError("history must end with a user utterance")
    value_tokens = tokenize(doc.value)
    value_ids = tuple(vocab.id_of(t) for t in value_tokens)

    segments: list[tuple[int, list[str]]] = []  # (segment tag, tokens incl. leading sep)
    for utt in history.utterances:
        tag = SEG_USER if utt.speaker == "user" else SEG_AGENT
        segments.append((tag, [SEP] + tokenize(utt.text)))

    budget = max_context - (1 + len(value_tokens)) - 1  # begin+value, agent marker
    kept: list[tuple[int, list[str]]] = []
    used = 0
    for seg in reversed(segments):
        if kept and used + len(seg[1]) > budget:
            break
        kept.insert(0, seg)
        used += len(seg[1])
    if used > budget and kept:
        # even the latest utterance alone overflows: keep its tail
        tag, toks = kept[0]
        keep = max(1, budget)
        kept[0] = (tag, toks[-keep:])

    tokens: list[str] = [BEGIN] + value_tokens
    ids: list[int] = [vocab.begin_id] + list(value_ids)
    segs: list[int] = [SEG_DOC] * (1 + len(value_tokens))
    for tag, toks in kept:
        tokens.extend(toks)
        ids.extend(vocab.sep_id if t == SEP else vocab.id_of(t) for t in toks)
        segs.extend([tag] * len(toks))
    tokens.append(AGENT)
    ids.append(vocab.agent_id)
    segs.append(SEG_AGENT)
    return LmInput(tuple(ids), tuple(segs), tuple(tokens), value_ids)


def encode_target(vocab: Vocab, text: str) -> list[int]:
    return [vocab.id_of(t) for t in tokenize(text)] + [vocab.end_id]


class Generator(Protocol):
    vocab: Vocab

    def sequence_log_probs(self, inp: LmInput, y: Sequence[int]) -> list[float]:
        ...

    def next_token_log_probs(self, inp: LmInput, prefixes: Sequence[Sequence[int]]) -> torch.Tensor:
        ...


def log_prob(model: Generator, inp: LmInput, y: Sequence[int]) -> list[float]:
    """Teacher-forced per-token log-probabilities of the target sequence."""
    if not y:
        raise ValueError("empty target sequence")
    if y[-1] != model.vocab.end_id:
        raise ValueError("target sequence must end with the end marker")
    return model.sequence_log_probs(inp, y)


class TemplateOracleGenerator:
    """Deterministic test backend: probability one on the document value
    followed by the end marker, a large negative floor everywhere else."""

    def __init__(self, vocab: Vocab):
        self.vocab = vocab

    def _expected(self, inp: LmInput) -> list[int]:
        return list(inp.value_ids) + [self.vocab.end_id]

    def sequence_log_probs(self, inp: LmInput, y: Sequence[int]) -> list[float]:
        expected = self._expected(inp)
        out = []
        for i, tok in enumerate(y):
            hit = i < len(expected) and tok == expected[i]
            out.append(0.0 if hit else LOG_FLOOR)
        return out

    def next_token_log_probs(self, inp: LmInput, prefixes: Sequence[Sequence[int]]) -> torch.Tensor:
        expected = self._expected(inp)
        out = torch.full((len(prefixes), len(self.vocab)), LOG_FLOOR)
        for row, prefix in enumerate(prefixes):
            pos = len(prefix)
            target = expected[pos] if pos < len(expected) else self.vocab.end_id
            out[row, target] = 0.0
        return out


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        attended, _ = self.attn(h, h, h, attn_mask=attn_mask, need_weights=False)
        x = x + attended
        return x + self.mlp(self.ln2(x))


class CausalLmGenerator(nn.Module):
    """Word-level causal transformer with a next-utterance classification
    head on the final hidden state."""

    def __init__(
        self,
        vocab: Vocab,
        dim: int = 96,
        layers: int = 2,
        heads: int = 4,
        max_positions: int = 384,
    ):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.layers = layers
        self.heads = heads
        self.max_positions = max_positions
        self.tok_emb = nn.Embedding(len(vocab), dim, padding_idx=vocab.pad_id)
        self.pos_emb = nn.Embedding(max_positions, dim)
        self.seg_emb = nn.Embedding(3, dim)
        self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(layers))
        self.ln_f = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, len(vocab))
        self.cls_head = nn.Linear(dim, 1)

    def forward(self, ids: torch.Tensor, segs: torch.Tensor) -> torch.Tensor:
        """Hidden states (B, T, D); pads sit at the end, the causal mask keeps
        real positions from attending to them."""
        _, T = ids.shape
        if T > self.max_positions:
            raise ValueError(f"sequence length {T} exceeds max positions {self.max_positions}")
        positions = torch.arange(T, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(positions) + self.seg_emb(segs)
        mask = torch.triu(
            torch.ones(T, T, dtype=torch.bool, device=ids.device), diagonal=1
        )
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_f(x)

    def logits(self, ids: torch.Tensor, segs: torch.Tensor) -> torch.Tensor:
        return self.head(self(ids, segs))

    def _full_sequence(self, inp: LmInput, y: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        device = self.tok_emb.weight.device
        ids = torch.tensor(list(inp.token_ids) + list(y), device=device).unsqueeze(0)
        segs = torch.tensor(
            list(inp.segment_ids) + [SEG_AGENT] * len(y), device=device
        ).unsqueeze(0)
        return ids, segs

    def sequence_log_probs(self, inp: LmInput, y: Sequence[int]) -> list[float]:
        self.eval()
        with torch.no_grad():
            ids, segs = self._full_sequence(inp, y)
            logits = self.logits(ids, segs)[0]
            logp = torch.log_softmax(logits, dim=-1)
            start = len(inp.token_ids) - 1
            targets = torch.tensor(list(y), device=ids.device)
            rows = torch.arange(start, start + len(y), device=ids.device)
            return logp[rows, targets].tolist()

    def next_token_log_probs(self, inp: LmInput, prefixes: Sequence[Sequence[int]]) -> torch.Tensor:
        self.eval()
        with torch.no_grad():
            device = self.tok_emb.weight.device
            seqs = [list(inp.token_ids) + list(p) for p in prefixes]
            longest = max(len(s) for s in seqs)
            ids = torch.full((len(seqs), longest), self.vocab.pad_id, device=device)
            segs = torch.zeros((len(seqs), longest), dtype=torch.long, device=device)
            for row, (seq, prefix) in enumerate(zip(seqs, prefixes)):
                ids[row, : len(seq)] = torch.tensor(seq, device=device)
                segs[row, : len(inp.segment_ids)] = torch.tensor(
                    inp.segment_ids, device=device
                )
                if prefix:
                    segs[row, len(inp.segment_ids) : len(seq)] = SEG_AGENT
            logits = self.logits(ids.long(), segs)
            last = torch.tensor([len(s) - 1 for s in seqs], device=device)
            rows = torch.arange(len(seqs), device=device)
            return torch.log_softmax(logits[rows, last], dim=-1)


def greedy_generate(model: Generator, inp: LmInput, max_len: int = 60) -> list[int]:
    """Argmax decoding until the end marker; the marker is not returned."""
    end_id = model.vocab.end_id
    prefix: list[int] = []
    for _ in range(max_len):
        logp = model.next_token_log_probs(inp, [prefix])[0]
        nxt = int(torch.argmax(logp).item())
        if nxt == end_id:
            break
        prefix.append(nxt)
    return prefix


@dataclass
class GeneratorTrainConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 32
    lambda_cls: float = 1.0
    seed: int = 13
    patience: int = 3
    max_context: int = 256
    val_sample: int = 64

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorTrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**data)


def _pad_batch(
    model: CausalLmGenerator, items: Sequence[tuple[LmInput, Sequence[int]]]
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Right-padded (ids, segs) plus flat (positions, targets) index tensors
    for the teacher-forced target tokens."""
    device = model.tok_emb.weight.device
    longest = max(len(inp) + len(y) for inp, y in items)
    ids = torch.full((len(items), longest), model.vocab.pad_id, dtype=torch.long, device=device)
    segs = torch.zeros((len(items), longest), dtype=torch.long, device=device)
    pos_rows, pos_cols, targets = [], [], []
    for row, (inp, y) in enumerate(items):
        seq = list(inp.token_ids) + list(y)
        ids[row, : len(seq)] = torch.tensor(seq, device=device)
        segs[row, : len(inp.segment_ids)] = torch.tensor(inp.segment_ids, device=device)
        segs[row, len(inp.segment_ids) : len(seq)] = SEG_AGENT
        for t, target in enumerate(y):
            pos_rows.append(row)
            pos_cols.append(len(inp.token_ids) - 1 + t)
            targets.append(target)
    return (
        ids,
        segs,
        torch.tensor([pos_rows, pos_cols], device=device),
        torch.tensor(targets, device=device),
    )


def batch_nll(
    model: CausalLmGenerator, items: Sequence[tuple[LmInput, Sequence[int]]]
) -> torch.Tensor:
    """Mean per-token negative log-likelihood of the targets."""
    ids, segs, positions, targets = _pad_batch(model, items)
    logp = torch.log_softmax(model.logits(ids, segs), dim=-1)
    picked = logp[positions[0], positions[1], targets]
    return -picked.mean()


def batch_sequence_log_prob_sums(
    model: CausalLmGenerator, items: Sequence[tuple[LmInput, Sequence[int]]]
) -> torch.Tensor:
    """Per-item summed target log-probability, differentiable."""
    ids, segs, positions, targets = _pad_batch(model, items)
    logp = torch.log_softmax(model.logits(ids, segs), dim=-1)
    picked = logp[positions[0], positions[1], targets]
    zeros = torch.zeros(len(items), device=picked.device, dtype=picked.dtype)
    return zeros.index_add(0, positions[0], picked)


def _classification_logits(
    model: CausalLmGenerator, items: Sequence[tuple[LmInput, Sequence[int]]]
) -> torch.Tensor:
    ids, segs, _, _ = _pad_batch(model, items)
    hidden = model(ids, segs)
    last = torch.tensor(
        [len(inp) + len(y) - 1 for inp, y in items], device=ids.device
    )
    rows = torch.arange(len(items), device=ids.device)
    return model.cls_head(hidden[rows, last]).squeeze(-1)


def pretrain_generator(
    model: Generator,
    triples: Sequence[tuple[DialogHistory, Document, str]],
    cfg: GeneratorTrainConfig,
    val_triples: Sequence[tuple[DialogHistory, Document, str]] | None = None,
) -> Generator:
    """Minimize NLL of the response given history and (pseudo) document, plus
    lambda times a next-utterance classification loss whose negatives are
    other responses from the same batch. Early-stops on validation BLEU."""
    if not isinstance(model, CausalLmGenerator):
        raise ValueError("the template-oracle backend cannot be trained")
    if not triples:
        raise ValueError("no training triples")
    if cfg.epochs == 0:
        return model
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
    vocab = model.vocab
    items = [
        (build_lm_input(vocab, h, doc, cfg.max_context), encode_target(vocab, y))
        for h, doc, y in triples
    ]

    best_bleu = -1.0
    best_state = None
    stale = 0
    order = list(range(len(items)))
    bce = nn.BCEWithLogitsLoss()
    for _epoch in range(cfg.epochs):
        model.train()
        rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start : start + cfg.batch_size]]
            loss = batch_nll(model, batch)
            if cfg.lambda_cls > 0:
                negatives = []
                for inp, _y in batch:
                    other = batch[rng.randrange(len(batch))] if len(batch) > 1 else (
                        items[rng.randrange(len(items))]
                    )
                    negatives.append((inp, other[1]))
                logits = _classification_logits(model, list(batch) + negatives)
                labels = torch.cat(
                    [torch.ones(len(batch)), torch.zeros(len(negatives))]
                ).to(logits.device)
                loss = loss + cfg.lambda_cls * bce(logits, labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        if val_triples:
            sample = list(val_triples)[: cfg.val_sample]
            refs, hyps = [], []
            for h, doc, y in sample:
                inp = build_lm_input(vocab, h, doc, cfg.max_context)
                hyps.append(vocab.decode(greedy_generate(model, inp)))
                refs.append(tokenize(y))
            bleu = corpus_bleu(refs, hyps)
            if bleu > best_bleu:
                best_bleu = bleu
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


def save_generator(model: CausalLmGenerator, path: str | Path) -> None:
    torch.save(
        {
            "format_version": 1,
            "kind": "causal-lm-generator",
            "dims": {
                "dim": model.dim,
                "layers": model.layers,
                "heads": model.heads,
                "max_positions": model.max_positions,
            },
            "vocab": model.vocab.to_dict(),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_generator(path: str | Path) -> CausalLmGenerator:
    data = torch.load(path, weights_only=True)
    if data.get("kind") != "causal-lm-generator":
        raise ValueError(f"{path} is not a generator checkpoint")
    dims = data["dims"]
    model = CausalLmGenerator(
        Vocab.from_dict(data["vocab"]),
        dim=dims["dim"],
        layers=dims["layers"],
        heads=dims["heads"],
        max_positions=dims["max_positions"],
    )
    model.load_state_dict(data["state_dict"])
    model.eval()
    return model
