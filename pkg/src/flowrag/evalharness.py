"""End-to-end evaluation: metric bundle, report files, knowledge-source
ablations and the retrieval-error taxonomy."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import torch

from .datafiles import corpus_vocab
from .dialog import Dialog
from .flowchart import Document, Flowchart
from .generator import CausalLmGenerator, Generator, pretrain_generator
from .metrics import classify_retrieval_error, corpus_bleu, recall_at_1, success_rate
from .rag import RagConfig, corpus_marginal_nll, decode, dialog_turns
from .retriever import (
    DocumentIndex,
    HierarchicalRetriever,
    Retriever,
    build_index,
    make_pseudo_pairs,
    pretrain_retriever_grouped,
)
from .text import tokenize

KnowledgeSource = Literal["history", "history+flowchart", "history+flowchart+faq"]

EMPTY_DOC_ID = "none:0"


@dataclass
class EvalReport:
    bleu: float
    perplexity: float | None
    recall_at_1: float
    success_rate: float
    error_breakdown: dict[str, tuple[float, int]] = field(default_factory=dict)
    digression_breakdown: dict[str, dict[str, float]] = field(default_factory=dict)
    n_dialogs: int = 0
    n_turns: int = 0

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "perplexity": self.perplexity,
            "recall_at_1": self.recall_at_1,
            "success_rate": self.success_rate,
            "error_breakdown": {
                cat: {"percent": pct, "count": count}
                for cat, (pct, count) in self.error_breakdown.items()
            },
            "digression_breakdown": self.digression_breakdown,
            "n_dialogs": self.n_dialogs,
            "n_turns": self.n_turns,
        }

    def format_table(self, title: str = "evaluation") -> str:
        ppl = "     n/a" if self.perplexity is None else f"{self.perplexity:8.2f}"
        lines = [
            f"== {title} ==",
            f"dialogs: {self.n_dialogs}   agent turns: {self.n_turns}",
            f"{'BLEU':>12}: {self.bleu:8.2f}",
            f"{'PPL':>12}: {ppl}",
            f"{'R@1':>12}: {self.recall_at_1:8.3f}",
            f"{'SR':>12}: {self.success_rate:8.3f}",
        ]
        if self.error_breakdown:
            lines.append("retrieval errors on node-grounded turns:")
            for cat in ("sibling", "parent", "faq", "other"):
                pct, count = self.error_breakdown.get(cat, (0.0, 0))
                lines.append(f"{cat:>12}: {pct:7.1f}% ({count})")
        if self.digression_breakdown:
            lines.append("FAQ-grounded turns by digression type:")
            for kind, stats in sorted(self.digression_breakdown.items()):
                lines.append(
                    f"{kind:>12}: BLEU {stats['bleu']:6.2f}  R@1 {stats['recall_at_1']:.3f}"
                    f"  ({int(stats['count'])})"
                )
        return "\n".join(lines)


@dataclass(frozen=True)
class TurnRecord:
    history_id: str
    dialog_id: str
    turn_index: int
    flowchart_id: str
    gold_doc_id: str
    retrieved_doc_id: str
    decoded_text: str
    gold_text: str
    digression: str | None
    error_category: str | None


def evaluate_corpus(
    retriever: Retriever,
    generator: Generator,
    dialogs: Sequence[Dialog],
    charts: dict[str, Flowchart],
    docs_by_chart: dict[str, Sequence[Document]],
    cfg: RagConfig,
    compute_perplexity: bool = True,
    ppl_mode: Literal["marginal", "top1"] = "marginal",
) -> tuple[EvalReport, list[TurnRecord]]:
    """Retrieve and decode every agent turn, aggregate the metric bundle and
    emit one record per turn for the error stream."""
    records: list[TurnRecord] = []
    refs: list[list[str]] = []
    hyps: list[list[str]] = []
    retrieved_flat: list[str] = []
    gold_flat: list[str] = []
    per_dialog_retrieved: list[list[str]] = []
    per_dialog_gold: list[list[str]] = []
    indices: dict[str, DocumentIndex] = {}

    for dialog in dialogs:
        docs = docs_by_chart[dialog.flowchart_id]
        by_id = {d.doc_id: d for d in docs}
        index = None
        if isinstance(retriever, HierarchicalRetriever):
            if dialog.flowchart_id not in indices:
                indices[dialog.flowchart_id] = build_index(retriever, docs)
            index = indices[dialog.flowchart_id]
        dialog_retrieved: list[str] = []
        dialog_gold: list[str] = []
        turn = 0
        for history, target in dialog.agent_turns():
            gold_doc_id = target.grounding.doc_id() if target.grounding else ""
            if hasattr(retriever, "begin_turn") and gold_doc_id:
                retriever.begin_turn(gold_doc_id)
            result = decode(history, docs, retriever, generator, cfg, index=index)
            gold_doc = by_id.get(gold_doc_id)
            retrieved_doc = by_id.get(result.doc_id)
            category = None
            if (
                gold_doc is not None
                and retrieved_doc is not None
                and gold_doc.kind == "node"
                and result.doc_id != gold_doc_id
            ):
                category = classify_retrieval_error(
                    retrieved_doc, gold_doc, charts[dialog.flowchart_id]
                )
            records.append(
                TurnRecord(
                    history_id=f"{dialog.dialog_id}#t{turn}",
                    dialog_id=dialog.dialog_id,
                    turn_index=turn,
                    flowchart_id=dialog.flowchart_id,
                    gold_doc_id=gold_doc_id,
                    retrieved_doc_id=result.doc_id,
                    decoded_text=result.text,
                    gold_text=target.text,
                    digression=target.digression,
                    error_category=category,
                )
            )
            refs.append(tokenize(target.text))
            hyps.append(list(result.tokens))
            retrieved_flat.append(result.doc_id)
            gold_flat.append(gold_doc_id)
            dialog_retrieved.append(result.doc_id)
            dialog_gold.append(gold_doc_id)
            turn += 1
        per_dialog_retrieved.append(dialog_retrieved)
        per_dialog_gold.append(dialog_gold)

    ppl = None
    if compute_perplexity:
        ppl = perplexity(retriever, generator, dialogs, docs_by_chart, cfg, mode=ppl_mode)

    report = EvalReport(
        bleu=corpus_bleu(refs, hyps),
        perplexity=ppl,
        recall_at_1=recall_at_1(retrieved_flat, gold_flat),
        success_rate=success_rate(per_dialog_retrieved, per_dialog_gold),
        error_breakdown=_error_breakdown(records),
        digression_breakdown=_digression_breakdown(records),
        n_dialogs=len(dialogs),
        n_turns=len(records),
    )
    return report, records


def _error_breakdown(records: Sequence[TurnRecord]) -> dict[str, tuple[float, int]]:
    counts = {cat: 0 for cat in ("sibling", "parent", "faq", "other")}
    total = 0
    for rec in records:
        if rec.error_category is not None:
            counts[rec.error_category] += 1
            total += 1
    if total == 0:
        return {cat: (0.0, 0) for cat in counts}
    return {cat: (100.0 * n / total, n) for cat, n in counts.items()}


def _digression_breakdown(records: Sequence[TurnRecord]) -> dict[str, dict[str, float]]:
    groups: dict[str, list[TurnRecord]] = {}
    for rec in records:
        if rec.gold_doc_id.startswith("faq:") and rec.digression:
            groups.setdefault(rec.digression, []).append(rec)
    out: dict[str, dict[str, float]] = {}
    for kind, recs in groups.items():
        out[kind] = {
            "bleu": corpus_bleu(
                [tokenize(r.gold_text) for r in recs],
                [tokenize(r.decoded_text) for r in recs],
            ),
            "recall_at_1": sum(r.retrieved_doc_id == r.gold_doc_id for r in recs) / len(recs),
            "count": float(len(recs)),
        }
    return out


def perplexity(
    retriever: Retriever,
    generator: Generator,
    dialogs: Sequence[Dialog],
    docs_by_chart: dict[str, Sequence[Document]],
    cfg: RagConfig,
    mode: Literal["marginal", "top1"] = "marginal",
) -> float:
    """exp of the mean per-token NLL under the document mixture (top-k_train
    documents; `top1` conditions on the single best document instead)."""
    turns = dialog_turns(dialogs)
    if not turns:
        raise ValueError("no agent turns to evaluate")
    k = cfg.k_train if mode == "marginal" else 1
    total, tokens = corpus_marginal_nll(retriever, generator, turns, docs_by_chart, k)
    if tokens == 0:
        raise ValueError("zero target tokens")
    mean_nll = total / tokens
    if mean_nll > 700:  # exp would overflow; the data is impossible under the model
        return math.inf
    return math.exp(mean_nll)


# --- knowledge-source ablations -------------------------------------------------


def ablation_documents(
    chart: Flowchart, docs: Sequence[Document], source: KnowledgeSource
) -> list[Document]:
    """Restrict the retrieval domain per knowledge configuration. History-only
    keeps a single degenerate empty document so the pipeline shape holds."""
    if source == "history":
        return [Document(EMPTY_DOC_ID, "node", "", (), "")]
    if source == "history+flowchart":
        return [d for d in docs if d.kind == "node"]
    if source == "history+flowchart+faq":
        return list(docs)
    raise ValueError(f"unknown knowledge source {source!r}")


def run_ablation(
    source: KnowledgeSource,
    train_dialogs: Sequence[Dialog],
    eval_dialogs: Sequence[Dialog],
    charts: dict[str, Flowchart],
    docs_by_chart: dict[str, Sequence[Document]],
    retriever_cfg,
    generator_cfg,
    rag_cfg: RagConfig,
    compute_perplexity: bool = False,
) -> EvalReport:
    """Train retriever and generator from scratch against the restricted
    knowledge source, then evaluate. History-only has a single degenerate
    document, so its retrieval is trivial and the retriever stays untrained."""
    ablated = {
        chart_id: ablation_documents(charts[chart_id], docs, source)
        for chart_id, docs in docs_by_chart.items()
    }
    vocab = corpus_vocab(train_dialogs, ablated.values())
    pairs = make_pseudo_pairs(train_dialogs, ablated)

    # weight init must not depend on ambient RNG state: identical configs and
    # seeds give identical reports
    torch.manual_seed(retriever_cfg.seed)
    retriever = HierarchicalRetriever(vocab, retriever_cfg.embed_dim)
    if all(len(docs) >= 2 for docs in ablated.values()):
        pretrain_retriever_grouped(retriever, pairs, ablated, retriever_cfg)

    torch.manual_seed(generator_cfg.seed)
    generator = CausalLmGenerator(
        vocab, dim=generator_cfg.dim, layers=generator_cfg.layers, heads=generator_cfg.heads
    )
    triples = [(p.history, p.document, p.response) for p in pairs]
    pretrain_generator(generator, triples, generator_cfg)

    report, _records = evaluate_corpus(
        retriever,
        generator,
        eval_dialogs,
        charts,
        ablated,
        rag_cfg,
        compute_perplexity=compute_perplexity,
    )
    return report


def write_report(
    report: EvalReport,
    records: Sequence[TurnRecord],
    out_dir: str | Path,
    name: str = "eval",
) -> None:
    """Text table + machine-readable report + per-turn record stream."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.txt").write_text(report.format_table(name) + "\n", encoding="utf-8")
    (out_dir / f"{name}.json").write_text(
        json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    with open(out_dir / f"{name}.records.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "history_id": rec.history_id,
                        "flowchart": rec.flowchart_id,
                        "gold": rec.gold_doc_id,
                        "retrieved": rec.retrieved_doc_id,
                        "category": rec.error_category,
                        "digression": rec.digression,
                        "decoded": rec.decoded_text,
                    }
                )
                + "\n"
            )
