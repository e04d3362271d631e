"""Loading knowledge sources from disk and the packaged toy fixtures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .flowchart import Document, FaqSet, Flowchart, build_documents, load_faqs, load_flowchart
from .synth import ParaphraseBank, load_bank_components
from .text import Vocab


@dataclass
class Knowledge:
    """All loaded knowledge sources, document sets compiled per chart."""

    charts: dict[str, Flowchart]
    faqs: dict[str, FaqSet]
    documents: dict[str, list[Document]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.documents:
            self.documents = {
                chart_id: build_documents(chart, self.faqs.get(chart_id, FaqSet.empty(chart_id)))
                for chart_id, chart in self.charts.items()
            }

    def chart_ids(self) -> list[str]:
        return sorted(self.charts)


def load_flowchart_file(path: str | Path) -> Flowchart:
    return load_flowchart(Path(path).read_text(encoding="utf-8"))


def load_faq_file(path: str | Path) -> FaqSet:
    return load_faqs(Path(path).read_text(encoding="utf-8"))


def load_flowchart_dir(path: str | Path) -> dict[str, Flowchart]:
    charts = {}
    for file in sorted(Path(path).glob("*.json")):
        chart = load_flowchart_file(file)
        charts[chart.id] = chart
    return charts


def load_faq_dir(path: str | Path) -> dict[str, FaqSet]:
    faqsets = {}
    for file in sorted(Path(path).glob("*.json")):
        faqs = load_faq_file(file)
        faqsets[faqs.flowchart_id] = faqs
    return faqsets


def load_bank_file(path: str | Path) -> dict[str, list[str]]:
    return load_bank_components(Path(path).read_text(encoding="utf-8"))


def load_knowledge(data_dir: str | Path) -> Knowledge:
    data_dir = Path(data_dir)
    charts = load_flowchart_dir(data_dir / "flowcharts")
    if not charts:
        raise FileNotFoundError(f"no flowchart files under {data_dir / 'flowcharts'}")
    faqs = load_faq_dir(data_dir / "faqs") if (data_dir / "faqs").is_dir() else {}
    return Knowledge(charts, faqs)


def load_paraphrase_bank(data_dir: str | Path, knowledge: Knowledge) -> ParaphraseBank:
    bank_file = Path(data_dir) / "paraphrases.json"
    components = load_bank_file(bank_file) if bank_file.is_file() else None
    return ParaphraseBank.build(knowledge.charts.values(), knowledge.faqs.values(), components)


def fixture_data_dir() -> Path:
    """Directory with the packaged toy flowcharts, FAQs and paraphrases."""
    return Path(str(resources.files("flowrag").joinpath("fixtures")))


def load_fixture_knowledge() -> Knowledge:
    return load_knowledge(fixture_data_dir())


def load_run_config_file(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def corpus_vocab(dialogs, docs_groups, min_count: int = 1) -> "Vocab":
    """Vocabulary over dialog text plus every document key and value. Charts
    shown at test time are model inputs, so their text belongs in the
    vocabulary even when their dialogs are held out."""
    texts = [u.text for d in dialogs for u in d.utterances]
    for docs in docs_groups:
        for doc in docs:
            texts.extend(doc.key)
            texts.append(doc.value)
    return Vocab.build(texts, min_count=min_count)
