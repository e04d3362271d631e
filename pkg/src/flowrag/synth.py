"""Synthetic dialog forging: outlines, paraphrase stitching and splits.

An outline is the symbolic plan for one dialog: a problem description
(primary issue, optional path evidence, optional distractor content), one
exchange per remaining flowchart step, and a closing. Outlines are stitched
into surface dialogs by sampling paraphrases per component; re-stitching the
same outline interchanges paraphrases without touching grounding labels.

All randomness flows through one explicitly threaded `random.Random`.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

from .dialog import Dialog, Grounding, Utterance, validate_dialog
from .flowchart import FaqSet, Flowchart, FlowPath, enumerate_paths
from .text import tokenize

ExchangeKind = Literal["simple", "user_digression", "agent_digression"]

# Off-topic problem-description filler; the forge samples from this bank.
DISTRACTORS = (
    "i bought it about two years ago .",
    "i really need this working before the weekend .",
    "my neighbor suggested i ask someone who knows .",
    "i already tried turning it off and on again .",
    "this is the second time this month it acts up .",
    "i use it every single day for work .",
    "i am not very good with technical things .",
    "it was working perfectly fine yesterday .",
    "i have an important deadline coming up .",
    "please walk me through this step by step .",
)


@dataclass(frozen=True)
class Problem:
    primary_issue: str
    secondary: tuple[str, str] | None = None
    irrelevant: str | None = None


@dataclass(frozen=True)
class Exchange:
    node_id: str
    edge_label: str
    kind: ExchangeKind = "simple"
    faq_id: int | None = None


@dataclass(frozen=True)
class Outline:
    outline_id: str
    flowchart_id: str
    path: FlowPath
    problem: Problem
    exchanges: tuple[Exchange, ...]
    closing_node: str
    degraded: tuple[str, ...] = ()


@dataclass
class SynthConfig:
    complex_prob: float = 0.3
    secondary_prob: float = 0.3
    distractor_prob: float = 0.5
    agent_digression_prob: float = 0.5
    outlines_per_chart: int = 110
    interchange_factor: int = 2

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**data)


# --- paraphrase bank ---------------------------------------------------------


def component_key(kind: str, *parts: str) -> str:
    return ":".join((kind, *parts))


@dataclass
class ParaphraseBank:
    """Surface forms per outline component. Components without paraphrases
    fall back to their canonical form; templates carry {issue} / {solution}
    slots filled at render time."""

    canonical: dict[str, str] = field(default_factory=dict)
    variants: dict[str, list[str]] = field(default_factory=dict)

    def add_canonical(self, key: str, text: str) -> None:
        self.canonical[key] = text

    def add_variants(self, key: str, forms: Iterable[str]) -> None:
        self.variants.setdefault(key, []).extend(forms)

    def forms(self, key: str) -> list[str]:
        forms = self.variants.get(key) or []
        if forms:
            return list(forms)
        if key not in self.canonical:
            raise KeyError(f"no canonical surface form for component {key!r}")
        return [self.canonical[key]]

    def render(self, key: str, rng: random.Random, slots: dict[str, str] | None = None) -> str:
        text = rng.choice(self.forms(key))
        for slot, value in (slots or {}).items():
            text = text.replace("{" + slot + "}", value)
        return text

    @classmethod
    def build(
        cls,
        charts: Iterable[Flowchart],
        faqsets: Iterable[FaqSet],
        components: dict[str, list[str]] | None = None,
    ) -> "ParaphraseBank":
        """Derive canonical forms from the knowledge sources and attach any
        collected paraphrases (the bank-file "components" mapping)."""
        bank = cls()
        for chart in charts:
            fc = chart.id
            bank.add_canonical(
                component_key("problem-template", fc), "i need help with this problem : {issue} ."
            )
            for node_id in chart.iter_nodes_preorder():
                bank.add_canonical(
                    component_key("node-question", fc, node_id), chart.utterance(node_id)
                )
                for label, _ in chart.children(node_id):
                    bank.add_canonical(component_key("edge-answer", fc, node_id, label), label)
                    bank.add_canonical(
                        component_key("secondary", fc, node_id, label),
                        f"{chart.utterance(node_id)} {label}",
                    )
        for faqs in faqsets:
            fc = faqs.flowchart_id
            for i, entry in enumerate(faqs.entries):
                bank.add_canonical(component_key("faq-q", fc, str(i)), entry.question)
                bank.add_canonical(component_key("faq-a", fc, str(i)), entry.answer)
                bank.add_canonical(
                    component_key("faq-prereq", fc, str(i)), _prereq_question(entry.question)
                )
        bank.add_canonical("closing-template:user", "thank you , that fixed my problem !")
        bank.add_canonical("closing-template:agent", "glad i could help . remember : {solution}")
        bank.add_canonical("user-ack", "okay .")
        bank.add_canonical("prereq-no", "no , i do not know how .")
        for key, forms in (components or {}).items():
            bank.add_variants(key, forms)
        return bank


def _prereq_question(faq_question: str) -> str:
    q = faq_question.strip().rstrip("?").strip()
    for prefix, repl in (("how do i ", "how to "), ("how can i ", "how to ")):
        if q.startswith(prefix):
            q = repl + q[len(prefix) :]
            break
    return f"do you know {q} ?"


def load_bank_components(raw: str | bytes | dict) -> dict[str, list[str]]:
    """Parse a paraphrase bank file: {"components": {key: [str]}}."""
    if isinstance(raw, (str, bytes)):
        raw = json.loads(raw)
    if not isinstance(raw, dict) or not isinstance(raw.get("components"), dict):
        raise ValueError("paraphrase bank file must contain a 'components' object")
    components: dict[str, list[str]] = {}
    for key, forms in raw["components"].items():
        if not isinstance(forms, list) or not all(isinstance(f, str) for f in forms):
            raise ValueError(f"paraphrase list for {key!r} must be a list of strings")
        components[key] = list(forms)
    return components


# --- outline sampling --------------------------------------------------------


def _faq_affinity(chart: Flowchart, node_id: str, faqs: FaqSet) -> list[float]:
    """FAQ entries are follow-up material for specific node questions, so a
    digression's FAQ leans toward the lexically closest one; a base mass keeps
    every FAQ reachable."""
    node_tokens = set(tokenize(chart.utterance(node_id)))
    weights = []
    for entry in faqs.entries:
        faq_tokens = set(tokenize(entry.question))
        union = node_tokens | faq_tokens
        overlap = len(node_tokens & faq_tokens) / len(union) if union else 0.0
        weights.append(0.1 + overlap)
    return weights


def sample_outline(
    chart: Flowchart,
    path: FlowPath,
    faqs: FaqSet,
    cfg: SynthConfig,
    rng: random.Random,
    outline_id: str = "outline",
) -> Outline:
    """Plan one dialog along `path`: coin-toss each step into a simple or
    complex exchange, optionally embed path evidence in the problem
    description (skipping the covered prefix) and pad with distractors."""
    path.validate(chart)
    secondary: tuple[str, str] | None = None
    start = 0
    if path.steps and rng.random() < cfg.secondary_prob:
        j = rng.randrange(len(path.steps))
        secondary = path.steps[j]
        start = j + 1
    irrelevant = rng.choice(DISTRACTORS) if rng.random() < cfg.distractor_prob else None

    exchanges: list[Exchange] = []
    degraded: list[str] = []
    for node_id, label in path.steps[start:]:
        if rng.random() < cfg.complex_prob:
            if len(faqs) == 0:
                degraded.append(node_id)
                exchanges.append(Exchange(node_id, label))
                continue
            kind: ExchangeKind = (
                "agent_digression"
                if rng.random() < cfg.agent_digression_prob
                else "user_digression"
            )
            weights = _faq_affinity(chart, node_id, faqs)
            faq_id = rng.choices(range(len(faqs)), weights=weights)[0]
            exchanges.append(Exchange(node_id, label, kind, faq_id))
        else:
            exchanges.append(Exchange(node_id, label))

    return Outline(
        outline_id=outline_id,
        flowchart_id=chart.id,
        path=path,
        problem=Problem(chart.title, secondary, irrelevant),
        exchanges=tuple(exchanges),
        closing_node=path.terminal,
        degraded=tuple(degraded),
    )


def forge_outlines(
    chart: Flowchart,
    faqs: FaqSet,
    cfg: SynthConfig,
    rng: random.Random,
    total: int | None = None,
) -> list[Outline]:
    """Divide `total` outlines equally amongst the chart's paths, guaranteeing
    every path is covered."""
    total = cfg.outlines_per_chart if total is None else total
    paths = enumerate_paths(chart)
    if total < len(paths):
        raise ValueError(
            f"{chart.id}: {total} outlines cannot cover {len(paths)} paths"
        )
    base, rem = divmod(total, len(paths))
    outlines: list[Outline] = []
    for i, path in enumerate(paths):
        count = base + (1 if i < rem else 0)
        for k in range(count):
            outlines.append(
                sample_outline(
                    chart, path, faqs, cfg, rng, outline_id=f"{chart.id}-p{i:02d}-{k:03d}"
                )
            )
    return outlines


# --- stitching ---------------------------------------------------------------


def stitch_dialog(outline: Outline, bank: ParaphraseBank, rng: random.Random) -> Dialog:
    """Realize an outline as a surface dialog by sampling one paraphrase per
    component. Every agent utterance is labeled with the document it realizes."""
    fc = outline.flowchart_id
    utts: list[Utterance] = []

    problem_parts = [
        bank.render(
            component_key("problem-template", fc),
            rng,
            slots={"issue": outline.problem.primary_issue},
        )
    ]
    if outline.problem.secondary is not None:
        node_id, label = outline.problem.secondary
        problem_parts.append(bank.render(component_key("secondary", fc, node_id, label), rng))
    if outline.problem.irrelevant is not None:
        problem_parts.append(outline.problem.irrelevant)
    utts.append(
        Utterance("user", " ".join(problem_parts), component=component_key("problem-template", fc))
    )

    for exchange in outline.exchanges:
        utts.extend(_stitch_exchange(outline, exchange, bank, rng))

    solution_key = component_key("node-question", fc, outline.closing_node)
    terminal_grounding = Grounding("node", outline.closing_node)
    utts.append(
        Utterance(
            "agent",
            bank.render(solution_key, rng),
            grounding=terminal_grounding,
            component=solution_key,
        )
    )
    utts.append(
        Utterance("user", bank.render("closing-template:user", rng), component="closing-template:user")
    )
    utts.append(
        Utterance(
            "agent",
            bank.render(
                "closing-template:agent", rng, slots={"solution": bank.canonical[solution_key]}
            ),
            grounding=terminal_grounding,
            component="closing-template:agent",
        )
    )

    dialog = Dialog(
        dialog_id=outline.outline_id,
        flowchart_id=fc,
        utterances=tuple(utts),
        path=outline.path,
        outline=outline,
    )
    validate_dialog(dialog)
    return dialog


def _stitch_exchange(
    outline: Outline, exchange: Exchange, bank: ParaphraseBank, rng: random.Random
) -> list[Utterance]:
    fc = outline.flowchart_id
    node_key = component_key("node-question", fc, exchange.node_id)
    answer_key = component_key("edge-answer", fc, exchange.node_id, exchange.edge_label)
    node_grounding = Grounding("node", exchange.node_id)

    def agent(key: str, grounding: Grounding, digression=None) -> Utterance:
        return Utterance(
            "agent", bank.render(key, rng), grounding=grounding, component=key, digression=digression
        )

    def user(key: str, digression=None) -> Utterance:
        return Utterance("user", bank.render(key, rng), component=key, digression=digression)

    if exchange.kind == "simple":
        return [agent(node_key, node_grounding), user(answer_key)]

    faq_id = str(exchange.faq_id)
    faq_grounding = Grounding("faq", faq_id)
    if exchange.kind == "user_digression":
        # the user asks for clarification before answering the node question
        return [
            agent(node_key, node_grounding, digression="user"),
            user(component_key("faq-q", fc, faq_id), digression="user"),
            agent(component_key("faq-a", fc, faq_id), faq_grounding, digression="user"),
            user(answer_key, digression="user"),
        ]
    # agent digression: probe a prerequisite, explain it, then ask the question
    return [
        agent(component_key("faq-prereq", fc, faq_id), faq_grounding, digression="agent"),
        user("prereq-no", digression="agent"),
        agent(component_key("faq-a", fc, faq_id), faq_grounding, digression="agent"),
        user("user-ack", digression="agent"),
        agent(node_key, node_grounding, digression="agent"),
        user(answer_key, digression="agent"),
    ]


# --- interchange augmentation --------------------------------------------------


def augment_by_interchange(
    dialogs: list[Dialog], bank: ParaphraseBank, rng: random.Random, factor: int
) -> list[Dialog]:
    """Grow the corpus `factor`-fold by re-stitching each dialog's outline with
    fresh paraphrase draws; grounding labels are untouched by construction."""
    if factor < 1:
        raise ValueError("interchange factor must be >= 1")
    result = list(dialogs)
    if factor == 1:
        return result
    for dialog in dialogs:
        if dialog.outline is None:
            raise ValueError(
                f"{dialog.dialog_id}: interchange augmentation needs the dialog's outline"
            )
    for copy in range(1, factor):
        for dialog in dialogs:
            outline: Outline = dialog.outline  # type: ignore[assignment]
            twin = stitch_dialog(outline, bank, rng)
            twin = Dialog(
                dialog_id=f"{dialog.dialog_id}-x{copy}",
                flowchart_id=twin.flowchart_id,
                utterances=twin.utterances,
                path=twin.path,
                outline=outline,
            )
            assert _grounding_signature(twin) == _grounding_signature(dialog)
            result.append(twin)
    return result


def _grounding_signature(dialog: Dialog) -> tuple:
    return tuple(
        (u.grounding.kind, u.grounding.id)
        for u in dialog.utterances
        if u.grounding is not None
    )


def forge_corpus(
    charts: list[Flowchart],
    faqsets: dict[str, FaqSet],
    bank: ParaphraseBank,
    cfg: SynthConfig,
    rng: random.Random,
    outlines_per_chart: int | None = None,
) -> list[Dialog]:
    """Full pipeline: outlines for every chart, stitch, then interchange."""
    stitched: list[Dialog] = []
    for chart in charts:
        faqs = faqsets.get(chart.id, FaqSet.empty(chart.id))
        for outline in forge_outlines(chart, faqs, cfg, rng, total=outlines_per_chart):
            stitched.append(stitch_dialog(outline, bank, rng))
    return augment_by_interchange(stitched, bank, rng, cfg.interchange_factor)


# --- splits --------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    mode: Literal["seen", "unseen"]
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    held_out: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        data = {
            "mode": self.mode,
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
        }
        if self.held_out:
            data["held_out"] = list(self.held_out)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SplitSpec":
        return cls(
            mode=data["mode"],
            train=tuple(data["train"]),
            val=tuple(data["val"]),
            test=tuple(data["test"]),
            held_out=tuple(data.get("held_out", ())),
        )


def save_splits(spec: SplitSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2), encoding="utf-8")


def load_splits(path: str | Path) -> SplitSpec:
    return SplitSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def make_splits(
    dialogs: list[Dialog],
    flowcharts: list[Flowchart],
    mode: Literal["seen", "unseen"],
    rng: random.Random,
) -> SplitSpec:
    """Seen mode: 66/17/17 per-flowchart partition. Unseen mode: disjoint
    flowchart groups, all dialogs of held-out charts go to test."""
    by_chart: dict[str, list[str]] = {c.id: [] for c in flowcharts}
    for dialog in dialogs:
        if dialog.flowchart_id not in by_chart:
            raise ValueError(f"dialog {dialog.dialog_id} references unknown chart")
        by_chart[dialog.flowchart_id].append(dialog.dialog_id)

    if mode == "seen":
        train: list[str] = []
        val: list[str] = []
        test: list[str] = []
        for chart_id in sorted(by_chart):
            ids = list(by_chart[chart_id])
            rng.shuffle(ids)
            n_train = int(len(ids) * 0.66)
            n_val = int(len(ids) * 0.17)
            train.extend(ids[:n_train])
            val.extend(ids[n_train : n_train + n_val])
            test.extend(ids[n_train + n_val :])
        return SplitSpec("seen", tuple(train), tuple(val), tuple(test))

    if len(by_chart) < 3:
        raise ValueError("unseen mode needs at least 3 flowcharts")
    chart_ids = sorted(by_chart)
    rng.shuffle(chart_ids)
    n_held = max(1, round(len(chart_ids) / 6))
    test_charts = chart_ids[:n_held]
    val_charts = chart_ids[n_held : 2 * n_held]
    train_charts = chart_ids[2 * n_held :]
    return SplitSpec(
        "unseen",
        train=tuple(d for c in train_charts for d in by_chart[c]),
        val=tuple(d for c in val_charts for d in by_chart[c]),
        test=tuple(d for c in test_charts for d in by_chart[c]),
        held_out=tuple(test_charts),
    )
