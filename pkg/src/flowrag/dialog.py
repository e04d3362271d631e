"""Dialog data model and corpus serialization.

Dialogs alternate user/agent utterances starting with the user. Agent
utterances in synthesized dialogs always carry a grounding label (the
flowchart node or FAQ they realize); user utterances never do.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Literal

from .flowchart import (
    Flowchart,
    FlowPath,
    faq_doc_id,
    node_doc_id,
)

Speaker = Literal["user", "agent"]
GroundingKind = Literal["node", "faq"]
DigressionKind = Literal["user", "agent"]


@dataclass(frozen=True)
class Grounding:
    kind: GroundingKind
    id: str

    def doc_id(self) -> str:
        if self.kind == "node":
            return node_doc_id(self.id)
        return faq_doc_id(int(self.id))


@dataclass(frozen=True)
class Utterance:
    speaker: Speaker
    text: str
    grounding: Grounding | None = None
    # provenance, set by the synthesizer: paraphrase component key and, for
    # utterances inside a digression, which flavour of digression it was
    component: str | None = None
    digression: DigressionKind | None = None


class DialogError(ValueError):
    pass


@dataclass(frozen=True)
class Dialog:
    dialog_id: str
    flowchart_id: str
    utterances: tuple[Utterance, ...]
    path: FlowPath | None = None
    # the synthesizer's plan, kept for interchange augmentation
    outline: object | None = field(default=None, compare=False, repr=False)

    def agent_turns(self) -> Iterator[tuple["DialogHistory", Utterance]]:
        """(history, agent utterance) pairs, one per agent turn."""
        for i, utt in enumerate(self.utterances):
            if utt.speaker == "agent":
                yield DialogHistory(self.utterances[:i]), utt


@dataclass(frozen=True)
class DialogHistory:
    utterances: tuple[Utterance, ...]

    def __post_init__(self) -> None:
        if not self.utterances:
            raise DialogError("dialog history must not be empty")
        if self.utterances[-1].speaker != "user":
            raise DialogError("dialog history must end with a user utterance")

    def texts(self) -> list[str]:
        return [u.text for u in self.utterances]

    def extended(self, agent_text: str, user_text: str) -> "DialogHistory":
        return DialogHistory(
            self.utterances
            + (Utterance("agent", agent_text), Utterance("user", user_text))
        )

    @classmethod
    def single(cls, user_text: str) -> "DialogHistory":
        return cls((Utterance("user", user_text),))


def validate_dialog(dialog: Dialog, require_grounding: bool = True) -> None:
    """Structural checks: alternation, even turn count, grounding discipline."""
    utts = dialog.utterances
    if not utts:
        raise DialogError(f"{dialog.dialog_id}: empty dialog")
    if len(utts) % 2 != 0:
        raise DialogError(f"{dialog.dialog_id}: odd utterance count {len(utts)}")
    for i, utt in enumerate(utts):
        expected: Speaker = "user" if i % 2 == 0 else "agent"
        if utt.speaker != expected:
            raise DialogError(f"{dialog.dialog_id}: utterance {i} should be {expected}")
        if utt.speaker == "user" and utt.grounding is not None:
            raise DialogError(f"{dialog.dialog_id}: user utterance {i} carries grounding")
        if utt.speaker == "agent" and require_grounding and utt.grounding is None:
            raise DialogError(f"{dialog.dialog_id}: agent utterance {i} lacks grounding")
        if not utt.text.strip():
            raise DialogError(f"{dialog.dialog_id}: utterance {i} is empty")


def node_grounding_sequence(dialog: Dialog) -> list[str]:
    """Node ids grounding the agent turns, consecutive duplicates collapsed
    (the closing recap re-grounds on the terminal)."""
    seq: list[str] = []
    for utt in dialog.utterances:
        if utt.speaker != "agent" or utt.grounding is None:
            continue
        if utt.grounding.kind != "node":
            continue
        if not seq or seq[-1] != utt.grounding.id:
            seq.append(utt.grounding.id)
    return seq


def verify_dialog_grounding(dialog: Dialog, chart: Flowchart) -> FlowPath:
    """Check that the dialog's node groundings replay a root-to-terminal
    traversal of the chart, allowing a skipped prefix (evidence embedded in
    the problem description). Returns the full traversed path."""
    seq = node_grounding_sequence(dialog)
    if not seq:
        raise DialogError(f"{dialog.dialog_id}: no node-grounded agent utterances")
    terminal = seq[-1]
    if terminal not in chart.nodes or not chart.is_terminal(terminal):
        raise DialogError(f"{dialog.dialog_id}: last node grounding {terminal!r} is not a terminal")
    # the root-to-terminal walk is unique in a tree
    full_nodes: list[str] = []
    steps: list[tuple[str, str]] = []
    cur = terminal
    while (up := chart.parent_of(cur)) is not None:
        steps.append((up[0], up[1]))
        cur = up[0]
    steps.reverse()
    full_nodes = [n for n, _ in steps] + [terminal]
    skip = len(full_nodes) - len(seq)
    if skip < 0 or full_nodes[skip:] != seq:
        raise DialogError(
            f"{dialog.dialog_id}: groundings {seq} do not replay a suffix of {full_nodes}"
        )
    return FlowPath(tuple(steps), terminal)


# --- corpus files: one JSON record per line ---------------------------------


def _utterance_to_record(utt: Utterance) -> dict:
    record: dict = {"speaker": utt.speaker, "text": utt.text}
    record["grounding"] = (
        {"kind": utt.grounding.kind, "id": utt.grounding.id} if utt.grounding else None
    )
    if utt.component is not None:
        record["component"] = utt.component
    if utt.digression is not None:
        record["digression"] = utt.digression
    return record


def _utterance_from_record(record: dict) -> Utterance:
    grounding = record.get("grounding")
    return Utterance(
        speaker=record["speaker"],
        text=record["text"],
        grounding=Grounding(grounding["kind"], grounding["id"]) if grounding else None,
        component=record.get("component"),
        digression=record.get("digression"),
    )


def dialog_to_record(dialog: Dialog) -> dict:
    return {
        "dialog_id": dialog.dialog_id,
        "flowchart": dialog.flowchart_id,
        "utterances": [_utterance_to_record(u) for u in dialog.utterances],
    }


def dialog_from_record(record: dict) -> Dialog:
    return Dialog(
        dialog_id=record["dialog_id"],
        flowchart_id=record["flowchart"],
        utterances=tuple(_utterance_from_record(u) for u in record["utterances"]),
    )


def write_corpus(dialogs: Iterable[Dialog], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for dialog in dialogs:
            fh.write(json.dumps(dialog_to_record(dialog), ensure_ascii=False))
            fh.write("\n")


def load_corpus(path: str | Path) -> list[Dialog]:
    dialogs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DialogError(f"{path}:{line_no}: invalid corpus record: {exc}") from exc
            dialogs.append(dialog_from_record(record))
    return dialogs
