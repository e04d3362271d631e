"""Flowchart and FAQ loading, path enumeration and document compilation.

A flowchart is a rooted tree: nodes carry agent utterances (questions at
internal nodes, solution statements at terminals) and edges carry the user
answers that select a branch. Flowcharts and FAQ entries compile into a flat
set of key-value documents used by the retriever and generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Literal


class FlowchartError(ValueError):
    """Base error for flowchart parsing/validation."""


class FlowchartParseError(FlowchartError):
    """Raised when the raw flowchart or FAQ content cannot be parsed."""


def normalize_label(label: str) -> str:
    return label.strip().lower()


@dataclass(frozen=True)
class Flowchart:
    id: str
    title: str
    root: str
    nodes: dict[str, str]
    edges: dict[tuple[str, str], str]
    # derived, filled in __post_init__
    _children: dict[str, list[tuple[str, str]]] = field(init=False, repr=False)
    _parent: dict[str, tuple[str, str]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        children: dict[str, list[tuple[str, str]]] = {n: [] for n in self.nodes}
        parent: dict[str, tuple[str, str]] = {}
        for (src, label), dst in self.edges.items():
            children[src].append((label, dst))
            parent[dst] = (src, label)
        for entries in children.values():
            entries.sort()
        object.__setattr__(self, "_children", children)
        object.__setattr__(self, "_parent", parent)

    def children(self, node_id: str) -> list[tuple[str, str]]:
        """Outgoing (label, child) pairs in lexicographic label order."""
        return list(self._children[node_id])

    def parent_of(self, node_id: str) -> tuple[str, str] | None:
        """(parent, label) of the incoming edge, or None for the root."""
        return self._parent.get(node_id)

    def is_terminal(self, node_id: str) -> bool:
        return not self._children[node_id]

    def terminals(self) -> list[str]:
        return [n for n in self.iter_nodes_preorder() if self.is_terminal(n)]

    def depth(self, node_id: str) -> int:
        depth = 0
        cur = node_id
        while (up := self._parent.get(cur)) is not None:
            cur = up[0]
            depth += 1
        return depth

    def utterance(self, node_id: str) -> str:
        return self.nodes[node_id]

    def iter_nodes_preorder(self) -> Iterable[str]:
        """Nodes in DFS pre-order, children visited in label order."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            for _, child in reversed(self._children[node]):
                stack.append(child)

    def key_for(self, node_id: str) -> tuple[str, ...]:
        """Alternating question/answer sequence from the root down to the
        node's incoming edge. The node's own utterance is excluded: the key
        mirrors what the dialog history can contain before the agent says it.
        The root therefore has an empty key."""
        parts: list[str] = []
        cur = node_id
        while (up := self._parent.get(cur)) is not None:
            parent_id, label = up
            parts.append(label)
            parts.append(self.nodes[parent_id])
            cur = parent_id
        parts.reverse()
        return tuple(parts)


@dataclass(frozen=True)
class FaqEntry:
    question: str
    answer: str


@dataclass(frozen=True)
class FaqSet:
    flowchart_id: str
    entries: tuple[FaqEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def empty(cls, flowchart_id: str) -> "FaqSet":
        return cls(flowchart_id, ())


DocumentKind = Literal["node", "faq"]


@dataclass(frozen=True)
class Document:
    doc_id: str
    kind: DocumentKind
    source_id: str
    key: tuple[str, ...]
    value: str


@dataclass(frozen=True)
class FlowPath:
    """Root-to-terminal walk: (node, chosen answer) steps plus the terminal,
    which carries no outgoing answer."""

    steps: tuple[tuple[str, str], ...]
    terminal: str

    def node_ids(self) -> list[str]:
        return [n for n, _ in self.steps] + [self.terminal]

    def labels(self) -> list[str]:
        return [label for _, label in self.steps]

    def __len__(self) -> int:
        return len(self.steps)

    def validate(self, chart: Flowchart) -> None:
        cur = chart.root
        for node_id, label in self.steps:
            if node_id != cur:
                raise FlowchartError(f"path step {node_id!r} does not match walk at {cur!r}")
            dst = chart.edges.get((node_id, label))
            if dst is None:
                raise FlowchartError(f"no edge {label!r} out of {node_id!r}")
            cur = dst
        if cur != self.terminal:
            raise FlowchartError(f"path terminal {self.terminal!r} does not match walk end {cur!r}")
        if not chart.is_terminal(cur):
            raise FlowchartError(f"path ends at non-terminal node {cur!r}")


def _parse_raw(raw: str | bytes | dict, what: str) -> dict:
    if isinstance(raw, (str, bytes)):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise FlowchartParseError(f"invalid {what} file: {exc}") from exc
    if not isinstance(raw, dict):
        raise FlowchartParseError(f"{what} file must contain an object")
    return raw


def load_flowchart(raw: str | bytes | dict) -> Flowchart:
    """Parse and validate flowchart file content.

    Expected shape: {"name": str, "root": str, "nodes": {id: {"utterance": str}},
    "edges": {id: {label: id}}}.
    """
    data = _parse_raw(raw, "flowchart")
    for field_name in ("name", "root", "nodes", "edges"):
        if field_name not in data:
            raise FlowchartParseError(f"flowchart file missing {field_name!r}")
    name = data["name"]
    root = data["root"]
    if not isinstance(name, str) or not name.strip():
        raise FlowchartParseError("flowchart name must be a non-empty string")

    nodes: dict[str, str] = {}
    if not isinstance(data["nodes"], dict) or not data["nodes"]:
        raise FlowchartParseError("flowchart nodes must be a non-empty object")
    for node_id, node in data["nodes"].items():
        if not isinstance(node, dict) or not isinstance(node.get("utterance"), str):
            raise FlowchartParseError(f"node {node_id!r} must be an object with an 'utterance' string")
        utterance = node["utterance"].strip()
        if not utterance:
            raise FlowchartParseError(f"node {node_id!r} has an empty utterance")
        nodes[node_id] = utterance

    if root not in nodes:
        raise FlowchartError(f"missing root: {root!r} is not a node")

    edges: dict[tuple[str, str], str] = {}
    if not isinstance(data["edges"], dict):
        raise FlowchartParseError("flowchart edges must be an object")
    for src, out in data["edges"].items():
        if src not in nodes:
            raise FlowchartError(f"edge source {src!r} is not a node")
        if not isinstance(out, dict):
            raise FlowchartParseError(f"edges for {src!r} must be an object")
        for label, dst in out.items():
            norm = normalize_label(label)
            if not norm:
                raise FlowchartError(f"empty edge label out of {src!r}")
            if dst not in nodes:
                raise FlowchartError(f"edge target {dst!r} is not a node")
            if (src, norm) in edges:
                raise FlowchartError(f"duplicate edge label {norm!r} out of {src!r}")
            edges[(src, norm)] = dst

    # structural validation: rooted tree, fully reachable
    incoming: dict[str, int] = {n: 0 for n in nodes}
    for (_, _), dst in edges.items():
        incoming[dst] += 1
    if incoming[root] > 0:
        raise FlowchartError(f"cycle detected: root {root!r} has an incoming edge")
    for node_id, count in incoming.items():
        if count > 1:
            raise FlowchartError(
                f"node {node_id!r} has {count} parents; flowcharts must be trees"
            )
    chart = Flowchart(id=name, title=name, root=root, nodes=nodes, edges=edges)
    reached = set(chart.iter_nodes_preorder())
    if len(reached) != len(nodes):
        missing = sorted(set(nodes) - reached)
        raise FlowchartError(f"unreachable nodes: {', '.join(missing)}")
    return chart


def load_faqs(raw: str | bytes | dict) -> FaqSet:
    """Parse FAQ file content: {"flowchart": str, "faqs": [{"q": str, "a": str}]}."""
    data = _parse_raw(raw, "faq")
    if not isinstance(data.get("flowchart"), str):
        raise FlowchartParseError("faq file missing 'flowchart' id")
    entries = []
    if not isinstance(data.get("faqs"), list):
        raise FlowchartParseError("faq file missing 'faqs' list")
    for i, item in enumerate(data["faqs"]):
        if not isinstance(item, dict):
            raise FlowchartParseError(f"faq entry {i} must be an object")
        q, a = item.get("q"), item.get("a")
        if not isinstance(q, str) or not q.strip():
            raise FlowchartParseError(f"faq entry {i} has an empty question")
        if not isinstance(a, str) or not a.strip():
            raise FlowchartParseError(f"faq entry {i} has an empty answer")
        entries.append(FaqEntry(q.strip(), a.strip()))
    return FaqSet(data["flowchart"], tuple(entries))


def enumerate_paths(chart: Flowchart) -> list[FlowPath]:
    """Every root-to-terminal path exactly once, branches explored in
    lexicographic edge-label order."""
    paths: list[FlowPath] = []

    def walk(node: str, steps: list[tuple[str, str]]) -> None:
        kids = chart.children(node)
        if not kids:
            paths.append(FlowPath(tuple(steps), node))
            return
        for label, child in kids:
            steps.append((node, label))
            walk(child, steps)
            steps.pop()

    walk(chart.root, [])
    return paths


def node_doc_id(node_id: str) -> str:
    return f"node:{node_id}"


def faq_doc_id(index: int) -> str:
    return f"faq:{index}"


def parse_doc_id(doc_id: str) -> tuple[DocumentKind, str]:
    kind, _, source = doc_id.partition(":")
    if kind not in ("node", "faq") or not source:
        raise ValueError(f"malformed document id {doc_id!r}")
    return kind, source  # type: ignore[return-value]


def build_documents(chart: Flowchart, faqs: FaqSet) -> list[Document]:
    """Compile the retrieval domain: one document per flowchart node plus one
    per FAQ entry. Node keys are root-to-node utterance paths, FAQ keys are
    the bare question."""
    if faqs.flowchart_id != chart.id:
        raise FlowchartError(
            f"faq set belongs to {faqs.flowchart_id!r}, not {chart.id!r}"
        )
    docs = [
        Document(
            doc_id=node_doc_id(node_id),
            kind="node",
            source_id=node_id,
            key=chart.key_for(node_id),
            value=chart.utterance(node_id),
        )
        for node_id in chart.iter_nodes_preorder()
    ]
    docs.extend(
        Document(
            doc_id=faq_doc_id(i),
            kind="faq",
            source_id=str(i),
            key=(entry.question,),
            value=entry.answer,
        )
        for i, entry in enumerate(faqs.entries)
    )
    return docs
