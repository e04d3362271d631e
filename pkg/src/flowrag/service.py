"""HTTP session service for live troubleshooting.

The turn pipeline is exactly the offline one: retrieve the top document,
beam-decode a reply, record the turn. Models and the document index are
shared read-only across sessions; each session's state is guarded by the
store lock.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .datafiles import Knowledge
from .flowchart import parse_doc_id
from .generator import Generator
from .rag import RagConfig, decode
from .retriever import (
    DocumentIndex,
    HierarchicalRetriever,
    Retriever,
    build_index,
    retrieve_topk,
)
from .sessions import SessionClosedError, SessionError, SessionStore, Turn


@dataclass
class ChatEngine:
    knowledge: Knowledge
    retriever: Retriever | dict[str, Retriever]
    generator: Generator
    cfg: RagConfig
    store: SessionStore
    topk_panel: int = 5
    _indices: dict[str, DocumentIndex] = field(default_factory=dict)

    def retriever_for(self, chart_id: str) -> Retriever:
        if isinstance(self.retriever, dict):
            return self.retriever[chart_id]
        return self.retriever

    def _index_for(self, chart_id: str) -> DocumentIndex | None:
        retriever = self.retriever_for(chart_id)
        if not isinstance(retriever, HierarchicalRetriever):
            return None
        if chart_id not in self._indices:
            self._indices[chart_id] = build_index(
                retriever, self.knowledge.documents[chart_id]
            )
        return self._indices[chart_id]

    def reply(self, chart_id: str, history) -> tuple[str, str, list[tuple[str, float]]]:
        docs = self.knowledge.documents[chart_id]
        retriever = self.retriever_for(chart_id)
        index = self._index_for(chart_id)
        result = decode(history, docs, retriever, self.generator, self.cfg, index=index)
        panel = retrieve_topk(
            retriever, history, docs, min(self.topk_panel, len(docs)), index=index
        )
        topk = [(entry.doc_id, entry.prob) for entry in panel.ranked]
        return result.text, result.doc_id, topk


class CreateSessionRequest(BaseModel):
    flowchart: str


class MessageRequest(BaseModel):
    text: str


def _grounding_json(doc_id: str) -> dict:
    kind, source = parse_doc_id(doc_id)
    return {"kind": kind, "id": source}


def build_app(engine: ChatEngine) -> FastAPI:
    app = FastAPI(title="flowrag troubleshooting service")
    store = engine.store
    knowledge = engine.knowledge

    @app.get("/flowcharts")
    def list_flowcharts():
        return [
            {"id": chart.id, "title": chart.title}
            for chart in (knowledge.charts[cid] for cid in knowledge.chart_ids())
        ]

    @app.get("/flowcharts/{chart_id}")
    def get_flowchart(chart_id: str):
        chart = knowledge.charts.get(chart_id)
        if chart is None:
            raise HTTPException(404, f"unknown flowchart {chart_id!r}")
        return {
            "id": chart.id,
            "title": chart.title,
            "root": chart.root,
            "nodes": {nid: {"utterance": utt} for nid, utt in chart.nodes.items()},
            "edges": [
                {"source": src, "label": label, "target": dst}
                for (src, label), dst in sorted(chart.edges.items())
            ],
        }

    @app.post("/sessions", status_code=201)
    def create_session(req: CreateSessionRequest):
        if req.flowchart not in knowledge.charts:
            raise HTTPException(404, f"unknown flowchart {req.flowchart!r}")
        session = store.create(req.flowchart)
        return {"session_id": session.session_id, "flowchart": session.flowchart_id}

    @app.post("/sessions/{session_id}/message")
    def post_message(session_id: str, req: MessageRequest):
        text = req.text.strip()
        if not text:
            raise HTTPException(400, "empty message text")
        try:
            session = store.require_active(session_id)
        except SessionError:
            raise HTTPException(404, f"unknown session {session_id!r}")
        except SessionClosedError:
            raise HTTPException(409, f"session {session_id!r} is closed")
        history = session.history_with(text)
        agent_text, doc_id, topk = engine.reply(session.flowchart_id, history)
        store.add_turn(session_id, Turn(text, agent_text, doc_id, topk))
        return {
            "agent_text": agent_text,
            "doc": _grounding_json(doc_id),
            "topk": [{"doc_id": d, "prob": p} for d, p in topk],
        }

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        try:
            session = store.get(session_id)
        except SessionError:
            raise HTTPException(404, f"unknown session {session_id!r}")
        utterances = []
        for turn in session.turns:
            utterances.append({"speaker": "user", "text": turn.user_text, "grounding": None})
            utterances.append(
                {
                    "speaker": "agent",
                    "text": turn.agent_text,
                    "grounding": _grounding_json(turn.doc_id),
                }
            )
        return {
            "session_id": session.session_id,
            "flowchart": session.flowchart_id,
            "status": session.status,
            "utterances": utterances,
            "turns": [
                {
                    "user_text": t.user_text,
                    "agent_text": t.agent_text,
                    "doc": _grounding_json(t.doc_id),
                    "topk": [{"doc_id": d, "prob": p} for d, p in t.topk],
                }
                for t in session.turns
            ],
        }

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str):
        try:
            session = store.close(session_id)
        except SessionError:
            raise HTTPException(404, f"unknown session {session_id!r}")
        except SessionClosedError:
            raise HTTPException(409, f"session {session_id!r} is already closed")
        return {"session_id": session.session_id, "status": session.status}

    return app
