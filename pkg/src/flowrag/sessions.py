"""Live troubleshooting sessions with append-only event-log persistence.

Every store mutation appends one JSON line; replaying the log reconstructs
the store exactly. A corrupted line halts replay at the last valid entry and
the report says where.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from .dialog import DialogHistory, Utterance

SessionStatus = Literal["active", "closed"]


class SessionError(KeyError):
    pass


class SessionClosedError(ValueError):
    pass


@dataclass
class Turn:
    user_text: str
    agent_text: str
    doc_id: str
    topk: list[tuple[str, float]]


@dataclass
class Session:
    session_id: str
    flowchart_id: str
    status: SessionStatus = "active"
    turns: list[Turn] = field(default_factory=list)
    created_at: float = 0.0
    updated_at: float = 0.0

    def history_with(self, user_text: str) -> DialogHistory:
        """History ending in the incoming user utterance; alternation is
        guaranteed because turns store complete user/agent pairs."""
        utts: list[Utterance] = []
        for turn in self.turns:
            utts.append(Utterance("user", turn.user_text))
            utts.append(Utterance("agent", turn.agent_text))
        utts.append(Utterance("user", user_text))
        return DialogHistory(tuple(utts))

    def transcript(self) -> list[Utterance]:
        utts: list[Utterance] = []
        for turn in self.turns:
            utts.append(Utterance("user", turn.user_text))
            utts.append(Utterance("agent", turn.agent_text))
        return utts


@dataclass
class ReplayReport:
    events_applied: int
    corrupt_line: int | None = None
    error: str | None = None


class EventLog:
    """Newline-delimited JSON event appender."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, event: dict) -> None:
        if self.path is None:
            return
        line = json.dumps(event, ensure_ascii=False)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    @staticmethod
    def read(path: str | Path) -> tuple[list[dict], ReplayReport]:
        events: list[dict] = []
        path = Path(path)
        if not path.exists():
            return events, ReplayReport(0)
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    event = json.loads(line)
                except json.JSONDecodeError as exc:
                    return events, ReplayReport(len(events), line_no, str(exc))
                events.append(event)
        return events, ReplayReport(len(events))


class SessionStore:
    """In-memory session map; mutations are serialized and journaled."""

    def __init__(self, log: EventLog | None = None, clock=time.time):
        self.sessions: dict[str, Session] = {}
        self.log = log or EventLog(None)
        self.clock = clock
        self._lock = threading.Lock()

    def create(self, flowchart_id: str, session_id: str | None = None) -> Session:
        with self._lock:
            sid = session_id or uuid.uuid4().hex
            now = self.clock()
            session = Session(sid, flowchart_id, created_at=now, updated_at=now)
            self.sessions[sid] = session
            self.log.append(
                {"event": "create", "session_id": sid, "flowchart": flowchart_id, "ts": now}
            )
            return session

    def get(self, session_id: str) -> Session:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise SessionError(f"unknown session {session_id!r}") from None

    def require_active(self, session_id: str) -> Session:
        session = self.get(session_id)
        if session.status != "active":
            raise SessionClosedError(f"session {session_id!r} is closed")
        return session

    def add_turn(self, session_id: str, turn: Turn) -> Session:
        with self._lock:
            session = self.require_active(session_id)
            session.turns.append(turn)
            session.updated_at = self.clock()
            self.log.append(
                {
                    "event": "turn",
                    "session_id": session_id,
                    "user_text": turn.user_text,
                    "agent_text": turn.agent_text,
                    "doc_id": turn.doc_id,
                    "topk": [[doc_id, prob] for doc_id, prob in turn.topk],
                    "ts": session.updated_at,
                }
            )
            return session

    def close(self, session_id: str) -> Session:
        with self._lock:
            session = self.require_active(session_id)
            session.status = "closed"
            session.updated_at = self.clock()
            self.log.append(
                {"event": "close", "session_id": session_id, "ts": session.updated_at}
            )
            return session

    @classmethod
    def replay(cls, path: str | Path, log: EventLog | None = None) -> tuple["SessionStore", ReplayReport]:
        """Rebuild a store from its event log; halts at the first corrupt
        entry and reports the line."""
        store = cls(log=log)
        events, report = EventLog.read(path)
        for event in events:
            kind = event.get("event")
            if kind == "create":
                session = Session(
                    event["session_id"],
                    event["flowchart"],
                    created_at=event["ts"],
                    updated_at=event["ts"],
                )
                store.sessions[session.session_id] = session
            elif kind == "turn":
                session = store.sessions[event["session_id"]]
                session.turns.append(
                    Turn(
                        event["user_text"],
                        event["agent_text"],
                        event["doc_id"],
                        [(d, p) for d, p in event["topk"]],
                    )
                )
                session.updated_at = event["ts"]
            elif kind == "close":
                session = store.sessions[event["session_id"]]
                session.status = "closed"
                session.updated_at = event["ts"]
        return store, report
