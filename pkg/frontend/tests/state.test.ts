import { describe, expect, it } from "vitest";

import { ServiceError } from "../src/api.js";
import {
  applyReply,
  isValidHighlightMove,
  rebuildFromTranscript,
  reloadSession,
  sendMessage,
  startSession,
} from "../src/state.js";
import { CAR_GRAPH, MockService, type ScriptedReply } from "./mock.js";

const nodeReply = (id: string): ScriptedReply => ({
  agent_text: CAR_GRAPH.nodes[id]!.utterance,
  doc: { kind: "node", id },
});

const faqReply = (id: string): ScriptedReply => ({
  agent_text: `faq answer ${id}`,
  doc: { kind: "faq", id },
});

describe("startSession", () => {
  it("creates a session with the fetched graph", async () => {
    const client = new MockService();
    const state = await startSession(client, CAR_GRAPH.id);
    expect(state.sessionId).toBe("session-1");
    expect(Object.keys(state.flowchart.nodes)).toHaveLength(6);
    expect(state.messages).toHaveLength(0);
    expect(state.highlight).toBeNull();
  });

  it("unknown flowchart surfaces an error and creates nothing", async () => {
    const client = new MockService();
    await expect(startSession(client, "nope")).rejects.toThrow(ServiceError);
    await expect(client.getSession("session-1")).rejects.toThrow(/unknown session/);
  });
});

describe("sendMessage", () => {
  it("appends exactly one user and one agent bubble", async () => {
    const client = new MockService(CAR_GRAPH, [nodeReply("n0")]);
    let state = await startSession(client, CAR_GRAPH.id);
    state = await sendMessage(client, state, "my car will not start");
    expect(state.messages).toHaveLength(2);
    expect(state.messages[0]).toEqual({
      speaker: "user",
      text: "my car will not start",
      grounding: null,
    });
    expect(state.messages[1]!.speaker).toBe("agent");
    expect(state.messages[1]!.grounding).toEqual({ kind: "node", id: "n0" });
  });

  it("moves the highlight to the grounded node and fills the top-k panel", async () => {
    const client = new MockService(CAR_GRAPH, [nodeReply("n0"), nodeReply("n3")]);
    let state = await startSession(client, CAR_GRAPH.id);
    state = await sendMessage(client, state, "help");
    expect(state.highlight).toBe("n0");
    state = await sendMessage(client, state, "no");
    expect(state.highlight).toBe("n3");
    expect(state.highlightTrail).toEqual(["n0", "n3"]);
    expect(state.topk[0]!.doc_id).toBe("node:n3");
  });

  it("faq-grounded replies keep the node highlight and carry a faq badge", async () => {
    const client = new MockService(CAR_GRAPH, [nodeReply("n0"), faqReply("2"), nodeReply("n1")]);
    let state = await startSession(client, CAR_GRAPH.id);
    state = await sendMessage(client, state, "help");
    state = await sendMessage(client, state, "what does crank mean ?");
    expect(state.highlight).toBe("n0"); // unchanged
    expect(state.messages[3]!.grounding).toEqual({ kind: "faq", id: "2" });
    state = await sendMessage(client, state, "yes");
    expect(state.highlight).toBe("n1");
  });

  it("service errors surface inline without corrupting the transcript", async () => {
    const client = new MockService(CAR_GRAPH, [nodeReply("n0")]);
    let state = await startSession(client, CAR_GRAPH.id);
    state = await sendMessage(client, state, "help");
    const before = state.messages;
    state = await sendMessage(client, state, "again"); // script exhausted -> 400
    expect(state.error).toMatch(/exhausted/);
    expect(state.messages).toBe(before);
  });

  it("skip moves (multi-edge descents) validate; unreachable moves flag an error", () => {
    expect(isValidHighlightMove(CAR_GRAPH, null, "t1")).toBe(true); // skip from root
    expect(isValidHighlightMove(CAR_GRAPH, "n0", "t4")).toBe(true); // two-step skip
    expect(isValidHighlightMove(CAR_GRAPH, "n1", "n3")).toBe(false); // sibling jump
    expect(isValidHighlightMove(CAR_GRAPH, "n0", "missing")).toBe(false);

    const client = new MockService(CAR_GRAPH, []);
    void client;
    let state = {
      ...rebuildFromTranscript(
        {
          session_id: "s",
          flowchart: CAR_GRAPH.id,
          status: "active" as const,
          utterances: [],
          turns: [],
        },
        CAR_GRAPH,
      ),
    };
    state = applyReply(state, "hi", {
      agent_text: "x",
      doc: { kind: "node", id: "n1" },
      topk: [],
    });
    expect(state.error).toBeNull();
    state = applyReply(state, "hm", {
      agent_text: "y",
      doc: { kind: "node", id: "n3" },
      topk: [],
    });
    expect(state.error).toMatch(/not reachable/);
  });
});

describe("reload reconstructs state from the server transcript", () => {
  it("matches the incrementally built state exactly", async () => {
    const client = new MockService(CAR_GRAPH, [
      nodeReply("n0"),
      faqReply("1"),
      nodeReply("n1"),
      nodeReply("t2"),
    ]);
    let incremental = await startSession(client, CAR_GRAPH.id);
    for (const text of ["help", "what is cranking ?", "yes", "no"]) {
      incremental = await sendMessage(client, incremental, text);
    }
    const rebuilt = await reloadSession(client, incremental.sessionId);
    expect(rebuilt).toEqual(incremental);
  });

  it("rebuilds closed sessions with their status", async () => {
    const client = new MockService(CAR_GRAPH, [nodeReply("n0")]);
    const state = await startSession(client, CAR_GRAPH.id);
    await sendMessage(client, state, "help");
    await client.closeSession(state.sessionId);
    const rebuilt = await reloadSession(client, state.sessionId);
    expect(rebuilt.status).toBe("closed");
    expect(rebuilt.messages).toHaveLength(2);
  });
});

describe("highlight sequences over scripted sessions", () => {
  const walks: string[][] = [
    ["n0", "n1", "t1"],
    ["n0", "n3", "t4"],
    ["n1", "t2"], // skip straight to n1 (evidence in the problem description)
    ["t2"], // full skip to the solution
    ["n0", "n0", "n1", "t2", "t2"], // re-asks and closing recap repeat nodes
  ];

  it.each(walks.map((w) => [w.join(" -> "), w] as const))(
    "walk %s forms a valid traversal",
    async (_name, walk) => {
      const client = new MockService(
        CAR_GRAPH,
        walk.map((node) => nodeReply(node)),
      );
      let state = await startSession(client, CAR_GRAPH.id);
      for (const [i] of walk.entries()) {
        state = await sendMessage(client, state, `turn ${i}`);
        expect(state.error).toBeNull();
      }
      // the trail must replay as descent steps
      let cursor: string | null = null;
      for (const node of state.highlightTrail) {
        expect(isValidHighlightMove(CAR_GRAPH, cursor, node)).toBe(true);
        cursor = node;
      }
    },
  );
});
