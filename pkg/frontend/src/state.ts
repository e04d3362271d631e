// Session state and its transitions. The server transcript is the single
// source of truth: rebuilding from GET /sessions/{id} must equal the state
// reached incrementally, so every transition below is a pure function.

import type {
  FlowchartGraph,
  Grounding,
  MessageReply,
  ServiceClient,
  TopkEntry,
  Transcript,
} from "./api.js";

export interface ChatMessage {
  speaker: "user" | "agent";
  text: string;
  grounding: Grounding | null;
}

export interface UiSessionState {
  sessionId: string;
  flowchart: FlowchartGraph;
  messages: ChatMessage[];
  /** node currently highlighted in the flowchart view */
  highlight: string | null;
  /** every node the highlight has visited, in order (no consecutive repeats) */
  highlightTrail: string[];
  topk: TopkEntry[];
  status: "active" | "closed";
  pending: boolean;
  error: string | null;
}

export function emptyState(sessionId: string, flowchart: FlowchartGraph): UiSessionState {
  return {
    sessionId,
    flowchart,
    messages: [],
    highlight: null,
    highlightTrail: [],
    topk: [],
    status: "active",
    pending: false,
    error: null,
  };
}

function childrenOf(graph: FlowchartGraph, node: string): string[] {
  return graph.edges.filter((e) => e.source === node).map((e) => e.target);
}

/** True when `to` is reachable from `from` by zero or more edge steps. A
 * multi-step move is a "skip" (evidence in the problem description let the
 * agent bypass questions). */
export function isValidHighlightMove(
  graph: FlowchartGraph,
  from: string | null,
  to: string,
): boolean {
  if (!(to in graph.nodes)) return false;
  const origin = from ?? graph.root;
  if (origin === to) return true;
  const queue = [...childrenOf(graph, origin)];
  const seen = new Set<string>();
  while (queue.length > 0) {
    const node = queue.shift()!;
    if (node === to) return true;
    if (seen.has(node)) continue;
    seen.add(node);
    queue.push(...childrenOf(graph, node));
  }
  return false;
}

function appendHighlight(state: UiSessionState, grounding: Grounding): {
  highlight: string | null;
  highlightTrail: string[];
  error: string | null;
} {
  if (grounding.kind === "faq") {
    // FAQ-grounded replies show a badge; the node highlight stays put
    return {
      highlight: state.highlight,
      highlightTrail: state.highlightTrail,
      error: null,
    };
  }
  const node = grounding.id;
  const valid = isValidHighlightMove(state.flowchart, state.highlight, node);
  const trail =
    state.highlightTrail[state.highlightTrail.length - 1] === node
      ? state.highlightTrail
      : [...state.highlightTrail, node];
  return {
    highlight: node,
    highlightTrail: trail,
    error: valid ? null : `grounded node ${node} is not reachable from ${state.highlight}`,
  };
}

/** Pure core of a message round trip: append the user bubble and the agent
 * reply, move the highlight, refresh the top-k panel. */
export function applyReply(
  state: UiSessionState,
  userText: string,
  reply: MessageReply,
): UiSessionState {
  const moved = appendHighlight(state, reply.doc);
  return {
    ...state,
    messages: [
      ...state.messages,
      { speaker: "user", text: userText, grounding: null },
      { speaker: "agent", text: reply.agent_text, grounding: reply.doc },
    ],
    highlight: moved.highlight,
    highlightTrail: moved.highlightTrail,
    topk: reply.topk,
    pending: false,
    error: moved.error,
  };
}

export function rebuildFromTranscript(
  transcript: Transcript,
  flowchart: FlowchartGraph,
): UiSessionState {
  let state = emptyState(transcript.session_id, flowchart);
  for (const turn of transcript.turns) {
    state = applyReply(state, turn.user_text, {
      agent_text: turn.agent_text,
      doc: turn.doc,
      topk: turn.topk,
    });
  }
  return { ...state, status: transcript.status };
}

export async function startSession(
  client: ServiceClient,
  flowchartId: string,
): Promise<UiSessionState> {
  const graph = await client.getFlowchart(flowchartId);
  const created = await client.createSession(flowchartId);
  return emptyState(created.session_id, graph);
}

export async function sendMessage(
  client: ServiceClient,
  state: UiSessionState,
  text: string,
): Promise<UiSessionState> {
  if (state.pending) {
    return state; // one in-flight message at a time
  }
  try {
    const reply = await client.sendMessage(state.sessionId, text);
    return applyReply(state, text, reply);
  } catch (err) {
    // surface the failure inline; the transcript stays intact
    const message = err instanceof Error ? err.message : String(err);
    return { ...state, pending: false, error: message };
  }
}

export async function reloadSession(
  client: ServiceClient,
  sessionId: string,
): Promise<UiSessionState> {
  const transcript = await client.getSession(sessionId);
  const graph = await client.getFlowchart(transcript.flowchart);
  return rebuildFromTranscript(transcript, graph);
}
