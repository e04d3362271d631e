// Typed client for the troubleshooting session service. The UI talks to the
// backend exclusively through this interface, which also makes mocking in
// tests trivial.

export interface FlowchartSummary {
  id: string;
  title: string;
}

export interface FlowchartGraph {
  id: string;
  title: string;
  root: string;
  nodes: Record<string, { utterance: string }>;
  edges: { source: string; label: string; target: string }[];
}

export interface Grounding {
  kind: "node" | "faq";
  id: string;
}

export interface TopkEntry {
  doc_id: string;
  prob: number;
}

export interface MessageReply {
  agent_text: string;
  doc: Grounding;
  topk: TopkEntry[];
}

export interface TranscriptUtterance {
  speaker: "user" | "agent";
  text: string;
  grounding: Grounding | null;
}

export interface Transcript {
  session_id: string;
  flowchart: string;
  status: "active" | "closed";
  utterances: TranscriptUtterance[];
  turns: {
    user_text: string;
    agent_text: string;
    doc: Grounding;
    topk: TopkEntry[];
  }[];
}

export interface ServiceClient {
  listFlowcharts(): Promise<FlowchartSummary[]>;
  getFlowchart(id: string): Promise<FlowchartGraph>;
  createSession(flowchart: string): Promise<{ session_id: string }>;
  sendMessage(sessionId: string, text: string): Promise<MessageReply>;
  getSession(sessionId: string): Promise<Transcript>;
  closeSession(sessionId: string): Promise<void>;
}

export class ServiceError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function request<T>(fetchImpl: FetchLike, url: string, init?: RequestInit): Promise<T> {
  const response = await fetchImpl(url, {
    headers: { "content-type": "application/json" },
    ...init,
  });
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = (await response.json()) as { detail?: string };
      if (body.detail) detail = body.detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ServiceError(response.status, detail);
  }
  return (await response.json()) as T;
}

export function httpClient(baseUrl: string, fetchImpl: FetchLike = fetch): ServiceClient {
  const base = baseUrl.replace(/\/$/, "");
  return {
    listFlowcharts: () => request(fetchImpl, `${base}/flowcharts`),
    getFlowchart: (id) => request(fetchImpl, `${base}/flowcharts/${encodeURIComponent(id)}`),
    createSession: (flowchart) =>
      request(fetchImpl, `${base}/sessions`, {
        method: "POST",
        body: JSON.stringify({ flowchart }),
      }),
    sendMessage: (sessionId, text) =>
      request(fetchImpl, `${base}/sessions/${encodeURIComponent(sessionId)}/message`, {
        method: "POST",
        body: JSON.stringify({ text }),
      }),
    getSession: (sessionId) =>
      request(fetchImpl, `${base}/sessions/${encodeURIComponent(sessionId)}`),
    closeSession: async (sessionId) => {
      await request(fetchImpl, `${base}/sessions/${encodeURIComponent(sessionId)}`, {
        method: "DELETE",
      });
    },
  };
}
