import { httpClient } from "./api.js";
import { renderFlowchart, renderMessages, renderTopk } from "./render.js";
import {
  reloadSession,
  sendMessage,
  startSession,
  type UiSessionState,
} from "./state.js";

const SESSION_KEY = "flowrag-session-id";

function el<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (!found) throw new Error(`missing element #${id}`);
  return found as T;
}

async function boot(): Promise<void> {
  const base = new URLSearchParams(location.search).get("api") ?? "";
  const client = httpClient(base);
  const chartSelect = el<HTMLSelectElement>("chart-select");
  const messagesPane = el<HTMLElement>("messages");
  const topkPane = el<HTMLElement>("topk");
  const input = el<HTMLInputElement>("composer-input");
  const sendButton = el<HTMLButtonElement>("composer-send");
  const newButton = el<HTMLButtonElement>("new-session");
  const svg = el<HTMLElement>("flowchart") as unknown as SVGSVGElement;
  const banner = el<HTMLElement>("banner");

  let state: UiSessionState | null = null;

  const paint = () => {
    if (!state) return;
    renderMessages(messagesPane, state);
    renderTopk(topkPane, state);
    renderFlowchart(svg, state);
    input.disabled = state.pending || state.status === "closed";
    sendButton.disabled = input.disabled;
  };

  const fresh = async (chartId: string) => {
    state = await startSession(client, chartId);
    sessionStorage.setItem(SESSION_KEY, state.sessionId);
    paint();
  };

  try {
    const charts = await client.listFlowcharts();
    chartSelect.replaceChildren(
      ...charts.map((c) => {
        const option = document.createElement("option");
        option.value = c.id;
        option.textContent = c.title;
        return option;
      }),
    );
    banner.hidden = true;

    const existing = sessionStorage.getItem(SESSION_KEY);
    if (existing) {
      try {
        state = await reloadSession(client, existing);
        chartSelect.value = state.flowchart.id;
        paint();
      } catch {
        sessionStorage.removeItem(SESSION_KEY);
      }
    }
    if (!state && charts.length > 0) {
      await fresh(charts[0]!.id);
    }
  } catch (err) {
    banner.hidden = false;
    banner.textContent = `service unreachable: ${err instanceof Error ? err.message : err}. retry?`;
    banner.onclick = () => location.reload();
    return;
  }

  newButton.addEventListener("click", () => void fresh(chartSelect.value));
  chartSelect.addEventListener("change", () => void fresh(chartSelect.value));

  const submit = async () => {
    const text = input.value.trim();
    if (!text || !state || state.pending) return;
    input.value = "";
    state = { ...state, pending: true };
    paint();
    state = await sendMessage(client, { ...state, pending: false }, text);
    paint();
  };
  sendButton.addEventListener("click", () => void submit());
  input.addEventListener("keydown", (event) => {
    if (event.key === "Enter") void submit();
  });
}

void boot();
