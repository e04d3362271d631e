// DOM rendering. Rendering is a pure function of UiSessionState: the whole
// view re-renders per update, which keeps reload-from-server trivially
// consistent with incremental updates.

import type { UiSessionState } from "./state.js";
import { layoutTree } from "./layout.js";

const SVG_NS = "http://www.w3.org/2000/svg";
const NODE_W = 130;
const NODE_H = 44;

export function renderMessages(container: HTMLElement, state: UiSessionState): void {
  container.replaceChildren();
  for (const message of state.messages) {
    const bubble = document.createElement("div");
    bubble.className = `bubble ${message.speaker}`;
    const text = document.createElement("div");
    text.className = "text";
    text.textContent = message.text;
    bubble.appendChild(text);
    if (message.grounding) {
      const badge = document.createElement("span");
      badge.className = `badge ${message.grounding.kind}`;
      badge.textContent =
        message.grounding.kind === "faq"
          ? `FAQ #${message.grounding.id}`
          : `node ${message.grounding.id}`;
      bubble.appendChild(badge);
    }
    container.appendChild(bubble);
  }
  if (state.error) {
    const err = document.createElement("div");
    err.className = "bubble error";
    err.textContent = state.error;
    container.appendChild(err);
  }
  container.scrollTop = container.scrollHeight;
}

export function renderTopk(container: HTMLElement, state: UiSessionState): void {
  container.replaceChildren();
  const heading = document.createElement("h3");
  heading.textContent = "retrieval candidates";
  container.appendChild(heading);
  for (const entry of state.topk) {
    const row = document.createElement("div");
    row.className = "topk-row";
    const bar = document.createElement("div");
    bar.className = "topk-bar";
    bar.style.width = `${Math.round(entry.prob * 100)}%`;
    const label = document.createElement("span");
    label.textContent = `${entry.doc_id}  ${(entry.prob * 100).toFixed(1)}%`;
    row.append(bar, label);
    container.appendChild(row);
  }
}

export function renderFlowchart(svg: SVGSVGElement, state: UiSessionState): void {
  svg.replaceChildren();
  const graph = state.flowchart;
  const positions = layoutTree(graph);
  let maxX = 0;
  let maxY = 0;
  for (const pos of positions.values()) {
    maxX = Math.max(maxX, pos.x);
    maxY = Math.max(maxY, pos.y);
  }
  svg.setAttribute("viewBox", `-80 -30 ${maxX + NODE_W + 60} ${maxY + NODE_H + 60}`);

  for (const edge of graph.edges) {
    const from = positions.get(edge.source);
    const to = positions.get(edge.target);
    if (!from || !to) continue;
    const line = document.createElementNS(SVG_NS, "line");
    line.setAttribute("x1", String(from.x + NODE_W / 2));
    line.setAttribute("y1", String(from.y + NODE_H));
    line.setAttribute("x2", String(to.x + NODE_W / 2));
    line.setAttribute("y2", String(to.y));
    line.setAttribute("class", "edge");
    svg.appendChild(line);
    const label = document.createElementNS(SVG_NS, "text");
    label.setAttribute("x", String((from.x + to.x) / 2 + NODE_W / 2));
    label.setAttribute("y", String((from.y + NODE_H + to.y) / 2));
    label.setAttribute("class", "edge-label");
    label.textContent = edge.label;
    svg.appendChild(label);
  }

  for (const [id, pos] of positions) {
    const group = document.createElementNS(SVG_NS, "g");
    const visited = state.highlightTrail.includes(id);
    const classes = ["node"];
    if (id === state.highlight) classes.push("highlight");
    else if (visited) classes.push("visited");
    group.setAttribute("class", classes.join(" "));
    group.setAttribute("data-node", id);

    const rect = document.createElementNS(SVG_NS, "rect");
    rect.setAttribute("x", String(pos.x));
    rect.setAttribute("y", String(pos.y));
    rect.setAttribute("width", String(NODE_W));
    rect.setAttribute("height", String(NODE_H));
    rect.setAttribute("rx", "8");
    group.appendChild(rect);

    const text = document.createElementNS(SVG_NS, "text");
    text.setAttribute("x", String(pos.x + NODE_W / 2));
    text.setAttribute("y", String(pos.y + NODE_H / 2 + 4));
    text.setAttribute("class", "node-label");
    text.textContent = id;
    const utterance = graph.nodes[id]?.utterance ?? "";
    const title = document.createElementNS(SVG_NS, "title");
    title.textContent = utterance;
    group.appendChild(title);
    group.appendChild(text);
    svg.appendChild(group);
  }
}
