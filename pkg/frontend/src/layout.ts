// Layered tree layout: depth picks the row, leaves are placed left to right
// and parents sit centered above their children. The toy charts are small,
// so no width balancing beyond that is needed.

import type { FlowchartGraph } from "./api.js";

export interface NodePosition {
  x: number;
  y: number;
}

export interface LayoutOptions {
  levelHeight: number;
  leafSpacing: number;
}

const DEFAULTS: LayoutOptions = { levelHeight: 90, leafSpacing: 150 };

export function layoutTree(
  graph: FlowchartGraph,
  options: Partial<LayoutOptions> = {},
): Map<string, NodePosition> {
  const { levelHeight, leafSpacing } = { ...DEFAULTS, ...options };
  const children = new Map<string, string[]>();
  for (const id of Object.keys(graph.nodes)) children.set(id, []);
  for (const edge of [...graph.edges].sort((a, b) => a.label.localeCompare(b.label))) {
    children.get(edge.source)?.push(edge.target);
  }

  const positions = new Map<string, NodePosition>();
  let nextLeafX = 0;

  const place = (node: string, depth: number): number => {
    const kids = children.get(node) ?? [];
    let x: number;
    if (kids.length === 0) {
      x = nextLeafX;
      nextLeafX += leafSpacing;
    } else {
      const xs = kids.map((k) => place(k, depth + 1));
      x = (Math.min(...xs) + Math.max(...xs)) / 2;
    }
    positions.set(node, { x, y: depth * levelHeight });
    return x;
  };

  place(graph.root, 0);
  return positions;
}
