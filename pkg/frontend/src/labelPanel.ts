/** Label-entry helpers: length/maturity validation and position-order
 * traversal for rapid keyboard-driven labelling. */

import type { BoxAnnotation } from "./api.js";

export interface LengthResult {
  ok: boolean;
  value?: number;
  error?: string;
}

/** Lengths are whole millimetres, at least 1. */
export function validateLength(text: string): LengthResult {
  const trimmed = text.trim();
  if (trimmed === "") return { ok: false, error: "length is required" };
  if (!/^\d+$/.test(trimmed)) return { ok: false, error: "length must be a whole number of millimetres" };
  const value = parseInt(trimmed, 10);
  if (value < 1) return { ok: false, error: "length must be at least 1 mm" };
  return { ok: true, value };
}

export function validateMaturity(token: string, taxonomy: string[]): LengthResult & { token?: string } {
  const t = token.trim();
  if (t === "") return { ok: false, error: "maturity is required" };
  if (!taxonomy.includes(t)) return { ok: false, error: `unknown maturity stage ${t}` };
  return { ok: true, token: t } as LengthResult & { token: string };
}

/** Specimen traversal order is the position index order. */
export function orderedIndices(boxes: BoxAnnotation[]): number[] {
  return boxes.map((b) => b.index).sort((a, b) => a - b);
}

/** Next/previous specimen in index order, wrapping at the ends. */
export function step(boxes: BoxAnnotation[], current: number | null,
                     direction: 1 | -1): number | null {
  const order = orderedIndices(boxes);
  if (!order.length) return null;
  if (current === null) return order[0];
  const at = order.indexOf(current);
  if (at === -1) return order[0];
  return order[(at + direction + order.length) % order.length];
}
