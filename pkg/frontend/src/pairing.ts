/** Side-by-side pairing view logic: index-aligned highlighting between the
 * two views of the same physical board. */

import type { AnnotationDoc, BoxAnnotation } from "./api.js";

/** Selecting index N on one view highlights index N on the other. */
export function alignedBox(selected: number | null,
                           otherBoxes: BoxAnnotation[]): BoxAnnotation | null {
  if (selected === null) return null;
  return otherBoxes.find((b) => b.index === selected) ?? null;
}

export function canConfirmPair(a: string | null, b: string | null): boolean {
  return !!a && !!b && a !== b;
}

/** Boards already mutually paired need no confirm action. */
export function isPaired(docA: AnnotationDoc, docB: AnnotationDoc): boolean {
  return docA.pair === docB.board && docB.pair === docA.board;
}

/** Indices present on one view but missing on the other: shown as gaps. */
export function unmatchedIndices(a: BoxAnnotation[], b: BoxAnnotation[]): number[] {
  const inB = new Set(b.map((x) => x.index));
  return a.map((x) => x.index).filter((i) => !inB.has(i)).sort((p, q) => p - q);
}
