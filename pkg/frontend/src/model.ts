/** Board view-model: staged edits over the last acknowledged server
 * document. Reducers are pure so every transition is unit-testable; edits
 * stay local (and undoable) until save, and a stale save surfaces the
 * server's current document instead of overwriting it. */

import type { AnnotationDoc, BoxAnnotation, LabelEntry } from "./api.js";

export interface ViewState {
  board: string;
  /** Last acknowledged server document; boxes rendered from staged copies. */
  serverDoc: AnnotationDoc;
  revision: number;
  boxes: BoxAnnotation[];
  labels: Record<string, LabelEntry>;
  pair: string | null;
  selected: number | null;
  dirty: boolean;
  conflict: AnnotationDoc | null;
  undoStack: { boxes: BoxAnnotation[]; labels: Record<string, LabelEntry> }[];
}

const cloneBoxes = (boxes: BoxAnnotation[]) => boxes.map((b) => ({ ...b, bbox: [...b.bbox] as BoxAnnotation["bbox"] }));
const cloneLabels = (labels: Record<string, LabelEntry>) =>
  Object.fromEntries(Object.entries(labels).map(([k, v]) => [k, { ...v }]));

export function load(doc: AnnotationDoc): ViewState {
  return {
    board: doc.board,
    serverDoc: doc,
    revision: doc.revision,
    boxes: cloneBoxes(doc.boxes),
    labels: cloneLabels(doc.labels),
    pair: doc.pair,
    selected: doc.boxes.length ? doc.boxes[0].index : null,
    dirty: false,
    conflict: null,
    undoStack: [],
  };
}

function pushUndo(state: ViewState): ViewState {
  return {
    ...state,
    undoStack: [...state.undoStack,
                { boxes: cloneBoxes(state.boxes), labels: cloneLabels(state.labels) }],
  };
}

export function select(state: ViewState, index: number | null): ViewState {
  return { ...state, selected: index };
}

/** Stage a bbox change; the edit is human provenance from now on. */
export function stageBox(state: ViewState, index: number,
                         bbox: BoxAnnotation["bbox"]): ViewState {
  const next = pushUndo(state);
  return {
    ...next,
    boxes: next.boxes.map((b) =>
      b.index === index
        ? { index: b.index, bbox: [...bbox] as BoxAnnotation["bbox"], provenance: "human" }
        : b),
    dirty: true,
  };
}

export function addBox(state: ViewState, bbox: BoxAnnotation["bbox"]): ViewState {
  const used = new Set(state.boxes.map((b) => b.index));
  let index = 1;
  while (used.has(index)) index += 1;
  const next = pushUndo(state);
  return {
    ...next,
    boxes: [...next.boxes, { index, bbox: [...bbox] as BoxAnnotation["bbox"], provenance: "human" }]
      .sort((a, b) => a.index - b.index),
    selected: index,
    dirty: true,
  };
}

export function deleteBox(state: ViewState, index: number): ViewState {
  const next = pushUndo(state);
  const labels = cloneLabels(next.labels);
  delete labels[String(index)];
  const boxes = next.boxes.filter((b) => b.index !== index);
  return {
    ...next,
    boxes,
    labels,
    selected: boxes.length ? boxes[0].index : null,
    dirty: true,
  };
}

export function stageLabel(state: ViewState, index: number,
                           entry: { length_mm: number | null; maturity: string | null }): ViewState {
  const next = pushUndo(state);
  return {
    ...next,
    labels: { ...next.labels, [String(index)]: { ...entry, provenance: "human" } },
    dirty: true,
  };
}

/** Revert the most recent staged edit; no-op once everything is saved. */
export function undo(state: ViewState): ViewState {
  const stack = state.undoStack;
  if (!stack.length) return state;
  const last = stack[stack.length - 1];
  return {
    ...state,
    boxes: cloneBoxes(last.boxes),
    labels: cloneLabels(last.labels),
    undoStack: stack.slice(0, -1),
    dirty: stack.length > 1 || state.dirty,
  };
}

/** The server acknowledged our save (or detect/pair bumped the doc). */
export function applySaved(state: ViewState, doc: AnnotationDoc): ViewState {
  return { ...load(doc), selected: state.selected };
}

/** A save was rejected: keep local edits visible, surface the server doc. */
export function applyConflict(state: ViewState, current: AnnotationDoc): ViewState {
  return { ...state, conflict: current };
}

/** Reload-and-merge after a conflict: adopt the server revision, keep
 * nothing staged (the user re-applies what they still want). */
export function resolveConflictReload(state: ViewState): ViewState {
  if (!state.conflict) return state;
  return applySaved(state, state.conflict);
}

export function savePayload(state: ViewState) {
  return {
    revision: state.revision,
    boxes: state.boxes,
    labels: state.labels,
    pair: state.pair,
  };
}

export function unsavedBadge(state: ViewState): string | null {
  if (state.conflict) return "conflict";
  return state.dirty ? "unsaved edits" : null;
}
