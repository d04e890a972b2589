/** DOM wiring for the annotation UI: board list, canvas box editor, label
 * panel, pairing view and export. State lives in the pure view-model; this
 * file only translates events and repaints. */

import { ApiClient, BoardInfo, ConflictError } from "./api.js";
import * as ed from "./boxEditor.js";
import * as vm from "./model.js";
import { step, validateLength, validateMaturity } from "./labelPanel.js";
import { alignedBox } from "./pairing.js";
import { COLORS, drawOverlay, toBoard } from "./render.js";

const api = new ApiClient("");
const $ = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;

const DISPLAY_SCALE = 0.5;

let boards: BoardInfo[] = [];
let state: vm.ViewState | null = null;
let pairState: vm.ViewState | null = null;
let taxonomy: string[] = [];
let boardSize = { width: 0, height: 0 };
let drag: { handle: ed.Handle; start: { x: number; y: number }; box: ed.Box } | null = null;
let createStart: { x: number; y: number } | null = null;

function setStatus(text: string, isError = false) {
  const el = $("status");
  el.textContent = text;
  el.className = isError ? "status error" : "status";
}

function repaintBadge() {
  if (!state) return;
  const badge = vm.unsavedBadge(state);
  $("badge").textContent = badge ?? "saved";
  $("badge").className = `badge ${badge ? (badge === "conflict" ? "conflict" : "dirty") : "clean"}`;
  ($("conflict-banner") as HTMLElement).style.display = state.conflict ? "block" : "none";
  $("lock-note").textContent =
    "single annotator per board: save often, conflicts prompt a reload";
}

async function refreshBoards() {
  boards = await api.listBoards();
  const list = $("board-list");
  list.innerHTML = "";
  for (const b of boards) {
    const li = document.createElement("li");
    li.textContent = `${b.board} (${b.view}, rev ${b.revision}${b.pair ? ", paired" : ""})`;
    li.onclick = () => openBoard(b.board);
    list.appendChild(li);
  }
}

async function openBoard(name: string) {
  const info = boards.find((b) => b.board === name);
  if (!info) return;
  boardSize = { width: info.width, height: info.height };
  const doc = await api.annotations(name);
  state = vm.load(doc);
  const img = $("board-img") as HTMLImageElement;
  img.src = api.imageUrl(name, DISPLAY_SCALE);
  img.onload = () => repaint();
  pairState = null;
  if (doc.pair) {
    pairState = vm.load(await api.annotations(doc.pair));
    ($("pair-img") as HTMLImageElement).src = api.imageUrl(doc.pair, DISPLAY_SCALE * 0.6);
  }
  $("board-title").textContent = name;
  repaint();
}

function repaint() {
  if (!state) return;
  const canvas = $("overlay") as HTMLCanvasElement;
  const img = $("board-img") as HTMLImageElement;
  canvas.width = img.width;
  canvas.height = img.height;
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const t = { scale: img.width / Math.max(boardSize.width, 1) };
  drawOverlay(ctx, state.boxes, state.selected, t);

  const sel = state.boxes.find((b) => b.index === state!.selected);
  const form = $("label-form") as HTMLElement;
  form.style.display = sel ? "block" : "none";
  if (sel) {
    const label = state.labels[String(sel.index)];
    ($("length-input") as HTMLInputElement).value =
      label?.length_mm != null ? String(label.length_mm) : "";
    ($("maturity-select") as HTMLSelectElement).value = label?.maturity ?? "";
    $("specimen-title").textContent =
      `specimen ${sel.index} [${sel.provenance}]`;
    const zoom = $("zoom-img") as HTMLImageElement;
    const [x, y, w, h] = sel.bbox;
    zoom.src = api.cropUrl(state.board, x, y, w, h);
    if (pairState) {
      const twin = alignedBox(state.selected, pairState.boxes);
      $("pair-note").textContent = twin
        ? `index ${state.selected} aligned on ${pairState.board}`
        : `index ${state.selected} missing on ${pairState?.board}`;
    }
  }
  repaintBadge();
}

function canvasPoint(ev: MouseEvent): { x: number; y: number } {
  const canvas = $("overlay") as HTMLCanvasElement;
  const rect = canvas.getBoundingClientRect();
  const t = { scale: canvas.width / Math.max(boardSize.width, 1) };
  return toBoard(ev.clientX - rect.left, ev.clientY - rect.top, t);
}

function wireCanvas() {
  const canvas = $("overlay") as HTMLCanvasElement;
  canvas.onmousedown = (ev) => {
    if (!state) return;
    const p = canvasPoint(ev);
    const sel = state.boxes.find((b) => b.index === state!.selected);
    if (sel) {
      const box = { x: sel.bbox[0], y: sel.bbox[1], w: sel.bbox[2], h: sel.bbox[3] };
      const handle = ed.hitTest(box, p.x, p.y, 8 / DISPLAY_SCALE);
      if (handle) {
        drag = { handle, start: p, box };
        return;
      }
    }
    const hit = state.boxes.find((b) =>
      ed.hitTest({ x: b.bbox[0], y: b.bbox[1], w: b.bbox[2], h: b.bbox[3] }, p.x, p.y, 4));
    if (hit) {
      state = vm.select(state, hit.index);
      repaint();
    } else {
      createStart = p;
    }
  };
  canvas.onmousemove = (ev) => {
    if (!state || !drag) return;
    const p = canvasPoint(ev);
    const moved = ed.resizeBox(drag.box, drag.handle!,
                               p.x - drag.start.x, p.y - drag.start.y, boardSize);
    state = vm.stageBox(state, state.selected!, [moved.x, moved.y, moved.w, moved.h]);
    drag = { ...drag, start: p, box: moved };
    repaint();
  };
  canvas.onmouseup = (ev) => {
    if (!state) return;
    if (drag) {
      drag = null;
      return;
    }
    if (createStart) {
      const p = canvasPoint(ev);
      if (Math.abs(p.x - createStart.x) > 3 && Math.abs(p.y - createStart.y) > 3) {
        const box = ed.createDrag(createStart, p, boardSize);
        state = vm.addBox(state, [box.x, box.y, box.w, box.h]);
        repaint();
      }
      createStart = null;
    }
  };
  document.onkeydown = (ev) => {
    if (!state || state.selected === null) return;
    if (ev.key === "Tab") {
      ev.preventDefault();
      state = vm.select(state, step(state.boxes, state.selected, ev.shiftKey ? -1 : 1));
      repaint();
      return;
    }
    if (ev.key.startsWith("Arrow")) {
      ev.preventDefault();
      const sel = state.boxes.find((b) => b.index === state!.selected)!;
      const box = { x: sel.bbox[0], y: sel.bbox[1], w: sel.bbox[2], h: sel.bbox[3] };
      const out = ed.nudge(box, ev.key as ed.ArrowKey, ev.shiftKey, boardSize);
      state = vm.stageBox(state, sel.index, [out.x, out.y, out.w, out.h]);
      repaint();
    }
    if (ev.key === "Delete" && state.selected !== null) {
      state = vm.deleteBox(state, state.selected);
      repaint();
    }
    if ((ev.ctrlKey || ev.metaKey) && ev.key === "z") {
      state = vm.undo(state);
      repaint();
    }
  };
}

async function saveCurrent() {
  if (!state) return;
  try {
    const doc = await api.save(state.board, vm.savePayload(state));
    state = vm.applySaved(state, doc);
    setStatus(`saved revision ${doc.revision}`);
  } catch (err) {
    if (err instanceof ConflictError) {
      state = vm.applyConflict(state, err.current);
      setStatus("conflict: the board changed on the server; reload to merge", true);
    } else {
      setStatus(String(err), true);
    }
  }
  repaint();
}

function wireControls() {
  $("save-btn").onclick = () => void saveCurrent();
  $("reload-btn").onclick = () => {
    if (state?.conflict) {
      state = vm.resolveConflictReload(state);
      repaint();
    } else if (state) {
      void openBoard(state.board);
    }
  };
  $("detect-btn").onclick = async () => {
    if (!state) return;
    if (state.dirty) {
      setStatus("save or undo staged edits before auto-detecting", true);
      return;
    }
    const doc = await api.detect(state.board);
    state = vm.applySaved(state, doc);
    setStatus(`auto-detected ${doc.boxes.length} boxes`);
    repaint();
  };
  $("apply-label-btn").onclick = () => {
    if (!state || state.selected === null) return;
    const lengthRes = validateLength(($("length-input") as HTMLInputElement).value);
    const maturityRes = validateMaturity(
      ($("maturity-select") as HTMLSelectElement).value, taxonomy);
    const errEl = $("label-error");
    if (!lengthRes.ok || !maturityRes.ok) {
      errEl.textContent = lengthRes.error ?? maturityRes.error ?? "";
      return;
    }
    errEl.textContent = "";
    state = vm.stageLabel(state, state.selected,
                          { length_mm: lengthRes.value!, maturity: (maturityRes as any).token });
    state = vm.select(state, step(state.boxes, state.selected, 1));
    repaint();
  };
  $("pair-btn").onclick = async () => {
    if (!state) return;
    const other = ($("pair-select") as HTMLSelectElement).value;
    if (!other || other === state.board) return;
    await api.pair(state.board, other);
    await openBoard(state.board);
    setStatus(`paired with ${other}`);
  };
  $("export-btn").onclick = async () => {
    const text = await api.exportCsv();
    const report = await api.exportReport();
    const blob = new Blob([text], { type: "text/csv" });
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = "manifest.csv";
    a.click();
    setStatus(`exported ${report.exported} rows; ${report.flagged.length} flagged`);
  };
}

async function init() {
  taxonomy = (await api.taxonomy()).included;
  const select = $("maturity-select") as HTMLSelectElement;
  select.innerHTML = "<option value=''>--</option>" +
    taxonomy.map((t) => `<option value="${t}">${t}</option>`).join("");
  const legend = $("legend");
  legend.innerHTML =
    `<span style="color:${COLORS.auto}">auto</span> / ` +
    `<span style="color:${COLORS.human}">human</span> / ` +
    `<span style="color:${COLORS.selected}">selected</span>`;
  await refreshBoards();
  const pairSelect = $("pair-select") as HTMLSelectElement;
  pairSelect.innerHTML = boards.map((b) => `<option>${b.board}</option>`).join("");
  wireCanvas();
  wireControls();
}

if (typeof document !== "undefined") {
  void init();
}
