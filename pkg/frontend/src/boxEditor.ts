/** Pure geometry for the bounding-box editor: drag-create, drag-move,
 * corner-resize, hit testing and keyboard nudges. Coordinates are full-res
 * board pixels; the renderer applies the view scale. */

export interface Box {
  x: number;
  y: number;
  w: number;
  h: number;
}

export interface Bounds {
  width: number;
  height: number;
}

export type Handle = "nw" | "ne" | "sw" | "se" | "move";

const clamp = (v: number, lo: number, hi: number) => Math.min(Math.max(v, lo), hi);

/** Normalize two drag corners into a box of at least 1x1 inside bounds. */
export function createDrag(
  start: { x: number; y: number },
  current: { x: number; y: number },
  bounds: Bounds,
): Box {
  const x0 = clamp(Math.round(Math.min(start.x, current.x)), 0, bounds.width - 1);
  const y0 = clamp(Math.round(Math.min(start.y, current.y)), 0, bounds.height - 1);
  const x1 = clamp(Math.round(Math.max(start.x, current.x)), x0 + 1, bounds.width);
  const y1 = clamp(Math.round(Math.max(start.y, current.y)), y0 + 1, bounds.height);
  return { x: x0, y: y0, w: x1 - x0, h: y1 - y0 };
}

export function moveBox(box: Box, dx: number, dy: number, bounds: Bounds): Box {
  return {
    x: clamp(Math.round(box.x + dx), 0, bounds.width - box.w),
    y: clamp(Math.round(box.y + dy), 0, bounds.height - box.h),
    w: box.w,
    h: box.h,
  };
}

/** Resize by dragging one corner; the opposite corner stays anchored. */
export function resizeBox(box: Box, handle: Handle, dx: number, dy: number,
                          bounds: Bounds): Box {
  if (handle === "move") return moveBox(box, dx, dy, bounds);
  let x0 = box.x;
  let y0 = box.y;
  let x1 = box.x + box.w;
  let y1 = box.y + box.h;
  if (handle === "nw" || handle === "sw") x0 = clamp(Math.round(x0 + dx), 0, x1 - 1);
  if (handle === "ne" || handle === "se") x1 = clamp(Math.round(x1 + dx), x0 + 1, bounds.width);
  if (handle === "nw" || handle === "ne") y0 = clamp(Math.round(y0 + dy), 0, y1 - 1);
  if (handle === "sw" || handle === "se") y1 = clamp(Math.round(y1 + dy), y0 + 1, bounds.height);
  return { x: x0, y: y0, w: x1 - x0, h: y1 - y0 };
}

/** Which handle a pointer at (px, py) grabs; null when outside the box. */
export function hitTest(box: Box, px: number, py: number,
                        handleRadius: number): Handle | null {
  const corners: [Handle, number, number][] = [
    ["nw", box.x, box.y],
    ["ne", box.x + box.w, box.y],
    ["sw", box.x, box.y + box.h],
    ["se", box.x + box.w, box.y + box.h],
  ];
  for (const [handle, cx, cy] of corners) {
    if (Math.abs(px - cx) <= handleRadius && Math.abs(py - cy) <= handleRadius) {
      return handle;
    }
  }
  if (px >= box.x && px <= box.x + box.w && py >= box.y && py <= box.y + box.h) {
    return "move";
  }
  return null;
}

export type ArrowKey = "ArrowUp" | "ArrowDown" | "ArrowLeft" | "ArrowRight";

/** Keyboard nudge: 1 px, or 10 px with shift. */
export function nudge(box: Box, key: ArrowKey, shift: boolean, bounds: Bounds): Box {
  const step = shift ? 10 : 1;
  const delta: Record<ArrowKey, [number, number]> = {
    ArrowUp: [0, -step],
    ArrowDown: [0, step],
    ArrowLeft: [-step, 0],
    ArrowRight: [step, 0],
  };
  const [dx, dy] = delta[key];
  return moveBox(box, dx, dy, bounds);
}
