/** Canvas overlay rendering: boxes coloured by provenance on a downscaled
 * board image, with selection handles. */

import type { BoxAnnotation } from "./api.js";

export const COLORS = {
  auto: "#38bdf8",
  human: "#f59e0b",
  selected: "#ef4444",
};

export interface ViewTransform {
  scale: number; // board px -> canvas px
}

export function drawOverlay(ctx: CanvasRenderingContext2D, boxes: BoxAnnotation[],
                            selected: number | null, t: ViewTransform): void {
  ctx.save();
  ctx.lineWidth = 2;
  ctx.font = "12px sans-serif";
  for (const box of boxes) {
    const [x, y, w, h] = box.bbox;
    const sx = x * t.scale;
    const sy = y * t.scale;
    const sw = w * t.scale;
    const sh = h * t.scale;
    const color = box.index === selected ? COLORS.selected : COLORS[box.provenance];
    ctx.strokeStyle = color;
    ctx.strokeRect(sx, sy, sw, sh);
    ctx.fillStyle = color;
    ctx.fillText(String(box.index), sx + 2, sy - 3);
    if (box.index === selected) {
      for (const [hx, hy] of [[sx, sy], [sx + sw, sy], [sx, sy + sh], [sx + sw, sy + sh]]) {
        ctx.fillRect(hx - 3, hy - 3, 6, 6);
      }
    }
  }
  ctx.restore();
}

export function toBoard(px: number, py: number, t: ViewTransform): { x: number; y: number } {
  return { x: px / t.scale, y: py / t.scale };
}
