/** Canvas painting: grayscale frame, mask overlay, prompt markers. */

import { PromptSpec } from "./api.js";
import { imageToDisplay } from "./coords.js";
import { Marker } from "./state.js";

export function paintFrame(ctx: CanvasRenderingContext2D, pixels: Float32Array,
                           height: number, width: number, zoom: number,
                           mask: Uint8Array | null, opacity: number,
                           brush: Uint8Array | null = null): void {
  const img = ctx.createImageData(width, height);
  for (let i = 0; i < pixels.length; i++) {
    const v = Math.round(pixels[i] * 255);
    img.data[i * 4] = v;
    img.data[i * 4 + 1] = v;
    img.data[i * 4 + 2] = v;
    img.data[i * 4 + 3] = 255;
  }
  if (mask) {
    for (let i = 0; i < mask.length; i++) {
      if (mask[i]) {
        img.data[i * 4] = Math.round(img.data[i * 4] * (1 - opacity) + 64 * opacity);
        img.data[i * 4 + 1] = Math.round(img.data[i * 4 + 1] * (1 - opacity) + 190 * opacity);
        img.data[i * 4 + 2] = Math.round(img.data[i * 4 + 2] * (1 - opacity) + 255 * opacity);
      }
    }
  }
  if (brush) {
    for (let i = 0; i < brush.length; i++) {
      if (brush[i]) {
        img.data[i * 4] = 255;
        img.data[i * 4 + 1] = 120;
        img.data[i * 4 + 2] = 40;
      }
    }
  }
  const off = new OffscreenCanvas(width, height);
  const offCtx = off.getContext("2d")!;
  offCtx.putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, width * zoom, height * zoom);
  ctx.drawImage(off, 0, 0, width * zoom, height * zoom);
}

export function paintMarkers(ctx: CanvasRenderingContext2D, markers: Marker[],
                             frame: number, zoom: number): void {
  for (const marker of markers) {
    if (marker.frame !== frame) continue;
    drawMarker(ctx, marker.prompt, zoom);
  }
}

function drawMarker(ctx: CanvasRenderingContext2D, prompt: PromptSpec, zoom: number): void {
  ctx.lineWidth = 2;
  if (prompt.kind === "point" && prompt.row !== undefined && prompt.col !== undefined) {
    const { x, y } = imageToDisplay({ row: prompt.row, col: prompt.col }, zoom);
    ctx.strokeStyle = prompt.positive === false ? "#ff5252" : "#ffd24d";
    ctx.beginPath();
    ctx.arc(x, y, Math.max(4, zoom), 0, Math.PI * 2);
    ctx.stroke();
  } else if (prompt.kind === "box"
             && prompt.r0 !== undefined && prompt.c0 !== undefined
             && prompt.r1 !== undefined && prompt.c1 !== undefined) {
    ctx.strokeStyle = "#ffd24d";
    ctx.strokeRect(prompt.c0 * zoom, prompt.r0 * zoom,
                   (prompt.c1 - prompt.c0 + 1) * zoom, (prompt.r1 - prompt.r0 + 1) * zoom);
  }
}

export function confidenceBadge(confidence: number | null): string {
  return confidence === null ? "" : confidence.toFixed(2);
}
