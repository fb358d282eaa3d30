/** Display <-> image coordinate mapping at integer zoom. */

export interface PixelCoord {
  row: number;
  col: number;
}

/** Map a click position on the zoomed canvas to an image pixel. */
export function displayToImage(x: number, y: number, zoom: number): PixelCoord {
  return { row: Math.floor(y / zoom), col: Math.floor(x / zoom) };
}

/** Center of an image pixel on the zoomed canvas. */
export function imageToDisplay(coord: PixelCoord, zoom: number): { x: number; y: number } {
  return { x: coord.col * zoom + zoom / 2, y: coord.row * zoom + zoom / 2 };
}

export function inBounds(coord: PixelCoord, height: number, width: number): boolean {
  return coord.row >= 0 && coord.row < height && coord.col >= 0 && coord.col < width;
}

export interface BoxCorners {
  r0: number;
  c0: number;
  r1: number;
  c1: number;
}

/**
 * Normalize a drag into ordered inclusive corners (r0 < r1, c0 < c1
 * regardless of drag direction). Returns null for a zero-area drag.
 */
export function normalizeBox(start: PixelCoord, end: PixelCoord): BoxCorners | null {
  const r0 = Math.min(start.row, end.row);
  const r1 = Math.max(start.row, end.row);
  const c0 = Math.min(start.col, end.col);
  const c1 = Math.max(start.col, end.col);
  if (r0 === r1 || c0 === c1) return null;
  return { r0, c0, r1, c1 };
}

/** Stamp a round brush onto a pixel grid; mutates and returns the grid. */
export function stampBrush(grid: Uint8Array, height: number, width: number,
                           center: PixelCoord, radius: number): Uint8Array {
  const r2 = radius * radius;
  const rLo = Math.max(0, Math.floor(center.row - radius));
  const rHi = Math.min(height - 1, Math.ceil(center.row + radius));
  const cLo = Math.max(0, Math.floor(center.col - radius));
  const cHi = Math.min(width - 1, Math.ceil(center.col + radius));
  for (let r = rLo; r <= rHi; r++) {
    for (let c = cLo; c <= cHi; c++) {
      const dr = r - center.row;
      const dc = c - center.col;
      if (dr * dr + dc * dc <= r2) grid[r * width + c] = 1;
    }
  }
  return grid;
}
