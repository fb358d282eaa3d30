import { describe, expect, it } from "vitest";

import { displayToImage, imageToDisplay, normalizeBox, stampBrush } from "../src/coords.js";

describe("coordinate mapping", () => {
  it("maps the displayed center of a 64x64 frame at 4x zoom to (32, 32)", () => {
    expect(displayToImage(128, 128, 4)).toEqual({ row: 32, col: 32 });
  });

  it("round-trips within one pixel at any integer zoom", () => {
    for (const zoom of [1, 2, 3, 4, 8]) {
      for (const coord of [{ row: 0, col: 0 }, { row: 13, col: 57 }, { row: 63, col: 63 }]) {
        const { x, y } = imageToDisplay(coord, zoom);
        const back = displayToImage(x, y, zoom);
        expect(Math.abs(back.row - coord.row)).toBeLessThanOrEqual(1);
        expect(Math.abs(back.col - coord.col)).toBeLessThanOrEqual(1);
        expect(back).toEqual(coord); // pixel centers map back exactly
      }
    }
  });
});

describe("box normalization", () => {
  it("produces identical corners regardless of drag direction", () => {
    const tl = { row: 2, col: 3 };
    const br = { row: 9, col: 11 };
    expect(normalizeBox(tl, br)).toEqual(normalizeBox(br, tl));
    expect(normalizeBox(tl, br)).toEqual({ r0: 2, c0: 3, r1: 9, c1: 11 });
  });

  it("rejects zero-area drags", () => {
    expect(normalizeBox({ row: 4, col: 4 }, { row: 4, col: 9 })).toBeNull();
    expect(normalizeBox({ row: 4, col: 4 }, { row: 4, col: 4 })).toBeNull();
  });
});

describe("brush stamping", () => {
  it("paints a disc and clips at borders", () => {
    const grid = new Uint8Array(64);
    stampBrush(grid, 8, 8, { row: 0, col: 0 }, 2);
    expect(grid[0]).toBe(1);
    expect(grid[2]).toBe(1); // (0,2) within radius
    expect(grid[3]).toBe(0);
    const count = grid.reduce((a, b) => a + b, 0);
    expect(count).toBeGreaterThan(3);
  });
});
