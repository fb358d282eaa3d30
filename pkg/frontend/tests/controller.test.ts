import { beforeEach, describe, expect, it } from "vitest";

import { ApiClient, MaskResponse, PromptSpec, PropagationPayload } from "../src/api.js";
import { rleEncode } from "../src/rle.js";
import { ViewerController } from "../src/state.js";

const H = 8;
const W = 8;
const N = 4;

function maskPayload(fill: number) {
  const mask = new Uint8Array(H * W).fill(fill);
  return rleEncode(mask, H, W);
}

class FakeApi {
  prompts: { frame: number; prompt: PromptSpec }[] = [];
  refines: { frame: number; prompt: PromptSpec }[] = [];
  propagates = 0;
  banks = 0;

  async createSession() {
    return { id: "s-1", mode: "unordered", task_class: "ellipse",
             n_frames: N, height: H, width: W };
  }

  async getFrame(_id: string, frame: number) {
    const pixels = new Float32Array(H * W).fill(frame / 10);
    const bytes = new Uint8Array(pixels.buffer);
    let bin = "";
    for (const b of bytes) bin += String.fromCharCode(b);
    return { frame, image: { pixels: btoa(bin), height: H, width: W } };
  }

  async addPrompt(_id: string, frame: number, prompt: PromptSpec): Promise<MaskResponse> {
    this.prompts.push({ frame, prompt });
    return { frame, mask: maskPayload(1), confidence: 0.75,
             prob_stats: { min: 0, max: 1, mean: 0.4 } };
  }

  async propagate(): Promise<PropagationPayload> {
    this.propagates += 1;
    return {
      order: [0, 1, 2, 3],
      masks: Array.from({ length: N }, () => maskPayload(1)),
      confidences: [0.9, 0.8, 0.7, 0.6],
      recomputed: [1, 2, 3],
      bank_snapshots: [],
    };
  }

  async refine(_id: string, frame: number, prompt: PromptSpec): Promise<PropagationPayload> {
    this.refines.push({ frame, prompt });
    return {
      order: [0, 1, 2, 3],
      masks: Array.from({ length: N }, () => maskPayload(0)),
      confidences: [0.9, 0.9, 0.9, 0.9],
      recomputed: [frame, 3],
      bank_snapshots: [],
    };
  }

  async getBank() {
    this.banks += 1;
    return { entries: [{ frame_index: 0, confidence: 0.75, is_template: true,
                         last_weight: 1.0 }] };
  }
}

describe("viewer controller", () => {
  let api: FakeApi;
  let controller: ViewerController;

  beforeEach(async () => {
    api = new FakeApi();
    controller = new ViewerController(api as unknown as ApiClient);
    await controller.loadFlow("/x.flow");
  });

  it("loads a flow and fetches the first frame", () => {
    expect(controller.state.sessionId).toBe("s-1");
    expect(controller.state.nFrames).toBe(N);
    expect(controller.state.frames[0]).not.toBeNull();
  });

  it("converts display clicks to image coordinates at the current zoom", async () => {
    controller.setZoom(4);
    await controller.placePoint(16, 8); // display -> image (2, 4)
    expect(api.prompts[0].prompt).toMatchObject({ kind: "point", row: 2, col: 4 });
    expect(controller.state.masks[0]).not.toBeNull();
    // overlay appears only on the prompted frame
    expect(controller.state.masks[1]).toBeNull();
  });

  it("ignores clicks outside the image area", async () => {
    controller.setZoom(2);
    await controller.placePoint(H * 2 + 10, 4);
    expect(api.prompts).toHaveLength(0);
  });

  it("normalizes boxes from any drag direction and rejects zero-area", async () => {
    controller.setZoom(1);
    await controller.dragBox({ x: 6, y: 7 }, { x: 2, y: 3 });
    expect(api.prompts[0].prompt).toMatchObject({ kind: "box", r0: 3, c0: 2, r1: 7, c1: 6 });
    await controller.dragBox({ x: 5, y: 2 }, { x: 5, y: 6 });
    expect(api.prompts).toHaveLength(1);
    expect(controller.state.toast).toContain("zero-area");
  });

  it("propagate fills every frame and records the order", async () => {
    await controller.placePoint(1, 1);
    await controller.propagate();
    expect(controller.state.masks.every((m) => m !== null)).toBe(true);
    expect(controller.state.lastOrder).toEqual([0, 1, 2, 3]);
    expect(controller.state.hasPropagated).toBe(true);
  });

  it("prompts after propagation go through refine", async () => {
    await controller.placePoint(1, 1);
    await controller.propagate();
    controller.setFrame(2);
    await controller.placePoint(4, 4);
    expect(api.refines).toHaveLength(1);
    expect(api.refines[0].frame).toBe(2);
    expect(controller.state.lastRecomputed).toEqual([2, 3]);
  });

  it("brush strokes rasterize client-side and ship as one mask prompt", async () => {
    controller.setTool("mask-brush");
    controller.setZoom(1);
    controller.brushAt(3, 3, 1);
    controller.brushAt(4, 3, 1);
    await controller.commitBrush();
    expect(api.prompts).toHaveLength(1);
    expect(api.prompts[0].prompt.kind).toBe("mask");
    expect(api.prompts[0].prompt.mask!.height).toBe(H);
  });

  it("refreshes the bank after prompting", async () => {
    await controller.placePoint(1, 1);
    expect(api.banks).toBeGreaterThan(0);
    expect(controller.state.bank[0].is_template).toBe(true);
  });

  it("blocks overlapping mutating requests", async () => {
    const p1 = controller.propagate();
    const p2 = controller.propagate();
    await Promise.all([p1, p2]);
    expect(api.propagates).toBe(1);
  });

  it("stepping frames preserves previously fetched overlays", async () => {
    await controller.placePoint(1, 1);
    await controller.propagate();
    controller.setFrame(3);
    controller.setFrame(0);
    expect(controller.state.masks[3]).not.toBeNull();
    expect(controller.state.masks[0]).not.toBeNull();
  });
});
