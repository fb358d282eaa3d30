/**
 * Viewer controller: session state, tool handling, and the
 * prompt/propagate/refine loop. Rendering subscribes to `onChange`; all
 * mutations go through the controller so the view stays a pure function
 * of this state. At most one mutating request is in flight per session.
 */

import { ApiClient, BankEntry, PromptSpec, PropagationPayload } from "./api.js";
import { displayToImage, inBounds, normalizeBox, stampBrush } from "./coords.js";
import { imageDecode, rleDecode, rleEncode } from "./rle.js";

export type Tool = "point" | "box" | "mask-brush";

export interface Marker {
  frame: number;
  prompt: PromptSpec;
}

export interface ViewerState {
  sessionId: string | null;
  mode: string;
  nFrames: number;
  height: number;
  width: number;
  frame: number;
  zoom: number;
  opacity: number;
  tool: Tool;
  pending: boolean;
  hasPropagated: boolean;
  frames: (Float32Array | null)[];
  masks: (Uint8Array | null)[];
  confidences: (number | null)[];
  markers: Marker[];
  bank: BankEntry[];
  lastOrder: number[] | null;
  lastRecomputed: number[];
  toast: string | null;
}

function initialState(): ViewerState {
  return {
    sessionId: null, mode: "", nFrames: 0, height: 0, width: 0,
    frame: 0, zoom: 4, opacity: 0.45, tool: "point",
    pending: false, hasPropagated: false,
    frames: [], masks: [], confidences: [], markers: [], bank: [],
    lastOrder: null, lastRecomputed: [], toast: null,
  };
}

export class ViewerController {
  state: ViewerState = initialState();
  private listeners: (() => void)[] = [];
  private brushGrid: Uint8Array | null = null;

  constructor(private api: ApiClient) {}

  onChange(fn: () => void): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn();
  }

  private fail(message: string): void {
    this.state.toast = message;
    this.emit();
  }

  async loadFlow(flowPath: string): Promise<void> {
    const info = await this.api.createSession(flowPath);
    this.state = {
      ...initialState(),
      sessionId: info.id,
      mode: info.mode,
      nFrames: info.n_frames,
      height: info.height,
      width: info.width,
      frames: new Array(info.n_frames).fill(null),
      masks: new Array(info.n_frames).fill(null),
      confidences: new Array(info.n_frames).fill(null),
    };
    this.emit();
    await this.fetchFrame(this.state.frame);
  }

  /** Restore a session by id (page reload path). */
  async attachSession(id: string): Promise<void> {
    const info = await this.api.getSession(id);
    this.state = {
      ...initialState(),
      sessionId: info.id,
      mode: info.mode,
      nFrames: info.n_frames,
      height: info.height,
      width: info.width,
      frames: new Array(info.n_frames).fill(null),
      masks: new Array(info.n_frames).fill(null),
      confidences: new Array(info.n_frames).fill(null),
    };
    for (const frame of info.predicted_frames) {
      const m = await this.api.getMask(id, frame);
      this.state.masks[frame] = rleDecode(m.mask);
      this.state.confidences[frame] = m.confidence;
    }
    await this.refreshBank();
    this.emit();
    await this.fetchFrame(this.state.frame);
  }

  async fetchFrame(frame: number): Promise<void> {
    const { sessionId } = this.state;
    if (!sessionId || this.state.frames[frame]) return;
    const payload = await this.api.getFrame(sessionId, frame);
    this.state.frames[frame] = imageDecode(payload.image);
    this.emit();
  }

  setFrame(frame: number): void {
    if (frame < 0 || frame >= this.state.nFrames) return;
    this.state.frame = frame;
    this.emit();
    void this.fetchFrame(frame).catch((e) => this.fail(String(e)));
  }

  setTool(tool: Tool): void {
    this.state.tool = tool;
    this.brushGrid = null;
    this.emit();
  }

  setZoom(zoom: number): void {
    this.state.zoom = Math.max(1, Math.round(zoom));
    this.emit();
  }

  setOpacity(opacity: number): void {
    this.state.opacity = Math.min(1, Math.max(0, opacity));
    this.emit();
  }

  /** Click on the canvas with the point tool; display coordinates. */
  async placePoint(x: number, y: number, positive = true): Promise<void> {
    const coord = displayToImage(x, y, this.state.zoom);
    if (!inBounds(coord, this.state.height, this.state.width)) return;
    await this.sendPrompt({ kind: "point", row: coord.row, col: coord.col, positive });
  }

  /** Drag with the box tool; display coordinates, any direction. */
  async dragBox(start: { x: number; y: number }, end: { x: number; y: number }): Promise<void> {
    const a = displayToImage(start.x, start.y, this.state.zoom);
    const b = displayToImage(end.x, end.y, this.state.zoom);
    const box = normalizeBox(a, b);
    if (box === null) {
      this.fail("zero-area box ignored");
      return;
    }
    await this.sendPrompt({ kind: "box", ...box });
  }

  /** Paint one brush stamp; display coordinates. */
  brushAt(x: number, y: number, radius = 2): void {
    const coord = displayToImage(x, y, this.state.zoom);
    if (!inBounds(coord, this.state.height, this.state.width)) return;
    if (!this.brushGrid) {
      this.brushGrid = new Uint8Array(this.state.height * this.state.width);
    }
    stampBrush(this.brushGrid, this.state.height, this.state.width, coord, radius);
    this.emit();
  }

  get brushPreview(): Uint8Array | null {
    return this.brushGrid;
  }

  /** Send the accumulated brush strokes as a mask prompt. */
  async commitBrush(): Promise<void> {
    if (!this.brushGrid || !this.brushGrid.some((v) => v)) return;
    const payload = rleEncode(this.brushGrid, this.state.height, this.state.width);
    this.brushGrid = null;
    await this.sendPrompt({ kind: "mask", mask: payload });
  }

  private async sendPrompt(prompt: PromptSpec): Promise<void> {
    const { sessionId, frame, pending, hasPropagated } = this.state;
    if (!sessionId || pending) return;
    this.state.pending = true;
    this.emit();
    try {
      if (hasPropagated) {
        const result = await this.api.refine(sessionId, frame, prompt);
        this.applyPropagation(result);
      } else {
        const resp = await this.api.addPrompt(sessionId, frame, prompt);
        this.state.masks[frame] = rleDecode(resp.mask);
        this.state.confidences[frame] = resp.confidence;
      }
      this.state.markers.push({ frame, prompt });
      await this.refreshBank();
    } catch (e) {
      this.state.toast = String(e);
    } finally {
      this.state.pending = false;
      this.emit();
    }
  }

  async propagate(): Promise<void> {
    const { sessionId, pending } = this.state;
    if (!sessionId || pending) return;
    this.state.pending = true;
    this.emit();
    try {
      const result = await this.api.propagate(sessionId);
      this.applyPropagation(result);
      await this.refreshBank();
    } catch (e) {
      this.state.toast = String(e);
    } finally {
      this.state.pending = false;
      this.emit();
    }
  }

  private applyPropagation(result: PropagationPayload): void {
    result.masks.forEach((payload, frame) => {
      this.state.masks[frame] = rleDecode(payload);
      this.state.confidences[frame] = result.confidences[frame];
    });
    this.state.lastOrder = result.order;
    this.state.lastRecomputed = result.recomputed;
    this.state.hasPropagated = true;
  }

  async refreshBank(): Promise<void> {
    const { sessionId } = this.state;
    if (!sessionId) return;
    const payload = await this.api.getBank(sessionId);
    this.state.bank = payload.entries;
    this.emit();
  }

  clearToast(): void {
    this.state.toast = null;
    this.emit();
  }
}
