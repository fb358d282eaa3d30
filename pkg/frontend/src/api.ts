/** Typed client for the segmentation service REST API. */

import { RlePayload } from "./rle.js";

export interface SessionInfo {
  id: string;
  mode: "volumetric" | "unordered";
  task_class: string;
  n_frames: number;
  height: number;
  width: number;
}

export interface PromptSpec {
  kind: "point" | "box" | "mask";
  row?: number;
  col?: number;
  positive?: boolean;
  r0?: number;
  c0?: number;
  r1?: number;
  c1?: number;
  mask?: RlePayload;
}

export interface MaskResponse {
  frame: number;
  mask: RlePayload;
  confidence: number;
  prob_stats: { min: number; max: number; mean: number };
}

export interface BankEntry {
  frame_index: number;
  confidence: number;
  is_template: boolean;
  last_weight: number | null;
}

export interface PropagationPayload {
  order: number[];
  masks: RlePayload[];
  confidences: number[];
  recomputed: number[];
  bank_snapshots: BankEntry[][];
}

export class ApiError extends Error {
  constructor(public status: number, public code: string, message: string) {
    super(message);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(url, {
    headers: { "content-type": "application/json" },
    ...init,
  });
  const body = await resp.json();
  if (!resp.ok) {
    throw new ApiError(resp.status, body.code ?? "error", body.message ?? resp.statusText);
  }
  return body as T;
}

export class ApiClient {
  constructor(private base: string = "") {}

  createSession(flowPath: string, bank?: Record<string, unknown>): Promise<SessionInfo> {
    return request(`${this.base}/sessions`, {
      method: "POST",
      body: JSON.stringify({ flow_path: flowPath, ...(bank ? { bank } : {}) }),
    });
  }

  getSession(id: string): Promise<SessionInfo & { prompted_frames: number[]; predicted_frames: number[] }> {
    return request(`${this.base}/sessions/${id}`);
  }

  getFrame(id: string, frame: number): Promise<{ frame: number; image: { pixels: string; height: number; width: number } }> {
    return request(`${this.base}/sessions/${id}/frames/${frame}`);
  }

  addPrompt(id: string, frame: number, prompt: PromptSpec): Promise<MaskResponse> {
    return request(`${this.base}/sessions/${id}/prompts`, {
      method: "POST",
      body: JSON.stringify({ frame, prompt }),
    });
  }

  propagate(id: string): Promise<PropagationPayload> {
    return request(`${this.base}/sessions/${id}/propagate`, { method: "POST" });
  }

  refine(id: string, frame: number, prompt: PromptSpec): Promise<PropagationPayload> {
    return request(`${this.base}/sessions/${id}/refine`, {
      method: "POST",
      body: JSON.stringify({ frame, prompt }),
    });
  }

  getMask(id: string, frame: number): Promise<MaskResponse> {
    return request(`${this.base}/sessions/${id}/masks/${frame}`);
  }

  getBank(id: string): Promise<{ entries: BankEntry[] }> {
    return request(`${this.base}/sessions/${id}/bank`);
  }

  health(): Promise<{ status: string }> {
    return request(`${this.base}/healthz`);
  }
}
