/** DOM bootstrap: wires controls, canvas, thumbnails, and the bank panel
 * to the viewer controller. */

import { ApiClient } from "./api.js";
import { confidenceBadge, paintFrame, paintMarkers } from "./render.js";
import { Tool, ViewerController } from "./state.js";

const api = new ApiClient("");
const controller = new ViewerController(api);

const el = {
  path: document.getElementById("flow-path") as HTMLInputElement,
  load: document.getElementById("load-btn") as HTMLButtonElement,
  tool: document.getElementById("tool-select") as HTMLSelectElement,
  zoom: document.getElementById("zoom-select") as HTMLSelectElement,
  opacity: document.getElementById("opacity") as HTMLInputElement,
  propagate: document.getElementById("propagate-btn") as HTMLButtonElement,
  brushDone: document.getElementById("brush-done-btn") as HTMLButtonElement,
  prev: document.getElementById("prev-btn") as HTMLButtonElement,
  next: document.getElementById("next-btn") as HTMLButtonElement,
  frameLabel: document.getElementById("frame-label") as HTMLSpanElement,
  confidence: document.getElementById("confidence-badge") as HTMLSpanElement,
  canvas: document.getElementById("viewer") as HTMLCanvasElement,
  thumbs: document.getElementById("thumbnails") as HTMLDivElement,
  bank: document.getElementById("bank-panel") as HTMLDivElement,
  toast: document.getElementById("toast") as HTMLDivElement,
};

let dragStart: { x: number; y: number } | null = null;
let brushing = false;

function canvasPos(event: MouseEvent): { x: number; y: number } {
  const rect = el.canvas.getBoundingClientRect();
  return { x: event.clientX - rect.left, y: event.clientY - rect.top };
}

el.load.onclick = () => {
  controller.loadFlow(el.path.value).catch((e) => {
    el.toast.textContent = String(e);
    el.toast.classList.add("visible");
  });
};

el.tool.onchange = () => controller.setTool(el.tool.value as Tool);
el.zoom.onchange = () => controller.setZoom(parseInt(el.zoom.value, 10));
el.opacity.oninput = () => controller.setOpacity(parseFloat(el.opacity.value));
el.propagate.onclick = () => void controller.propagate();
el.brushDone.onclick = () => void controller.commitBrush();
el.prev.onclick = () => controller.setFrame(controller.state.frame - 1);
el.next.onclick = () => controller.setFrame(controller.state.frame + 1);

el.canvas.onmousedown = (event) => {
  const pos = canvasPos(event);
  const tool = controller.state.tool;
  if (tool === "box") {
    dragStart = pos;
  } else if (tool === "mask-brush") {
    brushing = true;
    controller.brushAt(pos.x, pos.y);
  }
};

el.canvas.onmousemove = (event) => {
  if (brushing && controller.state.tool === "mask-brush") {
    const pos = canvasPos(event);
    controller.brushAt(pos.x, pos.y);
  }
};

el.canvas.onmouseup = (event) => {
  const pos = canvasPos(event);
  const tool = controller.state.tool;
  if (tool === "point") {
    void controller.placePoint(pos.x, pos.y, !event.shiftKey);
  } else if (tool === "box" && dragStart) {
    void controller.dragBox(dragStart, pos);
    dragStart = null;
  } else if (tool === "mask-brush") {
    brushing = false;
  }
};

function renderBank(): void {
  const entries = controller.state.bank;
  if (entries.length === 0) {
    el.bank.innerHTML = '<div class="bank-empty">no entries</div>';
    return;
  }
  el.bank.innerHTML = entries.map((e) => {
    const conf = Math.round(e.confidence * 100);
    const weight = e.last_weight === null ? "" :
      `<div class="weight-bar"><div style="width:${Math.round(e.last_weight * 100)}%"></div></div>`;
    const badge = e.is_template ? '<span class="template-badge">template</span>' : "";
    return `<div class="bank-entry">
      <span class="bank-frame">f${e.frame_index}</span>${badge}
      <div class="conf-bar"><div style="width:${conf}%"></div></div>
      <span class="conf-label">${e.confidence.toFixed(2)}</span>
      ${weight}
    </div>`;
  }).join("");
}

function renderThumbs(): void {
  const st = controller.state;
  if (el.thumbs.childElementCount !== st.nFrames) {
    el.thumbs.innerHTML = "";
    for (let i = 0; i < st.nFrames; i++) {
      const cell = document.createElement("div");
      cell.className = "thumb";
      const canvas = document.createElement("canvas");
      canvas.width = st.width;
      canvas.height = st.height;
      const label = document.createElement("span");
      label.textContent = `${i}`;
      cell.append(canvas, label);
      cell.onclick = () => controller.setFrame(i);
      el.thumbs.append(cell);
    }
  }
  for (let i = 0; i < st.nFrames; i++) {
    const cell = el.thumbs.children[i] as HTMLDivElement;
    cell.classList.toggle("active", i === st.frame);
    const canvas = cell.querySelector("canvas") as HTMLCanvasElement;
    const pixels = st.frames[i];
    if (pixels) {
      const ctx = canvas.getContext("2d")!;
      paintFrame(ctx, pixels, st.height, st.width, 1, st.masks[i], st.opacity);
    }
    const label = cell.querySelector("span") as HTMLSpanElement;
    label.textContent = `${i} ${confidenceBadge(st.confidences[i])}`;
  }
}

function render(): void {
  const st = controller.state;
  el.propagate.disabled = st.pending || !st.sessionId;
  el.brushDone.disabled = st.pending || st.tool !== "mask-brush";
  el.frameLabel.textContent = st.sessionId
    ? `frame ${st.frame + 1}/${st.nFrames} (${st.mode})` : "no flow loaded";
  el.confidence.textContent = confidenceBadge(st.confidences[st.frame]);
  if (st.toast) {
    el.toast.textContent = st.toast;
    el.toast.classList.add("visible");
    setTimeout(() => {
      el.toast.classList.remove("visible");
      controller.clearToast();
    }, 4000);
  }
  const pixels = st.frames[st.frame];
  if (pixels && st.sessionId) {
    el.canvas.width = st.width * st.zoom;
    el.canvas.height = st.height * st.zoom;
    const ctx = el.canvas.getContext("2d")!;
    paintFrame(ctx, pixels, st.height, st.width, st.zoom, st.masks[st.frame],
               st.opacity, st.tool === "mask-brush" ? controller.brushPreview : null);
    paintMarkers(ctx, st.markers, st.frame, st.zoom);
  }
  renderThumbs();
  renderBank();
}

controller.onChange(render);

const params = new URLSearchParams(window.location.search);
const sessionId = params.get("session");
if (sessionId) {
  void controller.attachSession(sessionId);
}
