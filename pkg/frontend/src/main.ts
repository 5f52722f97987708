/**
 * DOM wiring for the studio. All model/session logic lives in canvas.ts and
 * session.ts; this file only translates pointer and input events into those
 * calls and paints their state back into the page.
 */

import { Client } from "./api.js";
import { MaskCanvasState, StrokePoint } from "./canvas.js";
import { StudioSession } from "./session.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const ZOOM = 12; // nearest-neighbor magnification of the label grid

let session: StudioSession | null = null;
let canvas: MaskCanvasState | null = null;
let stroke: StrokePoint[] = [];
let painting = false;

const board = $<HTMLCanvasElement>("board");
const preview = $<HTMLCanvasElement>("preview");
const errorBox = $<HTMLDivElement>("error");
const jobBox = $<HTMLDivElement>("job");
const gallery = $<HTMLDivElement>("gallery");
const classBar = $<HTMLDivElement>("classes");
const textureSelect = $<HTMLSelectElement>("textures");

function redrawBoard(): void {
  if (!canvas) return;
  const ctx = board.getContext("2d")!;
  const img = ctx.createImageData(canvas.width, canvas.height);
  for (let i = 0; i < canvas.grid.length; i++) {
    const [r, g, b] = canvas.palette[canvas.grid[i]!]!;
    img.data[4 * i] = r;
    img.data[4 * i + 1] = g;
    img.data[4 * i + 2] = b;
    img.data[4 * i + 3] = 255;
  }
  ctx.putImageData(img, 0, 0);
}

async function drawPreview(): Promise<void> {
  if (!session?.preview) return;
  const ctx = preview.getContext("2d")!;
  const rgb = new Image();
  rgb.crossOrigin = "anonymous";
  rgb.src = session.client.artifactUrl(
    $<HTMLInputElement>("depth-toggle").checked ? session.preview.depth : session.preview.rgb);
  await rgb.decode();
  ctx.imageSmoothingEnabled = false;
  ctx.globalAlpha = 1;
  ctx.drawImage(rgb, 0, 0, preview.width, preview.height);
  if ($<HTMLInputElement>("overlay-toggle").checked) {
    const mask = new Image();
    mask.crossOrigin = "anonymous";
    mask.src = session.client.artifactUrl(session.preview.mask_rgb);
    await mask.decode();
    ctx.globalAlpha = 0.5;
    ctx.drawImage(mask, 0, 0, preview.width, preview.height);
    ctx.globalAlpha = 1;
  }
}

function renderState(): void {
  if (!session) return;
  errorBox.textContent = session.error ?? "";
  errorBox.hidden = !session.error;
  const job = session.activeJob;
  if (job) {
    jobBox.hidden = false;
    jobBox.textContent = `${job.kind}: ${job.status} ${job.progress.iter}/${job.progress.total}` +
      (job.error ? ` (${job.error})` : "");
  } else {
    jobBox.hidden = true;
  }
  const busy = !!job && (job.status === "queued" || job.status === "running");
  for (const id of ["submit-edit", "invert", "sample"]) {
    $<HTMLButtonElement>(id).disabled = busy;
  }
  $<HTMLButtonElement>("cancel").disabled = !busy;
  textureSelect.innerHTML = "";
  for (const t of session.textures) {
    const opt = document.createElement("option");
    opt.value = t.latentId;
    opt.textContent = t.label;
    textureSelect.appendChild(opt);
  }
  gallery.innerHTML = "";
  for (const entry of [...session.gallery].reverse()) {
    const cell = document.createElement("div");
    cell.className = "cell";
    for (const url of [entry.rgb, entry.mask_rgb, entry.depth]) {
      if (!url) continue;
      const img = document.createElement("img");
      img.src = session.client.artifactUrl(url);
      cell.appendChild(img);
    }
    const cap = document.createElement("div");
    cap.textContent = `${entry.kind} (${entry.pose.pitch.toFixed(2)}, ${entry.pose.yaw.toFixed(2)})` +
      (entry.miou !== undefined ? ` mIoU ${entry.miou.toFixed(3)}` : "");
    cell.appendChild(cap);
    gallery.appendChild(cell);
  }
  void drawPreview();
}

function boardPoint(ev: PointerEvent): StrokePoint | null {
  if (!canvas) return null;
  const rect = board.getBoundingClientRect();
  const x = Math.floor(((ev.clientX - rect.left) / rect.width) * canvas.width);
  const y = Math.floor(((ev.clientY - rect.top) / rect.height) * canvas.height);
  if (x < 0 || x >= canvas.width || y < 0 || y >= canvas.height) return null;
  return { x, y };
}

board.addEventListener("pointerdown", (ev) => {
  const p = boardPoint(ev);
  if (!p || !canvas) return;
  painting = true;
  stroke = [p];
  board.setPointerCapture(ev.pointerId);
});
board.addEventListener("pointermove", (ev) => {
  const p = boardPoint(ev);
  if (!painting || !p) return;
  stroke.push(p);
});
board.addEventListener("pointerup", () => {
  if (!painting || !canvas || stroke.length === 0) return;
  painting = false;
  canvas.paint(stroke);
  stroke = [];
  redrawBoard();
});
document.addEventListener("keydown", (ev) => {
  if ((ev.ctrlKey || ev.metaKey) && ev.key === "z" && canvas) {
    canvas.undo();
    redrawBoard();
  }
});

$<HTMLButtonElement>("undo").onclick = () => {
  canvas?.undo();
  redrawBoard();
};
$<HTMLButtonElement>("fill").onclick = () => {
  canvas?.fill();
  redrawBoard();
};
$<HTMLInputElement>("radius").oninput = (ev) => {
  if (canvas) canvas.brushRadius = Number((ev.target as HTMLInputElement).value);
};

function buildClassBar(): void {
  if (!canvas) return;
  classBar.innerHTML = "";
  for (let c = 0; c < canvas.k; c++) {
    const btn = document.createElement("button");
    const [r, g, b] = canvas.palette[c]!;
    btn.style.background = `rgb(${r},${g},${b})`;
    btn.textContent = String(c);
    btn.onclick = () => {
      canvas!.activeClass = c;
      for (const other of classBar.children) other.classList.remove("active");
      btn.classList.add("active");
    };
    if (c === canvas.activeClass) btn.classList.add("active");
    classBar.appendChild(btn);
  }
}

$<HTMLButtonElement>("connect").onclick = async () => {
  const base = $<HTMLInputElement>("base-url").value.replace(/\/$/, "");
  session = new StudioSession(new Client(base));
  session.onChange = renderState;
  const model = await session.connect();
  canvas = new MaskCanvasState(model.resolution, model.resolution, model.k,
                               model.palette as [number, number, number][]);
  board.width = model.resolution;
  board.height = model.resolution;
  board.style.width = `${model.resolution * ZOOM}px`;
  board.style.height = `${model.resolution * ZOOM}px`;
  preview.width = model.resolution * 4;
  preview.height = model.resolution * 4;
  const pitch = $<HTMLInputElement>("pitch");
  const yaw = $<HTMLInputElement>("yaw");
  pitch.min = String(-model.pose_range.pitch_max);
  pitch.max = String(model.pose_range.pitch_max);
  yaw.min = String(-model.pose_range.yaw_max);
  yaw.max = String(model.pose_range.yaw_max);
  buildClassBar();
  redrawBoard();
  renderState();
};

$<HTMLButtonElement>("sample").onclick = async () => {
  if (!session) return;
  const seedText = $<HTMLInputElement>("seed").value.trim();
  await session.samplePortrait(seedText ? Number(seedText) : undefined);
  await session.orbitPreview(session.pose.pitch, session.pose.yaw);
};

for (const id of ["pitch", "yaw"]) {
  $<HTMLInputElement>(id).oninput = () => {
    void session?.orbitPreview(Number($<HTMLInputElement>("pitch").value),
                               Number($<HTMLInputElement>("yaw").value));
  };
}
$<HTMLInputElement>("overlay-toggle").onchange = () => void drawPreview();
$<HTMLInputElement>("depth-toggle").onchange = () => void drawPreview();

$<HTMLButtonElement>("submit-edit").onclick = async () => {
  if (!session || !canvas) return;
  const result = await session.submitEdit(canvas.grid);
  canvas.load(result.labels);
  redrawBoard();
};
$<HTMLButtonElement>("invert").onclick = async () => {
  if (!session || !canvas) return;
  const result = await session.invertMask(canvas.grid);
  canvas.load(result.labels);
  redrawBoard();
};
$<HTMLButtonElement>("cancel").onclick = () => void session?.cancelActiveJob();
$<HTMLButtonElement>("swap").onclick = async () => {
  if (!session || !textureSelect.value) return;
  await session.textureSwap(textureSelect.value);
};
