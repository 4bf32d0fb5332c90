import { REFERENCE_TASKS, StudioClient, TASKS, TEXT_TASKS, Task } from "./api.js";
import { Phase, loadHeatmap, phasesForTask, probeSteps } from "./attention.js";
import { MaskLayer } from "./mask.js";
import { CanvasPainter, Tool } from "./painter.js";
import { CanvasSession, HistoryEntry, ValidationError, paramSummary } from "./session.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el as T;
};

// served from the same origin as the service (e.g. its /studio mount)
const client = new StudioClient("");
const session = new CanvasSession(client, 128, 128);

const painter = new CanvasPainter($("image-canvas") as HTMLCanvasElement, $("mask-canvas") as HTMLCanvasElement, 128, 128);
const refPainter = new CanvasPainter($("ref-image-canvas") as HTMLCanvasElement, $("ref-mask-canvas") as HTMLCanvasElement, 128, 128);
painter.onChange = () => {
  session.mask = painter.mask;
};

const statusLine = $("status");
const banner = $("banner");
let compareLeft: HistoryEntry | null = null;
let pendingShrink: MaskLayer | null = null;

function setStatus(text: string, isError = false): void {
  statusLine.textContent = text;
  statusLine.classList.toggle("error", isError);
}

function refreshBanner(): void {
  banner.classList.toggle("hidden", !session.connectionLost);
}

function fail(err: unknown): void {
  if (err instanceof ValidationError) setStatus(err.message, true);
  else setStatus(String(err), true);
  refreshBanner();
}

// ---- image + reference loading ----

async function fileBytes(input: HTMLInputElement): Promise<Uint8Array | null> {
  const file = input.files?.[0];
  if (!file) return null;
  return new Uint8Array(await file.arrayBuffer());
}

$("image-file").addEventListener("change", async () => {
  try {
    const bytes = await fileBytes($("image-file") as HTMLInputElement);
    if (!bytes) return;
    const dims = await painter.showImage(bytes);
    session.loadImage({ bytes, ...dims });
    session.mask = painter.mask;
    setStatus(`loaded ${dims.width}x${dims.height} image — paint the region to edit`);
  } catch (err) {
    fail(err);
  }
});

$("ref-file").addEventListener("change", async () => {
  try {
    const bytes = await fileBytes($("ref-file") as HTMLInputElement);
    if (!bytes) return;
    const dims = await refPainter.showImage(bytes);
    session.loadReference({ bytes, ...dims }, refPainter.mask);
    refPainter.onChange = () => session.loadReference({ bytes, ...dims }, refPainter.mask);
    setStatus(`loaded ${dims.width}x${dims.height} style reference — paint its text region`);
  } catch (err) {
    fail(err);
  }
});

// ---- tools ----

for (const painterPair of [
  { painter, prefix: "" },
  { painter: refPainter, prefix: "ref-" },
]) {
  for (const tool of ["brush", "rect", "erase"] as Tool[]) {
    const button = $(`${painterPair.prefix}tool-${tool}`);
    button.addEventListener("click", () => {
      painterPair.painter.tool = tool;
      for (const other of ["brush", "rect", "erase"]) {
        $(`${painterPair.prefix}tool-${other}`).classList.toggle("active", other === tool);
      }
    });
  }
}

($("brush-size") as HTMLInputElement).addEventListener("input", (e) => {
  const radius = Number((e.target as HTMLInputElement).value);
  painter.brushRadius = radius;
  refPainter.brushRadius = radius;
});

$("mask-clear").addEventListener("click", () => {
  painter.mask.clear();
  painter.render();
});

// ---- form ----

const taskSelect = $("task") as HTMLSelectElement;
for (const task of TASKS) {
  const opt = document.createElement("option");
  opt.value = task;
  opt.textContent = task.replace("_", " ");
  taskSelect.appendChild(opt);
}
taskSelect.value = session.form.task;

function syncTaskFields(): void {
  const task = taskSelect.value as Task;
  session.form.task = task;
  $("text-fields").classList.toggle("hidden", !TEXT_TASKS.includes(task));
  $("reference-panel").classList.toggle("hidden", !REFERENCE_TASKS.includes(task));
}
taskSelect.addEventListener("change", syncTaskFields);
syncTaskFields();

function bindField(id: string, apply: (value: string) => void): void {
  $(id).addEventListener("input", (e) => apply((e.target as HTMLInputElement).value));
}
bindField("target-text", (v) => (session.form.targetText = v.toUpperCase()));
bindField("source-text", (v) => (session.form.sourceText = v.toUpperCase()));
bindField("seed", (v) => (session.form.seed = Number(v) || 0));
bindField("content-weight", (v) => (session.form.contentWeight = Number(v)));
bindField("style-weight", (v) => (session.form.styleWeight = Number(v)));

// ---- running jobs ----

const progressBar = $("progress") as HTMLProgressElement;

function showProgress(p: number): void {
  progressBar.value = p;
}

async function track(run: () => Promise<HistoryEntry>): Promise<void> {
  const button = $("run") as HTMLButtonElement;
  button.disabled = true;
  progressBar.value = 0;
  try {
    const entry = await run();
    if (entry.state === "done") setStatus(`job ${entry.jobId} finished`);
    else setStatus(`job ${entry.jobId} failed: ${entry.error}`, true);
    renderHistory();
    await renderAttention(entry);
  } catch (err) {
    fail(err);
  } finally {
    button.disabled = false;
    refreshBanner();
  }
}

$("run").addEventListener("click", () => track(() => session.runAndTrack(showProgress)));
$("retry-seed").addEventListener("click", () => track(() => session.retryWithNewSeed(showProgress)));
$("banner-retry").addEventListener("click", async () => {
  try {
    await client.health();
    session.connectionLost = false;
    setStatus("service reachable again");
  } catch (err) {
    fail(err);
  }
  refreshBanner();
});

// ---- shrink preview ----

$("shrink").addEventListener("click", async () => {
  try {
    pendingShrink = await session.shrinkPreview();
    const before = session.mask.countSet();
    const after = pendingShrink.countSet();
    $("shrink-info").textContent = `preview keeps ${after} of ${before} mask pixels — accept?`;
    $("shrink-actions").classList.remove("hidden");
    painter.setMask(pendingShrink.clone()); // show it; accept/dismiss decides
  } catch (err) {
    fail(err);
  }
});

$("shrink-accept").addEventListener("click", () => {
  if (!pendingShrink) return;
  session.acceptShrink(pendingShrink);
  painter.setMask(session.mask);
  pendingShrink = null;
  $("shrink-actions").classList.add("hidden");
  setStatus("shrunk mask accepted");
});

$("shrink-dismiss").addEventListener("click", () => {
  pendingShrink = null;
  painter.setMask(session.mask);
  $("shrink-actions").classList.add("hidden");
});

// ---- history + compare ----

function renderHistory(): void {
  const strip = $("history");
  strip.replaceChildren();
  session.history.forEach((entry, index) => {
    const card = document.createElement("div");
    card.className = `card ${entry.state}`;
    const title = document.createElement("div");
    title.textContent = `#${index + 1} ${entry.record.task} seed ${entry.record.seed}`;
    card.appendChild(title);
    if (entry.thumbUrl) {
      const img = document.createElement("img");
      img.src = entry.thumbUrl;
      img.alt = `run ${index + 1} result`;
      card.appendChild(img);
    } else {
      const err = document.createElement("div");
      err.className = "error";
      err.textContent = entry.error ?? "failed";
      card.appendChild(err);
    }
    card.title = Object.entries(paramSummary(entry.record))
      .map(([k, v]) => `${k}: ${v}`)
      .join("\n");
    card.addEventListener("click", () => pickForCompare(entry));
    strip.appendChild(card);
  });
}

function pickForCompare(entry: HistoryEntry): void {
  if (!compareLeft) {
    compareLeft = entry;
    setStatus(`comparing ${entry.jobId} — pick the second run`);
    return;
  }
  const view = session.compare(compareLeft, entry);
  const panel = $("compare");
  panel.classList.remove("hidden");
  for (const [slot, side] of [
    ["compare-left", view.left],
    ["compare-right", view.right],
  ] as const) {
    const el = $(slot);
    el.replaceChildren();
    if (side.thumbUrl) {
      const img = document.createElement("img");
      img.src = side.thumbUrl;
      el.appendChild(img);
    }
    const table = document.createElement("table");
    for (const [key, value] of Object.entries(side.params)) {
      const row = table.insertRow();
      row.className = view.changed.includes(key) ? "changed" : "";
      row.insertCell().textContent = key;
      row.insertCell().textContent = value;
    }
    el.appendChild(table);
  }
  $("compare-changed").textContent = view.changed.length ? `differs in: ${view.changed.join(", ")}` : "identical parameters";
  compareLeft = null;
}

// ---- attention inspector ----

async function renderAttention(entry: HistoryEntry): Promise<void> {
  const panel = $("attention");
  const img = $("attention-img") as HTMLImageElement;
  const emptyState = $("attention-empty");
  if (entry.state !== "done") {
    panel.classList.add("hidden");
    return;
  }
  panel.classList.remove("hidden");

  const phaseSelect = $("attention-phase") as HTMLSelectElement;
  phaseSelect.replaceChildren();
  for (const phase of phasesForTask(entry.record.task)) {
    const opt = document.createElement("option");
    opt.value = phase;
    opt.textContent = phase;
    phaseSelect.appendChild(opt);
  }

  const stepInput = $("attention-step") as HTMLInputElement;
  const show = async (): Promise<void> => {
    const phase = phaseSelect.value as Phase;
    const steps = await probeSteps(client, entry.jobId, phase);
    stepInput.max = String(Math.max(0, steps.length - 1));
    const view = await loadHeatmap(client, entry.jobId, Number(stepInput.value), phase);
    if (view.kind === "heatmap") {
      img.src = client.attentionUrl(entry.jobId, view.step, phase);
      img.classList.remove("hidden");
      emptyState.classList.add("hidden");
    } else {
      img.classList.add("hidden");
      emptyState.textContent = view.message;
      emptyState.classList.remove("hidden");
    }
  };
  phaseSelect.onchange = show;
  stepInput.oninput = show;
  stepInput.value = "0";
  await show();
}

// ---- boot ----

(async () => {
  try {
    const health = await client.health();
    setStatus(`service ready — backbone expects ${health.pixel_dims[0]}x${health.pixel_dims[1]} images`);
  } catch (err) {
    session.connectionLost = true;
    fail(err);
  }
})();
