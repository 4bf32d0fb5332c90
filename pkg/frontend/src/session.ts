import {
  HistoryEntryState,
  JobState,
  REFERENCE_TASKS,
  ServiceUnreachable,
  StudioClient,
  SubmitFields,
  TEXT_TASKS,
  Task,
  pollUntilSettled,
} from "./api.js";
import { MaskLayer, exportMask, importMask } from "./mask.js";

export class ValidationError extends Error {}

export interface LoadedImage {
  bytes: Uint8Array; // encoded file, forwarded verbatim
  width: number;
  height: number;
}

export interface FormState {
  task: Task;
  targetText: string;
  sourceText: string;
  seed: number;
  contentWeight: number;
  styleWeight: number;
}

/**
 * The exact submission a run was made from. Byte fields are private copies,
 * so a history record stays re-submittable even after the user keeps
 * painting — replaying one must reproduce the job bit for bit.
 */
export interface RunRecord {
  task: Task;
  image: Uint8Array;
  mask: Uint8Array; // gray8 PNG as uploaded
  targetText: string;
  sourceText: string;
  seed: number;
  weights: { content: number; style: number };
  reference?: Uint8Array;
  referenceMask?: Uint8Array;
}

export interface HistoryEntry {
  jobId: string;
  record: RunRecord;
  state: HistoryEntryState;
  artifacts: Record<string, string>; // name -> server path ({} for failed)
  thumbUrl: string | null;
  error: string | null;
  finishedAt: number;
}

export interface CompareView {
  left: { jobId: string; params: Record<string, string>; thumbUrl: string | null; artifacts: Record<string, string> };
  right: { jobId: string; params: Record<string, string>; thumbUrl: string | null; artifacts: Record<string, string> };
  /** record fields that differ between the two runs */
  changed: string[];
}

function cloneRecord(record: RunRecord): RunRecord {
  return {
    ...record,
    image: record.image.slice(),
    mask: record.mask.slice(),
    weights: { ...record.weights },
    reference: record.reference?.slice(),
    referenceMask: record.referenceMask?.slice(),
  };
}

function freezeRecord(record: RunRecord): RunRecord {
  Object.freeze(record.weights);
  return Object.freeze(record);
}

function toSubmitFields(record: RunRecord): SubmitFields {
  return {
    task: record.task,
    image: record.image,
    mask: record.mask,
    targetText: record.targetText || undefined,
    sourceText: record.sourceText || undefined,
    seed: record.seed,
    weights: record.weights,
    reference: record.reference,
    referenceMask: record.referenceMask,
  };
}

function bytesEqual(a: Uint8Array | undefined, b: Uint8Array | undefined): boolean {
  if (a === undefined || b === undefined) return a === b;
  if (a.length !== b.length) return false;
  for (let i = 0; i < a.length; i++) if (a[i] !== b[i]) return false;
  return true;
}

/** Human-readable parameter summary for the history strip / compare panel. */
export function paramSummary(record: RunRecord): Record<string, string> {
  const params: Record<string, string> = {
    task: record.task,
    seed: String(record.seed),
    "content weight": String(record.weights.content),
    "style weight": String(record.weights.style),
  };
  if (record.targetText) params["target text"] = record.targetText;
  if (record.sourceText) params["source text"] = record.sourceText;
  if (record.reference) params["style reference"] = "yes";
  return params;
}

/**
 * All client-side studio state: the canvas layers, the form, and the run
 * history. Every mutation of server state flows through the injected
 * StudioClient — the session itself only orchestrates.
 */
export class CanvasSession {
  image: LoadedImage | null = null;
  mask: MaskLayer;
  reference: LoadedImage | null = null;
  referenceMask: MaskLayer | null = null;
  form: FormState;
  readonly history: HistoryEntry[] = [];
  /** at most one in-flight submission per tab */
  inFlight = false;
  /** drives the "service unreachable — retry" banner */
  connectionLost = false;
  pollIntervalMs = 1000;

  constructor(
    readonly client: StudioClient,
    width: number,
    height: number,
  ) {
    this.mask = new MaskLayer(width, height);
    this.form = {
      task: "editing",
      targetText: "",
      sourceText: "",
      seed: 0,
      contentWeight: 5.0,
      styleWeight: 10.0,
    };
  }

  loadImage(image: LoadedImage): void {
    this.image = image;
    this.mask = new MaskLayer(image.width, image.height); // stale strokes never outlive the image
  }

  loadReference(image: LoadedImage, mask: MaskLayer): void {
    if (mask.width !== image.width || mask.height !== image.height) {
      throw new ValidationError("reference mask dims must match the reference image");
    }
    this.reference = image;
    this.referenceMask = mask;
  }

  private validate(): void {
    if (!this.image) throw new ValidationError("load an image first");
    if (this.mask.isEmpty()) throw new ValidationError("mask selects no pixels — paint a region first");
    const { task, targetText } = this.form;
    if (TEXT_TASKS.includes(task) && !targetText) {
      throw new ValidationError(`${task} needs target text`);
    }
    if (REFERENCE_TASKS.includes(task)) {
      if (!this.reference || !this.referenceMask) throw new ValidationError(`${task} needs a style reference image and mask`);
      if (this.referenceMask.isEmpty()) throw new ValidationError("reference mask selects no pixels");
    }
  }

  /** Snapshot the current canvas + form into a re-submittable record. */
  async buildRecord(): Promise<RunRecord> {
    this.validate();
    const image = this.image!;
    const record: RunRecord = {
      task: this.form.task,
      image: image.bytes.slice(),
      mask: await exportMask(this.mask),
      targetText: this.form.targetText,
      sourceText: this.form.sourceText,
      seed: this.form.seed,
      weights: { content: this.form.contentWeight, style: this.form.styleWeight },
    };
    if (REFERENCE_TASKS.includes(this.form.task)) {
      record.reference = this.reference!.bytes.slice();
      record.referenceMask = await exportMask(this.referenceMask!);
    }
    return record;
  }

  /** Submit the current canvas, poll to completion, append to history. */
  async runAndTrack(onProgress?: (progress: number, state: JobState) => void): Promise<HistoryEntry> {
    return this.submitRecord(await this.buildRecord(), onProgress);
  }

  private async submitRecord(record: RunRecord, onProgress?: (progress: number, state: JobState) => void): Promise<HistoryEntry> {
    if (this.inFlight) throw new ValidationError("a submission is already in flight");
    this.inFlight = true;
    try {
      const { id } = await this.client.submitJob(toSubmitFields(record));
      const job = await pollUntilSettled(this.client, id, {
        intervalMs: this.pollIntervalMs,
        onProgress,
      });
      let artifacts: Record<string, string> = {};
      if (job.state === "done") {
        const probe = await this.client.getResult(id);
        if (probe.ready) artifacts = probe.result.artifacts;
      }
      const entry: HistoryEntry = Object.freeze({
        jobId: id,
        record: freezeRecord(record),
        state: job.state as HistoryEntryState,
        artifacts: Object.freeze(artifacts) as Record<string, string>,
        thumbUrl: artifacts["final"] ?? null,
        error: job.error,
        finishedAt: job.finished_at ?? Date.now() / 1000,
      });
      this.history.push(entry);
      this.connectionLost = false;
      return entry;
    } catch (err) {
      if (err instanceof ServiceUnreachable) this.connectionLost = true;
      throw err;
    } finally {
      this.inFlight = false;
    }
  }

  /** One-click retry of the latest run under a fresh seed. */
  async retryWithNewSeed(onProgress?: (progress: number, state: JobState) => void): Promise<HistoryEntry> {
    const last = this.history[this.history.length - 1];
    if (!last) throw new ValidationError("no previous run to retry");
    const record = cloneRecord(last.record);
    record.seed = last.record.seed + 1;
    return this.submitRecord(record, onProgress);
  }

  /** Re-submit a history entry verbatim. Same inputs, same outputs. */
  async replay(entry: HistoryEntry, onProgress?: (progress: number, state: JobState) => void): Promise<HistoryEntry> {
    return this.submitRecord(cloneRecord(entry.record), onProgress);
  }

  /** Side-by-side view of two runs with the differing parameters named. */
  compare(a: HistoryEntry, b: HistoryEntry): CompareView {
    const changed: string[] = [];
    if (a.record.task !== b.record.task) changed.push("task");
    if (a.record.targetText !== b.record.targetText) changed.push("target text");
    if (a.record.sourceText !== b.record.sourceText) changed.push("source text");
    if (a.record.seed !== b.record.seed) changed.push("seed");
    if (a.record.weights.content !== b.record.weights.content) changed.push("content weight");
    if (a.record.weights.style !== b.record.weights.style) changed.push("style weight");
    if (!bytesEqual(a.record.image, b.record.image)) changed.push("image");
    if (!bytesEqual(a.record.mask, b.record.mask)) changed.push("mask");
    if (!bytesEqual(a.record.reference, b.record.reference)) changed.push("reference");
    if (!bytesEqual(a.record.referenceMask, b.record.referenceMask)) changed.push("reference mask");
    return {
      left: { jobId: a.jobId, params: paramSummary(a.record), thumbUrl: a.thumbUrl, artifacts: a.artifacts },
      right: { jobId: b.jobId, params: paramSummary(b.record), thumbUrl: b.thumbUrl, artifacts: b.artifacts },
      changed,
    };
  }

  /**
   * Ask the server how it would narrow the mask for the current source ->
   * target texts. The caller shows the preview and passes it back through
   * acceptShrink once approved; until then the painted mask is untouched.
   */
  async shrinkPreview(): Promise<MaskLayer> {
    if (!this.form.sourceText || !this.form.targetText) {
      throw new ValidationError("shrink preview needs both source and target text");
    }
    const maskPng = await exportMask(this.mask);
    try {
      const png = await this.client.previewShrink(maskPng, this.form.sourceText, this.form.targetText);
      const preview = await importMask(png);
      this.connectionLost = false;
      return preview;
    } catch (err) {
      if (err instanceof ServiceUnreachable) this.connectionLost = true;
      throw err;
    }
  }

  /** Replace the painted mask with an approved shrink preview. */
  acceptShrink(preview: MaskLayer): void {
    if (preview.width !== this.mask.width || preview.height !== this.mask.height) {
      throw new ValidationError("preview dims do not match the canvas");
    }
    this.mask = preview;
  }
}
