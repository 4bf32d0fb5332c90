/**
 * Typed client for the local editing service. Everything the studio does
 * goes through these endpoints — the UI never touches server state any
 * other way.
 */

export const TASKS = [
  "removal",
  "editing",
  "insertion",
  "rescaling",
  "repositioning",
  "style_insertion",
  "style_editing",
] as const;

export type Task = (typeof TASKS)[number];

/** every task except removal renders text, so target_text is required */
export const TEXT_TASKS: readonly Task[] = TASKS.filter((t) => t !== "removal");
/** tasks that take an explicit style reference crop */
export const REFERENCE_TASKS: readonly Task[] = ["style_insertion", "style_editing"];

export type JobState = "queued" | "running" | "done" | "failed";
/** the settled subset of JobState — what a history entry can hold */
export type HistoryEntryState = "done" | "failed";

export interface JobInfo {
  id: string;
  task: Task;
  params: Record<string, unknown>;
  state: JobState;
  progress: number;
  artifacts: string[]; // names only; bytes via the artifact endpoint
  timings: Record<string, number>;
  error: string | null;
  created_at: number;
  finished_at: number | null;
}

export interface JobResult {
  id: string;
  artifacts: Record<string, string>; // name -> server path
  timings: Record<string, number>;
}

export type ResultProbe =
  | { ready: true; result: JobResult }
  | { ready: false; state: JobState; progress: number; error: string | null };

export interface WeightOverrides {
  content?: number;
  style?: number;
  focal_gamma?: number;
}

export interface SubmitFields {
  task: Task;
  image: Uint8Array; // encoded image file
  mask: Uint8Array; // gray8 PNG, 255 = edit region
  targetText?: string;
  sourceText?: string;
  seed?: number;
  weights?: WeightOverrides;
  schedule?: Record<string, unknown>;
  reference?: Uint8Array;
  referenceMask?: Uint8Array;
  removalMask?: Uint8Array;
}

/** server rejected the request; message carries the response detail */
export class ServiceError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(detail);
  }
}

/** could not reach the service at all — surfaced as the retry banner */
export class ServiceUnreachable extends Error {}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

function toBlob(bytes: Uint8Array): Blob {
  // copy into a plain ArrayBuffer so Blob never sees a SharedArrayBuffer view
  const buf = new Uint8Array(bytes.length);
  buf.set(bytes);
  return new Blob([buf.buffer], { type: "image/png" });
}

async function errorDetail(res: Response): Promise<string> {
  try {
    const body = (await res.json()) as { detail?: unknown };
    if (body && typeof body.detail === "string") return body.detail;
    return JSON.stringify(body);
  } catch {
    return `${res.status} ${res.statusText}`;
  }
}

export class StudioClient {
  private readonly fetchFn: FetchLike;

  constructor(
    readonly baseUrl = "",
    fetchFn?: FetchLike,
  ) {
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
  }

  private async request(path: string, init?: RequestInit, allow: number[] = []): Promise<Response> {
    const url = this.baseUrl + path;
    let res: Response;
    try {
      res = await this.fetchFn(url, init);
    } catch (err) {
      throw new ServiceUnreachable(`service unreachable at ${url}: ${(err as Error).message}`);
    }
    if (!res.ok && !allow.includes(res.status)) {
      throw new ServiceError(res.status, await errorDetail(res));
    }
    return res;
  }

  async health(): Promise<{ status: string; pixel_dims: [number, number] }> {
    const res = await this.request("/health");
    return (await res.json()) as { status: string; pixel_dims: [number, number] };
  }

  async submitJob(fields: SubmitFields): Promise<{ id: string; state: JobState }> {
    const form = new FormData();
    form.append("task", fields.task);
    form.append("image", toBlob(fields.image), "image.png");
    form.append("mask", toBlob(fields.mask), "mask.png");
    if (fields.targetText) form.append("target_text", fields.targetText);
    if (fields.sourceText) form.append("source_text", fields.sourceText);
    if (fields.seed !== undefined) form.append("seed", String(fields.seed));
    if (fields.weights) form.append("weights", JSON.stringify(fields.weights));
    if (fields.schedule) form.append("schedule", JSON.stringify(fields.schedule));
    if (fields.reference) form.append("reference", toBlob(fields.reference), "reference.png");
    if (fields.referenceMask) form.append("reference_mask", toBlob(fields.referenceMask), "reference_mask.png");
    if (fields.removalMask) form.append("removal_mask", toBlob(fields.removalMask), "removal_mask.png");
    const res = await this.request("/jobs", { method: "POST", body: form });
    return (await res.json()) as { id: string; state: JobState };
  }

  async listJobs(): Promise<JobInfo[]> {
    const res = await this.request("/jobs");
    const body = (await res.json()) as { jobs: JobInfo[] };
    return body.jobs;
  }

  async getJob(id: string): Promise<JobInfo> {
    const res = await this.request(`/jobs/${id}`);
    return (await res.json()) as JobInfo;
  }

  /** 409 means "not finished yet" and is part of the contract, not an error. */
  async getResult(id: string): Promise<ResultProbe> {
    const res = await this.request(`/jobs/${id}/result`, undefined, [409]);
    if (res.status === 409) {
      const body = (await res.json()) as { state: JobState; progress: number; error: string | null };
      return { ready: false, ...body };
    }
    return { ready: true, result: (await res.json()) as JobResult };
  }

  artifactUrl(id: string, name: string): string {
    return `${this.baseUrl}/jobs/${id}/artifacts/${name}`;
  }

  /** Fetch artifact bytes by the server path from a result payload. */
  async fetchArtifact(path: string): Promise<Uint8Array> {
    const res = await this.request(path);
    return new Uint8Array(await res.arrayBuffer());
  }

  attentionUrl(id: string, step: number, phase?: string): string {
    const suffix = phase ? `?phase=${encodeURIComponent(phase)}` : "";
    return `${this.baseUrl}/jobs/${id}/attention/${step}${suffix}`;
  }

  /** null when the snapshot does not exist (wrong step, pruned job, ...). */
  async fetchAttention(id: string, step: number, phase?: string): Promise<Uint8Array | null> {
    const suffix = phase ? `?phase=${encodeURIComponent(phase)}` : "";
    const res = await this.request(`/jobs/${id}/attention/${step}${suffix}`, undefined, [404]);
    if (res.status === 404) return null;
    return new Uint8Array(await res.arrayBuffer());
  }

  async previewShrink(maskPng: Uint8Array, sourceText: string, targetText: string): Promise<Uint8Array> {
    const form = new FormData();
    form.append("mask", toBlob(maskPng), "mask.png");
    form.append("source_text", sourceText);
    form.append("target_text", targetText);
    const res = await this.request("/preview/shrink", { method: "POST", body: form });
    return new Uint8Array(await res.arrayBuffer());
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

export interface PollOptions {
  /** 1 s cadence against the real service; tests dial this down */
  intervalMs?: number;
  maxPolls?: number;
  onProgress?: (progress: number, state: JobState) => void;
}

/** Poll a job until it settles (done or failed). */
export async function pollUntilSettled(client: StudioClient, id: string, opts: PollOptions = {}): Promise<JobInfo> {
  const interval = opts.intervalMs ?? 1000;
  const maxPolls = opts.maxPolls ?? 600;
  let job: JobInfo | undefined;
  for (let i = 0; i < maxPolls; i++) {
    job = await client.getJob(id);
    opts.onProgress?.(job.progress, job.state);
    if (job.state === "done" || job.state === "failed") return job;
    await sleep(interval);
  }
  throw new Error(`job ${id} still ${job?.state ?? "unknown"} after ${maxPolls} polls`);
}
