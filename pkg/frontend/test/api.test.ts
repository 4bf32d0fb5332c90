import { afterEach, beforeEach, describe, expect, it } from "vitest";
import { ServiceError, ServiceUnreachable, StudioClient, SubmitFields, Task, pollUntilSettled } from "../src/api.js";
import { MaskLayer, exportMask } from "../src/mask.js";
import { StubService } from "./stub_service.js";

let stub: StubService;
let client: StudioClient;

beforeEach(() => {
  stub = new StubService();
  client = new StudioClient("", stub.fetch);
});

afterEach(() => {
  expect(stub.unknownRequests).toEqual([]);
});

async function maskBytes(): Promise<Uint8Array> {
  const layer = new MaskLayer(32, 32);
  layer.paintRect(8, 8, 24, 16);
  return exportMask(layer);
}

async function validFields(overrides: Partial<SubmitFields> = {}): Promise<SubmitFields> {
  return {
    task: "editing",
    image: Uint8Array.of(1, 2, 3, 4),
    mask: await maskBytes(),
    targetText: "FLASH",
    sourceText: "POCKET",
    seed: 7,
    ...overrides,
  };
}

describe("client basics", () => {
  it("reads health", async () => {
    const health = await client.health();
    expect(health.status).toBe("ok");
    expect(health.pixel_dims).toEqual([128, 128]);
  });

  it("submits a job and lists it", async () => {
    const { id, state } = await client.submitJob(await validFields());
    expect(state).toBe("queued");
    const jobs = await client.listJobs();
    expect(jobs.map((j) => j.id)).toContain(id);
    const job = jobs.find((j) => j.id === id)!;
    expect(job.task).toBe("editing");
    // the public listing carries names and params, never raw inputs
    expect(Object.keys(job)).not.toContain("input_paths");
  });

  it("newest job lists first", async () => {
    const a = await client.submitJob(await validFields());
    const b = await client.submitJob(await validFields({ seed: 8 }));
    const jobs = await client.listJobs();
    expect(jobs[0].id).toBe(b.id);
    expect(jobs[1].id).toBe(a.id);
  });
});

describe("validation errors surface with the server detail", () => {
  it("missing target text", async () => {
    const fields = await validFields({ targetText: undefined });
    await expect(client.submitJob(fields)).rejects.toThrow(/requires target_text/);
  });

  it("unknown task", async () => {
    const fields = await validFields({ task: "outpainting" as Task });
    const err = await client.submitJob(fields).catch((e) => e);
    expect(err).toBeInstanceOf(ServiceError);
    expect((err as ServiceError).status).toBe(422);
    expect(String(err)).toMatch(/task must be one of/);
  });

  it("style task without a reference", async () => {
    const fields = await validFields({ task: "style_insertion" });
    await expect(client.submitJob(fields)).rejects.toThrow(/reference and reference_mask/);
  });

  it("negative loss weight is a bad override", async () => {
    const fields = await validFields({ weights: { content: -1 } });
    await expect(client.submitJob(fields)).rejects.toThrow(/bad override/);
  });

  it("shrink preview requires both texts", async () => {
    await expect(client.previewShrink(await maskBytes(), "", "FLASH")).rejects.toThrow(/source_text and target_text/);
  });
});

describe("polling", () => {
  it("result probe reports not-ready until the job settles", async () => {
    const { id } = await client.submitJob(await validFields());
    const probe = await client.getResult(id);
    expect(probe.ready).toBe(false);
    if (!probe.ready) {
      expect(probe.state).toBe("queued");
      expect(probe.progress).toBe(0);
    }
  });

  it("pollUntilSettled reports monotone progress and lands on done", async () => {
    const { id } = await client.submitJob(await validFields());
    const seen: number[] = [];
    const job = await pollUntilSettled(client, id, { intervalMs: 1, onProgress: (p) => seen.push(p) });
    expect(job.state).toBe("done");
    expect(job.progress).toBe(1);
    expect(seen[seen.length - 1]).toBe(1);
    for (let i = 1; i < seen.length; i++) expect(seen[i]).toBeGreaterThanOrEqual(seen[i - 1]);
    const probe = await client.getResult(id);
    expect(probe.ready).toBe(true);
    if (probe.ready) {
      expect(Object.keys(probe.result.artifacts)).toContain("final");
      expect(probe.result.timings.total_s).toBeGreaterThan(0);
    }
  });

  it("a failing job settles as failed with its error", async () => {
    stub.failNext = "RuntimeError: synthetic failure";
    const { id } = await client.submitJob(await validFields());
    const job = await pollUntilSettled(client, id, { intervalMs: 1 });
    expect(job.state).toBe("failed");
    expect(job.error).toMatch(/synthetic failure/);
    const probe = await client.getResult(id);
    expect(probe.ready).toBe(false);
  });

  it("gives up after maxPolls", async () => {
    stub.pollsToFinish = 50;
    const { id } = await client.submitJob(await validFields());
    await expect(pollUntilSettled(client, id, { intervalMs: 1, maxPolls: 3 })).rejects.toThrow(/after 3 polls/);
  });
});

describe("unreachable service", () => {
  it("maps network failure to ServiceUnreachable", async () => {
    stub.offline = true;
    await expect(client.health()).rejects.toThrow(ServiceUnreachable);
    stub.offline = false;
    expect((await client.health()).status).toBe("ok");
  });
});

describe("artifact and attention fetching", () => {
  it("fetches artifact bytes by result path", async () => {
    const { id } = await client.submitJob(await validFields());
    await pollUntilSettled(client, id, { intervalMs: 1 });
    const probe = await client.getResult(id);
    if (!probe.ready) throw new Error("expected ready");
    const final = await client.fetchArtifact(probe.result.artifacts["final"]);
    expect(final.length).toBeGreaterThan(0);
    expect(client.artifactUrl(id, "final")).toBe(probe.result.artifacts["final"]);
  });

  it("missing attention snapshots come back as null, not an exception", async () => {
    const { id } = await client.submitJob(await validFields());
    await pollUntilSettled(client, id, { intervalMs: 1 });
    expect(await client.fetchAttention(id, 0)).not.toBeNull();
    expect(await client.fetchAttention(id, 99)).toBeNull();
  });
});
