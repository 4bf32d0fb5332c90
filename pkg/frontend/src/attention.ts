import { StudioClient, Task } from "./api.js";
import { decodeGray } from "./png.js";

export type Phase = "removal" | "inpainting";

/** Phases a task's pipeline actually runs, in execution order. */
export function phasesForTask(task: Task): Phase[] {
  if (task === "removal") return ["removal"];
  if (task === "insertion" || task === "style_insertion") return ["inpainting"];
  return ["removal", "inpainting"]; // erase first, then re-render
}

export type HeatmapView =
  | { kind: "heatmap"; step: number; phase: Phase | null; width: number; height: number; png: Uint8Array }
  | { kind: "empty"; message: string };

/**
 * Fetch one attention snapshot. A missing step or a pruned job comes back
 * as an informative empty state rather than an exception — the inspector
 * renders it in place of the heatmap.
 */
export async function loadHeatmap(client: StudioClient, jobId: string, step: number, phase?: Phase): Promise<HeatmapView> {
  const png = await client.fetchAttention(jobId, step, phase);
  if (png === null) {
    const where = phase ? `${phase} step ${step}` : `step ${step}`;
    return {
      kind: "empty",
      message: `no attention snapshot for ${where} — either the step was not recorded or the job's artifacts were pruned`,
    };
  }
  const img = await decodeGray(png);
  return { kind: "heatmap", step, phase: phase ?? null, width: img.width, height: img.height, png };
}

/**
 * Discover which steps have snapshots. Recorded steps are contiguous from
 * zero, so probing stops at the first miss.
 */
export async function probeSteps(client: StudioClient, jobId: string, phase: Phase, maxSteps = 64): Promise<number[]> {
  const steps: number[] = [];
  for (let step = 0; step < maxSteps; step++) {
    const png = await client.fetchAttention(jobId, step, phase);
    if (png === null) break;
    steps.push(step);
  }
  return steps;
}
