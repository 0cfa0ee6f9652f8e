/**
 * Scripted end-to-end session against the live Python service: create a
 * session from the fixture image+mask, drag one vertex 10px through the
 * interaction controller, trigger deform, export, and compare byte-for-byte
 * with the service-side golden file.
 *
 * Run with: npm run test:e2e  (needs python3 + the polysnap package installed)
 */
import { ChildProcess, spawn } from "node:child_process";
import { readFileSync } from "node:fs";
import { join, dirname } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { InteractionController } from "../src/interaction.js";
import { UISessionState } from "../src/state.js";
import { ViewTransform } from "../src/transform.js";

const here = dirname(fileURLToPath(import.meta.url));
const repoRoot = join(here, "..", "..");
const goldenDir = join(repoRoot, "tests", "golden");

const MAKE_CKPT = `
import sys, tempfile
from polysnap.deformer import DeformerConfig
from polysnap.features import FeatureConfig
from polysnap.model import Model, ModelConfig
from polysnap.trainer import AdamState, save_checkpoint
cfg = ModelConfig(
    features=FeatureConfig(crop_size=64, stem_width=8, stage_widths=(8, 12, 16),
                           fpn_width=8, lateral_width=4),
    deformer=DeformerConfig(layers=2, d_model=16, d_k=16, ffn_width=24),
    vertex_spacing=8.0)
save_checkpoint(sys.argv[1], Model.init(cfg, seed=0), AdamState(), step=0)
print("ok")
`;

let proc: ChildProcess | null = null;
let baseUrl = "";

function b64(path: string): string {
  return readFileSync(path).toString("base64");
}

async function waitForServer(url: string, tries = 100): Promise<void> {
  for (let i = 0; i < tries; i++) {
    try {
      const res = await fetch(`${url}/healthz`);
      if (res.ok) return;
    } catch {
      /* not up yet */
    }
    await new Promise((r) => setTimeout(r, 200));
  }
  throw new Error("service did not come up");
}

beforeAll(async () => {
  const { mkdtempSync } = await import("node:fs");
  const { tmpdir } = await import("node:os");
  const work = mkdtempSync(join(tmpdir(), "polysnap-e2e-"));
  const ckpt = join(work, "identity.ckpt");

  await new Promise<void>((resolve, reject) => {
    const make = spawn("python3", ["-c", MAKE_CKPT, ckpt], { cwd: repoRoot });
    let err = "";
    make.stderr.on("data", (d) => (err += d));
    make.on("exit", (code) => (code === 0 ? resolve() : reject(new Error(err))));
  });

  proc = spawn("python3", ["-m", "polysnap.cli", "serve", "--checkpoint", ckpt,
    "--port", "8841", "--data-dir", join(work, "sessions")], { cwd: repoRoot });
  baseUrl = "http://127.0.0.1:8841";
  let stderr = "";
  proc.stderr?.on("data", (d) => (stderr += d));
  proc.on("exit", (code) => {
    if (code && code !== 0) console.error("service exited:", code, stderr);
  });
  await waitForServer(baseUrl);
}, 120_000);

afterAll(() => {
  proc?.kill("SIGINT");
});

describe("annotator end-to-end against the live service", () => {
  it("create -> drag 10px -> deform -> export matches the golden file", async () => {
    const api = new ApiClient(baseUrl);
    const state = new UISessionState();
    const view = new ViewTransform(2, 0, 0); // zoom 2: 10 image px = 20 screen px
    const hooks = { redraw() {}, toast() {}, setBanner() {} };
    const controller = new InteractionController(state, api, view, hooks);

    const doc = await api.createSession({
      image_png: b64(join(goldenDir, "fixture_image.png")),
      masks_png: [b64(join(goldenDir, "fixture_mask.png"))],
    });
    state.loadSession(await api.getSession(doc.id));
    expect(state.instanceCount()).toBe(1);

    const first = state.viewPolygons(0)[0][0];
    const start = view.imageToScreen({ x: first[0], y: first[1] });

    // round-trip sanity: screen -> image -> screen within 0.5px
    const rt = view.imageToScreen(view.screenToImage(start));
    expect(Math.hypot(rt.x - start.x, rt.y - start.y)).toBeLessThanOrEqual(0.5);

    // drag vertex 0 by exactly +10 image px in x
    controller.onPointerDown(start);
    expect(state.selection).toMatchObject({ instance: 0, polygon: 0, vertex: 0 });
    for (let s = 1; s <= 10; s++) {
      controller.onPointerMove({ x: start.x + 2 * s, y: start.y });
    }
    await controller.onPointerUp(); // PATCH
    expect(state.hasPending(0)).toBe(false);
    expect(state.acknowledged[0].polygons[0][0][0]).toBeCloseTo(first[0] + 10, 10);

    const ok = await controller.deformInstance(0); // flush (noop) + POST deform
    expect(ok).toBe(true);

    const raw = await api.exportRaw(state.sessionId);
    const golden = readFileSync(join(goldenDir, "session_export.json")).toString();
    expect(raw).toBe(golden);
  }, 120_000);
});
